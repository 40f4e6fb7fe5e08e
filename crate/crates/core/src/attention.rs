//! Block-sparse multi-head attention with streaming softmax, plus the exact
//! dense reference it is checked against.
//!
//! Tensors are `heads × tokens × dim` in the padded layout of a
//! [`BlockLayout`]. Padding keys never receive weight and padding query rows
//! are written as zeros.

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;

use crate::error::{shape_err, CarveError, Result};
use crate::mask::BlockMask;
use crate::partition::BlockLayout;

/// Query, key and value tensors for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'a> {
    pub q: ArrayView3<'a, f32>,
    pub k: ArrayView3<'a, f32>,
    pub v: ArrayView3<'a, f32>,
    pub layout: &'a BlockLayout,
}

impl<'a> AttentionInputs<'a> {
    pub fn new(
        q: ArrayView3<'a, f32>,
        k: ArrayView3<'a, f32>,
        v: ArrayView3<'a, f32>,
        layout: &'a BlockLayout,
    ) -> Result<Self> {
        let shape = q.dim();
        if k.dim() != shape || v.dim() != shape {
            return shape_err(format!(
                "q {:?}, k {:?} and v {:?} must share one shape",
                q.dim(),
                k.dim(),
                v.dim()
            ));
        }
        if shape.1 != layout.padded_len() {
            return shape_err(format!(
                "token axis has {} entries but the layout needs {}",
                shape.1,
                layout.padded_len()
            ));
        }
        Ok(Self { q, k, v, layout })
    }

    pub fn heads(&self) -> usize {
        self.q.dim().0
    }

    pub fn dim(&self) -> usize {
        self.q.dim().2
    }

    /// Block id where condition keys begin.
    pub fn text_block_start(&self) -> usize {
        self.layout.vision_blocks
    }
}

/// Additive logit bias on vision-query × condition-key scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AmplifierBias(pub f32);

/// `β = −ρ · ln(numel_s / numel_target)`.
pub fn compute_beta(numel_s: usize, numel_target: usize, rho: f64) -> Result<f64> {
    if numel_s == 0 || numel_target == 0 {
        return Err(CarveError::Domain(format!(
            "token counts must be positive, got {numel_s} and {numel_target}"
        )));
    }
    if rho == 0.0 || numel_s == numel_target {
        return Ok(0.0);
    }
    Ok(-rho * (numel_s as f64 / numel_target as f64).ln())
}

/// Exact two-pass softmax attention.
///
/// `bias(head, query_block, key_block)` is added to every logit of that block
/// pair; return `f32::NEG_INFINITY` to exclude the pair. Accumulates in f64.
pub fn dense_attention(
    inputs: &AttentionInputs<'_>,
    bias: impl Fn(usize, usize, usize) -> f32 + Sync,
) -> Array3<f32> {
    let (heads, n, d) = inputs.q.dim();
    let layout = inputs.layout;
    let m = layout.m;
    let scale = 1.0 / (d as f64).sqrt();
    let valid = layout.validity();

    let mut out = Array3::<f32>::zeros((heads, n, d));
    out.as_slice_mut()
        .expect("fresh arrays are contiguous")
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(hi, row)| {
            let (h, i) = (hi / n, hi % n);
            if !valid[i] {
                return;
            }
            let q = inputs.q.slice(ndarray::s![h, i, ..]);
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if !valid[j] {
                        return f64::NEG_INFINITY;
                    }
                    let b = bias(h, i / m, j / m) as f64;
                    if b == f64::NEG_INFINITY {
                        return b;
                    }
                    let k = inputs.k.slice(ndarray::s![h, j, ..]);
                    let dot: f64 = q.iter().zip(k.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                    dot * scale + b
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return;
            }
            let mut acc = vec![0.0f64; d];
            let mut sum = 0.0f64;
            for (j, &s) in logits.iter().enumerate() {
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let w = (s - max).exp();
                sum += w;
                for (a, &v) in acc.iter_mut().zip(inputs.v.slice(ndarray::s![h, j, ..]).iter()) {
                    *a += w * v as f64;
                }
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = (a / sum) as f32;
            }
        });
    out
}

/// Block-sparse attention.
///
/// Vision query blocks visit their selected key blocks in ascending order with
/// a running max / running sum softmax; `beta` is added to logits of condition
/// key blocks. Condition query blocks attend to every block without bias.
pub fn carve_attention(
    inputs: &AttentionInputs<'_>,
    mask: &BlockMask,
    beta: AmplifierBias,
) -> Result<Array3<f32>> {
    let (heads, n, d) = inputs.q.dim();
    let layout = inputs.layout;
    let (mv, total, m) = (layout.vision_blocks, layout.total_blocks(), layout.m);
    if mask.shape() != (heads, mv, total) {
        return shape_err(format!(
            "mask is {:?}, expected ({heads}, {mv}, {total})",
            mask.shape()
        ));
    }
    if let Some((h, r)) = mask.empty_row() {
        return Err(CarveError::Contract(format!(
            "head {h} query block {r} selects no key blocks"
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let text_start = inputs.text_block_start();
    let all_blocks: Vec<usize> = (0..total).collect();

    let mut out = Array3::<f32>::zeros((heads, n, d));
    out.as_slice_mut()
        .expect("fresh arrays are contiguous")
        .par_chunks_mut(m * d)
        .enumerate()
        .for_each(|(hb, chunk)| {
            let (h, qb) = (hb / total, hb % total);
            let vision_query = qb < mv;
            let selected: Vec<usize> = if vision_query {
                (0..total).filter(|&j| mask.get(h, qb, j)).collect()
            } else {
                all_blocks.clone()
            };
            let rows = layout.valid_in_block(qb);
            let mut scores = vec![0.0f32; m];
            for r in 0..rows {
                let i = qb * m + r;
                let q: Vec<f32> = inputs.q.slice(ndarray::s![h, i, ..]).iter().map(|&x| x * scale).collect();
                let mut run_max = f32::NEG_INFINITY;
                let mut run_sum = 0.0f32;
                let acc = &mut chunk[r * d..(r + 1) * d];
                for &kb in &selected {
                    let keys = layout.valid_in_block(kb);
                    if keys == 0 {
                        continue;
                    }
                    let bias = if vision_query && kb >= text_start { beta.0 } else { 0.0 };
                    let mut blk_max = f32::NEG_INFINITY;
                    for (c, s) in scores[..keys].iter_mut().enumerate() {
                        let k = inputs.k.slice(ndarray::s![h, kb * m + c, ..]);
                        *s = q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f32>() + bias;
                        blk_max = blk_max.max(*s);
                    }
                    let new_max = run_max.max(blk_max);
                    let correction = (run_max - new_max).exp();
                    run_sum *= correction;
                    acc.iter_mut().for_each(|a| *a *= correction);
                    for (c, &s) in scores[..keys].iter().enumerate() {
                        let p = (s - new_max).exp();
                        run_sum += p;
                        let v = inputs.v.slice(ndarray::s![h, kb * m + c, ..]);
                        for (a, &x) in acc.iter_mut().zip(v.iter()) {
                            *a += p * x;
                        }
                    }
                    run_max = new_max;
                }
                let inv = 1.0 / run_sum;
                acc.iter_mut().for_each(|a| *a *= inv);
            }
        });
    Ok(out)
}

/// Dense attention with deselected blocks at −∞ and `beta` on vision-query ×
/// condition-key pairs; the reference [`carve_attention`] must match.
pub fn masked_dense_reference(
    inputs: &AttentionInputs<'_>,
    mask: &BlockMask,
    beta: AmplifierBias,
) -> Array3<f32> {
    let mv = inputs.layout.vision_blocks;
    dense_attention(inputs, |h, qb, kb| {
        if qb >= mv {
            0.0
        } else if !mask.get(h, qb, kb) {
            f32::NEG_INFINITY
        } else if kb >= mv {
            beta.0
        } else {
            0.0
        }
    })
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_one_block(n: usize) -> BlockLayout {
        BlockLayout::new(n, 0, n)
    }

    #[test]
    fn single_token_returns_value() {
        let layout = layout_one_block(1);
        let q = Array3::from_shape_vec((1, 1, 2), vec![0.3, -1.0]).unwrap();
        let k = Array3::from_shape_vec((1, 1, 2), vec![2.0, 0.5]).unwrap();
        let v = Array3::from_shape_vec((1, 1, 2), vec![7.0, -3.0]).unwrap();
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view(), &layout).unwrap();
        let dense = dense_attention(&inputs, |_, _, _| 0.0);
        assert_eq!(dense.as_slice().unwrap(), &[7.0, -3.0]);
        let carve = carve_attention(&inputs, &BlockMask::full(1, 1, 1), AmplifierBias(0.0)).unwrap();
        assert_eq!(carve.as_slice().unwrap(), &[7.0, -3.0]);
    }

    #[test]
    fn sharp_one_hot_attention_picks_matching_value() {
        let n = 4;
        let layout = layout_one_block(n);
        let q = Array3::from_shape_fn((1, n, n), |(_, i, j)| if i == j { 40.0 } else { 0.0 });
        let k = Array3::from_shape_fn((1, n, n), |(_, i, j)| if i == j { 40.0 } else { 0.0 });
        let v = Array3::from_shape_fn((1, n, n), |(_, i, _)| i as f32);
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view(), &layout).unwrap();
        let out = dense_attention(&inputs, |_, _, _| 0.0);
        for i in 0..n {
            assert!((out[[0, i, 0]] - i as f32).abs() < 1e-4);
        }
    }

    #[test]
    fn padding_rows_are_zero() {
        let layout = BlockLayout::new(3, 0, 2);
        let x = Array3::from_shape_fn((1, 4, 2), |(_, i, d)| (i + d) as f32 * 0.1 + 1.0);
        let inputs = AttentionInputs::new(x.view(), x.view(), x.view(), &layout).unwrap();
        let out = carve_attention(&inputs, &BlockMask::full(1, 2, 2), AmplifierBias(0.0)).unwrap();
        assert_eq!(out[[0, 3, 0]], 0.0);
        assert_eq!(out[[0, 3, 1]], 0.0);
        let dense = dense_attention(&inputs, |_, _, _| 0.0);
        assert!(max_abs_diff(&out, &dense) < 1e-6);
    }

    #[test]
    fn empty_row_is_contract_violation() {
        let layout = BlockLayout::new(4, 0, 2);
        let x = Array3::<f32>::ones((1, 4, 2));
        let inputs = AttentionInputs::new(x.view(), x.view(), x.view(), &layout).unwrap();
        let mut mask = BlockMask::full(1, 2, 2);
        mask.set(0, 1, 0, false);
        mask.set(0, 1, 1, false);
        assert!(matches!(
            carve_attention(&inputs, &mask, AmplifierBias(0.0)),
            Err(CarveError::Contract(_))
        ));
    }

    #[test]
    fn mask_shape_checked() {
        let layout = BlockLayout::new(4, 0, 2);
        let x = Array3::<f32>::ones((1, 4, 2));
        let inputs = AttentionInputs::new(x.view(), x.view(), x.view(), &layout).unwrap();
        assert!(matches!(
            carve_attention(&inputs, &BlockMask::full(2, 2, 2), AmplifierBias(0.0)),
            Err(CarveError::Shape(_))
        ));
        let short = Array3::<f32>::ones((1, 3, 2));
        assert!(AttentionInputs::new(short.view(), short.view(), short.view(), &layout).is_err());
    }

    #[test]
    fn beta_values() {
        assert_eq!(compute_beta(100, 100, 0.5).unwrap(), 0.0);
        assert_eq!(compute_beta(10, 1000, 0.0).unwrap(), 0.0);
        let b = compute_beta(5625, 10_000, 0.5).unwrap();
        assert!((b - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(compute_beta(0, 10, 0.5).is_err());
    }
}
