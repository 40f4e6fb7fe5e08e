#![allow(dead_code)]

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tokencarve::partition::BlockLayout;
use tokencarve::pipeline::{shifted_sigmas, StagePlan};
use tokencarve::sfc::{GridDims, Permutation};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Gaussian tensor in the padded layout with zero padding rows.
pub fn padded_normal(layout: &BlockLayout, heads: usize, dim: usize, scale: f32, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let n = layout.padded_len();
    let mut x = Array3::zeros((heads, n, dim));
    for h in 0..heads {
        for i in 0..n {
            if layout.is_valid(i) {
                for d in 0..dim {
                    x[[h, i, d]] = scale * rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
    }
    x
}

/// Token-level naive softmax attention in f64.
///
/// `logit_bias(h, i, j)` returns `None` to drop the pair. Rows with nothing
/// allowed, and padding rows, come back as zeros.
pub fn naive_attention(
    q: &Array3<f32>,
    k: &Array3<f32>,
    v: &Array3<f32>,
    valid: &[bool],
    logit_bias: impl Fn(usize, usize, usize) -> Option<f64>,
) -> Array3<f64> {
    let (heads, n, d) = q.dim();
    let mut out = Array3::<f64>::zeros((heads, n, d));
    for h in 0..heads {
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let mut logits = Vec::new();
            for j in 0..n {
                if !valid[j] {
                    continue;
                }
                if let Some(b) = logit_bias(h, i, j) {
                    let dot: f64 = (0..d).map(|c| q[[h, i, c]] as f64 * k[[h, j, c]] as f64).sum();
                    logits.push((j, dot / (d as f64).sqrt() + b));
                }
            }
            if logits.is_empty() {
                continue;
            }
            let max = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x.1 - max).exp()).sum();
            for &(j, l) in &logits {
                let w = (l - max).exp() / z;
                for c in 0..d {
                    out[[h, i, c]] += w * v[[h, j, c]] as f64;
                }
            }
        }
    }
    out
}

pub fn max_err(a: &Array3<f32>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Block pairs `(i, j)` touched by some 26-neighbour cell pair, scanned over the
/// grid in row-major order. Includes every `(b, b)`.
pub fn brute_adjacency(dims: GridDims, perm: &Permutation, m: usize) -> Vec<Vec<bool>> {
    let n = dims.cells();
    let blocks = n.div_ceil(m);
    // block of each grid cell, computed from the forward list only
    let mut block_of = vec![0usize; n];
    for (pos, &cell) in perm.forward().iter().enumerate() {
        block_of[cell as usize] = pos / m;
    }
    let mut adj = vec![vec![false; blocks]; blocks];
    let (t, h, w) = (dims.t as i64, dims.h as i64, dims.w as i64);
    for a in 0..t {
        for b in 0..h {
            for c in 0..w {
                let bi = block_of[((a * h + b) * w + c) as usize];
                for da in -1..=1 {
                    for db in -1..=1 {
                        for dc in -1..=1 {
                            let (x, y, z) = (a + da, b + db, c + dc);
                            if x < 0 || y < 0 || z < 0 || x >= t || y >= h || z >= w {
                                continue;
                            }
                            let bj = block_of[((x * h + y) * w + z) as usize];
                            adj[bi][bj] = true;
                        }
                    }
                }
            }
        }
    }
    adj
}

/// Chebyshev distance between two row-major cells.
pub fn cheb(dims: GridDims, a: usize, b: usize) -> usize {
    let ca = [a / (dims.h * dims.w), a / dims.w % dims.h, a % dims.w];
    let cb = [b / (dims.h * dims.w), b / dims.w % dims.h, b % dims.w];
    (0..3).map(|i| ca[i].abs_diff(cb[i])).max().unwrap()
}

/// Gaussian velocity as `slope·x + offset` at noise level `sigma`.
pub fn velocity_affine(sigma: f64, mu: f64, s: f64) -> (f64, f64) {
    let keep = 1.0 - sigma;
    let den = keep * keep * s * s + sigma * sigma;
    ((sigma - keep * s * s) / den, -sigma * mu / den)
}

/// Terminal per-cell law `(mean, std)` of a plan driven by the Gaussian
/// velocity, started from standard normal noise. Euler steps and clean
/// predictions are affine; re-noising adds independent variance. Integer
/// upsampling ratios only, so each output cell copies one input cell.
pub fn plan_law(plan: &StagePlan, mu: f64, s: f64) -> (f64, f64) {
    let (mut mean, mut var) = (0.0f64, 1.0f64);
    let last = plan.stages.len() - 1;
    for (i, st) in plan.stages.iter().enumerate() {
        let sched = shifted_sigmas(&st.steps, plan.base_steps, st.alpha).unwrap();
        for (j, (sg, next)) in sched.pairs().enumerate() {
            let (a, b) = velocity_affine(sg, mu, s);
            let (slope, off) = if i < last && j + 1 == sched.steps() {
                (1.0 - sg * a, -sg * b)
            } else {
                (1.0 + (next - sg) * a, (next - sg) * b)
            };
            mean = slope * mean + off;
            var *= slope * slope;
        }
        if i < last {
            let nx = &plan.stages[i + 1];
            let sg = shifted_sigmas(&nx.steps[..1], plan.base_steps, nx.alpha).unwrap().sigmas[0];
            mean *= 1.0 - sg;
            var = (1.0 - sg).powi(2) * var + sg * sg;
        }
    }
    (mean, var.sqrt())
}

pub fn moments(x: impl Iterator<Item = f32>) -> (f64, f64) {
    let v: Vec<f64> = x.map(f64::from).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Proptest settings for integration tests, which have no `lib.rs` beside them
/// to anchor regression files.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
