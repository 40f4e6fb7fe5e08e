//! Dynamic block selection: block-pooled relevance, top-k with a cumulative
//! probability cutoff, and the union with the static masks.

use ndarray::ArrayView3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CarveError, Result};
use crate::partition::{BlockLayout, BlockMatrix, StaticMasks};

/// Per-head block means, `heads × blocks × dim`.
#[derive(Clone, Debug)]
pub struct PooledBlocks {
    pub heads: usize,
    pub blocks: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    /// Real tokens averaged into each block.
    pub valid_counts: Vec<usize>,
}

impl PooledBlocks {
    pub fn get(&self, head: usize, block: usize) -> &[f32] {
        let s = (head * self.blocks + block) * self.dim;
        &self.values[s..s + self.dim]
    }

    /// Blocks with no real tokens; their mean is defined as zero.
    pub fn empty_blocks(&self) -> Vec<usize> {
        (0..self.blocks).filter(|&b| self.valid_counts[b] == 0).collect()
    }
}

/// Mean of the real tokens of every block in `x` (`heads × padded_len × dim`).
pub fn block_pool(x: ArrayView3<'_, f32>, layout: &BlockLayout) -> Result<PooledBlocks> {
    block_pool_first(x, layout, layout.total_blocks())
}

/// Like [`block_pool`] but only over the first `blocks` blocks.
pub fn block_pool_first(
    x: ArrayView3<'_, f32>,
    layout: &BlockLayout,
    blocks: usize,
) -> Result<PooledBlocks> {
    let (heads, n, dim) = x.dim();
    if n != layout.padded_len() {
        return shape_err(format!(
            "token axis has {n} entries but the layout needs {}",
            layout.padded_len()
        ));
    }
    let m = layout.m;
    let valid_counts: Vec<usize> = (0..blocks).map(|b| layout.valid_in_block(b)).collect();
    let mut values = vec![0.0f32; heads * blocks * dim];
    for h in 0..heads {
        for b in 0..blocks {
            let count = valid_counts[b];
            if count == 0 {
                continue;
            }
            let out = &mut values[(h * blocks + b) * dim..(h * blocks + b + 1) * dim];
            // real tokens are a prefix of each block
            for i in b * m..b * m + count {
                for (o, &v) in out.iter_mut().zip(x.slice(ndarray::s![h, i, ..])) {
                    *o += v;
                }
            }
            let inv = 1.0 / count as f32;
            out.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(PooledBlocks {
        heads,
        blocks,
        dim,
        values,
        valid_counts,
    })
}

/// Row-stochastic block relevance, `heads × query_blocks × key_blocks`.
#[derive(Clone, Debug)]
pub struct Relevance {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f32>,
}

impl Relevance {
    pub fn from_rows(heads: usize, rows: usize, cols: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != heads * rows * cols {
            return shape_err("relevance buffer does not match heads × rows × cols");
        }
        Ok(Self {
            heads,
            rows,
            cols,
            probs,
        })
    }

    pub fn row(&self, head: usize, row: usize) -> &[f32] {
        let s = (head * self.rows + row) * self.cols;
        &self.probs[s..s + self.cols]
    }
}

/// `softmax(Q̂ K̂ᵀ / √d)` over pooled query and key blocks.
pub fn relevance(pooled_q: &PooledBlocks, pooled_k: &PooledBlocks) -> Result<Relevance> {
    if pooled_q.heads != pooled_k.heads || pooled_q.dim != pooled_k.dim {
        return shape_err(format!(
            "pooled query ({}h × {}d) and key ({}h × {}d) disagree",
            pooled_q.heads, pooled_q.dim, pooled_k.heads, pooled_k.dim
        ));
    }
    let (heads, rows, cols) = (pooled_q.heads, pooled_q.blocks, pooled_k.blocks);
    let scale = 1.0 / (pooled_q.dim as f32).sqrt();
    let mut probs = vec![0.0f32; heads * rows * cols];
    probs
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(hr, out)| {
            let (h, r) = (hr / rows, hr % rows);
            let q = pooled_q.get(h, r);
            for (j, o) in out.iter_mut().enumerate() {
                let k = pooled_k.get(h, j);
                *o = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            softmax_in_place(out);
        });
    Ok(Relevance {
        heads,
        rows,
        cols,
        probs,
    })
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Minimum fraction of vision blocks kept per query block, in (0, 1].
    pub k: f64,
    /// Cumulative probability the selection must exceed, in [0, 1).
    pub p: f64,
}

/// Selection rates per stage for a two-stage run.
pub const DEFAULT_STAGE_RATES: [f64; 2] = [0.3, 0.2];

impl Default for SelectionParams {
    fn default() -> Self {
        Self { k: 0.3, p: 0.3 }
    }
}

impl SelectionParams {
    pub fn new(k: f64, p: f64) -> Result<Self> {
        if !(k > 0.0 && k <= 1.0) {
            return Err(CarveError::Domain(format!("selection rate {k} not in (0, 1]")));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(CarveError::Domain(format!("cutoff probability {p} not in [0, 1)")));
        }
        Ok(Self { k, p })
    }

    /// `⌈k·M_v⌉`, at least one.
    pub fn min_blocks(&self, vision_blocks: usize) -> usize {
        // guard against 0.3 * 10 = 3.0000000000000004
        let raw = self.k * vision_blocks as f64;
        ((raw - 1e-9).ceil() as usize).max(1)
    }
}

/// Per-head selection bits, `heads × rows × cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    heads: usize,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(heads: usize, rows: usize, cols: usize) -> Self {
        Self {
            heads,
            rows,
            cols,
            bits: vec![false; heads * rows * cols],
        }
    }

    pub fn full(heads: usize, rows: usize, cols: usize) -> Self {
        Self {
            heads,
            rows,
            cols,
            bits: vec![true; heads * rows * cols],
        }
    }

    pub fn from_bits(heads: usize, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != heads * rows * cols {
            return shape_err(format!(
                "{} bits cannot form a {heads} × {rows} × {cols} mask",
                bits.len()
            ));
        }
        Ok(Self {
            heads,
            rows,
            cols,
            bits,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.heads, self.rows, self.cols)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, head: usize, row: usize, col: usize) -> bool {
        self.bits[(head * self.rows + row) * self.cols + col]
    }

    pub fn set(&mut self, head: usize, row: usize, col: usize, v: bool) {
        self.bits[(head * self.rows + row) * self.cols + col] = v;
    }

    pub fn row(&self, head: usize, row: usize) -> &[bool] {
        let s = (head * self.rows + row) * self.cols;
        &self.bits[s..s + self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn head_count(&self, head: usize) -> usize {
        let n = self.rows * self.cols;
        self.bits[head * n..(head + 1) * n].iter().filter(|&&b| b).count()
    }

    /// First `(head, row)` with no selected block, if any.
    pub fn empty_row(&self) -> Option<(usize, usize)> {
        (0..self.heads)
            .flat_map(|h| (0..self.rows).map(move |r| (h, r)))
            .find(|&(h, r)| !self.row(h, r).iter().any(|&b| b))
    }
}

/// Indices of one relevance row ordered by descending probability, ties by
/// ascending block index.
pub fn ranked_blocks(row: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Number of top-ranked blocks to keep for one row.
pub fn selection_size(row: &[f32], ranked: &[usize], params: &SelectionParams, vision_blocks: usize) -> usize {
    let mut cum = 0.0f64;
    let mut below = 0;
    for &j in ranked {
        cum += row[j] as f64;
        if cum <= params.p {
            below += 1;
        } else {
            break;
        }
    }
    (below + 1).max(params.min_blocks(vision_blocks)).min(row.len())
}

/// Importance mask `B_top`: per row, the smallest top-ranked prefix whose mass
/// exceeds `p`, widened to at least `⌈k·M_v⌉` blocks.
pub fn importance_mask(rel: &Relevance, params: &SelectionParams, vision_blocks: usize) -> BlockMask {
    let (heads, rows, cols) = (rel.heads, rel.rows, rel.cols);
    let mut bits = vec![false; heads * rows * cols];
    bits.par_chunks_mut(cols).enumerate().for_each(|(hr, out)| {
        let row = rel.row(hr / rows, hr % rows);
        let ranked = ranked_blocks(row);
        let n_keep = selection_size(row, &ranked, params, vision_blocks);
        for &j in &ranked[..n_keep] {
            out[j] = true;
        }
    });
    BlockMask {
        heads,
        rows,
        cols,
        bits,
    }
}

/// `B = B_top ∪ B_cond ∪ B_adja` restricted to vision query rows.
pub fn union_mask(
    top: &BlockMask,
    cond: &BlockMatrix,
    adja: &BlockMatrix,
    layout: &BlockLayout,
) -> Result<BlockMask> {
    let mv = layout.vision_blocks;
    let total = layout.total_blocks();
    if top.rows != mv || top.cols != total {
        return shape_err(format!(
            "importance mask is {}×{}, layout needs {mv}×{total}",
            top.rows, top.cols
        ));
    }
    if cond.rows() != total || cond.cols() != total {
        return shape_err("condition mask does not match the layout");
    }
    if adja.rows() != mv || adja.cols() != mv {
        return shape_err("adjacency mask does not match the layout");
    }
    let mut out = top.clone();
    for h in 0..top.heads {
        for i in 0..mv {
            for j in 0..total {
                let static_bit = cond.get(i, j) || (j < mv && adja.get(i, j));
                if static_bit {
                    out.set(h, i, j, true);
                }
            }
        }
    }
    Ok(out)
}

/// Summary of a built mask.
#[derive(Clone, Debug, Serialize)]
pub struct MaskStats {
    pub selected_fraction: f64,
    pub rows_meeting_cutoff: usize,
    pub rows: usize,
}

/// Pools `q` and `k`, scores block relevance and returns the final mask.
pub fn build_block_mask(
    q: ArrayView3<'_, f32>,
    k: ArrayView3<'_, f32>,
    layout: &BlockLayout,
    statics: &StaticMasks,
    params: &SelectionParams,
) -> Result<(BlockMask, MaskStats)> {
    let pq = block_pool_first(q, layout, layout.vision_blocks)?;
    let pk = block_pool(k, layout)?;
    let rel = relevance(&pq, &pk)?;
    let top = importance_mask(&rel, params, layout.vision_blocks);

    let mut meeting = 0;
    for h in 0..rel.heads {
        for r in 0..rel.rows {
            let mass: f64 = rel
                .row(h, r)
                .iter()
                .zip(top.row(h, r))
                .filter(|(_, &b)| b)
                .map(|(&p, _)| p as f64)
                .sum();
            if mass > params.p {
                meeting += 1;
            }
        }
    }
    let mask = union_mask(&top, &statics.cond, &statics.adja, layout)?;
    let stats = MaskStats {
        selected_fraction: mask.count() as f64 / mask.bits.len().max(1) as f64,
        rows_meeting_cutoff: meeting,
        rows: rel.heads * rel.rows,
    };
    Ok((mask, stats))
}
