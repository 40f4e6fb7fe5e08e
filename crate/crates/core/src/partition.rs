//! Fixed-size block partition of a curve-ordered token sequence and the
//! static (input-independent) block masks derived from it.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::sfc::{padded_token_count, GridDims, Permutation};

/// Token layout of one attention call.
///
/// Vision tokens occupy curve positions `[0, n_valid)` followed by virtual
/// padding up to `vision_blocks * m`. Condition tokens start on the next block
/// boundary and are padded to whole blocks on their own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockLayout {
    pub m: usize,
    pub n_valid: usize,
    pub n_cond: usize,
    pub vision_blocks: usize,
    pub cond_blocks: usize,
}

impl BlockLayout {
    pub fn new(n_valid: usize, n_cond: usize, m: usize) -> Self {
        assert!(m >= 1, "block size must be positive");
        Self {
            m,
            n_valid,
            n_cond,
            vision_blocks: n_valid.div_ceil(m),
            cond_blocks: n_cond.div_ceil(m),
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.vision_blocks + self.cond_blocks
    }

    /// Padded sequence length `m * total_blocks`.
    pub fn padded_len(&self) -> usize {
        self.m * self.total_blocks()
    }

    /// First token position of the condition segment.
    pub fn cond_offset(&self) -> usize {
        self.m * self.vision_blocks
    }

    pub fn vision_padding(&self) -> usize {
        padded_token_count(self.n_valid, self.m).1
    }

    pub fn block_of(&self, position: usize) -> usize {
        position / self.m
    }

    pub fn is_cond_block(&self, block: usize) -> bool {
        block >= self.vision_blocks
    }

    /// Whether the token at padded position `i` is a real (non-padding) token.
    pub fn is_valid(&self, i: usize) -> bool {
        if i < self.cond_offset() {
            i < self.n_valid
        } else {
            i - self.cond_offset() < self.n_cond
        }
    }

    pub fn validity(&self) -> Vec<bool> {
        (0..self.padded_len()).map(|i| self.is_valid(i)).collect()
    }

    /// Number of real tokens in `block`.
    pub fn valid_in_block(&self, block: usize) -> usize {
        let start = block * self.m;
        let (seg_start, seg_len) = if self.is_cond_block(block) {
            (self.cond_offset(), self.n_cond)
        } else {
            (0, self.n_valid)
        };
        let lo = start - seg_start;
        seg_len.saturating_sub(lo).min(self.m)
    }
}

/// Builds the layout for a `dims` latent plus `n_cond_tokens` condition tokens.
pub fn build_layout(dims: GridDims, m: usize, n_cond_tokens: usize) -> BlockLayout {
    BlockLayout::new(dims.cells(), n_cond_tokens, m)
}

/// Dense row-major boolean matrix over block pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BlockMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// Precomputed masks that depend only on resolution and partition.
#[derive(Clone, Debug)]
pub struct StaticMasks {
    /// `total × total`, true where either block is a condition block.
    pub cond: BlockMatrix,
    /// `vision × vision` 26-neighbourhood adjacency, reflexive.
    pub adja: BlockMatrix,
}

impl StaticMasks {
    pub fn build(layout: &BlockLayout, dims: GridDims, perm: &Permutation) -> Result<Self> {
        Ok(Self {
            cond: condition_mask(layout),
            adja: adjacency_mask(layout, dims, perm)?,
        })
    }
}

pub fn condition_mask(layout: &BlockLayout) -> BlockMatrix {
    let mv = layout.vision_blocks;
    let total = layout.total_blocks();
    BlockMatrix::from_fn(total, total, |i, j| i >= mv || j >= mv)
}

/// Block `i` and block `j` are adjacent when some cell of one lies in the
/// 26-neighbourhood of some cell of the other.
pub fn adjacency_mask(
    layout: &BlockLayout,
    dims: GridDims,
    perm: &Permutation,
) -> Result<BlockMatrix> {
    if perm.len() != dims.cells() || layout.n_valid != dims.cells() {
        return shape_err(format!(
            "layout ({} tokens) and permutation ({} cells) do not match grid {dims}",
            layout.n_valid,
            perm.len()
        ));
    }
    let m = layout.m;
    let mv = layout.vision_blocks;
    let forward = perm.forward();
    let inverse = perm.inverse();

    let mut adja = BlockMatrix::new(mv, mv);
    adja.bits
        .par_chunks_mut(mv)
        .enumerate()
        .for_each(|(block, row)| {
            row[block] = true;
            let end = ((block + 1) * m).min(layout.n_valid);
            for &cell in &forward[block * m..end] {
                let [t, h, w] = dims.coords(cell as usize);
                for nt in t.saturating_sub(1)..=(t + 1).min(dims.t - 1) {
                    for nh in h.saturating_sub(1)..=(h + 1).min(dims.h - 1) {
                        for nw in w.saturating_sub(1)..=(w + 1).min(dims.w - 1) {
                            let pos = inverse[dims.index(nt, nh, nw)] as usize;
                            row[pos / m] = true;
                        }
                    }
                }
            }
        });
    Ok(adja)
}

/// Number of adjacent blocks per vision block, excluding the block itself.
pub fn neighbor_counts(adja: &BlockMatrix) -> Vec<usize> {
    (0..adja.rows())
        .map(|i| adja.row(i).iter().filter(|&&b| b).count() - usize::from(adja.get(i, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfc::build_curve;

    #[test]
    fn toy_layout() {
        let dims = GridDims::new(4, 4, 4).unwrap();
        let l = build_layout(dims, 8, 0);
        assert_eq!((l.vision_blocks, l.cond_blocks), (8, 0));
        let one = build_layout(GridDims::new(1, 1, 1).unwrap(), 1, 0);
        assert_eq!(one.vision_blocks, 1);
    }

    #[test]
    fn full_scale_layout() {
        let l = build_layout(GridDims::new(33, 45, 80).unwrap(), 128, 256);
        assert_eq!((l.vision_blocks, l.cond_blocks, l.total_blocks()), (929, 2, 931));
        assert_eq!(l.vision_padding(), 112);
        assert_eq!(l.valid_in_block(928), 118_800 - 928 * 128);
        assert_eq!(l.valid_in_block(929), 128);
        assert!(!l.is_valid(118_800));
        assert!(l.is_valid(929 * 128));
    }

    #[test]
    fn partial_condition_block() {
        let l = BlockLayout::new(10, 5, 4);
        assert_eq!((l.vision_blocks, l.cond_blocks), (3, 2));
        assert_eq!(l.valid_in_block(2), 2);
        assert_eq!(l.valid_in_block(3), 4);
        assert_eq!(l.valid_in_block(4), 1);
        let valid: Vec<usize> = (0..l.padded_len()).filter(|&i| l.is_valid(i)).collect();
        assert_eq!(valid, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 13, 14, 15, 16]);
    }

    #[test]
    fn condition_mask_shapes() {
        let none = condition_mask(&BlockLayout::new(8, 0, 4));
        assert_eq!(none.count(), 0);
        let one = condition_mask(&BlockLayout::new(8, 4, 4));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(one.get(i, j), i == 2 || j == 2);
            }
        }
        let big = condition_mask(&BlockLayout::new(118_800, 256, 128));
        assert_eq!(big.count(), 931 * 931 - 929 * 929);
    }

    #[test]
    fn single_block_adjacency() {
        let dims = GridDims::new(1, 1, 1).unwrap();
        let perm = build_curve(dims).unwrap();
        let adja = adjacency_mask(&build_layout(dims, 1, 0), dims, &perm).unwrap();
        assert_eq!(adja.rows(), 1);
        assert!(adja.get(0, 0));
    }

    #[test]
    fn adjacency_is_symmetric_and_reflexive() {
        let dims = GridDims::new(5, 6, 7).unwrap();
        let perm = build_curve(dims).unwrap();
        let adja = adjacency_mask(&build_layout(dims, 8, 3), dims, &perm).unwrap();
        assert!(adja.is_symmetric());
        assert!((0..adja.rows()).all(|i| adja.get(i, i)));
    }

    #[test]
    fn mismatched_layout_rejected() {
        let dims = GridDims::new(2, 2, 2).unwrap();
        let perm = build_curve(dims).unwrap();
        let layout = BlockLayout::new(7, 0, 4);
        assert!(adjacency_mask(&layout, dims, &perm).is_err());
    }
}
