//! Padding, FLOPs and sparsity accounting.

use serde::Serialize;

use crate::error::{CarveError, Result};
use crate::mask::BlockMask;
use crate::sfc::{padded_token_count, GridDims};

/// How vision tokens are grouped into attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Curve order, padded once at the end of the sequence.
    Sfc,
    /// Rectangular `(t, h, w)` tiles; every axis is padded to a tile multiple.
    TiledWindow { tile: [usize; 3] },
}

impl PartitionStrategy {
    pub fn label(&self) -> String {
        match self {
            Self::Sfc => "3D-SFC".to_string(),
            Self::TiledWindow { tile: [t, h, w] } => format!("Tiled({t},{h},{w})"),
        }
    }
}

impl std::str::FromStr for PartitionStrategy {
    type Err = CarveError;

    /// `sfc` or `tiled:t,h,w`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "sfc" {
            return Ok(Self::Sfc);
        }
        let Some(spec) = s.strip_prefix("tiled:") else {
            return Err(CarveError::Domain(format!("unknown strategy '{s}'")));
        };
        let tile: GridDims = spec.parse()?;
        Ok(Self::TiledWindow {
            tile: tile.as_array(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub strategy: String,
    pub tokens: usize,
    pub padding_tokens: usize,
    /// `(N_pad² − N²) / N²` over vision tokens only.
    pub extra_matmul_fraction: f64,
    /// Padded token count the attention actually runs over.
    pub effective_tokens: f64,
}

impl OverheadReport {
    /// `label,padding,fraction%` with the fraction at two decimals.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2}%",
            self.strategy,
            self.padding_tokens,
            self.extra_matmul_fraction * 100.0
        )
    }
}

pub fn partition_overhead(dims: GridDims, strategy: PartitionStrategy, m: usize) -> OverheadReport {
    let n = dims.cells();
    let padded = match strategy {
        PartitionStrategy::Sfc => padded_token_count(n, m).0,
        PartitionStrategy::TiledWindow { tile } => dims
            .as_array()
            .iter()
            .zip(tile)
            .map(|(&d, t)| d.div_ceil(t) * t)
            .product(),
    };
    let (n2, p2) = ((n as f64).powi(2), (padded as f64).powi(2));
    OverheadReport {
        strategy: strategy.label(),
        tokens: n,
        padding_tokens: padded - n,
        extra_matmul_fraction: (p2 - n2) / n2,
        effective_tokens: padded as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    /// `ΣB` over all heads.
    pub selected_blocks: u64,
    /// `m·ΣB`: key tokens visited summed over heads and query blocks.
    pub selected_tokens: u64,
    /// Average attended tokens per query, `m·ΣB / (heads·rows)`.
    pub n_prime: f64,
    /// `QKᵀ` plus `PV`: `2 · 2 · heads · N_q · n_prime · d_k`.
    pub total_flops: f64,
    pub dense_flops: f64,
    pub ratio_to_dense: f64,
}

/// FLOPs of block-sparse attention under `mask` with `N_q = m·rows` queries.
pub fn attention_flops(mask: &BlockMask, m: usize, d_k: usize) -> FlopsReport {
    let (heads, rows, cols) = mask.shape();
    let selected_blocks = mask.count() as u64;
    let selected_tokens = m as u64 * selected_blocks;
    let n_prime = selected_tokens as f64 / (heads * rows) as f64;
    let n_q = (m * rows) as f64;
    let total_flops = 4.0 * heads as f64 * n_q * n_prime * d_k as f64;
    let dense_flops = 4.0 * heads as f64 * n_q * (m * cols) as f64 * d_k as f64;
    FlopsReport {
        selected_blocks,
        selected_tokens,
        n_prime,
        total_flops,
        dense_flops,
        ratio_to_dense: selected_blocks as f64 / (heads * rows * cols) as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// Fraction of block pairs skipped, `1 − ΣB / (rows·cols)`, per head.
pub fn effective_sparsity(mask: &BlockMask) -> SparsityReport {
    let (heads, rows, cols) = mask.shape();
    let cells = (rows * cols) as f64;
    let per_head: Vec<f64> = (0..heads)
        .map(|h| 1.0 - mask.head_count(h) as f64 / cells)
        .collect();
    let mean = per_head.iter().sum::<f64>() / heads.max(1) as f64;
    SparsityReport { per_head, mean }
}
