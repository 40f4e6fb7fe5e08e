mod common;

use proptest::prelude::*;
use rand::Rng;
use tokencarve::analysis::{attention_flops, effective_sparsity, partition_overhead, PartitionStrategy};
use tokencarve::mask::BlockMask;
use tokencarve::sfc::GridDims;

fn random_mask(seed: u64, heads: usize, rows: usize, cols: usize, density: f64) -> BlockMask {
    let mut r = common::rng(seed);
    let mut m = BlockMask::new(heads, rows, cols);
    for h in 0..heads {
        for i in 0..rows {
            for j in 0..cols {
                m.set(h, i, j, r.random_bool(density));
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(common::prop_config(200))]

    #[test]
    fn tiled_padding_counts_cells_of_the_padded_box(
        t in 1usize..12, h in 1usize..12, w in 1usize..12,
        a in 1usize..5, b in 1usize..5, c in 1usize..5,
    ) {
        let dims = GridDims::new(t, h, w).unwrap();
        let r = partition_overhead(dims, PartitionStrategy::TiledWindow { tile: [a, b, c] }, 8);
        // walk every cell of the tile-aligned box and count those outside the grid
        let (pt, ph, pw) = (t.div_ceil(a) * a, h.div_ceil(b) * b, w.div_ceil(c) * c);
        let mut outside = 0;
        for x in 0..pt {
            for y in 0..ph {
                for z in 0..pw {
                    if x >= t || y >= h || z >= w {
                        outside += 1;
                    }
                }
            }
        }
        prop_assert_eq!(r.padding_tokens, outside);
        let n = (t * h * w) as f64;
        let p = n + outside as f64;
        prop_assert!((r.extra_matmul_fraction - (p * p - n * n) / (n * n)).abs() < 1e-12);
    }

    #[test]
    fn n_prime_is_the_mean_selected_token_count(
        seed in any::<u64>(), heads in 1usize..4, rows in 1usize..20, extra in 0usize..4, m in 1usize..64, dens in 0.0f64..1.0,
    ) {
        let cols = rows + extra;
        let mask = random_mask(seed, heads, rows, cols, dens);
        let f = attention_flops(&mask, m, 32);
        let mut tokens = 0u64;
        for h in 0..heads {
            for i in 0..rows {
                tokens += (m * mask.row(h, i).iter().filter(|&&b| b).count()) as u64;
            }
        }
        prop_assert_eq!(f.selected_tokens, tokens);
        prop_assert_eq!(f.n_prime, tokens as f64 / (heads * rows) as f64);
        let s = effective_sparsity(&mask);
        prop_assert!((s.mean - (1.0 - f.ratio_to_dense)).abs() < 1e-12);
    }

    #[test]
    fn flops_are_linear_in_selection(seed in any::<u64>(), heads in 1usize..3, rows in 2usize..12, d_k in 1usize..128) {
        // splitting a mask into disjoint parts splits the FLOPs
        let mask = random_mask(seed, heads, rows, rows, 0.5);
        let (mut a, mut b) = (BlockMask::new(heads, rows, rows), BlockMask::new(heads, rows, rows));
        for h in 0..heads {
            for i in 0..rows {
                for j in 0..rows {
                    if mask.get(h, i, j) {
                        if (i + j) % 2 == 0 { a.set(h, i, j, true) } else { b.set(h, i, j, true) }
                    }
                }
            }
        }
        let total = attention_flops(&mask, 16, d_k).total_flops;
        let parts = attention_flops(&a, 16, d_k).total_flops + attention_flops(&b, 16, d_k).total_flops;
        prop_assert!((total - parts).abs() <= 1e-9 * total.max(1.0));
    }
}

#[test]
fn dense_mask_costs_dense_flops() {
    let full = BlockMask::full(3, 7, 9);
    let f = attention_flops(&full, 16, 64);
    assert_eq!(f.ratio_to_dense, 1.0);
    assert_eq!(f.n_prime, (9 * 16) as f64);
    // 2 matmuls, 2 flops per multiply-add
    assert_eq!(f.total_flops, 4.0 * 3.0 * (7 * 16) as f64 * (9 * 16) as f64 * 64.0);
}

#[test]
fn static_only_mask_sparsity() {
    // each vision row keeps itself, its neighbours and both condition blocks
    use tokencarve::partition::{adjacency_mask, build_layout, neighbor_counts};
    use tokencarve::sfc::build_curve;
    let dims = GridDims::new(33, 45, 80).unwrap();
    let layout = build_layout(dims, 128, 256);
    let perm = build_curve(dims).unwrap();
    let adja = adjacency_mask(&layout, dims, &perm).unwrap();
    let counts = neighbor_counts(&adja);
    let (mv, total) = (layout.vision_blocks, layout.total_blocks());
    let mut mask = BlockMask::new(1, mv, total);
    for i in 0..mv {
        for j in 0..mv {
            mask.set(0, i, j, adja.get(i, j));
        }
        mask.set(0, i, mv, true);
        mask.set(0, i, mv + 1, true);
    }
    let expect = counts.iter().map(|&c| 1.0 - (c + 3) as f64 / total as f64).sum::<f64>() / mv as f64;
    assert!((effective_sparsity(&mask).mean - expect).abs() < 1e-12);
}
