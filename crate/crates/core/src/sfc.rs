//! Generalized Hilbert ("gilbert") orderings of rectangular 3D grids.
//!
//! The curve visits every cell of a `t × h × w` grid exactly once. Cells are
//! identified by their row-major index `(t·H + h)·W + w`, so `forward[i]` is
//! the row-major index of the `i`-th cell along the curve. Consecutive curve
//! positions differ by at most one step on every axis; odd extents force the
//! occasional diagonal move, so the locality contract is 26-adjacency rather
//! than face adjacency.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CarveError, Result};

/// Extent of a latent grid in (temporal, height, width) cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(CarveError::Domain(format!(
                "grid dims must be positive, got ({t},{h},{w})"
            )));
        }
        Ok(Self { t, h, w })
    }

    /// Number of cells, `t·h·w`.
    pub fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let w = index % self.w;
        let rest = index / self.w;
        [rest / self.h, rest % self.h, w]
    }

    /// Row-major coordinates of every cell.
    pub fn all_coords(&self) -> Vec<[usize; 3]> {
        (0..self.cells()).map(|i| self.coords(i)).collect()
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

impl TryFrom<[usize; 3]> for GridDims {
    type Error = CarveError;

    fn try_from(v: [usize; 3]) -> Result<Self> {
        GridDims::new(v[0], v[1], v[2])
    }
}

impl From<GridDims> for [usize; 3] {
    fn from(d: GridDims) -> Self {
        d.as_array()
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

impl std::str::FromStr for GridDims {
    type Err = CarveError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(CarveError::Domain(format!("expected t,h,w but got '{s}'")));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| CarveError::Domain(format!("bad grid extent '{p}'")))?;
        }
        GridDims::new(v[0], v[1], v[2])
    }
}

/// Bijection between curve positions and row-major cell indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl Permutation {
    /// Builds a permutation from a forward map, validating bijectivity.
    pub fn from_forward(forward: Vec<u32>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![u32::MAX; n];
        for (pos, &cell) in forward.iter().enumerate() {
            let cell = cell as usize;
            if cell >= n || inverse[cell] != u32::MAX {
                return Err(CarveError::Contract(format!(
                    "forward map is not a bijection (cell {cell} at position {pos})"
                )));
            }
            inverse[cell] = pos as u32;
        }
        Ok(Self { forward, inverse })
    }

    pub fn identity(n: usize) -> Self {
        let forward: Vec<u32> = (0..n as u32).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Row-major cell index at each curve position.
    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    /// Curve position of each row-major cell.
    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    /// Reorders a row-major sequence into curve order: `out[i] = input[forward[i]]`.
    pub fn apply<T: Clone>(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.len() {
            return shape_err(format!(
                "sequence length {} does not match permutation length {}",
                input.len(),
                self.len()
            ));
        }
        Ok(self.forward.iter().map(|&c| input[c as usize].clone()).collect())
    }

    /// Restores row-major order from a curve-ordered sequence.
    pub fn invert<T: Clone>(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.len() {
            return shape_err(format!(
                "sequence length {} does not match permutation length {}",
                input.len(),
                self.len()
            ));
        }
        Ok(self.inverse.iter().map(|&p| input[p as usize].clone()).collect())
    }

    /// Row-wise variant of [`Permutation::apply`] for flat `(cells, width)` buffers.
    pub fn apply_rows<T: Copy>(&self, input: &[T], width: usize) -> Result<Vec<T>> {
        self.gather_rows(input, width, &self.forward)
    }

    pub fn invert_rows<T: Copy>(&self, input: &[T], width: usize) -> Result<Vec<T>> {
        self.gather_rows(input, width, &self.inverse)
    }

    fn gather_rows<T: Copy>(&self, input: &[T], width: usize, map: &[u32]) -> Result<Vec<T>> {
        if input.len() != self.len() * width {
            return shape_err(format!(
                "buffer of {} values is not {} rows of width {width}",
                input.len(),
                self.len()
            ));
        }
        let mut out = Vec::with_capacity(input.len());
        for &src in map {
            let s = src as usize * width;
            out.extend_from_slice(&input[s..s + width]);
        }
        Ok(out)
    }
}

/// Apply `perm` to a row-major sequence.
pub fn apply_permutation<T: Clone>(tokens: &[T], perm: &Permutation) -> Result<Vec<T>> {
    perm.apply(tokens)
}

/// Undo [`apply_permutation`].
pub fn invert_permutation<T: Clone>(tokens: &[T], perm: &Permutation) -> Result<Vec<T>> {
    perm.invert(tokens)
}

/// Rounds `n_tokens` up to a whole number of blocks of size `m`.
/// Returns `(padded_total, pad_count)`.
pub fn padded_token_count(n_tokens: usize, m: usize) -> (usize, usize) {
    assert!(m >= 1, "block size must be positive");
    let padded = n_tokens.div_ceil(m) * m;
    (padded, padded - n_tokens)
}

/// Builds the generalized Hilbert ordering of `dims`.
pub fn build_curve(dims: GridDims) -> Result<Permutation> {
    let cells = dims
        .t
        .checked_mul(dims.h)
        .and_then(|x| x.checked_mul(dims.w))
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| {
            CarveError::Size(format!("grid {dims} exceeds the 32-bit cell index range"))
        })?;

    let mut forward = Vec::with_capacity(cells);
    let (w, h, d) = (dims.w as i64, dims.h as i64, dims.t as i64);
    let mut emit = |x: i64, y: i64, z: i64| {
        forward.push(dims.index(z as usize, y as usize, x as usize) as u32);
    };
    let o = V3(0, 0, 0);
    if w >= h && w >= d {
        gilbert(o, V3(w, 0, 0), V3(0, h, 0), V3(0, 0, d), &mut emit);
    } else if h >= w && h >= d {
        gilbert(o, V3(0, h, 0), V3(w, 0, 0), V3(0, 0, d), &mut emit);
    } else {
        gilbert(o, V3(0, 0, d), V3(w, 0, 0), V3(0, h, 0), &mut emit);
    }
    debug_assert_eq!(forward.len(), cells);
    Permutation::from_forward(forward)
}

#[derive(Clone, Copy, Debug)]
struct V3(i64, i64, i64);

impl V3 {
    fn len(self) -> i64 {
        (self.0 + self.1 + self.2).abs()
    }

    fn sign(self) -> V3 {
        V3(self.0.signum(), self.1.signum(), self.2.signum())
    }
}

impl std::ops::Add for V3 {
    type Output = V3;
    fn add(self, o: V3) -> V3 {
        V3(self.0 + o.0, self.1 + o.1, self.2 + o.2)
    }
}

impl std::ops::Sub for V3 {
    type Output = V3;
    fn sub(self, o: V3) -> V3 {
        V3(self.0 - o.0, self.1 - o.1, self.2 - o.2)
    }
}

impl std::ops::Neg for V3 {
    type Output = V3;
    fn neg(self) -> V3 {
        V3(-self.0, -self.1, -self.2)
    }
}

/// Emits a path through the box spanned by `a`, `b`, `c` at corner `p`. The
/// path enters at `p` and leaves at `p + a - sign(a)`, the far corner along the
/// major axis `a`. Sub-boxes are joined by face steps; boxes too small to split
/// come from an exhaustive king-move search, so every step is 26-adjacent.
fn gilbert(p: V3, a: V3, b: V3, c: V3, emit: &mut impl FnMut(i64, i64, i64)) {
    let (w, h, d) = (a.len(), b.len(), c.len());
    if w == 0 || h == 0 || d == 0 {
        return;
    }
    let (da, db, dc) = (a.sign(), b.sign(), c.sign());

    if h == 1 && d == 1 {
        return line(p, da, w, emit);
    }
    debug_assert!(w >= 2, "major axis must span at least two cells");

    if w >= 4 && 2 * w > 3 * h && 2 * w > 3 * d {
        // wide: two halves along the major axis
        let a1 = scale(da, even_half(w, 2));
        gilbert(p, a1, b, c, emit);
        gilbert(p + a1, a - a1, b, c, emit);
    } else if h >= 3 && (h >= d || d < 3) {
        let a1 = scale(da, even_half(w, 1));
        let b1 = scale(db, even_half(h, 2));
        gilbert(p, b1, c, a1, emit);
        gilbert(p + b1, a, b - b1, c, emit);
        gilbert(p + (a - da) + (b1 - db), -b1, c, -(a - a1), emit);
    } else if d >= 3 {
        let a1 = scale(da, even_half(w, 1));
        let c1 = scale(dc, even_half(d, 2));
        gilbert(p, c1, a1, b, emit);
        gilbert(p + c1, a, b, c - c1, emit);
        gilbert(p + (a - da) + (c1 - dc), -c1, -(a - a1), b, emit);
    } else if w >= 4 {
        let a1 = scale(da, even_half(w, 2));
        gilbert(p, a1, b, c, emit);
        gilbert(p + a1, a - a1, b, c, emit);
    } else {
        // at most 3 x 2 x 2 cells
        for &[i, j, k] in small_path(w as usize, h as usize, d as usize) {
            let q = p + scale(da, i as i64) + scale(db, j as i64) + scale(dc, k as i64);
            emit(q.0, q.1, q.2);
        }
    }
}

fn scale(v: V3, s: i64) -> V3 {
    V3(v.0 * s, v.1 * s, v.2 * s)
}

/// Split point near `n / 2`, even when possible, keeping `min` cells on the
/// first side and at least one on the second (two when `min == 2` and `n >= 4`).
fn even_half(n: i64, min: i64) -> i64 {
    let rest_min = if min == 2 && n >= 4 { 2 } else { 1 };
    let mut k = (n / 2).max(min);
    if k % 2 == 1 && k < n - rest_min {
        k += 1;
    }
    k.min(n - rest_min)
}

/// Corner-to-corner king-move paths for the unsplittable boxes
/// `w ∈ {2,3}`, `h, d ∈ {1,2}`, from `(0,0,0)` to `(w-1,0,0)`.
fn small_path(w: usize, h: usize, d: usize) -> &'static [[u8; 3]] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut out = Vec::new();
        for w in 2..=3 {
            for h in 1..=2 {
                for d in 1..=2 {
                    out.push(search_path([w, h, d]).expect("small boxes are traversable"));
                }
            }
        }
        out
    });
    &table[(w - 2) * 4 + (h - 1) * 2 + (d - 1)]
}

fn search_path(ext: [usize; 3]) -> Option<Vec<[u8; 3]>> {
    let n = ext[0] * ext[1] * ext[2];
    let goal = [ext[0] as u8 - 1, 0, 0];
    // face moves first so diagonals only appear when parity forces them
    let mut moves: Vec<[i8; 3]> = Vec::new();
    for dx in -1i8..=1 {
        for dy in -1i8..=1 {
            for dz in -1i8..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    moves.push([dx, dy, dz]);
                }
            }
        }
    }
    moves.sort_by_key(|m| m.iter().filter(|&&x| x != 0).count());

    fn dfs(
        path: &mut Vec<[u8; 3]>,
        seen: &mut [bool],
        ext: [usize; 3],
        n: usize,
        goal: [u8; 3],
        moves: &[[i8; 3]],
    ) -> bool {
        let cur = *path.last().unwrap();
        if path.len() == n {
            return cur == goal;
        }
        for m in moves {
            let nxt = [
                cur[0] as i8 + m[0],
                cur[1] as i8 + m[1],
                cur[2] as i8 + m[2],
            ];
            if (0..3).any(|k| nxt[k] < 0 || nxt[k] as usize >= ext[k]) {
                continue;
            }
            let nxt = [nxt[0] as u8, nxt[1] as u8, nxt[2] as u8];
            let id = (nxt[0] as usize * ext[1] + nxt[1] as usize) * ext[2] + nxt[2] as usize;
            if seen[id] || (nxt == goal && path.len() + 1 != n) {
                continue;
            }
            seen[id] = true;
            path.push(nxt);
            if dfs(path, seen, ext, n, goal, moves) {
                return true;
            }
            path.pop();
            seen[id] = false;
        }
        false
    }

    let mut seen = vec![false; n];
    seen[0] = true;
    let mut path = vec![[0u8; 3]];
    dfs(&mut path, &mut seen, ext, n, goal, &moves).then_some(path)
}

fn line(mut p: V3, step: V3, n: i64, emit: &mut impl FnMut(i64, i64, i64)) {
    for _ in 0..n {
        emit(p.0, p.1, p.2);
        p = p + step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_local(dims: GridDims, perm: &Permutation) -> bool {
        perm.forward().windows(2).all(|pair| {
            let a = dims.coords(pair[0] as usize);
            let b = dims.coords(pair[1] as usize);
            (0..3).all(|k| a[k].abs_diff(b[k]) <= 1)
        })
    }

    #[test]
    fn single_cell() {
        let perm = build_curve(GridDims::new(1, 1, 1).unwrap()).unwrap();
        assert_eq!(perm.forward(), &[0]);
        assert_eq!(perm.inverse(), &[0]);
    }

    #[test]
    fn cube_of_two_is_local() {
        let dims = GridDims::new(2, 2, 2).unwrap();
        let perm = build_curve(dims).unwrap();
        assert_eq!(perm.len(), 8);
        assert!(is_local(dims, &perm));
    }

    #[test]
    fn rectangular_slabs_are_local() {
        for (t, h, w) in [(1, 5, 7), (3, 1, 9), (2, 9, 1), (5, 3, 17), (7, 7, 2), (13, 1, 1)] {
            let dims = GridDims::new(t, h, w).unwrap();
            let perm = build_curve(dims).unwrap();
            assert!(is_local(dims, &perm), "{dims}");
        }
    }

    #[test]
    fn deterministic() {
        let dims = GridDims::new(5, 6, 7).unwrap();
        assert_eq!(build_curve(dims).unwrap(), build_curve(dims).unwrap());
    }

    #[test]
    fn apply_then_invert_round_trips() {
        let dims = GridDims::new(4, 4, 4).unwrap();
        let perm = build_curve(dims).unwrap();
        let payload: Vec<u64> = (0..64).map(|i| i * 7919 % 101).collect();
        let there = perm.apply(&payload).unwrap();
        assert_eq!(perm.invert(&there).unwrap(), payload);
        let back = perm.invert(&payload).unwrap();
        assert_eq!(perm.apply(&back).unwrap(), payload);
    }

    #[test]
    fn row_gather_matches_scalar_gather() {
        let dims = GridDims::new(2, 3, 5).unwrap();
        let perm = build_curve(dims).unwrap();
        let rows: Vec<f32> = (0..dims.cells() * 3).map(|i| i as f32).collect();
        let out = perm.apply_rows(&rows, 3).unwrap();
        for (pos, &cell) in perm.forward().iter().enumerate() {
            assert_eq!(&out[pos * 3..pos * 3 + 3], &rows[cell as usize * 3..cell as usize * 3 + 3]);
        }
        assert_eq!(perm.invert_rows(&out, 3).unwrap(), rows);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let perm = Permutation::identity(4);
        assert!(matches!(perm.apply(&[1, 2, 3]), Err(CarveError::Shape(_))));
        assert!(matches!(perm.invert(&[1, 2, 3, 4, 5]), Err(CarveError::Shape(_))));
    }

    #[test]
    fn oversized_grid_is_size_error() {
        let dims = GridDims::new(4096, 4096, 4096).unwrap();
        assert!(matches!(build_curve(dims), Err(CarveError::Size(_))));
    }

    #[test]
    fn padding() {
        assert_eq!(padded_token_count(118_800, 128), (118_912, 112));
        assert_eq!(padded_token_count(128, 128), (128, 0));
        assert_eq!(padded_token_count(1, 128), (128, 127));
    }

    #[test]
    fn parse_dims() {
        let d: GridDims = "33, 45,80".parse().unwrap();
        assert_eq!(d, GridDims { t: 33, h: 45, w: 80 });
        assert!("1,2".parse::<GridDims>().is_err());
        assert!("0,2,2".parse::<GridDims>().is_err());
    }
}
