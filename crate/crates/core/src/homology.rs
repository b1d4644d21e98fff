//! Cubical complexes of sublevel sets and their mod-2 Betti numbers.
//!
//! Cells live on a doubled grid: coordinate `2i` is the vertex `i` of an
//! axis, `2i + 1` the edge between vertices `i` and `i + 1`. A cell's
//! dimension is its count of odd coordinates. Periodic axes wrap modulo `2G`.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::field::{Point, ScalarField};

/// Smallest accepted grid resolution per axis.
pub const MIN_GRID: usize = 16;
/// Cap on doubled-grid cells.
pub const CELL_CAP: usize = 20_000_000;
/// Relative gradient norm under which a level counts as near-critical.
pub const NEAR_CRITICAL_RATIO: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum HomologyError {
    #[error("grid resolution {0} below the minimum {MIN_GRID}")]
    Grid(usize),
    #[error("doubled grid has {cells} cells, over the cap {cap}")]
    Resolution { cells: usize, cap: usize },
    #[error("Betti and cell Euler characteristics disagree ({betti} vs {cells})")]
    Euler { betti: i64, cells: i64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct NearCritical {
    pub min_gradient: f64,
    pub threshold: f64,
}

/// A cubical complex on a uniform grid over the field's domain.
#[derive(Clone, Debug)]
pub struct CubicalComplex {
    grid: usize,
    level: f64,
    periodic: Vec<bool>,
    /// Extent of the doubled grid per axis.
    shape: Vec<usize>,
    present: Vec<bool>,
    warning: Option<NearCritical>,
}

fn extent(grid: usize, periodic: bool) -> usize {
    if periodic {
        2 * grid
    } else {
        2 * grid + 1
    }
}

impl CubicalComplex {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn near_critical(&self) -> Option<&NearCritical> {
        self.warning.as_ref()
    }

    fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.shape.len()];
        for (a, &s) in self.shape.iter().enumerate() {
            c[a] = idx % s;
            idx /= s;
        }
        c
    }

    fn index(&self, c: &[usize]) -> usize {
        let mut idx = 0;
        for a in (0..self.shape.len()).rev() {
            idx = idx * self.shape[a] + c[a];
        }
        idx
    }

    fn cell_dim(c: &[usize]) -> usize {
        c.iter().filter(|&&v| v % 2 == 1).count()
    }

    /// True if the cell with the given doubled coordinates is in the complex.
    pub fn contains_cell(&self, c: &[usize]) -> bool {
        c.len() == self.shape.len() && c.iter().zip(&self.shape).all(|(v, s)| v < s) && self.present[self.index(c)]
    }

    /// Number of cells of each dimension.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dim() + 1];
        for (i, &p) in self.present.iter().enumerate() {
            if p {
                counts[Self::cell_dim(&self.coords(i))] += 1;
            }
        }
        counts
    }

    /// Codimension-one faces, as doubled-grid indices.
    fn boundary(&self, c: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * c.len());
        let mut f = c.to_vec();
        for a in 0..c.len() {
            if c[a] % 2 == 0 {
                continue;
            }
            let s = self.shape[a];
            f[a] = c[a] - 1;
            out.push(self.index(&f));
            f[a] = (c[a] + 1) % s;
            out.push(self.index(&f));
            f[a] = c[a];
        }
        out
    }

    /// Cellwise inclusion into another complex on the same grid.
    pub fn is_subcomplex_of(&self, other: &CubicalComplex) -> bool {
        self.shape == other.shape && self.present.iter().zip(&other.present).all(|(a, b)| !a || *b)
    }

    /// Checks that every face of every cell is present and that the
    /// boundary of each boundary vanishes mod 2.
    pub fn check_closure(&self) -> bool {
        for (i, &p) in self.present.iter().enumerate() {
            if !p {
                continue;
            }
            let c = self.coords(i);
            let faces = self.boundary(&c);
            if faces.iter().any(|&f| !self.present[f]) {
                return false;
            }
            let mut parity: HashMap<usize, u8> = HashMap::new();
            for &f in &faces {
                for g in self.boundary(&self.coords(f)) {
                    *parity.entry(g).or_default() ^= 1;
                }
            }
            if parity.values().any(|&v| v != 0) {
                return false;
            }
        }
        true
    }
}

/// Sublevel complex `{f <= level}`: every top cell whose center value is at
/// most `level`, closed under faces.
pub fn build_complex(field: &ScalarField, level: f64, grid: usize) -> Result<CubicalComplex, HomologyError> {
    if grid < MIN_GRID {
        return Err(HomologyError::Grid(grid));
    }
    let domain = field.domain();
    let n = field.dim();
    let periodic = domain.periodic.clone();
    let shape: Vec<usize> = periodic.iter().map(|&p| extent(grid, p)).collect();
    let cells = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s)).unwrap_or(usize::MAX);
    if cells > CELL_CAP {
        return Err(HomologyError::Resolution { cells, cap: CELL_CAP });
    }
    let mut cx = CubicalComplex {
        grid,
        level,
        periodic,
        shape,
        present: vec![false; cells],
        warning: None,
    };
    let steps: Vec<f64> = (0..n).map(|a| domain.width(a) / grid as f64).collect();
    let diag = steps.iter().map(|h| h * h).sum::<f64>().sqrt();
    let floor = NEAR_CRITICAL_RATIO * field.scale();
    // worst cell by gradient over its local threshold
    let mut worst: Option<(f64, NearCritical)> = None;
    let tops = grid.pow(n as u32);
    let mut cell = vec![0usize; n];
    for t in 0..tops {
        let mut rem = t;
        for a in 0..n {
            cell[a] = rem % grid;
            rem /= grid;
        }
        let center = Point::from_fn(n, |a, _| domain.lower[a] + (cell[a] as f64 + 0.5) * steps[a]);
        let v = field.value(&center);
        let g = field.gradient(&center).norm();
        let curvature = field.hessian(&center).norm();
        // the level set can cross this cell, and a gradient below the
        // curvature bound allows a critical point inside it
        if (v - level).abs() <= diag * g + curvature * diag * diag {
            let local = floor.max(curvature * diag);
            let ratio = g / local;
            if ratio < 1.0 && worst.as_ref().is_none_or(|(r, _)| ratio < *r) {
                worst = Some((
                    ratio,
                    NearCritical {
                        min_gradient: g,
                        threshold: local,
                    },
                ));
            }
        }
        if v > level {
            continue;
        }
        // mark the closed cube: each axis offset in {-1, 0, +1} around 2i+1
        let top: Vec<usize> = cell.iter().map(|&i| 2 * i + 1).collect();
        for mask in 0..3usize.pow(n as u32) {
            let mut m = mask;
            let mut c = top.clone();
            for a in 0..n {
                let off = m % 3;
                m /= 3;
                c[a] = match off {
                    0 => c[a],
                    1 => c[a] - 1,
                    _ => (c[a] + 1) % cx.shape[a],
                };
            }
            let idx = cx.index(&c);
            cx.present[idx] = true;
        }
    }
    cx.warning = worst.map(|(_, w)| w);
    Ok(cx)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BettiVector {
    pub ranks: Vec<usize>,
    /// Alternating sum of cell counts.
    pub euler_cells: i64,
    /// Alternating sum of Betti numbers.
    pub euler_betti: i64,
}

impl BettiVector {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let chi = alternating(&ranks);
        BettiVector {
            ranks,
            euler_cells: chi,
            euler_betti: chi,
        }
    }

    pub fn chi(&self) -> i64 {
        self.euler_betti
    }
}

fn alternating(v: &[usize]) -> i64 {
    v.iter()
        .enumerate()
        .map(|(i, &b)| if i % 2 == 0 { b as i64 } else { -(b as i64) })
        .sum()
}

/// Symmetric difference of two sorted index lists.
fn add_mod2(a: &mut Vec<u32>, b: &[u32]) {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    *a = out;
}

/// Mod-2 ranks of all boundary maps and the resulting Betti numbers.
///
/// Columns are reduced from the top dimension down; a column whose cell is
/// already a pivot of the next boundary map reduces to zero and is skipped.
pub fn betti_euler(cx: &CubicalComplex) -> Result<BettiVector, HomologyError> {
    let n = cx.dim();
    // dimension-local numbering of present cells
    let mut local = vec![u32::MAX; cx.present.len()];
    let mut by_dim: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, &p) in cx.present.iter().enumerate() {
        if p {
            let d = CubicalComplex::cell_dim(&cx.coords(i));
            local[i] = by_dim[d].len() as u32;
            by_dim[d].push(i);
        }
    }
    let counts: Vec<usize> = by_dim.iter().map(Vec::len).collect();
    // rank[d] = rank of the boundary map from d-cells to (d-1)-cells
    let mut rank = vec![0usize; n + 2];
    let mut cleared: Vec<bool> = Vec::new();
    for d in (1..=n).rev() {
        let mut pivot_of: Vec<u32> = vec![u32::MAX; counts[d - 1]];
        let mut reduced: Vec<Vec<u32>> = Vec::with_capacity(counts[d]);
        let mut next_cleared = vec![false; counts[d - 1]];
        for (j, &cell) in by_dim[d].iter().enumerate() {
            if cleared.get(j).copied().unwrap_or(false) {
                reduced.push(Vec::new());
                continue;
            }
            let mut col: Vec<u32> = cx.boundary(&cx.coords(cell)).into_iter().map(|f| local[f]).collect();
            col.sort_unstable();
            loop {
                let Some(&low) = col.last() else { break };
                let other = pivot_of[low as usize];
                if other == u32::MAX {
                    pivot_of[low as usize] = j as u32;
                    next_cleared[low as usize] = true;
                    rank[d] += 1;
                    break;
                }
                let prev = std::mem::take(&mut reduced[other as usize]);
                add_mod2(&mut col, &prev);
                reduced[other as usize] = prev;
            }
            reduced.push(col);
        }
        cleared = next_cleared;
    }
    let ranks: Vec<usize> = (0..=n).map(|d| counts[d] - rank[d] - rank[d + 1]).collect();
    let euler_cells = alternating(&counts);
    let euler_betti = alternating(&ranks);
    if euler_cells != euler_betti {
        return Err(HomologyError::Euler {
            betti: euler_betti,
            cells: euler_cells,
        });
    }
    Ok(BettiVector {
        ranks,
        euler_cells,
        euler_betti,
    })
}

/// How a passing attachment shows up in homology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachEffect {
    /// `b_k` grows by one.
    NewCycle,
    /// `b_{k-1}` drops by one.
    KilledCycle,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttachVerdict {
    pub k: usize,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    pub chi_delta: i64,
    pub effect: Option<AttachEffect>,
    pub passed: bool,
}

/// Checks that `after` is `before` with one `k`-cell attached, at the level
/// of mod-2 Betti numbers and Euler characteristic.
pub fn attach_cell_check(before: &BettiVector, after: &BettiVector, k: usize) -> AttachVerdict {
    let chi_delta = after.chi() - before.chi();
    let mut verdict = AttachVerdict {
        k,
        before: before.ranks.clone(),
        after: after.ranks.clone(),
        chi_delta,
        effect: None,
        passed: false,
    };
    if before.ranks.len() != after.ranks.len() || k >= before.ranks.len() {
        return verdict;
    }
    let shifted = |i: usize, delta: i64| -> Vec<i64> {
        let mut v: Vec<i64> = before.ranks.iter().map(|&b| b as i64).collect();
        v[i] += delta;
        v
    };
    let got: Vec<i64> = after.ranks.iter().map(|&b| b as i64).collect();
    if got == shifted(k, 1) {
        verdict.effect = Some(AttachEffect::NewCycle);
    } else if k >= 1 && got == shifted(k - 1, -1) {
        verdict.effect = Some(AttachEffect::KilledCycle);
    }
    let sign = if k % 2 == 0 { 1 } else { -1 };
    verdict.passed = verdict.effect.is_some() && chi_delta == sign;
    verdict
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Betti numbers by a dense mod-2 rank computation on explicit matrices.
    fn dense_betti(cx: &CubicalComplex) -> Vec<usize> {
        let n = cx.dim();
        let mut by_dim: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (i, &p) in cx.present.iter().enumerate() {
            if p {
                by_dim[CubicalComplex::cell_dim(&cx.coords(i))].push(i);
            }
        }
        let rank = |d: usize| -> usize {
            if d == 0 || d > n {
                return 0;
            }
            let rows: HashMap<usize, usize> = by_dim[d - 1].iter().enumerate().map(|(r, &c)| (c, r)).collect();
            let mut m: Vec<Vec<bool>> = by_dim[d]
                .iter()
                .map(|&c| {
                    let mut col = vec![false; rows.len()];
                    for f in cx.boundary(&cx.coords(c)) {
                        col[rows[&f]] ^= true;
                    }
                    col
                })
                .collect();
            let mut r = 0;
            let cols = m.len();
            for row in 0..rows.len() {
                if let Some(p) = (r..cols).find(|&j| m[j][row]) {
                    m.swap(r, p);
                    for j in 0..cols {
                        if j != r && m[j][row] {
                            let src = m[r].clone();
                            for (a, b) in m[j].iter_mut().zip(src) {
                                *a ^= b;
                            }
                        }
                    }
                    r += 1;
                }
            }
            r
        };
        (0..=n).map(|d| by_dim[d].len() - rank(d) - rank(d + 1)).collect()
    }

    #[test]
    fn model_levels() {
        let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        let lo = build_complex(&f, -1.0, 128).unwrap();
        let hi = build_complex(&f, 1.0, 128).unwrap();
        let bl = betti_euler(&lo).unwrap();
        let bh = betti_euler(&hi).unwrap();
        assert_eq!(bl.ranks, vec![2, 0, 0]);
        assert_eq!(bh.ranks, vec![1, 0, 0]);
        assert_eq!(bl.chi(), 2);
        assert!(lo.is_subcomplex_of(&hi));
        assert!(attach_cell_check(&bl, &bh, 1).passed);
    }

    #[test]
    fn torus_full_and_empty() {
        let f = ScalarField::torus().unwrap();
        let full = build_complex(&f, 2.0, 32).unwrap();
        assert_eq!(betti_euler(&full).unwrap().ranks, vec![1, 2, 1]);
        assert_eq!(betti_euler(&full).unwrap().chi(), 0);
        let empty = build_complex(&f, -2.0, 32).unwrap();
        assert_eq!(empty.cell_counts(), vec![0, 0, 0]);
        assert_eq!(betti_euler(&empty).unwrap().ranks, vec![0, 0, 0]);
    }

    #[test]
    fn torus_cells_attach() {
        let f = ScalarField::torus().unwrap();
        let b = |l: f64| betti_euler(&build_complex(&f, l, 64).unwrap()).unwrap();
        assert_eq!(b(0.2).ranks, vec![1, 1, 0]);
        assert_eq!(b(0.8).ranks, vec![1, 2, 0]);
        assert_eq!(b(1.8).ranks, vec![1, 2, 1]);
        assert!(attach_cell_check(&b(0.2), &b(0.8), 1).passed);
        assert!(attach_cell_check(&b(1.2), &b(1.8), 2).passed);
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let f = ScalarField::torus().unwrap();
        for level in [-1.2, -0.3, 0.2, 0.8, 1.3, 2.0] {
            let cx = build_complex(&f, level, 16).unwrap();
            assert!(cx.check_closure());
            assert_eq!(betti_euler(&cx).unwrap().ranks, dense_betti(&cx), "level {level}");
        }
        let g = ScalarField::double_well(2.0).unwrap();
        for level in [0.5, 1.0, 1.25] {
            let cx = build_complex(&g, level, 16).unwrap();
            assert_eq!(betti_euler(&cx).unwrap().ranks, dense_betti(&cx));
        }
    }

    #[test]
    fn attach_rank_arithmetic() {
        let v = |r: &[usize]| BettiVector::from_ranks(r.to_vec());
        assert!(attach_cell_check(&v(&[2, 0]), &v(&[1, 0]), 1).passed);
        assert!(attach_cell_check(&v(&[1, 1, 0]), &v(&[1, 2, 0]), 1).passed);
        assert!(attach_cell_check(&v(&[1, 2, 0]), &v(&[1, 2, 1]), 2).passed);
        assert!(!attach_cell_check(&v(&[1, 0]), &v(&[3, 0]), 1).passed);
        assert!(!attach_cell_check(&v(&[1, 0]), &v(&[1, 0, 0]), 1).passed);
        assert!(attach_cell_check(&v(&[0, 0]), &v(&[1, 0]), 0).passed);
    }

    #[test]
    fn near_critical_and_caps() {
        let f = ScalarField::model(2, 1, 1.0, 2.0).unwrap();
        assert!(build_complex(&f, 0.0, 64).unwrap().near_critical().is_some());
        assert!(build_complex(&f, 0.5, 64).unwrap().near_critical().is_none());
        assert!(matches!(build_complex(&f, 0.5, 8), Err(HomologyError::Grid(8))));
        assert!(matches!(build_complex(&f, 0.5, 5000), Err(HomologyError::Resolution { .. })));
    }
}
