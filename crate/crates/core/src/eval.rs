//! Model selection criteria, clustering agreement and marginal mixtures.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaModel, Rotation};
use crate::error::{invalid, Error, Result};
use crate::mixture::{component_logdensity, Component, MixtureModel};

/// `-2 loglik + q ln n`.
pub fn bic(loglik: f64, q: usize, n: usize) -> f64 {
    -2.0 * loglik + q as f64 * (n as f64).ln()
}

fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<usize>>, usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(invalid("labels", "need at least one observation"));
    }
    let (da, ka) = dense_labels(a);
    let (db, kb) = dense_labels(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (x, y) in da.iter().zip(&db) {
        table[*x][*y] += 1;
    }
    Ok((table, ka, kb))
}

fn choose2(m: usize) -> f64 {
    let m = m as f64;
    m * (m - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same observations.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    let (table, _, _) = contingency(a, b)?;
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..table[0].len())
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(a.len());
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        // both partitions trivial in the same way
        return Ok(if (index - expected).abs() < 1e-12 && rows == cols { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Fraction of observations misassigned under the best one-to-one matching
/// of predicted to true labels.
pub fn misclassification(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (table, kp, kt) = contingency(pred, truth)?;
    let k = kp.max(kt);
    let mut gain = vec![vec![0.0; k]; k];
    for i in 0..kp {
        for j in 0..kt {
            gain[i][j] = table[i][j] as f64;
        }
    }
    let matched = if k <= 8 { best_matching_exhaustive(&gain) } else { best_matching_hungarian(&gain) };
    Ok(1.0 - matched / pred.len() as f64)
}

fn best_matching_exhaustive(gain: &[Vec<f64>]) -> f64 {
    let k = gain.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = f64::NEG_INFINITY;
    loop {
        let v: f64 = perm.iter().enumerate().map(|(i, &j)| gain[i][j]).sum();
        best = best.max(v);
        if !next_permutation(&mut perm) {
            return best;
        }
    }
}

/// Rearranges `v` into the next lexicographic permutation; false at the last.
pub fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Maximum-weight perfect matching on a square gain matrix (Hungarian
/// algorithm on the negated costs).
fn best_matching_hungarian(gain: &[Vec<f64>]) -> f64 {
    let n = gain.len();
    let max = gain.iter().flatten().cloned().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| max - gain[i - 1][j - 1];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| gain[p[j] - 1][j - 1]).sum()
}

fn marginal_copula(cop: &CopulaModel, coords: &[usize]) -> Result<CopulaModel> {
    let m = coords.len();
    if m == 1 {
        return CopulaModel::independence(1);
    }
    let identity = coords.iter().enumerate().all(|(i, &c)| i == c);
    match cop.family() {
        CopulaFamily::Independence => CopulaModel::independence(m),
        CopulaFamily::Gaussian => {
            let r = cop.correlation().expect("gaussian").sub(coords)?;
            Ok(CopulaModel::gaussian(r))
        }
        CopulaFamily::Frank if cop.dim() > 2 => CopulaModel::frank(m, cop.params()[0]),
        CopulaFamily::Gumbel | CopulaFamily::Clayton | CopulaFamily::Frank => {
            if identity {
                return Ok(cop.clone());
            }
            // swapped arguments exchange the 90 and 270 degree rotations
            let rot = match cop.rotation() {
                Rotation::R90 => Rotation::R270,
                Rotation::R270 => Rotation::R90,
                r => r,
            };
            cop.clone().with_rotation(rot)
        }
        CopulaFamily::NestedFrank => {
            let p = cop.params();
            let (psi1, psi2) = (p[0], p[1]);
            if m == 3 {
                if coords[2] == 2 {
                    return Ok(cop.clone());
                }
                return Err(Error::Unsupported(
                    "a nested Frank copula keeps its inner pair in the first two positions".into(),
                ));
            }
            let inner = coords.contains(&0) && coords.contains(&1);
            CopulaModel::frank(2, if inner { psi2 } else { psi1 })
        }
    }
}

/// Mixture of the sub-vector `coords` (0-based, distinct). Components keep
/// their weights; the copulas must be closed under marginalization.
pub fn marginalize(model: &MixtureModel, coords: &[usize]) -> Result<MixtureModel> {
    let p = model.dim();
    if coords.is_empty() {
        return Err(invalid("coords", "need at least one coordinate"));
    }
    let mut seen = vec![false; p];
    for &c in coords {
        if c >= p || seen[c] {
            return Err(invalid("coords", format!("{coords:?} must be distinct indices below {p}")));
        }
        seen[c] = true;
    }
    if coords.len() == p && coords.iter().enumerate().all(|(i, &c)| i == c) {
        return Ok(model.clone());
    }
    let comps = model
        .components()
        .iter()
        .map(|comp| {
            if comp.angle().is_some() {
                return Err(Error::Unsupported(
                    "a rotated component is not closed under marginalization".into(),
                ));
            }
            let cop = marginal_copula(comp.copula(), coords)?;
            let margs = coords.iter().map(|&c| comp.marginals()[c]).collect();
            Component::new(cop, margs, None)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureModel::new(model.weights().to_vec(), comps)
}

/// Mixture density at a continuous point.
pub fn mixture_density(model: &MixtureModel, x: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (w, c) in model.weights().iter().zip(model.components()) {
        total += w * component_logdensity(c, x)?.exp();
    }
    Ok(total)
}

/// Rectangular evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl GridSpec {
    /// Window spanning `half_width` standard deviations around every
    /// component's marginal means on the two coordinates.
    pub fn around(model: &MixtureModel, coords: [usize; 2], half_width: f64, n: usize) -> Result<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for comp in model.components() {
            let mut mean = [0.0; 2];
            let mut sd = [0.0; 2];
            for (a, &c) in coords.iter().enumerate() {
                let m = comp.marginals().get(c).ok_or_else(|| invalid("coords", "out of range"))?;
                mean[a] = m.mean();
                sd[a] = m.variance().sqrt();
            }
            if let Some(angle) = comp.angle() {
                // x = O(omega) z; a common spread bounds both rotated axes
                let (s, c) = angle.value.sin_cos();
                mean = [c * mean[0] - s * mean[1], s * mean[0] + c * mean[1]];
                let r = sd[0].max(sd[1]);
                sd = [r, r];
            }
            for a in 0..2 {
                lo[a] = lo[a].min(mean[a] - half_width * sd[a]);
                hi[a] = hi[a].max(mean[a] + half_width * sd[a]);
            }
        }
        let spec = Self {
            x_min: lo[0],
            x_max: hi[0],
            nx: n,
            y_min: lo[1],
            y_max: hi[1],
            ny: n,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(invalid("grid", "needs at least 2 points per axis"));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(invalid("grid", "bounds must satisfy min < max"));
        }
        if ![self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("grid", "bounds must be finite"));
        }
        Ok(())
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }

    pub fn cell_area(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64 * (self.y_max - self.y_min) / (self.ny - 1) as f64
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Bivariate mixture densities on a grid: `density[iy][ix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourGrid {
    pub coords: [usize; 2],
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub density: Vec<Vec<f64>>,
}

impl ContourGrid {
    /// Riemann sum of the grid values.
    pub fn mass(&self, spec: &GridSpec) -> f64 {
        self.density.iter().flatten().sum::<f64>() * spec.cell_area()
    }

    /// Long-format CSV with columns `x,y,density`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,density")?;
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                writeln!(w, "{x:?},{y:?},{:?}", self.density[iy][ix])?;
            }
        }
        Ok(())
    }
}

/// Density of the bivariate marginal mixture on `coords` over a grid.
pub fn contour_grid(model: &MixtureModel, coords: [usize; 2], spec: &GridSpec) -> Result<ContourGrid> {
    spec.validate()?;
    if model.is_discrete() {
        return Err(Error::Unsupported("contour grids need continuous components".into()));
    }
    let sub = marginalize(model, &coords)?;
    let xs = spec.xs();
    let ys = spec.ys();
    let density = ys
        .par_iter()
        .map(|&y| xs.iter().map(|&x| mixture_density(&sub, &[x, y])).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(ContourGrid {
        coords,
        xs,
        ys,
        density,
    })
}
