//! Mixture components, likelihood evaluation and EM / ECM fitting.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaModel};
use crate::datakit::{ColumnDomain, Dataset};
use crate::error::{invalid, Error, Result};
use crate::gausquad::{self, CorrStructure, CorrelationMatrix, FactorRule};
use crate::init::PartitionMethod;
use crate::marginals::{binomial_ln_pmf, fit_marginal_weighted, Marginal, MarginalFamily};
use crate::optimize::{golden_section, nelder_mead, NelderMeadOptions};
use crate::special::{log_sum_exp, norm_cdf, norm_quantile};

/// Lower clamp applied to discrete cell probabilities before taking logs.
pub const DEFAULT_PMF_FLOOR: f64 = 1e-12;

// Cells whose responsibility mass is below this are left out of M-step sums.
const WEIGHT_SKIP: f64 = 1e-13;
const ANGLE_GRID: usize = 16;

/// Wraps an angle into `(0, 2*pi]`.
pub fn normalize_angle(omega: f64) -> f64 {
    let t = omega.rem_euclid(TAU);
    if t == 0.0 {
        TAU
    } else {
        t
    }
}

/// `z = O(omega)^T x` for the rotation matrix `O(omega)`.
pub fn rotate_to_component(omega: f64, x: [f64; 2]) -> [f64; 2] {
    let (s, c) = omega.sin_cos();
    [c * x[0] + s * x[1], -s * x[0] + c * x[1]]
}

/// Sample-space rotation angle of a component, in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Angle {
    pub value: f64,
    /// Whether the fit estimates the angle.
    pub free: bool,
}

impl Angle {
    pub fn new(radians: f64, free: bool) -> Self {
        Self {
            value: normalize_angle(radians),
            free,
        }
    }

    pub fn degrees(&self) -> f64 {
        self.value.to_degrees()
    }
}

/// One mixture component: a copula, `p` marginals and an optional angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    copula: CopulaModel,
    marginals: Vec<Marginal>,
    angle: Option<Angle>,
    copula_free: bool,
    marginal_free: Vec<bool>,
}

impl Component {
    pub fn new(copula: CopulaModel, marginals: Vec<Marginal>, angle: Option<Angle>) -> Result<Self> {
        let p = marginals.len();
        let comp = Self {
            copula,
            marginals,
            angle,
            copula_free: true,
            marginal_free: vec![true; p],
        };
        comp.validate()?;
        Ok(comp)
    }

    fn validate(&self) -> Result<()> {
        let p = self.marginals.len();
        if self.copula.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: self.copula.dim(),
                got: p,
            });
        }
        for m in &self.marginals {
            m.validate()?;
        }
        let counts = self.marginals.iter().filter(|m| m.is_discrete()).count();
        if counts != 0 && counts != p {
            return Err(invalid(
                "marginals",
                "a component needs either all count or all continuous marginals",
            ));
        }
        if let Some(a) = &self.angle {
            if !a.value.is_finite() {
                return Err(invalid("angle", "must be finite"));
            }
            if p != 2 {
                return Err(invalid("angle", format!("rotations need p = 2, got p = {p}")));
            }
            if !self.marginals.iter().all(|m| m.family().is_real_line()) {
                return Err(invalid("angle", "rotations need real-line (Normal) marginals"));
            }
            if self.copula.family() == CopulaFamily::Gaussian {
                return Err(invalid(
                    "angle",
                    "not identifiable for a Gaussian copula with Normal marginals",
                ));
            }
        }
        Ok(())
    }

    /// Adds (or replaces) the sample-space rotation.
    pub fn with_angle(mut self, radians: f64, free: bool) -> Result<Self> {
        self.angle = Some(Angle::new(radians, free));
        self.validate()?;
        Ok(self)
    }

    pub fn without_angle(mut self) -> Self {
        self.angle = None;
        self
    }

    /// Keeps the copula parameters fixed during fitting.
    pub fn with_copula_fixed(mut self, fixed: bool) -> Self {
        self.copula_free = !fixed;
        self
    }

    /// Keeps marginal `t` fixed during fitting.
    pub fn with_marginal_fixed(mut self, t: usize, fixed: bool) -> Result<Self> {
        if t >= self.marginals.len() {
            return Err(invalid("marginal", format!("index {t} out of range")));
        }
        self.marginal_free[t] = !fixed;
        Ok(self)
    }

    pub fn with_copula(mut self, copula: CopulaModel) -> Result<Self> {
        self.copula = copula;
        self.validate()?;
        Ok(self)
    }

    pub fn with_marginals(mut self, marginals: Vec<Marginal>) -> Result<Self> {
        self.marginals = marginals;
        self.validate()?;
        Ok(self)
    }

    pub fn copula(&self) -> &CopulaModel {
        &self.copula
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn angle(&self) -> Option<&Angle> {
        self.angle.as_ref()
    }

    pub fn copula_free(&self) -> bool {
        self.copula_free
    }

    pub fn marginal_free(&self) -> &[bool] {
        &self.marginal_free
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_discrete(&self) -> bool {
        self.marginals.iter().any(|m| m.is_discrete())
    }

    /// Number of estimated parameters.
    pub fn n_free_params(&self) -> usize {
        let marg: usize = self
            .marginals
            .iter()
            .zip(&self.marginal_free)
            .filter(|(_, f)| **f)
            .map(|(m, _)| m.family().n_params())
            .sum();
        let cop = if self.copula_free { self.copula.n_params() } else { 0 };
        marg + cop + usize::from(self.angle.is_some_and(|a| a.free))
    }

    fn rotate(&self, x: &[f64], z: &mut [f64]) {
        match &self.angle {
            Some(a) => {
                let r = rotate_to_component(a.value, [x[0], x[1]]);
                z[0] = r[0];
                z[1] = r[1];
            }
            None => z.copy_from_slice(x),
        }
    }
}

/// Weights and components of a finite mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    weights: Vec<f64>,
    components: Vec<Component>,
}

impl MixtureModel {
    /// Weights summing to 1 within 1e-6 are renormalized exactly.
    pub fn new(weights: Vec<f64>, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("k", "a mixture needs at least one component"));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights", "must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid("weights", format!("must sum to 1, got {total}")));
        }
        let first = &components[0];
        for c in &components[1..] {
            if c.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    got: c.dim(),
                });
            }
            let same_domain = c.marginals.iter().zip(&first.marginals).all(|(a, b)| {
                match (a, b) {
                    (Marginal::Binomial { trials: x, .. }, Marginal::Binomial { trials: y, .. }) => x == y,
                    (a, b) => !a.is_discrete() && !b.is_discrete(),
                }
            });
            if !same_domain {
                return Err(invalid("components", "all components must share column domains"));
            }
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { weights, components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_discrete(&self) -> bool {
        self.components[0].is_discrete()
    }

    /// `q = (k - 1) + sum_j (marginal + copula + angle parameters)`.
    pub fn n_free_params(&self) -> usize {
        self.k() - 1 + self.components.iter().map(Component::n_free_params).sum::<usize>()
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(weights, self.components.clone())
    }

    pub fn with_components(&self, components: Vec<Component>) -> Result<Self> {
        Self::new(self.weights.clone(), components)
    }

    /// Column domains implied by the marginals.
    pub fn domains(&self) -> Vec<ColumnDomain> {
        self.components[0]
            .marginals
            .iter()
            .map(|m| match m {
                Marginal::Binomial { trials, .. } => ColumnDomain::Count { trials: *trials },
                _ => ColumnDomain::Continuous,
            })
            .collect()
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.p() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.p(),
            });
        }
        if data.n() == 0 {
            return Err(invalid("data", "needs at least one observation"));
        }
        for (t, (want, got)) in self.domains().iter().zip(data.domains()).enumerate() {
            if want != got {
                return Err(Error::Domain(format!(
                    "column {} has domain {got:?}, the model expects {want:?}",
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

// ---- evaluation ------------------------------------------------------------------

/// Log-density of a continuous component at `x`, evaluated at
/// `z = O(omega)^T x` when the component carries an angle.
pub fn component_logdensity(comp: &Component, x: &[f64]) -> Result<f64> {
    if x.len() != comp.dim() {
        return Err(Error::DimensionMismatch {
            expected: comp.dim(),
            got: x.len(),
        });
    }
    if comp.is_discrete() {
        return Err(Error::Domain("component has count marginals; use component_logpmf".into()));
    }
    let mut z = vec![0.0; x.len()];
    let mut u = vec![0.0; x.len()];
    Ok(continuous_ln_f(comp, x, &mut z, &mut u))
}

fn continuous_ln_f(comp: &Component, x: &[f64], z: &mut [f64], u: &mut [f64]) -> f64 {
    comp.rotate(x, z);
    let mut s = 0.0;
    for ((m, &zt), ut) in comp.marginals.iter().zip(z.iter()).zip(u.iter_mut()) {
        let lg = m.ln_pdf(zt);
        if lg == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        s += lg;
        *ut = m.cdf(zt);
    }
    s + comp.copula.ln_density(u)
}

/// Log probability mass of a count component at the cell `x`, floored at
/// `floor` before the logarithm.
pub fn component_logpmf(comp: &Component, x: &[f64], floor: f64) -> Result<f64> {
    if x.len() != comp.dim() {
        return Err(Error::DimensionMismatch {
            expected: comp.dim(),
            got: x.len(),
        });
    }
    if !comp.is_discrete() {
        return Err(Error::Domain("component has continuous marginals; use component_logdensity".into()));
    }
    let cell = to_cell(comp, x)?;
    let eval = DiscreteEval::new(comp, gausquad::DEFAULT_TOL.min(1e-12));
    Ok(eval.pmf(&cell).clamp(floor, 1.0).ln())
}

fn to_cell(comp: &Component, x: &[f64]) -> Result<Vec<u32>> {
    comp.marginals
        .iter()
        .zip(x)
        .map(|(m, &v)| match m {
            Marginal::Binomial { trials, .. } if v >= 0.0 && v <= *trials as f64 && v.fract() == 0.0 => {
                Ok(v as u32)
            }
            _ => Err(Error::Domain(format!("{v} is outside the support of {m:?}"))),
        })
        .collect()
}

enum Kernel {
    Independence,
    Factor {
        rule: FactorRule,
        table: Vec<f64>,
        offsets: Vec<usize>,
        stride: usize,
    },
    Gaussian(CorrelationMatrix),
    Cdf,
}

/// Per-component tables for repeated cell probabilities.
struct DiscreteEval<'a> {
    comp: &'a Component,
    /// `G_t(x)` at `x = -1..=m_t`, entry `x + 1`.
    cdf: Vec<Vec<f64>>,
    pmf: Vec<Vec<f64>>,
    /// Normal scores of `cdf` with the upper tail taken from the survival sum.
    zb: Vec<Vec<f64>>,
    kernel: Kernel,
    tol: f64,
}

impl<'a> DiscreteEval<'a> {
    fn new(comp: &'a Component, tol: f64) -> Self {
        let mut cdf = Vec::new();
        let mut pmf = Vec::new();
        let mut zb = Vec::new();
        for m in &comp.marginals {
            let Marginal::Binomial { trials, prob } = *m else {
                unreachable!("validated count component")
            };
            let probs: Vec<f64> = (0..=trials).map(|k| binomial_ln_pmf(trials, prob, k).exp()).collect();
            let mut g = Vec::with_capacity(probs.len() + 1);
            g.push(0.0);
            let mut acc = 0.0;
            for q in &probs {
                acc += q;
                g.push(acc.min(1.0));
            }
            *g.last_mut().unwrap() = 1.0;
            let mut surv = vec![0.0; probs.len() + 1];
            let mut tail = 0.0;
            for x in (0..probs.len()).rev() {
                surv[x] = tail;
                tail += probs[x];
            }
            // surv[x] = P(X > x) for x = 0..m; boundary x = -1 is -inf
            let mut z = Vec::with_capacity(g.len());
            z.push(f64::NEG_INFINITY);
            for x in 0..probs.len() {
                let v = if x + 1 == probs.len() {
                    f64::INFINITY
                } else if g[x + 1] <= 0.5 {
                    norm_quantile(g[x + 1])
                } else {
                    -norm_quantile(surv[x])
                };
                z.push(v);
            }
            cdf.push(g);
            pmf.push(probs);
            zb.push(z);
        }
        let kernel = match comp.copula.family() {
            CopulaFamily::Independence => Kernel::Independence,
            CopulaFamily::Gaussian => {
                let r = comp.copula.correlation().expect("gaussian").clone();
                let rho = if r.dim() > 1 { r.get(0, 1) } else { 0.0 };
                if r.structure() == CorrStructure::Exchangeable && rho >= 0.0 {
                    let rule = FactorRule::new(rho);
                    let mut offsets = Vec::with_capacity(zb.len());
                    let mut stride = 0;
                    for z in &zb {
                        offsets.push(stride);
                        stride += z.len();
                    }
                    let mut table = vec![0.0; stride * rule.nodes.len()];
                    for (i, &s) in rule.nodes.iter().enumerate() {
                        let shift = rule.load * s;
                        let row = &mut table[i * stride..(i + 1) * stride];
                        for (z, &off) in zb.iter().zip(&offsets) {
                            for (j, &b) in z.iter().enumerate() {
                                row[off + j] = norm_cdf((b - shift) / rule.resid);
                            }
                        }
                    }
                    Kernel::Factor {
                        rule,
                        table,
                        offsets,
                        stride,
                    }
                } else {
                    Kernel::Gaussian(r)
                }
            }
            _ => Kernel::Cdf,
        };
        Self {
            comp,
            cdf,
            pmf,
            zb,
            kernel,
            tol,
        }
    }

    /// Unfloored cell probability.
    fn pmf(&self, x: &[u32]) -> f64 {
        match &self.kernel {
            Kernel::Independence => x.iter().zip(&self.pmf).map(|(&v, q)| q[v as usize]).product(),
            Kernel::Factor {
                rule,
                table,
                offsets,
                stride,
            } => {
                let mut total = 0.0;
                for (i, w) in rule.weights.iter().enumerate() {
                    let row = &table[i * stride..(i + 1) * stride];
                    let mut prod = *w;
                    for (&v, &off) in x.iter().zip(offsets) {
                        let j = off + v as usize;
                        prod *= row[j + 1] - row[j];
                    }
                    total += prod;
                }
                total
            }
            Kernel::Gaussian(r) => {
                let lo: Vec<f64> = x.iter().zip(&self.zb).map(|(&v, z)| z[v as usize]).collect();
                let hi: Vec<f64> = x.iter().zip(&self.zb).map(|(&v, z)| z[v as usize + 1]).collect();
                gausquad::mvn_rectangle(&lo, &hi, r, self.tol).unwrap_or(0.0)
            }
            Kernel::Cdf => {
                let lo: Vec<f64> = x.iter().zip(&self.cdf).map(|(&v, g)| g[v as usize]).collect();
                let hi: Vec<f64> = x.iter().zip(&self.cdf).map(|(&v, g)| g[v as usize + 1]).collect();
                self.comp.copula.rectangle(&lo, &hi, self.tol).unwrap_or(0.0)
            }
        }
    }
}

/// Data prepared for repeated evaluation: continuous rows, or the distinct
/// count cells with the row-to-cell map.
struct Prepared {
    p: usize,
    n: usize,
    discrete: bool,
    values: Vec<f64>,
    cells: Vec<Vec<u32>>,
    cell_of: Vec<usize>,
    n_cells: usize,
}

impl Prepared {
    fn new(model: &MixtureModel, data: &Dataset) -> Result<Self> {
        model.check_data(data)?;
        let (n, p) = (data.n(), data.p());
        if !model.is_discrete() {
            let values: Vec<f64> = data.rows().flat_map(|r| r.iter().copied()).collect();
            return Ok(Self {
                p,
                n,
                discrete: false,
                values,
                cells: Vec::new(),
                cell_of: (0..n).collect(),
                n_cells: n,
            });
        }
        let comp = &model.components[0];
        let mut index = std::collections::HashMap::new();
        let mut cells = Vec::new();
        let mut cell_of = Vec::with_capacity(n);
        for (i, row) in data.rows().enumerate() {
            let cell = to_cell(comp, row).map_err(|_| Error::Parse {
                row: i + 1,
                column: 0,
                message: format!("count row {row:?} outside the Binomial supports"),
            })?;
            let id = *index.entry(cell.clone()).or_insert_with(|| {
                cells.push(cell);
                cells.len() - 1
            });
            cell_of.push(id);
        }
        let n_cells = cells.len();
        Ok(Self {
            p,
            n,
            discrete: true,
            values: Vec::new(),
            cells,
            cell_of,
            n_cells,
        })
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.p..(c + 1) * self.p]
    }

    /// Log component density (or floored log PMF) on the listed cells.
    fn ln_f(&self, comp: &Component, cells: &[usize], floor: f64, tol: f64) -> Vec<f64> {
        if self.discrete {
            let eval = DiscreteEval::new(comp, tol);
            cells
                .iter()
                .map(|&c| eval.pmf(&self.cells[c]).clamp(floor, 1.0).ln())
                .collect()
        } else {
            let mut z = vec![0.0; self.p];
            let mut u = vec![0.0; self.p];
            cells
                .iter()
                .map(|&c| continuous_ln_f(comp, self.row(c), &mut z, &mut u))
                .collect()
        }
    }
}

/// Component log-densities on all cells, `n_cells x k`, component-major.
fn ln_f_matrix(model: &MixtureModel, prep: &Prepared, cfg: &FitConfig) -> Vec<Vec<f64>> {
    let all: Vec<usize> = (0..prep.n_cells).collect();
    model
        .components
        .par_iter()
        .map(|c| prep.ln_f(c, &all, cfg.pmf_floor, cfg.rect_tol))
        .collect()
}

/// Observed log-likelihood and responsibilities from a log-density matrix.
fn loglik_and_weights(
    weights: &[f64],
    lf: &[Vec<f64>],
    prep: &Prepared,
    want_w: bool,
) -> Result<(f64, Vec<f64>)> {
    let k = weights.len();
    let ln_pi: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut cell_ll = vec![0.0; prep.n_cells];
    let mut cell_w = if want_w { vec![0.0; prep.n_cells * k] } else { Vec::new() };
    let mut terms = vec![0.0; k];
    let mut done = vec![false; prep.n_cells];
    for (i, &c) in prep.cell_of.iter().enumerate() {
        if !done[c] {
            for j in 0..k {
                let v = lf[j][c];
                if v.is_nan() || v == f64::INFINITY {
                    return Err(Error::NonFinite {
                        component: j + 1,
                        observation: i + 1,
                    });
                }
                terms[j] = ln_pi[j] + v;
            }
            let l = log_sum_exp(&terms);
            if l == f64::NEG_INFINITY {
                return Err(Error::ZeroDensity { observation: i + 1 });
            }
            cell_ll[c] = l;
            if want_w {
                for j in 0..k {
                    cell_w[c * k + j] = (terms[j] - l).exp();
                }
                let s: f64 = cell_w[c * k..(c + 1) * k].iter().sum();
                cell_w[c * k..(c + 1) * k].iter_mut().for_each(|w| *w /= s);
            }
            done[c] = true;
        }
        total += cell_ll[c];
    }
    let w = if want_w {
        let mut w = Vec::with_capacity(prep.n * k);
        for &c in &prep.cell_of {
            w.extend_from_slice(&cell_w[c * k..(c + 1) * k]);
        }
        w
    } else {
        Vec::new()
    };
    Ok((total, w))
}

/// `sum_i log sum_j pi_j f_j(x_i)`.
pub fn loglik(model: &MixtureModel, data: &Dataset) -> Result<f64> {
    let cfg = FitConfig::default();
    let prep = Prepared::new(model, data)?;
    let lf = ln_f_matrix(model, &prep, &cfg);
    Ok(loglik_and_weights(&model.weights, &lf, &prep, false)?.0)
}

/// Posterior component probabilities, one row of length `k` per observation.
pub fn e_step(model: &MixtureModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let cfg = FitConfig::default();
    let prep = Prepared::new(model, data)?;
    let lf = ln_f_matrix(model, &prep, &cfg);
    let (_, w) = loglik_and_weights(&model.weights, &lf, &prep, true)?;
    Ok(w.chunks(model.k()).map(<[f64]>::to_vec).collect())
}

/// Mixing weights `pi_j = sum_i w_ij / n`.
pub fn m_step_pi(w: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = w.len();
    if n == 0 {
        return Err(invalid("W", "needs at least one row"));
    }
    let k = w[0].len();
    let mut pi = vec![0.0; k];
    for row in w {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: row.len(),
            });
        }
        for (p, v) in pi.iter_mut().zip(row) {
            *p += v;
        }
    }
    let total: f64 = pi.iter().sum();
    Ok(pi.iter().map(|p| p / total).collect())
}

/// EM M-step 2: each component maximizes its weighted log-likelihood over
/// all its free parameters jointly. Weights are left unchanged.
pub fn m_step_full(model: &MixtureModel, data: &Dataset, w: &[Vec<f64>], cfg: &FitConfig) -> Result<MixtureModel> {
    let prep = Prepared::new(model, data)?;
    let flat = flatten_w(w, model.k(), prep.n)?;
    let (comps, _) = update_components(model, &prep, &flat, cfg, Algorithm::Em);
    model.with_components(comps)
}

/// ECM conditional maximizations: marginals at fixed copula (CM1), copula at
/// the new marginals (CM2), then free angles (CM3).
pub fn ecm_step(model: &MixtureModel, data: &Dataset, w: &[Vec<f64>], cfg: &FitConfig) -> Result<MixtureModel> {
    let prep = Prepared::new(model, data)?;
    if prep.discrete {
        return Err(invalid("algorithm", "ECM needs continuous data"));
    }
    let flat = flatten_w(w, model.k(), prep.n)?;
    let (comps, _) = update_components(model, &prep, &flat, cfg, Algorithm::Ecm);
    model.with_components(comps)
}

/// Weighted complete-data objective `sum_i w_i log f(x_i)` of one component.
pub fn weighted_component_loglik(comp: &Component, data: &Dataset, w: &[f64], cfg: &FitConfig) -> Result<f64> {
    let model = MixtureModel::new(vec![1.0], vec![comp.clone()])?;
    let prep = Prepared::new(&model, data)?;
    if w.len() != prep.n {
        return Err(Error::DimensionMismatch {
            expected: prep.n,
            got: w.len(),
        });
    }
    let wide: Vec<f64> = w.to_vec();
    let problem = Problem::new(&prep, &wide, 1, 0, cfg);
    Ok(problem.objective(comp))
}

fn flatten_w(w: &[Vec<f64>], k: usize, n: usize) -> Result<Vec<f64>> {
    if w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    let mut flat = Vec::with_capacity(n * k);
    for row in w {
        if row.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("W", "entries must be finite and non-negative"));
        }
        flat.extend_from_slice(row);
    }
    Ok(flat)
}

fn update_components(
    model: &MixtureModel,
    prep: &Prepared,
    w: &[f64],
    cfg: &FitConfig,
    algorithm: Algorithm,
) -> (Vec<Component>, Vec<usize>) {
    let k = model.k();
    let results: Vec<(Component, bool)> = model
        .components
        .par_iter()
        .enumerate()
        .map(|(j, comp)| {
            let problem = Problem::new(prep, w, k, j, cfg);
            match algorithm {
                Algorithm::Em => problem.full_step(comp),
                Algorithm::Ecm => problem.ecm_step(comp),
            }
        })
        .collect();
    let flagged = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(j, _)| j)
        .collect();
    (results.into_iter().map(|r| r.0).collect(), flagged)
}

// ---- per-component maximization --------------------------------------------------

/// Weighted objective of one component restricted to cells with mass.
struct Problem<'a> {
    prep: &'a Prepared,
    cells: Vec<usize>,
    w: Vec<f64>,
    total_w: f64,
    cfg: &'a FitConfig,
}

impl<'a> Problem<'a> {
    fn new(prep: &'a Prepared, w: &[f64], k: usize, j: usize, cfg: &'a FitConfig) -> Self {
        let mut cell_w = vec![0.0; prep.n_cells];
        for (i, &c) in prep.cell_of.iter().enumerate() {
            cell_w[c] += w[i * k + j];
        }
        let mut cells = Vec::new();
        let mut ws = Vec::new();
        for (c, &v) in cell_w.iter().enumerate() {
            if v > WEIGHT_SKIP {
                cells.push(c);
                ws.push(v);
            }
        }
        let total_w = ws.iter().sum();
        Self {
            prep,
            cells,
            w: ws,
            total_w,
            cfg,
        }
    }

    fn objective(&self, comp: &Component) -> f64 {
        let lf = self.prep.ln_f(comp, &self.cells, self.cfg.pmf_floor, self.cfg.rect_tol);
        weighted_sum(&self.w, &lf)
    }

    fn nm_options(&self) -> NelderMeadOptions {
        NelderMeadOptions {
            max_evals: self.cfg.inner_max_evals,
            ftol: 1e-10 * self.total_w.max(1.0),
            xtol: 1e-7,
        }
    }

    /// Closed-form weighted marginal MLEs for the free marginals.
    fn weighted_marginals(&self, comp: &Component) -> Option<(Vec<Marginal>, bool)> {
        if comp.angle.is_some() {
            return None;
        }
        let mut out = comp.marginals.clone();
        let mut degenerate = false;
        for t in 0..comp.dim() {
            if !comp.marginal_free[t] {
                continue;
            }
            let col: Vec<f64> = if self.prep.discrete {
                self.cells.iter().map(|&c| self.prep.cells[c][t] as f64).collect()
            } else {
                self.cells.iter().map(|&c| self.prep.row(c)[t]).collect()
            };
            let fit = fit_marginal_weighted(comp.marginals[t].family(), &col, &self.w).ok()?;
            degenerate |= fit.degenerate;
            out[t] = fit.model;
        }
        Some((out, degenerate))
    }

    fn is_independent(comp: &Component) -> bool {
        comp.copula.family() == CopulaFamily::Independence && comp.angle.is_none_or(|a| !a.free)
    }

    /// Returns the updated component and whether the step could not be taken.
    fn full_step(&self, comp: &Component) -> (Component, bool) {
        if self.cells.is_empty() {
            return (comp.clone(), false);
        }
        let current = self.objective(comp);
        if Self::is_independent(comp) && comp.angle.is_none() {
            return self.closed_form(comp, current);
        }
        let layout = Layout::new(comp);
        if layout.len() == 0 {
            return (comp.clone(), false);
        }
        let neg = |v: &[f64]| match layout.decode(comp, v) {
            Some(c) => -self.objective(&c),
            None => f64::INFINITY,
        };
        let mut x0 = layout.encode(comp, comp);
        let mut best_start = current;
        if let Some((margs, _)) = self.weighted_marginals(comp) {
            if let Ok(alt) = comp.clone().with_marginals(margs) {
                let v = self.objective(&alt);
                if v > best_start {
                    best_start = v;
                    x0 = layout.encode(comp, &alt);
                }
            }
        }
        let _ = best_start;
        let res = nelder_mead(neg, &x0, &layout.steps(comp), self.nm_options());
        let candidate = layout.decode(comp, &res.x);
        self.accept(comp, current, candidate)
    }

    fn closed_form(&self, comp: &Component, current: f64) -> (Component, bool) {
        match self.weighted_marginals(comp) {
            Some((margs, _)) => {
                let cand = comp.clone().with_marginals(margs).ok();
                self.accept(comp, current, cand)
            }
            None => (comp.clone(), true),
        }
    }

    fn accept(&self, comp: &Component, current: f64, candidate: Option<Component>) -> (Component, bool) {
        let failed = !current.is_finite();
        match candidate {
            Some(c) => {
                let v = self.objective(&c);
                if v >= current || (failed && v.is_finite()) {
                    (c, false)
                } else {
                    (comp.clone(), failed)
                }
            }
            None => (comp.clone(), failed),
        }
    }

    fn ecm_step(&self, comp: &Component) -> (Component, bool) {
        if self.cells.is_empty() {
            return (comp.clone(), false);
        }
        let mut flagged = false;
        let mut comp = comp.clone();
        let (c, f) = self.cm1(&comp);
        comp = c;
        flagged |= f;
        let (c, f) = self.cm2(&comp);
        comp = c;
        flagged |= f;
        if comp.angle.is_some_and(|a| a.free) {
            let (c, f) = self.cm3(&comp);
            comp = c;
            flagged |= f;
        }
        (comp, flagged)
    }

    fn rotated(&self, comp: &Component) -> Vec<f64> {
        let p = self.prep.p;
        let mut z = vec![0.0; self.cells.len() * p];
        for (i, &c) in self.cells.iter().enumerate() {
            comp.rotate(self.prep.row(c), &mut z[i * p..(i + 1) * p]);
        }
        z
    }

    /// Marginal part of the objective and the probability transforms.
    fn marginal_part(&self, margs: &[Marginal], z: &[f64], u: &mut [f64]) -> f64 {
        let p = margs.len();
        let mut total = 0.0;
        for (i, w) in self.w.iter().enumerate() {
            let mut s = 0.0;
            for t in 0..p {
                let zt = z[i * p + t];
                s += margs[t].ln_pdf(zt);
                u[i * p + t] = margs[t].cdf(zt);
            }
            total += w * s;
        }
        total
    }

    fn copula_part(&self, cop: &CopulaModel, u: &[f64]) -> f64 {
        if cop.family() == CopulaFamily::Independence {
            return 0.0;
        }
        let p = cop.dim();
        self.w
            .iter()
            .enumerate()
            .map(|(i, w)| w * cop.ln_density(&u[i * p..(i + 1) * p]))
            .sum()
    }

    fn cm1(&self, comp: &Component) -> (Component, bool) {
        let current = self.objective(comp);
        if comp.copula.family() == CopulaFamily::Independence && comp.angle.is_none() {
            return self.closed_form(comp, current);
        }
        let free: Vec<usize> = (0..comp.dim()).filter(|&t| comp.marginal_free[t]).collect();
        if free.is_empty() {
            return (comp.clone(), !current.is_finite());
        }
        let z = self.rotated(comp);
        let mut u = vec![0.0; z.len()];
        let reference = comp.marginals.clone();
        let decode = |v: &[f64]| -> Vec<Marginal> {
            let mut margs = reference.clone();
            let mut o = 0;
            for &t in &free {
                let np = reference[t].family().n_params();
                margs[t] = Marginal::from_free(&reference[t], &v[o..o + np]);
                o += np;
            }
            margs
        };
        let encode = |margs: &[Marginal]| -> Vec<f64> {
            free.iter().flat_map(|&t| margs[t].to_free(&reference[t])).collect()
        };
        let mut obj = |v: &[f64]| {
            let margs = decode(v);
            let s = self.marginal_part(&margs, &z, &mut u) + self.copula_part(&comp.copula, &u);
            if s.is_nan() {
                f64::INFINITY
            } else {
                -s
            }
        };
        let mut x0 = encode(&reference);
        if let Some((alt, _)) = self.weighted_marginals(comp) {
            let xa = encode(&alt);
            if obj(&xa) < obj(&x0) {
                x0 = xa;
            }
        }
        let steps: Vec<f64> = free.iter().flat_map(|&t| reference[t].free_steps()).collect();
        let res = nelder_mead(&mut obj, &x0, &steps, self.nm_options());
        let cand = comp.clone().with_marginals(decode(&res.x)).ok();
        self.accept(comp, current, cand)
    }

    fn cm2(&self, comp: &Component) -> (Component, bool) {
        let current = self.objective(comp);
        if !comp.copula_free || comp.copula.n_params() == 0 {
            return (comp.clone(), !current.is_finite());
        }
        let z = self.rotated(comp);
        let mut u = vec![0.0; z.len()];
        let marg = self.marginal_part(&comp.marginals, &z, &mut u);
        let base = comp.copula.clone();
        let cop_obj = |v: &[f64]| match base.from_free(v) {
            Ok(c) => {
                let s = self.copula_part(&c, &u);
                if s.is_nan() {
                    f64::INFINITY
                } else {
                    -s
                }
            }
            Err(_) => f64::INFINITY,
        };
        let x0 = base.to_free();
        let mut best_x = x0.clone();
        let mut best_v = cop_obj(&x0);
        if base.n_params() == 1 {
            let (lo, hi) = base.free_bounds()[0];
            let (x, v) = golden_section(|t| cop_obj(&[t]), lo, hi, 1e-7, 200);
            if v < best_v {
                best_v = v;
                best_x = vec![x];
            }
        } else {
            let steps = vec![0.2; x0.len()];
            let res = nelder_mead(cop_obj, &x0, &steps, self.nm_options());
            if res.value < best_v {
                best_v = res.value;
                best_x = res.x;
            }
        }
        let _ = (marg, best_v);
        let cand = base.from_free(&best_x).ok().and_then(|c| comp.clone().with_copula(c).ok());
        self.accept(comp, current, cand)
    }

    fn cm3(&self, comp: &Component) -> (Component, bool) {
        let current = self.objective(comp);
        let free = comp.angle.map(|a| a.free).unwrap_or(false);
        let start = comp.angle.map(|a| a.value).unwrap_or(TAU);
        // sample-space centre of free Normal marginals, carried along with the angle
        let centre = (comp.marginal_free.iter().all(|&f| f)
            && comp.marginals.iter().all(|m| m.family() == MarginalFamily::Normal))
        .then(|| rotate_to_component(-start, [comp.marginals[0].params()[0], comp.marginals[1].params()[0]]));
        let at = |omega: f64, carry: bool| -> Option<Component> {
            let mut c = comp.clone();
            c.angle = Some(Angle::new(omega, free));
            if carry {
                let m = rotate_to_component(omega, centre?);
                for t in 0..2 {
                    c.marginals[t] = Marginal::normal(m[t], comp.marginals[t].params()[1]).ok()?;
                }
            }
            Some(c)
        };
        let mut best = (start, false, -current);
        for carry in [false, true] {
            if carry && centre.is_none() {
                continue;
            }
            let f = |omega: f64| -> f64 {
                match at(omega, carry).map(|c| self.objective(&c)) {
                    Some(v) if !v.is_nan() => -v,
                    _ => f64::INFINITY,
                }
            };
            let mut local = (start, f(start));
            for g in 1..=ANGLE_GRID {
                let omega = TAU * g as f64 / ANGLE_GRID as f64;
                let v = f(omega);
                if v < local.1 {
                    local = (omega, v);
                }
            }
            let half = TAU / ANGLE_GRID as f64;
            let (x, v) = golden_section(f, local.0 - half, local.0 + half, 1e-7, 200);
            if v < local.1 {
                local = (x, v);
            }
            if local.1 < best.2 {
                best = (local.0, carry, local.1);
            }
        }
        self.accept(comp, current, at(best.0, best.1))
    }
}

fn weighted_sum(w: &[f64], lf: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in w.iter().zip(lf) {
        if *b == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        s += a * b;
    }
    s
}

/// Packing of a component's free parameters into one unconstrained vector.
struct Layout {
    marginals: Vec<usize>,
    copula: bool,
    angle: bool,
    len: usize,
}

impl Layout {
    fn new(comp: &Component) -> Self {
        let marginals: Vec<usize> = (0..comp.dim()).filter(|&t| comp.marginal_free[t]).collect();
        let copula = comp.copula_free && comp.copula.n_params() > 0;
        let angle = comp.angle.is_some_and(|a| a.free);
        let len = marginals
            .iter()
            .map(|&t| comp.marginals[t].family().n_params())
            .sum::<usize>()
            + if copula { comp.copula.n_params() } else { 0 }
            + usize::from(angle);
        Self {
            marginals,
            copula,
            angle,
            len,
        }
    }

    fn len(&self) -> usize {
        self.len
    }

    fn encode(&self, reference: &Component, comp: &Component) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len);
        for &t in &self.marginals {
            v.extend(comp.marginals[t].to_free(&reference.marginals[t]));
        }
        if self.copula {
            v.extend(comp.copula.to_free());
        }
        if self.angle {
            v.push(comp.angle.map(|a| a.value).unwrap_or(TAU));
        }
        v
    }

    fn decode(&self, reference: &Component, v: &[f64]) -> Option<Component> {
        let mut c = reference.clone();
        let mut o = 0;
        for &t in &self.marginals {
            let np = reference.marginals[t].family().n_params();
            c.marginals[t] = Marginal::from_free(&reference.marginals[t], &v[o..o + np]);
            o += np;
        }
        if self.copula {
            let np = reference.copula.n_params();
            c.copula = reference.copula.from_free(&v[o..o + np]).ok()?;
            o += np;
        }
        if self.angle {
            c.angle = Some(Angle::new(v[o], true));
        }
        Some(c)
    }

    fn steps(&self, comp: &Component) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.len);
        for &t in &self.marginals {
            s.extend(comp.marginals[t].free_steps());
        }
        if self.copula {
            s.extend(std::iter::repeat_n(0.2, comp.copula.n_params()));
        }
        if self.angle {
            s.push(0.2);
        }
        s
    }
}

// ---- fitting -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Joint maximization of each component's parameters.
    #[default]
    Em,
    /// Conditional maximization over marginals, copula and angle in turn.
    Ecm,
}

/// Controls for [`fit`] and the start search in [`crate::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    /// Stop once the relative log-likelihood increase falls below this.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Give every eligible component a free sample-space angle.
    pub rotation: bool,
    /// Fit every distinct ordering of the component copulas.
    pub permutation_search: bool,
    pub pmf_floor: f64,
    /// Worker threads; 0 uses all logical cores.
    pub jobs: usize,
    /// Evaluation budget of each inner Nelder–Mead search.
    pub inner_max_evals: usize,
    /// Absolute tolerance of rectangle probabilities.
    pub rect_tol: f64,
    /// How starting partitions are drawn.
    pub partition: PartitionMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Em,
            rel_tol: 1e-8,
            max_iter: 1000,
            n_starts: 1,
            seed: 1,
            rotation: false,
            permutation_search: false,
            pmf_floor: DEFAULT_PMF_FLOOR,
            jobs: 0,
            inner_max_evals: 400,
            rect_tol: 1e-12,
            partition: PartitionMethod::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(invalid("rel_tol", "must be finite and > 0"));
        }
        if !(self.pmf_floor > 0.0 && self.pmf_floor < 1.0) {
            return Err(invalid("pmf_floor", "must lie in (0, 1)"));
        }
        if self.n_starts == 0 {
            return Err(invalid("n_starts", "must be >= 1"));
        }
        if self.inner_max_evals == 0 {
            return Err(invalid("inner_max_evals", "must be >= 1"));
        }
        if !(self.rect_tol > 0.0) {
            return Err(invalid("rect_tol", "must be > 0"));
        }
        Ok(())
    }

    /// Runs `f` on a pool of `jobs` workers (all cores when 0).
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        if self.jobs == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: MixtureModel,
    /// Observed log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    pub loglik: f64,
    /// `n x k` posterior probabilities under the final model.
    pub responsibilities: Vec<Vec<f64>>,
    /// 1-based index of the most probable component per observation.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Some weight fell below `1/(10 n)`.
    pub degenerate: bool,
    /// 0-based components whose update could not be evaluated.
    pub flagged: Vec<usize>,
    pub q: usize,
    pub n: usize,
    pub bic: f64,
}

/// Iterates E-steps and M (or CM) steps from `start` until the relative
/// log-likelihood increase drops below `rel_tol` or `max_iter` is reached.
pub fn fit(start: &MixtureModel, data: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    cfg.install(|| fit_inner(start, data, cfg))
}

fn fit_inner(start: &MixtureModel, data: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    let prep = Prepared::new(start, data)?;
    if cfg.algorithm == Algorithm::Ecm && prep.discrete {
        return Err(invalid("algorithm", "ECM needs continuous data; use EM for counts"));
    }
    let n = prep.n;
    let k = start.k();
    let mut model = start.clone();
    let mut lf = ln_f_matrix(&model, &prep, cfg);
    let (mut ll, mut w) = loglik_and_weights(&model.weights, &lf, &prep, true)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut degenerate = false;
    let mut iterations = 0;
    let mut flagged = std::collections::BTreeSet::new();
    let min_weight = 1.0 / (10.0 * n as f64);
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut pi = vec![0.0; k];
        for row in w.chunks(k) {
            for (p, v) in pi.iter_mut().zip(row) {
                *p += v;
            }
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        let (comps, bad) = update_components(&model, &prep, &w, cfg, cfg.algorithm);
        flagged.extend(bad);
        model = MixtureModel::new(pi, comps)?;
        lf = ln_f_matrix(&model, &prep, cfg);
        let (ll_new, w_new) = loglik_and_weights(&model.weights, &lf, &prep, true)?;
        trace.push(ll_new);
        let rel = (ll_new - ll) / ll.abs().max(f64::MIN_POSITIVE);
        ll = ll_new;
        w = w_new;
        if model.weights.iter().any(|&p| p < min_weight) {
            degenerate = true;
            break;
        }
        if rel < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    let responsibilities: Vec<Vec<f64>> = w.chunks(k).map(<[f64]>::to_vec).collect();
    let assignments = responsibilities
        .iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best + 1
        })
        .collect();
    let q = model.n_free_params();
    Ok(FitReport {
        bic: crate::eval::bic(ll, q, n),
        model,
        trace,
        loglik: ll,
        responsibilities,
        assignments,
        iterations,
        converged,
        degenerate,
        flagged: flagged.into_iter().collect(),
        q,
        n,
    })
}
