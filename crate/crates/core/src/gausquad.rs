//! Multivariate normal log-densities and rectangle probabilities for the
//! Gaussian copula.
//!
//! Bivariate orthants use Genz's refinement of the Drezner–Wesolowsky
//! method. Three and four dimensional rectangles are reduced one dimension
//! at a time by conditioning on the variable with the narrowest interval and
//! integrating the conditional probability with adaptive Gauss–Kronrod
//! quadrature in probability scale. Everything is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::special::{norm_cdf, norm_quantile};

/// Largest dimension supported by [`mvn_rectangle`].
pub const MAX_RECTANGLE_DIM: usize = 4;
/// Default absolute tolerance of [`mvn_rectangle`].
pub const DEFAULT_TOL: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrStructure {
    Exchangeable,
    Unstructured,
}

/// A positive definite correlation matrix with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    structure: CorrStructure,
    entries: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self::exchangeable(dim, 0.0).expect("identity is positive definite")
    }

    /// All off-diagonal correlations equal to `rho`; requires
    /// `-1/(dim-1) < rho < 1`.
    pub fn exchangeable(dim: usize, rho: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be >= 1"));
        }
        if dim > 1 {
            let lo = -1.0 / (dim as f64 - 1.0);
            if !(rho > lo && rho < 1.0) {
                return Err(invalid(
                    "rho",
                    format!("exchangeable correlation must lie in ({lo}, 1), got {rho}"),
                ));
            }
        }
        let mut entries = vec![rho; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::build(dim, CorrStructure::Exchangeable, entries)
    }

    /// Off-diagonal entries given in row-major upper-triangular order:
    /// `rho_12, rho_13, ..., rho_1p, rho_23, ...`.
    pub fn unstructured(dim: usize, upper: &[f64]) -> Result<Self> {
        let expected = dim * dim.saturating_sub(1) / 2;
        if upper.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: upper.len(),
            });
        }
        let mut entries = vec![0.0; dim * dim];
        let mut it = upper.iter();
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
            for j in (i + 1)..dim {
                let r = *it.next().unwrap();
                if !(r > -1.0 && r < 1.0) {
                    return Err(invalid("rho", format!("correlation must lie in (-1, 1), got {r}")));
                }
                entries[i * dim + j] = r;
                entries[j * dim + i] = r;
            }
        }
        Self::build(dim, CorrStructure::Unstructured, entries)
    }

    fn build(dim: usize, structure: CorrStructure, entries: Vec<f64>) -> Result<Self> {
        let chol = cholesky(dim, &entries)
            .ok_or_else(|| invalid("correlation", "matrix is not positive definite"))?;
        let log_det = 2.0 * (0..dim).map(|i| chol[i * dim + i].ln()).sum::<f64>();
        Ok(Self {
            dim,
            structure,
            entries,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn structure(&self) -> CorrStructure {
        self.structure
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor, row-major.
    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    /// Free parameters: `[rho]` when exchangeable, upper triangle otherwise.
    pub fn params(&self) -> Vec<f64> {
        match self.structure {
            CorrStructure::Exchangeable => {
                if self.dim > 1 {
                    vec![self.get(0, 1)]
                } else {
                    vec![0.0]
                }
            }
            CorrStructure::Unstructured => self.upper(),
        }
    }

    pub fn upper(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * (self.dim - 1) / 2);
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        match self.structure {
            CorrStructure::Exchangeable => 1,
            CorrStructure::Unstructured => self.dim * (self.dim - 1) / 2,
        }
    }

    /// Sub-matrix on `coords` (in the given order). Exchangeable structure
    /// is preserved.
    pub fn sub(&self, coords: &[usize]) -> Result<Self> {
        if let Some(&c) = coords.iter().find(|&&c| c >= self.dim) {
            return Err(Error::Domain(format!("coordinate {c} out of range")));
        }
        let m = coords.len();
        let mut entries = vec![0.0; m * m];
        for (a, &i) in coords.iter().enumerate() {
            for (b, &j) in coords.iter().enumerate() {
                entries[a * m + b] = self.get(i, j);
            }
        }
        Self::build(m, self.structure, entries)
    }

    /// Solves `L y = z` and returns `|y|^2 = z' R^{-1} z`.
    pub fn quad_form(&self, z: &[f64]) -> f64 {
        let d = self.dim;
        let mut y = [0.0f64; 16];
        let mut heap;
        let y: &mut [f64] = if d <= 16 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let mut s = z[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * y[k];
            }
            y[i] = s / self.chol[i * d + i];
            q += y[i] * y[i];
        }
        q
    }
}

fn cholesky(d: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 1e-12) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Log density of `N_p(0, R)` at `z`.
pub fn mvn_logdensity(z: &[f64], r: &CorrelationMatrix) -> Result<f64> {
    if z.len() != r.dim {
        return Err(Error::DimensionMismatch {
            expected: r.dim,
            got: z.len(),
        });
    }
    Ok(-0.5 * (r.dim as f64 * LN_2PI + r.log_det + r.quad_form(z)))
}

// Gauss–Legendre half-rules (weight, node) used by the bivariate routine.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197_0),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475_0),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305_0),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515_0),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { norm_cdf(-k) };
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    let ar = r.abs();
    let rule: &[(f64, f64)] = if ar < 0.3 {
        &GL6
    } else if ar < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let h = h;
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if ar < 0.925 {
        if ar > 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = r.asin();
            for &(w, x) in rule {
                for s in [-1.0, 1.0] {
                    let sn = (0.5 * asr * (1.0 + s * x)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (2.0 * two_pi);
        }
        bvn += norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if ar < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -0.5 * (bs / as_ + hk);
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                let sp = two_pi.sqrt() * norm_cdf(-b / a);
                bvn -= (-0.5 * hk).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a *= 0.5;
            for &(w, x) in rule {
                for s in [-1.0, 1.0] {
                    let xs = (a + a * s * x).powi(2);
                    let rs = (1.0 - xs).sqrt();
                    let asr = -0.5 * (bs / xs + hk);
                    if asr > -100.0 {
                        let sp = 1.0 + c * xs * (1.0 + d * xs);
                        let ep = (-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs;
                        bvn += a * w * asr.exp() * (ep - sp);
                    }
                }
            }
            bvn = -bvn / two_pi;
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 {
                norm_cdf(k) - norm_cdf(h)
            } else {
                norm_cdf(-h) - norm_cdf(-k)
            };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// `P(X <= h, Y <= k)`.
#[inline]
pub fn bvn_cdf(h: f64, k: f64, r: f64) -> f64 {
    bvn_upper(-h, -k, r)
}

fn bvn_rectangle(lo: [f64; 2], hi: [f64; 2], r: f64) -> f64 {
    if r == 0.0 {
        return (norm_cdf(hi[0]) - norm_cdf(lo[0])) * (norm_cdf(hi[1]) - norm_cdf(lo[1]));
    }
    let p = bvn_cdf(hi[0], hi[1], r) - bvn_cdf(lo[0], hi[1], r) - bvn_cdf(hi[0], lo[1], r)
        + bvn_cdf(lo[0], lo[1], r);
    p.clamp(0.0, 1.0)
}

// Gauss–Kronrod 7/15 nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod integration to absolute tolerance `tol`.
pub(crate) fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut total = 0.0;
    let mut stack = vec![(a, b, 0u32)];
    let width = b - a;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (v, err) = gk15(&mut f, lo, hi);
        let local_tol = tol * (hi - lo) / width;
        if err <= local_tol.max(1e-15 * v.abs()) || depth >= 40 {
            total += v;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    total
}

/// Fixed quadrature over the common factor of an exchangeable correlation
/// with `rho >= 0`: `P(a < X <= b) = sum_i w_i prod_t [Phi(c_t(b)) - Phi(c_t(a))]`
/// with `c_t(x) = (x - load * s_i) / resid`. Reusing the nodes across many
/// boxes makes repeated cell probabilities cheap.
#[derive(Debug, Clone)]
pub(crate) struct FactorRule {
    pub load: f64,
    pub resid: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FactorRule {
    pub fn new(rho: f64) -> Self {
        let rho = rho.clamp(0.0, 1.0 - 1e-9);
        let (load, resid) = (rho.sqrt(), (1.0 - rho).sqrt());
        if rho == 0.0 {
            return Self {
                load,
                resid,
                nodes: vec![0.0],
                weights: vec![1.0],
            };
        }
        // panel width tracks the scale resid/load of each factor in s
        let half = 8.5;
        let width = (resid / load).min(2.0);
        let panels = ((2.0 * half / width).ceil() as usize).clamp(1, 2000);
        let h = 2.0 * half / panels as f64;
        let mut nodes = Vec::with_capacity(15 * panels);
        let mut weights = Vec::with_capacity(15 * panels);
        let mut push = |x: f64, w: f64| {
            nodes.push(x);
            weights.push(w * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt());
        };
        for i in 0..panels {
            let c = -half + (i as f64 + 0.5) * h;
            let r = 0.5 * h;
            push(c, WGK[7] * r);
            for j in 0..7 {
                push(c - r * XGK[j], WGK[j] * r);
                push(c + r * XGK[j], WGK[j] * r);
            }
        }
        Self {
            load,
            resid,
            nodes,
            weights,
        }
    }
}

/// Rectangle probability `P(lower < X <= upper)` for `X ~ N_p(0, R)`,
/// `p <= 4`. Infinite limits are allowed.
pub fn mvn_rectangle(lower: &[f64], upper: &[f64], r: &CorrelationMatrix, tol: f64) -> Result<f64> {
    let p = r.dim;
    if lower.len() != p || upper.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: lower.len().min(upper.len()),
        });
    }
    if p > MAX_RECTANGLE_DIM {
        return Err(Error::Unsupported(format!(
            "rectangle probabilities are implemented for p <= {MAX_RECTANGLE_DIM}, got p = {p}"
        )));
    }
    if lower.iter().zip(upper).any(|(a, b)| a.is_nan() || b.is_nan() || a > b) {
        return Err(Error::Domain("rectangle needs lower <= upper".into()));
    }
    if p >= 3 && r.structure == CorrStructure::Exchangeable && r.get(0, 1) >= 0.0 {
        return Ok(one_factor_rectangle(lower, upper, r.get(0, 1), tol).clamp(0.0, 1.0));
    }
    Ok(rectangle_rec(lower, upper, &r.entries, p, tol).clamp(0.0, 1.0))
}

// Exchangeable rho >= 0: X_t = sqrt(rho) S + sqrt(1 - rho) e_t, so the box
// probability is a one-dimensional integral over the common factor S.
fn one_factor_rectangle(lo: &[f64], hi: &[f64], rho: f64, tol: f64) -> f64 {
    if rho == 0.0 {
        return lo.iter().zip(hi).map(|(&a, &b)| norm_cdf(b) - norm_cdf(a)).product();
    }
    let (load, resid) = (rho.sqrt(), (1.0 - rho).sqrt());
    // outside this window the factor density or some box factor is below 1e-16
    const CUT: f64 = 8.5;
    let mut s_lo = f64::NEG_INFINITY;
    let mut s_hi = f64::INFINITY;
    for (&a, &b) in lo.iter().zip(hi) {
        s_hi = s_hi.min((b + CUT * resid) / load);
        s_lo = s_lo.max((a - CUT * resid) / load);
    }
    let s_lo = s_lo.max(-CUT);
    let s_hi = s_hi.min(CUT);
    if s_lo >= s_hi {
        return 0.0;
    }
    let g = |s: f64| {
        let c = load * s;
        let mut prod = (-0.5 * s * s).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for (&a, &b) in lo.iter().zip(hi) {
            prod *= norm_cdf((b - c) / resid) - norm_cdf((a - c) / resid);
            if prod == 0.0 {
                break;
            }
        }
        prod
    };
    // panels no wider than the factor scale so narrow peaks are not missed
    let width = (resid / load).min(2.0);
    let panels = ((s_hi - s_lo) / width).ceil().max(1.0) as usize;
    let h = (s_hi - s_lo) / panels as f64;
    (0..panels)
        .map(|i| integrate(g, s_lo + i as f64 * h, s_lo + (i + 1) as f64 * h, tol / panels as f64))
        .sum()
}

/// Distribution function `P(X <= upper)`.
pub fn mvn_cdf(upper: &[f64], r: &CorrelationMatrix, tol: f64) -> Result<f64> {
    let lower = vec![f64::NEG_INFINITY; upper.len()];
    mvn_rectangle(&lower, upper, r, tol)
}

fn rectangle_rec(lo: &[f64], hi: &[f64], corr: &[f64], p: usize, tol: f64) -> f64 {
    match p {
        0 => 1.0,
        1 => (norm_cdf(hi[0]) - norm_cdf(lo[0])).max(0.0),
        2 => bvn_rectangle([lo[0], lo[1]], [hi[0], hi[1]], corr[1]),
        _ => {
            // condition on the coordinate with the smallest marginal mass
            let probs: Vec<f64> = (0..p).map(|i| norm_cdf(hi[i]) - norm_cdf(lo[i])).collect();
            let t = (0..p)
                .min_by(|&a, &b| probs[a].total_cmp(&probs[b]))
                .unwrap();
            if probs[t] <= 0.0 {
                return 0.0;
            }
            let rest: Vec<usize> = (0..p).filter(|&i| i != t).collect();
            let m = p - 1;
            let s: Vec<f64> = rest
                .iter()
                .map(|&i| (1.0 - corr[i * p + t] * corr[i * p + t]).max(1e-300).sqrt())
                .collect();
            let mut cond = vec![0.0; m * m];
            for (a, &i) in rest.iter().enumerate() {
                for (b, &j) in rest.iter().enumerate() {
                    cond[a * m + b] = if a == b {
                        1.0
                    } else {
                        ((corr[i * p + j] - corr[i * p + t] * corr[j * p + t]) / (s[a] * s[b]))
                            .clamp(-1.0, 1.0)
                    };
                }
            }
            let mut clo = vec![0.0; m];
            let mut chi = vec![0.0; m];
            let inner_tol = tol * 0.1;
            let g = |u: f64| {
                let x = norm_quantile(u).clamp(-40.0, 40.0);
                for (a, &i) in rest.iter().enumerate() {
                    let rt = corr[i * p + t];
                    clo[a] = (lo[i] - rt * x) / s[a];
                    chi[a] = (hi[i] - rt * x) / s[a];
                }
                rectangle_rec(&clo, &chi, &cond, m, inner_tol)
            };
            let (ua, ub) = (norm_cdf(lo[t]), norm_cdf(hi[t]));
            integrate(g, ua, ub, tol * 0.5)
        }
    }
}
