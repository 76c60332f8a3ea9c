//! Univariate marginal families: density, distribution function, quantile
//! and weighted maximum-likelihood fitting.

use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::optimize::{golden_section, nelder_mead, NelderMeadOptions};
use crate::special::{logistic, logit, norm_cdf, norm_quantile, LN_SQRT_2PI};

/// Smallest standard deviation a fitted Normal marginal may take.
pub const SD_FLOOR: f64 = 1e-8;
/// Lower bound on the variance of a fitted Beta marginal.
pub const BETA_VARIANCE_FLOOR: f64 = 1e-4;
const PROB_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginalFamily {
    Normal,
    Beta,
    Gamma,
    Binomial { trials: u32 },
}

impl MarginalFamily {
    pub fn is_discrete(&self) -> bool {
        matches!(self, MarginalFamily::Binomial { .. })
    }

    /// Number of free parameters (the Binomial index is fixed).
    pub fn n_params(&self) -> usize {
        match self {
            MarginalFamily::Binomial { .. } => 1,
            _ => 2,
        }
    }

    /// Whether the family's support is the whole real line.
    pub fn is_real_line(&self) -> bool {
        matches!(self, MarginalFamily::Normal)
    }
}

/// A univariate marginal distribution with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    Normal { mean: f64, sd: f64 },
    Beta { alpha: f64, beta: f64 },
    /// Shape `shape` and rate `rate` (scale `1/rate`).
    Gamma { shape: f64, rate: f64 },
    Binomial { trials: u32, prob: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be finite and > 0, got {v}")))
    }
}

impl Marginal {
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        let m = Marginal::Normal { mean, sd };
        m.validate()?;
        Ok(m)
    }

    pub fn beta(alpha: f64, beta: f64) -> Result<Self> {
        let m = Marginal::Beta { alpha, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        let m = Marginal::Gamma { shape, rate };
        m.validate()?;
        Ok(m)
    }

    pub fn binomial(trials: u32, prob: f64) -> Result<Self> {
        let m = Marginal::Binomial { trials, prob };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Normal { mean, sd } => {
                if !mean.is_finite() {
                    return Err(invalid("mean", "must be finite"));
                }
                positive("sd", sd)
            }
            Marginal::Beta { alpha, beta } => {
                positive("alpha", alpha)?;
                positive("beta", beta)
            }
            Marginal::Gamma { shape, rate } => {
                positive("shape", shape)?;
                positive("rate", rate)
            }
            Marginal::Binomial { trials, prob } => {
                if trials == 0 {
                    return Err(invalid("trials", "must be >= 1"));
                }
                if !(prob > 0.0 && prob < 1.0) {
                    return Err(invalid("prob", format!("must lie in (0, 1), got {prob}")));
                }
                Ok(())
            }
        }
    }

    pub fn family(&self) -> MarginalFamily {
        match *self {
            Marginal::Normal { .. } => MarginalFamily::Normal,
            Marginal::Beta { .. } => MarginalFamily::Beta,
            Marginal::Gamma { .. } => MarginalFamily::Gamma,
            Marginal::Binomial { trials, .. } => MarginalFamily::Binomial { trials },
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.family().is_discrete()
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Marginal::Normal { mean, sd } => vec![mean, sd],
            Marginal::Beta { alpha, beta } => vec![alpha, beta],
            Marginal::Gamma { shape, rate } => vec![shape, rate],
            Marginal::Binomial { prob, .. } => vec![prob],
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Normal { mean, .. } => mean,
            Marginal::Beta { alpha, beta } => alpha / (alpha + beta),
            Marginal::Gamma { shape, rate } => shape / rate,
            Marginal::Binomial { trials, prob } => trials as f64 * prob,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Normal { sd, .. } => sd * sd,
            Marginal::Beta { alpha, beta } => {
                let s = alpha + beta;
                alpha * beta / (s * s * (s + 1.0))
            }
            Marginal::Gamma { shape, rate } => shape / (rate * rate),
            Marginal::Binomial { trials, prob } => trials as f64 * prob * (1.0 - prob),
        }
    }

    /// Log density (log mass for Binomial). Outside the support this is `-inf`.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
            }
            Marginal::Beta { alpha, beta } => {
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (-x).ln_1p() - ln_beta(alpha, beta)
            }
            Marginal::Gamma { shape, rate } => {
                if !(x > 0.0) || !x.is_finite() {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            Marginal::Binomial { trials, prob } => match count_index(x, trials) {
                Some(k) => binomial_ln_pmf(trials, prob, k),
                None => f64::NEG_INFINITY,
            },
        }
    }

    /// Distribution function; clamps outside the support.
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        match *self {
            Marginal::Normal { mean, sd } => norm_cdf((x - mean) / sd),
            Marginal::Beta { alpha, beta } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    beta_reg(alpha, beta, x)
                }
            }
            Marginal::Gamma { shape, rate } => {
                if x <= 0.0 {
                    0.0
                } else if x == f64::INFINITY {
                    1.0
                } else {
                    gamma_lr(shape, rate * x)
                }
            }
            Marginal::Binomial { trials, prob } => {
                if x < 0.0 {
                    return 0.0;
                }
                let k = x.floor();
                if k >= trials as f64 {
                    return 1.0;
                }
                binomial_cdf(trials, prob, k as u32)
            }
        }
    }

    /// Quantile function. For Binomial this is the smallest count whose CDF
    /// reaches `u`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level must be in (0,1), got {u}")));
        }
        Ok(match *self {
            Marginal::Normal { mean, sd } => mean + sd * norm_quantile(u),
            Marginal::Beta { .. } => self.invert_continuous(u, 0.0, 1.0),
            Marginal::Gamma { shape, rate } => {
                let mut hi = (shape / rate).max(1.0 / rate);
                while self.cdf(hi) < u {
                    hi *= 2.0;
                }
                self.invert_continuous(u, 0.0, hi)
            }
            Marginal::Binomial { trials, prob } => {
                let mut acc = 0.0;
                for k in 0..=trials {
                    acc += binomial_ln_pmf(trials, prob, k).exp();
                    if acc >= u {
                        return Ok(k as f64);
                    }
                }
                trials as f64
            }
        })
    }

    /// Safeguarded Newton/bisection on the CDF within `[lo, hi]`.
    fn invert_continuous(&self, u: f64, mut lo: f64, mut hi: f64) -> f64 {
        let mut x = 0.5 * (lo + hi);
        for _ in 0..300 {
            let f = self.cdf(x) - u;
            if f.abs() <= 1e-15 {
                return x;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = self.ln_pdf(x).exp();
            let newton = x - f / d;
            x = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
                break;
            }
        }
        x
    }

    /// Unconstrained coordinates relative to `reference` (same family).
    ///
    /// Normal marginals use `((mean - ref_mean)/ref_sd, ln(sd/ref_sd))`, which
    /// keeps the search invariant to affine rescaling of the data. Beta
    /// coordinates encode the variance floor.
    pub fn to_free(&self, reference: &Marginal) -> Vec<f64> {
        match (*self, *reference) {
            (Marginal::Normal { mean, sd }, Marginal::Normal { mean: rm, sd: rs }) => {
                vec![(mean - rm) / rs, (sd / rs).ln()]
            }
            (Marginal::Normal { mean, sd }, _) => vec![mean, sd.ln()],
            (Marginal::Beta { alpha, beta }, _) => beta_to_free(alpha, beta).to_vec(),
            (Marginal::Gamma { shape, rate }, _) => vec![shape.ln(), rate.ln()],
            (Marginal::Binomial { prob, .. }, _) => vec![logit(prob)],
        }
    }

    /// Inverse of [`Marginal::to_free`].
    pub fn from_free(reference: &Marginal, v: &[f64]) -> Marginal {
        match *reference {
            Marginal::Normal { mean: rm, sd: rs } => Marginal::Normal {
                mean: rm + rs * v[0],
                sd: (rs * v[1].exp()).max(SD_FLOOR),
            },
            Marginal::Beta { .. } => {
                let (alpha, beta) = beta_from_free(v[0], v[1]);
                Marginal::Beta { alpha, beta }
            }
            Marginal::Gamma { .. } => Marginal::Gamma {
                shape: v[0].exp().clamp(1e-300, 1e300),
                rate: v[1].exp().clamp(1e-300, 1e300),
            },
            Marginal::Binomial { trials, .. } => Marginal::Binomial {
                trials,
                prob: logistic(v[0]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP),
            },
        }
    }

    /// Initial Nelder–Mead step sizes in free coordinates.
    pub fn free_steps(&self) -> Vec<f64> {
        match self {
            Marginal::Normal { .. } => vec![0.1, 0.1],
            Marginal::Binomial { .. } => vec![0.2],
            _ => vec![0.2, 0.2],
        }
    }
}

fn count_index(x: f64, trials: u32) -> Option<u32> {
    if x >= 0.0 && x <= trials as f64 && x.fract() == 0.0 {
        Some(x as u32)
    } else {
        None
    }
}

pub(crate) fn binomial_ln_pmf(trials: u32, prob: f64, k: u32) -> f64 {
    let (m, kf) = (trials as f64, k as f64);
    ln_gamma(m + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(m - kf + 1.0)
        + kf * prob.ln()
        + (m - kf) * (-prob).ln_1p()
}

fn binomial_cdf(trials: u32, prob: f64, k: u32) -> f64 {
    let s: f64 = (0..=k).map(|j| binomial_ln_pmf(trials, prob, j).exp()).sum();
    s.min(1.0)
}

// Beta coordinates: mean m in (m*, 1 - m*) and precision s = alpha + beta in
// (0, s_max(m)], where s_max(m) = m(1-m)/floor - 1 enforces the variance floor.
fn beta_mean_bound() -> f64 {
    0.5 * (1.0 - (1.0 - 4.0 * BETA_VARIANCE_FLOOR).sqrt())
}

fn beta_precision_max(m: f64) -> f64 {
    m * (1.0 - m) / BETA_VARIANCE_FLOOR - 1.0
}

fn beta_to_free(alpha: f64, beta: f64) -> [f64; 2] {
    let lo = beta_mean_bound();
    let s = alpha + beta;
    let m = (alpha / s).clamp(lo * (1.0 + 1e-9), 1.0 - lo * (1.0 + 1e-9));
    let a = logit(((m - lo) / (1.0 - 2.0 * lo)).clamp(1e-12, 1.0 - 1e-12));
    let ratio = (s / beta_precision_max(m)).clamp(1e-12, 1.0 - 1e-12);
    [a, logit(ratio)]
}

fn beta_from_free(a: f64, b: f64) -> (f64, f64) {
    let lo = beta_mean_bound();
    let m = lo + (1.0 - 2.0 * lo) * logistic(a);
    let s = (beta_precision_max(m) * logistic(b)).max(1e-12);
    ((m * s).max(1e-300), ((1.0 - m) * s).max(1e-300))
}

/// Result of [`fit_marginal_weighted`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalFit {
    pub model: Marginal,
    /// Set when the data were degenerate and a floor was applied.
    pub degenerate: bool,
}

struct WeightedMoments {
    total: f64,
    mean: f64,
    var: f64,
}

fn weighted_moments(data: &[f64], weights: &[f64]) -> WeightedMoments {
    let total: f64 = weights.iter().sum();
    let mean = data.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / total;
    let var = data
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - mean) * (x - mean))
        .sum::<f64>()
        / total;
    WeightedMoments { total, mean, var }
}

/// Weighted maximum-likelihood fit: maximizes `sum_i w_i ln g(x_i)`.
pub fn fit_marginal_weighted(
    family: MarginalFamily,
    data: &[f64],
    weights: &[f64],
) -> Result<MarginalFit> {
    if data.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("weights must be finite and non-negative".into()));
    }
    let mom = weighted_moments(data, weights);
    if !(mom.total > 0.0) {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    let check_support = |ok: &dyn Fn(f64) -> bool| -> Result<()> {
        match data.iter().zip(weights).find(|(x, w)| **w > 0.0 && !ok(**x)) {
            Some((x, _)) => Err(Error::Domain(format!("{x} outside the {family:?} support"))),
            None => Ok(()),
        }
    };
    match family {
        MarginalFamily::Normal => {
            let sd = mom.var.max(0.0).sqrt();
            Ok(MarginalFit {
                model: Marginal::Normal {
                    mean: mom.mean,
                    sd: sd.max(SD_FLOOR),
                },
                degenerate: sd < SD_FLOOR,
            })
        }
        MarginalFamily::Binomial { trials } => {
            check_support(&|x| count_index(x, trials).is_some())?;
            let prob = (mom.mean / trials as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            Ok(MarginalFit {
                model: Marginal::Binomial { trials, prob },
                degenerate: false,
            })
        }
        MarginalFamily::Gamma => {
            check_support(&|x| x > 0.0 && x.is_finite())?;
            Ok(fit_gamma(data, weights, &mom))
        }
        MarginalFamily::Beta => {
            check_support(&|x| x > 0.0 && x < 1.0)?;
            Ok(fit_beta(data, weights, &mom))
        }
    }
}

// Profile likelihood in the shape: for fixed shape the rate MLE is shape/mean.
fn fit_gamma(data: &[f64], weights: &[f64], mom: &WeightedMoments) -> MarginalFit {
    let mean_log = data
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| w * x.ln())
        .sum::<f64>()
        / mom.total;
    let spread = mom.mean.ln() - mean_log;
    if !(spread > 1e-14) || mom.var <= (SD_FLOOR * SD_FLOOR) {
        let shape = (mom.mean * mom.mean / (SD_FLOOR * SD_FLOOR)).min(1e12);
        return MarginalFit {
            model: Marginal::Gamma {
                shape,
                rate: shape / mom.mean,
            },
            degenerate: true,
        };
    }
    let profile = |log_shape: f64| {
        let k = log_shape.exp();
        -(k * (k / mom.mean).ln() - ln_gamma(k) + (k - 1.0) * mean_log - k)
    };
    let start = (mom.mean * mom.mean / mom.var).ln();
    let (lk, _) = golden_section(profile, start - 8.0, start + 8.0, 1e-12, 400);
    let shape = lk.exp();
    MarginalFit {
        model: Marginal::Gamma {
            shape,
            rate: shape / mom.mean,
        },
        degenerate: false,
    }
}

fn fit_beta(data: &[f64], weights: &[f64], mom: &WeightedMoments) -> MarginalFit {
    let lo = beta_mean_bound();
    let m = mom.mean.clamp(lo * 1.01, 1.0 - lo * 1.01);
    let smax = beta_precision_max(m);
    let s0 = if mom.var > 0.0 {
        (m * (1.0 - m) / mom.var - 1.0).clamp(1e-3, smax * (1.0 - 1e-6))
    } else {
        smax * (1.0 - 1e-6)
    };
    let x0 = beta_to_free(m * s0, (1.0 - m) * s0);
    let pts: Vec<(f64, f64, f64)> = data
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| (*w, x.ln(), (-x).ln_1p()))
        .collect();
    let objective = |v: &[f64]| {
        let (a, b) = beta_from_free(v[0], v[1]);
        let lb = ln_beta(a, b);
        -pts.iter()
            .map(|(w, lx, l1x)| w * ((a - 1.0) * lx + (b - 1.0) * l1x - lb))
            .sum::<f64>()
    };
    let res = nelder_mead(
        objective,
        &x0,
        &[0.3, 0.3],
        NelderMeadOptions {
            max_evals: 4000,
            ftol: 1e-12,
            xtol: 1e-9,
        },
    );
    let (alpha, beta) = beta_from_free(res.x[0], res.x[1]);
    let model = Marginal::Beta { alpha, beta };
    let degenerate = model.variance() <= BETA_VARIANCE_FLOOR * (1.0 + 1e-6);
    MarginalFit { model, degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma as GammaDist};

    #[test]
    fn log_densities() {
        let n = Marginal::normal(0.0, 1.0).unwrap();
        assert!((n.ln_pdf(0.0) + 0.918_938_5).abs() < 1e-7);
        assert!(Marginal::beta(1.0, 1.0).unwrap().ln_pdf(0.3).abs() < 1e-14);
        assert!((Marginal::gamma(2.0, 1.0).unwrap().ln_pdf(1.0) + 1.0).abs() < 1e-14);
        let b = Marginal::binomial(8, 0.5).unwrap();
        assert_eq!(b.ln_pdf(2.5), f64::NEG_INFINITY);
        assert_eq!(b.ln_pdf(-1.0), f64::NEG_INFINITY);
        assert_eq!(Marginal::beta(2.0, 2.0).unwrap().ln_pdf(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn cdf_values() {
        assert!((Marginal::normal(0.0, 1.0).unwrap().cdf(0.0) - 0.5).abs() < 1e-15);
        let b = Marginal::binomial(8, 0.5).unwrap();
        assert_eq!(b.cdf(8.0), 1.0);
        assert_eq!(b.cdf(-1.0), 0.0);
        assert!((b.cdf(3.0) - 93.0 / 256.0).abs() < 1e-14);
        assert!((b.cdf(3.7) - b.cdf(3.0)).abs() < 1e-15);
    }

    #[test]
    fn quantiles() {
        let n = Marginal::normal(0.0, 1.0).unwrap();
        assert_eq!(n.quantile(0.5).unwrap(), 0.0);
        // bisection oracle on the CDF
        let (mut lo, mut hi) = (0.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if n.cdf(mid) < 0.975 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((n.quantile(0.975).unwrap() - lo).abs() < 1e-9);
        assert!((lo - 1.959964).abs() < 1e-6);
        let g = Marginal::gamma(1.0, 2.0).unwrap();
        assert!((g.quantile(0.5).unwrap() - 2f64.ln() / 2.0).abs() < 1e-12);
        assert!(n.quantile(0.0).is_err());
        assert!(n.quantile(1.0).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        let models = [
            Marginal::normal(1.5, 0.3).unwrap(),
            Marginal::beta(0.7, 3.2).unwrap(),
            Marginal::beta(25.0, 4.0).unwrap(),
            Marginal::gamma(0.6, 2.0).unwrap(),
            Marginal::gamma(12.0, 0.5).unwrap(),
        ];
        for m in models {
            for i in 1..100 {
                let u = i as f64 / 100.0;
                let x = m.quantile(u).unwrap();
                assert!((m.cdf(x) - u).abs() <= 1e-9, "{m:?} u={u}");
            }
        }
    }

    #[test]
    fn binomial_quantile_is_smallest_count() {
        let b = Marginal::binomial(10, 0.3).unwrap();
        for i in 1..50 {
            let u = i as f64 / 50.0;
            let k = b.quantile(u).unwrap();
            assert!(b.cdf(k) >= u);
            assert!(k == 0.0 || b.cdf(k - 1.0) < u);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Marginal::normal(0.0, 0.0).is_err());
        assert!(Marginal::beta(-1.0, 1.0).is_err());
        assert!(Marginal::gamma(1.0, f64::NAN).is_err());
        assert!(Marginal::binomial(5, 1.0).is_err());
        assert!(Marginal::binomial(0, 0.5).is_err());
    }

    #[test]
    fn closed_form_fits() {
        let f = fit_marginal_weighted(MarginalFamily::Normal, &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        match f.model {
            Marginal::Normal { mean, sd } => {
                assert!((mean - 2.0).abs() < 1e-15);
                assert!((sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
            }
            _ => unreachable!(),
        }
        let f = fit_marginal_weighted(MarginalFamily::Binomial { trials: 10 }, &[3.0, 5.0], &[1.0, 1.0])
            .unwrap();
        assert_eq!(f.model, Marginal::Binomial { trials: 10, prob: 0.4 });
    }

    #[test]
    fn degenerate_normal_is_flagged() {
        let f = fit_marginal_weighted(MarginalFamily::Normal, &[2.0; 5], &[1.0; 5]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.model, Marginal::Normal { mean: 2.0, sd: SD_FLOOR });
    }

    #[test]
    fn bad_inputs() {
        assert!(fit_marginal_weighted(MarginalFamily::Normal, &[1.0], &[0.0]).is_err());
        assert!(fit_marginal_weighted(MarginalFamily::Beta, &[1.5], &[1.0]).is_err());
        assert!(fit_marginal_weighted(MarginalFamily::Gamma, &[-1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(fit_marginal_weighted(MarginalFamily::Normal, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gamma_fit_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = GammaDist::new(2.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..500).map(|_| d.sample(&mut rng)).collect();
        let f = fit_marginal_weighted(MarginalFamily::Gamma, &xs, &vec![1.0; 500]).unwrap();
        let Marginal::Gamma { shape, rate } = f.model else { unreachable!() };
        assert!((1.7..=2.3).contains(&shape), "shape={shape}");
        assert!((0.8..=1.2).contains(&rate), "rate={rate}");
    }

    fn weighted_ll(m: &Marginal, xs: &[f64], ws: &[f64]) -> f64 {
        xs.iter().zip(ws).map(|(x, w)| w * m.ln_pdf(*x)).sum()
    }

    // Coarse grid search oracle: the numeric MLE must beat every grid point.
    #[test]
    fn fits_beat_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = rand_distr::Beta::new(2.5, 4.0).unwrap();
        let xs: Vec<f64> = (0..300).map(|_| beta.sample(&mut rng)).collect();
        let ws: Vec<f64> = (0..300).map(|i| 0.2 + (i % 7) as f64 / 7.0).collect();
        let fit = fit_marginal_weighted(MarginalFamily::Beta, &xs, &ws).unwrap().model;
        let best = weighted_ll(&fit, &xs, &ws);
        for i in 1..60 {
            for j in 1..60 {
                let m = Marginal::beta(i as f64 * 0.15, j as f64 * 0.15).unwrap();
                assert!(weighted_ll(&m, &xs, &ws) <= best + 1e-9);
            }
        }
        let g = GammaDist::new(3.0, 0.5).unwrap();
        let ys: Vec<f64> = (0..300).map(|_| g.sample(&mut rng)).collect();
        let fit = fit_marginal_weighted(MarginalFamily::Gamma, &ys, &ws).unwrap().model;
        let best = weighted_ll(&fit, &ys, &ws);
        for i in 1..60 {
            for j in 1..60 {
                let m = Marginal::gamma(i as f64 * 0.1, j as f64 * 0.05).unwrap();
                assert!(weighted_ll(&m, &ys, &ws) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn unit_weights_match_unweighted_grid_maximum() {
        let xs = [0.2, 0.35, 0.4, 0.55, 0.6, 0.61, 0.8];
        let fit = fit_marginal_weighted(MarginalFamily::Beta, &xs, &[1.0; 7]).unwrap().model;
        let scaled = fit_marginal_weighted(MarginalFamily::Beta, &xs, &[3.0; 7]).unwrap().model;
        let (a, b) = (fit.params(), scaled.params());
        assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4);
    }

    #[test]
    fn beta_variance_floor_is_active() {
        let xs: Vec<f64> = (0..50).map(|i| 0.5 + 1e-4 * (i as f64 - 25.0) / 25.0).collect();
        let f = fit_marginal_weighted(MarginalFamily::Beta, &xs, &vec![1.0; 50]).unwrap();
        assert!(f.model.variance() >= BETA_VARIANCE_FLOOR * (1.0 - 1e-9));
        assert!(f.degenerate);
    }

    #[test]
    fn free_coordinates_round_trip() {
        let ms = [
            Marginal::normal(3.0, 0.5).unwrap(),
            Marginal::beta(2.0, 5.0).unwrap(),
            Marginal::gamma(2.0, 0.3).unwrap(),
            Marginal::binomial(9, 0.2).unwrap(),
        ];
        for m in ms {
            let r = Marginal::from_free(&m, &m.to_free(&m));
            for (a, b) in m.params().iter().zip(r.params()) {
                assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{m:?} vs {r:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normal_fit_is_affine_equivariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 3..40),
            a in -10.0f64..10.0,
            b in 0.1f64..10.0,
        ) {
            let ws = vec![1.0; xs.len()];
            let f = fit_marginal_weighted(MarginalFamily::Normal, &xs, &ws).unwrap();
            proptest::prop_assume!(!f.degenerate);
            let zs: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
            let g = fit_marginal_weighted(MarginalFamily::Normal, &zs, &ws).unwrap();
            let (p, q) = (f.model.params(), g.model.params());
            proptest::prop_assert!((q[0] - (a + b * p[0])).abs() < 1e-9 * (1.0 + q[0].abs()));
            proptest::prop_assert!((q[1] - b * p[1]).abs() < 1e-9 * (1.0 + q[1]));
        }

        #[test]
        fn cdf_is_monotone(x in -5.0f64..5.0, dx in 0.0f64..2.0) {
            for m in [Marginal::normal(0.3, 1.2).unwrap(), Marginal::gamma(2.0, 1.0).unwrap(),
                      Marginal::beta(2.0, 3.0).unwrap(), Marginal::binomial(6, 0.4).unwrap()] {
                proptest::prop_assert!(m.cdf(x) <= m.cdf(x + dx));
            }
        }
    }
}
