//! Copula families: distribution functions, log-densities, rotations,
//! random sampling and Kendall's tau.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gausquad::{self, CorrStructure, CorrelationMatrix};
use crate::special::{logistic, logit, norm_cdf, norm_ln_pdf, norm_quantile};

/// Arguments are clamped to `[U_CLAMP, 1 - U_CLAMP]` before log-densities.
pub const U_CLAMP: f64 = 1e-10;
/// Frank parameters closer to zero than this are snapped to the band edge.
pub const FRANK_ZERO_BAND: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaFamily {
    Independence,
    Gumbel,
    Clayton,
    /// One-parameter Frank (any dimension 2..=4).
    #[serde(alias = "frank1")]
    Frank,
    /// Trivariate nested Frank with `0 < psi1 < psi2`; the pair (1,2) uses `psi2`.
    #[serde(alias = "frank2")]
    NestedFrank,
    Gaussian,
}

impl CopulaFamily {
    pub fn is_archimedean(self) -> bool {
        matches!(
            self,
            CopulaFamily::Gumbel | CopulaFamily::Clayton | CopulaFamily::Frank | CopulaFamily::NestedFrank
        )
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CopulaFamily::Independence => "I",
            CopulaFamily::Gumbel => "G",
            CopulaFamily::Clayton => "C",
            CopulaFamily::Frank => "F",
            CopulaFamily::NestedFrank => "F2",
            CopulaFamily::Gaussian => "N",
        }
    }
}

/// Reflection of a bivariate copula's arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Rotation {
    #[default]
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub fn from_degrees(d: u32) -> Result<Self> {
        match d % 360 {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            _ => Err(invalid("rotation", format!("must be 0, 90, 180 or 270, got {d}"))),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    /// Whether Kendall's tau changes sign under this rotation.
    fn flips_concordance(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

/// Reflects `u` according to `rotation`; the map is an involution.
#[inline]
pub fn rotate_u(rotation: Rotation, u: [f64; 2]) -> [f64; 2] {
    match rotation {
        Rotation::R0 => u,
        Rotation::R90 => [1.0 - u[0], u[1]],
        Rotation::R180 => [1.0 - u[0], 1.0 - u[1]],
        Rotation::R270 => [u[0], 1.0 - u[1]],
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Independence { dim: usize },
    Gumbel { theta: f64 },
    Clayton { theta: f64 },
    Frank { dim: usize, theta: f64 },
    NestedFrank { psi1: f64, psi2: f64 },
    Gaussian(CorrelationMatrix),
}

/// A copula with fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    kind: Kind,
    rotation: Rotation,
}

impl CopulaModel {
    pub fn independence(dim: usize) -> Result<Self> {
        if dim < 1 {
            return Err(invalid("dim", "must be >= 1"));
        }
        Ok(Self::from_kind(Kind::Independence { dim }))
    }

    pub fn gumbel(theta: f64) -> Result<Self> {
        if !(theta >= 1.0 && theta.is_finite()) {
            return Err(invalid("psi", format!("Gumbel parameter must be >= 1, got {theta}")));
        }
        Ok(Self::from_kind(Kind::Gumbel { theta }))
    }

    pub fn clayton(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(invalid("psi", format!("Clayton parameter must be > 0, got {theta}")));
        }
        Ok(Self::from_kind(Kind::Clayton { theta }))
    }

    /// Frank copula; negative parameters are only valid for `dim == 2`.
    pub fn frank(dim: usize, theta: f64) -> Result<Self> {
        if !(2..=4).contains(&dim) {
            return Err(Error::Unsupported(format!("Frank copula of dimension {dim}")));
        }
        if !theta.is_finite() || theta == 0.0 {
            return Err(invalid("psi", format!("Frank parameter must be finite and nonzero, got {theta}")));
        }
        if dim > 2 && theta < 0.0 {
            return Err(invalid(
                "psi",
                format!("Frank parameter must be positive in dimension {dim}, got {theta}"),
            ));
        }
        Ok(Self::from_kind(Kind::Frank { dim, theta }))
    }

    pub fn nested_frank(psi1: f64, psi2: f64) -> Result<Self> {
        if !(psi1 > 0.0 && psi2 > psi1 && psi2.is_finite()) {
            return Err(invalid(
                "psi",
                format!("nested Frank needs 0 < psi1 < psi2, got ({psi1}, {psi2})"),
            ));
        }
        Ok(Self::from_kind(Kind::NestedFrank { psi1, psi2 }))
    }

    pub fn gaussian(r: CorrelationMatrix) -> Self {
        Self::from_kind(Kind::Gaussian(r))
    }

    fn from_kind(kind: Kind) -> Self {
        Self {
            kind,
            rotation: Rotation::R0,
        }
    }

    /// Builds a copula of `family` from its natural parameter vector.
    pub fn from_params(
        family: CopulaFamily,
        dim: usize,
        structure: CorrStructure,
        params: &[f64],
    ) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() != k {
                Err(Error::DimensionMismatch {
                    expected: k,
                    got: params.len(),
                })
            } else {
                Ok(())
            }
        };
        let bivariate = |fam: &str| -> Result<()> {
            if dim != 2 {
                Err(Error::Unsupported(format!("{fam} copula is bivariate, got dim {dim}")))
            } else {
                Ok(())
            }
        };
        match family {
            CopulaFamily::Independence => {
                need(0)?;
                Self::independence(dim)
            }
            CopulaFamily::Gumbel => {
                bivariate("Gumbel")?;
                need(1)?;
                Self::gumbel(params[0])
            }
            CopulaFamily::Clayton => {
                bivariate("Clayton")?;
                need(1)?;
                Self::clayton(params[0])
            }
            CopulaFamily::Frank => {
                need(1)?;
                Self::frank(dim, params[0])
            }
            CopulaFamily::NestedFrank => {
                if dim != 3 {
                    return Err(Error::Unsupported(format!("nested Frank copula is trivariate, got dim {dim}")));
                }
                need(2)?;
                Self::nested_frank(params[0], params[1])
            }
            CopulaFamily::Gaussian => {
                let r = match structure {
                    CorrStructure::Exchangeable => {
                        need(1)?;
                        CorrelationMatrix::exchangeable(dim, params[0])?
                    }
                    CorrStructure::Unstructured => CorrelationMatrix::unstructured(dim, params)?,
                };
                Ok(Self::gaussian(r))
            }
        }
    }

    /// Sets a discrete rotation; only bivariate Archimedean copulas rotate.
    pub fn with_rotation(mut self, rotation: Rotation) -> Result<Self> {
        if rotation != Rotation::R0 && !self.rotatable() {
            return Err(invalid(
                "rotation",
                format!("{:?} copula of dimension {} cannot be rotated", self.family(), self.dim()),
            ));
        }
        self.rotation = rotation;
        Ok(self)
    }

    fn rotatable(&self) -> bool {
        matches!(
            self.kind,
            Kind::Gumbel { .. } | Kind::Clayton { .. } | Kind::Frank { dim: 2, .. }
        )
    }

    pub fn family(&self) -> CopulaFamily {
        match self.kind {
            Kind::Independence { .. } => CopulaFamily::Independence,
            Kind::Gumbel { .. } => CopulaFamily::Gumbel,
            Kind::Clayton { .. } => CopulaFamily::Clayton,
            Kind::Frank { .. } => CopulaFamily::Frank,
            Kind::NestedFrank { .. } => CopulaFamily::NestedFrank,
            Kind::Gaussian(_) => CopulaFamily::Gaussian,
        }
    }

    pub fn rotation(&self) -> Rotation {
        self.rotation
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Independence { dim } | Kind::Frank { dim, .. } => *dim,
            Kind::Gumbel { .. } | Kind::Clayton { .. } => 2,
            Kind::NestedFrank { .. } => 3,
            Kind::Gaussian(r) => r.dim(),
        }
    }

    /// Correlation structure for Gaussian copulas.
    pub fn structure(&self) -> Option<CorrStructure> {
        match &self.kind {
            Kind::Gaussian(r) => Some(r.structure()),
            _ => None,
        }
    }

    pub fn correlation(&self) -> Option<&CorrelationMatrix> {
        match &self.kind {
            Kind::Gaussian(r) => Some(r),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Independence { .. } => Vec::new(),
            Kind::Gumbel { theta } | Kind::Clayton { theta } | Kind::Frank { theta, .. } => vec![*theta],
            Kind::NestedFrank { psi1, psi2 } => vec![*psi1, *psi2],
            Kind::Gaussian(r) => r.params(),
        }
    }

    pub fn n_params(&self) -> usize {
        match &self.kind {
            Kind::Independence { .. } => 0,
            Kind::NestedFrank { .. } => 2,
            Kind::Gaussian(r) => r.n_params(),
            _ => 1,
        }
    }

    /// Same family, structure and rotation with new natural parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let s = self.structure().unwrap_or(CorrStructure::Exchangeable);
        Self::from_params(self.family(), self.dim(), s, params)?.with_rotation(self.rotation)
    }

    // ---- unconstrained coordinates -------------------------------------

    pub fn to_free(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Independence { .. } => Vec::new(),
            Kind::Gumbel { theta } => vec![(theta - 1.0).max(1e-12).ln()],
            Kind::Clayton { theta } => vec![theta.ln()],
            Kind::Frank { theta, .. } => vec![*theta],
            Kind::NestedFrank { psi1, psi2 } => vec![psi1.ln(), (psi2 - psi1).ln()],
            Kind::Gaussian(r) => match r.structure() {
                CorrStructure::Exchangeable => {
                    let lo = exch_lower(r.dim());
                    let rho = if r.dim() > 1 { r.get(0, 1) } else { 0.0 };
                    vec![logit(((rho - lo) / (1.0 - lo)).clamp(1e-15, 1.0 - 1e-15))]
                }
                CorrStructure::Unstructured => chol_to_angles(r),
            },
        }
    }

    pub fn from_free(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("psi", "non-finite free coordinate"));
        }
        let kind = match &self.kind {
            Kind::Independence { dim } => Kind::Independence { dim: *dim },
            Kind::Gumbel { .. } => {
                return Ok(Self::gumbel(1.0 + v[0].exp())?.with_rotation(self.rotation)?);
            }
            Kind::Clayton { .. } => {
                return Ok(Self::clayton(v[0].exp().max(1e-300))?.with_rotation(self.rotation)?);
            }
            Kind::Frank { dim, .. } => {
                let mut t = v[0];
                if t.abs() < FRANK_ZERO_BAND {
                    t = if t < 0.0 && *dim == 2 { -FRANK_ZERO_BAND } else { FRANK_ZERO_BAND };
                }
                return Self::frank(*dim, t)?.with_rotation(self.rotation);
            }
            Kind::NestedFrank { .. } => {
                let p1 = v[0].exp();
                return Self::nested_frank(p1, p1 + v[1].exp().max(1e-12 * p1));
            }
            Kind::Gaussian(r) => match r.structure() {
                CorrStructure::Exchangeable => {
                    let lo = exch_lower(r.dim());
                    let rho = lo + (1.0 - lo) * logistic(v[0]);
                    let rho = rho.clamp(lo + 1e-12, 1.0 - 1e-12);
                    Kind::Gaussian(CorrelationMatrix::exchangeable(r.dim(), rho)?)
                }
                CorrStructure::Unstructured => Kind::Gaussian(angles_to_corr(r.dim(), v)?),
            },
        };
        Ok(Self {
            kind,
            rotation: self.rotation,
        })
    }

    /// Search interval per free coordinate for bounded line searches.
    pub fn free_bounds(&self) -> Vec<(f64, f64)> {
        match &self.kind {
            Kind::Independence { .. } => Vec::new(),
            Kind::Gumbel { .. } => vec![(-9.0, 49f64.ln())],
            Kind::Clayton { .. } => vec![(-7.0, 60f64.ln())],
            Kind::Frank { dim, .. } => {
                if *dim == 2 {
                    vec![(-40.0, 40.0)]
                } else {
                    vec![(FRANK_ZERO_BAND, 40.0)]
                }
            }
            Kind::NestedFrank { .. } => vec![(-7.0, 40f64.ln()), (-9.0, 40f64.ln())],
            Kind::Gaussian(r) => vec![(-12.0, 12.0); r.n_params()],
        }
    }

    // ---- distribution function -----------------------------------------

    /// Copula distribution function; `u` must lie in `[0,1]^p`.
    pub fn cdf(&self, u: &[f64]) -> Result<f64> {
        self.check_dim(u)?;
        if u.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!("copula argument {u:?} outside [0,1]^p")));
        }
        Ok(self.cdf_unchecked(u))
    }

    pub(crate) fn cdf_unchecked(&self, u: &[f64]) -> f64 {
        if self.rotation != Rotation::R0 {
            let (a, b) = (u[0], u[1]);
            let v = match self.rotation {
                Rotation::R90 => b - self.base_cdf(&[1.0 - a, b]),
                Rotation::R180 => a + b - 1.0 + self.base_cdf(&[1.0 - a, 1.0 - b]),
                Rotation::R270 => a - self.base_cdf(&[a, 1.0 - b]),
                Rotation::R0 => unreachable!(),
            };
            return v.clamp(0.0, 1.0);
        }
        self.base_cdf(u).clamp(0.0, 1.0)
    }

    fn base_cdf(&self, u: &[f64]) -> f64 {
        if u.iter().any(|&x| x <= 0.0) {
            return 0.0;
        }
        match &self.kind {
            Kind::Independence { .. } => u.iter().product(),
            Kind::Gumbel { theta } => gumbel_cdf(*theta, u[0], u[1]),
            Kind::Clayton { theta } => clayton_cdf(*theta, u[0], u[1]),
            Kind::Frank { theta, .. } => frank_cdf(*theta, u),
            Kind::NestedFrank { psi1, psi2 } => {
                let v = frank_cdf(*psi2, &u[..2]);
                frank_cdf(*psi1, &[v, u[2]])
            }
            Kind::Gaussian(r) => {
                let z: Vec<f64> = u.iter().map(|&x| norm_quantile(x)).collect();
                gausquad::mvn_cdf(&z, r, 1e-12).unwrap_or(f64::NAN)
            }
        }
    }

    /// Probability of the box `(lo, hi]` in copula scale.
    pub fn rectangle(&self, lo: &[f64], hi: &[f64], tol: f64) -> Result<f64> {
        self.check_dim(lo)?;
        self.check_dim(hi)?;
        if let Kind::Gaussian(r) = &self.kind {
            let zl: Vec<f64> = lo.iter().map(|&x| norm_quantile(x)).collect();
            let zh: Vec<f64> = hi.iter().map(|&x| norm_quantile(x)).collect();
            return gausquad::mvn_rectangle(&zl, &zh, r, tol);
        }
        let p = lo.len();
        let mut vertex = vec![0.0; p];
        let mut total = 0.0;
        for mask in 0u32..(1 << p) {
            let mut sign = 1.0;
            for t in 0..p {
                if mask >> t & 1 == 1 {
                    vertex[t] = lo[t];
                    sign = -sign;
                } else {
                    vertex[t] = hi[t];
                }
            }
            if vertex.iter().any(|&x| x <= 0.0) {
                continue;
            }
            total += sign * self.cdf_unchecked(&vertex);
        }
        Ok(total)
    }

    // ---- density -------------------------------------------------------

    /// Log-density at a strictly interior point.
    pub fn logdensity(&self, u: &[f64]) -> Result<f64> {
        self.check_dim(u)?;
        if u.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(Error::Domain(format!("copula density needs u in (0,1)^p, got {u:?}")));
        }
        Ok(self.ln_density(u))
    }

    /// Log-density after clamping each coordinate into `[1e-10, 1-1e-10]`.
    pub fn ln_density(&self, u: &[f64]) -> f64 {
        let mut buf = [0.0f64; 8];
        let p = u.len();
        let mut heap;
        let w: &mut [f64] = if p <= 8 {
            &mut buf[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        for (dst, &x) in w.iter_mut().zip(u) {
            *dst = x.clamp(U_CLAMP, 1.0 - U_CLAMP);
        }
        if self.rotation != Rotation::R0 {
            let r = rotate_u(self.rotation, [w[0], w[1]]);
            w[0] = r[0];
            w[1] = r[1];
        }
        match &self.kind {
            Kind::Independence { .. } => 0.0,
            Kind::Gumbel { theta } => gumbel_ln_density(*theta, w[0], w[1]),
            Kind::Clayton { theta } => clayton_ln_density(*theta, w[0], w[1]),
            Kind::Frank { theta, .. } => frank_ln_density(*theta, w),
            Kind::NestedFrank { psi1, psi2 } => nested_frank_ln_density(*psi1, *psi2, w),
            Kind::Gaussian(r) => {
                let mut zb = [0.0f64; 8];
                let mut zh;
                let z: &mut [f64] = if p <= 8 {
                    &mut zb[..p]
                } else {
                    zh = vec![0.0; p];
                    &mut zh
                };
                for (zi, &x) in z.iter_mut().zip(w.iter()) {
                    *zi = norm_quantile(x);
                }
                gaussian_ln_density_z(r, z)
            }
        }
    }

    fn check_dim(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    // ---- dependence summaries ------------------------------------------

    /// Theoretical Kendall's tau for bivariate copulas.
    pub fn kendall_tau(&self) -> Option<f64> {
        if self.dim() != 2 {
            return None;
        }
        let tau = match &self.kind {
            Kind::Independence { .. } => 0.0,
            Kind::Gumbel { theta } => 1.0 - 1.0 / theta,
            Kind::Clayton { theta } => theta / (theta + 2.0),
            Kind::Frank { theta, .. } => frank_tau(*theta),
            Kind::Gaussian(r) => 2.0 / std::f64::consts::PI * r.get(0, 1).asin(),
            Kind::NestedFrank { .. } => return None,
        };
        Some(if self.rotation.flips_concordance() { -tau } else { tau })
    }

    /// Copy with parameters matched to Kendall's `tau` (pairwise average for
    /// multivariate copulas), clamped into the family's domain.
    pub fn matched_to_tau(&self, tau: f64) -> Self {
        let t = if self.rotation.flips_concordance() { -tau } else { tau };
        let t = t.clamp(-0.95, 0.95);
        let out = match &self.kind {
            Kind::Independence { .. } => Ok(self.clone()),
            Kind::Gumbel { .. } => Self::gumbel((1.0 / (1.0 - t.max(0.0))).min(40.0)),
            Kind::Clayton { .. } => Self::clayton((2.0 * t / (1.0 - t)).clamp(1e-3, 40.0)),
            Kind::Frank { dim, .. } => {
                let t = if *dim == 2 { t } else { t.max(1e-4) };
                Self::frank(*dim, frank_tau_inverse(t))
            }
            Kind::NestedFrank { .. } => {
                let p1 = frank_tau_inverse(t.max(1e-4)).max(1e-3);
                Self::nested_frank(p1, p1 + 0.05)
            }
            Kind::Gaussian(r) => {
                let rho = (std::f64::consts::FRAC_PI_2 * t).sin();
                match r.structure() {
                    CorrStructure::Exchangeable => {
                        let lo = exch_lower(r.dim());
                        CorrelationMatrix::exchangeable(r.dim(), rho.clamp(lo + 1e-3, 0.99))
                            .map(Self::gaussian)
                    }
                    CorrStructure::Unstructured => {
                        let m = r.dim() * (r.dim() - 1) / 2;
                        let rho = rho.clamp(-0.45, 0.99);
                        CorrelationMatrix::unstructured(r.dim(), &vec![rho; m]).map(Self::gaussian)
                    }
                }
            }
        };
        match out {
            Ok(c) => c.with_rotation(self.rotation).unwrap_or_else(|_| self.clone()),
            Err(_) => self.clone(),
        }
    }

    // ---- sampling ------------------------------------------------------

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u = self.sample_base(rng);
        if self.rotation != Rotation::R0 {
            let r = rotate_u(self.rotation, [u[0], u[1]]);
            u[0] = r[0];
            u[1] = r[1];
        }
        for x in u.iter_mut() {
            *x = x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        }
        u
    }

    fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.dim();
        let exp = |rng: &mut R| -> f64 { Exp1.sample(rng) };
        match &self.kind {
            Kind::Independence { dim } => (0..*dim).map(|_| open_unit(rng)).collect(),
            Kind::Clayton { theta } => {
                let v: f64 = Gamma::new(1.0 / theta, 1.0).unwrap().sample(rng);
                (0..p)
                    .map(|_| {
                        let e = exp(rng);
                        (-(e / v).ln_1p() / theta).exp()
                    })
                    .collect()
            }
            Kind::Gumbel { theta } => {
                let alpha = 1.0 / theta;
                let s = positive_stable(alpha, rng);
                (0..p).map(|_| (-(exp(rng) / s).powf(alpha)).exp()).collect()
            }
            Kind::Frank { dim, theta } => {
                if *theta > 0.0 {
                    let a = -(-theta).exp_m1();
                    let v = log_series(a, rng) as f64;
                    (0..*dim)
                        .map(|_| {
                            let s = exp(rng) / v;
                            -(-a * (-s).exp()).ln_1p() / theta
                        })
                        .collect()
                } else {
                    let u1 = open_unit(rng);
                    let w = open_unit(rng);
                    vec![u1, frank_conditional_inverse(*theta, u1, w)]
                }
            }
            Kind::NestedFrank { psi1, psi2 } => {
                let u1 = open_unit(rng);
                let u2 = frank_conditional_inverse(*psi2, u1, open_unit(rng));
                let w = open_unit(rng);
                let u3 = nested_frank_third(*psi1, *psi2, u1, u2, w);
                vec![u1, u2, u3]
            }
            Kind::Gaussian(r) => {
                let l = r.cholesky_factor();
                let eps: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
                (0..p)
                    .map(|i| {
                        let z: f64 = (0..=i).map(|k| l[i * p + k] * eps[k]).sum();
                        norm_cdf(z)
                    })
                    .collect()
            }
        }
    }
}

/// Draws `n` points from `c` with a ChaCha8 generator seeded by `seed`.
pub fn sample_copula(c: &CopulaModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    c.sample(n, &mut rng)
}

/// Sample Kendall's tau of two columns (tau-a, O(n^2)).
pub fn empirical_kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (x[i] - x[j]) * (y[i] - y[j]);
            if a > 0.0 {
                s += 1;
            } else if a < 0.0 {
                s -= 1;
            }
        }
    }
    s as f64 / (n as f64 * (n as f64 - 1.0) / 2.0)
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn exch_lower(dim: usize) -> f64 {
    if dim > 1 {
        -1.0 / (dim as f64 - 1.0)
    } else {
        -1.0
    }
}

// Hyperspherical parameterization of a correlation matrix: row i of the
// Cholesky factor is built from angles in (0, pi), each the image of a free
// coordinate under pi * logistic.
fn angles_to_corr(dim: usize, v: &[f64]) -> Result<CorrelationMatrix> {
    let mut l = vec![0.0; dim * dim];
    l[0] = 1.0;
    let mut k = 0;
    for i in 1..dim {
        let mut prod_sin = 1.0;
        for j in 0..i {
            let ang = std::f64::consts::PI * logistic(v[k]);
            k += 1;
            l[i * dim + j] = prod_sin * ang.cos();
            prod_sin *= ang.sin();
        }
        l[i * dim + i] = prod_sin;
    }
    let mut upper = Vec::with_capacity(dim * (dim - 1) / 2);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let r: f64 = (0..=i).map(|t| l[i * dim + t] * l[j * dim + t]).sum();
            upper.push(r.clamp(-1.0 + 1e-12, 1.0 - 1e-12));
        }
    }
    CorrelationMatrix::unstructured(dim, &upper)
}

fn chol_to_angles(r: &CorrelationMatrix) -> Vec<f64> {
    let dim = r.dim();
    let l = r.cholesky_factor();
    let mut out = vec![0.0; dim * (dim - 1) / 2];
    // angles are stored row by row in the order consumed by angles_to_corr
    let mut k = 0;
    for i in 1..dim {
        let mut prod_sin = 1.0;
        for j in 0..i {
            let c = if prod_sin > 1e-300 {
                (l[i * dim + j] / prod_sin).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let ang = c.acos().clamp(1e-12, std::f64::consts::PI - 1e-12);
            out[k] = logit(ang / std::f64::consts::PI);
            k += 1;
            prod_sin *= ang.sin();
        }
    }
    out
}

// ---- Gumbel ------------------------------------------------------------

fn gumbel_ln_a(theta: f64, lx: f64, ly: f64) -> f64 {
    crate::special::log_add_exp(theta * lx, theta * ly) / theta
}

fn gumbel_cdf(theta: f64, u1: f64, u2: f64) -> f64 {
    if u1 >= 1.0 {
        return u2;
    }
    if u2 >= 1.0 {
        return u1;
    }
    let lx = (-u1.ln()).ln();
    let ly = (-u2.ln()).ln();
    (-gumbel_ln_a(theta, lx, ly).exp()).exp()
}

fn gumbel_ln_density(theta: f64, u1: f64, u2: f64) -> f64 {
    let x = -u1.ln();
    let y = -u2.ln();
    let (lx, ly) = (x.ln(), y.ln());
    let ln_a = gumbel_ln_a(theta, lx, ly);
    let a = ln_a.exp();
    -a + (theta - 1.0) * (lx + ly) + x + y + (1.0 - 2.0 * theta) * ln_a + (a + theta - 1.0).ln()
}

// ---- Clayton -----------------------------------------------------------

/// `ln(u1^-theta + u2^-theta - 1)` without overflow.
fn clayton_ln_s(theta: f64, u1: f64, u2: f64) -> f64 {
    let a1 = -theta * u1.ln();
    let a2 = -theta * u2.ln();
    let (hi, lo) = if a1 >= a2 { (a1, a2) } else { (a2, a1) };
    hi + ((lo - hi).exp() - (-hi).exp_m1()).ln()
}

fn clayton_cdf(theta: f64, u1: f64, u2: f64) -> f64 {
    (-clayton_ln_s(theta, u1, u2) / theta).exp()
}

fn clayton_ln_density(theta: f64, u1: f64, u2: f64) -> f64 {
    theta.ln_1p() - (theta + 1.0) * (u1.ln() + u2.ln()) - (2.0 + 1.0 / theta) * clayton_ln_s(theta, u1, u2)
}

// ---- Frank -------------------------------------------------------------

struct FrankTerms {
    a: f64,
    /// `prod(1 - e^{-theta u_i}) / a^{d-1}`
    x: f64,
    /// `1 - x`, accumulated without cancellation for theta > 0.
    one_minus_x: f64,
}

fn frank_terms(theta: f64, u: &[f64]) -> FrankTerms {
    let a = -(-theta).exp_m1();
    // r_i = (1 - e^{-theta u_i}) / a lies in [0, 1]; track prod r and 1 - prod r.
    let mut prod_r = 1.0;
    let mut one_minus_prod = 0.0;
    for &ui in u {
        let r = -(-theta * ui).exp_m1() / a;
        let one_minus_r = (-theta * ui).exp() * -(-theta * (1.0 - ui)).exp_m1() / a;
        one_minus_prod = one_minus_prod + prod_r * one_minus_r;
        prod_r *= r;
    }
    FrankTerms {
        a,
        x: a * prod_r,
        one_minus_x: (-theta).exp() + a * one_minus_prod,
    }
}

fn frank_cdf(theta: f64, u: &[f64]) -> f64 {
    if let Some(j) = single_free(u) {
        return u[j];
    }
    let t = frank_terms(theta, u);
    let ln_one_minus_x = if t.x.abs() < 0.5 {
        (-t.x).ln_1p()
    } else {
        t.one_minus_x.ln()
    };
    -ln_one_minus_x / theta
}

/// Index of the only coordinate below one, if all others equal one.
fn single_free(u: &[f64]) -> Option<usize> {
    let mut idx = None;
    for (i, &x) in u.iter().enumerate() {
        if x < 1.0 {
            if idx.is_some() {
                return None;
            }
            idx = Some(i);
        }
    }
    idx.or(Some(0))
}

fn frank_ln_density(theta: f64, u: &[f64]) -> f64 {
    let d = u.len();
    let t = frank_terms(theta, u);
    let (x, one_minus_x) = (t.x, t.one_minus_x);
    let numer = match d {
        2 => x,
        3 => x * (1.0 + x),
        4 => x * (1.0 + 4.0 * x + x * x),
        _ => f64::NAN,
    };
    let ln_li = numer.abs().ln() - d as f64 * one_minus_x.abs().ln();
    let at = theta.abs();
    let mut out = ln_li - at.ln();
    for &ui in u {
        out += at.ln() - (theta * ui).exp_m1().abs().ln();
    }
    out
}

/// Second coordinate of a bivariate Frank draw given the first and a uniform.
fn frank_conditional_inverse(theta: f64, u1: f64, w: f64) -> f64 {
    let e1 = (-theta * u1).exp();
    let num = w * (-theta).exp_m1();
    let den = w + (1.0 - w) * e1;
    (-(num / den).ln_1p() / theta).clamp(0.0, 1.0)
}

/// Kendall's tau of the bivariate Frank copula via the Debye function.
pub(crate) fn frank_tau(theta: f64) -> f64 {
    if theta.abs() < 1e-8 {
        return 0.0;
    }
    if theta < 0.0 {
        return -frank_tau(-theta);
    }
    let integral = gausquad::integrate(
        |t| if t == 0.0 { 1.0 } else { t / t.exp_m1() },
        0.0,
        theta,
        1e-13,
    );
    let d1 = integral / theta;
    1.0 - 4.0 / theta * (1.0 - d1)
}

fn frank_tau_inverse(tau: f64) -> f64 {
    if tau.abs() < 1e-6 {
        return if tau < 0.0 { -FRANK_ZERO_BAND } else { FRANK_ZERO_BAND };
    }
    let target = tau.abs().min(0.95);
    let (mut lo, mut hi) = (1e-6, 80.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if frank_tau(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let th = 0.5 * (lo + hi);
    if tau < 0.0 {
        -th
    } else {
        th
    }
}

// ---- nested Frank --------------------------------------------------------

/// Pieces of the bivariate Frank copula at `(u1, u2)`:
/// `(C, dC/du1, dC/du2, c)`.
fn frank2_pieces(theta: f64, u1: f64, u2: f64) -> (f64, f64, f64, f64) {
    let t = frank_terms(theta, &[u1, u2]);
    let e1 = (-theta * u1).exp();
    let e2 = (-theta * u2).exp();
    let tau1 = -(-theta * u1).exp_m1();
    let tau2 = -(-theta * u2).exp_m1();
    let d = t.a * t.one_minus_x;
    let c = frank_cdf(theta, &[u1, u2]);
    let h1 = e1 * tau2 / d;
    let h2 = e2 * tau1 / d;
    let dens = theta * t.a * e1 * e2 / (d * d);
    (c, h1, h2, dens)
}

fn nested_frank_ln_density(psi1: f64, psi2: f64, u: &[f64]) -> f64 {
    let (v, v1, v2, ci) = frank2_pieces(psi2, u[0], u[1]);
    let v = v.clamp(U_CLAMP * U_CLAMP, 1.0 - U_CLAMP * U_CLAMP);
    let (_, _, _, co) = frank2_pieces(psi1, v, u[2]);
    let tau3 = -(-psi1 * u[2]).exp_m1();
    let t_o = frank_terms(psi1, &[v, u[2]]);
    let d_o = t_o.a * t_o.one_minus_x;
    let slope = -psi1 + 2.0 * psi1 * (-psi1 * v).exp() * tau3 / d_o;
    let bracket = (slope * v1 * v2 + ci).max(f64::MIN_POSITIVE);
    co.ln() + bracket.ln()
}

/// Draws the third coordinate of a nested Frank vector given the first two.
fn nested_frank_third(psi1: f64, psi2: f64, u1: f64, u2: f64, w: f64) -> f64 {
    let (v, v1, v2, ci) = frank2_pieces(psi2, u1, u2);
    let v = v.clamp(1e-300, 1.0);
    let ratio = v1 * v2 / ci;
    let cond = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (_, h, _, _) = frank2_pieces(psi1, v, x);
        psi1 * h * (h - 1.0) * ratio + h
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if cond(mid) < w {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---- Gaussian ------------------------------------------------------------

pub(crate) fn gaussian_ln_density_z(r: &CorrelationMatrix, z: &[f64]) -> f64 {
    let q = r.quad_form(z);
    let zz: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * (r.log_det() + q - zz)
}

#[allow(dead_code)]
fn gaussian_ln_density_check(r: &CorrelationMatrix, z: &[f64]) -> f64 {
    gausquad::mvn_logdensity(z, r).unwrap() - z.iter().map(|&v| norm_ln_pdf(v)).sum::<f64>()
}

// ---- frailties ------------------------------------------------------------

/// Positive stable variable with Laplace transform `exp(-t^alpha)`
/// (Chambers–Mallows–Stuck).
fn positive_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if (alpha - 1.0).abs() < 1e-12 {
        return 1.0;
    }
    let u = std::f64::consts::PI * open_unit(rng);
    let w: f64 = Exp1.sample(rng);
    let a = (alpha * u).sin() / u.sin().powf(1.0 / alpha);
    let b = (((1.0 - alpha) * u).sin() / w).powf((1.0 - alpha) / alpha);
    a * b
}

/// Logarithmic series variable with `P(V = k) = -p^k / (k ln(1-p))`
/// (Kemp's LK algorithm).
fn log_series<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    let v = open_unit(rng);
    if v > p {
        return 1;
    }
    let r = (-p).ln_1p();
    let u = open_unit(rng);
    let q = -(r * u).exp_m1();
    if v < q * q {
        let k = 1.0 + v.ln() / q.ln();
        if k.is_finite() && k < 1e18 {
            return k.floor() as u64;
        }
        return u64::MAX / 2;
    }
    if v > q {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gausquad::integrate;
    use rand::Rng;
    use proptest::prelude::*;

    fn bivariate_zoo() -> Vec<CopulaModel> {
        let mut out = Vec::new();
        for rot in [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270] {
            for th in [1.0, 1.7, 4.0, 12.0] {
                out.push(CopulaModel::gumbel(th).unwrap().with_rotation(rot).unwrap());
            }
            for th in [0.05, 0.8, 3.56, 12.0] {
                out.push(CopulaModel::clayton(th).unwrap().with_rotation(rot).unwrap());
            }
            for th in [-9.0, -1.0, 0.5, 6.0, 25.0] {
                out.push(CopulaModel::frank(2, th).unwrap().with_rotation(rot).unwrap());
            }
        }
        for rho in [-0.85, -0.3, 0.0, 0.5, 0.9] {
            out.push(CopulaModel::gaussian(CorrelationMatrix::exchangeable(2, rho).unwrap()));
        }
        out.push(CopulaModel::independence(2).unwrap());
        out
    }

    fn mixed_partial(c: &CopulaModel, u: f64, v: f64, h: f64) -> f64 {
        let f = |a: f64, b: f64| c.cdf(&[a, b]).unwrap();
        (f(u + h, v + h) - f(u + h, v - h) - f(u - h, v + h) + f(u - h, v - h)) / (4.0 * h * h)
    }

    #[test]
    fn closed_form_cdf_values() {
        let c = CopulaModel::clayton(2.0).unwrap();
        assert!((c.cdf(&[0.5, 0.5]).unwrap() - 7f64.powf(-0.5)).abs() < 1e-14);
        let g = CopulaModel::gumbel(1.0).unwrap();
        assert!((g.cdf(&[0.3, 0.7]).unwrap() - 0.21).abs() < 1e-14);
        assert!(c.cdf(&[1.2, 0.5]).is_err());
        assert!(c.cdf(&[0.5]).is_err());
    }

    #[test]
    fn uniform_margins() {
        let mut all = bivariate_zoo();
        all.push(CopulaModel::frank(3, 4.0).unwrap());
        all.push(CopulaModel::frank(4, 2.0).unwrap());
        all.push(CopulaModel::nested_frank(1.5, 6.0).unwrap());
        all.push(CopulaModel::gaussian(CorrelationMatrix::unstructured(3, &[0.3, 0.6, 0.1]).unwrap()));
        for c in &all {
            let p = c.dim();
            for &x in &[0.0, 1e-6, 0.13, 0.5, 0.77, 1.0] {
                for j in 0..p {
                    let mut u = vec![1.0; p];
                    u[j] = x;
                    let v = c.cdf(&u).unwrap();
                    assert!((v - x).abs() < 1e-12, "{c:?} coord {j} at {x}: {v}");
                }
            }
        }
    }

    #[test]
    fn density_matches_mixed_partial() {
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        for c in bivariate_zoo() {
            for &u in &grid {
                for &v in &grid {
                    let fd = mixed_partial(&c, u, v, 1e-4);
                    let d = c.logdensity(&[u, v]).unwrap().exp();
                    // below 1e-3 the difference quotient itself carries ~1e-8 rounding
                    let err = (d - fd).abs();
                    assert!(err < 1e-4 * d.max(1e-3), "{c:?} at ({u},{v}): {d} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn trivariate_density_matches_third_difference() {
        let h = 1e-3;
        let cops = [
            CopulaModel::frank(3, 2.0).unwrap(),
            CopulaModel::frank(3, 9.0).unwrap(),
            CopulaModel::nested_frank(1.0, 4.0).unwrap(),
            CopulaModel::nested_frank(3.0, 11.0).unwrap(),
        ];
        for c in &cops {
            for &u in &[[0.2, 0.4, 0.7], [0.5, 0.5, 0.5], [0.8, 0.3, 0.15], [0.9, 0.85, 0.6]] {
                let hi: Vec<f64> = u.iter().map(|x| x + h).collect();
                let lo: Vec<f64> = u.iter().map(|x| x - h).collect();
                let fd = c.rectangle(&lo, &hi, 0.0).unwrap() / (8.0 * h * h * h);
                let d = c.logdensity(&u).unwrap().exp();
                assert!(((d - fd) / d).abs() < 1e-4, "{c:?} at {u:?}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn frank4_density_matches_fourth_difference() {
        let c = CopulaModel::frank(4, 3.0).unwrap();
        let h = 2e-3;
        let u = [0.3, 0.6, 0.45, 0.7];
        let lo: Vec<f64> = u.iter().map(|x| x - h).collect();
        let hi: Vec<f64> = u.iter().map(|x| x + h).collect();
        let fd = c.rectangle(&lo, &hi, 0.0).unwrap() / (2.0 * h).powi(4);
        let d = c.logdensity(&u).unwrap().exp();
        assert!(((d - fd) / d).abs() < 1e-3, "{d} vs {fd}");
    }

    #[test]
    fn gaussian_density_decomposes() {
        let r = CorrelationMatrix::unstructured(3, &[0.4, -0.2, 0.3]).unwrap();
        let c = CopulaModel::gaussian(r.clone());
        for u in [[0.2, 0.5, 0.9], [0.01, 0.6, 0.4]] {
            let z: Vec<f64> = u.iter().map(|&x| norm_quantile(x)).collect();
            let want = gaussian_ln_density_check(&r, &z);
            assert!((c.logdensity(&u).unwrap() - want).abs() < 1e-12);
        }
        let ind = CopulaModel::gaussian(CorrelationMatrix::identity(2));
        assert!(ind.logdensity(&[0.3, 0.8]).unwrap().abs() < 1e-15);
        let i3 = CopulaModel::independence(3).unwrap();
        assert_eq!(i3.logdensity(&[0.3, 0.8, 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn clayton_density_at_table_parameter() {
        let c = CopulaModel::clayton(3.56).unwrap();
        let fd = mixed_partial(&c, 0.2, 0.3, 1e-5);
        let d = c.logdensity(&[0.2, 0.3]).unwrap().exp();
        assert!((d - fd).abs() < 1e-5, "{d} vs {fd}");
    }

    #[test]
    fn logdensity_rejects_boundary() {
        let c = CopulaModel::clayton(1.0).unwrap();
        assert!(c.logdensity(&[0.0, 0.5]).is_err());
        assert!(c.ln_density(&[0.0, 0.5]).is_finite());
    }

    #[test]
    fn rotate_u_examples() {
        assert_eq!(rotate_u(Rotation::R180, [0.2, 0.7]), [0.8, 1.0 - 0.7]);
        assert_eq!(rotate_u(Rotation::R0, [0.2, 0.7]), [0.2, 0.7]);
        assert_eq!(rotate_u(Rotation::R90, [0.2, 0.7]), [0.8, 0.7]);
        assert_eq!(rotate_u(Rotation::R270, [0.2, 0.7]), [0.2, 1.0 - 0.7]);
    }

    #[test]
    fn survival_clayton_cdf_matches_integrated_density() {
        let c = CopulaModel::clayton(3.56).unwrap().with_rotation(Rotation::R180).unwrap();
        let base = CopulaModel::clayton(3.56).unwrap();
        let closed = 0.4 + 0.6 - 1.0 + base.cdf(&[0.6, 0.4]).unwrap();
        assert!((c.cdf(&[0.4, 0.6]).unwrap() - closed).abs() < 1e-15);
        let numeric = integrate(
            |x| integrate(|y| c.ln_density(&[x, y]).exp(), 0.0, 0.6, 1e-14),
            0.0,
            0.4,
            1e-13,
        );
        assert!((closed - numeric).abs() < 1e-12, "{closed} vs {numeric}");
    }

    #[test]
    fn rotation_rejected_for_non_archimedean() {
        let g = CopulaModel::gaussian(CorrelationMatrix::exchangeable(2, 0.3).unwrap());
        assert!(g.with_rotation(Rotation::R90).is_err());
        assert!(CopulaModel::frank(3, 1.0).unwrap().with_rotation(Rotation::R180).is_err());
        assert!(CopulaModel::gumbel(2.0).unwrap().with_rotation(Rotation::R270).is_ok());
    }

    #[test]
    fn parameter_domains() {
        assert!(CopulaModel::gumbel(0.99).is_err());
        assert!(CopulaModel::clayton(0.0).is_err());
        assert!(CopulaModel::frank(3, -1.0).is_err());
        assert!(CopulaModel::frank(2, 0.0).is_err());
        assert!(CopulaModel::nested_frank(2.0, 2.0).is_err());
        assert!(CopulaModel::nested_frank(0.0, 2.0).is_err());
    }

    #[test]
    fn two_increasing_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for c in bivariate_zoo() {
            for _ in 0..1000 {
                let mut a: [f64; 2] = [rng.random(), rng.random()];
                let mut b: [f64; 2] = [rng.random(), rng.random()];
                for t in 0..2 {
                    if a[t] > b[t] {
                        std::mem::swap(&mut a[t], &mut b[t]);
                    }
                }
                let vol = c.rectangle(&a, &b, 1e-12).unwrap();
                assert!(vol >= -1e-12, "{c:?} {a:?} {b:?}: {vol}");
            }
        }
    }

    #[test]
    fn nested_frank_reduces_to_frank() {
        let psi2 = 3.0;
        let nf = CopulaModel::nested_frank(psi2 - 1e-6, psi2).unwrap();
        let f = CopulaModel::frank(3, psi2 - 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u: Vec<f64> = (0..3).map(|_| 0.05 + 0.9 * rng.random::<f64>()).collect();
            assert!((nf.cdf(&u).unwrap() - f.cdf(&u).unwrap()).abs() < 1e-4);
            let (a, b) = (nf.logdensity(&u).unwrap(), f.logdensity(&u).unwrap());
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn independence_limits() {
        let cops = [
            CopulaModel::clayton(1e-6).unwrap(),
            CopulaModel::gumbel(1.0).unwrap(),
            CopulaModel::frank(2, 1e-6).unwrap(),
            CopulaModel::frank(3, 1e-6).unwrap(),
        ];
        for c in &cops {
            for &x in &[0.1, 0.45, 0.8] {
                for &y in &[0.2, 0.6, 0.95] {
                    let mut u = vec![x, y];
                    if c.dim() == 3 {
                        u.push(0.5);
                    }
                    let prod: f64 = u.iter().product();
                    assert!((c.cdf(&u).unwrap() - prod).abs() < 1e-4, "{c:?}");
                    assert!(c.logdensity(&u).unwrap().abs() < 1e-4, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn free_coordinates_round_trip() {
        let mut cops = bivariate_zoo();
        cops.push(CopulaModel::nested_frank(0.7, 4.2).unwrap());
        cops.push(CopulaModel::gaussian(CorrelationMatrix::exchangeable(3, -0.3).unwrap()));
        cops.push(CopulaModel::gaussian(
            CorrelationMatrix::unstructured(4, &[0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap(),
        ));
        for c in cops {
            let back = c.from_free(&c.to_free()).unwrap();
            assert_eq!(back.family(), c.family());
            assert_eq!(back.rotation(), c.rotation());
            for (a, b) in back.params().iter().zip(c.params()) {
                assert!((a - b).abs() < 1e-9, "{c:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn clayton_tau_by_integration() {
        // tau = 1 - 4 * int int dC/du dC/dv, partials from the closed form
        let th: f64 = 2.0;
        let c = CopulaModel::clayton(th).unwrap();
        let h = |a: f64, b: f64| {
            let s = clayton_ln_s(th, a, b);
            (-(th + 1.0) * a.ln() - (1.0 / th + 1.0) * s).exp()
        };
        let integral = integrate(
            |u| integrate(|v| h(u, v) * h(v, u), 0.0, 1.0, 1e-10),
            0.0,
            1.0,
            1e-9,
        );
        let tau = 1.0 - 4.0 * integral;
        assert!((tau - 0.5).abs() < 1e-6, "{tau}");
        assert!((c.kendall_tau().unwrap() - tau).abs() < 1e-6);
    }

    #[test]
    fn frank_tau_matches_integration() {
        let th: f64 = 5.0;
        let c = CopulaModel::frank(2, th).unwrap();
        let hf = |a: f64, b: f64| frank2_pieces(th, a, b).1;
        let integral = integrate(
            |u| integrate(|v| hf(u, v) * hf(v, u), 0.0, 1.0, 1e-11),
            0.0,
            1.0,
            1e-10,
        );
        let tau = 1.0 - 4.0 * integral;
        assert!((c.kendall_tau().unwrap() - tau).abs() < 1e-6);
        assert!((frank_tau_inverse(frank_tau(5.0)) - 5.0).abs() < 1e-8);
    }

    fn column(s: &[Vec<f64>], j: usize) -> Vec<f64> {
        s.iter().map(|r| r[j]).collect()
    }

    #[test]
    fn clayton_sample_tau() {
        let s = sample_copula(&CopulaModel::clayton(2.0).unwrap(), 20000, 1);
        let tau = empirical_kendall_tau(&column(&s, 0), &column(&s, 1));
        assert!((tau - 0.5).abs() < 0.02, "{tau}");
    }

    #[test]
    fn gumbel_at_one_is_independent() {
        let s = sample_copula(&CopulaModel::gumbel(1.0).unwrap(), 5000, 2);
        let (a, b) = (column(&s, 0), column(&s, 1));
        let ma = a.iter().sum::<f64>() / 5000.0;
        let mb = b.iter().sum::<f64>() / 5000.0;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((cov / (va * vb).sqrt()).abs() < 0.03);
    }

    #[test]
    fn gaussian_sample_tau() {
        let c = CopulaModel::gaussian(CorrelationMatrix::exchangeable(2, 0.8).unwrap());
        let s = sample_copula(&c, 20000, 3);
        let tau = empirical_kendall_tau(&column(&s, 0), &column(&s, 1));
        let want = 2.0 / std::f64::consts::PI * 0.8f64.asin();
        assert!((tau - want).abs() < 0.02, "{tau} vs {want}");
    }

    #[test]
    fn samplers_match_cdf() {
        let cops = [
            CopulaModel::gumbel(3.0).unwrap(),
            CopulaModel::gumbel(2.86).unwrap().with_rotation(Rotation::R90).unwrap(),
            CopulaModel::clayton(3.24).unwrap().with_rotation(Rotation::R180).unwrap(),
            CopulaModel::frank(2, 5.0).unwrap(),
            CopulaModel::frank(2, -5.0).unwrap(),
            CopulaModel::frank(2, 30.0).unwrap(),
            CopulaModel::frank(3, 4.0).unwrap(),
            CopulaModel::nested_frank(1.0, 6.0).unwrap(),
            CopulaModel::gaussian(CorrelationMatrix::unstructured(3, &[0.5, -0.3, 0.2]).unwrap()),
        ];
        let n = 20000;
        for (k, c) in cops.iter().enumerate() {
            let s = sample_copula(c, n, 100 + k as u64);
            for pt in [[0.3, 0.3, 0.5], [0.7, 0.4, 0.9], [0.5, 0.8, 0.2]] {
                let u = &pt[..c.dim()];
                let emp = s
                    .iter()
                    .filter(|row| row.iter().zip(u).all(|(a, b)| a <= b))
                    .count() as f64
                    / n as f64;
                let th = c.cdf(u).unwrap();
                assert!((emp - th).abs() < 0.015, "{c:?} at {u:?}: {emp} vs {th}");
            }
            assert!(s.iter().flatten().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = CopulaModel::clayton(1.3).unwrap();
        assert_eq!(sample_copula(&c, 50, 9), sample_copula(&c, 50, 9));
        assert_ne!(sample_copula(&c, 50, 9), sample_copula(&c, 50, 10));
    }

    #[test]
    fn tau_matching_recovers_parameters() {
        for c in [
            CopulaModel::clayton(3.0).unwrap(),
            CopulaModel::gumbel(2.5).unwrap().with_rotation(Rotation::R90).unwrap(),
            CopulaModel::frank(2, -4.0).unwrap(),
            CopulaModel::gaussian(CorrelationMatrix::exchangeable(2, 0.4).unwrap()),
        ] {
            let tau = c.kendall_tau().unwrap();
            let back = c.clone().matched_to_tau(tau);
            assert!((back.params()[0] - c.params()[0]).abs() < 1e-6, "{c:?} -> {back:?}");
        }
    }

    proptest! {
        #[test]
        fn cdf_is_bounded_by_frechet(th in 0.05f64..15.0, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            for c in [CopulaModel::clayton(th).unwrap(), CopulaModel::gumbel(1.0 + th).unwrap(),
                      CopulaModel::frank(2, th).unwrap(), CopulaModel::frank(2, -th).unwrap()] {
                let x = c.cdf(&[u, v]).unwrap();
                prop_assert!(x <= u.min(v) + 1e-12);
                prop_assert!(x >= (u + v - 1.0).max(0.0) - 1e-12);
            }
        }

        #[test]
        fn rotated_density_is_base_at_reflection(th in 0.1f64..10.0, u in 0.01f64..0.99, v in 0.01f64..0.99) {
            let base = CopulaModel::clayton(th).unwrap();
            for rot in [Rotation::R90, Rotation::R180, Rotation::R270] {
                let c = base.clone().with_rotation(rot).unwrap();
                let r = rotate_u(rot, [u, v]);
                prop_assert!((c.ln_density(&[u, v]) - base.ln_density(&r)).abs() < 1e-12);
            }
        }
    }
}
