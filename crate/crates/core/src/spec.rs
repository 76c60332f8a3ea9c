//! Declarative model specification shared by the command line and the
//! browser demo. Parameters are either fixed values or `"fit"`.

use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaFamily, CopulaModel, Rotation};
use crate::error::{invalid, Error, Result};
use crate::gausquad::CorrStructure;
use crate::marginals::{Marginal, MarginalFamily};
use crate::mixture::{Component, MixtureModel};

/// The literal `"fit"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitKeyword {
    Fit,
}

/// Fixed natural parameters, or free ones estimated from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSpec {
    Fit(FitKeyword),
    Values(Vec<f64>),
}

impl Default for ParamSpec {
    fn default() -> Self {
        ParamSpec::Fit(FitKeyword::Fit)
    }
}

/// Sample-space angle: `"fit"` or fixed degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleSpec {
    Fit(FitKeyword),
    Degrees(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopulaSpec {
    pub family: CopulaFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Rotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<CorrStructure>,
    #[serde(default)]
    pub params: ParamSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    #[serde(flatten)]
    pub family: MarginalFamily,
    #[serde(default)]
    pub params: ParamSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub copula: CopulaSpec,
    pub marginals: Vec<MarginalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<AngleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub components: Vec<ComponentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn locate(path: String, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => Error::InvalidParameter {
            name: format!("{path}.{name}"),
            reason,
        },
        Error::DimensionMismatch { expected, got } => Error::InvalidParameter {
            name: path,
            reason: format!("expected {expected} values, got {got}"),
        },
        Error::Unsupported(msg) | Error::Domain(msg) => Error::InvalidParameter { name: path, reason: msg },
        other => other,
    }
}

fn default_copula_params(family: CopulaFamily, dim: usize, structure: CorrStructure) -> Vec<f64> {
    match family {
        CopulaFamily::Independence => vec![],
        CopulaFamily::Gumbel => vec![1.5],
        CopulaFamily::Clayton | CopulaFamily::Frank => vec![1.0],
        CopulaFamily::NestedFrank => vec![0.5, 1.0],
        CopulaFamily::Gaussian => match structure {
            CorrStructure::Exchangeable => vec![0.3],
            CorrStructure::Unstructured => vec![0.0; dim * (dim - 1) / 2],
        },
    }
}

fn default_marginal(family: MarginalFamily) -> Result<Marginal> {
    match family {
        MarginalFamily::Normal => Marginal::normal(0.0, 1.0),
        MarginalFamily::Beta => Marginal::beta(1.0, 1.0),
        MarginalFamily::Gamma => Marginal::gamma(1.0, 1.0),
        MarginalFamily::Binomial { trials } => Marginal::binomial(trials, 0.5),
    }
}

fn marginal_from_values(family: MarginalFamily, v: &[f64]) -> Result<Marginal> {
    let need = family.n_params();
    if v.len() != need {
        return Err(Error::DimensionMismatch {
            expected: need,
            got: v.len(),
        });
    }
    match family {
        MarginalFamily::Normal => Marginal::normal(v[0], v[1]),
        MarginalFamily::Beta => Marginal::beta(v[0], v[1]),
        MarginalFamily::Gamma => Marginal::gamma(v[0], v[1]),
        MarginalFamily::Binomial { trials } => Marginal::binomial(trials, v[0]),
    }
}

impl ComponentSpec {
    /// Component with fixed values where given and starting values where
    /// the spec says `"fit"`.
    pub fn template(&self, index: usize) -> Result<Component> {
        let at = |what: &str| format!("components[{index}].{what}");
        let dim = self.marginals.len();
        if dim == 0 {
            return Err(invalid(&at("marginals"), "need at least one marginal"));
        }
        let c = &self.copula;
        let structure = c.structure.unwrap_or(CorrStructure::Exchangeable);
        let (params, copula_fixed) = match &c.params {
            ParamSpec::Fit(_) => (default_copula_params(c.family, dim, structure), false),
            ParamSpec::Values(v) => (v.clone(), true),
        };
        let copula = CopulaModel::from_params(c.family, dim, structure, &params)
            .and_then(|m| m.with_rotation(c.rotation.unwrap_or(Rotation::R0)))
            .map_err(|e| locate(at("copula"), e))?;
        let mut margs = Vec::with_capacity(dim);
        let mut fixed = Vec::with_capacity(dim);
        for (t, m) in self.marginals.iter().enumerate() {
            let built = match &m.params {
                ParamSpec::Fit(_) => default_marginal(m.family),
                ParamSpec::Values(v) => marginal_from_values(m.family, v),
            }
            .map_err(|e| locate(at(&format!("marginals[{t}]")), e))?;
            margs.push(built);
            fixed.push(matches!(m.params, ParamSpec::Values(_)));
        }
        let mut comp = Component::new(copula, margs, None)
            .map_err(|e| locate(at("marginals"), e))?
            .with_copula_fixed(copula_fixed);
        for (t, f) in fixed.into_iter().enumerate() {
            comp = comp.with_marginal_fixed(t, f)?;
        }
        match &self.angle {
            None => Ok(comp),
            Some(AngleSpec::Fit(_)) => comp.with_angle(std::f64::consts::TAU, true),
            Some(AngleSpec::Degrees(d)) => comp.with_angle(d.to_radians(), false),
        }
        .map_err(|e| locate(at("angle"), e))
    }

    /// Whether every parameter is fixed.
    pub fn is_fixed(&self) -> bool {
        matches!(self.copula.params, ParamSpec::Values(_))
            && self.marginals.iter().all(|m| matches!(m.params, ParamSpec::Values(_)))
            && !matches!(self.angle, Some(AngleSpec::Fit(_)))
    }

    /// Fully fixed description of a component.
    pub fn from_component(c: &Component) -> Self {
        let cop = c.copula();
        Self {
            copula: CopulaSpec {
                family: cop.family(),
                rotation: (cop.rotation() != Rotation::R0).then_some(cop.rotation()),
                structure: cop.structure(),
                params: ParamSpec::Values(cop.params()),
            },
            marginals: c
                .marginals()
                .iter()
                .map(|m| MarginalSpec {
                    family: m.family(),
                    params: ParamSpec::Values(m.params()),
                })
                .collect(),
            angle: c.angle().map(|a| AngleSpec::Degrees(a.degrees())),
        }
    }
}

impl ModelSpec {
    /// Validated component templates in spec order.
    pub fn templates(&self) -> Result<Vec<Component>> {
        if self.components.is_empty() {
            return Err(invalid("components", "need at least one component"));
        }
        let comps = self
            .components
            .iter()
            .enumerate()
            .map(|(j, c)| c.template(j))
            .collect::<Result<Vec<_>>>()?;
        let p = comps[0].dim();
        if let Some(j) = comps.iter().position(|c| c.dim() != p) {
            return Err(invalid(
                &format!("components[{j}].marginals"),
                format!("all components need {p} marginals"),
            ));
        }
        if let Some(w) = &self.weights {
            if w.len() != comps.len() {
                return Err(invalid("weights", format!("need {} weights, got {}", comps.len(), w.len())));
            }
        }
        Ok(comps)
    }

    /// The mixture itself; every parameter and the weights must be fixed.
    pub fn to_model(&self) -> Result<MixtureModel> {
        let comps = self.templates()?;
        if let Some(j) = self.components.iter().position(|c| !c.is_fixed()) {
            return Err(invalid(&format!("components[{j}]"), "has parameters still marked \"fit\""));
        }
        let weights = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / comps.len() as f64; comps.len()],
        };
        MixtureModel::new(weights, comps).map_err(|e| locate("model".into(), e))
    }

    /// Fully fixed spec of a fitted mixture.
    pub fn from_model(model: &MixtureModel) -> Self {
        Self {
            components: model.components().iter().map(ComponentSpec::from_component).collect(),
            weights: Some(model.weights().to_vec()),
        }
    }

    /// Free-parameter template with the given copulas and Normal marginals.
    pub fn bivariate_normal(copulas: &[(CopulaFamily, Rotation)]) -> Self {
        let comps = copulas
            .iter()
            .map(|&(family, rotation)| ComponentSpec {
                copula: CopulaSpec {
                    family,
                    rotation: (rotation != Rotation::R0).then_some(rotation),
                    structure: None,
                    params: ParamSpec::default(),
                },
                marginals: vec![
                    MarginalSpec {
                        family: MarginalFamily::Normal,
                        params: ParamSpec::default(),
                    };
                    2
                ],
                angle: None,
            })
            .collect();
        Self {
            components: comps,
            weights: None,
        }
    }

    /// `{Gumbel, Gumbel, Clayton, Clayton}` with Normal marginals.
    pub fn example1() -> Self {
        use CopulaFamily::{Clayton, Gumbel};
        Self::bivariate_normal(&[
            (Gumbel, Rotation::R0),
            (Gumbel, Rotation::R0),
            (Clayton, Rotation::R0),
            (Clayton, Rotation::R0),
        ])
    }

    /// `k` Gaussian-copula components over Binomial columns.
    pub fn binomial_gaussian(trials: &[u32], k: usize, structure: CorrStructure) -> Self {
        let comp = ComponentSpec {
            copula: CopulaSpec {
                family: CopulaFamily::Gaussian,
                rotation: None,
                structure: Some(structure),
                params: ParamSpec::default(),
            },
            marginals: trials
                .iter()
                .map(|&m| MarginalSpec {
                    family: MarginalFamily::Binomial { trials: m },
                    params: ParamSpec::default(),
                })
                .collect(),
            angle: None,
        };
        Self {
            components: vec![comp; k],
            weights: None,
        }
    }
}
