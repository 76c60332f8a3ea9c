//! Browser bindings: copula density heat maps, sampling from a model
//! spec, and mixture contours.

use copmix::copulas::{CopulaFamily, CopulaModel, Rotation};
use copmix::datakit::sample_mixture;
use copmix::eval::{contour_grid, GridSpec};
use copmix::gausquad::{CorrStructure, CorrelationMatrix};
use copmix::spec::ModelSpec;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn bivariate_copula(family: &str, rotation: u32, param: f64) -> Result<CopulaModel, String> {
    let model = match family {
        "gaussian" => CorrelationMatrix::exchangeable(2, param).map(CopulaModel::gaussian),
        "independence" => CopulaModel::independence(2),
        other => {
            let fam: CopulaFamily =
                serde_json::from_value(serde_json::Value::String(other.into())).map_err(|e| e.to_string())?;
            CopulaModel::from_params(fam, 2, CorrStructure::Exchangeable, &[param])
        }
    }
    .map_err(|e| e.to_string())?;
    let rot = Rotation::from_degrees(rotation).map_err(|e| e.to_string())?;
    model.with_rotation(rot).map_err(|e| e.to_string())
}

/// Row-major `n x n` copula density at cell midpoints of the unit square;
/// row `i` holds `u2 = (i + 0.5) / n`.
pub fn copula_density(family: &str, rotation: u32, param: f64, n: usize) -> Result<Vec<f64>, String> {
    if n == 0 || n > 400 {
        return Err("grid size must be in 1..=400".into());
    }
    let cop = bivariate_copula(family, rotation, param)?;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let v = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let u = (j as f64 + 0.5) / n as f64;
            out.push(cop.ln_density(&[u, v]).exp());
        }
    }
    Ok(out)
}

/// Draws `n` rows from a fully specified model and returns flattened
/// `[x1, x2, label]` triples.
pub fn sample(spec_json: &str, n: usize, seed: u64) -> Result<Vec<f64>, String> {
    let spec: ModelSpec = serde_json::from_str(spec_json).map_err(|e| e.to_string())?;
    let model = spec.to_model().map_err(|e| e.to_string())?;
    if model.dim() < 2 {
        return Err("need at least two coordinates".into());
    }
    let data = sample_mixture(&model, n, seed).map_err(|e| e.to_string())?;
    let labels = data.labels().unwrap_or(&[]);
    let mut out = Vec::with_capacity(3 * n);
    for (i, r) in data.rows().enumerate() {
        out.extend([r[0], r[1], labels.get(i).copied().unwrap_or(0) as f64]);
    }
    Ok(out)
}

#[derive(Serialize)]
struct Contour {
    xs: Vec<f64>,
    ys: Vec<f64>,
    density: Vec<Vec<f64>>,
    mass: f64,
}

/// Mixture density of the first two coordinates on an `n x n` grid, as JSON
/// `{xs, ys, density, mass}`.
pub fn contour(spec_json: &str, n: usize) -> Result<String, String> {
    let spec: ModelSpec = serde_json::from_str(spec_json).map_err(|e| e.to_string())?;
    let model = spec.to_model().map_err(|e| e.to_string())?;
    let grid = GridSpec::around(&model, [0, 1], 4.0, n).map_err(|e| e.to_string())?;
    let g = contour_grid(&model, [0, 1], &grid).map_err(|e| e.to_string())?;
    let c = Contour {
        mass: g.mass(&grid),
        xs: g.xs,
        ys: g.ys,
        density: g.density,
    };
    serde_json::to_string(&c).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = copulaDensity)]
pub fn copula_density_js(family: &str, rotation: u32, param: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    copula_density(family, rotation, param, n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sampleModel)]
pub fn sample_js(spec_json: &str, n: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    sample(spec_json, n, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = mixtureContour)]
pub fn contour_js(spec_json: &str, n: usize) -> Result<String, JsValue> {
    contour(spec_json, n).map_err(|e| JsValue::from_str(&e))
}
