//! Starting values: initial partitions, IFM fits per class, copula
//! orderings, multi-start and sequential starts for count data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copulas::{empirical_kendall_tau, CopulaFamily, CopulaModel};
use crate::datakit::Dataset;
use crate::error::{invalid, Error, Result};
use crate::eval::next_permutation;
use crate::gausquad::{CorrStructure, CorrelationMatrix};
use crate::marginals::{fit_marginal_weighted, Marginal};
use crate::mixture::{
    ecm_step, fit, m_step_full, rotate_to_component, weighted_component_loglik, Algorithm, Component, FitConfig,
    FitReport, MixtureModel,
};

const PARTITION_RETRIES: usize = 50;
// random seed sets tried per min-distance partition; the tightest is kept
const SEED_DRAWS: usize = 20;
/// Weight given to the component appended by [`sequential_init_discrete`].
pub const SEQUENTIAL_WEIGHT: f64 = 0.05;
/// Gap between the two nested Frank parameters at the start.
pub const NESTED_FRANK_GAP: f64 = 0.05;
const ANGLE_GRID: usize = 16;

/// How initial partitions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    /// Nearest of `k` randomly sampled observations.
    MinDistance,
    /// Swap descent on `k` medoids seeded like [`PartitionMethod::MinDistance`].
    #[default]
    KMedoids,
}

/// Hard assignment of observations to `k` nonempty classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

impl Partition {
    /// `labels` are 1-based.
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0; k];
        for &l in &labels {
            if l == 0 || l > k {
                return Err(Error::Partition(format!("label {l} outside 1..={k}")));
            }
            sizes[l - 1] += 1;
        }
        if let Some(j) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Partition(format!("class {} is empty", j + 1)));
        }
        Ok(Self { labels, sizes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    /// 0-based row indices of class `j` (0-based).
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == j + 1).collect()
    }
}

/// Columns divided by their sample standard deviation, row-major.
fn standardized(data: &Dataset) -> Vec<f64> {
    let (n, p) = (data.n(), data.p());
    let mut scale = vec![1.0; p];
    for (t, s) in scale.iter_mut().enumerate() {
        let col = data.column(t);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        if var > 0.0 {
            *s = var.sqrt();
        }
    }
    data.rows()
        .flat_map(|r| r.iter().zip(&scale).map(|(x, s)| x / s).collect::<Vec<_>>())
        .collect()
}

fn dist(z: &[f64], p: usize, i: usize, j: usize) -> f64 {
    let (a, b) = (&z[i * p..(i + 1) * p], &z[j * p..(j + 1) * p]);
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest_labels(z: &[f64], p: usize, n: usize, centers: &[usize]) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (j, &c) in centers.iter().enumerate() {
                let d = dist(z, p, i, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0 + 1
        })
        .collect()
}

fn check_k(data: &Dataset, k: usize) -> Result<()> {
    if k == 0 || k > data.n() {
        return Err(invalid("k", format!("need 1 <= k <= n = {}, got {k}", data.n())));
    }
    Ok(())
}

fn total_distance(z: &[f64], p: usize, labels: &[usize], centers: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| dist(z, p, i, centers[l - 1]))
        .sum()
}

/// Assigns every observation to the nearest of `k` randomly sampled
/// observations (Euclidean distance on standardized columns). Of
/// several sampled seed sets the one with the smallest total distance wins.
pub fn partition_min_distance(data: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    check_k(data, k)?;
    let (n, p) = (data.n(), data.p());
    let z = standardized(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PARTITION_RETRIES {
        let mut best: Option<(f64, Partition)> = None;
        for _ in 0..SEED_DRAWS {
            let centers = rand::seq::index::sample(&mut rng, n, k).into_vec();
            let labels = nearest_labels(&z, p, n, &centers);
            let cost = total_distance(&z, p, &labels, &centers);
            if let Ok(part) = Partition::new(labels, k) {
                if best.as_ref().is_none_or(|b| cost < b.0) {
                    best = Some((cost, part));
                }
            }
        }
        if let Some((_, part)) = best {
            return Ok(part);
        }
    }
    Err(Error::Partition(format!(
        "no partition with {k} nonempty classes after {PARTITION_RETRIES} draws"
    )))
}

/// PAM-style k-medoids: swap descent from randomly sampled medoids.
pub fn partition_kmedoids(data: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    check_k(data, k)?;
    let (n, p) = (data.n(), data.p());
    let z = standardized(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PARTITION_RETRIES {
        let mut medoids = rand::seq::index::sample(&mut rng, n, k).into_vec();
        swap_descent(&z, p, n, &mut medoids);
        if let Ok(part) = Partition::new(nearest_labels(&z, p, n, &medoids), k) {
            return Ok(part);
        }
    }
    Err(Error::Partition(format!(
        "no partition with {k} nonempty classes after {PARTITION_RETRIES} draws"
    )))
}

fn swap_descent(z: &[f64], p: usize, n: usize, medoids: &mut [usize]) {
    let k = medoids.len();
    let mut is_medoid = vec![false; n];
    medoids.iter().for_each(|&m| is_medoid[m] = true);
    loop {
        // nearest and second-nearest medoid distances
        let mut near = vec![(0usize, f64::INFINITY); n];
        let mut second = vec![f64::INFINITY; n];
        for i in 0..n {
            for (j, &m) in medoids.iter().enumerate() {
                let d = dist(z, p, i, m);
                if d < near[i].1 {
                    second[i] = near[i].1;
                    near[i] = (j, d);
                } else if d < second[i] {
                    second[i] = d;
                }
            }
        }
        let current: f64 = near.iter().map(|x| x.1).sum();
        let mut best = (0usize, 0usize, -1e-12 * current.max(1.0));
        for mi in 0..k {
            for o in 0..n {
                if is_medoid[o] {
                    continue;
                }
                let mut delta = 0.0;
                for i in 0..n {
                    let d_o = dist(z, p, i, o);
                    let new = if near[i].0 == mi { second[i].min(d_o) } else { near[i].1.min(d_o) };
                    delta += new - near[i].1;
                }
                if delta < best.2 {
                    best = (mi, o, delta);
                }
            }
        }
        if best.2 >= -1e-12 * current.max(1.0) {
            return;
        }
        is_medoid[medoids[best.0]] = false;
        medoids[best.0] = best.1;
        is_medoid[best.1] = true;
    }
}

/// Partition drawn by `method`.
pub fn partition(data: &Dataset, k: usize, seed: u64, method: PartitionMethod) -> Result<Partition> {
    match method {
        PartitionMethod::MinDistance => partition_min_distance(data, k, seed),
        PartitionMethod::KMedoids => partition_kmedoids(data, k, seed),
    }
}

// ---- IFM ---------------------------------------------------------------------------

/// Starting mixture from a partition, with the classes that had to be
/// merged into a neighbour because they were too small to fit.
#[derive(Debug, Clone, PartialEq)]
pub struct IfmStart {
    pub model: MixtureModel,
    /// 0-based classes fitted on a neighbouring class's data.
    pub merged: Vec<usize>,
}

/// Component-wise IFM: weights from class sizes, marginals by maximum
/// likelihood per class, then the copula on the probability-transformed
/// class data. `templates` fix the families, free flags and any angle.
pub fn ifm_start(data: &Dataset, partition: &Partition, templates: &[Component], cfg: &FitConfig) -> Result<IfmStart> {
    let k = templates.len();
    if partition.k() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: partition.k(),
        });
    }
    if partition.labels().len() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            got: partition.labels().len(),
        });
    }
    let p = data.p();
    let sizes = partition.sizes();
    let large: Vec<usize> = (0..k).filter(|&j| sizes[j] > p).collect();
    if large.is_empty() {
        return Err(Error::Partition(format!("every class has at most p = {p} observations")));
    }
    let z = standardized(data);
    let centroid = |j: usize| -> Vec<f64> {
        let idx = partition.members(j);
        (0..p)
            .map(|t| idx.iter().map(|&i| z[i * p + t]).sum::<f64>() / idx.len() as f64)
            .collect()
    };
    let centroids: Vec<Vec<f64>> = (0..k).map(centroid).collect();
    let mut merged = Vec::new();
    let source: Vec<usize> = (0..k)
        .map(|j| {
            if sizes[j] > p {
                return j;
            }
            merged.push(j);
            *large
                .iter()
                .min_by(|&&a, &&b| {
                    let da: f64 = centroids[a].iter().zip(&centroids[j]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&centroids[j]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("nonempty")
        })
        .collect();
    let comps = (0..k)
        .into_par_iter()
        .map(|j| {
            let class = data.subset(&partition.members(source[j]))?;
            fit_class(&templates[j], &class, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.n() as f64;
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / n).collect();
    Ok(IfmStart {
        model: MixtureModel::new(weights, comps)?,
        merged,
    })
}

/// IFM fit of one template on one class; a free angle is chosen from a
/// 16-point grid on `(0, 2 pi]`.
pub fn fit_class(template: &Component, class: &Dataset, cfg: &FitConfig) -> Result<Component> {
    match template.angle() {
        Some(a) if a.free => {
            let mut best: Option<(f64, Component)> = None;
            for g in 1..=ANGLE_GRID {
                let omega = std::f64::consts::TAU * g as f64 / ANGLE_GRID as f64;
                let comp = ifm_fixed_angle(&template.clone().with_angle(omega, false)?, class, cfg)?;
                let ones = vec![1.0; class.n()];
                let v = weighted_component_loglik(&comp, class, &ones, cfg)?;
                if best.as_ref().is_none_or(|b| v > b.0) {
                    best = Some((v, comp));
                }
            }
            let comp = best.expect("grid is nonempty").1;
            let omega = comp.angle().expect("angle").value;
            comp.with_angle(omega, true)
        }
        _ => ifm_fixed_angle(template, class, cfg),
    }
}

fn ifm_fixed_angle(template: &Component, class: &Dataset, cfg: &FitConfig) -> Result<Component> {
    let p = template.dim();
    let n = class.n();
    let rows: Vec<Vec<f64>> = class
        .rows()
        .map(|r| match template.angle() {
            Some(a) => rotate_to_component(a.value, [r[0], r[1]]).to_vec(),
            None => r.to_vec(),
        })
        .collect();
    let ones = vec![1.0; n];
    let mut margs = template.marginals().to_vec();
    for t in 0..p {
        if template.marginal_free()[t] {
            let col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
            margs[t] = fit_marginal_weighted(template.marginals()[t].family(), &col, &ones)?.model;
        }
    }
    let mut comp = template.clone().with_marginals(margs.clone())?;
    if !template.copula_free() || template.copula().n_params() == 0 {
        return Ok(comp);
    }
    let u: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&margs).map(|(x, m)| pseudo_cdf(m, *x)).collect())
        .collect();
    comp = comp.with_copula(copula_start(template.copula(), &u)?)?;
    // copula step with the marginals held at their class estimates
    let mut frozen = comp.clone();
    for t in 0..p {
        frozen = frozen.with_marginal_fixed(t, true)?;
    }
    let single = MixtureModel::new(vec![1.0], vec![frozen])?;
    let w = vec![vec![1.0]; n];
    let step = if comp.is_discrete() {
        m_step_full(&single, class, &w, cfg)?
    } else {
        ecm_step(&single, class, &w, cfg)?
    };
    comp.with_copula(step.components()[0].copula().clone())
}

// mid-probabilities for counts so that ties do not pile up on cell edges
fn pseudo_cdf(m: &Marginal, x: f64) -> f64 {
    if m.is_discrete() {
        0.5 * (m.cdf(x) + m.cdf(x - 1.0))
    } else {
        m.cdf(x)
    }
}

fn pairwise_tau(u: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = u.first().map_or(0, Vec::len);
    let cols: Vec<Vec<f64>> = (0..p).map(|t| u.iter().map(|r| r[t]).collect()).collect();
    let mut tau = vec![vec![1.0; p]; p];
    for a in 0..p {
        for b in a + 1..p {
            let t = empirical_kendall_tau(&cols[a], &cols[b]);
            tau[a][b] = t;
            tau[b][a] = t;
        }
    }
    tau
}

/// Copula of the template's family matched to the rank dependence of `u`.
pub fn copula_start(template: &CopulaModel, u: &[Vec<f64>]) -> Result<CopulaModel> {
    let p = template.dim();
    let tau = pairwise_tau(u);
    let mut off = Vec::new();
    for a in 0..p {
        for b in a + 1..p {
            off.push(tau[a][b]);
        }
    }
    let mean = if off.is_empty() { 0.0 } else { off.iter().sum::<f64>() / off.len() as f64 };
    match (template.family(), template.structure()) {
        (CopulaFamily::NestedFrank, _) => nested_frank_start(&off),
        (CopulaFamily::Gaussian, Some(CorrStructure::Unstructured)) => {
            let rho: Vec<f64> = off
                .iter()
                .map(|t| (std::f64::consts::FRAC_PI_2 * t).sin().clamp(-0.95, 0.95))
                .collect();
            match CorrelationMatrix::unstructured(p, &rho) {
                Ok(r) => Ok(CopulaModel::gaussian(r)),
                Err(_) => Ok(template.matched_to_tau(mean)),
            }
        }
        _ => Ok(template.matched_to_tau(mean)),
    }
}

/// Nested Frank start from the pairwise Kendall taus: the outer parameter
/// matches the smallest one and the inner one exceeds it by
/// [`NESTED_FRANK_GAP`].
pub fn nested_frank_start(pair_taus: &[f64]) -> Result<CopulaModel> {
    let smallest = pair_taus.iter().cloned().fold(f64::INFINITY, f64::min);
    let smallest = if smallest.is_finite() { smallest } else { 0.0 };
    let psi1 = CopulaModel::frank(2, 1.0)?.matched_to_tau(smallest.max(1e-3)).params()[0].max(0.05);
    CopulaModel::nested_frank(psi1, psi1 + NESTED_FRANK_GAP)
}

// ---- orderings and multi-start ------------------------------------------------------

/// Number of mixtures with `k` components drawn with repetition from a
/// dictionary of `d` copulas: `C(d + k - 1, k)`.
pub fn dictionary_model_count(d: u64, k: u64) -> u128 {
    let (n, r) = ((d + k).saturating_sub(1) as u128, k as u128);
    if d == 0 {
        return u128::from(k == 0);
    }
    let mut out: u128 = 1;
    for i in 0..r {
        out = out * (n - i) / (i + 1);
    }
    out
}

fn template_key(c: &Component) -> String {
    let families: Vec<_> = c.marginals().iter().map(|m| m.family()).collect();
    format!(
        "{:?}/{:?}/{:?}/{}/{:?}/{:?}",
        c.copula().family(),
        c.copula().rotation(),
        c.copula().structure(),
        c.dim(),
        families,
        c.angle().map(|a| a.free)
    )
}

/// Distinct orderings of the templates, in lexicographic order of the
/// multiset of template kinds. Each entry lists template indices.
pub fn distinct_permutations(templates: &[Component]) -> Vec<Vec<usize>> {
    let mut kinds: Vec<String> = Vec::new();
    let mut first: Vec<usize> = Vec::new();
    let mut ids: Vec<usize> = templates
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let key = template_key(t);
            match kinds.iter().position(|k| *k == key) {
                Some(id) => id,
                None => {
                    kinds.push(key);
                    first.push(i);
                    kinds.len() - 1
                }
            }
        })
        .collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    loop {
        out.push(ids.iter().map(|&id| first[id]).collect());
        if !next_permutation(&mut ids) {
            return out;
        }
    }
}

/// Templates with a free angle added where rotations are allowed.
pub fn with_rotations(templates: &[Component]) -> Vec<Component> {
    templates
        .iter()
        .map(|t| {
            if t.angle().is_some() {
                return t.clone();
            }
            t.clone().with_angle(std::f64::consts::TAU, true).unwrap_or_else(|_| t.clone())
        })
        .collect()
}

/// One fitted (ordering, start) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub permutation: Vec<usize>,
    pub start: usize,
    pub loglik: f64,
    pub bic: f64,
    pub converged: bool,
    pub degenerate: bool,
}

/// Best fit over orderings and starts, with every candidate's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub report: FitReport,
    pub permutation: Vec<usize>,
    pub start: usize,
    pub candidates: Vec<Candidate>,
    /// Classes merged into a neighbour in the winning start.
    pub merged: Vec<usize>,
}

/// Seed of start `s`.
pub fn start_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_add((s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Fits `templates` from `cfg.n_starts` partitions (and every distinct
/// ordering when `cfg.permutation_search`), returning the non-degenerate
/// fit with the largest log-likelihood. Ties go to the earliest ordering,
/// then the earliest start.
pub fn fit_model(templates: &[Component], data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if templates.is_empty() {
        return Err(invalid("components", "need at least one component"));
    }
    cfg.install(|| fit_model_inner(templates, data, cfg))
}

/// Fits every distinct ordering of the component copulas from shared
/// starting partitions and keeps the best.
pub fn permutation_search(templates: &[Component], data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    fit_model(
        templates,
        data,
        &FitConfig {
            permutation_search: true,
            ..cfg.clone()
        },
    )
}

fn fit_model_inner(templates: &[Component], data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    let base = templates.to_vec();
    let templates = if cfg.rotation { with_rotations(templates) } else { base.clone() };
    let warm = cfg.rotation && templates.iter().zip(&base).any(|(t, b)| t.angle().is_some() != b.angle().is_some());
    let k = templates.len();
    let perms = if cfg.permutation_search {
        distinct_permutations(&templates)
    } else {
        vec![(0..k).collect()]
    };
    let partitions = (0..cfg.n_starts)
        .map(|s| partition(data, k, start_seed(cfg.seed, s), cfg.partition))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..perms.len())
        .flat_map(|pi| (0..cfg.n_starts).map(move |s| (pi, s)))
        .collect();
    let results: Vec<Result<(FitReport, Vec<usize>)>> = tasks
        .par_iter()
        .map(|&(pi, s)| {
            if warm {
                return warm_rotation_fit(&base, &templates, &perms[pi], data, &partitions[s], cfg);
            }
            let ordered: Vec<Component> = perms[pi].iter().map(|&i| templates[i].clone()).collect();
            let start = ifm_start(data, &partitions[s], &ordered, cfg)?;
            Ok((fit(&start.model, data, cfg)?, start.merged))
        })
        .collect();
    let mut candidates = Vec::new();
    let mut best: Option<usize> = None;
    let mut first_err = None;
    for (t, r) in results.iter().enumerate() {
        let (pi, s) = tasks[t];
        match r {
            Ok((rep, _)) => {
                candidates.push(Candidate {
                    permutation: perms[pi].clone(),
                    start: s,
                    loglik: rep.loglik,
                    bic: rep.bic,
                    converged: rep.converged,
                    degenerate: rep.degenerate,
                });
                let better = match best {
                    None => true,
                    Some(b) => {
                        let cur = &results[b].as_ref().expect("ok").0;
                        (cur.degenerate && !rep.degenerate)
                            || (cur.degenerate == rep.degenerate && rep.loglik > cur.loglik)
                    }
                };
                if better {
                    best = Some(t);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e.to_string());
                }
            }
        }
    }
    let Some(b) = best else {
        return Err(Error::Partition(format!(
            "no start could be fitted: {}",
            first_err.unwrap_or_default()
        )));
    };
    let (pi, s) = tasks[b];
    let (report, merged) = results.into_iter().nth(b).expect("index").expect("ok");
    Ok(FitOutcome {
        report,
        permutation: perms[pi].clone(),
        start: s,
        candidates,
        merged,
    })
}

/// Fits the unrotated templates first, then frees the added angles at zero
/// and refits from there. Starting every angle from an IFM partition tends
/// to settle on near-independence components at arbitrary angles.
fn warm_rotation_fit(
    base: &[Component],
    rotated: &[Component],
    perm: &[usize],
    data: &Dataset,
    part: &Partition,
    cfg: &FitConfig,
) -> Result<(FitReport, Vec<usize>)> {
    let ordered: Vec<Component> = perm.iter().map(|&i| base[i].clone()).collect();
    let start = ifm_start(data, part, &ordered, cfg)?;
    let plain = FitConfig {
        rotation: false,
        ..cfg.clone()
    };
    let first = fit(&start.model, data, &plain)?;
    let comps = first
        .model
        .components()
        .iter()
        .zip(perm)
        .map(|(c, &i)| match (rotated[i].angle(), c.angle()) {
            (Some(_), None) => c.clone().with_angle(std::f64::consts::TAU, true),
            _ => Ok(c.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let second = MixtureModel::new(first.model.weights().to_vec(), comps)?;
    Ok((fit(&second, data, cfg)?, start.merged))
}

// ---- sequential starts for count data ------------------------------------------------

/// Appends `global` (the one-component fit) with weight
/// [`SEQUENTIAL_WEIGHT`] to a fitted mixture, scaling the other weights.
pub fn sequential_init_discrete(previous: &MixtureModel, global: &Component) -> Result<MixtureModel> {
    let mut weights: Vec<f64> = previous.weights().iter().map(|w| w * (1.0 - SEQUENTIAL_WEIGHT)).collect();
    weights.push(SEQUENTIAL_WEIGHT);
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut comps = previous.components().to_vec();
    comps.push(global.clone());
    MixtureModel::new(weights, comps)
}

/// Fits `k = 1..=k_max` components, each started from the previous fit
/// plus the one-component fit (see [`sequential_init_discrete`]).
pub fn fit_sequential(template: &Component, data: &Dataset, k_max: usize, cfg: &FitConfig) -> Result<Vec<FitReport>> {
    cfg.validate()?;
    if k_max == 0 {
        return Err(invalid("k", "must be >= 1"));
    }
    let cfg = if template.is_discrete() {
        FitConfig {
            algorithm: Algorithm::Em,
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    cfg.install(|| {
        let one = Partition::new(vec![1; data.n()], 1)?;
        let start = ifm_start(data, &one, std::slice::from_ref(template), &cfg)?;
        let first = fit(&start.model, data, &cfg)?;
        let global = first.model.components()[0].clone();
        let mut out = vec![first];
        for _ in 2..=k_max {
            let prev = &out.last().expect("nonempty").model;
            let start = sequential_init_discrete(prev, &global)?;
            out.push(fit(&start, data, &cfg)?);
        }
        Ok(out)
    })
}
