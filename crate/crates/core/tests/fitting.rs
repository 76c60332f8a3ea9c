use std::f64::consts::PI;

use copmix::copulas::{CopulaFamily, CopulaModel, Rotation};
use copmix::datakit::{example1_generators, make_cognitive_analog, make_example1, sample_mixture, Dataset};
use copmix::gausquad::{CorrStructure, CorrelationMatrix};
use copmix::init::{fit_model, ifm_start, Partition};
use copmix::marginals::Marginal;
use copmix::mixture::{
    e_step, ecm_step, fit, m_step_full, m_step_pi, weighted_component_loglik, Algorithm, Component, FitConfig,
    MixtureModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal2(m: [f64; 2], s: [f64; 2]) -> Vec<Marginal> {
    vec![Marginal::normal(m[0], s[0]).unwrap(), Marginal::normal(m[1], s[1]).unwrap()]
}

fn expected_complete(model: &MixtureModel, data: &Dataset, w: &[Vec<f64>], cfg: &FitConfig) -> f64 {
    let pi = m_step_pi(w).unwrap();
    let mut total = 0.0;
    for (j, comp) in model.components().iter().enumerate() {
        let wj: Vec<f64> = w.iter().map(|r| r[j]).collect();
        total += weighted_component_loglik(comp, data, &wj, cfg).unwrap();
        total += wj.iter().sum::<f64>() * pi[j].ln();
    }
    total
}

fn random_example1_start(rng: &mut ChaCha8Rng) -> MixtureModel {
    let mut comps = Vec::new();
    for j in 0..4 {
        let cop = if j < 2 {
            CopulaModel::gumbel(rng.random_range(1.1..4.0)).unwrap()
        } else {
            CopulaModel::clayton(rng.random_range(0.3..5.0)).unwrap()
        };
        let m = [rng.random_range(-1.0..4.0), rng.random_range(1.0..7.0)];
        let s = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        comps.push(Component::new(cop, normal2(m, s), None).unwrap());
    }
    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    MixtureModel::new(raw.iter().map(|r| r / total).collect(), comps).unwrap()
}

#[test]
fn m_step_objective_never_decreases_over_random_restarts() {
    let data = make_example1(11);
    let cfg = FitConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in 0..50 {
        let model = random_example1_start(&mut rng);
        let w = e_step(&model, &data).unwrap();
        let before = expected_complete(&model, &data, &w, &cfg);
        let after_em = m_step_full(&model, &data, &w, &cfg).unwrap();
        let em = expected_complete(&after_em, &data, &w, &cfg);
        assert!(em >= before - 1e-9 * before.abs(), "restart {r}: {before} -> {em}");
        let after_ecm = ecm_step(&model, &data, &w, &cfg).unwrap();
        let ecm = expected_complete(&after_ecm, &data, &w, &cfg);
        assert!(ecm >= before - 1e-9 * before.abs(), "restart {r}: {before} -> {ecm}");
    }
}

#[test]
fn copula_step_recovers_group3_clayton() {
    let data = make_example1(3);
    let idx: Vec<usize> = (0..data.n()).filter(|&i| data.labels().unwrap()[i] == 3).collect();
    let g3 = data.subset(&idx).unwrap();
    let comp = Component::new(CopulaModel::clayton(1.0).unwrap(), normal2([2.79, 4.77], [1.0, 1.05]), None)
        .unwrap()
        .with_marginal_fixed(0, true)
        .unwrap()
        .with_marginal_fixed(1, true)
        .unwrap();
    let model = MixtureModel::new(vec![1.0], vec![comp]).unwrap();
    let w = vec![vec![1.0]; g3.n()];
    let out = ecm_step(&model, &g3, &w, &FitConfig::default()).unwrap();
    let psi = out.components()[0].copula().params()[0];
    assert!((psi - 3.56).abs() <= 0.6, "psi = {psi}");
}

#[test]
fn fixed_half_turn_matches_survival_clayton() {
    let data = make_example1(7);
    let [g3, g4] = example1_generators();
    let shift = [-0.455, -2.025];
    let mean = |c: &Component, t: usize| c.marginals()[t].params()[0];
    let sd = |c: &Component, t: usize| c.marginals()[t].params()[1];
    let m3 = [mean(&g3, 0), mean(&g3, 1)];
    let m4 = [mean(&g4, 0), mean(&g4, 1)];
    let s3 = [sd(&g3, 0), sd(&g3, 1)];
    let s4 = [sd(&g4, 0), sd(&g4, 1)];
    let clayton = |t: f64| CopulaModel::clayton(t).unwrap();
    let survival = |t: f64| clayton(t).with_rotation(Rotation::R180).unwrap();
    let c1 = Component::new(clayton(2.0), normal2([m3[0] + shift[0], m3[1] + shift[1]], s3), None).unwrap();
    let c3 = Component::new(clayton(2.0), normal2(m3, s3), None).unwrap();
    let a = MixtureModel::new(
        vec![0.25; 4],
        vec![
            c1.clone(),
            Component::new(survival(2.0), normal2([m4[0] + shift[0], m4[1] + shift[1]], s4), None).unwrap(),
            c3.clone(),
            Component::new(survival(2.0), normal2(m4, s4), None).unwrap(),
        ],
    )
    .unwrap();
    // a half turn maps x to -x, so the rotated components carry negated means
    let turned = |m: [f64; 2], s: [f64; 2]| {
        Component::new(clayton(2.0), normal2([-m[0], -m[1]], s), None)
            .unwrap()
            .with_angle(PI, false)
            .unwrap()
    };
    let b = MixtureModel::new(
        vec![0.25; 4],
        vec![
            c1,
            turned([m4[0] + shift[0], m4[1] + shift[1]], s4),
            c3,
            turned(m4, s4),
        ],
    )
    .unwrap();
    let cfg = FitConfig {
        algorithm: Algorithm::Ecm,
        ..FitConfig::default()
    };
    let la = copmix::mixture::loglik(&a, &data).unwrap();
    let lb = copmix::mixture::loglik(&b, &data).unwrap();
    assert!((la - lb).abs() < 1e-9, "{la} vs {lb}");
    let ra = fit(&a, &data, &cfg).unwrap();
    let rb = fit(&b, &data, &cfg).unwrap();
    assert_eq!(ra.q, rb.q);
    assert!((ra.bic - rb.bic).abs() < 1e-4, "{} vs {}", ra.bic, rb.bic);
}

fn two_blobs(seed: u64) -> Dataset {
    let comps = vec![
        Component::new(CopulaModel::clayton(2.0).unwrap(), normal2([0.0, 0.0], [1.0, 1.5]), None).unwrap(),
        Component::new(CopulaModel::gumbel(1.8).unwrap(), normal2([4.0, 3.0], [0.8, 1.0]), None).unwrap(),
    ];
    let model = MixtureModel::new(vec![0.45, 0.55], comps).unwrap();
    sample_mixture(&model, 300, seed).unwrap()
}

fn blob_templates() -> Vec<Component> {
    vec![
        Component::new(CopulaModel::clayton(1.0).unwrap(), normal2([0.0, 0.0], [1.0, 1.0]), None).unwrap(),
        Component::new(CopulaModel::gumbel(1.5).unwrap(), normal2([0.0, 0.0], [1.0, 1.0]), None).unwrap(),
    ]
}

#[test]
fn multi_start_result_ignores_worker_count() {
    let data = two_blobs(8);
    let base = FitConfig {
        n_starts: 3,
        seed: 17,
        permutation_search: true,
        ..FitConfig::default()
    };
    let one = fit_model(&blob_templates(), &data, &FitConfig { jobs: 1, ..base.clone() }).unwrap();
    let three = fit_model(&blob_templates(), &data, &FitConfig { jobs: 3, ..base }).unwrap();
    assert_eq!(one.report, three.report);
    assert_eq!(one.candidates, three.candidates);
    assert_eq!(one.candidates.len(), 6);
    for c in &one.candidates {
        assert!(one.report.loglik >= c.loglik || c.degenerate);
    }
}

fn domain_ok(c: &Component) {
    let cop = c.copula();
    let structure = cop.structure().unwrap_or(CorrStructure::Exchangeable);
    CopulaModel::from_params(cop.family(), cop.dim(), structure, &cop.params()).expect("copula in domain");
    for m in c.marginals() {
        assert!(m.params().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn ifm_start_fuzz_stays_in_domain() {
    let cont = make_example1(2);
    let counts = make_cognitive_analog(2).subset(&(0..180).collect::<Vec<_>>()).unwrap();
    let n2 = normal2([0.0, 0.0], [1.0, 1.0]);
    let bins = |c: CopulaModel| {
        Component::new(
            c,
            [13, 8, 19].iter().map(|&m| Marginal::binomial(m, 0.5).unwrap()).collect(),
            None,
        )
        .unwrap()
    };
    let continuous = [
        Component::new(CopulaModel::gumbel(1.5).unwrap(), n2.clone(), None).unwrap(),
        Component::new(CopulaModel::clayton(1.0).unwrap(), n2.clone(), None).unwrap(),
        Component::new(
            CopulaModel::clayton(1.0).unwrap().with_rotation(Rotation::R90).unwrap(),
            n2.clone(),
            None,
        )
        .unwrap(),
        Component::new(CopulaModel::frank(2, -2.0).unwrap(), n2.clone(), None).unwrap(),
        Component::new(CopulaModel::independence(2).unwrap(), n2.clone(), None).unwrap(),
        Component::new(CopulaModel::gaussian(CorrelationMatrix::exchangeable(2, 0.1).unwrap()), n2.clone(), None)
            .unwrap(),
        Component::new(CopulaModel::clayton(1.0).unwrap(), n2, None)
            .unwrap()
            .with_angle(1.0, true)
            .unwrap(),
    ];
    let discrete = [
        bins(CopulaModel::frank(3, 1.0).unwrap()),
        bins(CopulaModel::nested_frank(0.5, 1.0).unwrap()),
        bins(CopulaModel::gaussian(CorrelationMatrix::exchangeable(3, 0.3).unwrap())),
        bins(CopulaModel::gaussian(CorrelationMatrix::unstructured(3, &[0.1, 0.2, 0.3]).unwrap())),
    ];
    let cfg = FitConfig {
        inner_max_evals: 150,
        ..FitConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let is_discrete = case % 4 == 3;
        let (data, pool): (&Dataset, &[Component]) =
            if is_discrete { (&counts, &discrete) } else { (&cont, &continuous) };
        let k = rng.random_range(1..=3);
        let labels: Vec<usize> = (0..data.n())
            .map(|i| if i < k { i + 1 } else { rng.random_range(1..=k) })
            .collect();
        let part = Partition::new(labels, k).unwrap();
        let templates: Vec<Component> = (0..k).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let start = ifm_start(data, &part, &templates, &cfg).unwrap();
        let total: f64 = start.model.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for c in start.model.components() {
            domain_ok(c);
        }
        assert!(copmix::mixture::loglik(&start.model, data).unwrap().is_finite(), "case {case}");
    }
}

#[test]
fn generator_density_integrates_to_one() {
    let [g3, g4] = example1_generators();
    let model = MixtureModel::new(vec![0.5, 0.5], vec![g3, g4]).unwrap();
    let spec = copmix::eval::GridSpec::around(&model, [0, 1], 6.0, 200).unwrap();
    let grid = copmix::eval::contour_grid(&model, [0, 1], &spec).unwrap();
    assert!((grid.mass(&spec) - 1.0).abs() < 0.01);
    assert_eq!(CopulaFamily::Clayton, model.components()[0].copula().family());
}
