//! Datasets, CSV input/output and synthetic data generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copulas::{CopulaModel, Rotation};
use crate::error::{Error, Result};
use crate::gausquad::CorrelationMatrix;
use crate::marginals::Marginal;
use crate::mixture::{Component, MixtureModel};

/// Domain of one data column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnDomain {
    Continuous,
    /// Integers in `0..=trials`.
    Count { trials: u32 },
}

impl ColumnDomain {
    pub fn is_count(&self) -> bool {
        matches!(self, ColumnDomain::Count { .. })
    }

    fn header_suffix(&self) -> String {
        match self {
            ColumnDomain::Continuous => "cont".into(),
            ColumnDomain::Count { trials } => format!("count:{trials}"),
        }
    }
}

/// An `n x p` data matrix with per-column domains and optional true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    domains: Vec<ColumnDomain>,
    values: Vec<f64>,
    n: usize,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        domains: Vec<ColumnDomain>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let p = domains.len();
        if names.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: names.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::Domain("a dataset needs at least one row".into()));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::DimensionMismatch {
                    expected: rows.len(),
                    got: l.len(),
                });
            }
        }
        let mut values = Vec::with_capacity(rows.len() * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: row.len(),
                });
            }
            for (t, (&x, d)) in row.iter().zip(&domains).enumerate() {
                check_value(x, d).map_err(|message| Error::Parse {
                    row: i + 1,
                    column: t + 1,
                    message,
                })?;
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            names,
            domains,
            values,
            n: rows.len(),
            labels,
        })
    }

    /// Continuous dataset with generated column names `x1, x2, ...`.
    pub fn continuous(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        Self::new(
            (1..=p).map(|t| format!("x{t}")).collect(),
            vec![ColumnDomain::Continuous; p],
            rows,
            None,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.domains.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.p())
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.rows().map(|r| r[t]).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn domains(&self) -> &[ColumnDomain] {
        &self.domains
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n {
                return Err(Error::DimensionMismatch {
                    expected: self.n,
                    got: l.len(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Rows selected by `idx`, labels carried along.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let rows = idx.iter().map(|&i| self.row(i).to_vec()).collect();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Dataset::new(self.names.clone(), self.domains.clone(), rows, labels)
    }

    /// `z = shift + scale * x` column-wise; continuous columns only.
    pub fn affine(&self, shift: &[f64], scale: &[f64]) -> Result<Dataset> {
        if shift.len() != self.p() || scale.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: shift.len().min(scale.len()),
            });
        }
        if self.domains.iter().any(|d| d.is_count()) {
            return Err(Error::Unsupported("affine maps of count columns".into()));
        }
        let rows = self
            .rows()
            .map(|r| r.iter().enumerate().map(|(t, x)| shift[t] + scale[t] * x).collect())
            .collect();
        Dataset::new(self.names.clone(), self.domains.clone(), rows, self.labels.clone())
    }
}

fn check_value(x: f64, d: &ColumnDomain) -> std::result::Result<(), String> {
    if !x.is_finite() {
        return Err(format!("non-finite value {x}"));
    }
    if let ColumnDomain::Count { trials } = d {
        if x.fract() != 0.0 || x < 0.0 || x > *trials as f64 {
            return Err(format!("count value {x} is not an integer in 0..={trials}"));
        }
    }
    Ok(())
}

// ---- CSV ---------------------------------------------------------------------

/// Outcome of [`read_csv`]: the data plus any non-fatal warnings.
#[derive(Debug)]
pub struct CsvRead {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

fn parse_header(field: &str) -> std::result::Result<(String, ColumnDomain, Option<String>), String> {
    let mut parts = field.split(':');
    let name = parts.next().unwrap_or("").trim().to_string();
    match parts.next().map(str::trim) {
        None => Ok((
            name.clone(),
            ColumnDomain::Continuous,
            Some(format!("column `{name}` has no domain annotation; treating it as continuous")),
        )),
        Some("cont") => Ok((name, ColumnDomain::Continuous, None)),
        Some("count") => {
            let m = parts
                .next()
                .ok_or_else(|| format!("column `{name}`: count annotation needs an index, e.g. `{name}:count:8`"))?;
            let trials = m
                .trim()
                .parse::<u32>()
                .map_err(|_| format!("column `{name}`: bad count index `{m}`"))?;
            Ok((name, ColumnDomain::Count { trials }, None))
        }
        Some(other) => Err(format!("column `{name}`: unknown domain `{other}`")),
    }
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvRead> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv_from(file)
}

pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<CsvRead> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut names = Vec::new();
    let mut domains = Vec::new();
    let mut warnings = Vec::new();
    let mut label_col = None;
    let mut value_cols = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if h == "label" {
            label_col = Some(c);
            continue;
        }
        let (name, dom, warn) = parse_header(h).map_err(|message| Error::Parse {
            row: 0,
            column: c + 1,
            message,
        })?;
        names.push(name);
        domains.push(dom);
        value_cols.push(c);
        warnings.extend(warn);
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = r + 1;
        let mut row = Vec::with_capacity(value_cols.len());
        for &c in &value_cols {
            let field = rec.get(c).unwrap_or("");
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: c + 1,
                message: format!("cannot parse `{field}` as a number"),
            })?;
            row.push(x);
        }
        if let Some(lc) = label_col {
            let field = rec.get(lc).unwrap_or("");
            let l: usize = field.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: lc + 1,
                message: format!("cannot parse label `{field}`"),
            })?;
            labels.push(l);
        }
        rows.push(row);
    }
    let labels = label_col.map(|_| labels);
    let dataset = Dataset::new(names, domains, rows, labels)?;
    Ok(CsvRead { dataset, warnings })
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(data, file)
}

pub fn write_csv_to<W: std::io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = data
        .names
        .iter()
        .zip(&data.domains)
        .map(|(n, d)| format!("{n}:{}", d.header_suffix()))
        .collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..data.n {
        let mut rec: Vec<String> = data
            .row(i)
            .iter()
            .zip(&data.domains)
            .map(|(x, d)| match d {
                ColumnDomain::Count { .. } => format!("{}", *x as i64),
                ColumnDomain::Continuous => format!("{x:?}"),
            })
            .collect();
        if let Some(l) = &data.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ---- sampling ------------------------------------------------------------------

/// Draws `n` observations from `model`. Labels are 1-based component indices.
pub fn sample_mixture(model: &MixtureModel, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.dim();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let cum: Vec<f64> = model
        .weights()
        .iter()
        .scan(0.0, |s, w| {
            *s += w;
            Some(*s)
        })
        .collect();
    for _ in 0..n {
        let v: f64 = rng.random::<f64>() * cum[cum.len() - 1];
        let j = cum.iter().position(|&c| v < c).unwrap_or(cum.len() - 1);
        let x = sample_component(&model.components()[j], &mut rng)?;
        rows.push(x);
        labels.push(j + 1);
    }
    let domains: Vec<ColumnDomain> = model.components()[0]
        .marginals()
        .iter()
        .map(|m| match m {
            Marginal::Binomial { trials, .. } => ColumnDomain::Count { trials: *trials },
            _ => ColumnDomain::Continuous,
        })
        .collect();
    Dataset::new(
        (1..=p).map(|t| format!("x{t}")).collect(),
        domains,
        rows,
        Some(labels),
    )
}

/// One draw from a component: copula sample, marginal quantiles, then the
/// rotation `x = O(omega) z` when an angle is present.
pub fn sample_component<R: Rng + ?Sized>(comp: &Component, rng: &mut R) -> Result<Vec<f64>> {
    let u = comp.copula().sample_one(rng);
    let mut z = Vec::with_capacity(u.len());
    for (m, &ut) in comp.marginals().iter().zip(&u) {
        z.push(m.quantile(ut)?);
    }
    if let Some(a) = comp.angle() {
        let (s, c) = a.value.sin_cos();
        let (z1, z2) = (z[0], z[1]);
        z[0] = c * z1 - s * z2;
        z[1] = s * z1 + c * z2;
    }
    Ok(z)
}

// ---- presets -------------------------------------------------------------------

/// Translation applied to groups 3 and 4 to obtain groups 1 and 2.
pub const EXAMPLE1_SHIFT: [f64; 2] = [-0.455, -2.025];
/// Rows per group in [`make_example1`].
pub const EXAMPLE1_GROUP_SIZE: usize = 200;

/// Generating components of groups 3 (Clayton) and 4 (survival Clayton).
pub fn example1_generators() -> [Component; 2] {
    let g3 = Component::new(
        CopulaModel::clayton(3.56).unwrap(),
        vec![Marginal::normal(2.79, 1.00).unwrap(), Marginal::normal(4.77, 1.05).unwrap()],
        None,
    )
    .unwrap();
    let g4 = Component::new(
        CopulaModel::clayton(3.24).unwrap().with_rotation(Rotation::R180).unwrap(),
        vec![Marginal::normal(0.78, 1.02).unwrap(), Marginal::normal(5.77, 1.07).unwrap()],
        None,
    )
    .unwrap();
    [g3, g4]
}

/// Four-group bivariate benchmark: groups 3 and 4 are drawn from a Clayton
/// and a survival Clayton component with Normal marginals; groups 1 and 2
/// are exact copies of them translated by [`EXAMPLE1_SHIFT`].
/// Rows are ordered by group; labels are 1..=4.
pub fn make_example1(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [g3, g4] = example1_generators();
    let draw = |c: &Component, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..EXAMPLE1_GROUP_SIZE)
            .map(|_| sample_component(c, rng).expect("valid generator"))
            .collect()
    };
    let rows3 = draw(&g3, &mut rng);
    let rows4 = draw(&g4, &mut rng);
    let shift = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| vec![r[0] + EXAMPLE1_SHIFT[0], r[1] + EXAMPLE1_SHIFT[1]])
            .collect()
    };
    let mut rows = shift(&rows3);
    rows.extend(shift(&rows4));
    rows.extend(rows3);
    rows.extend(rows4);
    let labels = (1..=4).flat_map(|g| std::iter::repeat_n(g, EXAMPLE1_GROUP_SIZE)).collect();
    Dataset::new(
        vec!["x1".into(), "x2".into()],
        vec![ColumnDomain::Continuous; 2],
        rows,
        Some(labels),
    )
    .expect("finite generated data")
}

/// Binomial indices of the three count columns of the cognitive analog.
pub const COGNITIVE_TRIALS: [u32; 3] = [13, 8, 19];
/// Rows in [`make_cognitive_analog`].
pub const COGNITIVE_N: usize = 536;

/// Generating model of [`make_cognitive_analog`]: six trivariate Binomial
/// components coupled by exchangeable Gaussian copulas.
pub fn cognitive_generator() -> MixtureModel {
    let weights = [0.12, 0.15, 0.18, 0.20, 0.18, 0.17];
    let probs = [
        [0.08, 0.12, 0.06],
        [0.30, 0.55, 0.18],
        [0.55, 0.25, 0.45],
        [0.45, 0.80, 0.70],
        [0.85, 0.55, 0.85],
        [0.95, 0.93, 0.94],
    ];
    let rhos = [0.3, 0.4, 0.35, 0.45, 0.4, 0.3];
    let comps = probs
        .iter()
        .zip(rhos)
        .map(|(pr, rho)| {
            let marg = COGNITIVE_TRIALS
                .iter()
                .zip(pr)
                .map(|(&m, &p)| Marginal::binomial(m, p).unwrap())
                .collect();
            let cop = CopulaModel::gaussian(CorrelationMatrix::exchangeable(3, rho).unwrap());
            Component::new(cop, marg, None).unwrap()
        })
        .collect();
    MixtureModel::new(weights.to_vec(), comps).unwrap()
}

/// Trivariate count data standing in for the fraction-subtraction scores.
pub fn make_cognitive_analog(seed: u64) -> Dataset {
    let ds = sample_mixture(&cognitive_generator(), COGNITIVE_N, seed).expect("valid generator");
    let names = vec!["test1".into(), "test2".into(), "test3".into()];
    let rows = ds.rows().map(|r| r.to_vec()).collect();
    Dataset::new(
        names,
        ds.domains().to_vec(),
        rows,
        ds.labels().map(|l| l.to_vec()),
    )
    .expect("valid counts")
}

/// Pearson correlation of two columns.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::empirical_kendall_tau;
    use crate::mixture::{component_logpmf, loglik, DEFAULT_PMF_FLOOR};

    #[test]
    fn standard_normal_moments() {
        let comp = Component::new(
            CopulaModel::independence(2).unwrap(),
            vec![Marginal::normal(0.0, 1.0).unwrap(); 2],
            None,
        )
        .unwrap();
        let m = MixtureModel::new(vec![1.0], vec![comp]).unwrap();
        let ds = sample_mixture(&m, 100_000, 17).unwrap();
        for t in 0..2 {
            let col = ds.column(t);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() < 0.02 && (sd - 1.0).abs() < 0.02, "{mean} {sd}");
        }
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let m = cognitive_generator();
        let n = 20_000;
        let ds = sample_mixture(&m, n, 3).unwrap();
        let labels = ds.labels().unwrap();
        for (j, &pi) in m.weights().iter().enumerate() {
            let f = labels.iter().filter(|&&l| l == j + 1).count() as f64 / n as f64;
            assert!((f - pi).abs() <= 3.0 * (pi * (1.0 - pi) / n as f64).sqrt(), "{j}: {f} vs {pi}");
        }
    }

    #[test]
    fn example1_shape_and_groups() {
        let ds = make_example1(7);
        assert_eq!(ds.n(), 800);
        assert_eq!(ds.p(), 2);
        let labels = ds.labels().unwrap();
        for g in 1..=4 {
            assert_eq!(labels.iter().filter(|&&l| l == g).count(), 200);
        }
        let g3: Vec<usize> = (400..600).collect();
        let g3 = ds.subset(&g3).unwrap();
        let tau = empirical_kendall_tau(&g3.column(0), &g3.column(1));
        assert!(tau > 0.5, "{tau}");
        let mean = |d: &Dataset, t: usize| d.column(t).iter().sum::<f64>() / d.n() as f64;
        assert!((mean(&g3, 0) - 2.79).abs() < 0.15 && (mean(&g3, 1) - 4.77).abs() < 0.15);
        let g4 = ds.subset(&(600..800).collect::<Vec<_>>()).unwrap();
        assert!((mean(&g4, 0) - 0.78).abs() < 0.15 && (mean(&g4, 1) - 5.77).abs() < 0.15);
        // groups 1 and 2 are exact translated copies
        for i in 0..400 {
            let (a, b) = (ds.row(i), ds.row(i + 400));
            assert_eq!(a[0], b[0] + EXAMPLE1_SHIFT[0]);
            assert_eq!(a[1], b[1] + EXAMPLE1_SHIFT[1]);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(make_example1(11), make_example1(11));
        assert_ne!(make_example1(11), make_example1(12));
        assert_eq!(make_cognitive_analog(4), make_cognitive_analog(4));
    }

    #[test]
    fn cognitive_analog_properties() {
        let ds = make_cognitive_analog(1);
        assert_eq!(ds.n(), COGNITIVE_N);
        for (t, &m) in COGNITIVE_TRIALS.iter().enumerate() {
            assert!(ds.column(t).iter().all(|&x| x >= 0.0 && x <= m as f64 && x.fract() == 0.0));
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let r = pearson(&ds.column(a), &ds.column(b));
            assert!(r > 0.3, "corr({a},{b}) = {r}");
        }
        let ll = loglik(&cognitive_generator(), &ds).unwrap();
        assert!(ll.is_finite());
        let gen = cognitive_generator();
        let comp = &gen.components()[0];
        assert!(component_logpmf(comp, ds.row(0), DEFAULT_PMF_FLOOR).unwrap().is_finite());
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_example1(3).subset(&[0, 5, 401, 799]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back = read_csv_from(&buf[..]).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.dataset, ds);

        let counts = make_cognitive_analog(2).subset(&[0, 1, 2]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&counts, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("test1:count:13,test2:count:8,test3:count:19,label"));
        assert_eq!(read_csv_from(&buf[..]).unwrap().dataset, counts);
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = make_example1(5);
        write_csv(&ds, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap().dataset, ds);
    }

    #[test]
    fn csv_errors_and_warnings() {
        let bad = "a:count:5,b:cont\n1,0.5\n2.5,0.1\n";
        match read_csv_from(bad.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("{other:?}"),
        }
        let bad = "a:count:5\nx\n";
        assert!(matches!(read_csv_from(bad.as_bytes()), Err(Error::Parse { row: 1, column: 1, .. })));
        let plain = "a,b:cont\n1.5,2\n";
        let r = read_csv_from(plain.as_bytes()).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.dataset.domains()[0], ColumnDomain::Continuous);
        assert!(read_csv_from("a:weird\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn affine_map() {
        let ds = make_example1(1);
        let z = ds.affine(&[1.0, -2.0], &[3.0, 0.5]).unwrap();
        assert_eq!(z.row(10)[0], 1.0 + 3.0 * ds.row(10)[0]);
        assert_eq!(z.labels(), ds.labels());
    }

    #[test]
    fn rotated_component_sampling() {
        // a 180 degree sample-space rotation maps x to -x
        let base = Component::new(
            CopulaModel::clayton(2.0).unwrap(),
            vec![Marginal::normal(1.0, 1.0).unwrap(), Marginal::normal(-2.0, 0.5).unwrap()],
            None,
        )
        .unwrap();
        let rot = base.clone().with_angle(std::f64::consts::PI, false).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = sample_component(&base, &mut r1).unwrap();
            let b = sample_component(&rot, &mut r2).unwrap();
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
        }
    }
}
