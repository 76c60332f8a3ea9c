use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use copmix::copulas::CopulaFamily;
use copmix::datakit::{
    make_cognitive_analog, make_example1, read_csv, sample_mixture, write_csv, ColumnDomain, Dataset, COGNITIVE_TRIALS,
};
use copmix::eval::{adjusted_rand, bic, contour_grid, misclassification, GridSpec};
use copmix::gausquad::CorrStructure;
use copmix::init::{fit_model, Candidate};
use copmix::marginals::MarginalFamily;
use copmix::mixture::{Algorithm, FitConfig};
use copmix::spec::ModelSpec;
use copmix::Error;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "copmix", version, about = "Copula mixture models for clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Four bivariate groups with Clayton and survival-Clayton dependence.
    Example1,
    /// Six trivariate Binomial groups with Gaussian-copula dependence.
    Cognitive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Em,
    Ecm,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset from a preset or a fully specified model.
    Simulate {
        #[arg(long, conflicts_with = "model")]
        preset: Option<Preset>,
        /// Model spec JSON with every parameter fixed.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sample size for `--model`.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit a mixture to a CSV file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Model spec JSON; `"fit"` marks free parameters.
        #[arg(long, conflicts_with = "preset")]
        model: Option<PathBuf>,
        /// Built-in spec: `example1` (Gumbel, Gumbel, Clayton, Clayton) or
        /// `cognitive` (six exchangeable Gaussian components).
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, value_enum, default_value = "em")]
        algorithm: AlgorithmArg,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1)]
        starts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Give every eligible component a free sample-space angle.
        #[arg(long)]
        rotations: bool,
        /// Try every distinct ordering of the component copulas.
        #[arg(long)]
        permute: bool,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Output directory for report.json, assignments.csv and manifest.json.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compare a report's assignments with the labels of a CSV file.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Density of a fitted model on a grid over two coordinates.
    Contour {
        #[arg(long)]
        report: PathBuf,
        /// Two 0-based coordinates, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0,1")]
        coords: Vec<usize>,
        /// Points per axis.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Half width of the window in marginal standard deviations.
        #[arg(long, default_value_t = 4.0)]
        half_width: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => Failure::Io(e.to_string()),
            Error::Csv(ref c) if c.is_io_error() => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    let read = read_csv(path)?;
    for w in &read.warnings {
        eprintln!("warning: {w}");
    }
    Ok(read.dataset)
}

fn load_spec(path: &Path) -> Result<ModelSpec, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn preset_spec(preset: Preset) -> ModelSpec {
    match preset {
        Preset::Example1 => ModelSpec::example1(),
        Preset::Cognitive => ModelSpec::binomial_gaussian(&COGNITIVE_TRIALS, 6, CorrStructure::Exchangeable),
    }
}

/// Manifest written next to every output. `argv` re-runs the command.
#[derive(Serialize, Deserialize)]
struct Manifest {
    command: String,
    version: String,
    seed: Option<u64>,
    argv: Vec<String>,
    spec: Option<serde_json::Value>,
    outputs: Vec<String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    path: &Path,
    command: &str,
    seed: Option<u64>,
    spec: Option<serde_json::Value>,
    outputs: &[&Path],
) -> Result<(), Failure> {
    let m = Manifest {
        command: command.into(),
        version: VERSION.into(),
        seed,
        argv: std::env::args().skip(1).collect(),
        spec,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(path, &m)
}

fn simulate(preset: Option<Preset>, model: Option<&Path>, n: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let (data, spec) = match (preset, model) {
        (Some(Preset::Example1), None) => (make_example1(seed), json!({"preset": "example1"})),
        (Some(Preset::Cognitive), None) => (make_cognitive_analog(seed), json!({"preset": "cognitive"})),
        (None, Some(path)) => {
            let spec = load_spec(path)?;
            let model = spec.to_model()?;
            (sample_mixture(&model, n, seed)?, json!({"model": spec, "n": n}))
        }
        _ => return Err(Failure::Usage("give exactly one of --preset or --model".into())),
    };
    write_csv(&data, out).map_err(|e| io_err(out, e))?;
    write_manifest(&manifest_path(out), "simulate", Some(seed), Some(spec), &[out])?;
    eprintln!("wrote {} rows to {}", data.n(), out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Report {
    version: String,
    loglik: f64,
    bic: f64,
    q: usize,
    n: usize,
    iterations: usize,
    converged: bool,
    degenerate: bool,
    flagged: Vec<usize>,
    permutation: Vec<usize>,
    start: usize,
    trace: Vec<f64>,
    model: ModelSpec,
    assignments: Vec<usize>,
    candidates: Vec<CandidateRow>,
}

#[derive(Serialize, Deserialize)]
struct CandidateRow {
    permutation: Vec<usize>,
    start: usize,
    loglik: f64,
    bic: f64,
    converged: bool,
    degenerate: bool,
}

impl From<&Candidate> for CandidateRow {
    fn from(c: &Candidate) -> Self {
        Self {
            permutation: c.permutation.clone(),
            start: c.start,
            loglik: c.loglik,
            bic: c.bic,
            converged: c.converged,
            degenerate: c.degenerate,
        }
    }
}

// k = 1 with an independence copula and Normal marginals has a closed form
fn closed_form_check(spec: &ModelSpec, report: &Report, data: &Dataset) {
    let [c] = spec.components.as_slice() else { return };
    if c.copula.family != CopulaFamily::Independence || c.angle.is_some() {
        return;
    }
    if c.marginals.iter().any(|m| m.family != MarginalFamily::Normal) {
        return;
    }
    let fitted = &report.model.components[0];
    let mut worst = 0.0f64;
    for (t, m) in fitted.marginals.iter().enumerate() {
        let copmix::spec::ParamSpec::Values(v) = &m.params else { return };
        let col = data.column(t);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max((v[0] - mean).abs()).max((v[1] - sd).abs());
    }
    eprintln!("closed-form check: max |fitted - sample moment| = {worst:.3e}");
}

fn run_fit(data_path: &Path, spec: ModelSpec, cfg: FitConfig, out: &Path) -> Result<bool, Failure> {
    let data = load_data(data_path)?;
    let templates = spec.templates()?;
    let outcome = fit_model(&templates, &data, &cfg)?;
    let r = &outcome.report;
    let report = Report {
        version: VERSION.into(),
        loglik: r.loglik,
        bic: r.bic,
        q: r.q,
        n: r.n,
        iterations: r.iterations,
        converged: r.converged,
        degenerate: r.degenerate,
        flagged: r.flagged.clone(),
        permutation: outcome.permutation.clone(),
        start: outcome.start,
        trace: r.trace.clone(),
        model: ModelSpec::from_model(&r.model),
        assignments: r.assignments.clone(),
        candidates: outcome.candidates.iter().map(CandidateRow::from).collect(),
    };
    closed_form_check(&spec, &report, &data);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let report_path = out.join("report.json");
    let assign_path = out.join("assignments.csv");
    write_json(&report_path, &report)?;
    let mut text = String::from("row,component\n");
    for (i, a) in r.assignments.iter().enumerate() {
        text.push_str(&format!("{},{a}\n", i + 1));
    }
    write_text(&assign_path, &text)?;
    let spec_json = json!({"model": spec, "config": cfg});
    write_manifest(
        &out.join("manifest.json"),
        "fit",
        Some(cfg.seed),
        Some(spec_json),
        &[&report_path, &assign_path],
    )?;
    eprintln!(
        "loglik {:.4}  BIC {:.4}  q {}  iterations {}{}",
        r.loglik,
        r.bic,
        r.q,
        r.iterations,
        if r.converged { "" } else { "  (not converged)" }
    );
    Ok(r.converged)
}

fn load_report(path: &Path) -> Result<Report, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn evaluate(report_path: &Path, truth: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let report = load_report(report_path)?;
    let data = load_data(truth)?;
    let labels = data
        .labels()
        .ok_or_else(|| Failure::Usage(format!("{}: no `label` column", truth.display())))?;
    let ari = adjusted_rand(&report.assignments, labels)?;
    let mis = misclassification(&report.assignments, labels)?;
    let metrics = json!({
        "ari": ari,
        "misclassification": mis,
        "bic": bic(report.loglik, report.q, report.n),
        "loglik": report.loglik,
        "n": report.n,
    });
    match out {
        Some(path) => {
            write_json(path, &metrics)?;
            write_manifest(&manifest_path(path), "evaluate", None, None, &[path])?;
        }
        None => println!("{}", serde_json::to_string_pretty(&metrics).expect("json")),
    }
    Ok(())
}

fn contour(report_path: &Path, coords: &[usize], grid: usize, half_width: f64, out: &Path) -> Result<(), Failure> {
    let report = load_report(report_path)?;
    let model = report.model.to_model()?;
    let coords = [coords[0], coords[1]];
    let spec = GridSpec::around(&model, coords, half_width, grid)?;
    let g = contour_grid(&model, coords, &spec)?;
    let file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    g.write_csv(std::io::BufWriter::new(file))?;
    write_manifest(
        &manifest_path(out),
        "contour",
        None,
        Some(json!({"coords": coords, "grid": grid, "half_width": half_width})),
        &[out],
    )?;
    eprintln!("grid mass {:.6}", g.mass(&spec));
    Ok(())
}

fn check_domains(spec: &ModelSpec, data: &Dataset) -> Result<(), Failure> {
    let Some(c) = spec.components.first() else { return Ok(()) };
    if c.marginals.len() != data.p() {
        return Err(Failure::Usage(format!(
            "model has {} marginals but the data has {} columns",
            c.marginals.len(),
            data.p()
        )));
    }
    for (t, (m, d)) in c.marginals.iter().zip(data.domains()).enumerate() {
        let ok = match (m.family, d) {
            (MarginalFamily::Binomial { trials }, ColumnDomain::Count { trials: m }) => trials == *m,
            (MarginalFamily::Binomial { .. }, _) | (_, ColumnDomain::Count { .. }) => false,
            _ => true,
        };
        if !ok {
            return Err(Failure::Usage(format!("column {} does not match marginal {t}", data.names()[t])));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Simulate {
            preset,
            model,
            n,
            seed,
            out,
        } => simulate(preset, model.as_deref(), n, seed, &out).map(|_| ExitCode::SUCCESS),
        Command::Fit {
            data,
            model,
            preset,
            algorithm,
            tol,
            max_iter,
            starts,
            seed,
            rotations,
            permute,
            jobs,
            out,
        } => {
            let spec = match (model, preset) {
                (Some(path), None) => load_spec(&path)?,
                (None, Some(p)) => preset_spec(p),
                _ => return Err(Failure::Usage("give exactly one of --model or --preset".into())),
            };
            spec.templates()?;
            check_domains(&spec, &load_data(&data)?)?;
            let cfg = FitConfig {
                algorithm: match algorithm {
                    AlgorithmArg::Em => Algorithm::Em,
                    AlgorithmArg::Ecm => Algorithm::Ecm,
                },
                rel_tol: tol,
                max_iter,
                n_starts: starts,
                seed,
                rotation: rotations,
                permutation_search: permute,
                jobs,
                ..FitConfig::default()
            };
            cfg.validate()?;
            let converged = run_fit(&data, spec, cfg, &out)?;
            Ok(if converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Evaluate { report, truth, out } => evaluate(&report, &truth, out.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Contour {
            report,
            coords,
            grid,
            half_width,
            out,
        } => contour(&report, &coords, grid, half_width, &out).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
