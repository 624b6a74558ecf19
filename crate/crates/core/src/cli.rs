//! Command-line front end: data generation, fitting, the structure-learning
//! loop, sample-complexity estimates and plot-ready reports.
//!
//! Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure, 4 I/O.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{GeneratorKind, GeneratorSpec, GRID_GAMMA};
use crate::error::{Result, SingError};
use crate::estimate::{fit_map, FitDocument, FitOptions};
use crate::experiments::{variance_bias_study, variance_rows_csv, VarianceStudyConfig};
use crate::graphops::{Graph, OrderingHeuristic};
use crate::linalg::Matrix;
use crate::map::{SparsityPattern, TriangularMap, DEFAULT_QUADRATURE_ORDER};
use crate::precision::estimate_precision;
use crate::samples::SampleSet;
use crate::scaling::n_star;
use crate::sing::{hex, run_sing, SingConfig, TraceLine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SING_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sing", version, about = "Learn conditional-independence graphs with sparse transport maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set and its true graph.
    Gen(GenArgs),
    /// Fit a map with a fixed sparsity and estimate the generalized precision.
    Fit(FitArgs),
    /// Run the iterative structure-learning loop.
    Sing(SingArgs),
    /// Estimate the sample size needed to recover the graph.
    Nstar(NstarArgs),
    /// Export tidy CSVs for plotting.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    /// Modified Rademacher pairs `Y = W X`.
    Modrad,
    /// Stochastic volatility model.
    Sv,
    /// Gaussian with a lattice (or user-given) precision.
    Gaussian,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Number of (X, Y) pairs for `modrad`.
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    /// Time steps for `sv`.
    #[arg(long = "T", default_value_t = 6)]
    pub t: usize,
    /// Hold the persistence fixed for `sv` (drops the `phi` column).
    #[arg(long)]
    pub fixed_phi: Option<f64>,
    /// Lattice side for `gaussian`.
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    /// JSON file with a precision matrix (array of rows) for `gaussian`.
    #[arg(long)]
    pub precision: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the true graph goes next to it as `<stem>.truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Sample CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub beta: usize,
    #[arg(long = "quad-order", default_value_t = DEFAULT_QUADRATURE_ORDER)]
    pub quad_order: usize,
    /// Graph JSON restricting the map; the dense pattern when absent.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Variable ordering applied to `--graph`.
    #[arg(long, default_value_t = OrderingHeuristic::Identity)]
    pub ordering: OrderingHeuristic,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SingArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub beta: usize,
    #[arg(long, default_value_t = 2.0)]
    pub delta: f64,
    #[arg(long, default_value_t = OrderingHeuristic::default())]
    pub ordering: OrderingHeuristic,
    #[arg(long = "max-iter", default_value_t = 20)]
    pub max_iter: usize,
    #[arg(long = "quad-order", default_value_t = DEFAULT_QUADRATURE_ORDER)]
    pub quad_order: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct NstarArgs {
    /// Fit JSON written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kappa: f64,
    /// Allowed failure probability.
    #[arg(long)]
    pub m: f64,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace JSONL from `sing`; emits `edge_counts.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Matrix CSV (such as `omega.csv`); emits `heatmap.csv` in long format.
    #[arg(long)]
    pub omega: Option<PathBuf>,
    /// Add a column scaled so the largest off-diagonal entry is 1.
    #[arg(long)]
    pub normalize: bool,
    /// Run the Gaussian-lattice variance/bias study; emits `variance.csv`.
    #[arg(long = "variance-study")]
    pub variance_study: bool,
    #[arg(long, default_value_t = 30)]
    pub replicates: usize,
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
    pub ns: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub beta: usize,
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command: its configuration, input hashes,
/// outputs, version and timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NStarReport {
    pub kappa: f64,
    pub m: f64,
    pub delta_star: f64,
    pub n_star: f64,
    pub n_star_ceil: u64,
    pub argmax: (usize, usize),
    /// `(j, k, n*_jk)` for `j < k`.
    pub per_pair: Vec<(usize, usize, f64)>,
    pub pseudo_inverse_used: bool,
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &SingError) -> i32 {
    if e.is_numerical() {
        return EXIT_NUMERICAL;
    }
    match e.root() {
        SingError::Io(_) | SingError::Json(_) | SingError::Parse { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn execute(command: &Command) -> Result<RunManifest> {
    let started = Instant::now();
    let mut manifest = match command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Sing(a) => cmd_sing(a)?,
        Command::Nstar(a) => cmd_nstar(a)?,
        Command::Report(a) => cmd_report(a)?,
    };
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    if let Some(dir) = manifest_dir(command) {
        write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(manifest)
}

fn manifest_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Fit(a) => Some(&a.out_dir),
        Command::Sing(a) => Some(&a.out_dir),
        Command::Report(a) => Some(&a.out_dir),
        Command::Gen(_) | Command::Nstar(_) => None,
    }
}

fn manifest(command: &str, config: serde_json::Value, inputs: Vec<InputRecord>, outputs: Vec<PathBuf>) -> RunManifest {
    RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        threads: rayon::current_num_threads(),
        wall_time_s: 0.0,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn input_record(path: &Path) -> Result<InputRecord> {
    Ok(InputRecord {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SingError::Io(e).context(format!("reading {}", path.display())))
}

/// `<dir>/<stem>.truth.json` next to a sample CSV.
pub fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "samples".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.truth.json"))
}

fn cmd_gen(a: &GenArgs) -> Result<RunManifest> {
    if a.n == 0 {
        return Err(SingError::InvalidInput("--n must be positive".into()));
    }
    let kind = match a.kind {
        DataKind::Modrad => GeneratorKind::ModifiedRademacher { r: a.r },
        DataKind::Sv => GeneratorKind::StochasticVolatility {
            t: a.t,
            fixed_phi: a.fixed_phi,
        },
        DataKind::Gaussian => match &a.precision {
            Some(path) => GeneratorKind::Gaussian {
                precision: serde_json::from_str(&read_text(path)?)?,
            },
            None => GeneratorKind::GaussianGrid { side: a.grid },
        },
    };
    let spec = GeneratorSpec {
        kind,
        n: a.n,
        seed: a.seed,
    };
    let generated = spec.generate()?;
    let truth = truth_path(&a.out);
    let mut csv = Vec::new();
    generated.samples.write_csv(&mut csv)?;
    write_text(&a.out, &String::from_utf8(csv).expect("csv is utf-8"))?;
    write_text(&truth, &generated.truth.to_json(generated.samples.names()))?;
    let mut config = serde_json::to_value(&spec)?;
    if matches!(spec.kind, GeneratorKind::GaussianGrid { .. }) {
        config["gamma"] = serde_json::json!(GRID_GAMMA);
    }
    let inputs = match &a.precision {
        Some(path) => vec![input_record(path)?],
        None => Vec::new(),
    };
    Ok(manifest("gen", config, inputs, vec![a.out.clone(), truth]))
}

/// Matrix as CSV with a header row of variable names and no row labels.
pub fn matrix_csv(m: &Matrix<f64>, names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names).map_err(csv_write_error)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(csv_write_error)?;
    }
    let bytes = w.into_inner().map_err(|e| SingError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Reads a matrix written by [`matrix_csv`].
pub fn read_matrix_csv(text: &str) -> Result<(Vec<String>, Matrix<f64>)> {
    let samples = SampleSet::read_csv(text.as_bytes())?;
    if samples.n() != samples.p() {
        return Err(SingError::InvalidInput(format!(
            "expected a square matrix, found {} rows and {} columns",
            samples.n(),
            samples.p()
        )));
    }
    let names = samples.names().to_vec();
    Ok((names, Matrix::from_vec(samples.n(), samples.p(), samples.data().to_vec())))
}

fn csv_write_error(e: csv::Error) -> SingError {
    SingError::Io(std::io::Error::other(e.to_string()))
}

fn read_samples(path: &Path) -> Result<SampleSet<f64>> {
    SampleSet::read_csv_path(path).map_err(|e| e.context(format!("reading {}", path.display())))
}

#[derive(Debug, Serialize)]
struct FitConfigEcho {
    beta: usize,
    quadrature_order: usize,
    ordering: OrderingHeuristic,
    graph: Option<String>,
}

fn cmd_fit(a: &FitArgs) -> Result<RunManifest> {
    let raw = read_samples(&a.data)?;
    let data = raw.standardize();
    let p = data.p();
    let mut inputs = vec![input_record(&a.data)?];
    let pattern = match &a.graph {
        Some(path) => {
            inputs.push(input_record(path)?);
            let g = Graph::from_json(&read_text(path)?)?;
            if g.p != p {
                return Err(SingError::InvalidInput(format!("graph has {} nodes, data has {p} columns", g.p)));
            }
            let ordering = a.ordering.order(&g);
            let induced = crate::graphops::induced_graph(&g, &ordering);
            crate::graphops::sparsity_pattern(&induced, &ordering)
        }
        None => SparsityPattern::dense(p),
    };
    let options = FitOptions {
        beta: a.beta,
        quadrature_order: a.quad_order,
        ..FitOptions::default()
    };
    let fit = fit_map(&data, &pattern, &options)?;
    let est = estimate_precision(&fit.map, &data, &fit.information_blocks())?;
    let names = raw.names();
    let fit_path = a.out_dir.join("fit.json");
    let omega_path = a.out_dir.join("omega.csv");
    let rho_path = a.out_dir.join("rho.csv");
    write_text(&fit_path, &serde_json::to_string_pretty(&fit.to_document(&data))?)?;
    write_text(&omega_path, &matrix_csv(&est.omega, names)?)?;
    write_text(&rho_path, &matrix_csv(&est.rho, names)?)?;
    let config = serde_json::to_value(FitConfigEcho {
        beta: a.beta,
        quadrature_order: a.quad_order,
        ordering: a.ordering,
        graph: a.graph.as_ref().map(|p| p.display().to_string()),
    })?;
    Ok(manifest("fit", config, inputs, vec![fit_path, omega_path, rho_path]))
}

fn cmd_sing(a: &SingArgs) -> Result<RunManifest> {
    let config = SingConfig {
        beta: a.beta,
        delta: a.delta,
        ordering: a.ordering,
        quadrature_order: a.quad_order,
        max_iterations: a.max_iter,
        seed: a.seed,
    };
    config.validate()?;
    let raw = read_samples(&a.data)?;
    let out = run_sing(&raw, &config)?;
    let names = raw.names();
    let last = out
        .trace
        .iterations
        .last()
        .ok_or_else(|| SingError::InvalidInput("the loop ran no iterations".into()))?;
    let paths = [
        "graph.json",
        "graph.csv",
        "omega.csv",
        "rho.csv",
        "trace.jsonl",
    ]
    .map(|f| a.out_dir.join(f));
    write_text(&paths[0], &out.graph.to_json(names))?;
    write_text(&paths[1], &out.graph.to_csv(names))?;
    write_text(&paths[2], &matrix_csv(&last.omega, names)?)?;
    write_text(&paths[3], &matrix_csv(&last.rho, names)?)?;
    write_text(&paths[4], &out.trace.to_jsonl(false))?;
    let mut echo = serde_json::to_value(config)?;
    echo["stop"] = serde_json::to_value(out.trace.stop)?;
    echo["iteration_wall_time_s"] =
        serde_json::json!(out.trace.iterations.iter().map(|r| r.wall_time_s).collect::<Vec<_>>());
    Ok(manifest("sing", echo, vec![input_record(&a.data)?], paths.to_vec()))
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(SingError::InvalidInput("information block is not square".into()));
    }
    Ok(Matrix::from_rows(rows))
}

fn cmd_nstar(a: &NstarArgs) -> Result<RunManifest> {
    let doc: FitDocument = serde_json::from_str(&read_text(&a.fit)?)?;
    let raw = read_samples(&a.data)?;
    let data = raw.standardize();
    let map = TriangularMap::<f64>::from_document(doc.map)?;
    if map.dimension() != data.p() {
        return Err(SingError::InvalidInput(format!(
            "map dimension {} differs from data dimension {}",
            map.dimension(),
            data.p()
        )));
    }
    let information = doc.information.iter().map(|b| matrix_from_rows(b)).collect::<Result<Vec<_>>>()?;
    let est = estimate_precision(&map, &data, &information)?;
    let ns = n_star(&est, a.kappa, a.m)?;
    let p = data.p();
    let mut per_pair = Vec::new();
    for j in 0..p {
        for k in j + 1..p {
            per_pair.push((j, k, ns.per_pair[j][k]));
        }
    }
    let report = NStarReport {
        kappa: a.kappa,
        m: a.m,
        delta_star: ns.delta_star,
        n_star: ns.n_star,
        n_star_ceil: ns.n_star_ceil,
        argmax: ns.argmax,
        per_pair,
        pseudo_inverse_used: ns.pseudo_inverse_used,
    };
    let text = serde_json::to_string_pretty(&report)?;
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        write_text(out, &text)?;
        outputs.push(out.clone());
    }
    eprintln!("{text}");
    let config = serde_json::json!({ "kappa": a.kappa, "m": a.m, "fit": a.fit.display().to_string() });
    let mut m = manifest("nstar", config, vec![input_record(&a.fit)?, input_record(&a.data)?], outputs);
    m.config["report"] = serde_json::to_value(&report)?;
    Ok(m)
}

/// `iteration,n_edges` rows from trace JSON lines; blank lines are skipped.
pub fn edge_count_csv(trace: &str) -> Result<String> {
    let mut out = String::from("iteration,n_edges\n");
    for (i, line) in trace.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(line).map_err(|e| SingError::Parse {
            row: i + 1,
            column: e.column(),
            message: format!("trace schema mismatch: {e}"),
        })?;
        out.push_str(&format!("{},{}\n", rec.iteration, rec.n_edges));
    }
    Ok(out)
}

/// Long-format heatmap rows `row,col,row_name,col_name,value[,scaled]`.
pub fn heatmap_csv(m: &Matrix<f64>, names: &[String], normalize: bool) -> String {
    let p = m.rows();
    let mut max = 0.0f64;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                max = max.max(m[(j, k)].abs());
            }
        }
    }
    let mut out = String::from("row,col,row_name,col_name,value");
    if normalize {
        out.push_str(",scaled");
    }
    out.push('\n');
    for j in 0..p {
        for k in 0..p {
            let v = m[(j, k)];
            out.push_str(&format!("{j},{k},{},{},{v}", names[j], names[k]));
            if normalize {
                let s = if max > 0.0 { v / max } else { 0.0 };
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
    }
    out
}

fn cmd_report(a: &ReportArgs) -> Result<RunManifest> {
    if a.trace.is_none() && a.omega.is_none() && !a.variance_study {
        return Err(SingError::InvalidInput(
            "nothing to report: give --trace, --omega or --variance-study".into(),
        ));
    }
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    if let Some(path) = &a.trace {
        inputs.push(input_record(path)?);
        let out = a.out_dir.join("edge_counts.csv");
        write_text(&out, &edge_count_csv(&read_text(path)?)?)?;
        outputs.push(out);
    }
    if let Some(path) = &a.omega {
        inputs.push(input_record(path)?);
        let (names, m) = read_matrix_csv(&read_text(path)?)?;
        let out = a.out_dir.join("heatmap.csv");
        write_text(&out, &heatmap_csv(&m, &names, a.normalize))?;
        outputs.push(out);
    }
    let mut config = serde_json::json!({ "normalize": a.normalize });
    if a.variance_study {
        let study = VarianceStudyConfig {
            side: a.grid,
            ns: a.ns.clone(),
            replicates: a.replicates,
            beta: a.beta,
            seed: a.seed,
            ..VarianceStudyConfig::default()
        };
        let rows = variance_bias_study(&study)?;
        let out = a.out_dir.join("variance.csv");
        write_text(&out, &variance_rows_csv(&rows))?;
        outputs.push(out);
        config["variance_study"] = serde_json::to_value(&study)?;
    }
    Ok(manifest("report", config, inputs, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("sing").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["gen", "--kind", "nope", "--n", "5", "--out", "x.csv"]), EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(run_args(&["sing"]), EXIT_USAGE);
    }

    #[test]
    fn gen_round_trips_and_writes_truth() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("modrad.csv");
        let code = run_args(&["gen", "--kind", "modrad", "--r", "2", "--n", "50", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        let s = SampleSet::read_csv_path(&out).unwrap();
        assert_eq!((s.n(), s.p()), (50, 4));
        let direct = crate::datagen::gen_modified_rademacher(2, 50, 7).unwrap();
        assert_eq!(s.data(), direct.samples.data());
        let truth = Graph::from_json(&fs::read_to_string(truth_path(&out)).unwrap()).unwrap();
        assert_eq!(truth, direct.truth);
    }

    #[test]
    fn missing_and_malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.csv");
        let od = dir.path().join("o");
        assert_eq!(
            run_args(&["sing", "--data", missing.to_str().unwrap(), "--out-dir", od.to_str().unwrap()]),
            EXIT_IO
        );
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "a,b\n1,2\n3,NaN\n").unwrap();
        assert_eq!(
            run_args(&["sing", "--data", bad.to_str().unwrap(), "--out-dir", od.to_str().unwrap()]),
            EXIT_IO
        );
        assert_eq!(
            run_args(&["sing", "--data", bad.to_str().unwrap(), "--delta", "-1", "--out-dir", od.to_str().unwrap()]),
            EXIT_USAGE
        );
    }

    #[test]
    fn edge_count_report_shapes() {
        assert_eq!(edge_count_csv("").unwrap(), "iteration,n_edges\n");
        let line = |i: usize, e: usize| {
            serde_json::to_string(&TraceLine {
                iteration: i,
                permutation: vec![0, 1],
                pattern_size: 3,
                n_edges: e,
                edges: Vec::new(),
                omega_sha256: String::new(),
                pseudo_inverse_used: false,
                wall_time_s: None,
            })
            .unwrap()
        };
        let trace = format!("{}\n{}\n{}\n", line(1, 9), line(2, 4), line(3, 4));
        let csv = edge_count_csv(&trace).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.ends_with("3,4\n"));
        assert!(matches!(edge_count_csv("{\"x\":1}\n"), Err(SingError::Parse { row: 1, .. })));
    }

    #[test]
    fn matrix_csv_round_trip_and_heatmap() {
        let names = vec!["a".to_string(), "b".to_string()];
        let m = Matrix::from_rows(&[vec![1.5, 0.25], vec![0.25, 2.0]]);
        let (n2, back) = read_matrix_csv(&matrix_csv(&m, &names).unwrap()).unwrap();
        assert_eq!(n2, names);
        assert_eq!(back.as_slice(), m.as_slice());
        let h = heatmap_csv(&m, &names, true);
        assert_eq!(h.lines().count(), 5);
        assert!(h.contains("0,1,a,b,0.25,1\n"));
    }

    #[test]
    fn sing_on_independent_columns_is_empty_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("ind.csv");
        let theta = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let g = crate::datagen::gen_gaussian(&Matrix::from_rows(&theta), 500, 3).unwrap();
        g.samples.write_csv_path(&data).unwrap();
        let mut outputs = Vec::new();
        for run_id in 0..2 {
            let od = dir.path().join(format!("run{run_id}"));
            let code = run_args(&[
                "sing",
                "--data",
                data.to_str().unwrap(),
                "--beta",
                "1",
                "--out-dir",
                od.to_str().unwrap(),
            ]);
            assert_eq!(code, EXIT_OK);
            let graph = Graph::from_json(&fs::read_to_string(od.join("graph.json")).unwrap()).unwrap();
            assert_eq!(graph.n_edges(), 0);
            let files: Vec<String> = ["graph.json", "graph.csv", "omega.csv", "rho.csv", "trace.jsonl"]
                .iter()
                .map(|f| fs::read_to_string(od.join(f)).unwrap())
                .collect();
            outputs.push(files);
            let m: RunManifest = serde_json::from_str(&fs::read_to_string(od.join("manifest.json")).unwrap()).unwrap();
            assert_eq!(m.inputs[0].sha256, sha256_file(&data).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn fit_then_nstar_scales_with_kappa() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("chain.csv");
        let theta = vec![vec![1.0, -0.4, 0.0], vec![-0.4, 1.0, -0.4], vec![0.0, -0.4, 1.0]];
        let g = crate::datagen::gen_gaussian(&Matrix::from_rows(&theta), 800, 2).unwrap();
        g.samples.write_csv_path(&data).unwrap();
        let od = dir.path().join("fit");
        let code = run_args(&["fit", "--data", data.to_str().unwrap(), "--beta", "1", "--out-dir", od.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        let fit = od.join("fit.json");
        let mut values = Vec::new();
        for kappa in ["0.1", "0.2"] {
            let out = dir.path().join(format!("nstar{kappa}.json"));
            let code = run_args(&[
                "nstar",
                "--fit",
                fit.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--kappa",
                kappa,
                "--m",
                "0.2",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, EXIT_OK);
            let r: NStarReport = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
            values.push(r.n_star);
        }
        assert!((values[0] / values[1] - 4.0).abs() < 1e-9);
        let absent = dir.path().join("none.json");
        let code = run_args(&[
            "nstar",
            "--fit",
            absent.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--kappa",
            "1",
            "--m",
            "0.2",
        ]);
        assert_eq!(code, EXIT_IO);
    }
}
