//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::{load_sync_csv, load_unsync_dir, write_file, SyncDataset, UnsyncDataset};
use crate::em;
use crate::error::{GcmmError, Result};
use crate::eval::{self, ModelKind};
use crate::experiment::{self, BenchmarkSpec};
use crate::gmm;
use crate::marginal::BandwidthRule;
use crate::model::{AnyModel, FitConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "gcmm", version, about = "Fit, sample and evaluate Gaussian copula mixture models")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "GCMM_THREADS")]
    threads: Option<usize>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a Gaussian copula mixture.
    Fit(FitArgs),
    /// Fit a full-covariance Gaussian mixture.
    FitGmm(GmmArgs),
    /// Compare component counts by AIC.
    SelectK(SelectArgs),
    /// Draw rows from a saved model.
    Sample(SampleArgs),
    /// Two-sample Kolmogorov-Smirnov test between two CSV files.
    Ks(KsArgs),
    /// Run the synthetic benchmark.
    Benchmark(BenchmarkArgs),
    /// Write histogram, QQ and cluster CSVs for plotting.
    ExportPlots(PlotArgs),
}

#[derive(Args, Debug, Clone)]
struct EmOptions {
    /// Relative log-likelihood change that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// EM starts per fit: the k-means start plus random soft starts, each run briefly before the best continues.
    #[arg(long, default_value_t = 4)]
    starts: usize,
    #[arg(long, default_value_t = 1e-6)]
    weight_floor: f64,
    /// Relative ridge added to every scatter diagonal.
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Fixed KDE bandwidth (Silverman's rule when omitted).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Fixed cdf clipping level (derived from the data when omitted).
    #[arg(long)]
    cdf_clip_epsilon: Option<f64>,
}

impl EmOptions {
    fn config(&self, k: usize, seed: u64) -> FitConfig {
        let mut c = FitConfig::new(k);
        c.tol = self.tol;
        c.max_iters = self.max_iters;
        c.starts = self.starts;
        c.seed = seed;
        c.weight_floor = self.weight_floor;
        c.ridge = self.ridge;
        c.cdf_clip_epsilon = self.cdf_clip_epsilon;
        c.kde_bandwidth_rule = self.bandwidth.map_or(BandwidthRule::Silverman, BandwidthRule::Fixed);
        c
    }
}

#[derive(Args, Debug)]
struct UnsyncOptions {
    /// Directory holding one `<dimension>.csv` per dimension of extra observations.
    #[arg(long)]
    unsync_dir: Option<PathBuf>,
    /// Use the unsynchronized observations when re-estimating marginals.
    #[arg(long)]
    use_unsync: bool,
}

impl UnsyncOptions {
    fn load(&self, data: &SyncDataset) -> Result<Option<UnsyncDataset>> {
        match (&self.unsync_dir, self.use_unsync) {
            (Some(dir), true) => Ok(Some(load_unsync_dir(dir, data)?)),
            (None, true) => Err(GcmmError::InvalidConfig("--use-unsync requires --unsync-dir".into())),
            _ => Ok(None),
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    model_out: PathBuf,
    #[command(flatten)]
    unsync: UnsyncOptions,
    #[command(flatten)]
    em: EmOptions,
}

#[derive(Args, Debug)]
struct GmmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    model_out: PathBuf,
    #[command(flatten)]
    em: EmOptions,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModelArg {
    Gcmm,
    Gmm,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    k_min: usize,
    #[arg(long)]
    k_max: usize,
    #[arg(long, value_enum, default_value = "gcmm")]
    model: ModelArg,
    /// AIC charge per nonparametric marginal.
    #[arg(long, default_value_t = 0)]
    marginal_param_cost: usize,
    #[command(flatten)]
    unsync: UnsyncOptions,
    #[command(flatten)]
    em: EmOptions,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Column to compare (required when the files have several).
    #[arg(long, conflicts_with = "sum")]
    column: Option<String>,
    /// Compare row sums.
    #[arg(long)]
    sum: bool,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// JSON benchmark spec; the built-in default when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Exit code for a library error.
pub fn exit_code(e: &GcmmError) -> i32 {
    match e {
        e if e.is_numerical() => EXIT_NUMERICAL,
        GcmmError::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Runs the CLI with process stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// Runs the CLI, writing results to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    let mut buffer: Vec<u8> = Vec::new();
    let result = pool.install(|| dispatch(&cli, &mut buffer));
    let _ = out.write_all(&buffer);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|source| GcmmError::Io { path: PathBuf::from("<stdout>"), source })
}

fn emit_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(out, &text)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| GcmmError::Io { path: path.to_path_buf(), source })
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => {
            let data = load_sync_csv(&a.data)?;
            let unsync = a.unsync.load(&data)?;
            let mut config = a.em.config(a.k, cli.seed);
            config.use_unsync = unsync.is_some();
            let (model, trace) = em::fit(&data, unsync.as_ref(), &config)?;
            write_file(&a.model_out, model.to_json()?.as_bytes())?;
            let ll = trace.final_log_likelihood();
            let aic = eval::aic(ll, a.k, data.d(), ModelKind::Gcmm);
            report_fit(cli, out, "gcmm", &a.model_out, ll, aic.aic, &trace)
        }
        Command::FitGmm(a) => {
            let data = load_sync_csv(&a.data)?;
            let config = a.em.config(a.k, cli.seed);
            let (model, trace) = gmm::fit_gmm(&data, &config)?;
            write_file(&a.model_out, model.to_json()?.as_bytes())?;
            let ll = trace.final_log_likelihood();
            let aic = eval::aic(ll, a.k, data.d(), ModelKind::Gmm);
            report_fit(cli, out, "gmm", &a.model_out, ll, aic.aic, &trace)
        }
        Command::SelectK(a) => {
            let data = load_sync_csv(&a.data)?;
            let unsync = a.unsync.load(&data)?;
            let kind = match a.model {
                ModelArg::Gcmm => ModelKind::Gcmm,
                ModelArg::Gmm => ModelKind::Gmm,
            };
            if kind == ModelKind::Gmm && unsync.is_some() {
                return Err(GcmmError::InvalidConfig("unsynchronized data only applies to --model gcmm".into()));
            }
            let mut config = a.em.config(a.k_min, cli.seed);
            config.use_unsync = unsync.is_some();
            let report = eval::select_k(&data, unsync.as_ref(), a.k_min, a.k_max, &config, kind, a.marginal_param_cost)?;
            if cli.json {
                emit_json(out, &serde_json::to_value(&report)?)
            } else {
                emit(out, &report.to_text())
            }
        }
        Command::Sample(a) => {
            let model = AnyModel::from_json(&read_text(&a.model)?)?;
            if a.n == 0 {
                return Err(GcmmError::InvalidConfig("--n must be positive".into()));
            }
            let rows = eval::sample_model(&model, a.n, &mut ChaCha8Rng::seed_from_u64(cli.seed))?;
            rows.write_csv(&a.out)?;
            if cli.json {
                emit_json(out, &json!({ "rows": a.n, "dimensions": rows.d(), "out": a.out }))
            } else {
                emit(out, &format!("wrote {} rows to {}\n", a.n, a.out.display()))
            }
        }
        Command::Ks(a) => {
            let (x, y) = (load_sync_csv(&a.a)?, load_sync_csv(&a.b)?);
            let (x, y) = (ks_values(&x, a)?, ks_values(&y, a)?);
            let r = eval::ks_two_sample(&x, &y)?;
            if cli.json {
                emit_json(out, &serde_json::to_value(r)?)
            } else {
                emit(out, &format!("statistic {}\np {}\nn1 {}\nn2 {}\n", r.statistic, r.p_value, r.n1, r.n2))
            }
        }
        Command::Benchmark(a) => {
            let spec: BenchmarkSpec = match &a.spec {
                Some(p) => serde_json::from_str(&read_text(p)?)
                    .map_err(|e| GcmmError::InvalidConfig(format!("benchmark spec: {e}")))?,
                None => BenchmarkSpec::default(),
            };
            let seeds: Vec<u64> = (0..a.seeds).map(|j| cli.seed.wrapping_add(j)).collect();
            let report = experiment::run_benchmark(&spec, &seeds)?;
            let value = serde_json::to_value(&report)?;
            if let Some(path) = &a.out {
                let mut text = serde_json::to_string_pretty(&value)?;
                text.push('\n');
                write_file(path, text.as_bytes())?;
            }
            if cli.json {
                emit_json(out, &value)
            } else {
                emit(out, &report.to_text())
            }
        }
        Command::ExportPlots(a) => {
            let model = AnyModel::from_json(&read_text(&a.model)?)?;
            let data = load_sync_csv(&a.data)?;
            let files = experiment::export_plots(&model, &data, &a.out_dir, cli.seed)?;
            if cli.json {
                emit_json(out, &json!({ "files": files }))
            } else {
                let mut text = String::new();
                for f in files {
                    text.push_str(&format!("wrote {}\n", f.display()));
                }
                emit(out, &text)
            }
        }
    }
}

fn ks_values(data: &SyncDataset, a: &KsArgs) -> Result<Vec<f64>> {
    if a.sum {
        return Ok(eval::sum_dimension(data));
    }
    match &a.column {
        Some(name) => data
            .dimension_names()
            .iter()
            .position(|n| n == name)
            .map(|i| data.column(i))
            .ok_or_else(|| GcmmError::InvalidData(format!("no column named '{name}'"))),
        None if data.d() == 1 => Ok(data.column(0)),
        None => Err(GcmmError::InvalidConfig("several columns: pass --column NAME or --sum".into())),
    }
}

fn report_fit(
    cli: &Cli,
    out: &mut dyn Write,
    kind: &str,
    path: &Path,
    ll: f64,
    aic: f64,
    trace: &em::EmTrace,
) -> Result<()> {
    if cli.json {
        emit_json(
            out,
            &json!({
                "model": kind,
                "model_out": path,
                "log_likelihood": ll,
                "aic": aic,
                "iterations": trace.iterations_run,
                "converged": trace.converged,
                "final_change": if trace.final_change.is_finite() { Some(trace.final_change) } else { None },
                "log_likelihoods": trace.log_likelihoods,
            }),
        )
    } else {
        let status = if trace.converged { "converged" } else { "not converged" };
        emit(
            out,
            &format!(
                "{kind} model written to {}\nlog-likelihood {ll:.6}\nAIC {aic:.6}\niterations {} ({status})\n",
                path.display(),
                trace.iterations_run
            ),
        )
    }
}
