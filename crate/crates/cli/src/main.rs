use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use surebridge::data::{
    load_dataset, load_xy, read_numeric_csv, standardize, write_dataset, write_results, Dataset, ResponseColumn,
    RunMetadata,
};
use surebridge::orthogonal::{svd_reduce, OrthogonalEngine};
use surebridge::regression::RegressionEngine;
use surebridge::sim::{replicate_data, run_experiment, timing_sweep, SimDesign};
use surebridge::sure::sure_profile;
use surebridge::tilted_stable::sample_tilted_stable;
use surebridge::{
    fit_dataset, BridgeError, FitConfig, FittedModel, LatentDraws, Method, NoiseModel, NuGrid, Result, StableIndex,
};

#[derive(Parser)]
#[command(
    name = "surebridge",
    version,
    about = "Bridge regression with the prior scale tuned by SURE"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study and write one row per replicate and alpha.
    Simulate(SimulateArgs),
    /// Write one replicate of a simulation design as CSV.
    Generate(GenerateArgs),
    /// Fit a model and write it as JSON.
    Fit(FitArgs),
    /// Predict from a fitted model.
    Predict(PredictArgs),
    /// Write the SURE path over the nu grid as CSV.
    SurePath(SurePathArgs),
    /// Draw exponentially tilted positive stable variables.
    SampleStable(SampleArgs),
    /// Time complete fits over a range of p.
    Timing(TimingArgs),
}

#[derive(Args)]
struct DesignArgs {
    /// JSON simulation design; flags override its fields.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Per-replicate results CSV; run metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-fit wall-clock seconds.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 0)]
    replicate: usize,
    /// Training data, response in the last column `y`.
    #[arg(long)]
    out: PathBuf,
    /// Test data in the same layout.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Single CSV holding the design and the response.
    #[arg(long, conflicts_with_all = ["x", "y"])]
    data: Option<PathBuf>,
    /// Response column name in `--data`.
    #[arg(long, default_value = "y", conflicts_with = "response_index")]
    response: String,
    /// Zero-based response column position in `--data`.
    #[arg(long)]
    response_index: Option<usize>,
    /// Design CSV (with `--y`).
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    /// One-column response CSV (with `--x`).
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// Centre and scale columns and response before fitting.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON fit configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Noise variance, Sigma = sigma2 I.
    #[arg(long, conflicts_with = "noise_cov")]
    sigma2: Option<f64>,
    /// CSV (with header) holding a full n x n noise covariance.
    #[arg(long)]
    noise_cov: Option<PathBuf>,
    /// Monte Carlo size J.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Fixed prior scale; skips tuning.
    #[arg(long)]
    nu: Option<f64>,
    /// Absolute tuning grid `lo:hi:points`.
    #[arg(long)]
    nu_grid: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent draws used by the fit as CSV.
    #[arg(long)]
    dump_draws: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Design CSV in the column layout used for fitting.
    #[arg(long)]
    x: PathBuf,
    /// Column of `--x` to ignore, such as the response of a combined file.
    #[arg(long)]
    drop: Option<String>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SurePathArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Comma-separated values of p.
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    ps: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Report JSON; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> BridgeError {
    BridgeError::InvalidParameter(msg.into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| BridgeError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| BridgeError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

impl DesignArgs {
    fn resolve(&self) -> Result<SimDesign> {
        let mut d: SimDesign = match &self.design {
            Some(path) => read_json(path)?,
            None => SimDesign::default(),
        };
        if let Some(v) = self.n {
            d.n = v;
        }
        if let Some(v) = self.p {
            d.p = v;
        }
        if let Some(v) = self.rho {
            d.rho = v;
        }
        if let Some(v) = &self.alpha {
            d.alpha_grid = v.clone();
        }
        if let Some(v) = self.replicates {
            d.replicates = v;
        }
        if let Some(v) = self.draws {
            d.draws = v;
        }
        if let Some(v) = self.seed {
            d.seed = v;
        }
        if let Some(v) = self.method {
            d.method = v;
        }
        d.validate()?;
        Ok(d)
    }
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let ds = match (&self.data, &self.x, &self.y) {
            (Some(path), _, _) => {
                let col = match self.response_index {
                    Some(i) => ResponseColumn::Index(i),
                    None => ResponseColumn::Name(self.response.clone()),
                };
                load_dataset(path, &col)?
            }
            (None, Some(x), Some(y)) => load_xy(x, y)?,
            _ => return Err(invalid("give either --data or both --x and --y")),
        };
        if self.standardize {
            standardize(&ds)
        } else {
            Ok(ds)
        }
    }
}

fn parse_grid(s: &str) -> Result<NuGrid> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || invalid(format!("--nu-grid expects lo:hi:points, got '{s}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let points: usize = parts[2].parse().map_err(|_| bad())?;
    Ok(NuGrid::absolute(lo, hi, points))
}

impl ModelArgs {
    fn resolve(&self) -> Result<FitConfig> {
        let mut cfg: FitConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => FitConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.noise = NoiseModel::Scalar(v);
        }
        if let Some(path) = &self.noise_cov {
            let (_, m) = read_numeric_csv(path)?;
            cfg.noise = NoiseModel::Full(m);
        }
        if let Some(v) = self.draws {
            cfg.draws = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.method {
            cfg.method = Some(v);
        }
        if let Some(v) = self.nu {
            cfg.nu = Some(v);
        }
        if let Some(s) = &self.nu_grid {
            cfg.grid = parse_grid(s)?;
        }
        Ok(cfg)
    }
}

/// Deterministic part of a replicate row; timings are written separately.
#[derive(Serialize)]
struct ResultRow {
    alpha: f64,
    replicate: usize,
    nu_star: f64,
    sure: f64,
    sse: f64,
    ess: f64,
    low_ess: bool,
    ridge_nu: f64,
    ridge_sure: f64,
    ridge_sse: f64,
}

#[derive(Serialize)]
struct TimingRow {
    alpha: f64,
    replicate: usize,
    fit_seconds: f64,
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let design = args.design.resolve()?;
    let res = run_experiment(&design)?;
    let rows: Vec<ResultRow> = res
        .rows
        .iter()
        .map(|r| ResultRow {
            alpha: r.alpha,
            replicate: r.replicate,
            nu_star: r.nu_star,
            sure: r.sure,
            sse: r.sse,
            ess: r.ess,
            low_ess: r.low_ess,
            ridge_nu: r.ridge_nu,
            ridge_sure: r.ridge_sure,
            ridge_sse: r.ridge_sse,
        })
        .collect();
    let meta = RunMetadata::capture(serde_json::to_value(&design)?);
    write_results(&args.out, &rows, &meta)?;
    if let Some(path) = &args.timings {
        let times: Vec<TimingRow> = res
            .rows
            .iter()
            .map(|r| TimingRow {
                alpha: r.alpha,
                replicate: r.replicate,
                fit_seconds: r.fit_seconds,
            })
            .collect();
        write_results(path, &times, &meta)?;
    }
    let low = res.rows.iter().filter(|r| r.low_ess).count();
    if low > 0 {
        eprintln!("warning: {low} fit(s) had a low effective sample size; consider more draws");
    }
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for s in &res.summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let design = args.design.resolve()?;
    let data = replicate_data(&design, args.replicate)?;
    let names: Vec<String> = (1..=design.p).map(|j| format!("x{j}")).collect();
    write_dataset(&args.out, &Dataset::new(data.x, data.y, names.clone(), "y".into())?)?;
    if let Some(path) = &args.test_out {
        write_dataset(path, &Dataset::new(data.x_test, data.y_test, names, "y".into())?)?;
    }
    Ok(())
}

fn warn_low_ess(model: &FittedModel) {
    if model.low_ess {
        eprintln!(
            "warning: effective sample size {:.1} of {} draws is low; estimates may be unreliable",
            model.ess, model.draws
        );
    }
}

fn fit_cmd(args: &FitArgs) -> Result<()> {
    let ds = args.data.load()?;
    let cfg = args.model.resolve()?;
    let model = fit_dataset(&ds, &cfg)?;
    warn_low_ess(&model);
    write_json(&args.out, &model)?;
    if let Some(path) = &args.dump_draws {
        let cols = match model.method {
            Method::Orthogonal => svd_reduce(&ds.x, &ds.y)?.rank(),
            Method::Regression => ds.p(),
        };
        let draws = LatentDraws::generate(StableIndex::bridge(cfg.alpha)?, cfg.draws, cols, cfg.seed)?;
        draws.write_csv(BufWriter::new(File::create(path)?))?;
    }
    match model.sure {
        Some(s) => println!(
            "method={:?} nu={} sure={} ess={:.1}",
            model.method, model.nu, s, model.ess
        ),
        None => println!("method={:?} nu={} ess={:.1}", model.method, model.nu, model.ess),
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let model: FittedModel = read_json(&args.model)?;
    let (header, x) = read_numeric_csv(&args.x)?;
    let x = match &args.drop {
        Some(name) => {
            let c = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| BridgeError::Data(format!("{}: no column named '{name}'", args.x.display())))?;
            x.remove_column(c)
        }
        None => x,
    };
    let pred = model.predict(&x)?;
    let mut w = output(args.out.as_deref())?;
    writeln!(w, "prediction")?;
    for v in pred.iter() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

fn sure_path_cmd(args: &SurePathArgs) -> Result<()> {
    let ds = args.data.load()?;
    let cfg = args.model.resolve()?;
    let index = StableIndex::bridge(cfg.alpha)?;
    cfg.noise.validate(ds.n())?;
    let path = match cfg.resolved_method() {
        Method::Orthogonal => {
            let sigma2 = cfg
                .noise
                .scalar_variance()
                .ok_or_else(|| BridgeError::Unsupported("the orthogonal method needs Sigma = sigma2 I".into()))?;
            let basis = svd_reduce(&ds.x, &ds.y)?;
            let draws = LatentDraws::generate(index, cfg.draws, basis.rank(), cfg.seed)?;
            let engine = OrthogonalEngine::new(basis, cfg.alpha, sigma2, &draws)?;
            sure_profile(&engine, &cfg.grid)?
        }
        Method::Regression => {
            let draws = LatentDraws::generate(index, cfg.draws, ds.p(), cfg.seed)?;
            let engine = RegressionEngine::new(&ds.x, &ds.y, &cfg.noise, cfg.alpha, &draws)?;
            sure_profile(&engine, &cfg.grid)?
        }
    };
    fs::write(&args.out, path.to_csv())?;
    if !path.failed_nu.is_empty() {
        eprintln!("warning: SURE failed at {} value(s) of nu", path.failed_nu.len());
    }
    println!("nu_star={} sure_star={}", path.nu_star, path.sure_star);
    Ok(())
}

fn sample_stable(args: &SampleArgs) -> Result<()> {
    let index = StableIndex::new(args.gamma, args.delta)?;
    let t = sample_tilted_stable(index, args.count, args.seed)?;
    let mut w = output(args.out.as_deref())?;
    writeln!(w, "t")?;
    for v in t {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

fn timing(args: &TimingArgs) -> Result<()> {
    let design = args.design.resolve()?;
    let report = timing_sweep(&design, &args.ps, args.repeats)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Predict(a) => predict(a),
        Command::SurePath(a) => sure_path_cmd(a),
        Command::SampleStable(a) => sample_stable(a),
        Command::Timing(a) => timing(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
