//! `mgtsd` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mgtsd::forecast::ForecastOptions;
use mgtsd::io::{
    dataset_csv, generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, Dataset, RunConfig,
    SyntheticKind,
};
use mgtsd::metrics::{score_window, MetricsReport, ScoreOptions, WindowMetrics};
use mgtsd::parallel::configure_workers;
use mgtsd::selection::curves_csv;
use mgtsd::trainer::loss_trace_csv;
use mgtsd::{
    build_multigran, fft_spectrum, forecast, rolling_evaluate, select_share_ratio, smooth, EvalOptions, GranularitySpec,
    MgTsd, Parallelism, SelectionOptions, Smoother, Tensor,
};

#[derive(Parser, Debug)]
#[command(name = "mgtsd", version, about = "Multi-granularity diffusion forecaster")]
struct Cli {
    /// Random seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all outputs (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for window and sample fan-out.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset CSV.
    GenData(GenDataArgs),
    /// Write the coarse-grained levels of a dataset.
    MakeGrans(MakeGransArgs),
    /// Train a model; writes a checkpoint and the loss trace.
    Train(TrainArgs),
    /// Sample forecasts after the end of the context.
    Forecast(ForecastArgs),
    /// Rolling-window evaluation, or scoring of an existing samples file.
    Evaluate(EvaluateArgs),
    /// Share-ratio selection curves from a single-granularity checkpoint.
    SelectRatio(CheckpointArgs),
    /// Amplitude spectra of the dimension-summed series per granularity.
    AnalyzeFft(MakeGransArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// sinusoid-mixture, static-gaussian or trend-plus-noise
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "data.csv")]
    output: String,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset CSV; defaults to `dataset` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: DataArgs,
    /// Also train on the ticks reserved for rolling evaluation.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct MakeGransArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated windows in ticks; defaults to the configured granularities.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to `checkpoint.mgtsd` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Use the rows before this index as context.
    #[arg(long)]
    context_end: Option<usize>,
    #[arg(long)]
    include_coarse: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Score this samples CSV instead of running the model.
    #[arg(long, requires = "truth")]
    samples_file: Option<PathBuf>,
    /// Observations for `--samples-file`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// First row of `--truth` matching the first forecast step.
    #[arg(long, default_value_t = 0)]
    truth_start: usize,
}

enum Failure {
    Usage(String),
    Core(mgtsd::Error),
}

impl From<mgtsd::Error> for Failure {
    fn from(e: mgtsd::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

struct Ctx {
    cfg: RunConfig,
    seed: Option<u64>,
    out_dir: PathBuf,
    parallelism: Parallelism,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.cfg.train.seed)
    }

    fn data_path(&self, arg: &Option<PathBuf>) -> CliResult<PathBuf> {
        arg.clone()
            .or_else(|| self.cfg.dataset.clone())
            .ok_or_else(|| Failure::Usage("no dataset given (use --data or `dataset` in the config)".into()))
    }

    fn dataset(&self, arg: &Option<PathBuf>) -> CliResult<Dataset> {
        Ok(load_dataset(&self.data_path(arg)?)?)
    }

    fn checkpoint(&self, arg: &Option<PathBuf>) -> CliResult<MgTsd> {
        let path = arg.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.mgtsd"));
        Ok(load_checkpoint(&path)?)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                mgtsd::Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let workers = cli.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    if let Some(w) = workers {
        configure_workers(w);
    }
    let parallelism = if workers == Some(1) {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        out_dir,
        parallelism,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::MakeGrans(a) => make_grans(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Forecast(a) => forecast_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::SelectRatio(a) => select_ratio(&ctx, a),
        Command::AnalyzeFft(a) => analyze_fft(&ctx, a),
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CliResult<()> {
    let kind = match &a.kind {
        Some(k) => k.parse::<SyntheticKind>().map_err(|e| Failure::Usage(e.to_string()))?,
        None => ctx.cfg.generate.kind,
    };
    let length = a.length.unwrap_or(ctx.cfg.generate.length);
    let dims = a.dims.unwrap_or(ctx.cfg.generate.dims);
    let ds = generate_synthetic(kind, length, dims, ctx.seed())?;
    ctx.write(&a.output, dataset_csv(&ds))?;
    Ok(())
}

fn gran_specs(ctx: &Ctx, windows: &Option<Vec<usize>>) -> Vec<GranularitySpec> {
    match windows {
        Some(w) => w.iter().map(|&s| GranularitySpec::new(s, 0.0)).collect(),
        None => ctx.cfg.train.granularities.clone(),
    }
}

fn make_grans(ctx: &Ctx, a: MakeGransArgs) -> CliResult<()> {
    let ds = ctx.dataset(&a.data)?;
    let specs = gran_specs(ctx, &a.windows);
    let mg = build_multigran(&ds.values, &specs)?;
    let mut out = String::from("window,t");
    for j in 0..ds.dims() {
        let _ = write!(out, ",dim_{j}");
    }
    out.push('\n');
    for (lvl, &w) in mg.levels.iter().zip(&mg.windows) {
        for t in 0..lvl.rows() {
            let _ = write!(out, "{w},{t}");
            for v in lvl.row(t) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    ctx.write("grans.csv", out)?;
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let ds = ctx.dataset(&a.common.data)?;
    let mut tc = ctx.cfg.train.clone();
    tc.seed = ctx.seed();
    // the last num_windows·H ticks are what `evaluate` scores
    let held_out = if a.full {
        0
    } else {
        ctx.cfg.evaluate.num_windows * tc.prediction_length
    };
    if held_out >= ds.len() {
        return Err(Failure::Core(mgtsd::Error::InvalidArgument(format!(
            "{held_out} held-out ticks leave nothing to train on"
        ))));
    }
    let d = ds.dims();
    let keep = ds.len() - held_out;
    let series = Tensor::matrix(keep, d, ds.values.data()[..keep * d].to_vec());
    log::info!("training on {keep} of {} ticks", ds.len());
    let out = mgtsd::train(&series, tc, ctx.cfg.model.clone())?;
    save_checkpoint(&ctx.out_dir.join("checkpoint.mgtsd"), &out.model)?;
    ctx.write("loss.csv", loss_trace_csv(&out.trace))?;
    Ok(())
}

fn forecast_cmd(ctx: &Ctx, a: ForecastArgs) -> CliResult<()> {
    let model = ctx.checkpoint(&a.common.checkpoint)?;
    let ds = ctx.dataset(&a.common.data)?;
    let fc_cfg = &ctx.cfg.forecast;
    let end = a.context_end.or(fc_cfg.context_end).unwrap_or(ds.len());
    let c = model.train.context_length;
    if end > ds.len() || end < c {
        return Err(Failure::Usage(format!(
            "context end {end} must lie in [{c}, {}]",
            ds.len()
        )));
    }
    let d = ds.dims();
    let context = Tensor::matrix(c, d, ds.values.data()[(end - c) * d..end * d].to_vec());
    let fc = forecast(
        &model,
        &context,
        &ForecastOptions {
            horizon: a.horizon.or(fc_cfg.horizon).unwrap_or(model.train.prediction_length),
            num_samples: a.samples.unwrap_or(fc_cfg.num_samples),
            seed: ctx.seed(),
            include_coarse: a.include_coarse || fc_cfg.include_coarse,
            window_key: 0,
            start_tick: end - c,
            parallelism: ctx.parallelism,
        },
    )?;
    let windows = model.train.windows();
    let mut out = String::from("sample,granularity,t,dim,value\n");
    let (s, h) = (fc.num_samples(), fc.horizon());
    for si in 0..s {
        for (k, &g) in fc.levels.iter().enumerate() {
            for t in 0..h {
                for j in 0..d {
                    let v = fc.samples.data()[((si * fc.levels.len() + k) * h + t) * d + j];
                    let _ = writeln!(out, "{si},{},{t},{j},{v:?}", windows[g]);
                }
            }
        }
    }
    ctx.write("samples.csv", out)?;
    Ok(())
}

/// Reads the finest-granularity rows of a samples CSV into `[S × H × D]`.
fn read_samples(path: &Path) -> CliResult<Tensor> {
    let label = path.display().to_string();
    let bad = |line: usize, msg: &str| {
        Failure::Core(mgtsd::Error::Data {
            path: label.clone(),
            line,
            message: msg.to_string(),
        })
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| bad(1, &e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(1, &e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample", "granularity", "t", "dim", "value"] {
        return Err(bad(1, "expected header sample,granularity,t,dim,value"));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line() as usize), &e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(line, "non-integer index"));
        let value: f64 = rec[4].parse().map_err(|_| bad(line, "non-numeric value"))?;
        if int(1)? == 1 {
            rows.push((int(0)?, int(2)?, int(3)?, value));
        }
    }
    if rows.is_empty() {
        return Err(bad(2, "no finest-granularity rows"));
    }
    let s = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let h = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let d = rows.iter().map(|r| r.2).max().unwrap_or(0) + 1;
    if rows.len() != s * h * d {
        return Err(bad(2, "samples do not form a complete [sample × t × dim] grid"));
    }
    let mut data = vec![f64::NAN; s * h * d];
    for (si, t, j, v) in rows {
        data[(si * h + t) * d + j] = v;
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(bad(2, "duplicate or missing sample entries"));
    }
    Ok(Tensor::new(&[s, h, d], data)?)
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> CliResult<()> {
    let ev = &ctx.cfg.evaluate;
    let scoring = ScoreOptions {
        crps: ev.crps,
        point: ev.point,
    };
    let report = if let Some(samples_path) = &a.samples_file {
        let samples = read_samples(samples_path)?;
        let truth = load_dataset(a.truth.as_ref().expect("required by clap"))?;
        let (s, h, d) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
        if truth.dims() != d || a.truth_start + h > truth.len() {
            return Err(Failure::Core(mgtsd::Error::Shape(format!(
                "truth has {} rows of {} dims, samples need {h} rows of {d} from row {}",
                truth.len(),
                truth.dims(),
                a.truth_start
            ))));
        }
        let obs = Tensor::matrix(h, d, truth.values.data()[a.truth_start * d..(a.truth_start + h) * d].to_vec());
        let (crps_sum, nmae_sum, nrmse_sum) = score_window(&samples, &obs, scoring)?;
        MetricsReport::from_windows(
            vec![WindowMetrics {
                window: 0,
                start: a.truth_start,
                crps_sum,
                nmae_sum,
                nrmse_sum,
            }],
            s,
        )?
    } else {
        let model = ctx.checkpoint(&a.common.checkpoint)?;
        let ds = ctx.dataset(&a.common.data)?;
        rolling_evaluate(
            &model,
            &ds.values,
            &EvalOptions {
                num_windows: a.windows.unwrap_or(ev.num_windows),
                num_samples: a.samples.unwrap_or(ev.num_samples),
                seed: ctx.seed(),
                scoring,
                parallelism: ctx.parallelism,
            },
        )?
    };
    ctx.write("metrics.json", serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

fn select_ratio(ctx: &Ctx, a: CheckpointArgs) -> CliResult<()> {
    let model = ctx.checkpoint(&a.checkpoint)?;
    let ds = ctx.dataset(&a.data)?;
    let sel = &ctx.cfg.select;
    let curves = select_share_ratio(
        &model,
        &ds.values,
        &SelectionOptions {
            windows: ctx.cfg.select_windows()?,
            step_grid: sel.step_grid.clone(),
            num_windows: sel.num_windows,
            num_samples: sel.num_samples,
            seed: ctx.seed(),
            parallelism: ctx.parallelism,
        },
    )?;
    ctx.write("ratio_curve.csv", curves_csv(&curves))?;
    ctx.write("ratio_curve.json", serde_json::to_string_pretty(&curves)? + "\n")?;
    Ok(())
}

fn analyze_fft(ctx: &Ctx, a: MakeGransArgs) -> CliResult<()> {
    let ds = ctx.dataset(&a.data)?;
    let specs = gran_specs(ctx, &a.windows);
    let t_len = ds.len();
    let summed: Vec<f64> = (0..t_len).map(|t| ds.values.row(t).iter().sum()).collect();
    let column = Tensor::matrix(t_len, 1, summed);
    let spectra = specs
        .iter()
        .map(|s| fft_spectrum(smooth(&column, s.window, Smoother::Mean)?.data()))
        .collect::<mgtsd::Result<Vec<_>>>()?;
    let mut out = String::from("bin,frequency");
    for s in &specs {
        let _ = write!(out, ",amplitude_w{}", s.window);
    }
    out.push('\n');
    for k in 0..spectra[0].len() {
        let _ = write!(out, "{k},{:?}", k as f64 / t_len as f64);
        for sp in &spectra {
            let _ = write!(out, ",{:?}", sp[k]);
        }
        out.push('\n');
    }
    ctx.write("spectrum.csv", out)?;
    Ok(())
}
