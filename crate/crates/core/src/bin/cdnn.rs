//! Command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use cdnn::calibration::{calibrate_mesh, CalibrationOptions, MeshDevice, MeshDeviceConfig};
use cdnn::hardware::{ErrorConfig, HardwareErrorModel, ReadoutNoise};
use cdnn::perf;
use cdnn::training::{self, FiconnConfig, ModelParams, SyntheticConfig, TrainConfig, TrainState, VowelDataset};
use cdnn::twin::{self, BenchmarkConfig, TwinArtifact, TwinFitOptions, TwinModel, TwinSource};
use cdnn::unitary::{self, ComplexMatrix, MeshProgram};
use cdnn::{Error, ErrorCategory};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

/// Output schema shared by every JSON artifact the CLI writes.
const CLI_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "cdnn", version, about = "Coherent photonic DNN simulation, calibration and training")]
struct Cli {
    /// TOML file with defaults for any option below.
    #[arg(long, global = true, env = "CDNN_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "CDNN_SEED")]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true, env = "CDNN_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, env = "CDNN_FORMAT")]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decompose a unitary into mesh phases.
    Decompose(DecomposeArgs),
    /// Direct versus twin-corrected programming fidelity over random unitaries.
    FidelityBenchmark(BenchArgs),
    /// Calibrate every heater of a simulated mesh.
    Calibrate(CalibrateArgs),
    /// Fit a digital twin to data from a simulated device.
    TwinFit(TwinArgs),
    /// Train the network in situ (or the digital reference).
    Train(TrainArgs),
    /// Classify a dataset with a trained model.
    Infer(InferArgs),
    /// Latency, throughput and energy models.
    Perf(PerfArgs),
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// JSON file `{"re": [[..]], "im": [[..]]}` with the target matrix.
    #[arg(long, conflicts_with = "haar")]
    input: Option<PathBuf>,
    /// Decompose a Haar-random unitary of this size instead.
    #[arg(long)]
    haar: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    matrices: Option<usize>,
    /// Error-free device.
    #[arg(long)]
    ideal: bool,
    /// Correct with the true error model instead of a fitted twin.
    #[arg(long)]
    oracle_twin: bool,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    size: Option<usize>,
    /// Multiplicative readout noise of the simulated photodiodes.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sweep_points: Option<usize>,
    /// Haar matrices used to check the calibration afterwards.
    #[arg(long, default_value_t = 20)]
    check: usize,
}

#[derive(Args, Debug)]
struct TwinArgs {
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    programs: Option<usize>,
    #[arg(long)]
    vectors: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Vowel CSV; the bundled synthetic set when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    perturbation: Option<f64>,
    /// Also write the per-epoch history as CSV here.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Train the digital reference instead.
    #[arg(long)]
    digital: bool,
    /// Perturb one parameter at a time instead of all at once.
    #[arg(long)]
    forward_difference: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Model written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PerfArgs {
    /// The performance table.
    #[arg(long)]
    table1: bool,
    /// Energy-per-operation sweep over N and M.
    #[arg(long)]
    sweep: bool,
}

/// Defaults read from `--config`; command-line flags and environment win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    format: Option<Format>,
    benchmark: BenchFile,
    calibrate: CalibrateFile,
    twin: TwinFile,
    train: TrainFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    size: Option<usize>,
    matrices: Option<usize>,
    errors: Option<ErrorConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CalibrateFile {
    size: Option<usize>,
    noise: Option<f64>,
    sweep_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TwinFile {
    size: Option<usize>,
    programs: Option<usize>,
    vectors: Option<usize>,
    noise: Option<f64>,
    holdout: Option<usize>,
    errors: Option<ErrorConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    perturbation: Option<f64>,
    decay_epochs: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    seed: u64,
    explicit_seed: Option<u64>,
    format: Format,
    out: Option<PathBuf>,
    file: FileConfig,
}

impl Ctx {
    fn writer(&self) -> CliResult<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn write_json<T: Serialize>(&self, value: &T) -> CliResult<()> {
        let mut w = self.writer()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn json_only(&self, what: &str) -> CliResult<()> {
        match self.format {
            Format::Json => Ok(()),
            Format::Csv => Err(CliError::Usage(format!("{what} is only available as JSON"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

fn read_matrix(path: &Path) -> CliResult<ComplexMatrix> {
    let m: MatrixFile = serde_json::from_reader(File::open(path)?)?;
    let n = m.re.len();
    if n == 0 || m.im.len() != n || m.re.iter().chain(&m.im).any(|r| r.len() != n) {
        return Err(Error::Dimension("matrix file must hold two square arrays of equal size".into()).into());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| Complex64::new(m.re[i][j], m.im[i][j])))
}

#[derive(Serialize)]
struct DecomposeOutput {
    schema_version: u32,
    program: MeshProgram,
    reconstruction_fidelity: f64,
}

fn cmd_decompose(ctx: &Ctx, a: &DecomposeArgs) -> CliResult<()> {
    let u = match (&a.input, a.haar) {
        (Some(p), _) => read_matrix(p)?,
        (None, Some(n)) => unitary::haar_random_unitary(n, ctx.seed)?,
        (None, None) => return Err(CliError::Usage("give --input FILE or --haar N".into())),
    };
    let program = unitary::clements_decompose(&u)?;
    let fid = unitary::fidelity(&u, &unitary::mesh_reconstruct(&program)?)?;
    log::info!("reconstruction fidelity {fid:.15}");
    match ctx.format {
        Format::Json => ctx.write_json(&DecomposeOutput { schema_version: CLI_SCHEMA_VERSION, program, reconstruction_fidelity: fid }),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(ctx.writer()?);
            w.write_record(["heater", "phase"])?;
            for (k, p) in program.heater_phases().iter().enumerate() {
                w.write_record(&[k.to_string(), p.to_string()])?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct BenchOutput {
    schema_version: u32,
    direct_mean: f64,
    direct_std: f64,
    corrected_mean: f64,
    corrected_std: f64,
    rows: Vec<twin::BenchmarkRow>,
}

fn cmd_fidelity_benchmark(ctx: &Ctx, a: &BenchArgs) -> CliResult<()> {
    let f = &ctx.file.benchmark;
    let mut cfg = BenchmarkConfig::fidelity_histogram();
    cfg.seed = ctx.seed;
    cfg.size = a.size.or(f.size).unwrap_or(cfg.size);
    cfg.matrices = a.matrices.or(f.matrices).unwrap_or(cfg.matrices);
    if let Some(e) = &f.errors {
        cfg.errors = e.clone();
    }
    if a.ideal {
        cfg.errors = ErrorConfig::ideal();
    }
    if a.oracle_twin || a.ideal {
        cfg.twin = TwinSource::Truth;
    }
    let result = twin::fidelity_benchmark(&cfg)?;
    let (dm, ds) = result.direct_stats();
    let (cm, cs) = result.corrected_stats();
    log::info!("direct {dm:.4} ± {ds:.4}, corrected {cm:.4} ± {cs:.4}");
    match ctx.format {
        Format::Json => ctx.write_json(&BenchOutput {
            schema_version: CLI_SCHEMA_VERSION,
            direct_mean: dm,
            direct_std: ds,
            corrected_mean: cm,
            corrected_std: cs,
            rows: result.rows,
        }),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(ctx.writer()?);
            for r in &result.rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct CalibrateOutput {
    schema_version: u32,
    calibration: cdnn::calibration::MeshCalibration,
    check_fidelity_mean: f64,
    check_fidelity_min: f64,
}

fn cmd_calibrate(ctx: &Ctx, a: &CalibrateArgs) -> CliResult<()> {
    ctx.json_only("a calibration")?;
    let f = &ctx.file.calibrate;
    let size = a.size.or(f.size).unwrap_or(6);
    let noise = a.noise.or(f.noise).unwrap_or(0.0);
    let mut opts = CalibrationOptions::default();
    opts.sweep_points = a.sweep_points.or(f.sweep_points).unwrap_or(opts.sweep_points);
    let dcfg = MeshDeviceConfig { noise: ReadoutNoise { additive: 0.0, multiplicative: noise }, ..Default::default() };
    let device = MeshDevice::random(size, &dcfg, ctx.seed)?;
    let cal = calibrate_mesh(&device, &opts)?;
    let mut fids = Vec::with_capacity(a.check);
    for k in 0..a.check {
        let u = unitary::haar_random_unitary(size, ctx.seed.wrapping_add(1000 + k as u64))?;
        let currents = cal.currents_for(&unitary::clements_decompose(&u)?)?;
        fids.push(unitary::fidelity(&u, &device.transfer_matrix(&currents)?)?);
    }
    let mean = fids.iter().sum::<f64>() / fids.len().max(1) as f64;
    let min = fids.iter().cloned().fold(f64::INFINITY, f64::min);
    log::info!("programming fidelity over {} checks: mean {mean:.6}, min {min:.6}", a.check);
    ctx.write_json(&CalibrateOutput { schema_version: CLI_SCHEMA_VERSION, calibration: cal, check_fidelity_mean: mean, check_fidelity_min: min })
}

fn cmd_twin_fit(ctx: &Ctx, a: &TwinArgs) -> CliResult<()> {
    ctx.json_only("a twin")?;
    let f = &ctx.file.twin;
    let size = a.size.or(f.size).unwrap_or(6);
    let programs = a.programs.or(f.programs).unwrap_or(50);
    let vectors = a.vectors.or(f.vectors).unwrap_or(20);
    let holdout = a.holdout.or(f.holdout).unwrap_or(10);
    let noise = ReadoutNoise { additive: 0.0, multiplicative: a.noise.or(f.noise).unwrap_or(0.0) };
    let errors = f.errors.clone().unwrap_or_else(ErrorConfig::twin_preset);
    let truth = HardwareErrorModel::random(size, &errors, ctx.seed)?;
    let data = twin::collect_dataset(&truth, programs + holdout, vectors, &noise, ctx.seed.wrapping_add(1))?;
    let init = TwinModel::initial(size, truth.static_phases.clone())?;
    let opts = TwinFitOptions { holdout, tolerance: 1.0, ..Default::default() };
    let (model, report) = twin::fit_twin(&data, &init, &opts)?;
    if let Some((m, s)) = report.held_out_fidelity {
        log::info!("held-out fidelity {m:.5} ± {s:.5}");
    }
    ctx.write_json(&TwinArtifact::new(model, report))
}

/// What `train` writes and `infer` reads.
#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    schema_version: u32,
    /// Seed that generated or split the training data.
    data_seed: u64,
    network: FiconnConfig,
    state: TrainState,
}

fn load_dataset(path: Option<&Path>, seed: u64) -> CliResult<VowelDataset> {
    Ok(match path {
        Some(p) => training::ingest_vowel_csv(p, seed)?,
        None => training::synthetic_vowels(&SyntheticConfig::default(), seed)?,
    })
}

fn write_history(ctx: &Ctx, history: &[training::EpochRecord], extra: Option<&Path>) -> CliResult<()> {
    if let Some(p) = extra {
        training::write_history_csv(history, File::create(p)?)?;
    }
    if ctx.format == Format::Csv {
        training::write_history_csv(history, ctx.writer()?)?;
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> CliResult<()> {
    let f = &ctx.file.train;
    let data = load_dataset(a.data.as_deref().or(f.data.as_deref()), ctx.seed)?;
    let mut tc = TrainConfig { seed: ctx.seed, decay_epochs: f.decay_epochs, ..Default::default() };
    tc.epochs = a.epochs.or(f.epochs).unwrap_or(tc.epochs);
    tc.learning_rate = a.learning_rate.or(f.learning_rate).unwrap_or(tc.learning_rate);
    tc.perturbation = a.perturbation.or(f.perturbation).unwrap_or(tc.perturbation);
    if a.digital {
        let dc = training::DigitalConfig { epochs: tc.epochs, seed: ctx.seed, ..Default::default() };
        let (model, history) = training::train_digital(&data, &dc)?;
        write_history(ctx, &history, a.history.as_deref())?;
        if ctx.format == Format::Json {
            #[derive(Serialize)]
            struct Out<'a> {
                schema_version: u32,
                model: &'a training::DigitalModel,
                history: &'a [training::EpochRecord],
            }
            ctx.write_json(&Out { schema_version: CLI_SCHEMA_VERSION, model: &model, history: &history })?;
        }
        return Ok(());
    }
    let network = FiconnConfig::with_default_errors(training::NUM_FEATURES, 3, ctx.seed)?;
    let state = if a.forward_difference {
        training::forward_difference_train(&data, &network, &tc, None)?
    } else {
        training::train(&data, &network, &tc, None)?
    };
    if let Some(last) = state.history.last() {
        log::info!("epoch {}: train {:.3}, test {:.3}", last.epoch, last.train_accuracy, last.test_accuracy);
    }
    write_history(ctx, &state.history, a.history.as_deref())?;
    if ctx.format == Format::Json {
        ctx.write_json(&ModelArtifact { schema_version: CLI_SCHEMA_VERSION, data_seed: ctx.seed, network, state })?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferOutput {
    schema_version: u32,
    accuracy: f64,
    confusion: [[usize; training::NUM_CLASSES]; training::NUM_CLASSES],
    predictions: Vec<Vec<f64>>,
}

fn cmd_infer(ctx: &Ctx, a: &InferArgs) -> CliResult<()> {
    let artifact: ModelArtifact = serde_json::from_reader(File::open(&a.model)?)?;
    if artifact.schema_version != CLI_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: artifact.schema_version, expected: CLI_SCHEMA_VERSION }.into());
    }
    let params = ModelParams::new(artifact.state.params.size, artifact.state.params.layers, artifact.state.params.theta)?;
    let data = load_dataset(a.data.as_deref(), ctx.explicit_seed.unwrap_or(artifact.data_seed))?;
    let preds = training::predict(&data.test, &params, &artifact.network)?;
    let eval = training::evaluate_predictions(&data.test, &preds)?;
    match ctx.format {
        Format::Json => ctx.write_json(&InferOutput {
            schema_version: CLI_SCHEMA_VERSION,
            accuracy: eval.accuracy,
            confusion: eval.confusion,
            predictions: preds,
        }),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(ctx.writer()?);
            w.write_record(["index", "label", "predicted", "p0", "p1", "p2", "p3", "p4", "p5"])?;
            for (k, (s, p)) in data.test.iter().zip(&preds).enumerate() {
                let mut row = vec![k.to_string(), s.label.to_string(), training::argmax(p).to_string()];
                row.extend(p.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PerfOutput {
    schema_version: u32,
    op_count: u64,
    latency: f64,
    breakdown: perf::EnergyBreakdown,
    table: Option<Vec<perf::PerformanceRow>>,
    sweep: Option<Vec<perf::ScalingPoint>>,
}

fn sweep_points() -> CliResult<Vec<perf::ScalingPoint>> {
    let modes: Vec<u32> = (1..=100).map(|k| 10 * k).collect();
    Ok(perf::scaling_sweep(&modes, &[1, 3, 10])?)
}

fn cmd_perf(ctx: &Ctx, a: &PerfArgs) -> CliResult<()> {
    match ctx.format {
        Format::Csv => {
            if a.table1 == a.sweep {
                return Err(CliError::Usage("CSV output needs exactly one of --table1 or --sweep".into()));
            }
            if a.table1 {
                perf::write_table_csv(&perf::performance_table(), ctx.writer()?)?;
            } else {
                perf::write_scaling_csv(&sweep_points()?, ctx.writer()?)?;
            }
            Ok(())
        }
        Format::Json => ctx.write_json(&PerfOutput {
            schema_version: CLI_SCHEMA_VERSION,
            op_count: perf::op_count(6, 3),
            latency: perf::latency(&perf::LatencySpec::chip()),
            breakdown: perf::energy_breakdown(&perf::ChipBudget::fabricated()),
            table: a.table1.then(perf::performance_table),
            sweep: if a.sweep { Some(sweep_points()?) } else { None },
        }),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        explicit_seed: cli.seed.or(file.seed),
        format: cli.format.or(file.format).unwrap_or(Format::Json),
        out: cli.out.clone(),
        file,
    };
    match &cli.command {
        Command::Decompose(a) => cmd_decompose(&ctx, a),
        Command::FidelityBenchmark(a) => cmd_fidelity_benchmark(&ctx, a),
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::TwinFit(a) => cmd_twin_fit(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Infer(a) => cmd_infer(&ctx, a),
        Command::Perf(a) => cmd_perf(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDNN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Core(c) => match c.category() {
                    ErrorCategory::Usage => EXIT_USAGE,
                    ErrorCategory::Data => EXIT_DATA,
                    ErrorCategory::Convergence => EXIT_CONVERGENCE,
                },
            })
        }
    }
}
