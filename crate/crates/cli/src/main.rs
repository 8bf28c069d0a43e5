use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ernn_core::bench::{bench, BenchConfig, BenchReport};
use ernn_core::calibrate::CalibrationError;
use ernn_core::cells::CellError;
use ernn_core::compare::{compare, CompareReport};
use ernn_core::features::{FeatureError, Utterance};
use ernn_core::modelio::{self, count_params, file_size_estimate, ParamCount};
use ernn_core::rnnt::DEFAULT_MAX_SYMBOLS_PER_FRAME;
use ernn_core::train::{demo_train, TrainConfig, TrainError, TrainLog};
use ernn_core::{BlockShape, CellKind, Model, ModelError, QuantMode, TopologyConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ernn",
    version,
    about = "Block-sparse, quantized RNN-T models: prune, calibrate, convert, run and benchmark"
)]
struct Cli {
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts and file sizes for a topology or model.
    Info(InfoArgs),
    /// Write a seeded random float model.
    Init(InitArgs),
    /// Block-prune the input and recurrent matrices of a float model.
    Prune(PruneArgs),
    /// Collect dynamic ranges from float inference into a stats file.
    Calibrate(CalibrateArgs),
    /// Convert a float model to hybrid or integer form.
    Convert(ConvertArgs),
    /// Greedy-decode feature files.
    Run(RunArgs),
    /// Measure the real-time factor.
    Bench(BenchArgs),
    /// Per-layer output deltas and decode agreement of two models.
    Compare(CompareArgs),
    /// Train a small LSTM on a delayed-echo task with gradual pruning.
    DemoTrain(DemoTrainArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Baseline,
    BaselineCifg,
    TinyLstm,
    TinyCifg,
    TinySru,
}

impl Preset {
    fn topology(self) -> TopologyConfig {
        match self {
            Preset::Baseline => TopologyConfig::baseline(),
            Preset::BaselineCifg => TopologyConfig::baseline_cifg(),
            Preset::TinyLstm => TopologyConfig::tiny(CellKind::Lstm),
            Preset::TinyCifg => TopologyConfig::tiny(CellKind::Cifg),
            Preset::TinySru => TopologyConfig::tiny(CellKind::Sru),
        }
    }
}

#[derive(Args)]
struct TopologySource {
    /// Topology file (TOML).
    #[arg(long, conflicts_with = "preset")]
    topology: Option<PathBuf>,

    /// Built-in topology.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl TopologySource {
    fn resolve(&self) -> Result<Option<TopologyConfig>> {
        match (&self.topology, self.preset) {
            (Some(p), _) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let t = TopologyConfig::from_toml_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                Ok(Some(t))
            }
            (None, Some(preset)) => Ok(Some(preset.topology())),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args)]
struct InfoArgs {
    /// Model file to describe.
    #[arg(long, conflicts_with_all = ["topology", "preset"])]
    model: Option<PathBuf>,

    #[command(flatten)]
    source: TopologySource,

    /// Describe the topology with this W/R sparsity applied.
    #[arg(long)]
    sparsity: Option<f64>,

    #[arg(long, default_value = "16x1")]
    block: BlockShape,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    source: TopologySource,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,

    /// Fraction of W/R blocks to remove.
    #[arg(long)]
    sparsity: f64,

    #[arg(long, default_value = "16x1")]
    block: BlockShape,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Feature file (binary, or whitespace-separated text with a .txt extension). Repeatable.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,

    /// Directory of feature files; reads every `.feat` (binary) and `.txt` file in name order.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Frame duration in milliseconds; overrides the value stored in binary feature files.
    #[arg(long)]
    frame_ms: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    inputs: Inputs,

    #[arg(long, default_value_t = DEFAULT_MAX_SYMBOLS_PER_FRAME)]
    max_symbols: usize,

    /// Stats file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetMode {
    Hybrid,
    Integer,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,

    #[arg(long, value_enum)]
    mode: TargetMode,

    /// Calibration stats; required for integer conversion.
    #[arg(long)]
    stats: Option<PathBuf>,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    inputs: Inputs,

    #[arg(long, default_value_t = DEFAULT_MAX_SYMBOLS_PER_FRAME)]
    max_symbols: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,

    #[command(flatten)]
    inputs: Inputs,

    #[arg(long, default_value_t = 0.9)]
    percentile: f64,

    #[arg(long, default_value_t = 1)]
    repetitions: usize,

    /// Untimed passes over the inputs before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,

    #[arg(long, default_value_t = DEFAULT_MAX_SYMBOLS_PER_FRAME)]
    max_symbols: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,

    #[arg(long)]
    b: PathBuf,

    #[command(flatten)]
    inputs: Inputs,

    #[arg(long, default_value_t = DEFAULT_MAX_SYMBOLS_PER_FRAME)]
    max_symbols: usize,
}

#[derive(Args)]
struct DemoTrainArgs {
    /// Final W/R block sparsity.
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,

    #[arg(long, default_value_t = 600)]
    steps: u64,

    #[arg(long, default_value_t = 32)]
    hidden: usize,

    #[arg(long, default_value_t = 16)]
    projection: usize,

    #[arg(long, default_value_t = 2)]
    input_width: usize,

    #[arg(long, default_value_t = 2)]
    delay: usize,

    #[arg(long, default_value_t = 16)]
    seq_len: usize,

    #[arg(long, default_value_t = 8)]
    batch: usize,

    #[arg(long, default_value_t = 2.0)]
    learning_rate: f64,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value = "4x1")]
    block: BlockShape,

    #[arg(long, default_value_t = 50)]
    start_step: u64,

    #[arg(long, default_value_t = 400)]
    end_step: u64,

    #[arg(long, default_value_t = 25)]
    interval: u64,

    #[arg(long, default_value_t = 3)]
    exponent: u32,

    #[arg(long, default_value_t = 25)]
    log_interval: u64,
}

/// Bad flag combinations detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            if m.is_numeric() {
                return EXIT_NUMERIC;
            }
        }
        if matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Divergence { .. }))
            || matches!(cause.downcast_ref::<CellError>(), Some(CellError::NonFinite { .. }))
            || matches!(cause.downcast_ref::<CalibrationError>(), Some(CalibrationError::NonFinite { .. }))
        {
            return EXIT_NUMERIC;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let f = cli.format;
    match &cli.command {
        Command::Info(a) => info(a, f),
        Command::Init(a) => init(a, f),
        Command::Prune(a) => prune(a, f),
        Command::Calibrate(a) => calibrate(a, f),
        Command::Convert(a) => convert(a, f),
        Command::Run(a) => run(a, f),
        Command::Bench(a) => bench_cmd(a, f),
        Command::Compare(a) => compare_cmd(a, f),
        Command::DemoTrain(a) => demo_train_cmd(a, f),
    }
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    use std::io::Write;
    let body = match format {
        Format::Json => serde_json::to_string_pretty(value)? + "\n",
        Format::Text => text(),
    };
    let mut out = std::io::stdout().lock();
    match out.write_all(body.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    modelio::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn save_model(model: &Model, path: &Path) -> Result<u64> {
    modelio::save(model, path).with_context(|| format!("writing model {}", path.display()))
}

fn load_feature_file(path: &Path, frame_ms: Option<f64>) -> Result<Utterance, FeatureError> {
    let text = path.extension().is_some_and(|e| e == "txt");
    let mut u = if text {
        let duration = frame_ms.map_or(ernn_core::features::DEFAULT_FRAME_DURATION, |ms| (ms / 1000.0) as f32);
        let u = Utterance::from_text(&std::fs::read_to_string(path)?, duration)?;
        u.with_id(path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()))
    } else {
        Utterance::load(path)?
    };
    if let Some(ms) = frame_ms {
        u.frame_duration = (ms / 1000.0) as f32;
        u.validate()?;
    }
    Ok(u)
}

impl Inputs {
    fn load(&self) -> Result<Vec<Utterance>> {
        if let Some(ms) = self.frame_ms {
            if !(ms > 0.0 && ms.is_finite()) {
                return usage(format!("--frame-ms must be positive, got {ms}"));
            }
        }
        let mut paths = self.inputs.clone();
        if let Some(dir) = &self.data {
            let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading directory {}", dir.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "feat" || e == "txt"));
            found.sort();
            paths.extend(found);
        }
        if paths.is_empty() {
            return usage("no inputs: pass --input FILE or --data DIR");
        }
        paths
            .iter()
            .map(|p| load_feature_file(p, self.frame_ms).with_context(|| format!("reading features {}", p.display())))
            .collect()
    }
}

#[derive(Serialize)]
struct SizeEstimate {
    mode: &'static str,
    bytes: u64,
    mib: f64,
}

#[derive(Serialize)]
struct ModelInfo {
    path: String,
    mode: &'static str,
    stored_params: usize,
    file_bytes: u64,
}

#[derive(Serialize)]
struct InfoReport {
    topology: TopologyConfig,
    params: ParamCount,
    size_estimates: Vec<SizeEstimate>,
    model: Option<ModelInfo>,
}

fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

fn info(a: &InfoArgs, format: Format) -> Result<()> {
    let (mut topology, model) = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            let info = ModelInfo {
                path: p.display().to_string(),
                mode: m.mode().tag(),
                stored_params: m.stored_params(),
                file_bytes: std::fs::metadata(p)?.len(),
            };
            (m.topology().clone(), Some(info))
        }
        None => match a.source.resolve()? {
            Some(t) => (t, None),
            None => return usage("info needs --model, --topology or --preset"),
        },
    };
    if let Some(s) = a.sparsity {
        topology = topology.with_sparsity(s, a.block);
        topology.validate()?;
    }
    let params = count_params(&topology)?;
    let size_estimates = [QuantMode::Float32, QuantMode::Hybrid8, QuantMode::Integer8_16]
        .into_iter()
        .map(|m| {
            let bytes = file_size_estimate(&topology, m);
            SizeEstimate { mode: m.tag(), bytes, mib: mib(bytes) }
        })
        .collect();
    let report = InfoReport { topology, params, size_estimates, model };
    emit(format, &report, || {
        let p = &report.params;
        let mut s = String::new();
        let layers = report.topology.named_layers();
        s += &format!(
            "topology: {} encoder + {} prediction layers, feature width {}, vocab {}\n",
            report.topology.encoder.layers.len(),
            report.topology.prediction.layers.len(),
            report.topology.feature_width,
            report.topology.vocab_size
        );
        for (name, l) in layers {
            let sparsity = l.sparsity.map_or(String::new(), |s| format!(", sparsity {s} ({})", l.block_shape()));
            s += &format!("  {name}: {} {}→{}→{}{}\n", l.cell, l.input, l.hidden, l.projection, sparsity);
        }
        s += &format!("parameters: {} ({:.2}M)\n", p.total, p.total as f64 / 1e6);
        s += &format!(
            "  encoder {}  prediction {}  embedding {}  joint {}\n  prunable W/R {} of {} dense\n",
            p.encoder, p.prediction, p.embedding, p.joint, p.prunable_retained, p.prunable_dense
        );
        for e in &report.size_estimates {
            s += &format!("size estimate {:<12} {:>12} bytes ({:.1} MiB)\n", e.mode, e.bytes, e.mib);
        }
        if let Some(m) = &report.model {
            s += &format!(
                "model {}: {}, {} stored params, {} bytes ({:.1} MiB)\n",
                m.path,
                m.mode,
                m.stored_params,
                m.file_bytes,
                mib(m.file_bytes)
            );
        }
        s
    })
}

#[derive(Serialize)]
struct WriteReport {
    path: String,
    mode: &'static str,
    bytes: u64,
    stored_params: usize,
}

fn write_report(model: &Model, path: &Path, bytes: u64, format: Format) -> Result<()> {
    let r = WriteReport {
        path: path.display().to_string(),
        mode: model.mode().tag(),
        bytes,
        stored_params: model.stored_params(),
    };
    emit(format, &r, || format!("wrote {} ({}, {} params, {} bytes)\n", r.path, r.mode, r.stored_params, r.bytes))
}

fn init(a: &InitArgs, format: Format) -> Result<()> {
    let Some(t) = a.source.resolve()? else {
        return usage("init needs --topology or --preset");
    };
    let m = Model::random(&t, a.seed)?;
    let n = save_model(&m, &a.out)?;
    write_report(&m, &a.out, n, format)
}

fn prune(a: &PruneArgs, format: Format) -> Result<()> {
    if !(0.0..=1.0).contains(&a.sparsity) {
        return usage(format!("--sparsity must be in [0, 1], got {}", a.sparsity));
    }
    let m = load_model(&a.model)?.prune(a.sparsity, a.block)?;
    let n = save_model(&m, &a.out)?;
    write_report(&m, &a.out, n, format)
}

#[derive(Serialize)]
struct CalibrateReport {
    path: String,
    utterances: usize,
    tensors: usize,
}

fn calibrate(a: &CalibrateArgs, format: Format) -> Result<()> {
    let m = load_model(&a.model)?;
    let data: Vec<Vec<Vec<f32>>> = a.inputs.load()?.into_iter().map(|u| u.frames).collect();
    let obs = ernn_core::calibrate::calibrate_model_with(&m, &data, a.max_symbols)?;
    modelio::save_stats(&obs, &a.out).with_context(|| format!("writing stats {}", a.out.display()))?;
    let r = CalibrateReport { path: a.out.display().to_string(), utterances: data.len(), tensors: obs.ranges().len() };
    emit(format, &r, || format!("wrote {} ({} tensors from {} utterances)\n", r.path, r.tensors, r.utterances))
}

fn convert(a: &ConvertArgs, format: Format) -> Result<()> {
    let m = load_model(&a.model)?;
    let out = match a.mode {
        TargetMode::Hybrid => m.to_hybrid()?,
        TargetMode::Integer => {
            let Some(stats) = &a.stats else {
                return usage("integer conversion needs --stats FILE (see `ernn calibrate`)");
            };
            let obs = modelio::load_stats(stats).with_context(|| format!("loading stats {}", stats.display()))?;
            m.to_integer(&obs.finalize()?)?
        }
    };
    let n = save_model(&out, &a.out)?;
    write_report(&out, &a.out, n, format)
}

#[derive(Serialize)]
struct Decoded {
    id: String,
    frames: usize,
    tokens: Vec<u32>,
}

fn run(a: &RunArgs, format: Format) -> Result<()> {
    let m = load_model(&a.model)?;
    let mut out = Vec::new();
    for (i, u) in a.inputs.load()?.iter().enumerate() {
        let id = u.id.clone().unwrap_or_else(|| format!("#{i}"));
        let tokens = m.greedy_decode(&u.frames, a.max_symbols).with_context(|| format!("decoding {id}"))?;
        out.push(Decoded { id, frames: u.frames.len(), tokens });
    }
    emit(format, &out, || {
        out.iter()
            .map(|d| {
                let toks: Vec<String> = d.tokens.iter().map(u32::to_string).collect();
                format!("{}\t{}\n", d.id, toks.join(" "))
            })
            .collect()
    })
}

fn bench_cmd(a: &BenchArgs, format: Format) -> Result<()> {
    if !(a.percentile > 0.0 && a.percentile <= 1.0) {
        return usage(format!("--percentile must be in (0, 1], got {}", a.percentile));
    }
    if a.repetitions == 0 {
        return usage("--repetitions must be at least 1");
    }
    let m = load_model(&a.model)?;
    let utts = a.inputs.load()?;
    let cfg = BenchConfig {
        repetitions: a.repetitions,
        warmup: a.warmup,
        percentile: a.percentile,
        max_symbols_per_frame: a.max_symbols,
    };
    let r: BenchReport = bench(&m, &utts, &cfg)?;
    emit(format, &r, || {
        let mut s = format!("mode {}, {} params, {} utterances\n", r.mode, r.stored_params, r.utterances.len());
        for u in &r.utterances {
            s += &format!(
                "  {:<16} {:>6} frames {:>8.3} s audio {:>9.5} s wall  RT {:.4}\n",
                u.id, u.frames, u.audio_seconds, u.wall_seconds, u.rt
            );
        }
        s += &format!("RT({}) = {:.4}  mean {:.4}  max {:.4}\n", r.percentile, r.rt_percentile, r.rt_mean, r.rt_max);
        s
    })
}

fn compare_cmd(a: &CompareArgs, format: Format) -> Result<()> {
    let ma = load_model(&a.a)?;
    let mb = load_model(&a.b)?;
    let utts = a.inputs.load()?;
    let r: CompareReport = compare(&ma, &mb, &utts, a.max_symbols)?;
    emit(format, &r, || {
        let mut s = format!("{} vs {}\n", r.mode_a, r.mode_b);
        for l in &r.layers {
            s += &format!("  {:<14} max |Δ| {:.6}  mean |Δ| {:.6}\n", l.layer, l.max_abs, l.mean_abs);
        }
        s += &format!("token agreement {:.2}%\n", 100.0 * r.agreement);
        s
    })
}

fn demo_train_cmd(a: &DemoTrainArgs, format: Format) -> Result<()> {
    let cfg = TrainConfig {
        input: a.input_width,
        hidden: a.hidden,
        projection: a.projection,
        delay: a.delay,
        seq_len: a.seq_len,
        batch: a.batch,
        steps: a.steps,
        learning_rate: a.learning_rate,
        seed: a.seed,
        final_sparsity: a.sparsity,
        start_step: a.start_step,
        end_step: a.end_step,
        mask_update_interval: a.interval,
        exponent: a.exponent,
        block: a.block,
        log_interval: a.log_interval,
        ..TrainConfig::default()
    };
    if let Err(e @ TrainError::Config(_)) = cfg.validate() {
        return usage(e.to_string());
    }
    let log: TrainLog = demo_train(&cfg)?;
    emit(format, &log, || {
        let mut s = format!(
            "{:>6} {:>10} {:>8} {:>8} {:>6} {:>9}\n",
            "step", "loss", "target", "sparsity", "churn", "recovered"
        );
        for e in &log.entries {
            s += &format!(
                "{:>6} {:>10.6} {:>8.4} {:>8.4} {:>6} {:>9}\n",
                e.step, e.loss, e.target_sparsity, e.sparsity, e.churn, e.recovered
            );
        }
        s += &format!(
            "loss {:.6} -> {:.6}, final sparsity {:.4}, {} mask updates, {} blocks recovered\n",
            log.initial_loss, log.final_loss, log.final_sparsity, log.total_mask_updates, log.total_recovered
        );
        s
    })
}
