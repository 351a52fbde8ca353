//! `kws`: featurize audio, generate synthetic data, train, evaluate, stream
//! and profile the keyword-spotting models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use kws_core::error::KwsError;
use kws_core::eval::{comparison_table, det_csv, evaluate, render_summary, EvalOptions};
use kws_core::features::{
    delta_lfbe, lfbe, read_feature_file, read_pcm_f32, read_pcm_i16, write_feature_file,
    FrameMatrix, LfbeConfig,
};
use kws_core::nn::{
    fold_batchnorm, load_model, profile, reference_config, reference_names, save_model,
    steps_for_input, Divisor, ModelConfig, RefOptions, Weights,
};
use kws_core::streaming::{detect, GruStrategy, StreamModel};
use kws_core::train::{
    gen_synthetic, read_dataset, train_loop, write_dataset, write_history, SyntheticSpec,
    TrainConfig,
};
use kws_core::util::fmt_sig6;

#[derive(Parser)]
#[command(name = "kws", version, about = "streaming keyword-spotting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert raw PCM audio to LFBE feature files
    Featurize(FeaturizeArgs),
    /// Generate a synthetic chirp-in-noise dataset
    Synth(SynthArgs),
    /// Train a named model config on a dataset directory
    Train(TrainArgs),
    /// Evaluate a trained model: DET curve, FA@MR, endpoints, latency
    Eval(EvalArgs),
    /// Stream audio through a trained model, printing posteriors/detections
    Stream(StreamArgs),
    /// Print the parameter and multiply footprint of a config
    Profile(ProfileArgs),
    /// Print receptive field and time steps of a config
    Rf(RfArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DivisorArg {
    Dk,
    #[value(name = "sqrt-dk")]
    SqrtDk,
}

impl From<DivisorArg> for Divisor {
    fn from(d: DivisorArg) -> Self {
        match d {
            DivisorArg::Dk => Divisor::Dk,
            DivisorArg::SqrtDk => Divisor::SqrtDk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PcmFormat {
    Pcm16,
    Pcmf32,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Pcm16,
    Pcmf32,
    Feat,
}

/// Flags that select and shape a named model config.
#[derive(Args)]
struct ConfigArgs {
    /// Named config: crnn239k-ref, crnn58k-ref, cnn-like, dnn-like
    #[arg(long)]
    config: String,
    #[arg(long, value_enum, default_value = "on")]
    attention: Switch,
    #[arg(long, value_enum, default_value = "dk")]
    divisor: DivisorArg,
    #[arg(long = "delta-lfbe", value_enum, default_value = "off")]
    delta_lfbe: Switch,
    /// Dropout rate baked into the config's dropout layers
    #[arg(long, default_value_t = 0.3)]
    dropout: f32,
}

impl ConfigArgs {
    fn build(&self) -> Result<ModelConfig, CliError> {
        let opts = RefOptions {
            attention: self.attention.on(),
            divisor: self.divisor.into(),
            delta: self.delta_lfbe.on(),
            dropout: self.dropout,
        };
        reference_config(&self.config, &opts).ok_or_else(|| {
            CliError::Usage(format!(
                "--config '{}' unknown; available: {}",
                self.config,
                reference_names().join(", ")
            ))
        })
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mel bins (20 or 64)
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long = "pcm-format", value_enum, default_value = "pcm16")]
    pcm_format: PcmFormat,
    #[arg(long = "delta-lfbe", value_enum, default_value = "off")]
    delta_lfbe: Switch,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long = "n-pos", default_value_t = 120)]
    n_pos: usize,
    #[arg(long = "n-neg", default_value_t = 120)]
    n_neg: usize,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 25)]
    duration: usize,
    #[arg(long, default_value_t = 5.0)]
    amplitude: f32,
    #[arg(long, default_value_t = 1.0)]
    sigma: f32,
    #[arg(long, default_value_t = 0.3)]
    distractor: f32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory containing manifest.csv
    #[arg(long)]
    data: PathBuf,
    /// Output model path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Optional step,loss,acc history file
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long = "log-every", default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// DET curve output (threshold,fdr,mr lines)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detection threshold override; default is the FA@MR operating point
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long = "target-mr", default_value_t = 0.15)]
    target_mr: f64,
    #[arg(long, default_value_t = 3)]
    hangover: usize,
    /// Second model to compare against (emits a comparison table)
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "input-format", value_enum, default_value = "pcm16")]
    input_format: InputFormat,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 3)]
    hangover: usize,
    /// Write the report to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Streaming runtime for the recurrent layer
    #[arg(long, value_enum, default_value = "bank")]
    runtime: RuntimeArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuntimeArg {
    Bank,
    Vectorized,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RfArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<KwsError> for CliError {
    fn from(e: KwsError) -> Self {
        match e {
            KwsError::Param(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn check_bins(bins: usize) -> Result<(), CliError> {
    if bins == 20 || bins == 64 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--bins must be 20 or 64, got {bins}"
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Data(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Featurize(a) => featurize(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Stream(a) => stream(a),
        Cmd::Profile(a) => profile_cmd(a),
        Cmd::Rf(a) => rf_cmd(a),
    }
}

fn read_pcm(path: &Path, format: PcmFormat) -> Result<Vec<f32>, CliError> {
    require_file(path, "input")?;
    let pcm = match format {
        PcmFormat::Pcm16 => read_pcm_i16(path)?,
        PcmFormat::Pcmf32 => read_pcm_f32(path)?,
    };
    Ok(pcm)
}

fn featurize(a: FeaturizeArgs) -> Result<(), CliError> {
    check_bins(a.bins)?;
    let pcm = read_pcm(&a.input, a.pcm_format)?;
    let cfg = LfbeConfig::with_bins(a.bins);
    let mut feat = lfbe(&pcm, &cfg)?;
    if a.delta_lfbe.on() {
        feat = delta_lfbe(&feat)?;
    }
    write_feature_file(&a.out, &feat)?;
    println!(
        "featurized {} -> {} ({}x{})",
        a.input.display(),
        a.out.display(),
        feat.num_frames(),
        feat.n_mels()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    check_bins(a.bins)?;
    let spec = SyntheticSpec {
        n_pos: a.n_pos,
        n_neg: a.n_neg,
        n_frames: a.frames,
        chirp_frames: a.duration,
        amplitude: a.amplitude,
        noise_sigma: a.sigma,
        distractor_prob: a.distractor,
        seed: a.seed,
        ..SyntheticSpec::default_for_bins(a.bins, a.seed)
    };
    let examples = gen_synthetic(&spec)?;
    write_dataset(&a.out, &examples)?;
    println!(
        "wrote {} examples ({} positive) to {}",
        examples.len(),
        a.n_pos,
        a.out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<kws_core::train::Example>, CliError> {
    require_file(&dir.join("manifest.csv"), "dataset manifest")?;
    Ok(read_dataset(dir)?)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let data = load_dataset(&a.data)?;
    if let Some(ex) = data.first() {
        if ex.features.num_frames() != cfg.input_frames || ex.features.n_mels() != cfg.n_mels {
            return Err(CliError::Data(format!(
                "dataset examples are {}x{}, config '{}' expects {}x{}",
                ex.features.num_frames(),
                ex.features.n_mels(),
                a.config.config,
                cfg.input_frames,
                cfg.n_mels
            )));
        }
    }
    let tcfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        steps: a.steps,
        dropout: a.config.dropout,
        seed: a.seed,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    let out = train_loop(&cfg, &tcfg, &data)?;
    save_model(&a.out, &cfg, &out.weights, a.seed)?;
    if let Some(hist) = &a.history {
        write_history(hist, &out.history)?;
    }
    if let Some(last) = out.history.last() {
        println!(
            "trained {} steps: loss {} acc {} -> {}",
            a.steps,
            fmt_sig6(last.loss as f64),
            fmt_sig6(last.acc as f64),
            a.out.display()
        );
    }
    Ok(())
}

fn load_model_file(path: &Path) -> Result<(ModelConfig, Weights), CliError> {
    require_file(path, "model")?;
    let (cfg, w, _seed) = load_model(path)?;
    Ok((cfg, w))
}

fn eval_one(
    path: &Path,
    data: &[kws_core::train::Example],
    opts: &EvalOptions,
) -> Result<kws_core::eval::EvalSummary, CliError> {
    let (cfg, w) = load_model_file(path)?;
    Ok(evaluate(&cfg, &w, data, opts)?)
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let data = load_dataset(&a.data)?;
    let opts = EvalOptions {
        target_mr: a.target_mr,
        threshold_override: a.threshold,
        hangover: a.hangover,
        ..EvalOptions::default()
    };
    let summary = eval_one(&a.model, &data, &opts)?;
    if let Some(out) = &a.out {
        fs::write(out, det_csv(&summary.curve)).map_err(KwsError::from)?;
    }
    print!("{}", render_summary(&summary, a.target_mr));
    if let Some(baseline) = &a.baseline {
        let base = eval_one(baseline, &data, &opts)?;
        let rows = [("baseline", &base), ("model", &summary)];
        print!("{}", comparison_table(&rows));
    }
    Ok(())
}

fn stream(a: StreamArgs) -> Result<(), CliError> {
    let (cfg, w) = load_model_file(&a.model)?;
    let (cfg, w) = if cfg.plan()?.has_batchnorm() {
        fold_batchnorm(&cfg, &w)?
    } else {
        (cfg, w)
    };
    let strategy = match a.runtime {
        RuntimeArg::Bank => GruStrategy::DecoderBank,
        RuntimeArg::Vectorized => GruStrategy::Vectorized,
    };
    let model = StreamModel::build(&cfg, &w, strategy)?;
    require_file(&a.input, "input")?;
    let feat: FrameMatrix = match a.input_format {
        InputFormat::Feat => read_feature_file(&a.input)?,
        InputFormat::Pcm16 | InputFormat::Pcmf32 => {
            let pcm = match a.input_format {
                InputFormat::Pcm16 => read_pcm_i16(&a.input)?,
                _ => read_pcm_f32(&a.input)?,
            };
            lfbe(&pcm, &LfbeConfig::with_bins(model.n_mels()))?
        }
    };
    let mut state = model.new_state();
    let mut events = Vec::new();
    for i in 0..feat.num_frames() {
        events.extend(state.push_frame(feat.row(i))?);
    }
    let mut report = String::new();
    for ev in &events {
        report.push_str(&format!(
            "{},{},{}\n",
            ev.window,
            ev.end_frame,
            fmt_sig6(ev.posterior.wakeword() as f64)
        ));
    }
    for d in detect(&events, a.threshold, a.hangover, model.window_len())? {
        report.push_str(&format!(
            "DET,{},{},{}\n",
            d.start_frame,
            d.end_frame,
            fmt_sig6(d.score as f64)
        ));
    }
    match &a.out {
        Some(path) => fs::write(path, report).map_err(KwsError::from)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn profile_cmd(a: ProfileArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let p = profile(&cfg)?;
    println!("layer,params,multiplies");
    for row in &p.rows {
        println!("{},{},{}", row.label, row.params, row.multiplies);
    }
    println!("total,{},{}", p.params, p.multiplies);
    Ok(())
}

fn rf_cmd(a: RfArgs) -> Result<(), CliError> {
    let cfg = a.config.build()?;
    let plan = cfg.plan()?;
    let steps = steps_for_input(&plan.conv_chain, cfg.input_frames)
        .ok_or_else(|| CliError::Data("config consumes more frames than its input".into()))?;
    println!("rf={} steps={}", plan.receptive, steps);
    Ok(())
}
