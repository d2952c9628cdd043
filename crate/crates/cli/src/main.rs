use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vqstyle::denoiser::CondMode;
use vqstyle::diffusion::{build_schedule, ScheduleParams};
use vqstyle::image_io::{list_images, load_dir, load_image, save_image, synth_dataset, ImageFormat, ImageTensor, SynthKind, SynthSpec};
use vqstyle::metrics::{evaluate_pair, MetricReport};
use vqstyle::nn::OptimizerKind;
use vqstyle::perceptual::StyleBlendSpec;
use vqstyle::persistence::{Component, RunConfig};
use vqstyle::pipeline::{ModelConfig, StartMode, StyleInput, StylizeOptions, VQ_PREFIX};
use vqstyle::training::{train, Stage, TrainConfig};
use vqstyle::{Checkpoint32 as Checkpoint, StyleModel32 as Model};

#[derive(Parser, Debug)]
#[command(name = "vqstyle", version, about = "Token-space style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic image set.
    SynthData(SynthArgs),
    /// Train the VQ autoencoder.
    TrainVqae(TrainVqaeArgs),
    /// Train the denoiser on top of a trained autoencoder.
    TrainStage1(TrainStage1Args),
    /// Fine-tune the decoder and style-path encoder.
    TrainStage2(TrainStage2Args),
    /// Stylise one content image.
    Stylize(StylizeArgs),
    /// Stylise content/style pairs and report metrics.
    Eval(EvalArgs),
    /// Print the corruption schedule as CSV.
    InspectSchedule(ScheduleArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Seed for every random choice in the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    #[serde(skip)]
    print_config: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Stripes,
    Checker,
    Blobs,
    Noise,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Stripes => SynthKind::Stripes,
            KindArg::Checker => SynthKind::Checker,
            KindArg::Blobs => SynthKind::Blobs,
            KindArg::Noise => SynthKind::Noise,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Stripe band height or checker cell size.
    #[arg(long, default_value_t = 4)]
    period: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum CondArg {
    #[value(name = "cond_kv")]
    CondKv,
    #[value(name = "cond_query")]
    CondQuery,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum OptArg {
    Adam,
    Adamw,
}

/// Denoiser and schedule knobs; unset flags keep the value from the config
/// being extended (or the built-in default).
#[derive(Args, Debug, Clone, Serialize)]
struct DenoiserArgs {
    /// Diffusion steps.
    #[arg(long = "T")]
    diffusion_steps: Option<usize>,
    /// Replacement share of the corruption.
    #[arg(long)]
    u: Option<f64>,
    /// Transformer blocks (2, 4 or 6).
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long, value_enum)]
    cond_mode: Option<CondArg>,
}

impl DenoiserArgs {
    fn apply(&self, mut m: ModelConfig) -> ModelConfig {
        if let Some(v) = self.diffusion_steps {
            m.schedule.steps = v;
        }
        if let Some(v) = self.u {
            m.schedule.u_replace = v;
        }
        if let Some(v) = self.n_blocks {
            m.denoiser.n_blocks = v;
        }
        if let Some(v) = self.d_model {
            m.denoiser.d_model = v;
        }
        if let Some(v) = self.n_heads {
            m.denoiser.n_heads = v;
        }
        if let Some(v) = self.ffn_mult {
            m.denoiser.ffn_mult = v;
        }
        if let Some(v) = self.cond_mode {
            m.denoiser.cond_mode = match v {
                CondArg::CondKv => CondMode::CondKv,
                CondArg::CondQuery => CondMode::CondQuery,
            };
        }
        m.harmonize()
    }
}

/// Training knobs; unset flags keep the stage defaults.
#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptArg>,
    #[arg(long)]
    lambda_style: Option<f64>,
    #[arg(long)]
    lambda_content: Option<f64>,
    #[arg(long)]
    lambda_feature: Option<f64>,
    #[arg(long)]
    lambda_mlm: Option<f64>,
    /// Per-step loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, stage: Stage, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::for_stage(stage);
        c.seed = seed;
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(steps, batch, lr, lambda_style, lambda_content, lambda_feature, lambda_mlm);
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptArg::Adam => OptimizerKind::Adam,
                OptArg::Adamw => OptimizerKind::AdamW,
            };
        }
        c
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainVqaeArgs {
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON run config providing the model settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Codebook size.
    #[arg(long = "K")]
    vocab: Option<usize>,
    #[arg(long)]
    d_code: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    denoiser: DenoiserArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct TrainStage1Args {
    /// Autoencoder checkpoint from `train-vqae`.
    #[arg(long)]
    vqae: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    denoiser: DenoiserArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct TrainStage2Args {
    /// Full checkpoint from `train-stage1`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Encoded,
    Prior,
}

impl From<ModeArg> for StartMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Encoded => StartMode::EncodedStart,
            ModeArg::Prior => StartMode::MaskPrior,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct SampleArgs {
    /// Style strength in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Encoded)]
    mode: ModeArg,
    /// Corruption level of the encoded start; defaults to ceil(0.6 T).
    #[arg(long)]
    t_start: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct StylizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    content: PathBuf,
    /// `path` or `path:weight`; repeat to blend several styles.
    #[arg(long, required = true)]
    style: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    sample: SampleArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Content images; image `i` is paired with style `i mod n_styles`.
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Where stylised outputs are written.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    csv: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    sample: SampleArgs,
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct ScheduleArgs {
    #[arg(long = "T", default_value_t = 25)]
    steps: usize,
    #[arg(long = "K", default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 0.1)]
    u: f64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    print_config: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(vqstyle::Error),
}

impl From<vqstyle::Error> for Failure {
    fn from(e: vqstyle::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Echoes `config` to stderr; returns true when the command should stop here.
fn echo(config: &impl Serialize, print_config: bool) -> bool {
    let json = serde_json::to_string_pretty(config).expect("config serialises");
    if print_config {
        println!("{json}");
        return true;
    }
    eprintln!("{json}");
    false
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SynthData(a) => synth(a),
        Command::TrainVqae(a) => train_vqae(a),
        Command::TrainStage1(a) => train_stage1(a),
        Command::TrainStage2(a) => train_stage2(a),
        Command::Stylize(a) => stylize(a),
        Command::Eval(a) => eval(a),
        Command::InspectSchedule(a) => inspect_schedule(a),
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        period: a.period,
        ..SynthSpec::new(a.kind.into(), a.common.seed, a.size, a.count)
    };
    if echo(&spec, a.common.print_config) {
        return Ok(());
    }
    let paths = synth_dataset(&spec, &a.out)?;
    eprintln!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn write_log(path: &Option<PathBuf>, log: &vqstyle::training::RunLog) -> CliResult<()> {
    if let Some(p) = path {
        log.write_csv(p)?;
    }
    Ok(())
}

fn train_vqae(a: TrainVqaeArgs) -> CliResult<()> {
    let mut model = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    if let Some(v) = a.image_size {
        model.vq.image_size = v;
    }
    if let Some(v) = a.vocab {
        model.vq.vocab = v;
    }
    if let Some(v) = a.d_code {
        model.vq.d_code = v;
    }
    let rc = RunConfig {
        model: a.denoiser.apply(model),
        train: a.train.resolve(Stage::Vqae, a.common.seed),
    };
    if echo(&rc, a.common.print_config) {
        return Ok(());
    }
    let images = load_dir(&a.data)?;
    let mut m = Model::new(rc.model.clone(), a.common.seed)?;
    let out = train(&mut m, &rc.train, &images, &[])?;
    write_log(&a.train.log, &out.log)?;
    Checkpoint::from_model(&m, Component::Vqae, rc.train, Some(&out.optimizer)).save(&a.out)?;
    if let Some(last) = out.log.entries().last() {
        eprintln!("final loss {:.6}; wrote {}", last.total, a.out.display());
    }
    Ok(())
}

fn train_stage1(a: TrainStage1Args) -> CliResult<()> {
    let vq = Checkpoint::load(&a.vqae)?;
    vq.expect_component(Component::Vqae)?;
    let rc = RunConfig {
        model: a.denoiser.apply(vq.config.model.clone()),
        train: a.train.resolve(Stage::Stage1, a.common.seed),
    };
    if echo(&rc, a.common.print_config) {
        return Ok(());
    }
    if rc.model.vq != vq.config.model.vq {
        return Err(Failure::Usage("autoencoder settings cannot change after train-vqae".into()));
    }
    let mut m = Model::new(rc.model.clone(), a.common.seed)?;
    for (name, t) in vq.params.iter() {
        debug_assert!(name.starts_with(VQ_PREFIX));
        m.params.insert(name.clone(), t.clone());
    }
    let (content, style) = (load_dir(&a.content)?, load_dir(&a.style)?);
    let out = train(&mut m, &rc.train, &content, &style)?;
    write_log(&a.train.log, &out.log)?;
    Checkpoint::from_model(&m, Component::Full, rc.train, Some(&out.optimizer)).save(&a.out)?;
    if let Some(last) = out.log.entries().last() {
        eprintln!("final objective {:.6}; wrote {}", last.total, a.out.display());
    }
    Ok(())
}

fn load_full(path: &Path) -> CliResult<(Model, RunConfig)> {
    let c = Checkpoint::load(path)?;
    let rc = c.config.clone();
    Ok((c.into_model()?.0, rc))
}

fn train_stage2(a: TrainStage2Args) -> CliResult<()> {
    let (mut m, prev) = load_full(&a.ckpt)?;
    let rc = RunConfig {
        model: prev.model,
        train: a.train.resolve(Stage::Stage2, a.common.seed),
    };
    if echo(&rc, a.common.print_config) {
        return Ok(());
    }
    let (content, style) = (load_dir(&a.content)?, load_dir(&a.style)?);
    let out = train(&mut m, &rc.train, &content, &style)?;
    write_log(&a.train.log, &out.log)?;
    Checkpoint::from_model(&m, Component::Full, rc.train, Some(&out.optimizer)).save(&a.out)?;
    if let Some(last) = out.log.entries().last() {
        eprintln!("final loss {:.6}; wrote {}", last.total, a.out.display());
    }
    Ok(())
}

/// `path` or `path:weight`, splitting at the last colon when the tail parses as a number.
fn parse_style(s: &str) -> (PathBuf, Option<f64>) {
    if let Some((p, w)) = s.rsplit_once(':') {
        if let Ok(w) = w.parse::<f64>() {
            return (PathBuf::from(p), Some(w));
        }
    }
    (PathBuf::from(s), None)
}

fn style_input(specs: &[String]) -> CliResult<StyleInput> {
    let parsed: Vec<(PathBuf, Option<f64>)> = specs.iter().map(|s| parse_style(s)).collect();
    if let [(p, None)] = parsed.as_slice() {
        return Ok(StyleInput::Single(load_image(p)?));
    }
    let mut weights = Vec::new();
    for (p, w) in &parsed {
        match w {
            Some(w) => weights.push(*w),
            None => return Err(Failure::Usage(format!("style {} needs a weight when blending", p.display()))),
        }
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Failure::Usage(format!("style weights sum to {sum}, expected 1")));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Failure::Usage(format!("style weight {w} outside [0, 1]")));
    }
    if let [(p, Some(w))] = parsed.as_slice() {
        if *w == 1.0 {
            return Ok(StyleInput::Single(load_image(p)?));
        }
    }
    let entries = parsed
        .iter()
        .map(|(p, w)| Ok((load_image(p)?, w.unwrap())))
        .collect::<vqstyle::Result<Vec<_>>>()?;
    Ok(StyleInput::Blend(StyleBlendSpec::with_tolerance(entries, 1e-6)?))
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize> {
    args: &'a A,
    options: StylizeOptions,
}

fn options(s: &SampleArgs, seed: u64, cfg: &ModelConfig) -> CliResult<StylizeOptions> {
    if !(0.0..=1.0).contains(&s.alpha) {
        return Err(Failure::Usage(format!("--alpha {} outside [0, 1]", s.alpha)));
    }
    let t_start = s.t_start.unwrap_or_else(|| cfg.default_t_start());
    if t_start > cfg.schedule.steps {
        return Err(Failure::Usage(format!("--t-start {t_start} exceeds T = {}", cfg.schedule.steps)));
    }
    Ok(StylizeOptions {
        alpha: s.alpha,
        mode: s.mode.into(),
        t_start: Some(t_start),
        seed,
    })
}

fn stylize(a: StylizeArgs) -> CliResult<()> {
    let (m, _) = load_full(&a.ckpt)?;
    let opts = options(&a.sample, a.common.seed, &m.config)?;
    if echo(&Resolved { args: &a, options: opts }, a.common.print_config) {
        return Ok(());
    }
    let style = style_input(&a.style)?;
    let content = load_image(&a.content)?;
    let out = m.stylize(&content, &style, &opts)?;
    save_image(&out.image, &a.out, ImageFormat::from_path(&a.out))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (m, _) = load_full(&a.ckpt)?;
    let opts = options(&a.sample, a.common.seed, &m.config)?;
    if echo(&Resolved { args: &a, options: opts }, a.common.print_config) {
        return Ok(());
    }
    let contents = list_images(&a.content)?;
    let styles = list_images(&a.style)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| vqstyle::Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let enc = m.frozen_encoder()?;
    let mut csv = String::from("content,style,output,ssim,gram_dist,feat_dist\n");
    let mut rows = Vec::new();
    for (i, cp) in contents.iter().enumerate() {
        let sp = &styles[i % styles.len()];
        let (c, s): (ImageTensor, ImageTensor) = (load_image(cp)?, load_image(sp)?);
        let out = m.stylize(&c, &StyleInput::Single(s.clone()), &opts)?;
        let op = a.out_dir.join(format!("out_{i}.png"));
        save_image(&out.image, &op, ImageFormat::Png)?;
        let r = evaluate_pair(&c, &s, &out.image, &enc)?;
        writeln!(csv, "{},{},{},{},{},{}", file_name(cp), file_name(sp), file_name(&op), r.ssim, r.gram_dist, r.feat_dist)
            .unwrap();
        rows.push(r);
    }
    let report = MetricReport::from_pairs(rows)?;
    let mean = report.mean;
    writeln!(csv, "mean,,,{},{},{}", mean.ssim, mean.gram_dist, mean.feat_dist).unwrap();
    std::fs::write(&a.csv, csv).map_err(|e| vqstyle::Error::Io {
        path: a.csv.clone(),
        source: e,
    })?;
    eprintln!("ssim {:.4} gram_dist {:.4} feat_dist {:.6}", mean.ssim, mean.gram_dist, mean.feat_dist);
    Ok(())
}

fn inspect_schedule(a: ScheduleArgs) -> CliResult<()> {
    let params = ScheduleParams {
        steps: a.steps,
        vocab: a.vocab,
        u_replace: a.u,
    };
    if echo(&params, a.print_config) {
        return Ok(());
    }
    let tables = build_schedule(params).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut csv = String::from("t,alpha_bar,gamma_bar,beta_bar,alpha,gamma,beta\n");
    for t in 0..=a.steps {
        writeln!(
            csv,
            "{t},{},{},{},{},{},{}",
            tables.alpha_bar[t], tables.gamma_bar[t], tables.beta_bar[t], tables.alpha[t], tables.gamma[t], tables.beta[t]
        )
        .unwrap();
    }
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| vqstyle::Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => print!("{csv}"),
    }
    Ok(())
}
