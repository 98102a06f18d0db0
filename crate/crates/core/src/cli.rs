//! Command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::background::{fit_background, BackgroundModel};
use crate::baseline::{train_objectness, MisvmConfig, ObjectnessConfig};
use crate::col::{ColConfig, ColModel, InitStrategy};
use crate::dataio::{generate_synthetic, Dataset, FullImageContext, SyntheticWorldSpec};
use crate::directional::{bessel_ratio, estimate_kappa, KappaRule, DEFAULT_KAPPA_MAX};
use crate::episodes::{read_episodes, sample_benchmark, write_episodes, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_detections, ApInterpolation, Detection, EpisodeMetrics, EvalOptions, MetricsReport,
};
use crate::optim::LbfgsConfig;
use crate::pipeline::{
    self, col_episode, map_episodes, wsod_episode, EpisodeOutcome, Method, SupportSummary,
    WsodSettings,
};
use crate::wsod::{DetectConfig, TrainConfig};

pub const LOG_ENV: &str = "VMFMIL_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "vmfmil",
    version,
    about = "vMF multiple-instance learning for few-shot localization and detection"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed for sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Episode-level worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// error, warn, info, debug or trace; overrides VMFMIL_LOG.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Output path (a directory for `synth`); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthArgs),
    /// Fit the background model on the base split.
    FitBackground(FitBackgroundArgs),
    /// Common-object localization benchmark.
    Col(ColArgs),
    /// Weakly supervised detection benchmark.
    Wsod(WsodArgs),
    /// Re-score serialized detections.
    Eval(EvalArgs),
    /// Tabulate every κ estimator over a grid of r̄.
    KappaTable(KappaTableArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ContextArg {
    Uniform,
    BackgroundMean,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 4)]
    pub num_base_classes: usize,
    #[arg(long, default_value_t = 20)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 50.0)]
    pub kappa_class: f64,
    #[arg(long, default_value_t = 5.0)]
    pub kappa_background: f64,
    #[arg(long, default_value_t = 20)]
    pub proposals: usize,
    #[arg(long, default_value_t = 1)]
    pub positives: usize,
    #[arg(long, default_value_t = 0.6)]
    pub full_image_mix: f64,
    #[arg(long, value_enum, default_value_t = ContextArg::Uniform)]
    pub context: ContextArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackgroundVariant {
    Vmf,
    Objectness,
    Uniform,
}

#[derive(Debug, Args)]
pub struct FitBackgroundArgs {
    /// Dataset descriptor (dataset.json).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub iou_thresh: f64,
    #[arg(long, default_value = "exact")]
    pub kappa_rule: String,
    #[arg(long, default_value_t = DEFAULT_KAPPA_MAX)]
    pub kappa_max: f64,
    #[arg(long, value_enum, default_value_t = BackgroundVariant::Vmf)]
    pub variant: BackgroundVariant,
    /// Scale of the objectness variant.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Vmf,
    Gaussian,
    TukeyGaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InterpArg {
    #[value(name = "all-point")]
    AllPoint,
    #[value(name = "11pt")]
    ElevenPoint,
}

/// Flags shared by the benchmark subcommands.
#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Background model JSON from `fit-background`; uniform when omitted.
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: u64,
    /// Query images per episode.
    #[arg(long, default_value_t = 5)]
    pub num_query: usize,
    /// Replay these episodes instead of sampling.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Write the episodes used to this file.
    #[arg(long)]
    pub save_episodes: Option<PathBuf>,
    /// Per-episode results as JSON lines.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Query detections as JSON lines.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// EM iterations T; 0 keeps the prototypical direction.
    #[arg(long, default_value_t = 8)]
    pub em_iters: usize,
    /// κ update rule; κ stays at --kappa-init when omitted.
    #[arg(long)]
    pub kappa_rule: Option<String>,
    /// Initial κ (default 0.1·d).
    #[arg(long)]
    pub kappa_init: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_KAPPA_MAX)]
    pub kappa_max: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = ModelArg::Vmf)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Random θ initialization instead of the prototype.
    #[arg(long)]
    pub random_init: bool,
    /// NMS IoU on query detections; negative disables NMS.
    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    #[arg(long, value_enum, default_value_t = InterpArg::AllPoint)]
    pub ap_interp: InterpArg,
    /// Evaluate all episodes as one detection set.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Args)]
pub struct ColArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct WsodArgs {
    #[command(flatten)]
    pub bench: BenchArgs,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// vmf, misvm or proto-init.
    #[arg(long, default_value = "vmf")]
    pub method: String,
    #[arg(long, default_value_t = 20.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2_reg: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_reg: f64,
    #[arg(long, default_value_t = 10)]
    pub max_rounds: usize,
    /// Give MI-SVM K sampled negative images per class.
    #[arg(long)]
    pub extra_negatives: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Detections as JSON lines.
    #[arg(long)]
    pub detections: PathBuf,
    /// Episodes file; without it the detections are scored as one set over
    /// every novel-class image.
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    #[arg(long, value_enum, default_value_t = InterpArg::AllPoint)]
    pub ap_interp: InterpArg,
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Args)]
pub struct KappaTableArgs {
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    /// Comma-separated r̄ values; overrides --steps.
    #[arg(long, value_delimiter = ',')]
    pub rbar: Option<Vec<f64>>,
    /// Grid size over [0, 1).
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_KAPPA_MAX)]
    pub kappa_max: f64,
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.global.log_level.as_deref());
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                3
            } else {
                2
            }
        }
    }
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let mut builder = env_logger::Builder::from_env(env);
    if let Some(l) = level {
        builder.parse_filters(l);
    }
    let _ = builder.try_init();
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.workers == 0 {
        return Err(Error::InvalidConfig("--workers must be >= 1".into()));
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(g, a),
        Command::FitBackground(a) => cmd_fit_background(g, a),
        Command::Col(a) => cmd_col(g, a),
        Command::Wsod(a) => cmd_wsod(g, a),
        Command::Eval(a) => cmd_eval(g, a),
        Command::KappaTable(a) => cmd_kappa_table(g, a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(out, &s)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let spec = SyntheticWorldSpec {
        d: a.d,
        num_classes: a.num_classes,
        num_base_classes: a.num_base_classes,
        kappa_class: a.kappa_class,
        kappa_background: a.kappa_background,
        proposals_per_image: a.proposals,
        positives_per_image: a.positives,
        full_image_mix: a.full_image_mix,
        full_image_context: match a.context {
            ContextArg::Uniform => FullImageContext::Uniform,
            ContextArg::BackgroundMean => FullImageContext::BackgroundMean,
        },
        seed: g.seed,
    };
    let world = generate_synthetic(&spec, a.images_per_class)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let (descriptor, truth) = world.save(&dir)?;
    println!("dataset: {}", descriptor.display());
    println!("truth: {}", truth.display());
    Ok(())
}

fn cmd_fit_background(g: &Global, a: &FitBackgroundArgs) -> Result<()> {
    let model = match a.variant {
        BackgroundVariant::Uniform => BackgroundModel::Uniform,
        BackgroundVariant::Objectness => BackgroundModel::Objectness { alpha: a.alpha },
        BackgroundVariant::Vmf => {
            let dataset = Dataset::load(&a.dataset)?;
            let rule: KappaRule = a.kappa_rule.parse()?;
            let fit = fit_background(&dataset, a.iou_thresh, rule, a.kappa_max)?;
            info!(
                "background fit on {} negatives from {} images",
                fit.num_negatives, fit.num_images
            );
            fit.model
        }
    };
    model.validate()?;
    emit_json(g.out.as_deref(), &model)
}

fn load_background(path: Option<&Path>) -> Result<BackgroundModel> {
    match path {
        Some(p) => {
            let m: BackgroundModel = serde_json::from_str(&fs::read_to_string(p)?)?;
            m.validate()?;
            Ok(m)
        }
        None => Ok(BackgroundModel::Uniform),
    }
}

fn col_config(b: &BenchArgs) -> Result<ColConfig> {
    let cfg = ColConfig {
        kappa_rule: b.kappa_rule.as_deref().map(str::parse).transpose()?,
        kappa_init: b.kappa_init,
        kappa_max: b.kappa_max,
        max_iters: b.em_iters,
        lambda: b.lambda,
        model: match b.model {
            ModelArg::Vmf => ColModel::Vmf,
            ModelArg::Gaussian => ColModel::Gaussian { sigma: b.sigma },
            ModelArg::TukeyGaussian => ColModel::TukeyGaussian {
                beta: b.beta,
                sigma: b.sigma,
            },
        },
        init: if b.random_init {
            InitStrategy::Random { seed: 0 }
        } else {
            InitStrategy::Prototypical
        },
        ..ColConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn eval_options(iou_thresh: f64, interp: InterpArg) -> Result<EvalOptions> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidConfig(format!(
            "--iou-thresh {iou_thresh} outside [0, 1]"
        )));
    }
    let interp = match interp {
        InterpArg::AllPoint => ApInterpolation::AllPoint,
        InterpArg::ElevenPoint => ApInterpolation::ElevenPoint,
    };
    Ok(EvalOptions { iou_thresh, interp })
}

fn detect_config(b: &BenchArgs) -> DetectConfig {
    DetectConfig {
        nms_iou: (b.nms_iou >= 0.0).then_some(b.nms_iou),
        score_threshold: None,
    }
}

fn episodes_for(
    g: &Global,
    b: &BenchArgs,
    dataset: &Dataset,
    spec: EpisodeSpec,
) -> Result<Vec<Episode>> {
    spec.validate()?;
    let episodes = match &b.replay {
        Some(p) => read_episodes(p, &dataset.index)?,
        None => sample_benchmark(&dataset.index, spec, b.episodes, g.seed)
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some(p) = &b.save_episodes {
        write_episodes(&episodes, p)?;
    }
    Ok(episodes)
}

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    command: &'a str,
    method: &'a str,
    n_way: usize,
    k_shot: usize,
    seed: u64,
    episodes: usize,
    /// Query-set metrics; `null` for an empty run.
    report: Option<MetricsReport>,
    /// CorLoc of the boxes selected in the support images.
    support: Option<SupportSummary>,
}

fn finish_bench(
    g: &Global,
    b: &BenchArgs,
    dataset: &Dataset,
    episodes: &[Episode],
    outcomes: &[EpisodeOutcome],
    head: (&str, &str, usize),
) -> Result<()> {
    let opts = eval_options(b.iou_thresh, b.ap_interp)?;
    if let Some(p) = &b.results {
        write_jsonl(p, outcomes)?;
    }
    if let Some(p) = &b.detections {
        write_jsonl(p, outcomes.iter().flat_map(|o| o.detections.iter()))?;
    }
    let report = pipeline::report(outcomes, b.pooled, dataset, episodes, opts)?;
    if let Some(r) = &report {
        info!("{}", r.summary_line(head.1));
    }
    emit_json(
        g.out.as_deref(),
        &BenchReport {
            command: head.0,
            method: head.1,
            n_way: head.2,
            k_shot: b.k,
            seed: g.seed,
            episodes: episodes.len(),
            report,
            support: pipeline::support_summary(outcomes),
        },
    )
}

fn cmd_col(g: &Global, a: &ColArgs) -> Result<()> {
    let b = &a.bench;
    let cfg = col_config(b)?;
    let opts = eval_options(b.iou_thresh, b.ap_interp)?;
    let detect = detect_config(b);
    let bg = load_background(b.background.as_deref())?;
    let dataset = Dataset::load(&b.dataset)?;
    let spec = EpisodeSpec {
        n_way: a.n,
        k_shot: b.k,
        num_query: b.num_query,
        extra_negatives: false,
    };
    let episodes = episodes_for(g, b, &dataset, spec)?;
    let outcomes = map_episodes(&episodes, g.workers, |ep| {
        col_episode(&dataset, ep, &bg, &cfg, &detect, opts).map(|(o, _)| o)
    })?;
    finish_bench(g, b, &dataset, &episodes, &outcomes, ("col", "vmf", a.n))
}

fn cmd_wsod(g: &Global, a: &WsodArgs) -> Result<()> {
    let b = &a.bench;
    let method: Method = a.method.parse()?;
    let settings = WsodSettings {
        method,
        col: col_config(b)?,
        train: TrainConfig {
            tau: a.tau,
            l2_reg: a.l2_reg,
            lbfgs: LbfgsConfig::default(),
        },
        misvm: MisvmConfig {
            gamma: a.gamma,
            c_reg: a.c_reg,
            max_rounds: a.max_rounds,
            lbfgs: LbfgsConfig::default(),
        },
        detect: detect_config(b),
        eval: eval_options(b.iou_thresh, b.ap_interp)?,
    };
    settings.train.validate()?;
    if settings.misvm.max_rounds == 0 || !(settings.misvm.c_reg > 0.0) {
        return Err(Error::InvalidConfig(
            "MI-SVM needs --max-rounds >= 1 and --c-reg > 0".into(),
        ));
    }
    let bg = load_background(b.background.as_deref())?;
    let dataset = Dataset::load(&b.dataset)?;
    let extra = method == Method::Misvm && (a.extra_negatives || a.n == 1);
    let spec = EpisodeSpec {
        n_way: a.n,
        k_shot: b.k,
        num_query: b.num_query,
        extra_negatives: extra,
    };
    let episodes = episodes_for(g, b, &dataset, spec)?;
    let objectness = match method {
        Method::Misvm if !episodes.is_empty() => {
            Some(train_objectness(&dataset, &ObjectnessConfig::default())?)
        }
        _ => None,
    };
    let outcomes = map_episodes(&episodes, g.workers, |ep| {
        wsod_episode(&dataset, ep, &bg, objectness.as_ref(), &settings)
    })?;
    finish_bench(
        g,
        b,
        &dataset,
        &episodes,
        &outcomes,
        ("wsod", &a.method, a.n),
    )
}

fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        det.bbox.validate()?;
        out.push(det);
    }
    Ok(out)
}

fn cmd_eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let opts = eval_options(a.iou_thresh, a.ap_interp)?;
    let dataset = Dataset::load(&a.dataset)?;
    let detections = read_detections(&a.detections)?;
    for d in &detections {
        dataset.index.get(&d.image_id)?;
    }
    let report = match &a.episodes {
        Some(p) => {
            let episodes = read_episodes(p, &dataset.index)?;
            let mut outcomes = Vec::with_capacity(episodes.len());
            for ep in &episodes {
                let dets: Vec<Detection> = detections
                    .iter()
                    .filter(|d| d.episode == Some(ep.index))
                    .cloned()
                    .collect();
                if let Some(d) = dets.iter().find(|d| !ep.query.contains(&d.image_id)) {
                    return Err(Error::Validation(format!(
                        "detection on `{}` is not a query image of episode {}",
                        d.image_id, ep.index
                    )));
                }
                let metrics = pipeline::evaluate_episode(&dataset, ep, &dets, opts)?;
                outcomes.push(EpisodeOutcome {
                    episode: ep.index,
                    support: vec![],
                    metrics,
                    detections: dets,
                });
            }
            let known: BTreeSet<u64> = episodes.iter().map(|e| e.index).collect();
            if let Some(d) = detections
                .iter()
                .find(|d| !d.episode.is_some_and(|e| known.contains(&e)))
            {
                return Err(Error::Validation(format!(
                    "detection on `{}` has episode {:?}, not in the episodes file",
                    d.image_id, d.episode
                )));
            }
            pipeline::report(&outcomes, a.pooled, &dataset, &episodes, opts)?
        }
        None => {
            let classes: BTreeSet<String> = dataset.index.novel_classes.iter().cloned().collect();
            let records: Vec<_> = dataset
                .index
                .records
                .iter()
                .filter(|r| r.labels.iter().any(|l| classes.contains(l)))
                .cloned()
                .collect();
            let m: EpisodeMetrics = evaluate_detections(&detections, &records, &classes, opts)?;
            Some(MetricsReport::from_episodes(std::slice::from_ref(&m))?)
        }
    };
    emit_json(g.out.as_deref(), &report)
}

fn cmd_kappa_table(g: &Global, a: &KappaTableArgs) -> Result<()> {
    let grid: Vec<f64> = match &a.rbar {
        Some(v) => v.clone(),
        None => (0..a.steps).map(|i| i as f64 / a.steps as f64).collect(),
    };
    let mut out = String::from("rbar");
    for rule in KappaRule::ESTIMATORS {
        out.push(',');
        out.push_str(rule.name());
    }
    out.push_str(",exact_roundtrip,saturated\n");
    for r in grid {
        out.push_str(&format!("{r}"));
        let mut saturated = r >= 1.0;
        let mut exact = f64::NAN;
        for rule in KappaRule::ESTIMATORS {
            let est = estimate_kappa(r, a.d, rule, a.kappa_max)?;
            saturated |= est.saturated;
            if rule == KappaRule::Exact {
                exact = est.kappa;
            }
            out.push_str(&format!(",{}", est.kappa));
        }
        let back = bessel_ratio(a.d, exact)?;
        out.push_str(&format!(",{back},{saturated}\n"));
    }
    emit(g.out.as_deref(), &out)
}
