//! Command-line entry point: dataset generation, training, evaluation
//! protocols, the finetuning curve, the perception benchmark, single episode
//! runs, the two ablation studies, and analytic self-tests.
//!
//! All randomness flows from `--seed`; outputs are byte-identical across
//! reruns with the same seed. Timestamps are confined to `run.log` sidecars.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::classify::{
    evaluate, finetune_curve, load_dataset, load_model, protocol_aggregated, protocol_loo,
    save_dataset, save_model, train, Metrics, MlpConfig, ModalityChoice, Model, ModelConfig,
    SvmConfig, NUM_CLASSES,
};
use crate::control::{Awareness, FsmConfig, TransferFsm};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureLayout};
use crate::headmodel::{default_template, HeadTemplate};
use crate::sim::ablation::{
    bench_csv, methods_csv, perception_bench, perception_csv, run_methods_study,
    run_perception_study,
};
use crate::sim::gen::{draw_profiles, gen_dataset, GenConfig};
use crate::sim::{
    read_scenario, run_episode, trace_to_csv, EpisodeConfig, EventSource, PerceptionMode,
    Scenario, ScenarioKind,
};

const METRICS_SCHEMA: &str = include_str!("../../../schemas/metrics.schema.json");
const DATASET_SCHEMA: &str = include_str!("../../../schemas/dataset.schema.json");
const MODEL_SCHEMA: &str = include_str!("../../../schemas/model.schema.json");
const EPISODE_SUMMARY_SCHEMA: &str = include_str!("../../../schemas/episode-summary.schema.json");
const PERCEPTION_STUDY_SCHEMA: &str =
    include_str!("../../../schemas/perception-study.schema.json");
const METHODS_STUDY_SCHEMA: &str = include_str!("../../../schemas/methods-study.schema.json");

#[derive(Parser, Debug)]
#[command(
    name = "bitesim",
    version,
    about = "Simulated inside-mouth bite transfer: perception, classification, control"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a labeled interaction dataset.
    GenData(GenDataArgs),
    /// Train an interaction classifier on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a model or run an evaluation protocol.
    Eval(EvalArgs),
    /// Finetuning curve for one held-out participant.
    FinetuneCurve(FinetuneArgs),
    /// Tracker vs direct-depth baseline under mouth occlusion.
    PerceptionBench(BenchArgs),
    /// Run one closed-loop feeding episode.
    RunEpisode(EpisodeArgs),
    /// Reproduce an ablation study (perception or methods).
    Ablation(AblationArgs),
    /// Built-in analytic checks; prints one PASS/FAIL line each.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master RNG seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Head template file (headmodel-v1 text); built-in template if omitted.
    #[arg(long)]
    template: Option<PathBuf>,
    /// JSON experiment config; fields present in it override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Cap on worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

/// Optional experiment config file. Every field mirrors a flag; fields that
/// are present override the flag value. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    seed: Option<u64>,
    template: Option<PathBuf>,
    participants: Option<usize>,
    per_label: Option<usize>,
    wrench_noise_n: Option<f64>,
    keypoint_noise_mm: Option<f64>,
    model: Option<ModelKind>,
    modality: Option<Modality>,
    trials: Option<usize>,
    occlusion: Option<f64>,
    weight: Option<f64>,
    sizes: Option<Vec<usize>>,
    scenario: Option<String>,
    awareness: Option<AwarenessArg>,
    mode: Option<ModeArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Svm,
    Mlp,
}

impl ModelKind {
    fn config(self) -> ModelConfig {
        match self {
            ModelKind::Svm => ModelConfig::Svm(SvmConfig::default()),
            ModelKind::Mlp => ModelConfig::Mlp(MlpConfig::default()),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Modality {
    All,
    Haptic,
    Visual,
}

impl From<Modality> for ModalityChoice {
    fn from(m: Modality) -> ModalityChoice {
        match m {
            Modality::All => ModalityChoice::All,
            Modality::Haptic => ModalityChoice::Haptic,
            Modality::Visual => ModalityChoice::Visual,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AwarenessArg {
    A,
    B,
    C,
    D,
    #[value(name = "outside-mouth")]
    #[serde(rename = "outside-mouth")]
    OutsideMouth,
}

impl From<AwarenessArg> for Awareness {
    fn from(a: AwarenessArg) -> Awareness {
        match a {
            AwarenessArg::A => Awareness::A,
            AwarenessArg::B => Awareness::B,
            AwarenessArg::C => Awareness::C,
            AwarenessArg::D => Awareness::D,
            AwarenessArg::OutsideMouth => Awareness::OutsideMouth,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Realtime,
    Onetime,
}

impl From<ModeArg> for PerceptionMode {
    fn from(m: ModeArg) -> PerceptionMode {
        match m {
            ModeArg::Realtime => PerceptionMode::RealTime,
            ModeArg::Onetime => PerceptionMode::OneTime,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (dataset.json + resolved-config.json + run.log).
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic participants.
    #[arg(long, default_value_t = 6)]
    participants: usize,
    /// Windows per interaction class per participant.
    #[arg(long, default_value_t = 128)]
    per_label: usize,
    /// Wrench noise sigma (N; torques x10 in N*mm).
    #[arg(long, default_value_t = 0.05)]
    wrench_noise_n: f64,
    /// Keypoint noise sigma (mm).
    #[arg(long, default_value_t = 0.3)]
    keypoint_noise_mm: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Model family.
    #[arg(long, value_enum, default_value_t = ModelKind::Svm)]
    model: ModelKind,
    /// Feature modality subset.
    #[arg(long, value_enum, default_value_t = Modality::All)]
    modality: Modality,
    /// Output model file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    /// Evaluate a trained model file on the whole dataset.
    Full,
    /// 80:20 per-participant split, train and test internally.
    Aggregated,
    /// Leave-one-participant-out cross validation.
    Loo,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Trained model file (required for --protocol full).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Protocol::Full)]
    protocol: Protocol,
    /// Model family for aggregated/loo protocols.
    #[arg(long, value_enum, default_value_t = ModelKind::Svm)]
    model_kind: ModelKind,
    #[arg(long, value_enum, default_value_t = Modality::All)]
    modality: Modality,
    /// Metrics JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Optional confusion-matrix CSV output.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Held-out participant id.
    #[arg(long)]
    target: usize,
    /// Comma-separated finetuning set sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64])]
    sizes: Vec<usize>,
    /// Weight on finetuning samples.
    #[arg(long, default_value_t = 2.0)]
    weight: f64,
    #[arg(long, value_enum, default_value_t = ModelKind::Svm)]
    model: ModelKind,
    #[arg(long, value_enum, default_value_t = Modality::All)]
    modality: Modality,
    /// Curve CSV output (size, macro_f1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Mouth-region depth corruption probability in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    occlusion: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Per-trial CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario: a file in scenario-v1 format, or a canonical name
    /// (static, s1-turn, s2-speak, s3-spasm, feeding1, feeding2).
    #[arg(long)]
    scenario: String,
    #[arg(long, value_enum, default_value_t = AwarenessArg::A)]
    awareness: AwarenessArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Realtime)]
    mode: ModeArg,
    /// Trained model file: classify contacts instead of the oracle.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory (trace.csv + summary.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Study {
    Perception,
    Methods,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    study: Study,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Output directory (rows.csv + summary.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[command(flatten)]
    common: Common,
}

/// Parses and runs `argv` (including the program name). Returns the process
/// exit code: 0 success, 1 usage error, 2 runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits; anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::FinetuneCurve(a) => cmd_finetune(a),
        Cmd::PerceptionBench(a) => cmd_bench(a),
        Cmd::RunEpisode(a) => cmd_episode(a),
        Cmd::Ablation(a) => cmd_ablation(a),
        Cmd::Selftest(a) => cmd_selftest(a),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let Some(path) = &common.config else { return Ok(ExperimentConfig::default()) };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn setup(common: &Common, cfg: &ExperimentConfig) -> Result<(u64, HeadTemplate)> {
    if let Some(jobs) = common.jobs {
        // ignore the error if a pool already exists (tests call dispatch twice)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let seed = cfg.seed.unwrap_or(common.seed);
    let template_path = cfg.template.as_ref().or(common.template.as_ref());
    let template = match template_path {
        Some(p) => HeadTemplate::load(p)?,
        None => default_template(),
    };
    Ok((seed, template))
}

/// Refuses to clobber an existing artifact unless `--force` was given.
fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Minimal JSON-schema check: the value must be an object carrying every key
/// the schema lists as required. Schemas ship in `schemas/` for external
/// validators; this in-process check catches serialization drift early.
fn check_schema(schema_text: &str, value: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(schema_text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("schema check: output is not a JSON object".into()))?;
    if let Some(req) = schema.get("required").and_then(|r| r.as_array()) {
        for key in req {
            let key = key.as_str().unwrap_or_default();
            if !obj.contains_key(key) {
                return Err(Error::Config(format!(
                    "schema check: missing required key {key:?} (schema {:?})",
                    schema.get("title").and_then(|t| t.as_str()).unwrap_or("?")
                )));
            }
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value, schema: Option<&str>, force: bool) -> Result<()> {
    guard(path, force)?;
    if let Some(s) = schema {
        check_schema(s, value)?;
    }
    std::fs::write(path, format!("{:#}\n", value))?;
    Ok(())
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    guard(path, force)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// The timestamped sidecar: the only output allowed to differ between reruns.
fn write_run_log(dir: &Path, resolved: &Value) -> Result<()> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let argv: Vec<String> = std::env::args().collect();
    let line = format!("unix_time={} argv={:?} resolved={}\n", stamp, argv, resolved);
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

fn write_resolved(dir: &Path, resolved: &Value, force: bool) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("resolved-config.json"), resolved, None, force)?;
    write_run_log(dir, resolved)
}

fn metrics_to_json(m: &Metrics) -> Result<Value> {
    Ok(serde_json::to_value(m)?)
}

fn confusion_csv(m: &Metrics) -> String {
    use crate::classify::InteractionLabel;
    let mut out = String::from("true\\pred");
    for j in 0..NUM_CLASSES {
        out.push(',');
        out.push_str(InteractionLabel::ALL[j].name());
    }
    out.push('\n');
    for i in 0..NUM_CLASSES {
        out.push_str(InteractionLabel::ALL[i].name());
        for j in 0..NUM_CLASSES {
            out.push_str(&format!(",{}", m.confusion[i][j]));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, template) = setup(&a.common, &cfg)?;
    let participants = cfg.participants.unwrap_or(a.participants);
    let per_label = cfg.per_label.unwrap_or(a.per_label);
    let gen_cfg = GenConfig {
        wrench_noise_n: cfg.wrench_noise_n.unwrap_or(a.wrench_noise_n),
        keypoint_noise_mm: cfg.keypoint_noise_mm.unwrap_or(a.keypoint_noise_mm),
        ..GenConfig::default()
    };
    let feat_cfg = FeatureConfig::default();
    let data = gen_dataset(&template, participants, per_label, &gen_cfg, &feat_cfg, seed)?;

    let resolved = json!({
        "command": "gen-data",
        "seed": seed,
        "participants": participants,
        "per_label": per_label,
        "wrench_noise_n": gen_cfg.wrench_noise_n,
        "keypoint_noise_mm": gen_cfg.keypoint_noise_mm,
        "samples": data.samples.len(),
    });
    write_resolved(&a.out, &resolved, a.common.force)?;
    let path = a.out.join("dataset.json");
    guard(&path, a.common.force)?;
    save_dataset(&data, &path)?;
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    check_schema(DATASET_SCHEMA, &written)?;
    println!("wrote {} ({} samples)", path.display(), data.samples.len());
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, _template) = setup(&a.common, &cfg)?;
    let model_kind = cfg.model.unwrap_or(a.model);
    let modality: ModalityChoice = cfg.modality.unwrap_or(a.modality).into();
    let data = load_dataset(&a.data)?;
    let layout = FeatureLayout::from_config(&FeatureConfig::default());
    let model = train(&model_kind.config(), &data, &layout, modality, seed)?;
    guard(&a.out, a.common.force)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_model(&model, &a.out)?;
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&a.out)?)?;
    check_schema(MODEL_SCHEMA, &written)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, _template) = setup(&a.common, &cfg)?;
    let modality: ModalityChoice = cfg.modality.unwrap_or(a.modality).into();
    let model_kind = cfg.model.unwrap_or(a.model_kind);
    let data = load_dataset(&a.data)?;
    let layout = FeatureLayout::from_config(&FeatureConfig::default());

    let (value, headline) = match a.protocol {
        Protocol::Full => {
            let path = a.model.as_ref().ok_or_else(|| {
                Error::Config("--protocol full needs --model <trained model file>".into())
            })?;
            let model: Model = load_model(path)?;
            let m = evaluate(&model, &data)?;
            if let Some(cpath) = &a.confusion {
                write_text(cpath, &confusion_csv(&m), a.common.force)?;
            }
            let v = metrics_to_json(&m)?;
            check_schema(METRICS_SCHEMA, &v)?;
            (v, m.macro_f1)
        }
        Protocol::Aggregated => {
            let m = protocol_aggregated(&data, &model_kind.config(), &layout, modality, seed)?;
            if let Some(cpath) = &a.confusion {
                write_text(cpath, &confusion_csv(&m), a.common.force)?;
            }
            let v = metrics_to_json(&m)?;
            check_schema(METRICS_SCHEMA, &v)?;
            (v, m.macro_f1)
        }
        Protocol::Loo => {
            let per = protocol_loo(&data, &model_kind.config(), &layout, modality, seed)?;
            let mean =
                per.iter().map(|(_, m)| m.macro_f1).sum::<f64>() / per.len().max(1) as f64;
            let folds: Vec<Value> = per
                .iter()
                .map(|(pid, m)| {
                    let v = metrics_to_json(m)?;
                    check_schema(METRICS_SCHEMA, &v)?;
                    Ok(json!({ "participant": pid, "metrics": v }))
                })
                .collect::<Result<_>>()?;
            (json!({ "mean_macro_f1": mean, "folds": folds }), mean)
        }
    };
    guard(&a.out, a.common.force)?;
    std::fs::write(&a.out, format!("{:#}\n", value))?;
    println!("macro_f1 {:.4} -> {}", headline, a.out.display());
    Ok(0)
}

fn cmd_finetune(a: FinetuneArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, _template) = setup(&a.common, &cfg)?;
    let modality: ModalityChoice = cfg.modality.unwrap_or(a.modality).into();
    let model_kind = cfg.model.unwrap_or(a.model);
    let sizes = cfg.sizes.clone().unwrap_or_else(|| a.sizes.clone());
    let weight = cfg.weight.unwrap_or(a.weight);
    let data = load_dataset(&a.data)?;
    let layout = FeatureLayout::from_config(&FeatureConfig::default());
    let curve = finetune_curve(
        &data,
        a.target,
        &sizes,
        &model_kind.config(),
        &layout,
        modality,
        weight,
        seed,
    )?;
    let mut csv = String::from("size,macro_f1\n");
    for (size, f1) in &curve {
        csv.push_str(&format!("{size},{f1:.6}\n"));
    }
    write_text(&a.out, &csv, a.common.force)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, template) = setup(&a.common, &cfg)?;
    let occlusion = cfg.occlusion.unwrap_or(a.occlusion);
    let trials = cfg.trials.unwrap_or(a.trials);
    let rows = perception_bench(&template, occlusion, trials, seed)?;
    write_text(&a.out, &bench_csv(&rows)?, a.common.force)?;
    let ours: f64 =
        rows.iter().map(|r| r.tracker_occluded_error_mm).sum::<f64>() / rows.len() as f64;
    let base: f64 =
        rows.iter().map(|r| r.baseline_occluded_error_mm).sum::<f64>() / rows.len() as f64;
    println!(
        "wrote {} (mean occluded error: tracker {ours:.2} mm, direct-depth {base:.2} mm)",
        a.out.display()
    );
    Ok(0)
}

fn cmd_episode(a: EpisodeArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, template) = setup(&a.common, &cfg)?;
    let scenario_arg = cfg.scenario.clone().unwrap_or_else(|| a.scenario.clone());
    let awareness: Awareness = cfg.awareness.unwrap_or(a.awareness).into();
    let mode: PerceptionMode = cfg.mode.unwrap_or(a.mode).into();

    let scenario: Scenario = if Path::new(&scenario_arg).is_file() {
        read_scenario(&std::fs::read_to_string(&scenario_arg)?)?
    } else {
        let kind = ScenarioKind::parse(&scenario_arg)?;
        Scenario::canonical(kind, seed)
    };

    let model = a.model.as_ref().map(|p| load_model(p)).transpose()?;
    let source = match &model {
        Some(m) => EventSource::Classifier(m),
        None => EventSource::Oracle,
    };
    let profile = draw_profiles(&template, 1, seed).remove(0);
    let fsm = TransferFsm::new(awareness, FsmConfig::default());
    let (trace, _) = run_episode(
        &template,
        &scenario,
        &profile,
        fsm,
        mode,
        &source,
        &EpisodeConfig::default(),
        seed,
    )?;

    let resolved = json!({
        "command": "run-episode",
        "seed": seed,
        "scenario": scenario_arg,
        "awareness": format!("{awareness:?}"),
        "mode": format!("{mode:?}"),
        "event_source": if model.is_some() { "classifier" } else { "oracle" },
    });
    write_resolved(&a.out, &resolved, a.common.force)?;
    write_text(&a.out.join("trace.csv"), &trace_to_csv(&trace)?, a.common.force)?;
    let summary = serde_json::to_value(&trace.summary)?;
    write_json(
        &a.out.join("summary.json"),
        &summary,
        Some(EPISODE_SUMMARY_SCHEMA),
        a.common.force,
    )?;
    println!(
        "final state {:?}, max force {:.2} N -> {}",
        trace.summary.final_state,
        trace.summary.max_force_n,
        a.out.display()
    );
    Ok(0)
}

fn cmd_ablation(a: AblationArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, template) = setup(&a.common, &cfg)?;
    let trials = cfg.trials.unwrap_or(a.trials);
    let resolved = json!({
        "command": "ablation",
        "study": format!("{:?}", a.study).to_lowercase(),
        "seed": seed,
        "trials": trials,
    });
    write_resolved(&a.out, &resolved, a.common.force)?;
    match a.study {
        Study::Perception => {
            let study = run_perception_study(&template, trials, seed)?;
            write_text(&a.out.join("rows.csv"), &perception_csv(&study)?, a.common.force)?;
            let summary = serde_json::to_value(&study.summary)?;
            write_json(
                &a.out.join("summary.json"),
                &summary,
                Some(PERCEPTION_STUDY_SCHEMA),
                a.common.force,
            )?;
        }
        Study::Methods => {
            let study = run_methods_study(&template, trials, seed)?;
            write_text(&a.out.join("rows.csv"), &methods_csv(&study)?, a.common.force)?;
            let summary = serde_json::to_value(&study.summary)?;
            write_json(
                &a.out.join("summary.json"),
                &summary,
                Some(METHODS_STUDY_SCHEMA),
                a.common.force,
            )?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// selftest

fn cmd_selftest(a: SelftestArgs) -> Result<i32> {
    let cfg = load_config(&a.common)?;
    let (seed, template) = setup(&a.common, &cfg)?;
    let mut failed = false;
    let mut report = |name: &str, result: std::result::Result<(), String>| match result {
        Ok(()) => println!("PASS {name}"),
        Err(msg) => {
            failed = true;
            println!("FAIL {name}: {msg}");
        }
    };

    report("hjorth-sinusoid", selftest_hjorth_sinusoid());
    report("hjorth-constant-guard", selftest_hjorth_constant());
    report("band-energy-parseval", selftest_parseval(seed));
    report("gaussian-kurtosis", selftest_kurtosis(seed));
    report("mlp-gradient-check", selftest_gradient(&template, seed));
    report("registration-recovery", selftest_registration(&template, seed));

    Ok(if failed { 2 } else { 0 })
}

fn selftest_hjorth_sinusoid() -> std::result::Result<(), String> {
    use crate::features::hjorth;
    let xs: Vec<f64> = (0..1000)
        .map(|k| (2.0 * std::f64::consts::PI * 10.0 * k as f64 / 1000.0).sin())
        .collect();
    let (_, _, complexity) = hjorth(&xs).map_err(|e| e.to_string())?;
    if (complexity - 1.0).abs() <= 0.02 {
        Ok(())
    } else {
        Err(format!("complexity {complexity} outside 1 +/- 2%"))
    }
}

fn selftest_hjorth_constant() -> std::result::Result<(), String> {
    use crate::features::hjorth;
    let (a, m, c) = hjorth(&[1.5; 200]).map_err(|e| e.to_string())?;
    if a == 0.0 && m == 0.0 && c == 0.0 {
        Ok(())
    } else {
        Err(format!("constant series gave ({a}, {m}, {c})"))
    }
}

fn selftest_parseval(seed: u64) -> std::result::Result<(), String> {
    use crate::features::band_energies;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9a5e);
    let xs: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bands = [(0.0, 20.0), (20.0, 50.0), (50.0, 150.0), (150.0, 500.0)];
    let e = band_energies(&xs, 1000.0, &bands).map_err(|e| e.to_string())?;
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let power = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    let rel = ((e.iter().sum::<f64>() - power) / power).abs();
    if rel <= 1e-9 {
        Ok(())
    } else {
        Err(format!("Parseval relative error {rel:.3e}"))
    }
}

fn selftest_kurtosis(seed: u64) -> std::result::Result<(), String> {
    use crate::features::excess_kurtosis;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6b);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let k = excess_kurtosis(&xs);
    if k.abs() <= 0.05 {
        Ok(())
    } else {
        Err(format!("Gaussian excess kurtosis {k}"))
    }
}

fn selftest_gradient(template: &HeadTemplate, seed: u64) -> std::result::Result<(), String> {
    use crate::classify::mlp::train_mlp;
    let feat_cfg = FeatureConfig::default();
    let layout = FeatureLayout::from_config(&feat_cfg);
    let data = gen_dataset(template, 1, 3, &GenConfig::default(), &feat_cfg, seed ^ 0x317)
        .map_err(|e| e.to_string())?;
    let cfg = MlpConfig { epochs: 3, ..MlpConfig::default() };
    let model = train_mlp(&data, &layout, ModalityChoice::All, &cfg, seed)
        .map_err(|e| e.to_string())?;
    let batch = model.standardized_batch(&data).map_err(|e| e.to_string())?;
    let err = model.gradient_check(&batch, 20, seed);
    if err < 1e-4 {
        Ok(())
    } else {
        Err(format!("gradient relative error {err:.3e}"))
    }
}

fn selftest_registration(template: &HeadTemplate, seed: u64) -> std::result::Result<(), String> {
    use crate::geom::rotation_angle_between;
    use crate::headmodel::{synthesize, HeadParams};
    use crate::perception::{robust_register, RegistrationConfig};
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};
    use rand::{Rng, SeedableRng};

    let model = synthesize(template, &HeadParams::neutral(template))
        .map_err(|e| e.to_string())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4e9);
    let cfg = RegistrationConfig::default();
    for trial in 0..50 {
        let pose = Isometry3::from_parts(
            Translation3::new(
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            ),
            UnitQuaternion::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
        );
        let mut world: Vec<_> = model.iter().map(|p| pose * p).collect();
        let n_out = world.len() * 3 / 10;
        let wl = world.len();
        for k in 0..n_out {
            // gross corruption: replace spread-out points entirely
            world[k * 3 % wl] = nalgebra::Point3::new(
                rng.random_range(-250.0..250.0),
                rng.random_range(-250.0..250.0),
                rng.random_range(-250.0..250.0),
            );
        }
        let valid = vec![true; world.len()];
        let reg = robust_register(&model, &world, &valid, &cfg, None)
            .map_err(|e| e.to_string())?;
        let terr = (reg.pose.translation.vector - pose.translation.vector).norm();
        let rerr = rotation_angle_between(&reg.pose.rotation, &pose.rotation).to_degrees();
        if terr >= 1.0 || rerr >= 0.5 {
            return Err(format!(
                "trial {trial}: translation error {terr:.3} mm, rotation error {rerr:.3} deg"
            ));
        }
        for pair in &reg.objective_trace {
            if pair[1] > pair[0] + 1e-9 {
                return Err(format!("trial {trial}: objective increased {pair:?}"));
            }
        }
    }
    Ok(())
}
