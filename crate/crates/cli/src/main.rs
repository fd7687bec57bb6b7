//! `cavg`: generate data, train, evaluate, predict and inspect attention.
//!
//! Exit codes: 0 success, 1 validation, 2 I/O, 3 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cavg::checkpoint::Checkpoint;
use cavg::config::TrainConfig;
use cavg::data::{split_dataset, Dataset, GenParams, Sample, Scene, Split, SplitFractions, SubsetTag};
use cavg::encoders::{Command as GroundingCommand, EmotionClassifier};
use cavg::error::{Error, Result};
use cavg::eval::{dump_layer_attention, evaluate};
use cavg::trainer::{build_classifier, train};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cavg", version, about = "Context-aware visual grounding on region proposals")]
struct Cli {
    /// Default root for run directories.
    #[arg(long, env = "CAVG_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-subset table.
    Eval(EvalArgs),
    /// Ground one command in one scene.
    Predict(PredictArgs),
    /// Dump attention weights for one scene.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// Output dataset file (default: <run root>/data/syn-<seed>-<count>.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    emotion_templates: bool,
    #[arg(long, default_value_t = 0.0)]
    long_text_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    overlap_rate: f64,
    #[arg(long, default_value_t = 8)]
    regions: usize,
    #[arg(long, default_value_t = 64)]
    d_vision: usize,
    /// Train/val/test fractions, e.g. `0.7,0.1,0.2`; `benchmark` uses the 8349/1163/2447 ratios.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Run directory (default: <run root>/train-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one subset: normal, restricted, multi-agent, ambiguous, long-text.
    #[arg(long)]
    subset: Option<String>,
    /// Which split to score: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to look the scene up in.
    #[arg(long, requires = "scene")]
    data: Option<PathBuf>,
    /// Scene id within --data.
    #[arg(long)]
    scene: Option<String>,
    /// Standalone scene JSON file instead of --data/--scene.
    #[arg(long, conflicts_with_all = ["data", "scene"])]
    scene_file: Option<PathBuf>,
    /// Command text (default: the dataset command for --scene).
    #[arg(long = "text")]
    text: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Plot-ready `(layer_index, group, mean_weight)` table file (default: next to the dump).
    #[arg(long)]
    table: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_split(spec: &str) -> Result<SplitFractions> {
    if spec == "benchmark" {
        return Ok(SplitFractions::talk2car());
    }
    let parts: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Validation(format!("--split: cannot parse {spec:?}")))?;
    match parts.as_slice() {
        &[a, b, c] => SplitFractions::new(a, b, c),
        _ => Err(Error::Validation("--split needs three fractions".into())),
    }
}

fn cmd_gen(root: &Path, a: GenArgs) -> Result<()> {
    let params = GenParams {
        emotion_templates: a.emotion_templates,
        long_text_rate: a.long_text_rate,
        overlap_rate: a.overlap_rate,
        n_regions: a.regions,
        d_vision: a.d_vision,
        ..GenParams::default()
    };
    let mut ds = Dataset::synthetic(a.seed, a.count, &params)?;
    if let Some(s) = &a.split {
        split_dataset(&mut ds, parse_split(s)?, a.split_seed)?;
    }
    let out = a
        .out
        .unwrap_or_else(|| root.join("data").join(format!("syn-{}-{}.json", a.seed, a.count)));
    write(&out, &ds.to_json()?)?;
    println!("wrote {} scenes to {}", ds.len(), out.display());
    println!("digest {}", ds.digest());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.fraction {
        cfg.fraction = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Names both sides when a dataset does not fit a model configuration.
fn check_dimensions(cfg: &TrainConfig, ds: &Dataset, what: &str) -> Result<()> {
    let first = &ds.samples[0].scene;
    let m = &cfg.model;
    let (dv, p, w) = (ds.region_dim(), first.patch_grid.p, first.patch_grid.width);
    if dv != m.d_vision || p != m.grid || w != m.patch_width {
        return Err(Error::Dimension(format!(
            "dataset has region features of width {dv} and a {p}×{p} patch grid of width {w}, \
             but the {what} config has model.d_vision = {}, model.grid = {}, model.patch_width = {}",
            m.d_vision, m.grid, m.patch_width
        )));
    }
    Ok(())
}

fn cmd_train(root: &Path, a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let ds = Dataset::load(&a.data)?;
    check_dimensions(&cfg, &ds, "training")?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| root.join(format!("train-{}", cfg.seed)));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    let classifier = build_classifier(&cfg)?;
    let result = train(&cfg, &ds, classifier.as_ref(), Some(&out.join("train_log.jsonl")))?;
    result.best.save(&out.join("best.ckpt"))?;
    let final_meta = result.best.meta.clone();
    Checkpoint::from_model(&result.final_model, &cfg, None, final_meta).save(&out.join("final.ckpt"))?;
    let summary = serde_json::json!({
        "dataset_digest": ds.digest(),
        "best_checkpoint_digest": result.best.digest(),
        "best_epoch": result.best.meta.epoch,
        "train_ap50": result.best.meta.train_ap50,
        "val_ap50": result.best.meta.val_ap50,
        "train_size": result.train_ids.len(),
    });
    write(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    for (i, (tr, val)) in result.log.epochs().iter().enumerate() {
        let val = val.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!("eval {}: train ap50 {tr:.3}  val ap50 {val}", i + 1);
    }
    println!("run directory {}", out.display());
    println!("best checkpoint {}", result.best.digest());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, cavg::Model, Box<dyn EmotionClassifier>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    let classifier = build_classifier(&ckpt.config)?;
    Ok((ckpt, model, classifier))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ckpt, model, classifier) = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    check_dimensions(&ckpt.config, &ds, "checkpoint")?;
    let subset = match &a.subset {
        Some(s) => Some(SubsetTag::parse(s).ok_or_else(|| Error::Validation(format!("unknown subset {s:?}")))?),
        None => None,
    };
    let samples: Vec<&Sample> = match a.split.as_str() {
        "all" => ds.samples.iter().collect(),
        "train" => ds.samples_in(Split::Train),
        "val" => ds.samples_in(Split::Val),
        "test" => ds.samples_in(Split::Test),
        other => return Err(Error::Validation(format!("unknown split {other:?}"))),
    };
    if samples.is_empty() {
        return Err(Error::Validation(format!("dataset has no {} samples", a.split)));
    }
    let report = evaluate(&model, &samples, subset, classifier.as_ref(), &ckpt.digest())?;
    let out = a.out.unwrap_or_else(|| {
        let name = match &a.subset {
            Some(s) => format!("report-{}-{s}.json", a.split),
            None => format!("report-{}.json", a.split),
        };
        a.checkpoint.with_file_name(name)
    });
    report.save(&out)?;
    print!("{}", report.table());
    if let Some(t) = report.run_meta.wall_clock_secs {
        println!("scored {} scenes in {t:.2}s", report.count);
    }
    println!("report {}", out.display());
    Ok(())
}

fn resolve_scene(s: &SceneArgs) -> Result<(Scene, Option<String>)> {
    if let Some(p) = &s.scene_file {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::schema("scene", e.to_string()))?;
        scene.validate("scene")?;
        return Ok((scene, None));
    }
    let (Some(data), Some(id)) = (&s.data, &s.scene) else {
        return Err(Error::Usage("give --data with --scene, or --scene-file".into()));
    };
    let ds = Dataset::load(data)?;
    let sample = ds
        .find(id)
        .ok_or_else(|| Error::Validation(format!("scene {id:?} not found in {}", data.display())))?;
    Ok((sample.scene.clone(), Some(sample.command.clone())))
}

fn command_for(
    s: &SceneArgs,
    model: &cavg::Model,
    default: Option<String>,
    classifier: &dyn EmotionClassifier,
) -> Result<GroundingCommand> {
    let text = s
        .text
        .clone()
        .or(default)
        .ok_or_else(|| Error::Usage("--text is required with --scene-file".into()))?;
    GroundingCommand::new(&text, &model.vocab, model.config.max_len, classifier)
}

fn cmd_predict(root: &Path, a: PredictArgs) -> Result<()> {
    let (ckpt, model, classifier) = load_checkpoint(&a.scene.checkpoint)?;
    let (scene, default) = resolve_scene(&a.scene)?;
    let command = command_for(&a.scene, &model, default, classifier.as_ref())?;
    let emotion = command.emotion;
    let p = model.predict(&scene, &command, a.k)?;
    let mut json = serde_json::to_value(&p)?;
    json["emotion"] = serde_json::to_value(emotion)?;
    json["checkpoint_digest"] = ckpt.digest().into();
    let out = a
        .scene
        .out
        .clone()
        .unwrap_or_else(|| root.join("predictions").join(format!("{}.json", scene.id)));
    write(&out, &(serde_json::to_string_pretty(&json)? + "\n"))?;
    let b = p.selected_box;
    println!("emotion {}", emotion.label());
    println!("selected region {} box [{}, {}, {}, {}]", p.selected_region, b.x1, b.y1, b.x2, b.y2);
    println!("rank  region  credibility");
    for (rank, &r) in p.top_k.iter().enumerate() {
        println!("{:<5} {:<7} {:.6}", rank + 1, r, p.credibility[r]);
    }
    println!("prediction {}", out.display());
    Ok(())
}

fn cmd_inspect(root: &Path, a: InspectArgs) -> Result<()> {
    let (_, model, classifier) = load_checkpoint(&a.scene.checkpoint)?;
    let (scene, default) = resolve_scene(&a.scene)?;
    let command = command_for(&a.scene, &model, default, classifier.as_ref())?;
    let input = model.prepare_with(&scene, command)?;
    let dump = dump_layer_attention(&model, &input, &scene.ground_truth_box)?;
    let out = a
        .scene
        .out
        .clone()
        .unwrap_or_else(|| root.join("inspect").join(format!("{}.json", scene.id)));
    write(&out, &(dump.to_json() + "\n"))?;
    let table = a.table.unwrap_or_else(|| out.with_extension("tsv"));
    let tsv = dump.plot_tsv();
    write(&table, &tsv)?;
    print!("{tsv}");
    println!("dump {}", out.display());
    println!("table {}", table.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let root = cli.run_root;
    let result = match cli.command {
        Cmd::Gen(a) => cmd_gen(&root, a),
        Cmd::Train(a) => cmd_train(&root, a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(&root, a),
        Cmd::Inspect(a) => cmd_inspect(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
