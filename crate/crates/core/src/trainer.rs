//! Training loop, per-region targets and the reduced-data protocol.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{EmotionMode, TrainConfig};
use crate::data::split::training_subset;
use crate::data::{Dataset, Sample, Scene, Split};
use crate::encoders::emotion::{ExternalClassifier, ProcessTransport};
use crate::encoders::{EmotionClassifier, RuleClassifier, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate, iou, score_samples, MetricsReport};
use crate::model::{Model, PreparedInput};
use crate::optim::{adamw_step, clip_global_norm, CosineWarmRestarts, OptimizerState};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

/// Regions with IoU ≥ 0.5 against the ground truth are positives; if none
/// qualifies, the best-overlapping region (lowest index on ties) is.
pub fn make_targets(scene: &Scene) -> Result<Vec<f64>> {
    if scene.regions.is_empty() {
        return Err(Error::Validation(format!("scene {} has no regions", scene.id)));
    }
    let ious = scene
        .regions
        .iter()
        .map(|r| iou(&r.bbox, &scene.ground_truth_box))
        .collect::<Result<Vec<_>>>()?;
    let mut t: Vec<f64> = ious.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    if t.iter().all(|&x| x == 0.0) {
        let mut best = 0;
        for (i, &v) in ious.iter().enumerate() {
            if v > ious[best] {
                best = i;
            }
        }
        t[best] = 1.0;
    }
    Ok(t)
}

/// Classifier selected by the configuration.
pub fn build_classifier(config: &TrainConfig) -> Result<Box<dyn EmotionClassifier>> {
    Ok(match config.emotion_mode {
        EmotionMode::Rule => Box::new(RuleClassifier),
        EmotionMode::External => Box::new(ExternalClassifier::new(
            ProcessTransport::from_command_line(&config.emotion_command)?,
            Duration::from_millis(config.emotion_timeout_ms),
        )),
    })
}

/// Vocabulary from `train.vocab`, or the built-in one.
pub fn load_vocabulary(config: &TrainConfig) -> Result<Vocabulary> {
    match &config.vocab {
        Some(p) => Vocabulary::load(p),
        None => Ok(Vocabulary::builtin()),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        seed: u64,
        config: String,
        dataset_digest: String,
        train_size: usize,
        val_size: usize,
        steps_per_epoch: usize,
    },
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        mean_loss: f64,
        train_ap50: f64,
        val_ap50: Option<f64>,
        best: bool,
    },
    End {
        steps: u64,
        best_epoch: usize,
        best_score: Option<f64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::schema(format!("log line {}", i + 1), e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    /// Per-epoch `(train_ap50, val_ap50)`.
    pub fn epochs(&self) -> Vec<(f64, Option<f64>)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch {
                    train_ap50, val_ap50, ..
                } => Some((*train_ap50, *val_ap50)),
                _ => None,
            })
            .collect()
    }
}

pub struct TrainOutcome {
    /// Checkpoint of the best epoch (the initialization when no epoch ran).
    pub best: Checkpoint,
    pub final_model: Model,
    pub log: TrainLog,
    pub train_ids: Vec<String>,
}

struct LogSink {
    log: TrainLog,
    file: Option<BufWriter<File>>,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r)? + "\n";
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| Error::io("train log", e))?;
        }
        self.log.records.push(r);
        Ok(())
    }
}

fn prepare_all(
    model: &Model,
    samples: &[&Sample],
    classifier: &dyn EmotionClassifier,
) -> Result<Vec<(PreparedInput, Vec<f64>)>> {
    samples
        .par_iter()
        .map(|s| Ok((model.prepare(s, classifier)?, make_targets(&s.scene)?)))
        .collect()
}

/// Mean loss and mean gradients over a batch. Scenes run in parallel; the
/// reduction is sequential in batch order, so results do not depend on
/// thread scheduling.
pub fn batch_gradients(
    model: &Model,
    batch: &[&(PreparedInput, Vec<f64>)],
    bce_eps: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let per_scene: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|(input, targets)| model.loss_and_grads(input, targets, bce_eps))
        .collect();
    let ids = || batch.iter().map(|(i, _)| i.scene_id.as_str()).collect::<Vec<_>>().join(", ");
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in per_scene {
        let (l, g) = r.map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} (batch scenes: {})", ids())),
            other => other,
        })?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = total.unwrap_or_default();
    for g in &mut grads {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} in batch scenes: {}", ids())));
    }
    Ok((loss, grads))
}

/// Trains on the `fraction`-prefix of the training split, selecting the
/// checkpoint with the best validation ap50 (training ap50 when there is no
/// validation split). Writes the JSONL log to `log_path` as it goes.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    classifier: &dyn EmotionClassifier,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = load_vocabulary(config)?;
    let mut model = Model::new(config.model.clone(), vocab, config.seed)?;
    let train_samples = training_subset(dataset, config.fraction, config.seed)?;
    if train_samples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let val_samples = dataset.samples_in(Split::Val);
    let train_data = prepare_all(&model, &train_samples, classifier)?;
    let dataset_digest = dataset.digest();

    let steps_per_epoch = train_data.len().div_ceil(config.batch_size);
    let t0 = if config.sched_t0 == 0 {
        steps_per_epoch as u64
    } else {
        config.sched_t0
    };
    let schedule = CosineWarmRestarts::new(t0, config.sched_t_mult, config.lr_min, config.lr)?;
    let mut opt = OptimizerState::new(config.adamw, &model.params);

    let file = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut sink = LogSink {
        log: TrainLog::default(),
        file,
    };
    sink.push(LogRecord::Start {
        seed: config.seed,
        config: config.to_text(),
        dataset_digest: dataset_digest.clone(),
        train_size: train_data.len(),
        val_size: val_samples.len(),
        steps_per_epoch,
    })?;

    let snapshot = |model: &Model, opt: &OptimizerState, meta: CheckpointMeta| {
        Checkpoint::from_model(model, config, Some(opt), meta)
    };
    let mut best = snapshot(
        &model,
        &opt,
        CheckpointMeta {
            dataset_digest: dataset_digest.clone(),
            ..CheckpointMeta::default()
        },
    );
    let mut best_score: Option<f64> = None;
    let mut best_epoch = 0;
    let mut step: u64 = 0;
    let shuffle_seed = SeedTree::new(config.seed).child("shuffle");
    let train_refs: Vec<&Sample> = train_samples.clone();

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut shuffle_seed.index(epoch as u64).rng());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps > 0 && step >= config.max_steps {
                break;
            }
            let batch: Vec<&(PreparedInput, Vec<f64>)> = chunk.iter().map(|&i| &train_data[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, config.bce_eps)?;
            let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
            let lr = schedule.lr(step);
            adamw_step(&mut model.params, &grads, &mut opt, lr)?;
            sink.push(LogRecord::Step {
                step,
                epoch,
                loss,
                lr,
                grad_norm,
            })?;
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let last = epoch == config.epochs || (config.max_steps > 0 && step >= config.max_steps);
        if epoch % config.eval_every != 0 && !last {
            continue;
        }
        let train_outcomes = score_samples(&model, &train_refs, classifier)?;
        let train_ap50 = build_report(&train_outcomes, None, "", "").overall_ap50.unwrap_or(0.0);
        let val_ap50 = if val_samples.is_empty() {
            None
        } else {
            let o = score_samples(&model, &val_samples, classifier)?;
            build_report(&o, None, "", "").overall_ap50
        };
        let score = val_ap50.unwrap_or(train_ap50);
        let improved = best_score.map_or(true, |b| score >= b);
        if improved {
            best_score = Some(score);
            best_epoch = epoch;
            best = snapshot(
                &model,
                &opt,
                CheckpointMeta {
                    epoch,
                    step,
                    train_ap50: Some(train_ap50),
                    val_ap50,
                    dataset_digest: dataset_digest.clone(),
                },
            );
        }
        sink.push(LogRecord::Epoch {
            epoch,
            step,
            mean_loss: loss_sum / batches as f64,
            train_ap50,
            val_ap50,
            best: improved,
        })?;
        if last {
            break;
        }
    }
    sink.push(LogRecord::End {
        steps: step,
        best_epoch,
        best_score,
    })?;
    Ok(TrainOutcome {
        best,
        final_model: model,
        log: sink.log,
        train_ids: train_samples.iter().map(|s| s.scene.id.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub fraction: f64,
    pub train_size: usize,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedDataSuite {
    pub test_digest: String,
    pub runs: Vec<SuiteRun>,
}

pub const SUITE_FRACTIONS: [f64; 3] = [0.5, 0.75, 1.0];

/// Trains one model per fraction (otherwise identical configs) and evaluates
/// each on the same test split. A failing run is recorded, not fatal.
pub fn run_reduced_data_suite(
    config: &TrainConfig,
    dataset: &Dataset,
    classifier: &dyn EmotionClassifier,
) -> Result<ReducedDataSuite> {
    let test = dataset.samples_in(Split::Test);
    if test.is_empty() {
        return Err(Error::Validation("reduced-data suite needs a non-empty test split".into()));
    }
    let test_digest = Dataset::subset_digest(&test);
    let mut runs = Vec::new();
    for &fraction in &SUITE_FRACTIONS {
        let cfg = TrainConfig {
            fraction,
            ..config.clone()
        };
        let train_size = training_subset(dataset, fraction, cfg.seed)?.len();
        let result = train(&cfg, dataset, classifier, None).and_then(|out| {
            let model = out.best.to_model()?;
            evaluate(&model, &test, None, classifier, &out.best.digest())
        });
        let (report, error) = match result {
            Ok(r) => {
                if r.run_meta.dataset_digest != test_digest {
                    return Err(Error::Validation("test-set digest changed between runs".into()));
                }
                (Some(r), None)
            }
            Err(e) => {
                log::warn!("reduced-data run at fraction {fraction} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        runs.push(SuiteRun {
            fraction,
            train_size,
            report,
            error,
        });
    }
    Ok(ReducedDataSuite { test_digest, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, GenParams};

    fn scene_with(boxes: &[BBox], gt: BBox) -> Scene {
        let mut s = crate::data::generate_synthetic_scene(0, 0, &GenParams::default())
            .unwrap()
            .scene;
        s.regions.truncate(boxes.len());
        for (r, b) in s.regions.iter_mut().zip(boxes) {
            r.bbox = *b;
        }
        s.ground_truth_box = gt;
        s
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn exact_match_is_the_only_positive() {
        let boxes: Vec<BBox> = (0..5).map(|i| bx(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0)).collect();
        let t = make_targets(&scene_with(&boxes, boxes[3])).unwrap();
        assert_eq!(t, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fallback_picks_lowest_index_on_ties() {
        let boxes = vec![bx(0.0, 0.0, 1.0, 1.0), bx(5.0, 5.0, 6.0, 6.0)];
        let t = make_targets(&scene_with(&boxes, bx(50.0, 50.0, 60.0, 60.0))).unwrap();
        assert_eq!(t, vec![1.0, 0.0]);
    }

    #[test]
    fn two_regions_above_threshold_both_positive() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        // iou 0.6 each: 6×10 inside a 10×10 ground truth
        let boxes = vec![bx(0.0, 0.0, 6.0, 10.0), bx(4.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)];
        let t = make_targets(&scene_with(&boxes, gt)).unwrap();
        assert_eq!(t, vec![1.0, 1.0, 0.0]);
    }
}
