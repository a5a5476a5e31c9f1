//! Supervised training and the stage-by-stage skew-pruning pipeline.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, F1Average};
use crate::model::{Model, TabularInput};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::skew::{self, SkewConfig, SkewReport};
use crate::surgery::{self, PruneAudit};

/// Batch size used by every inference pass, so scores never depend on how
/// a caller batches evaluation.
pub const EVAL_BATCH: usize = 64;

/// Which slice of the calibration set feeds skew scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub batch_size: usize,
    /// The calibration batch is samples `[i·batch_size, (i+1)·batch_size)`
    /// of the calibration set in stored order.
    pub batch_index: usize,
    pub skew: SkewConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            batch_size: 16,
            batch_index: 0,
            skew: SkewConfig::default(),
        }
    }
}

impl CalibrationConfig {
    pub fn batch(&self, calib: &Dataset) -> Result<(Tensor, Vec<TabularInput>)> {
        let start = self.batch_index * self.batch_size;
        let end = (start + self.batch_size).min(calib.len());
        if self.batch_size == 0 || start >= end {
            return Err(Error::Argument(format!(
                "calibration batch {} of size {} is empty for {} samples",
                self.batch_index,
                self.batch_size,
                calib.len()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (img, tab, _) = calib.to_batch(&idx)?;
        Ok((img, tab))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Weight the loss by inverse class frequency of the training set.
    pub class_weighting: bool,
    pub f1_average: F1Average,
    pub calibration: CalibrationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            class_weighting: false,
            f1_average: F1Average::Macro,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter of the trainer.
    pub epoch: u64,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Accuracy of the in-training predictions over the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Accuracy of the final model on the training set.
    pub final_train_accuracy: Option<f64>,
}

/// Per-sample class weights `n / (K · count_k)`.
fn class_weights(labels: &[usize], k: usize) -> Vec<f32> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .map(|&c| labels.len() as f32 / (k as f32 * c.max(1) as f32))
        .collect()
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

/// Stateful trainer: Adam moments and the epoch counter persist across
/// calls, so several short runs equal one long run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    epochs_done: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::new(config.optimizer),
            config,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> u64 {
        self.epochs_done
    }

    /// Trains `model` in place for `epochs` epochs. Parameters of frozen
    /// stages are never touched.
    pub fn run_epochs(&mut self, model: &mut Model, data: &Dataset, epochs: usize) -> Result<History> {
        if data.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let k = model.config().num_classes;
        if let Some(s) = data.samples.iter().find(|s| s.label >= k) {
            return Err(Error::Index(format!("label {} out of range for {k} classes", s.label)));
        }
        let weights = self
            .config
            .class_weighting
            .then(|| class_weights(&data.labels(), k));
        self.adam
            .retain_matching(|name| model.params().get(name).map(|t| t.shape()));
        let mut history = History::default();
        for _ in 0..epochs {
            let epoch = self.epochs_done;
            let (mut loss_sum, mut hits) = (0.0f64, 0usize);
            for idx in batches(data.len(), self.config.batch_size, self.config.seed, epoch)? {
                let (images, tab, labels) = data.to_batch(&idx)?;
                let mut g = Graph::new();
                let pv = model.bind(&mut g);
                let (logits, _) = model.forward_graph(&mut g, &pv, &images, &tab, &[])?;
                let loss = g.cross_entropy(logits, &labels, weights.as_deref())?;
                loss_sum += g.value(loss).data()[0] as f64 * idx.len() as f64;
                hits += argmax_rows(g.value(logits))?
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| p == l)
                    .count();
                g.backward(loss)?;
                for (name, var) in &pv {
                    if let Some(grad) = g.grad(*var) {
                        let grad = grad.to_vec();
                        self.adam.step(name, model.param_mut(name)?, &grad)?;
                    }
                }
            }
            history.epochs.push(EpochRecord {
                epoch,
                loss: loss_sum / data.len() as f64,
                accuracy: hits as f64 / data.len() as f64,
            });
            self.epochs_done += 1;
        }
        Ok(history)
    }
}

/// Trains a copy of `model` from fresh optimizer state; records the final
/// training-set accuracy.
pub fn fit(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    let mut m = model.clone();
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut history = trainer.run_epochs(&mut m, data, cfg.epochs)?;
    history.final_train_accuracy = Some(evaluate(&m, data, cfg.f1_average)?.accuracy);
    Ok((m, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub f1: f64,
    pub preds: Vec<usize>,
}

pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, tab, _) = data.to_batch(chunk)?;
        let (logits, _) = model.forward(&images, &tab, &[])?;
        preds.extend(argmax_rows(&logits)?);
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, data: &Dataset, average: F1Average) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let preds = predict(model, data)?;
    let labels = data.labels();
    let k = model.config().num_classes;
    Ok(Evaluation {
        accuracy: metrics::accuracy(&preds, &labels)?,
        f1: metrics::f1(&preds, &labels, k, average)?,
        preds,
    })
}

/// Scores and prunes every block of `stage`, in block order. Each block is
/// scored on activations captured from the model as it stands after the
/// previous block's surgery.
pub fn prune_stage(
    model: &mut Model,
    calib_images: &Tensor,
    calib_tab: &[TabularInput],
    stage: usize,
    calib: &CalibrationConfig,
) -> Result<(Vec<SkewReport>, Vec<PruneAudit>)> {
    if stage >= model.config().num_stages() {
        return Err(Error::Config(format!("no stage {stage} in this model")));
    }
    let mut reports = Vec::new();
    let mut audits = Vec::new();
    for id in model.block_ids().into_iter().filter(|id| id.stage == stage) {
        let (_, caps) = model.forward(calib_images, calib_tab, &[id])?;
        let report = skew::block_report(model, &caps, id, calib.batch_index, &calib.skew)?;
        let decision = skew::decide(&report);
        audits.push(surgery::apply_decision(model, &decision)?);
        reports.push(report);
    }
    Ok((reports, audits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageStep {
    pub stage: usize,
    #[serde(default = "one")]
    pub finetune_epochs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub stages: Vec<StageStep>,
    #[serde(default = "yes")]
    pub freeze: bool,
}

fn yes() -> bool {
    true
}

impl StageSchedule {
    /// Every stage of a model, one fine-tune epoch each, with freezing.
    pub fn all(num_stages: usize) -> Self {
        StageSchedule {
            stages: (0..num_stages)
                .map(|stage| StageStep { stage, finetune_epochs: 1 })
                .collect(),
            freeze: true,
        }
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
            return Err(Error::Config("schedule stages must be strictly increasing".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.stage >= num_stages) {
            return Err(Error::Config(format!(
                "schedule references stage {} but the model has {num_stages}",
                s.stage
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: usize,
    pub reports: Vec<SkewReport>,
    pub audits: Vec<PruneAudit>,
    pub history: History,
}

/// Stage-by-stage pruning: for each scheduled stage, score and prune its
/// blocks on the calibration batch, freeze it, then fine-tune the remaining
/// trainable parameters on `train`. Works on a copy and returns it.
pub fn skew_prune_pipeline(
    model: &Model,
    calib: &Dataset,
    train: &Dataset,
    schedule: &StageSchedule,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<StageOutcome>)> {
    schedule.validate(model.config().num_stages())?;
    let (images, tab) = cfg.calibration.batch(calib)?;
    let mut m = model.clone();
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut outcomes = Vec::new();
    for step in &schedule.stages {
        let (reports, audits) = prune_stage(&mut m, &images, &tab, step.stage, &cfg.calibration)?;
        if schedule.freeze {
            m.freeze_stage(step.stage)?;
        }
        let history = if step.finetune_epochs > 0 {
            trainer.run_epochs(&mut m, train, step.finetune_epochs)?
        } else {
            History::default()
        };
        outcomes.push(StageOutcome {
            stage: step.stage,
            reports,
            audits,
            history,
        });
    }
    Ok((m, outcomes))
}
