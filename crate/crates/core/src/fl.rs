//! In-process simulation of horizontal federated learning with server-side
//! skew pruning.
//!
//! Each round the server serializes the global model and every client
//! decodes its own copy from those bytes, trains on its shard, and uploads a
//! serialized full parameter set. The server averages the uploads, evaluates
//! on its test split and, on scheduled rounds, prunes stages using its
//! calibration batch. Communication is measured on the actual checkpoint
//! bytes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Scores, Snapshot};
use crate::model::{Model, ModelConfig};
use crate::nn::Tensor;
use crate::rng;
use crate::skew::SkewReport;
use crate::surgery::PruneAudit;
use crate::trainer::{self, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlRunConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub seed: u64,
    /// Client-side batch size, optimizer and loss settings, plus the
    /// calibration batch used for server-side scoring. Its `epochs` and
    /// `seed` fields are ignored.
    pub train: TrainConfig,
    /// Round index (0-based) → stages pruned after that round's aggregation.
    pub prune_schedule: BTreeMap<usize, Vec<usize>>,
    /// Freeze each stage once it has been pruned.
    pub freeze_pruned: bool,
    /// Epochs of server-side fine-tuning on the calibration set after each
    /// pruning event.
    pub server_finetune_epochs: usize,
}

impl Default for FlRunConfig {
    fn default() -> Self {
        FlRunConfig {
            num_clients: 6,
            rounds: 12,
            local_epochs: 1,
            seed: 0,
            train: TrainConfig::default(),
            prune_schedule: BTreeMap::new(),
            freeze_pruned: true,
            server_finetune_epochs: 0,
        }
    }
}

impl FlRunConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.num_clients == 0 || self.rounds == 0 {
            return Err(Error::Config("num_clients and rounds must be at least 1".into()));
        }
        if let Some((&r, _)) = self.prune_schedule.iter().find(|(&r, _)| r >= self.rounds) {
            return Err(Error::Config(format!(
                "prune schedule round {r} is not below rounds = {}",
                self.rounds
            )));
        }
        for stages in self.prune_schedule.values() {
            if let Some(s) = stages.iter().find(|&&s| s >= model.num_stages()) {
                return Err(Error::Config(format!("prune schedule references missing stage {s}")));
            }
        }
        self.train.validate()
    }
}

/// Seed of client `client`'s batch order.
pub fn client_seed(seed: u64, client: usize) -> u64 {
    rng::derive(seed, &[client as u64])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub client: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub server_test: Vec<usize>,
    pub shards: Vec<Shard>,
}

/// Seeded split of `n` sample indices: `⌊n/5⌋` to the server test set, the
/// rest dealt into `num_clients` shards whose sizes differ by at most one,
/// each shard split into train and a validation part of `round(size/5)`.
pub fn partition(n: usize, num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients == 0 || n < 5 * num_clients {
        return Err(Error::Argument(format!(
            "{n} samples cannot be split across {num_clients} clients (need at least {})",
            5 * num_clients.max(1)
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(rng::derive_label(seed, "partition")));
    let test = n / 5;
    let rest = n - test;
    let (base, extra) = (rest / num_clients, rest % num_clients);
    let mut at = test;
    let shards = (0..num_clients)
        .map(|client| {
            let size = base + usize::from(client < extra);
            let val = (size + 2) / 5;
            let idx = &perm[at..at + size];
            at += size;
            Shard {
                client,
                train: idx[..size - val].to_vec(),
                val: idx[size - val..].to_vec(),
            }
        })
        .collect();
    Ok(Partition {
        server_test: perm[..test].to_vec(),
        shards,
    })
}

/// Element-wise unweighted mean of structurally identical models,
/// accumulated in f64 in the given order. Configuration and freeze state
/// come from the first model.
pub fn aggregate(models: &[Model]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| Error::Aggregation("no models to aggregate".into()))?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.prune_states() != first.prune_states() {
            return Err(Error::Aggregation(format!("client {i} has a different prune state")));
        }
        let a: Vec<(&String, &[usize])> = first.params().iter().map(|(k, t)| (k, t.shape())).collect();
        let b: Vec<(&String, &[usize])> = m.params().iter().map(|(k, t)| (k, t.shape())).collect();
        if a != b {
            let divergent = a
                .iter()
                .zip(&b)
                .find(|(x, y)| x != y)
                .map(|(x, _)| x.0.clone())
                .or_else(|| a.get(b.len()).or(b.get(a.len())).map(|x| x.0.clone()))
                .unwrap_or_default();
            return Err(Error::Aggregation(format!(
                "client {i} diverges from client 0 at tensor {divergent}"
            )));
        }
    }
    let n = models.len() as f64;
    let params = first
        .params()
        .iter()
        .map(|(name, t)| {
            let mut acc = vec![0f64; t.numel()];
            for m in models {
                for (a, &v) in acc.iter_mut().zip(m.params()[name].data()) {
                    *a += v as f64;
                }
            }
            let data = acc.into_iter().map(|s| (s / n) as f32).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    Model::from_parts(
        first.config().clone(),
        params,
        first.prune_states().to_vec(),
        first.frozen_stages().clone(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub stages: Vec<usize>,
    pub reports: Vec<SkewReport>,
    pub audits: Vec<PruneAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_loss: Vec<f64>,
    pub test_accuracy: f64,
    pub test_f1: f64,
    pub bytes_down: usize,
    pub bytes_up: usize,
    /// Parameter count of the global model distributed this round.
    pub params: usize,
    pub prune: Option<PruneEvent>,
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub model: Model,
    pub rounds: Vec<RoundRecord>,
    pub partition: Partition,
    /// Initial global model's cost with the scores of the last aggregated
    /// model before the first pruning event (the final model when nothing
    /// is scheduled).
    pub before: Snapshot,
    pub after: Snapshot,
}

struct Client {
    trainer: Trainer,
    data: Dataset,
}

/// Runs the simulation. Results do not depend on the rayon thread count.
pub fn run(cfg: &FlRunConfig, dataset: &Dataset, model_cfg: &ModelConfig) -> Result<FlOutcome> {
    run_from(cfg, dataset, Model::new(model_cfg.clone())?)
}

/// As [`run`], starting from an existing global model.
pub fn run_from(cfg: &FlRunConfig, dataset: &Dataset, initial: Model) -> Result<FlOutcome> {
    cfg.validate(initial.config())?;
    let part = partition(dataset.len(), cfg.num_clients, cfg.seed)?;
    let test = dataset.subset(&part.server_test);
    let (calib_images, calib_tab) = cfg.train.calibration.batch(&test)?;
    let mut clients = part
        .shards
        .iter()
        .map(|s| {
            let train = TrainConfig {
                seed: client_seed(cfg.seed, s.client),
                ..cfg.train.clone()
            };
            Ok(Client {
                trainer: Trainer::new(train)?,
                data: dataset.subset(&s.train),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let initial_cost = metrics::cost_report(&initial)?;
    let mut global = initial;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut before_scores = None;
    let mut last_scores = None;
    for round in 0..cfg.rounds {
        let down = checkpoint::to_bytes(&global)?;
        let params = global.count_params();
        let uploads: Vec<Result<(Vec<u8>, f64)>> = clients
            .par_iter_mut()
            .map(|c| {
                let mut local = checkpoint::from_bytes(&down)?;
                let h = c.trainer.run_epochs(&mut local, &c.data, cfg.local_epochs)?;
                let loss = h.epochs.last().map_or(f64::NAN, |e| e.loss);
                Ok((checkpoint::to_bytes(&local)?, loss))
            })
            .collect();
        let uploads = uploads.into_iter().collect::<Result<Vec<_>>>()?;
        let bytes_up = uploads.iter().map(|(b, _)| b.len()).sum();
        let locals = uploads
            .iter()
            .map(|(b, _)| checkpoint::from_bytes(b))
            .collect::<Result<Vec<_>>>()?;
        global = aggregate(&locals)?;

        let eval = trainer::evaluate(&global, &test, cfg.train.f1_average)?;
        let scores = Scores {
            accuracy: eval.accuracy,
            f1: eval.f1,
        };
        last_scores = Some(scores);
        let prune = match cfg.prune_schedule.get(&round) {
            Some(stages) if !stages.is_empty() => {
                before_scores.get_or_insert(scores);
                let mut ev = PruneEvent {
                    stages: stages.clone(),
                    reports: Vec::new(),
                    audits: Vec::new(),
                };
                for &s in stages {
                    let (r, a) = trainer::prune_stage(&mut global, &calib_images, &calib_tab, s, &cfg.train.calibration)?;
                    ev.reports.extend(r);
                    ev.audits.extend(a);
                    if cfg.freeze_pruned {
                        global.freeze_stage(s)?;
                    }
                }
                if cfg.server_finetune_epochs > 0 {
                    let mut server = Trainer::new(TrainConfig {
                        seed: rng::derive_label(cfg.seed, "server"),
                        ..cfg.train.clone()
                    })?;
                    server.run_epochs(&mut global, &test.subset(&calibration_indices(cfg, test.len())), cfg.server_finetune_epochs)?;
                }
                Some(ev)
            }
            _ => None,
        };
        records.push(RoundRecord {
            round,
            client_loss: uploads.iter().map(|(_, l)| *l).collect(),
            test_accuracy: scores.accuracy,
            test_f1: scores.f1,
            bytes_down: down.len() * cfg.num_clients,
            bytes_up,
            params,
            prune,
        });
    }
    let final_scores = match records.last().and_then(|r| r.prune.as_ref()) {
        // the last round pruned after scoring: rescore the returned model
        Some(_) => {
            let e = trainer::evaluate(&global, &test, cfg.train.f1_average)?;
            Some(Scores {
                accuracy: e.accuracy,
                f1: e.f1,
            })
        }
        None => last_scores,
    };
    Ok(FlOutcome {
        before: Snapshot {
            cost: initial_cost,
            scores: before_scores.or(last_scores),
        },
        after: Snapshot {
            cost: metrics::cost_report(&global)?,
            scores: final_scores,
        },
        model: global,
        rounds: records,
        partition: part,
    })
}

fn calibration_indices(cfg: &FlRunConfig, n: usize) -> Vec<usize> {
    let c = &cfg.train.calibration;
    let start = (c.batch_index * c.batch_size).min(n);
    (start..(start + c.batch_size).min(n)).collect()
}
