//! Staged training: L1 objective, Adam, step-based halving schedule,
//! parameter freezing per stage and checkpoints.

mod adam;
mod checkpoint;
mod data;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{
    checkpoint_config, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_config,
    save_checkpoint, LoadReport, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{crop_pair, stack_batch, Batch, PairLoader, TrainingPair};

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Attribute;
use crate::layers::Ctx;
use crate::model::{groups, GDNet, StageMode};
use crate::numcore::{AutodiffTape, ParamStore, Scalar, SeededRng, Tensor};

/// Epochs (steps at desk scale) between learning-rate halvings.
pub const LR_HALVE_EVERY: usize = 200;

/// `base * 0.5^floor(epoch / 200)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    lr_at_step(base_lr, epoch, LR_HALVE_EVERY)
}

pub fn lr_at_step(base_lr: f64, step: usize, halve_every: usize) -> f64 {
    base_lr * 0.5f64.powi((step / halve_every.max(1)) as i32)
}

/// Mean absolute error, recorded on `tape`.
pub fn l1_loss<T: Scalar>(tape: &AutodiffTape<T>, out: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    tape.l1_loss(out, gt)
}

/// Make exactly the parameters under `patterns` trainable.
pub fn set_trainable<T: Scalar>(store: &mut ParamStore<T>, patterns: &[&str]) -> Result<usize> {
    store.set_trainable(patterns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageId {
    Stage1,
    Stage2(Attribute),
    Stage3,
}

impl StageId {
    /// Stage 1, then NC, LI, FO, then stage 3.
    pub const SCHEDULE: [StageId; 5] = [
        StageId::Stage1,
        StageId::Stage2(Attribute::Normal),
        StageId::Stage2(Attribute::LowLight),
        StageId::Stage2(Attribute::Fog),
        StageId::Stage3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Stage1 => "1",
            StageId::Stage2(Attribute::Normal) => "2nc",
            StageId::Stage2(Attribute::LowLight) => "2li",
            StageId::Stage2(Attribute::Fog) => "2fo",
            StageId::Stage3 => "3",
        }
    }

    fn tag(self) -> u64 {
        StageId::SCHEDULE.iter().position(|&s| s == self).expect("listed") as u64
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::SCHEDULE
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected 1, 2nc, 2li, 2fo or 3)")))
    }
}

pub fn branch_prefix(attr: Attribute) -> &'static str {
    match attr {
        Attribute::Normal => groups::NC,
        Attribute::LowLight => groups::LI,
        Attribute::Fog => groups::FO,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Optimizer steps per stage.
    pub steps: usize,
    pub batch_size: usize,
    /// LR patch side; optical/HR crops are `patch * scale`.
    pub patch: usize,
    pub base_lr: f64,
    pub halve_every: usize,
    /// Also fine-tune the upsampler head in stage 3.
    pub stage3_train_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 8,
            patch: 48,
            base_lr: 1e-4,
            halve_every: LR_HALVE_EVERY,
            stage3_train_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if self.batch_size == 0 || self.patch == 0 {
            return Err(Error::Config("batch_size and patch must be positive".into()));
        }
        if !self.patch.is_multiple_of(window) {
            return Err(Error::Config(format!(
                "patch {} must be a multiple of the attention window {window}",
                self.patch
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable groups (prefix, lr multiplier), data filter and forward mode
/// of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub id: StageId,
    pub groups: Vec<(String, f64)>,
    pub filter: Option<Attribute>,
    pub mode: StageMode,
}

impl StageSpec {
    pub fn new(id: StageId, cfg: &TrainConfig) -> Self {
        let g = |p: &str, m: f64| (p.to_string(), m);
        match id {
            StageId::Stage1 => StageSpec {
                id,
                groups: vec![
                    g(groups::SHALLOW, 1.0),
                    g(groups::BACKBONE, 1.0),
                    g(groups::MOGM, 1.0),
                    g(groups::HEAD, 1.0),
                ],
                filter: None,
                mode: StageMode::Stage1,
            },
            StageId::Stage2(a) => StageSpec {
                id,
                groups: vec![g(branch_prefix(a), 1.0)],
                filter: Some(a),
                mode: StageMode::Branch(a),
            },
            StageId::Stage3 => {
                // fusion at the base rate, MOGM (and optionally the head) at half
                let mut groups = vec![g(groups::AFM, 1.0), g(groups::MOGM, 0.5)];
                if cfg.stage3_train_head {
                    groups.push(g(groups::HEAD, 0.5));
                }
                StageSpec {
                    id,
                    groups,
                    filter: None,
                    mode: StageMode::Full,
                }
            }
        }
    }

    pub fn patterns(&self) -> Vec<&str> {
        self.groups.iter().map(|(p, _)| p.as_str()).collect()
    }

    pub fn lr_multiplier(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(0.0, |&(_, m)| m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: StageId,
    pub lr: f64,
    pub loss: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,stage,lr,loss";

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!("{},{},{:e},{:.8}\n", r.step, r.stage, r.lr, r.loss));
    }
    s
}

pub fn write_loss_log(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_log_csv(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Batch for `step`: a pure function of (seed, stage, step).
pub fn sample_batch<T: Scalar>(
    loader: &mut PairLoader,
    candidates: &[usize],
    cfg: &TrainConfig,
    align: usize,
    stage: StageId,
    step: usize,
) -> Result<Batch<T>> {
    let mut rng = SeededRng::new(cfg.seed).fork(stage.tag()).fork(step as u64);
    let mut crops = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = candidates[rng.below(candidates.len() as u64) as usize];
        crops.push(crop_pair(loader.get(idx)?, cfg.patch, align, &mut rng)?);
    }
    stack_batch(&crops)
}

/// Train one stage for `steps` optimizer steps. Only the spec's groups are
/// trainable; on return every parameter is trainable again.
pub fn run_stage<T: Scalar>(
    spec: &StageSpec,
    loader: &mut PairLoader,
    net: &GDNet,
    store: &mut ParamStore<T>,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<LossRecord>> {
    cfg.validate(net.config.window)?;
    let candidates = loader.indices(spec.filter);
    if candidates.is_empty() {
        let what = spec.filter.map_or("any".to_string(), |a| a.to_string());
        return Err(Error::Config(format!(
            "stage {} has no training records with attribute {what}",
            spec.id
        )));
    }
    set_trainable(store, &spec.patterns())?;
    let mut adam = AdamState::new(store);
    let mut log = Vec::with_capacity(steps);
    let result = (|| -> Result<()> {
        for step in 0..steps {
            let batch: Batch<T> = sample_batch(loader, &candidates, cfg, net.config.window, spec.id, step)?;
            let tape = AutodiffTape::new();
            let loss = {
                let ctx = Ctx::new(&tape, store);
                let out = net.forward(&ctx, &batch.lr, &batch.optical, spec.mode)?;
                l1_loss(&tape, &out, &batch.hr)?
            };
            let value = loss.item().to_f64();
            if !value.is_finite() {
                return Err(Error::contract("run_stage", format!("non-finite loss at step {step}")));
            }
            tape.backward(&loss, Some(store))?;
            let lr = lr_at_step(cfg.base_lr, step, cfg.halve_every);
            adam.step(store, &|name| lr * spec.lr_multiplier(name))?;
            log.push(LossRecord {
                step,
                stage: spec.id,
                lr,
                loss: value,
            });
        }
        Ok(())
    })();
    store.set_all_trainable(true);
    result.map(|_| log)
}
