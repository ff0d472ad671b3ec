//! Seeded training and evaluation loops.
//!
//! Randomness is derived statelessly from `(seed, step)` or `(seed, epoch)`,
//! so a run resumed from any checkpoint continues exactly as the
//! uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ShapeRecord;
use crate::error::{Error, Result};
use crate::losses::{mon_loss, LossValues};
use crate::metrics::{evaluate_shape, MetricsReport, Thresholds};
use crate::model::{AssemblyModel, ModelConfig};
use crate::nn::optim::{adam_step, clip_global_norm, collect_grads, AdamConfig, AdamState};
use crate::nn::{ops, Checkpoint, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub mon_n: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps instead of `epochs` epochs.
    pub max_steps: Option<u64>,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub thresholds: Thresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 400,
            warmup_ratio: 0.05,
            batch_size: 16,
            mon_n: 5,
            seed: 0,
            checkpoint_every: 50,
            max_steps: None,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Param(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Param(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if self.batch_size == 0 || self.mon_n == 0 {
            return Err(Error::Param("batch_size and mon_n must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Param("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a run; stored as TOML inside checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].to_string()).unwrap_or_default();
            Error::parse(origin, field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `lr/100` at
/// `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    let s = (step as f64).min(total);
    let warm = cfg.warmup_ratio * total;
    let floor = cfg.lr / 100.0;
    if s < warm {
        return cfg.lr * s / warm;
    }
    let span = total - warm;
    let p = if span > 0.0 { (s - warm) / span } else { 1.0 };
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Min-of-N bookkeeping for one shape in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MonRecord {
    pub shape_id: String,
    pub seeds: Vec<u64>,
    pub totals: Vec<f64>,
    pub selected: usize,
    /// The loss the optimizer saw for this shape.
    pub reported: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Batch means of the selected samples' terms.
    pub loss: LossValues,
    pub grad_norm: f64,
    pub mon: Vec<MonRecord>,
}

pub const LOSS_CSV_HEADER: &str = "step,collision,translation,rotation,shape,total,lr";
pub const MON_CSV_HEADER: &str = "step,shape_id,sample,seed,total,selected";

impl StepLog {
    pub fn loss_csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, l.collision, l.translation, l.rotation, l.shape, l.total, self.lr
        )
    }

    pub fn mon_csv_rows(&self) -> String {
        let mut s = String::new();
        for m in &self.mon {
            for (j, (seed, total)) in m.seeds.iter().zip(&m.totals).enumerate() {
                let _ = writeln!(s, "{},{},{j},{seed},{total},{}", self.step, m.shape_id, u8::from(j == m.selected));
            }
        }
        s
    }
}

const EPOCH_TAG: u64 = 1 << 48;
const EVAL_TAG: u64 = 2 << 48;
const BEST_KEY: &str = "train.best_val_scd";

pub struct Trainer {
    pub config: RunConfig,
    pub model: AssemblyModel,
    /// One optimizer state per coarse-to-fine network.
    adam: Vec<AdamState>,
    step: u64,
    best_val_scd: f64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = AssemblyModel::new(config.model.clone(), config.train.seed)?;
        let adam = (0..model.nets.len()).map(|s| AdamState::zeros(&model.net_params(s))).collect();
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            best_val_scd: f64::INFINITY,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_val_scd(&self) -> f64 {
        self.best_val_scd
    }

    /// Parameters, Adam moments, step and the best validation SCD.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.train.seed, self.step, self.config.to_toml());
        for p in self.model.params().iter() {
            ck.push(p.name(), p.shape(), p.values());
        }
        for (s, adam) in self.adam.iter().enumerate() {
            for (p, (m, v)) in self.model.net_params(s).iter().zip(adam.m.iter().zip(&adam.v)) {
                ck.push(format!("adam.m.{}", p.name()), p.shape(), m.clone());
                ck.push(format!("adam.v.{}", p.name()), p.shape(), v.clone());
            }
            ck.push(format!("adam.step.{s}"), &[1], vec![adam.step as f64]);
        }
        ck.push(BEST_KEY, &[1], vec![self.best_val_scd]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let config = RunConfig::from_toml(&ck.config, origin)?;
        let mut t = Self::new(config)?;
        load_params(&t.model, ck, origin)?;
        let fetch = |name: String, len: usize| -> Result<Vec<f64>> {
            match ck.get(&name) {
                Some(nt) if nt.data.len() == len => Ok(nt.data.clone()),
                _ => Err(Error::parse(origin, name, "missing or mis-sized optimizer state")),
            }
        };
        for s in 0..t.adam.len() {
            for (i, p) in t.model.net_params(s).iter().enumerate() {
                t.adam[s].m[i] = fetch(format!("adam.m.{}", p.name()), p.numel())?;
                t.adam[s].v[i] = fetch(format!("adam.v.{}", p.name()), p.numel())?;
            }
            t.adam[s].step = fetch(format!("adam.step.{s}"), 1)?[0] as u64;
        }
        t.best_val_scd = fetch(BEST_KEY.into(), 1)?[0];
        t.step = ck.step;
        Ok(t)
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.config.train.batch_size).max(1) as u64
    }

    /// Steps spent on each coarse-to-fine network.
    pub fn phase_steps(&self, n_train: usize) -> u64 {
        let c = &self.config.train;
        c.max_steps.unwrap_or(c.epochs as u64 * self.steps_per_epoch(n_train))
    }

    /// Networks are trained one after another, each for `phase_steps`.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.phase_steps(n_train) * self.model.nets.len() as u64
    }

    /// Shape indices of the batch at `step`.
    pub fn batch_indices(&self, step: u64, n_train: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n_train);
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n_train).collect();
        Rng::new(self.config.train.seed).fork(EPOCH_TAG + epoch).shuffle(&mut order);
        let bs = self.config.train.batch_size;
        order[(b * bs).min(n_train)..((b + 1) * bs).min(n_train)].to_vec()
    }

    /// `mon_n` noise seeds for every shape of the batch at `step`.
    pub fn mon_seeds(&self, step: u64, batch: usize) -> Vec<Vec<u64>> {
        let mut rng = Rng::new(self.config.train.seed).fork(step);
        (0..batch).map(|_| (0..self.config.train.mon_n).map(|_| rng.next_u64()).collect()).collect()
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self, train: &[ShapeRecord]) -> Result<StepLog> {
        if train.is_empty() {
            return Err(Error::Contract("empty training split".into()));
        }
        let step = self.step;
        let phase_steps = self.phase_steps(train.len());
        let phase = ((step / phase_steps.max(1)) as usize).min(self.model.nets.len() - 1);
        let local = step - phase as u64 * phase_steps;
        let batch = self.batch_indices(step, train.len());
        let seeds = self.mon_seeds(step, batch.len());
        let model = &self.model;
        let weights = &self.config.model.loss;
        let outs = batch
            .par_iter()
            .zip(&seeds)
            .map(|(&i, s)| {
                let r = &train[i];
                mon_loss(|seed| model.refine_stage(&r.parts, seed, phase), s, &r.parts, &r.gt_poses, weights)
            })
            .collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / outs.len() as f64;
        let objective = ops::scale(&ops::add_scalars(&outs.iter().map(|o| o.best.total.clone()).collect::<Vec<_>>())?, inv);
        let mut mean = LossValues {
            collision: 0.0,
            translation: 0.0,
            rotation: 0.0,
            shape: 0.0,
            total: objective.data()[0],
        };
        for o in &outs {
            let v = o.best.values();
            mean.collision += v.collision * inv;
            mean.translation += v.translation * inv;
            mean.rotation += v.rotation * inv;
            mean.shape += v.shape * inv;
        }
        let mon: Vec<MonRecord> = outs
            .iter()
            .zip(&batch)
            .zip(&seeds)
            .map(|((o, &i), s)| MonRecord {
                shape_id: train[i].shape_id.clone(),
                seeds: s.clone(),
                totals: o.totals.clone(),
                selected: o.index,
                reported: o.best.total.data()[0],
            })
            .collect();

        if !mean.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{mean:?}"),
            });
        }
        let params = self.model.net_params(phase);
        self.model.params().zero_grad();
        objective.backward()?;
        let mut grads = collect_grads(&params);
        if let Some(p) = params.iter().zip(&grads).find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of {} ({mean:?})", p.0.name()),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.train.clip_norm);
        let lr = lr_at(local + 1, phase_steps, &self.config.train);
        adam_step(&params, &grads, &mut self.adam[phase], lr, self.config.train.adam)?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            loss: mean,
            grad_norm,
            mon,
        })
    }

    /// Trains until the step budget is spent. With `out_dir`, writes
    /// `loss.csv`, `mon.csv`, periodic `epoch_<e>.ckpt`, `best.ckpt` (lowest
    /// validation SCD) and `last.ckpt`.
    pub fn run(&mut self, train: &[ShapeRecord], val: &[ShapeRecord], out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let total = self.total_steps(train.len());
        let spe = self.steps_per_epoch(train.len());
        let mut loss_csv = format!("{LOSS_CSV_HEADER}\n");
        let mut mon_csv = format!("{MON_CSV_HEADER}\n");
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut logs = Vec::new();
        while self.step < total {
            let log = self.train_step(train)?;
            log::debug!("{}", log.loss_csv_row());
            loss_csv.push_str(&log.loss_csv_row());
            loss_csv.push('\n');
            mon_csv.push_str(&log.mon_csv_rows());
            logs.push(log);

            let epoch_end = self.step.is_multiple_of(spe) || self.step == total;
            if !epoch_end {
                continue;
            }
            let epoch = self.step.div_ceil(spe);
            if !val.is_empty() {
                let report = self.evaluate(val)?;
                let scd = report.aggregate().scd;
                log::info!("epoch {epoch} step {} val scd {scd:.6e}", self.step);
                if scd < self.best_val_scd {
                    self.best_val_scd = scd;
                    if let Some(d) = out_dir {
                        self.checkpoint().save(&d.join("best.ckpt"))?;
                    }
                }
            }
            if let Some(d) = out_dir {
                let every = self.config.train.checkpoint_every as u64;
                if every > 0 && epoch.is_multiple_of(every) && self.step.is_multiple_of(spe) {
                    self.checkpoint().save(&d.join(format!("epoch_{epoch}.ckpt")))?;
                }
                write(&d.join("loss.csv"), &loss_csv)?;
                write(&d.join("mon.csv"), &mon_csv)?;
            }
        }
        if let Some(d) = out_dir {
            self.checkpoint().save(&d.join("last.ckpt"))?;
            write(&d.join("loss.csv"), &loss_csv)?;
            write(&d.join("mon.csv"), &mon_csv)?;
        }
        Ok(logs)
    }

    pub fn evaluate(&self, records: &[ShapeRecord]) -> Result<MetricsReport> {
        let c = &self.config.train;
        evaluate(&self.model, records, c.mon_n, c.seed, &c.thresholds)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Copies checkpoint values into the model's parameters. Names and shapes
/// must match exactly.
pub fn load_params(model: &AssemblyModel, ck: &Checkpoint, origin: &Path) -> Result<()> {
    for p in model.params().iter() {
        let nt = ck
            .get(p.name())
            .ok_or_else(|| Error::parse(origin, p.name(), "parameter missing from checkpoint"))?;
        if nt.shape != p.shape() {
            return Err(Error::parse(
                origin,
                p.name(),
                format!("shape {:?}, model expects {:?}", nt.shape, p.shape()),
            ));
        }
        p.set_values(nt.data.clone())?;
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint's embedded config and values.
pub fn load_model(path: &Path) -> Result<(RunConfig, AssemblyModel)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(&ck.config, path)?;
    let model = AssemblyModel::new(cfg.model.clone(), cfg.train.seed)?;
    load_params(&model, &ck, path)?;
    Ok((cfg, model))
}

/// Per shape: `mon_n` samples, min matching by SCD, metrics of the winner.
pub fn evaluate(
    model: &AssemblyModel,
    records: &[ShapeRecord],
    mon_n: usize,
    seed: u64,
    thresholds: &Thresholds,
) -> Result<MetricsReport> {
    let per_shape = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = Rng::new(seed).fork(EVAL_TAG + i as u64);
            let candidates = (0..mon_n.max(1))
                .map(|_| model.coarse_to_fine(&r.parts, rng.next_u64()).map(|p| p.poses))
                .collect::<Result<Vec<_>>>()?;
            evaluate_shape(&candidates, r, thresholds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        thresholds: *thresholds,
        per_shape,
    })
}
