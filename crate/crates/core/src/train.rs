//! Training loop for the three objectives.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricReport};
use crate::loss::{mse_weak_var, total_loss_var, LossInputs, LossReport, LossWeights, PixelLossConfig, RenderParams, WeakTargets};
use crate::model::{point_inputs, write_checkpoint, Model, ModelConfig};
use crate::optim::{clip_grad_norm, AdamW, CosineSchedule};
use crate::synth::{Manifest, Split};
use crate::tensor::Tensor;
use crate::volume::{sample_observations_in_layers, Scene, SupervisionSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Jsil,
    MseWeak,
    MseFull,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsil" => Ok(Objective::Jsil),
            "mse-weak" | "mse_weak" => Ok(Objective::MseWeak),
            "mse-full" | "mse_full" => Ok(Objective::MseFull),
            _ => Err(Error::invalid(format!("unknown objective {s:?} (jsil, mse-weak, mse-full)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Jsil => "jsil",
            Objective::MseWeak => "mse-weak",
            Objective::MseFull => "mse-full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_every: usize,
    pub seed: u64,
    pub objective: Objective,
    pub samples_per_scene: usize,
    pub grad_clip: f64,
    /// Ground-truth layers visible to the weak objectives; ignored by `mse-full`.
    pub supervised_layers: Vec<usize>,
    pub loss: LossWeights,
    pub pixel: PixelLossConfig,
    /// Validation draws per check (kept below the 5-run evaluation for speed).
    pub val_runs: usize,
    /// Random flip/transpose of each training scene per epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_init: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            batch_size: 4,
            val_every: 10,
            seed: 0,
            objective: Objective::Jsil,
            samples_per_scene: 50,
            grad_clip: 1.0,
            supervised_layers: vec![0, 4, 7],
            loss: LossWeights::default(),
            pixel: PixelLossConfig::default(),
            val_runs: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 || self.samples_per_scene == 0 || self.val_runs == 0 {
            return Err(Error::invalid("epochs, batch_size, val_every, samples_per_scene and val_runs must be >= 1"));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return Err(Error::invalid("need 0 <= lr_min <= lr_init and lr_init > 0"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and grad_clip > 0"));
        }
        self.loss.validate()?;
        self.pixel.validate()
    }

    /// Supervision actually used for a model with `layers` outputs.
    pub fn supervision(&self, layers: usize) -> Result<SupervisionSpec> {
        match self.objective {
            Objective::MseFull => Ok(SupervisionSpec::full(layers)),
            _ => SupervisionSpec::new(self.supervised_layers.clone(), self.loss.lambda_pl, layers),
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { lr_init: self.lr_init, lr_min: self.lr_min, epochs: self.epochs }
    }
}

/// SplitMix64-style mixing of a base seed with two counters.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One optimizer step; loss terms are batch means, terms outside the objective are 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_total: f64,
    pub l_v: f64,
    pub l_r: f64,
    pub l_p: f64,
}

pub const LOG_CSV_HEADER: [&str; 7] = ["epoch", "step", "lr", "L_total", "L_v", "L_r", "L_p"];

pub fn write_log_csv<W: Write>(out: W, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.l_total.to_string(),
            r.l_v.to_string(),
            r.l_r.to_string(),
            r.l_p.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Validation {
    pub epoch: usize,
    /// RMSE over the supervised layers of the validation split.
    pub rmse: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best validation RMSE (the last ones without a validation split).
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
    pub validations: Vec<Validation>,
}

struct Prepared<'a> {
    scene: &'a Scene<f32>,
    targets: WeakTargets<f32>,
    render: RenderParams,
}

fn scene_step(
    model: &Model<f32>,
    item: &Prepared<'_>,
    cfg: &TrainConfig,
    sample_seed: u64,
    op: u8,
) -> Result<(LossReport, Vec<Tensor<f32>>)> {
    let moved;
    let (scene, targets) = if op == 0 {
        (item.scene, &item.targets)
    } else {
        let s = item.scene.dihedral(op);
        let t = WeakTargets::new(&s.volume, &item.targets.supervision)?;
        moved = (s, t);
        (&moved.0, &moved.1)
    };
    let (n, h, w) = scene.volume.dims();
    let spec = &targets.supervision;
    let samples = sample_observations_in_layers(&scene.volume, spec.layers(), cfg.samples_per_scene, sample_seed)?;
    let mut g = Graph::with_params(&model.store);
    let pv = g.constant(point_inputs(&samples, n, h, w)?);
    let max_height = scene.meta.max_height();
    let f = model.forward_graph(&mut g, &scene.buildings, max_height, pv)?;
    let (total, report) = match cfg.objective {
        Objective::Jsil => {
            let inputs = LossInputs {
                targets,
                buildings: &scene.buildings,
                max_height,
                samples: &samples,
            };
            let terms = total_loss_var(&mut g, f.volume, &inputs, &cfg.loss, f.render_k, f.render_t, &item.render, &cfg.pixel)?;
            (terms.total, LossReport::from_terms(&g, &terms))
        }
        Objective::MseWeak | Objective::MseFull => {
            let l = mse_weak_var(&mut g, f.volume, targets)?;
            let v = g.value(l).item() as f64;
            (l, LossReport { l_total: v, ..LossReport::default() })
        }
    };
    let grads = g.backward(total).into_param_grads(&model.store);
    Ok((report, grads))
}

fn validation_rmse(model: &Model<f32>, val: &[Scene<f32>], spec: &SupervisionSpec, cfg: &TrainConfig) -> Result<f64> {
    let eval = EvalConfig { k_samples: cfg.samples_per_scene, seed: derive_seed(cfg.seed, 0x7661, 0), runs: cfg.val_runs };
    let report = evaluate(model, val, Split::Val, spec, &eval)?;
    Ok(report.labeled.expect("supervision is never empty").rmse)
}

/// Trains `model` in place and returns the best-validation snapshot.
///
/// Unlabeled ground-truth layers are never read by the weak objectives: targets,
/// sparse observations and validation all come from the supervised layers.
pub fn train(model: &mut Model<f32>, train: &[Scene<f32>], val: &[Scene<f32>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let dims = (model.config.layers, model.config.height, model.config.width);
    if let Some(s) = train.iter().chain(val).find(|s| s.volume.dims() != dims) {
        return Err(Error::invalid(format!("scene dims {:?} do not match the model {dims:?}", s.volume.dims())));
    }
    let spec = cfg.supervision(model.config.layers)?;
    let prepared: Vec<Prepared<'_>> = train
        .iter()
        .map(|scene| {
            Ok(Prepared {
                scene,
                targets: WeakTargets::new(&scene.volume, &spec)?,
                render: RenderParams::for_altitudes(scene.volume.altitudes()),
            })
        })
        .collect::<Result<_>>()?;

    let schedule = cfg.schedule();
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total_steps);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0x5348)));
        for batch in order.chunks(cfg.batch_size) {
            let lr = schedule.lr(step as f64 / steps_per_epoch as f64);
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let mut acc = LossReport::default();
            for &i in batch {
                let seed = derive_seed(cfg.seed, epoch as u64 + 1, i as u64);
                let op = if cfg.augment { (derive_seed(cfg.seed, epoch as u64 + 1, i as u64 ^ 0x4155_0000) % 8) as u8 } else { 0 };
                let (report, grads) = scene_step(model, &prepared[i], cfg, seed, op)?;
                if !report.l_total.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: report.l_total });
                }
                acc.l_total += report.l_total;
                acc.l_v += report.l_v;
                acc.l_r += report.l_r;
                acc.l_p += report.l_p;
                match sum.as_mut() {
                    Some(s) => s.iter_mut().zip(&grads).for_each(|(a, b)| a.add_assign(b)),
                    None => sum = Some(grads),
                }
            }
            let b = batch.len() as f64;
            let mut grads = sum.expect("non-empty batch");
            grads.iter_mut().for_each(|t| t.scale_assign(1.0 / b as f32));
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: norm });
            }
            opt.step(&mut model.store, &grads, lr)?;
            log.push(LogRow {
                epoch,
                step,
                lr,
                l_total: acc.l_total / b,
                l_v: acc.l_v / b,
                l_r: acc.l_r / b,
                l_p: acc.l_p / b,
            });
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            let rmse = validation_rmse(model, val, &spec, cfg)?;
            validations.push(Validation { epoch, rmse });
            if best.as_ref().is_none_or(|(b, _, _)| rmse < *b) {
                best = Some((rmse, epoch, model.clone()));
            }
        }
    }
    let (best, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), cfg.epochs - 1),
    };
    Ok(TrainOutcome { best, best_epoch, log, validations })
}

pub const CHECKPOINT_FILE: &str = "model.rf3m";
pub const LOG_FILE: &str = "train_log.csv";

/// Artifacts of a training run on disk.
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

/// Loads the train/val splits, trains a fresh model and writes the best checkpoint and the log.
pub fn train_from_manifest(manifest: &Manifest, model_cfg: &ModelConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let train_scenes = manifest.load_split(Split::Train)?;
    let val_scenes = manifest.load_split(Split::Val)?;
    let mut model = Model::<f32>::new(model_cfg.clone())?;
    let outcome = train(&mut model, &train_scenes, &val_scenes, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &outcome.best)?;
    let log = out_dir.join(LOG_FILE);
    let file = std::fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
    write_log_csv(std::io::BufWriter::new(file), &outcome.log)?;
    Ok(RunArtifacts { checkpoint, log, outcome })
}

/// Evaluates a trained model on a split with the given supervision layout.
pub fn evaluate_model(model: &Model<f32>, scenes: &[Scene<f32>], split: Split, spec: &SupervisionSpec, eval: &EvalConfig) -> Result<MetricReport> {
    evaluate(model, scenes, split, spec, eval)
}
