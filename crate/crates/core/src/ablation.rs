//! Comparison harnesses: supervision altitudes, sample counts and loss terms.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::synth::{with_pool, Split};
use crate::train::{train, Objective, TrainConfig};
use crate::volume::{Scene, SupervisionSpec};

/// Scenes of the three splits, already loaded.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [Scene<f32>],
    pub val: &'a [Scene<f32>],
    pub test: &'a [Scene<f32>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub supervised_layers: Vec<usize>,
    /// Observations per scene at evaluation time.
    pub k: usize,
    pub labeled_rmse: Option<f64>,
    pub unlabeled_rmse: Option<f64>,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl AblationRow {
    fn from_report(variant: String, spec: &SupervisionSpec, k: usize, r: &MetricReport) -> Self {
        Self {
            variant,
            supervised_layers: spec.layers().to_vec(),
            k,
            labeled_rmse: r.labeled.map(|a| a.rmse),
            unlabeled_rmse: r.unlabeled.map(|a| a.rmse),
            rmse: r.overall.rmse,
            psnr: r.overall.psnr,
            ssim: r.overall.ssim,
        }
    }
}

pub const ABLATION_CSV_HEADER: [&str; 8] =
    ["variant", "supervised_layers", "k", "labeled_rmse", "unlabeled_rmse", "rmse", "psnr", "ssim"];

/// Layers are `;`-joined; absent aggregates are empty fields.
pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let layers: Vec<String> = r.supervised_layers.iter().map(|z| z.to_string()).collect();
        w.write_record([
            r.variant.clone(),
            layers.join(";"),
            r.k.to_string(),
            opt(r.labeled_rmse),
            opt(r.unlabeled_rmse),
            r.rmse.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn train_one(model_cfg: &ModelConfig, cfg: &TrainConfig, data: Splits<'_>) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(model_cfg.clone())?;
    Ok(train(&mut model, data.train, data.val, cfg)?.best)
}

fn check_data(data: Splits<'_>) -> Result<()> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("ablations need non-empty train and test splits"));
    }
    Ok(())
}

/// One model per supervised-layer set, all with the same seeds; evaluated on the test split.
pub fn ablate_altitudes(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    data: Splits<'_>,
    strategies: &[Vec<usize>],
) -> Result<Vec<AblationRow>> {
    check_data(data)?;
    let n = model_cfg.layers;
    let specs = strategies
        .iter()
        .map(|s| SupervisionSpec::new(s.clone(), cfg.loss.lambda_pl, n))
        .collect::<Result<Vec<_>>>()?;
    with_pool(|| {
        specs
            .par_iter()
            .map(|spec| {
                let run = TrainConfig { supervised_layers: spec.layers().to_vec(), ..cfg.clone() };
                let model = train_one(model_cfg, &run, data)?;
                let report = evaluate(&model, data.test, Split::Test, spec, eval)?;
                let name = spec.layers().iter().map(|z| z.to_string()).collect::<Vec<_>>().join("-");
                Ok(AblationRow::from_report(format!("layers-{name}"), spec, eval.k_samples, &report))
            })
            .collect()
    })
}

/// RMSE against the observation count.
///
/// With `retrain` every count gets its own model trained at that count; otherwise
/// a single model trained at `cfg.samples_per_scene` is evaluated at every count.
pub fn ablate_sampling(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    data: Splits<'_>,
    counts: &[usize],
    retrain: bool,
) -> Result<Vec<AblationRow>> {
    check_data(data)?;
    if counts.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    let spec = cfg.supervision(model_cfg.layers)?;
    if !retrain {
        let model = train_one(model_cfg, cfg, data)?;
        return evaluate_counts(&model, data.test, &spec, eval, counts);
    }
    with_pool(|| {
        counts
            .par_iter()
            .map(|&k| {
                let model = train_one(model_cfg, &TrainConfig { samples_per_scene: k, ..cfg.clone() }, data)?;
                let report = evaluate(&model, data.test, Split::Test, &spec, &EvalConfig { k_samples: k, ..eval.clone() })?;
                Ok(AblationRow::from_report(format!("k-{k}"), &spec, k, &report))
            })
            .collect()
    })
}

/// Evaluates one trained model on `scenes` at each observation count.
pub fn evaluate_counts(
    model: &Model<f32>,
    scenes: &[Scene<f32>],
    spec: &SupervisionSpec,
    eval: &EvalConfig,
    counts: &[usize],
) -> Result<Vec<AblationRow>> {
    if counts.contains(&0) {
        return Err(Error::invalid("sample counts must be positive"));
    }
    counts
        .iter()
        .map(|&k| {
            let report = evaluate(model, scenes, Split::Test, spec, &EvalConfig { k_samples: k, ..eval.clone() })?;
            Ok(AblationRow::from_report(format!("k-{k}"), spec, k, &report))
        })
        .collect()
}

/// Objective configurations compared on the loss axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    VolumeOnly,
    VolumePixel,
    VolumeRender,
    Full,
    MseWeak,
    MseFull,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::VolumeOnly,
        LossVariant::VolumePixel,
        LossVariant::VolumeRender,
        LossVariant::Full,
        LossVariant::MseWeak,
        LossVariant::MseFull,
    ];

    /// `base` with the objective and weights of this variant.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let w = &mut cfg.loss;
        match self {
            LossVariant::VolumeOnly => {
                w.lambda_r = 0.0;
                w.lambda_p = 0.0;
            }
            LossVariant::VolumePixel => w.lambda_r = 0.0,
            LossVariant::VolumeRender => w.lambda_p = 0.0,
            LossVariant::Full => {}
            LossVariant::MseWeak => cfg.objective = Objective::MseWeak,
            LossVariant::MseFull => cfg.objective = Objective::MseFull,
        }
        if matches!(self, LossVariant::VolumeOnly | LossVariant::VolumePixel | LossVariant::VolumeRender | LossVariant::Full) {
            cfg.objective = Objective::Jsil;
        }
        cfg
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::VolumeOnly => "lv",
            LossVariant::VolumePixel => "lv+lp",
            LossVariant::VolumeRender => "lv+lr",
            LossVariant::Full => "full",
            LossVariant::MseWeak => "mse-weak",
            LossVariant::MseFull => "mse-full",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown loss variant {s:?} (lv, lv+lp, lv+lr, full, mse-weak, mse-full)")))
    }
}

/// One model per loss configuration; rows report the breakdown over `cfg.supervised_layers`
/// even for `mse-full`, so every variant is scored on the same unlabeled layers.
pub fn ablate_loss(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    data: Splits<'_>,
    variants: &[LossVariant],
) -> Result<Vec<AblationRow>> {
    check_data(data)?;
    let spec = SupervisionSpec::new(cfg.supervised_layers.clone(), cfg.loss.lambda_pl, model_cfg.layers)?;
    with_pool(|| {
        variants
            .par_iter()
            .map(|&v| {
                let model = train_one(model_cfg, &v.apply(cfg), data)?;
                let report = evaluate(&model, data.test, Split::Test, &spec, eval)?;
                Ok(AblationRow::from_report(v.to_string(), &spec, eval.k_samples, &report))
            })
            .collect()
    })
}
