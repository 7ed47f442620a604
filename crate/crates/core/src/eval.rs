//! Split evaluation with a labeled/unlabeled layer breakdown.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{layer_metrics, psnr_from_rmse};
use crate::model::Predictor;
use crate::synth::{with_pool, Split};
use crate::volume::{sample_observations_in_layers, Scene, SupervisionSpec};

pub const EVAL_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_samples: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_samples: 50, seed: 0, runs: EVAL_RUNS }
    }
}

/// Seed of evaluation run `run` on scene `scene`.
pub fn eval_seed(base: u64, run: usize, scene: usize) -> u64 {
    crate::train::derive_seed(base ^ 0x6576_616c, run as u64, scene as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub labeled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub layers: Vec<LayerRow>,
    pub overall: Aggregate,
    pub labeled: Option<Aggregate>,
    /// `None` when every layer is supervised.
    pub unlabeled: Option<Aggregate>,
}

pub const METRIC_CSV_HEADER: [&str; 6] = ["split", "layer", "rmse", "psnr", "ssim", "labeled"];

fn aggregate(rows: &[&LayerRow], plane: usize) -> Option<Aggregate> {
    if rows.is_empty() {
        return None;
    }
    // every layer has the same voxel count, so the pooled MSE is the layer mean
    let mse = rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64;
    Some(Aggregate {
        rmse: mse.sqrt(),
        psnr: psnr_from_rmse(mse.sqrt()),
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64,
        voxels: rows.len() * plane,
    })
}

impl MetricReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRIC_CSV_HEADER)?;
        let f = |v: f64| v.to_string();
        for r in &self.layers {
            w.write_record([self.split.clone(), r.layer.to_string(), f(r.rmse), f(r.psnr), f(r.ssim), r.labeled.to_string()])?;
        }
        for (name, agg, flag) in [
            ("labeled", self.labeled, "true"),
            ("unlabeled", self.unlabeled, "false"),
            ("all", Some(self.overall), "all"),
        ] {
            if let Some(a) = agg {
                w.write_record([self.split.clone(), name.to_string(), f(a.rmse), f(a.psnr), f(a.ssim), flag.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-layer metrics pooled over every scene and `cfg.runs` sample draws.
///
/// Observations are drawn from the supervised layers only, matching what the
/// model sees during weakly supervised training.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[Scene<f32>],
    split: Split,
    supervision: &SupervisionSpec,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    if cfg.runs == 0 {
        return Err(Error::invalid("evaluation needs at least one run"));
    }
    let dims = scenes[0].volume.dims();
    if scenes.iter().any(|s| s.volume.dims() != dims) {
        return Err(Error::invalid("scenes in a split must share dimensions"));
    }
    let (n, h, w) = dims;
    if let Some(&z) = supervision.layers().iter().find(|&&z| z >= n) {
        return Err(Error::invalid(format!("supervised layer {z} out of range for {n} layers")));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.runs).flat_map(|r| (0..scenes.len()).map(move |s| (r, s))).collect();
    let per_job = with_pool(|| {
        jobs.par_iter()
            .map(|&(run, si)| {
                let scene = &scenes[si];
                let samples = sample_observations_in_layers(
                    &scene.volume,
                    supervision.layers(),
                    cfg.k_samples,
                    eval_seed(cfg.seed, run, si),
                )?;
                let pred = predictor.predict_scene(scene, &samples)?;
                layer_metrics(&pred, &scene.volume)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let jobs_f = per_job.len() as f64;
    let layers: Vec<LayerRow> = (0..n)
        .map(|z| {
            let mse = per_job.iter().map(|m| m[z].mse).sum::<f64>() / jobs_f;
            LayerRow {
                layer: z,
                mse,
                rmse: mse.sqrt(),
                psnr: psnr_from_rmse(mse.sqrt()),
                ssim: per_job.iter().map(|m| m[z].ssim).sum::<f64>() / jobs_f,
                labeled: supervision.contains(z),
            }
        })
        .collect();
    let plane = h * w;
    let all: Vec<&LayerRow> = layers.iter().collect();
    let lab: Vec<&LayerRow> = layers.iter().filter(|r| r.labeled).collect();
    let unl: Vec<&LayerRow> = layers.iter().filter(|r| !r.labeled).collect();
    Ok(MetricReport {
        split: split.to_string(),
        overall: aggregate(&all, plane).expect("at least one layer"),
        labeled: aggregate(&lab, plane),
        unlabeled: aggregate(&unl, plane),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};
    use crate::volume::{RadioVolume, SampleSet};

    struct Oracle;

    impl Predictor for Oracle {
        fn predict_scene(&self, scene: &Scene<f32>, _samples: &SampleSet) -> Result<RadioVolume<f32>> {
            Ok(scene.volume.clone())
        }
    }

    /// Predicts a constant 0.5 everywhere.
    struct Flat;

    impl Predictor for Flat {
        fn predict_scene(&self, scene: &Scene<f32>, _samples: &SampleSet) -> Result<RadioVolume<f32>> {
            let (n, h, w) = scene.volume.dims();
            RadioVolume::filled(n, h, w, 0.5, scene.volume.altitudes().to_vec())
        }
    }

    fn scenes(count: u64) -> Vec<Scene<f32>> {
        (0..count)
            .map(|s| {
                generate_scene(&SceneConfig { width: 16, height: 16, layers: 4, num_buildings: (1, 2), building_side: (2, 4), building_height_m: (1.0, 3.5), seed: s, ..SceneConfig::default() })
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_is_perfect() {
        let s = scenes(2);
        let spec = SupervisionSpec::new(vec![0, 3], 0.3, 4).unwrap();
        let r = evaluate(&Oracle, &s, Split::Test, &spec, &EvalConfig::default()).unwrap();
        assert_eq!(r.labeled.unwrap().rmse, 0.0);
        assert_eq!(r.unlabeled.unwrap().rmse, 0.0);
        assert_eq!(r.overall.psnr, f64::INFINITY);
        assert!((r.overall.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.layers.iter().filter(|l| l.labeled).count(), 2);
    }

    #[test]
    fn full_supervision_has_no_unlabeled_aggregate() {
        let s = scenes(1);
        let r = evaluate(&Flat, &s, Split::Val, &SupervisionSpec::full(4), &EvalConfig { runs: 1, ..EvalConfig::default() }).unwrap();
        assert!(r.unlabeled.is_none());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("split,layer,rmse,psnr,ssim,labeled\n"));
        assert!(!text.contains("unlabeled"));
    }

    #[test]
    fn aggregate_is_voxel_weighted() {
        let s = scenes(3);
        let spec = SupervisionSpec::new(vec![1], 0.3, 4).unwrap();
        let r = evaluate(&Flat, &s, Split::Test, &spec, &EvalConfig { runs: 2, ..EvalConfig::default() }).unwrap();
        let plane = 16 * 16;
        let weighted = r.layers.iter().map(|l| l.rmse * l.rmse * plane as f64).sum::<f64>() / (4 * plane) as f64;
        assert!((r.overall.rmse.powi(2) - weighted).abs() < 1e-9);
        // direct pooled oracle over every scene
        let mut se = 0.0;
        for sc in &s {
            se += sc.volume.data().iter().map(|&v| (v as f64 - 0.5).powi(2)).sum::<f64>();
        }
        let pooled = (se / (3 * 4 * plane) as f64).sqrt();
        assert!((r.overall.rmse - pooled).abs() < 1e-9);
        let u = r.unlabeled.unwrap();
        assert_eq!(u.voxels, 3 * plane);
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(evaluate(&Oracle, &[], Split::Test, &SupervisionSpec::full(4), &EvalConfig::default()).is_err());
    }
}
