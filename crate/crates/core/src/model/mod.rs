//! Map/point dual-stream encoder, cross-attention fusion and multi-height decoder.

mod checkpoint;
mod decoder;
mod encoder;
mod fusion;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{DecoderConfig, NonLocal, VolumeDecoder};
pub use encoder::{fourier_encode, point_inputs, EncoderConfig, MapEncoder, MapTokens, PointEncoder, PointTokens};
pub use fusion::{CrossAttentionFusion, Fused};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss::RenderParams;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{BuildingHeightMap, RadioVolume, SampleSet, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Initial density gain and threshold of the rendering module.
    pub render_k: f64,
    pub render_t: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            height: 64,
            width: 64,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            render_k: RenderParams::DEFAULT_K,
            render_t: RenderParams::DEFAULT_T,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("model needs at least one output layer"));
        }
        self.encoder.validate(self.height, self.width)?;
        self.decoder.validate()?;
        let p = self.encoder.patch_size;
        let up = self.decoder.upscale();
        if (self.height / p) * up != self.height || (self.width / p) * up != self.width {
            return Err(Error::invalid(format!(
                "{} decoder stages upsample a {}x{} token grid by {up}, not to {}x{}",
                self.decoder.stages,
                self.height / p,
                self.width / p,
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Network {
    points: PointEncoder,
    map: MapEncoder,
    fusion: CrossAttentionFusion,
    decoder: VolumeDecoder,
    render_k: ParamId,
    render_t: ParamId,
}

/// Graph handles of one forward pass.
pub struct Forward {
    /// `[N, H, W]` prediction.
    pub volume: Var,
    pub points: PointTokens,
    pub map: MapTokens,
    pub fused: Fused,
    pub render_k: Var,
    pub render_t: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    net: Network,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let map = MapEncoder::new(&mut store, &mut rng, e, config.height, config.width)?;
        let points = PointEncoder::new(&mut store, &mut rng, e);
        let fusion = CrossAttentionFusion::new(&mut store, &mut rng, e.d_model, e.heads);
        let decoder = VolumeDecoder::new(&mut store, &mut rng, &config.decoder, e.d_model, map.grid(), config.layers)?;
        let render_k = store.add("render.k", Tensor::scalar(T::of(config.render_k)), true);
        let render_t = store.add("render.t", Tensor::scalar(T::of(config.render_t)), true);
        Ok(Self {
            store,
            net: Network { points, map, fusion, decoder, render_k, render_t },
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }

    pub fn render_params(&self) -> (f64, f64) {
        (self.store.get(self.net.render_k).item().f64(), self.store.get(self.net.render_t).item().f64())
    }

    fn check_inputs(&self, buildings: &BuildingHeightMap<T>) -> Result<()> {
        if buildings.height() != self.config.height || buildings.width() != self.config.width {
            return Err(Error::invalid(format!(
                "model expects {}x{} maps, got {}x{}",
                self.config.height,
                self.config.width,
                buildings.height(),
                buildings.width()
            )));
        }
        Ok(())
    }

    /// Records a forward pass; `points` is the `[k, 4]` input built by [`point_inputs`].
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        buildings: &BuildingHeightMap<T>,
        max_height: f64,
        points: Var,
    ) -> Result<Forward> {
        self.check_inputs(buildings)?;
        let map = self.net.map.encode(g, buildings, max_height)?;
        let pts = self.net.points.encode(g, points)?;
        let fused = self.net.fusion.forward(g, map.tokens, pts.tokens)?;
        let flat = self.net.decoder.forward(g, fused.tokens)?;
        let (n, h, w) = (self.config.layers, self.config.height, self.config.width);
        let volume = g.reshape(flat, [n, h, w]);
        Ok(Forward {
            volume,
            points: pts,
            map,
            fused,
            render_k: g.param(self.net.render_k),
            render_t: g.param(self.net.render_t),
        })
    }

    pub fn predict(
        &self,
        buildings: &BuildingHeightMap<T>,
        max_height: f64,
        samples: &SampleSet,
        altitudes: &[f64],
    ) -> Result<RadioVolume<T>> {
        if altitudes.len() != self.config.layers {
            return Err(Error::invalid(format!(
                "{} altitudes for a {}-layer model",
                altitudes.len(),
                self.config.layers
            )));
        }
        let mut g = Graph::inference(&self.store);
        let pv = point_inputs(samples, self.config.layers, self.config.height, self.config.width)?;
        let pv = g.constant(pv);
        let out = self.forward_graph(&mut g, buildings, max_height, pv)?;
        RadioVolume::from_tensor(g.value(out.volume), altitudes.to_vec())
    }
}

/// Anything that maps a scene's environment and sparse samples to a volume.
pub trait Predictor: Sync {
    fn predict_scene(&self, scene: &Scene<f32>, samples: &SampleSet) -> Result<RadioVolume<f32>>;
}

impl Predictor for Model<f32> {
    fn predict_scene(&self, scene: &Scene<f32>, samples: &SampleSet) -> Result<RadioVolume<f32>> {
        self.predict(&scene.buildings, scene.meta.max_height(), samples, scene.volume.altitudes())
    }
}

#[cfg(test)]
mod tests;
