//! Radio volumes, building maps, sparse observations and supervision masks.

mod format;
mod pseudo;
mod sampling;

pub use format::{
    load_scene, read_samples_csv, read_scene_file, save_scene, write_samples_csv, write_scene_file,
    MAGIC, VERSION,
};
pub use pseudo::build_pseudo_volume;
pub use sampling::{sample_observations, sample_observations_in_layers};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense `N x H x W` grid of normalised spectrum power (layer-major, then row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RadioVolume<T> {
    layers: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
    altitudes: Vec<f64>,
}

impl<T: Scalar> RadioVolume<T> {
    pub fn new(
        layers: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
        altitudes: Vec<f64>,
    ) -> Result<Self> {
        if layers == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("volume dimensions must be positive"));
        }
        if data.len() != layers * height * width {
            return Err(Error::invalid(format!(
                "volume data has {} values, expected {}",
                data.len(),
                layers * height * width
            )));
        }
        if altitudes.len() != layers {
            return Err(Error::invalid(format!(
                "{} altitudes for {layers} layers",
                altitudes.len()
            )));
        }
        if altitudes.windows(2).any(|w| !(w[1] > w[0])) || altitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("altitudes must be finite and strictly increasing"));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::invalid(format!(
                "volume value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            layers,
            height,
            width,
            data,
            altitudes,
        })
    }

    /// Volume filled with one value.
    pub fn filled(layers: usize, height: usize, width: usize, value: T, altitudes: Vec<f64>) -> Result<Self> {
        Self::new(layers, height, width, vec![value; layers * height * width], altitudes)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.layers, self.height, self.width)
    }

    pub fn layer_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn altitudes(&self) -> &[f64] {
        &self.altitudes
    }

    pub fn layer(&self, z: usize) -> &[T] {
        let n = self.layer_len();
        &self.data[z * n..(z + 1) * n]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.layers, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>, altitudes: Vec<f64>) -> Result<Self> {
        match t.shape() {
            [n, h, w] => Self::new(*n, *h, *w, t.data().to_vec(), altitudes),
            s => Err(Error::invalid(format!("expected a rank-3 tensor, got {s:?}"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RadioVolume<U> {
        RadioVolume {
            layers: self.layers,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            altitudes: self.altitudes.clone(),
        }
    }

    /// Copy with each listed layer replaced by zeros (used to hide labels).
    pub fn with_layers_zeroed(&self, layers: &[usize]) -> Self {
        let mut out = self.clone();
        let n = self.layer_len();
        for &z in layers {
            out.data[z * n..(z + 1) * n].iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }
}

/// `H x W` building height map in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct BuildingHeightMap<T> {
    height: usize,
    width: usize,
    heights: Vec<T>,
}

impl<T: Scalar> BuildingHeightMap<T> {
    pub fn new(height: usize, width: usize, heights: Vec<T>) -> Result<Self> {
        if heights.len() != height * width {
            return Err(Error::invalid(format!(
                "height map has {} cells, expected {}",
                heights.len(),
                height * width
            )));
        }
        if let Some(i) = heights.iter().position(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid(format!(
                "building height {} at cell {i} is negative or non-finite",
                heights[i]
            )));
        }
        Ok(Self {
            height,
            width,
            heights,
        })
    }

    pub fn flat(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            heights: vec![T::zero(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn heights(&self) -> &[T] {
        &self.heights
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.heights[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.heights.iter().copied().fold(T::zero(), T::max)
    }

    pub fn check_max(&self, max_height: f64) -> Result<()> {
        if self.max().f64() > max_height {
            return Err(Error::invalid(format!(
                "building height {} exceeds scene maximum {max_height}",
                self.max()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BuildingHeightMap<U> {
        BuildingHeightMap {
            height: self.height,
            width: self.width,
            heights: self.heights.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// One sparse measurement: voxel-unit coordinate and normalised power.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleObservation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub value: f64,
}

impl SampleObservation {
    /// Nearest voxel `(z, y, x)` clamped to the grid.
    pub fn voxel(&self, layers: usize, height: usize, width: usize) -> (usize, usize, usize) {
        let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        (clamp(self.z, layers), clamp(self.y, height), clamp(self.x, width))
    }
}

/// The sparse observation set `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    observations: Vec<SampleObservation>,
}

impl SampleSet {
    pub fn new(observations: Vec<SampleObservation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::invalid("sample set must contain at least one observation"));
        }
        for o in &observations {
            if ![o.x, o.y, o.z, o.value].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("non-finite sample observation"));
            }
            if !(0.0..=1.0).contains(&o.value) {
                return Err(Error::invalid(format!("sample value {} outside [0, 1]", o.value)));
            }
        }
        let mut keys: Vec<[u64; 3]> = observations
            .iter()
            .map(|o| [o.x.to_bits(), o.y.to_bits(), o.z.to_bits()])
            .collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate sample coordinates"));
        }
        Ok(Self { observations })
    }

    pub fn observations(&self) -> &[SampleObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Checks that every coordinate lies inside an `N x H x W` grid.
    pub fn check_bounds(&self, layers: usize, height: usize, width: usize) -> Result<()> {
        for o in &self.observations {
            let inside = (0.0..width as f64).contains(&o.x)
                && (0.0..height as f64).contains(&o.y)
                && (0.0..layers as f64).contains(&o.z);
            if !inside {
                return Err(Error::invalid(format!(
                    "sample ({}, {}, {}) outside the {layers}x{height}x{width} grid",
                    o.x, o.y, o.z
                )));
            }
        }
        Ok(())
    }

    /// Same observations in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            observations: order.iter().map(|&i| self.observations[i]).collect(),
        }
    }
}

/// Which altitude layers carry ground truth, and the pseudo-label weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionSpec {
    supervised_layers: Vec<usize>,
    pub pseudo_label_weight: f64,
}

impl SupervisionSpec {
    pub const DEFAULT_PSEUDO_LABEL_WEIGHT: f64 = 0.3;

    pub fn new(supervised_layers: Vec<usize>, pseudo_label_weight: f64, layers: usize) -> Result<Self> {
        if supervised_layers.is_empty() {
            return Err(Error::invalid("at least one supervised layer is required"));
        }
        if supervised_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("supervised layers must be unique and sorted"));
        }
        if let Some(&z) = supervised_layers.iter().find(|&&z| z >= layers) {
            return Err(Error::invalid(format!(
                "supervised layer {z} out of range for {layers} layers"
            )));
        }
        if !(pseudo_label_weight >= 0.0) {
            return Err(Error::invalid("pseudo-label weight must be non-negative"));
        }
        Ok(Self {
            supervised_layers,
            pseudo_label_weight,
        })
    }

    /// Every layer supervised.
    pub fn full(layers: usize) -> Self {
        Self {
            supervised_layers: (0..layers).collect(),
            pseudo_label_weight: Self::DEFAULT_PSEUDO_LABEL_WEIGHT,
        }
    }

    /// `count` layers spread evenly from the first to the last layer.
    pub fn evenly_spaced(count: usize, layers: usize) -> Result<Self> {
        if count == 0 || count > layers {
            return Err(Error::invalid(format!("cannot spread {count} of {layers} layers")));
        }
        let idx: Vec<usize> = if count == 1 {
            vec![(layers - 1) / 2]
        } else {
            (0..count)
                .map(|i| ((i * (layers - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        let mut idx = idx;
        idx.dedup();
        Self::new(idx, Self::DEFAULT_PSEUDO_LABEL_WEIGHT, layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.supervised_layers
    }

    pub fn len(&self) -> usize {
        self.supervised_layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supervised_layers.is_empty()
    }

    pub fn contains(&self, z: usize) -> bool {
        self.supervised_layers.binary_search(&z).is_ok()
    }

    /// Layers without ground truth.
    pub fn unlabeled(&self, layers: usize) -> Vec<usize> {
        (0..layers).filter(|z| !self.contains(*z)).collect()
    }
}

/// Metadata stored alongside a scene in the RM3D container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub altitudes_m: Vec<f64>,
    pub norm_min_db: f64,
    pub norm_max_db: f64,
    /// Height used to normalise building maps to `[0, 1]`.
    #[serde(default)]
    pub max_height_m: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tx_position: Option<[f64; 3]>,
}

impl SceneMeta {
    /// Normalisation height: explicit value or the top altitude.
    pub fn max_height(&self) -> f64 {
        self.max_height_m
            .unwrap_or_else(|| self.altitudes_m.last().copied().unwrap_or(1.0))
    }

    /// Converts a normalised value back to path loss in dB.
    pub fn denormalize_db(&self, value: f64) -> f64 {
        self.norm_max_db - value * (self.norm_max_db - self.norm_min_db)
    }
}

/// A radio volume with its environment and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub volume: RadioVolume<T>,
    pub buildings: BuildingHeightMap<T>,
    pub meta: SceneMeta,
}

impl<T: Scalar> Scene<T> {
    pub fn new(volume: RadioVolume<T>, buildings: BuildingHeightMap<T>, meta: SceneMeta) -> Result<Self> {
        if volume.height() != buildings.height() || volume.width() != buildings.width() {
            return Err(Error::invalid("volume and building map footprints differ"));
        }
        if meta.altitudes_m.as_slice() != volume.altitudes() {
            return Err(Error::invalid("metadata altitudes disagree with the volume"));
        }
        Ok(Self {
            volume,
            buildings,
            meta,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Scene<U> {
        Scene {
            volume: self.volume.cast(),
            buildings: self.buildings.cast(),
            meta: self.meta.clone(),
        }
    }

    /// Applies one of the 8 symmetries of the square footprint to every layer and the map.
    ///
    /// Bit 2 of `op` transposes (ignored on non-square scenes), bit 0 mirrors x, bit 1 mirrors y.
    /// The simulator is isotropic, so the result is again a valid scene.
    pub fn dihedral(&self, op: u8) -> Scene<T> {
        let (h, w) = (self.buildings.height, self.buildings.width);
        let op = if h == w { op & 7 } else { op & 3 };
        let plane = |src: &[T]| dihedral_plane(src, h, w, op);
        let mut data = Vec::with_capacity(self.volume.data.len());
        for z in 0..self.volume.layers {
            data.extend(plane(self.volume.layer(z)));
        }
        let mut meta = self.meta.clone();
        if let Some(p) = meta.tx_position.as_mut() {
            if op & 4 != 0 {
                p.swap(0, 1);
            }
            if op & 1 != 0 {
                p[0] = w as f64 - p[0];
            }
            if op & 2 != 0 {
                p[1] = h as f64 - p[1];
            }
        }
        Scene {
            volume: RadioVolume { data, ..self.volume.clone() },
            buildings: BuildingHeightMap { height: h, width: w, heights: plane(&self.buildings.heights) },
            meta,
        }
    }
}

fn dihedral_plane<T: Copy>(src: &[T], h: usize, w: usize, op: u8) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (mut sy, mut sx) = (y, x);
            if op & 2 != 0 {
                sy = h - 1 - sy;
            }
            if op & 1 != 0 {
                sx = w - 1 - sx;
            }
            if op & 4 != 0 {
                std::mem::swap(&mut sy, &mut sx);
            }
            out.push(src[sy * w + sx]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_out_of_range_values() {
        assert!(RadioVolume::new(1, 1, 2, vec![0.5f32, 1.5], vec![1.0]).is_err());
        assert!(RadioVolume::new(1, 1, 2, vec![0.5f32, f32::NAN], vec![1.0]).is_err());
        assert!(RadioVolume::new(2, 1, 1, vec![0.5f32, 0.5], vec![2.0, 1.0]).is_err());
        assert!(RadioVolume::new(2, 1, 1, vec![0.5f32, 0.5], vec![1.0]).is_err());
        assert!(RadioVolume::new(2, 1, 1, vec![0.5f32, 0.5], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn sample_set_rejects_duplicates_and_empty() {
        let o = SampleObservation { x: 1.0, y: 2.0, z: 0.0, value: 0.3 };
        assert!(SampleSet::new(vec![]).is_err());
        assert!(SampleSet::new(vec![o, o]).is_err());
        assert!(SampleSet::new(vec![o]).is_ok());
    }

    #[test]
    fn supervision_validation() {
        assert!(SupervisionSpec::new(vec![], 0.3, 8).is_err());
        assert!(SupervisionSpec::new(vec![3, 1], 0.3, 8).is_err());
        assert!(SupervisionSpec::new(vec![1, 1], 0.3, 8).is_err());
        assert!(SupervisionSpec::new(vec![8], 0.3, 8).is_err());
        let s = SupervisionSpec::new(vec![0, 4, 7], 0.3, 8).unwrap();
        assert_eq!(s.unlabeled(8), vec![1, 2, 3, 5, 6]);
        assert!(SupervisionSpec::full(8).unlabeled(8).is_empty());
    }

    #[test]
    fn evenly_spaced_layers() {
        assert_eq!(SupervisionSpec::evenly_spaced(3, 8).unwrap().layers(), &[0, 4, 7]);
        assert_eq!(SupervisionSpec::evenly_spaced(5, 8).unwrap().layers(), &[0, 2, 4, 5, 7]);
        assert_eq!(SupervisionSpec::evenly_spaced(1, 8).unwrap().layers(), &[3]);
        assert_eq!(SupervisionSpec::evenly_spaced(3, 19).unwrap().layers(), &[0, 9, 18]);
    }

    #[test]
    fn dihedral_ops_are_involutions_or_rotations() {
        let vol = RadioVolume::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect(), vec![1.0, 2.0]).unwrap();
        let map = BuildingHeightMap::new(3, 3, (0..9).map(|i| i as f64).collect()).unwrap();
        let meta = SceneMeta { altitudes_m: vec![1.0, 2.0], norm_min_db: 40.0, norm_max_db: 160.0, max_height_m: Some(9.0), seed: None, tx_position: Some([0.5, 2.5, 1.0]) };
        let s = Scene::new(vol, map, meta).unwrap();
        assert_eq!(s.dihedral(0), s);
        for op in 0..8 {
            let d = s.dihedral(op);
            // mirrors and the transpose undo themselves; the rest are rotations
            if [1, 2, 3, 4, 7].contains(&op) {
                assert_eq!(d.dihedral(op), s);
            }
            let mut a: Vec<f64> = d.volume.layer(1).to_vec();
            a.sort_by(f64::total_cmp);
            assert_eq!(a, s.volume.layer(1));
        }
        // mirror x: row 0 reversed
        assert_eq!(&s.dihedral(1).buildings.heights()[..3], &[2.0, 1.0, 0.0]);
        // transpose: first row becomes the first column
        assert_eq!(&s.dihedral(4).buildings.heights()[..3], &[0.0, 3.0, 6.0]);
        assert_eq!(s.dihedral(5).meta.tx_position, Some([0.5, 0.5, 1.0]));
    }

    #[test]
    fn nearest_voxel_lookup_clamps() {
        let o = SampleObservation { x: 3.6, y: -0.2, z: 9.0, value: 0.0 };
        assert_eq!(o.voxel(8, 4, 4), (7, 0, 3));
    }
}
