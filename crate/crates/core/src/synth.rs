//! Synthetic scenes from a log-distance path-loss model with building shadowing.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{read_scene_file, write_scene_file, BuildingHeightMap, RadioVolume, Scene, SceneMeta};

/// Segment sampling resolution for obstruction lengths, metres.
pub const OBSTRUCTION_STEP_M: f64 = 0.25;

const LAYOUT_RETRIES: usize = 64;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub layers: usize,
    /// Altitude of layer 0 and spacing between layers, metres.
    pub altitude_start_m: f64,
    pub altitude_step_m: f64,
    /// Inclusive building count range.
    pub num_buildings: (usize, usize),
    pub building_height_m: (f64, f64),
    /// Inclusive footprint side range in cells.
    pub building_side: (usize, usize),
    /// Transmitter in metres; drawn per scene (outside buildings) when `None`.
    pub tx_position: Option<[f64; 3]>,
    /// `PL(d0)` at `d0 = 1 m`.
    pub tx_power_offset_db: f64,
    pub path_loss_exponent: f64,
    pub shadow_sigma_db: f64,
    pub shadow_per_blocked_meter_db: f64,
    /// Dataset-wide normalisation bounds.
    pub norm_min_db: f64,
    pub norm_max_db: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            layers: 8,
            altitude_start_m: 1.0,
            altitude_step_m: 1.0,
            num_buildings: (4, 8),
            building_height_m: (2.0, 7.0),
            building_side: (4, 14),
            tx_position: None,
            tx_power_offset_db: 40.0,
            path_loss_exponent: 2.5,
            shadow_sigma_db: 1.0,
            shadow_per_blocked_meter_db: 3.0,
            norm_min_db: 40.0,
            norm_max_db: 160.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn altitudes(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|i| self.altitude_start_m + i as f64 * self.altitude_step_m)
            .collect()
    }

    pub fn max_height(&self) -> f64 {
        self.altitude_start_m + (self.layers.max(1) - 1) as f64 * self.altitude_step_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.layers == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if !(self.altitude_start_m >= 0.0 && self.altitude_step_m > 0.0) {
            return Err(Error::invalid("altitudes must start at >= 0 and increase"));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(Error::invalid("path-loss exponent must be positive"));
        }
        if !(self.shadow_sigma_db >= 0.0 && self.shadow_per_blocked_meter_db >= 0.0) {
            return Err(Error::invalid("shadowing terms must be non-negative"));
        }
        if !(self.norm_max_db > self.norm_min_db) {
            return Err(Error::invalid("norm_max_db must exceed norm_min_db"));
        }
        let (hmin, hmax) = self.building_height_m;
        if !(0.0 <= hmin && hmin <= hmax && hmax <= self.max_height()) {
            return Err(Error::invalid(format!(
                "building heights ({hmin}, {hmax}) must lie within [0, {}]",
                self.max_height()
            )));
        }
        if self.num_buildings.0 > self.num_buildings.1 {
            return Err(Error::invalid("building count range is reversed"));
        }
        let (smin, smax) = self.building_side;
        if smin == 0 || smin > smax || smax > self.width.min(self.height) {
            return Err(Error::invalid("building side range does not fit the grid"));
        }
        if let Some([x, y, z]) = self.tx_position {
            let inside = (0.0..=self.width as f64).contains(&x)
                && (0.0..=self.height as f64).contains(&y)
                && (0.0..=self.max_height()).contains(&z);
            if !inside {
                return Err(Error::invalid(format!("transmitter ({x}, {y}, {z}) outside the grid")));
            }
        }
        Ok(())
    }

    /// Log-distance path loss without shadowing; distances below `d0` are clamped to `d0`.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        self.tx_power_offset_db + 10.0 * self.path_loss_exponent * distance_m.max(1.0).log10()
    }

    pub fn normalize_db(&self, pl: f64) -> f64 {
        ((self.norm_max_db - pl) / (self.norm_max_db - self.norm_min_db)).clamp(0.0, 1.0)
    }
}

/// Axis-aligned building prism occupying cells `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Building {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    height: f64,
}

impl Building {
    fn overlaps(&self, o: &Building) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    /// Parameter interval of `a + t(b - a)` inside the prism footprint and below its roof.
    fn clip(&self, a: [f64; 3], b: [f64; 3]) -> Option<(f64, f64)> {
        let lo = [self.x0 as f64, self.y0 as f64, f64::NEG_INFINITY];
        let hi = [self.x1 as f64, self.y1 as f64, self.height];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            let d = b[i] - a[i];
            if d.abs() < 1e-15 {
                if a[i] < lo[i] || a[i] > hi[i] {
                    return None;
                }
                continue;
            }
            let (mut u, mut v) = ((lo[i] - a[i]) / d, (hi[i] - a[i]) / d);
            if u > v {
                std::mem::swap(&mut u, &mut v);
            }
            t0 = t0.max(u);
            t1 = t1.min(v);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

struct Segment {
    a: [f64; 3],
    d: [f64; 3],
    steps: usize,
    step_len: f64,
}

impl Segment {
    fn new(a: [f64; 3], b: [f64; 3]) -> Option<Self> {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len == 0.0 {
            return None;
        }
        let steps = (len / OBSTRUCTION_STEP_M).ceil().max(1.0) as usize;
        Some(Self { a, d, steps, step_len: len / steps as f64 })
    }

    /// Number of blocked midpoint samples with indices in `range`.
    fn count_blocked<T: Scalar>(&self, map: &BuildingHeightMap<T>, range: std::ops::Range<usize>) -> usize {
        let (h, w) = (map.height(), map.width());
        let mut blocked = 0usize;
        for i in range {
            let t = (i as f64 + 0.5) / self.steps as f64;
            let x = self.a[0] + t * self.d[0];
            let y = self.a[1] + t * self.d[1];
            let z = self.a[2] + t * self.d[2];
            let cx = (x.floor().max(0.0) as usize).min(w - 1);
            let cy = (y.floor().max(0.0) as usize).min(h - 1);
            if map.at(cy, cx).f64() > z {
                blocked += 1;
            }
        }
        blocked
    }
}

/// Length of `a -> b` (metres) spent in cells whose building height exceeds the segment height.
///
/// Cell `(x, y)` covers `[x, x+1) x [y, y+1)`. The segment is split into equal steps of at most
/// [`OBSTRUCTION_STEP_M`], each classified by its midpoint.
pub fn obstructed_length<T: Scalar>(a: [f64; 3], b: [f64; 3], map: &BuildingHeightMap<T>) -> f64 {
    match Segment::new(a, b) {
        Some(seg) => seg.count_blocked(map, 0..seg.steps) as f64 * seg.step_len,
        None => 0.0,
    }
}

fn place_buildings(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Building> {
    let count = rng.random_range(cfg.num_buildings.0..=cfg.num_buildings.1);
    let (smin, smax) = cfg.building_side;
    let (hmin, hmax) = cfg.building_height_m;
    let mut out: Vec<Building> = Vec::with_capacity(count);
    for _ in 0..PLACEMENT_ATTEMPTS {
        if out.len() == count {
            break;
        }
        let sw = rng.random_range(smin..=smax);
        let sh = rng.random_range(smin..=smax);
        let x0 = rng.random_range(0..=cfg.width - sw);
        let y0 = rng.random_range(0..=cfg.height - sh);
        let height = if hmax > hmin { rng.random_range(hmin..=hmax) } else { hmin };
        let b = Building { x0, y0, x1: x0 + sw, y1: y0 + sh, height };
        if out.iter().all(|o| !o.overlaps(&b)) {
            out.push(b);
        }
    }
    out
}

fn blocks_tx(buildings: &[Building], tx: [f64; 3]) -> bool {
    buildings.iter().any(|b| {
        tx[0] >= b.x0 as f64 && tx[0] <= b.x1 as f64 && tx[1] >= b.y0 as f64 && tx[1] <= b.y1 as f64 && tx[2] <= b.height
    })
}

/// One synthetic scene. Pure in `cfg` (including `cfg.seed`).
pub fn generate_scene<T: Scalar>(cfg: &SceneConfig) -> Result<Scene<T>> {
    cfg.validate()?;
    let (w, h, n) = (cfg.width, cfg.height, cfg.layers);
    let altitudes = cfg.altitudes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let tx = match cfg.tx_position {
        Some(p) => p,
        None => [
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            rng.random_range(altitudes[0]..=cfg.max_height()),
        ],
    };
    let mut layout = None;
    for _ in 0..LAYOUT_RETRIES {
        let b = place_buildings(cfg, &mut rng);
        if !blocks_tx(&b, tx) {
            layout = Some(b);
            break;
        }
    }
    let buildings = layout.ok_or_else(|| {
        Error::Generation(format!(
            "transmitter at {tx:?} fell inside a building in {LAYOUT_RETRIES} layouts"
        ))
    })?;

    let mut heights = vec![0.0f64; h * w];
    for b in &buildings {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                heights[y * w + x] = b.height;
            }
        }
    }
    let map = BuildingHeightMap::new(h, w, heights.clone())?;

    let shadow = Normal::new(0.0, cfg.shadow_sigma_db).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(n * h * w);
    for &alt in &altitudes {
        for y in 0..h {
            for x in 0..w {
                // the draw happens for every voxel so the noise field does not depend on the layout
                let noise = if cfg.shadow_sigma_db > 0.0 { shadow.sample(&mut rng) } else { 0.0 };
                if heights[y * w + x] > alt {
                    data.push(T::zero());
                    continue;
                }
                let p = [x as f64 + 0.5, y as f64 + 0.5, alt];
                let d = ((p[0] - tx[0]).powi(2) + (p[1] - tx[1]).powi(2) + (p[2] - tx[2]).powi(2)).sqrt();
                let mut pl = cfg.path_loss_db(d) + noise;
                if cfg.shadow_per_blocked_meter_db > 0.0 {
                    pl += cfg.shadow_per_blocked_meter_db * blocked_via_boxes(tx, p, &buildings, &map);
                }
                data.push(T::of(cfg.normalize_db(pl)));
            }
        }
    }

    let volume = RadioVolume::new(n, h, w, data, altitudes.clone())?;
    let meta = SceneMeta {
        altitudes_m: altitudes,
        norm_min_db: cfg.norm_min_db,
        norm_max_db: cfg.norm_max_db,
        max_height_m: Some(cfg.max_height()),
        seed: Some(cfg.seed),
        tx_position: Some(tx),
    };
    Scene::new(volume, map.cast(), meta)
}

/// [`obstructed_length`] restricted to the samples that can fall inside a building box.
/// Outside every box the height map is zero and nothing is blocked, so the result is identical.
fn blocked_via_boxes(a: [f64; 3], b: [f64; 3], buildings: &[Building], map: &BuildingHeightMap<f64>) -> f64 {
    let Some(seg) = Segment::new(a, b) else { return 0.0 };
    let s = seg.steps as f64;
    let mut ranges: Vec<(usize, usize)> = buildings
        .iter()
        .filter_map(|bld| bld.clip(a, b))
        .map(|(t0, t1)| {
            // sample i has its midpoint at (i + 0.5)/steps; widen by a sample for rounding
            let i0 = ((t0 * s - 0.5).floor().max(0.0) as usize).saturating_sub(1);
            let i1 = (((t1 * s - 0.5).ceil() + 2.0).max(0.0) as usize).min(seg.steps);
            (i0, i1.max(i0))
        })
        .collect();
    ranges.sort_unstable();
    let mut total = 0usize;
    let mut done = 0usize;
    for (i0, i1) in ranges {
        let start = i0.max(done);
        if i1 > start {
            total += seg.count_blocked(map, start..i1);
            done = i1;
        }
    }
    total as f64 * seg.step_len
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_slice(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Scene<f32>>> {
        self.entries(split)
            .iter()
            .map(|e| read_scene_file(&self.root.join(&e.path)))
            .collect()
    }
}

/// Split sizes for the 0.7 / 0.1 / 0.2 partition.
pub fn split_counts(count: usize) -> (usize, usize, usize) {
    let train = (0.7 * count as f64).round() as usize;
    let val = (0.1 * count as f64).round() as usize;
    (train, val, count - train - val)
}

/// Worker cap from `RADIOFIELD3D_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("RADIOFIELD3D_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub(crate) fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Writes `count` scenes plus `manifest.json` into `out_dir`.
///
/// Scene `i` gets its own seed drawn from `seed`, so every scene has an independent layout.
pub fn generate_dataset(template: &SceneConfig, count: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if count < 10 {
        return Err(Error::invalid(format!("dataset needs at least 10 scenes, got {count}")));
    }
    template.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();

    let entries: Vec<ManifestEntry> = with_pool(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let cfg = SceneConfig { seed: s, ..template.clone() };
                let scene = generate_scene::<f32>(&cfg)?;
                let rel = PathBuf::from(format!("scene_{i:05}.rm3d"));
                write_scene_file(&out_dir.join(&rel), &scene)?;
                Ok(ManifestEntry { path: rel, seed: s })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let (ntr, nva, _) = split_counts(count);
    let mut it = entries.into_iter();
    let manifest = Manifest {
        train: it.by_ref().take(ntr).collect(),
        val: it.by_ref().take(nva).collect(),
        test: it.collect(),
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(tx: [f64; 3], n: f64) -> SceneConfig {
        SceneConfig {
            width: 16,
            height: 16,
            layers: 4,
            num_buildings: (0, 0),
            building_side: (1, 4),
            building_height_m: (0.0, 0.0),
            tx_position: Some(tx),
            path_loss_exponent: n,
            shadow_sigma_db: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn reference_distance_gives_offset() {
        let cfg = quiet([5.5, 5.5, 2.0], 2.5);
        let s = generate_scene::<f64>(&cfg).unwrap();
        // voxel (x=5, y=5) on layer 0 sits 1 m below the transmitter
        let pl = s.meta.denormalize_db(s.volume.get(0, 5, 5));
        assert!((pl - cfg.tx_power_offset_db).abs() < 1e-9);
    }

    #[test]
    fn doubling_distance_adds_six_db_for_n2() {
        let cfg = quiet([0.5, 3.5, 1.0], 2.0);
        let s = generate_scene::<f64>(&cfg).unwrap();
        let pl2 = s.meta.denormalize_db(s.volume.get(0, 3, 2));
        let pl4 = s.meta.denormalize_db(s.volume.get(0, 3, 4));
        assert!((pl4 - pl2 - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((pl4 - pl2 - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn free_space_is_monotone_in_distance() {
        let cfg = quiet([7.3, 9.1, 2.5], 2.5);
        let s = generate_scene::<f64>(&cfg).unwrap();
        let tx = cfg.tx_position.unwrap();
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (z, &alt) in s.volume.altitudes().iter().enumerate() {
            for y in 0..16 {
                for x in 0..16 {
                    let d = ((x as f64 + 0.5 - tx[0]).powi(2) + (y as f64 + 0.5 - tx[1]).powi(2) + (alt - tx[2]).powi(2)).sqrt();
                    pts.push((d, s.volume.get(z, y, x)));
                }
            }
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!(pts.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));
    }

    #[test]
    fn obstruction_oracles() {
        let flat = BuildingHeightMap::<f64>::flat(16, 16);
        assert_eq!(obstructed_length([0.5, 0.5, 1.0], [12.0, 9.0, 3.0], &flat), 0.0);
        let mut h = vec![0.0; 16 * 16];
        h[3 * 16 + 5] = 4.0;
        let map = BuildingHeightMap::new(16, 16, h).unwrap();
        assert_eq!(obstructed_length([2.0, 3.5, 2.0], [2.0, 3.5, 2.0], &map), 0.0);
        // 10 m along y = 3.5 at 2 m crosses cell x = 5, which is 1 m wide
        let l = obstructed_length([0.2, 3.5, 2.0], [10.2, 3.5, 2.0], &map);
        assert!((l - 1.0).abs() <= OBSTRUCTION_STEP_M, "{l}");
        // above the roof nothing is blocked
        assert_eq!(obstructed_length([0.2, 3.5, 4.5], [10.2, 3.5, 4.5], &map), 0.0);
    }

    #[test]
    fn box_clipped_stepping_matches_full_stepping() {
        let cfg = SceneConfig { width: 32, height: 32, seed: 3, ..SceneConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let buildings = place_buildings(&cfg, &mut rng);
        let mut heights = vec![0.0; 32 * 32];
        for b in &buildings {
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    heights[y * 32 + x] = b.height;
                }
            }
        }
        let map = BuildingHeightMap::new(32, 32, heights).unwrap();
        for _ in 0..500 {
            let a = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.5..8.0)];
            let b = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.5..8.0)];
            assert_eq!(blocked_via_boxes(a, b, &buildings, &map), obstructed_length(a, b, &map));
        }
    }

    #[test]
    fn interior_voxels_take_max_attenuation() {
        let cfg = SceneConfig { seed: 11, ..SceneConfig::default() };
        let s = generate_scene::<f32>(&cfg).unwrap();
        let (n, h, w) = s.volume.dims();
        let mut interior = 0;
        let mut saturated = 0;
        for z in 0..n {
            let alt = s.volume.altitudes()[z] as f32;
            for y in 0..h {
                for x in 0..w {
                    let inside = s.buildings.at(y, x) > alt;
                    let v = s.volume.get(z, y, x);
                    if inside {
                        interior += 1;
                        assert_eq!(v, 0.0);
                    } else if v == 0.0 {
                        saturated += 1;
                    }
                }
            }
        }
        // exterior voxels only reach 0 when their path loss saturates the upper bound
        assert!((saturated as f64) < 0.005 * (n * h * w) as f64, "{saturated}");
        assert!(interior > 0);
    }

    #[test]
    fn voxel_inside_tall_building() {
        let cfg = SceneConfig {
            width: 16,
            height: 16,
            layers: 12,
            num_buildings: (1, 1),
            building_side: (3, 3),
            building_height_m: (10.0, 10.0),
            tx_position: Some([0.5, 0.5, 11.0]),
            ..SceneConfig::default()
        };
        let s = generate_scene::<f64>(&cfg).unwrap();
        let cell = (0..256).find(|&i| s.buildings.heights()[i] == 10.0).unwrap();
        // layer 2 is at 3 m
        assert_eq!(s.volume.altitudes()[2], 3.0);
        assert_eq!(s.volume.layer(2)[cell], 0.0);
        assert!(s.volume.layer(10)[cell] > 0.0);
    }

    #[test]
    fn deterministic_and_top_layer_clearer_than_ground() {
        let cfg = SceneConfig { seed: 5, ..SceneConfig::default() };
        let a = generate_scene::<f32>(&cfg).unwrap();
        let b = generate_scene::<f32>(&cfg).unwrap();
        assert_eq!(crate::volume::save_scene(&a).unwrap(), crate::volume::save_scene(&b).unwrap());
        for seed in 0..5 {
            let s = generate_scene::<f32>(&SceneConfig { seed, ..SceneConfig::default() }).unwrap();
            let mean = |z: usize| s.volume.layer(z).iter().map(|&v| v as f64).sum::<f64>() / 4096.0;
            assert!(mean(7) >= mean(0), "seed {seed}: top {} < ground {}", mean(7), mean(0));
        }
    }

    #[test]
    fn transmitter_stays_outside_buildings() {
        for seed in 0..10 {
            let s = generate_scene::<f32>(&SceneConfig { seed, ..SceneConfig::default() }).unwrap();
            let tx = s.meta.tx_position.unwrap();
            let (cx, cy) = ((tx[0].floor() as usize).min(63), (tx[1].floor() as usize).min(63));
            assert!((s.buildings.at(cy, cx) as f64) < tx[2]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SceneConfig { path_loss_exponent: 0.0, ..SceneConfig::default() }.validate().is_err());
        assert!(SceneConfig { shadow_sigma_db: -1.0, ..SceneConfig::default() }.validate().is_err());
        assert!(SceneConfig { tx_position: Some([70.0, 1.0, 1.0]), ..SceneConfig::default() }.validate().is_err());
        assert!(SceneConfig { building_height_m: (2.0, 20.0), ..SceneConfig::default() }.validate().is_err());
    }

    #[test]
    fn tx_inside_building_is_an_error() {
        let cfg = SceneConfig {
            width: 8,
            height: 8,
            num_buildings: (1, 1),
            building_side: (8, 8),
            building_height_m: (5.0, 5.0),
            tx_position: Some([4.0, 4.0, 2.0]),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene::<f32>(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(10), (7, 1, 2));
        assert_eq!(split_counts(200), (140, 20, 40));
        assert!(generate_dataset(&SceneConfig::default(), 9, 0, Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let template = SceneConfig { width: 16, height: 16, layers: 4, building_side: (2, 5), building_height_m: (1.0, 3.5), ..SceneConfig::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&template, 10, 7, a.path()).unwrap();
        let mb = generate_dataset(&template, 10, 7, b.path()).unwrap();
        assert_eq!((ma.train.len(), ma.val.len(), ma.test.len()), (7, 1, 2));
        let ja = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let jb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(ma.test, mb.test);
        let loaded = Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            for (e, scene) in loaded.entries(split).iter().zip(loaded.load_split(split).unwrap()) {
                let fresh = generate_scene::<f32>(&SceneConfig { seed: e.seed, ..template.clone() }).unwrap();
                assert_eq!(scene, fresh);
            }
        }
        let mut seeds: Vec<u64> = [&ma.train, &ma.val, &ma.test].iter().flat_map(|v| v.iter().map(|e| e.seed)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
    }
}
