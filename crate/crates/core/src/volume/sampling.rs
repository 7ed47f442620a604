use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RadioVolume, SampleObservation, SampleSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Draws `k` distinct voxel-centre observations uniformly over the whole grid.
///
/// Collisions are rejected and redrawn; the result is a pure function of
/// `(volume, k, seed)`.
pub fn sample_observations<T: Scalar>(volume: &RadioVolume<T>, k: usize, seed: u64) -> Result<SampleSet> {
    let all: Vec<usize> = (0..volume.layers()).collect();
    sample_observations_in_layers(volume, &all, k, seed)
}

/// As [`sample_observations`], restricted to the listed altitude layers.
pub fn sample_observations_in_layers<T: Scalar>(
    volume: &RadioVolume<T>,
    layers: &[usize],
    k: usize,
    seed: u64,
) -> Result<SampleSet> {
    let (n, h, w) = volume.dims();
    if layers.is_empty() || layers.iter().any(|&z| z >= n) {
        return Err(Error::invalid(format!("sampling layers {layers:?} outside 0..{n}")));
    }
    let total = layers.len() * h * w;
    if k == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if k > total {
        return Err(Error::invalid(format!(
            "cannot draw {k} distinct samples from {total} voxels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(k);
    let mut obs = Vec::with_capacity(k);
    while obs.len() < k {
        let idx = rng.random_range(0..total);
        if !seen.insert(idx) {
            continue;
        }
        let (z, rem) = (layers[idx / (h * w)], idx % (h * w));
        let (y, x) = (rem / w, rem % w);
        obs.push(SampleObservation {
            x: x as f64,
            y: y as f64,
            z: z as f64,
            value: volume.get(z, y, x).f64(),
        });
    }
    SampleSet::new(obs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, h: usize, w: usize) -> RadioVolume<f32> {
        let total = n * h * w;
        let data = (0..total).map(|i| i as f32 / total as f32).collect();
        RadioVolume::new(n, h, w, data, (1..=n).map(|a| a as f64).collect()).unwrap()
    }

    #[test]
    fn exhaustive_sampling_hits_every_voxel_once() {
        let v = ramp(2, 3, 4);
        let s = sample_observations(&v, 24, 9).unwrap();
        let mut idx: Vec<usize> = s
            .observations()
            .iter()
            .map(|o| v.index(o.z as usize, o.y as usize, o.x as usize))
            .collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_for_seed() {
        let v = ramp(2, 8, 8);
        assert_eq!(sample_observations(&v, 10, 3).unwrap(), sample_observations(&v, 10, 3).unwrap());
        assert_ne!(sample_observations(&v, 10, 3).unwrap(), sample_observations(&v, 10, 4).unwrap());
    }

    #[test]
    fn values_match_volume_on_large_grid() {
        let v = ramp(19, 256, 256);
        let s = sample_observations(&v, 50, 11).unwrap();
        assert_eq!(s.len(), 50);
        let distinct: HashSet<_> = s
            .observations()
            .iter()
            .map(|o| (o.x as usize, o.y as usize, o.z as usize))
            .collect();
        assert_eq!(distinct.len(), 50);
        for o in s.observations() {
            assert_eq!(o.value, v.get(o.z as usize, o.y as usize, o.x as usize) as f64);
        }
    }

    #[test]
    fn layer_restricted_sampling() {
        let v = ramp(4, 8, 8);
        let s = sample_observations_in_layers(&v, &[1, 3], 40, 2).unwrap();
        assert!(s.observations().iter().all(|o| o.z == 1.0 || o.z == 3.0));
        assert!(sample_observations_in_layers(&v, &[1], 65, 2).is_err());
        assert!(sample_observations_in_layers(&v, &[4], 1, 2).is_err());
    }

    #[test]
    fn too_many_samples() {
        let v = ramp(1, 2, 2);
        assert!(sample_observations(&v, 5, 0).is_err());
    }
}
