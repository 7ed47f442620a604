use super::RadioVolume;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense pseudo-label volume from supervised slices by piecewise linear
/// interpolation along altitude.
///
/// Targets below the first supervised altitude copy the first slice, targets
/// above the last copy the last slice. Targets that coincide with a
/// supervised altitude reproduce that slice exactly.
pub fn build_pseudo_volume<T: Scalar>(
    supervised_slices: &[&[T]],
    supervised_altitudes: &[f64],
    target_altitudes: &[f64],
    height: usize,
    width: usize,
) -> Result<RadioVolume<T>> {
    let ns = supervised_slices.len();
    if ns == 0 {
        return Err(Error::invalid("no supervised slices"));
    }
    if supervised_altitudes.len() != ns {
        return Err(Error::invalid(format!(
            "{} altitudes for {ns} supervised slices",
            supervised_altitudes.len()
        )));
    }
    if supervised_altitudes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("supervised altitudes must be strictly increasing"));
    }
    let plane = height * width;
    if let Some(s) = supervised_slices.iter().find(|s| s.len() != plane) {
        return Err(Error::invalid(format!(
            "supervised slice has {} values, expected {plane}",
            s.len()
        )));
    }

    let mut data = Vec::with_capacity(target_altitudes.len() * plane);
    for &z in target_altitudes {
        if z <= supervised_altitudes[0] {
            data.extend_from_slice(supervised_slices[0]);
            continue;
        }
        if z >= supervised_altitudes[ns - 1] {
            data.extend_from_slice(supervised_slices[ns - 1]);
            continue;
        }
        // z_k <= z < z_{k+1}
        let k = supervised_altitudes.partition_point(|&a| a <= z) - 1;
        let (lo, hi) = (supervised_altitudes[k], supervised_altitudes[k + 1]);
        let w = T::of((z - lo) / (hi - lo));
        let (a, b) = (supervised_slices[k], supervised_slices[k + 1]);
        data.extend(
            a.iter()
                .zip(b)
                .map(|(&ra, &rb)| (ra + w * (rb - ra)).max(T::zero()).min(T::one())),
        );
    }
    RadioVolume::new(
        target_altitudes.len(),
        height,
        width,
        data,
        target_altitudes.to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_at_supervised_and_midpoint_is_mean() {
        let a = [0.2f64, 0.4, 0.6, 0.8];
        let b = [0.6f64, 0.0, 1.0, 0.8];
        let v = build_pseudo_volume(&[&a, &b], &[1.0, 3.0], &[1.0, 2.0, 3.0], 2, 2).unwrap();
        assert_eq!(v.layer(0), &a);
        assert_eq!(v.layer(2), &b);
        for i in 0..4 {
            assert!((v.layer(1)[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn clamps_outside_supervised_range() {
        let a = [0.1f32; 4];
        let b = [0.9f32; 4];
        let v = build_pseudo_volume(&[&a, &b], &[3.0, 5.0], &[1.0, 2.0, 3.0, 6.0, 7.0], 2, 2).unwrap();
        assert_eq!(v.layer(0), &a);
        assert_eq!(v.layer(1), &a);
        assert_eq!(v.layer(3), &b);
        assert_eq!(v.layer(4), &b);
    }

    #[test]
    fn one_third_weights() {
        // supervised layers at 1, 10, 19 m; query 4 m lies a third of the way from 1 to 10
        let a = [0.9f64];
        let b = [0.3f64];
        let c = [0.0f64];
        let v = build_pseudo_volume(&[&a, &b, &c], &[1.0, 10.0, 19.0], &[4.0], 1, 1).unwrap();
        let want = 2.0 / 3.0 * 0.9 + 1.0 / 3.0 * 0.3;
        assert!((v.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = [0.0f64];
        assert!(build_pseudo_volume::<f64>(&[], &[], &[1.0], 1, 1).is_err());
        assert!(build_pseudo_volume(&[&a, &a], &[2.0, 1.0], &[1.0], 1, 1).is_err());
        assert!(build_pseudo_volume(&[&a, &a], &[1.0, 1.0], &[1.0], 1, 1).is_err());
    }
}
