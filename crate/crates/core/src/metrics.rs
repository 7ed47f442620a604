//! Reconstruction metrics on `[0, 1]`-normalised maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::RadioVolume;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check(pred: usize, target: usize) -> Result<()> {
    if pred != target || pred == 0 {
        return Err(Error::invalid(format!("metric inputs of length {pred} and {target}")));
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    check(pred.len(), target.len())?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn rmse<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// `20 log10(1 / rmse)` for unit dynamic range; `+inf` for a perfect match.
pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        -20.0 * rmse.log10()
    }
}

pub fn psnr<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(pred, target)?))
}

/// Mean SSIM of one `h x w` map over every `8 x 8` uniform window (stride 1).
/// Maps smaller than the window use a single window covering the whole map.
pub fn ssim<T: Scalar>(pred: &[T], target: &[T], height: usize, width: usize) -> Result<f64> {
    check(pred.len(), target.len())?;
    if pred.len() != height * width {
        return Err(Error::invalid(format!("{} values for a {height}x{width} map", pred.len())));
    }
    let (wh, ww) = (SSIM_WINDOW.min(height), SSIM_WINDOW.min(width));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - wh {
        for x0 in 0..=width - ww {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let a = pred[y * width + x].f64();
                    let b = target[y * width + x].f64();
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Metrics of one altitude layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn layer_metrics<T: Scalar>(pred: &RadioVolume<T>, target: &RadioVolume<T>) -> Result<Vec<LayerMetrics>> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!("volumes {:?} and {:?} differ", pred.dims(), target.dims())));
    }
    (0..pred.layers())
        .map(|z| {
            let (a, b) = (pred.layer(z), target.layer(z));
            let m = mse(a, b)?;
            Ok(LayerMetrics {
                mse: m,
                rmse: m.sqrt(),
                psnr: psnr_from_rmse(m.sqrt()),
                ssim: ssim(a, b, pred.height(), pred.width())?,
            })
        })
        .collect()
}
