//! Evaluation metrics: PSNR, SSIM and the object/layout IoU scores.

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::scalar::Real;

pub use crate::losses::ssim;

/// Default binarization threshold for the opacity map.
pub const DEFAULT_THETA: f64 = 0.5;

/// `-10 log10(MSE)`; `f64::INFINITY` for identical images.
pub fn psnr<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<f64> {
    pred.same_shape(gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / pred.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

fn check<T: Real>(opacity: &ImageBuffer<T>, layout: &[bool]) -> Result<()> {
    if opacity.channels != 1 || layout.len() != opacity.num_pixels() {
        return Err(Error::ResolutionMismatch(opacity.width, opacity.height, layout.len(), opacity.channels));
    }
    Ok(())
}

/// Thresholded GIoU/LIoU. With `G = !layout` and `B = [O >= theta]`:
/// `GIoU = |G & B| / |G | B|`, `LIoU = |L & !B| / |L | !B|`. An empty union
/// scores 1 (both sets empty).
pub fn giou_liou<T: Real>(opacity: &ImageBuffer<T>, layout: &[bool], theta: f64) -> Result<(f64, f64)> {
    check(opacity, layout)?;
    let (mut gi, mut gu, mut li, mut lu) = (0usize, 0usize, 0usize, 0usize);
    for (o, &l) in opacity.data.iter().zip(layout) {
        let b = o.as_f64() >= theta;
        let g = !l;
        gi += (g && b) as usize;
        gu += (g || b) as usize;
        li += (l && !b) as usize;
        lu += (l || !b) as usize;
    }
    Ok((ratio(gi as f64, gu as f64), ratio(li as f64, lu as f64)))
}

/// Soft GIoU/LIoU: `sum min / sum max` of the continuous opacity (or its
/// complement) against the binary region.
pub fn giou_liou_soft<T: Real>(opacity: &ImageBuffer<T>, layout: &[bool]) -> Result<(f64, f64)> {
    check(opacity, layout)?;
    let (mut gi, mut gu, mut li, mut lu) = (0.0, 0.0, 0.0, 0.0);
    for (o, &l) in opacity.data.iter().zip(layout) {
        let o = o.as_f64();
        let g = if l { 0.0 } else { 1.0 };
        gi += o.min(g);
        gu += o.max(g);
        li += (1.0 - o).min(1.0 - g);
        lu += (1.0 - o).max(1.0 - g);
    }
    Ok((ratio(gi, gu), ratio(li, lu)))
}
