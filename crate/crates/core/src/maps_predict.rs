use rayon::prelude::*;

use crate::features::FeatureMap;
use crate::maps::ConfidenceMap;
use crate::sampler::SearchWindow;

/// Evaluates a per-pixel class-probability function over `features`,
/// restricted to `window` when given (zero elsewhere), and returns one map
/// per class.
pub(crate) fn per_pixel_maps<F>(
    features: &FeatureMap,
    window: Option<&SearchWindow>,
    n_classes: usize,
    predict: F,
) -> Vec<ConfidenceMap>
where
    F: Fn(&[f32], &mut [f64]) + Sync,
{
    let (w, h, c) = (features.width(), features.height(), features.channels());
    let region = window.copied().unwrap_or(SearchWindow::full(w, h));
    let mut interleaved = vec![0f64; region.area() * n_classes];
    interleaved
        .par_chunks_mut(region.w * n_classes)
        .enumerate()
        .for_each_init(
            || vec![0f32; c],
            |x_buf, (ry, row)| {
                let y = region.y0 + ry;
                for (rx, out) in row.chunks_exact_mut(n_classes).enumerate() {
                    features.pixel_into(region.x0 + rx, y, x_buf);
                    predict(x_buf, out);
                }
            },
        );
    (0..n_classes)
        .map(|k| {
            let mut data = vec![0f64; w * h];
            for ry in 0..region.h {
                for rx in 0..region.w {
                    data[(region.y0 + ry) * w + region.x0 + rx] =
                        interleaved[(ry * region.w + rx) * n_classes + k];
                }
            }
            ConfidenceMap::new(w, h, data).unwrap()
        })
        .collect()
}
