//! Image-guided filtering of confidence maps and the final threshold.
//!
//! Within each window ω_k the output is modelled as `a_k·I + b_k` where `I`
//! is the grayscale guidance. Minimizing
//! `Σ_{i∈ω_k} (a_k·I_i + b_k − P_i)² + |ω_k|·ε·a_k²` gives
//! `a_k = cov_k(I, P) / (var_k(I) + ε)` and `b_k = mean_k(P) − a_k·mean_k(I)`.
//! The coefficients are then averaged over every window covering a pixel.
//! Windows at the border are clipped and use means over their valid pixels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maps::ConfidenceMap;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidedFilterParams {
    pub radius: usize,
    pub eps: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self { radius: 8, eps: 1e-3 }
    }
}

/// Summed-area table with a zero top row and left column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(data: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += data[y * w + x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Sum over `[x0, x1) × [y0, y1)`.
    #[inline]
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0] + self.sums[y0 * s + x0]
    }
}

fn box_mean(data: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let integral = Integral::new(data, w, h);
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for (x, o) in row.iter_mut().enumerate() {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            *o = integral.rect(x0, y0, x1, y1) / ((x1 - x0) * (y1 - y0)) as f64;
        }
    });
    out
}

/// Mean over the `(2r+1)²` window centred at each pixel, clipped to the map.
pub fn box_filter(map: &ConfidenceMap, r: usize) -> Result<ConfidenceMap> {
    if r == 0 {
        return Err(Error::InvalidInput("box filter radius must be at least 1".into()));
    }
    let data = box_mean(map.data(), map.width(), map.height(), r);
    ConfidenceMap::new(map.width(), map.height(), data)
}

fn check(guidance: &ConfidenceMap, conf: &ConfidenceMap, params: &GuidedFilterParams) -> Result<()> {
    if !guidance.same_extents(conf) {
        return Err(Error::ShapeMismatch(format!(
            "guidance {}x{} vs confidence {}x{}",
            guidance.width(),
            guidance.height(),
            conf.width(),
            conf.height()
        )));
    }
    if params.radius == 0 || params.eps < 0.0 || !params.eps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "guided filter needs radius >= 1 and eps >= 0, got {params:?}"
        )));
    }
    Ok(())
}

/// Guided filter output before clamping to [0, 1].
pub fn guided_filter_raw(
    guidance: &ConfidenceMap,
    conf: &ConfidenceMap,
    params: &GuidedFilterParams,
) -> Result<ConfidenceMap> {
    check(guidance, conf, params)?;
    let (w, h, r) = (guidance.width(), guidance.height(), params.radius);
    let i = guidance.data();
    let p = conf.data();
    let ii: Vec<f64> = i.iter().map(|v| v * v).collect();
    let ip: Vec<f64> = i.iter().zip(p).map(|(a, b)| a * b).collect();

    let mean_i = box_mean(i, w, h, r);
    let mean_p = box_mean(p, w, h, r);
    let corr_ii = box_mean(&ii, w, h, r);
    let corr_ip = box_mean(&ip, w, h, r);

    let mut a = vec![0.0; w * h];
    let mut b = vec![0.0; w * h];
    for k in 0..w * h {
        let var = (corr_ii[k] - mean_i[k] * mean_i[k]).max(0.0);
        let cov = corr_ip[k] - mean_i[k] * mean_p[k];
        let denom = var + params.eps;
        a[k] = if denom > 0.0 { cov / denom } else { 0.0 };
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean(&a, w, h, r);
    let mean_b = box_mean(&b, w, h, r);
    let q = (0..w * h).map(|k| mean_a[k] * i[k] + mean_b[k]).collect();
    ConfidenceMap::new(w, h, q)
}

/// Edge-preserving refinement of `conf` guided by `guidance`, clamped to [0, 1].
pub fn guided_filter(
    guidance: &ConfidenceMap,
    conf: &ConfidenceMap,
    params: &GuidedFilterParams,
) -> Result<ConfidenceMap> {
    let mut q = guided_filter_raw(guidance, conf, params)?;
    q.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(q)
}

/// 1 where `conf >= threshold`, else 0.
pub fn threshold_mask(conf: &ConfidenceMap, threshold: f64) -> Vec<u8> {
    conf.data().iter().map(|&v| u8::from(v >= threshold)).collect()
}
