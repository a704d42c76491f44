//! Search-window tracking by normalized cross-correlation of feature patches.
//!
//! The exemplar is the feature patch under the object's bounding box in the
//! previous frame. Each step correlates it with a search region around the
//! last window and recentres the window on the response peak.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::sampler::SearchWindow;
use crate::tensor_io::LabelMask;

/// Norms below this count as zero and give a zero response.
const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_SCALE: f64 = 2.0;

/// Correlation scores per exemplar offset inside the region, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ResponseMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Offset `(x, y)` of the maximum; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Smallest size `>= n` with no prime factor above 5.
fn fast_len(n: usize) -> usize {
    (n.max(1)..)
        .find(|&m| {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .expect("a 5-smooth size exists")
}

/// Row and column transforms for one padded grid.
struct Fft2d {
    w: usize,
    h: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    fn new(w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) -> Self {
        let plan = |n, p: &mut FftPlanner<f64>| if inverse { p.plan_fft_inverse(n) } else { p.plan_fft_forward(n) };
        Self { w, h, rows: plan(w, planner), cols: plan(h, planner) }
    }

    fn process(&self, buf: &mut [Complex<f64>]) {
        let (w, h) = (self.w, self.h);
        self.rows.process(buf);
        let mut t = vec![Complex::new(0.0, 0.0); w * h];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        self.cols.process(&mut t);
        for x in 0..w {
            for y in 0..h {
                buf[y * w + x] = t[x * h + y];
            }
        }
    }
}

/// Zero-normalized cross-correlation of `exemplar` against every offset in
/// `region`, across all channels jointly.
///
/// Each channel is centred on its own mean (over the exemplar, and over the
/// covered region patch); the score is the summed product divided by the
/// product of the two centred norms, or 0 when either norm is below 1e-12.
pub fn cross_correlate(exemplar: &FeatureMap, region: &FeatureMap) -> Result<ResponseMap> {
    let (ew, eh, c) = (exemplar.width(), exemplar.height(), exemplar.channels());
    let (rw, rh) = (region.width(), region.height());
    if region.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "exemplar has {c} channels, region has {}",
            region.channels()
        )));
    }
    if ew > rw || eh > rh {
        return Err(Error::ShapeMismatch(format!(
            "exemplar {ew}x{eh} larger than region {rw}x{rh}"
        )));
    }
    let (ow, oh) = (rw - ew + 1, rh - eh + 1);
    let n = (ew * eh) as f64;

    let mut z_norm2 = 0.0;
    let mut centred: Vec<Vec<f64>> = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = exemplar.plane(ch);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let z: Vec<f64> = plane.iter().map(|&v| v as f64 - mean).collect();
        z_norm2 += z.iter().map(|v| v * v).sum::<f64>();
        centred.push(z);
    }
    let z_norm = z_norm2.sqrt();
    if z_norm < NORM_FLOOR {
        return Ok(ResponseMap { width: ow, height: oh, data: vec![0.0; ow * oh] });
    }

    // Pack channel pairs as real and imaginary parts: the real part of the
    // complex correlation is the sum of both channels' real correlations.
    let (pw, ph) = (fast_len(rw), fast_len(rh));
    let mut planner = FftPlanner::new();
    let forward = Fft2d::new(pw, ph, &mut planner, false);
    let inverse = Fft2d::new(pw, ph, &mut planner, true);
    let pairs: Vec<(usize, Option<usize>)> =
        (0..c).step_by(2).map(|a| (a, (a + 1 < c).then_some(a + 1))).collect();
    let parts: Vec<(Vec<Complex<f64>>, Vec<f64>)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut rf = vec![Complex::new(0.0, 0.0); pw * ph];
            let mut zf = vec![Complex::new(0.0, 0.0); pw * ph];
            let mut energy = vec![0.0; ow * oh];
            for (slot, ch) in [(0, Some(a)), (1, b)] {
                let Some(ch) = ch else { continue };
                let plane = region.plane(ch);
                let shift = plane.iter().map(|&v| v as f64).sum::<f64>() / (rw * rh) as f64;
                let put = |c: &mut Complex<f64>, v: f64| if slot == 0 { c.re = v } else { c.im = v };
                for y in 0..rh {
                    for x in 0..rw {
                        put(&mut rf[y * pw + x], plane[y * rw + x] as f64 - shift);
                    }
                }
                let z = &centred[ch];
                for y in 0..eh {
                    for x in 0..ew {
                        put(&mut zf[y * pw + x], z[y * ew + x]);
                    }
                }
                add_patch_energy(plane, shift, rw, rh, ew, eh, &mut energy);
            }
            forward.process(&mut rf);
            forward.process(&mut zf);
            for (r, z) in rf.iter_mut().zip(&zf) {
                *r *= z.conj();
            }
            (rf, energy)
        })
        .collect();
    let mut acc = vec![Complex::new(0.0, 0.0); pw * ph];
    let mut r_norm2 = vec![0.0; ow * oh];
    for (spec, energy) in &parts {
        acc.iter_mut().zip(spec).for_each(|(a, s)| *a += s);
        r_norm2.iter_mut().zip(energy).for_each(|(a, e)| *a += e);
    }
    drop(parts);
    inverse.process(&mut acc);
    let inv = 1.0 / (pw * ph) as f64;

    let mut data = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let r_norm = r_norm2[oy * ow + ox].sqrt();
            if r_norm < NORM_FLOOR {
                continue;
            }
            let num = acc[oy * pw + ox].re * inv;
            data[oy * ow + ox] = (num / (z_norm * r_norm)).clamp(-1.0, 1.0);
        }
    }
    Ok(ResponseMap { width: ow, height: oh, data })
}

/// Adds each offset's centred patch energy `Σv² − (Σv)²/n` of one channel,
/// using summed-area tables of the shifted values.
fn add_patch_energy(plane: &[f32], shift: f64, rw: usize, rh: usize, ew: usize, eh: usize, out: &mut [f64]) {
    let stride = rw + 1;
    let n = (ew * eh) as f64;
    let mut s1 = vec![0.0; stride * (rh + 1)];
    let mut s2 = vec![0.0; stride * (rh + 1)];
    for y in 0..rh {
        let (mut row1, mut row2) = (0.0, 0.0);
        for x in 0..rw {
            let v = plane[y * rw + x] as f64 - shift;
            row1 += v;
            row2 += v * v;
            s1[(y + 1) * stride + x + 1] = s1[y * stride + x + 1] + row1;
            s2[(y + 1) * stride + x + 1] = s2[y * stride + x + 1] + row2;
        }
    }
    let rect = |s: &[f64], x: usize, y: usize| {
        s[(y + eh) * stride + x + ew] - s[y * stride + x + ew] - s[(y + eh) * stride + x] + s[y * stride + x]
    };
    let (ow, oh) = (rw - ew + 1, rh - eh + 1);
    for oy in 0..oh {
        for ox in 0..ow {
            let sum = rect(&s1, ox, oy);
            out[oy * ow + ox] += (rect(&s2, ox, oy) - sum * sum / n).max(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub object_id: u8,
    pub exemplar: FeatureMap,
    /// Where the exemplar was cut from, in its source frame.
    pub exemplar_box: SearchWindow,
    pub window: SearchWindow,
    pub frame_index: usize,
    prev_features: Arc<FeatureMap>,
}

fn bbox_window(bbox: (usize, usize, usize, usize)) -> SearchWindow {
    let (x0, y0, x1, y1) = bbox;
    SearchWindow { x0, y0, w: x1 - x0 + 1, h: y1 - y0 + 1 }
}

/// Window of size `w × h` (capped at the frame) centred near `(cx, cy)` and
/// shifted, not shrunk, to fit inside the frame.
fn shifted_inside(cx: f64, cy: f64, w: usize, h: usize, fw: usize, fh: usize) -> SearchWindow {
    let (w, h) = (w.clamp(1, fw), h.clamp(1, fh));
    let x0 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(fw - w);
    let y0 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(fh - h);
    SearchWindow { x0, y0, w, h }
}

fn scaled(win: &SearchWindow, scale: f64) -> (usize, usize) {
    (
        (win.w as f64 * scale).round().max(1.0) as usize,
        (win.h as f64 * scale).round().max(1.0) as usize,
    )
}

/// Starts tracking `object_id`: the exemplar is the feature patch under the
/// object's bounding box and the window is that box scaled by `scale`.
pub fn init_tracker(features: Arc<FeatureMap>, mask: &LabelMask, object_id: u8, scale: f64) -> Result<TrackerState> {
    if features.width() != mask.width() || features.height() != mask.height() {
        return Err(Error::ShapeMismatch("tracker features and mask differ in extents".into()));
    }
    let bbox = mask.bbox(object_id).ok_or(Error::EmptyObject(object_id))?;
    let exemplar_box = bbox_window(bbox);
    let window = SearchWindow::from_bbox(bbox, scale, mask.width(), mask.height())?;
    Ok(TrackerState {
        object_id,
        exemplar: features.crop(exemplar_box.x0, exemplar_box.y0, exemplar_box.w, exemplar_box.h),
        exemplar_box,
        window,
        frame_index: 0,
        prev_features: features,
    })
}

/// Advances the tracker to a new frame.
///
/// The exemplar is refreshed from the previous prediction's bounding box when
/// that prediction is non-empty. The search region is the last window scaled
/// by `scale`; the new window is centred on the correlation peak and sized
/// from the previous prediction's box (or the last window when it is empty),
/// never smaller than the exemplar.
pub fn track_step(
    state: &TrackerState,
    features: Arc<FeatureMap>,
    prev_mask: &LabelMask,
    scale: f64,
) -> Result<(TrackerState, SearchWindow)> {
    let (fw, fh) = (features.width(), features.height());
    if fw != state.prev_features.width() || fh != state.prev_features.height() {
        return Err(Error::ShapeMismatch("frame extents changed during tracking".into()));
    }
    let prev_bbox = prev_mask.bbox(state.object_id);
    let (exemplar, exemplar_box) = match prev_bbox {
        Some(bbox) => {
            let b = bbox_window(bbox);
            (state.prev_features.crop(b.x0, b.y0, b.w, b.h), b)
        }
        None => (state.exemplar.clone(), state.exemplar_box),
    };

    let (cx, cy) = state.window.center();
    let (sw, sh) = scaled(&state.window, scale);
    let region = shifted_inside(cx, cy, sw.max(exemplar.width()), sh.max(exemplar.height()), fw, fh);
    let patch = features.crop(region.x0, region.y0, region.w, region.h);
    let response = cross_correlate(&exemplar, &patch)?;
    let (ox, oy) = response.argmax();
    let center = (
        (region.x0 + ox) as f64 + exemplar.width() as f64 / 2.0,
        (region.y0 + oy) as f64 + exemplar.height() as f64 / 2.0,
    );

    let (w, h) = match prev_bbox {
        Some(bbox) => scaled(&bbox_window(bbox), scale),
        None => (state.window.w, state.window.h),
    };
    let window = SearchWindow::centered(
        center.0,
        center.1,
        w.max(exemplar.width()),
        h.max(exemplar.height()),
        fw,
        fh,
    )?;

    let next = TrackerState {
        object_id: state.object_id,
        exemplar,
        exemplar_box,
        window,
        frame_index: state.frame_index + 1,
        prev_features: features,
    };
    Ok((next, window))
}
