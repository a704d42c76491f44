//! Per-pixel generic features.
//!
//! Two sources are supported: a deterministic 11-channel handcrafted
//! extractor that needs no pretrained network, and externally exported deep
//! features stored as `[C, h, w]` tensors, upsampled to frame resolution.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maps::ConfidenceMap;
use crate::tensor_io::{read_tensor, ImageFrame, Tensor};

/// Channel count of [`handcrafted_features`].
pub const HANDCRAFTED_CHANNELS: usize = 11;

const BLUR_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];

/// C×H×W planar feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map extents must be positive, got [{channels}, {height}, {width}]"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map [{channels}, {height}, {width}] needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (dims, data) = tensor.into_parts();
        if dims.len() != 3 {
            return Err(Error::InvalidTensor(format!(
                "feature tensor must have dims [C, H, W], got {dims:?}"
            )));
        }
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("feature map extents are consistent")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copies the feature vector of pixel (x, y) into `out`.
    #[inline]
    pub fn pixel_into(&self, x: usize, y: usize, out: &mut [f32]) {
        let n = self.height * self.width;
        let i = y * self.width + x;
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * n + i];
        }
    }

    /// Sub-window `[x0, x0 + w) × [y0, y0 + h)`; must lie inside the map.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> FeatureMap {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside feature map");
        let mut data = Vec::with_capacity(self.channels * w * h);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        FeatureMap { channels: self.channels, height: h, width: w, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// BT.601 luma of a frame, scaled to [0, 1].
pub fn grayscale(frame: &ImageFrame) -> ConfidenceMap {
    let data = frame
        .data()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    ConfidenceMap::new(frame.width(), frame.height(), data).unwrap()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with replicated borders and radius ⌈3σ⌉.
pub fn gaussian_blur(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[clamp(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius, height) * width + x])
                .sum();
        }
    }
    out
}

/// The 11-channel fallback descriptor: R, G, B, gray, |∂x gray|, |∂y gray|,
/// gray blurred at σ = 1, 2, 4, then x/(W−1) and y/(H−1).
///
/// Gradients are `|g[x+1] − g[x−1]|` with replicated borders, which already
/// lies in [0, 1] for gray in [0, 1].
pub fn handcrafted_features(frame: &ImageFrame) -> FeatureMap {
    let (w, h) = (frame.width(), frame.height());
    let n = w * h;
    let gray = grayscale(frame);
    let g = gray.data();

    let mut data = Vec::with_capacity(HANDCRAFTED_CHANNELS * n);
    for c in 0..3 {
        data.extend(frame.data().chunks_exact(3).map(|p| p[c] as f32 / 255.0));
    }
    data.extend(g.iter().map(|&v| v as f32));

    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            dx.push((g[y * w + xr] - g[y * w + xl]).abs() as f32);
            dy.push((g[yd * w + x] - g[yu * w + x]).abs() as f32);
        }
    }
    data.extend(dx);
    data.extend(dy);

    for sigma in BLUR_SIGMAS {
        data.extend(gaussian_blur(g, w, h, sigma).into_iter().map(|v| v as f32));
    }

    let sx = if w > 1 { 1.0 / (w - 1) as f32 } else { 0.0 };
    let sy = if h > 1 { 1.0 / (h - 1) as f32 } else { 0.0 };
    for _ in 0..h {
        data.extend((0..w).map(|x| x as f32 * sx));
    }
    for y in 0..h {
        data.extend(std::iter::repeat_n(y as f32 * sy, w));
    }

    FeatureMap { channels: HANDCRAFTED_CHANNELS, height: h, width: w, data }
}

/// Source sample position under the half-pixel convention, as
/// `(lower index, upper index, weight of upper)`.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `target_h × target_w`.
pub fn bilinear_upsample(map: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput(format!(
            "target extents must be positive, got {target_h}x{target_w}"
        )));
    }
    if target_h == map.height && target_w == map.width {
        return Ok(map.clone());
    }
    let xs = sample_positions(map.width, target_w);
    let ys = sample_positions(map.height, target_h);
    let mut data = vec![0f32; map.channels * target_h * target_w];
    data.par_chunks_mut(target_h * target_w)
        .enumerate()
        .for_each(|(c, out)| {
            let plane = map.plane(c);
            let at = |x: usize, y: usize| plane[y * map.width + x] as f64;
            for (ty, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (tx, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                    let bottom = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                    out[ty * target_w + tx] = (top * (1.0 - wy) + bottom * wy) as f32;
                }
            }
        });
    Ok(FeatureMap { channels: map.channels, height: target_h, width: target_w, data })
}

/// Stacks maps along the channel axis, preserving order.
pub fn concat_features(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
    if let Some(m) = maps.iter().find(|m| m.height != first.height || m.width != first.width) {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {}x{} with {}x{}",
            first.height, first.width, m.height, m.width
        )));
    }
    let channels = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(channels * first.height * first.width);
    for m in maps {
        data.extend_from_slice(&m.data);
    }
    Ok(FeatureMap { channels, height: first.height, width: first.width, data })
}

/// Loads a `[C, h, w]` tensor and resizes it to the frame when needed.
pub fn load_external_features(path: impl AsRef<Path>, frame_h: usize, frame_w: usize) -> Result<FeatureMap> {
    let path = path.as_ref();
    let tensor = read_tensor(path)?;
    if tensor.dims().len() != 3 {
        return Err(Error::InvalidTensor(format!(
            "{}: expected dims [C, H, W], got {:?}",
            path.display(),
            tensor.dims()
        )));
    }
    if !tensor.is_finite() {
        return Err(Error::NonFinite(format!("{} contains NaN or infinity", path.display())));
    }
    let map = FeatureMap::from_tensor(tensor)?;
    bilinear_upsample(&map, frame_h, frame_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(h: usize, w: usize, values: Vec<f32>) -> FeatureMap {
        FeatureMap::new(1, h, w, values).unwrap()
    }

    #[test]
    fn constant_frame_channels() {
        let frame = ImageFrame::from_fn(9, 6, |_, _| [100, 100, 100]);
        let f = handcrafted_features(&frame);
        assert_eq!(f.channels(), HANDCRAFTED_CHANNELS);
        let gray = 100.0 / 255.0;
        assert!(f.plane(4).iter().chain(f.plane(5)).all(|&v| v == 0.0));
        for c in 6..9 {
            assert!(f.plane(c).iter().all(|&v| (v as f64 - gray).abs() < 1e-6));
        }
    }

    #[test]
    fn single_pixel_coordinates_are_zero() {
        let f = handcrafted_features(&ImageFrame::from_fn(1, 1, |_, _| [10, 20, 30]));
        assert_eq!(f.plane(9), &[0.0]);
        assert_eq!(f.plane(10), &[0.0]);
        assert!((f.plane(0)[0] - 10.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn step_edge_gradient_support() {
        let k = 5;
        let frame = ImageFrame::from_fn(12, 4, |x, _| if x < k { [0, 0, 0] } else { [255, 255, 255] });
        let f = handcrafted_features(&frame);
        for y in 0..4 {
            for x in 0..12 {
                let v = f.get(4, y, x);
                if x == k - 1 || x == k {
                    assert!((v - 1.0).abs() < 1e-6, "x={x} v={v}");
                } else {
                    assert_eq!(v, 0.0, "x={x}");
                }
                assert_eq!(f.get(5, y, x), 0.0);
            }
        }
    }

    #[test]
    fn coordinates_normalized() {
        let f = handcrafted_features(&ImageFrame::from_fn(5, 3, |_, _| [0, 0, 0]));
        assert_eq!(f.get(9, 0, 4), 1.0);
        assert_eq!(f.get(9, 2, 2), 0.5);
        assert_eq!(f.get(10, 2, 0), 1.0);
        assert_eq!(f.get(10, 1, 3), 0.5);
    }

    #[test]
    fn handcrafted_is_deterministic() {
        let frame = ImageFrame::from_fn(20, 13, |x, y| [((x * 13) ^ (y * 7)) as u8, (x * y) as u8, 9]);
        let a = handcrafted_features(&frame);
        let b = handcrafted_features(&frame);
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upsample_half_pixel_row() {
        let m = single(1, 2, vec![0.0, 1.0]);
        let up = bilinear_upsample(&m, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let m = FeatureMap::new(2, 3, 2, (0..12).map(|v| v as f32 / 7.0).collect()).unwrap();
        assert_eq!(bilinear_upsample(&m, 3, 2).unwrap(), m);
        let one = single(1, 1, vec![0.3]);
        let up = bilinear_upsample(&one, 5, 7).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert!(bilinear_upsample(&one, 0, 3).is_err());
    }

    #[test]
    fn concat_channel_counts() {
        let a = FeatureMap::new(11, 2, 2, vec![0.0; 44]).unwrap();
        let b = FeatureMap::new(208, 2, 2, vec![1.0; 832]).unwrap();
        let c = concat_features(&[a.clone(), b]).unwrap();
        assert_eq!(c.channels(), 219);
        assert_eq!(c.plane(10), a.plane(10));
        assert_eq!(c.plane(11), &[1.0; 4]);
        assert_eq!(concat_features(std::slice::from_ref(&a)).unwrap(), a);
        let tall = FeatureMap::new(1, 3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(concat_features(&[a, tall]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn external_features_upsampled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sdft");
        let t = Tensor::new(vec![219, 64, 64], (0..219 * 64 * 64).map(|i| (i % 97) as f32 / 97.0).collect())
            .unwrap();
        crate::tensor_io::write_tensor(&t, &path).unwrap();
        let f = load_external_features(&path, 256, 256).unwrap();
        assert_eq!((f.channels(), f.height(), f.width()), (219, 256, 256));

        let same = load_external_features(&path, 64, 64).unwrap();
        assert_eq!(same.data(), t.data());
    }

    #[test]
    fn external_features_reject_nan_and_rank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.sdft");
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        crate::tensor_io::write_tensor(&t, &path).unwrap();
        assert!(matches!(load_external_features(&path, 1, 2), Err(Error::NonFinite(_))));

        let flat = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        crate::tensor_io::write_tensor(&flat, &path).unwrap();
        assert!(matches!(load_external_features(&path, 1, 2), Err(Error::InvalidTensor(_))));
    }

    proptest! {
        #[test]
        fn upsample_stays_within_range(
            h in 1usize..6, w in 1usize..6, th in 1usize..12, tw in 1usize..12,
            values in prop::collection::vec(-5.0f32..5.0, 36),
        ) {
            let m = single(h, w, values[..h * w].to_vec());
            let up = bilinear_upsample(&m, th, tw).unwrap();
            let lo = m.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = m.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(up.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn upsample_preserves_constants(h in 1usize..6, w in 1usize..6, th in 1usize..12, tw in 1usize..12, c in -3.0f32..3.0) {
            let up = bilinear_upsample(&single(h, w, vec![c; h * w]), th, tw).unwrap();
            prop_assert!(up.data().iter().all(|&v| v == c));
        }
    }
}
