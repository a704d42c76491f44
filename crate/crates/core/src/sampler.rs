//! First-frame training set construction.
//!
//! Every pixel inside the search window is kept with its mask label. Outside
//! the window only the pixels on a `stride × stride` grid are kept, labelled by
//! the mask, which supplies distant (mostly background) examples.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::tensor_io::LabelMask;

/// Default grid stride for pixels outside the window.
pub const DEFAULT_STRIDE: usize = 10;

/// Axis-aligned pixel rectangle, always clipped to its frame and non-empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SearchWindow {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl SearchWindow {
    /// Intersects `[x0, x0 + w) × [y0, y0 + h)` (signed origin) with the frame.
    pub fn clipped(x0: i64, y0: i64, w: i64, h: i64, frame_w: usize, frame_h: usize) -> Result<Self> {
        let xa = x0.max(0);
        let ya = y0.max(0);
        let xb = (x0 + w).min(frame_w as i64);
        let yb = (y0 + h).min(frame_h as i64);
        if xb <= xa || yb <= ya {
            return Err(Error::EmptyWindow);
        }
        Ok(Self { x0: xa as usize, y0: ya as usize, w: (xb - xa) as usize, h: (yb - ya) as usize })
    }

    pub fn full(frame_w: usize, frame_h: usize) -> Self {
        Self { x0: 0, y0: 0, w: frame_w, h: frame_h }
    }

    /// Window of extents `w × h` centred at `(cx, cy)`, clipped.
    pub fn centered(cx: f64, cy: f64, w: usize, h: usize, frame_w: usize, frame_h: usize) -> Result<Self> {
        let x0 = (cx - w as f64 / 2.0).round() as i64;
        let y0 = (cy - h as f64 / 2.0).round() as i64;
        Self::clipped(x0, y0, w as i64, h as i64, frame_w, frame_h)
    }

    /// Inclusive bounding box scaled by `scale` about its centre, clipped.
    pub fn from_bbox(
        bbox: (usize, usize, usize, usize),
        scale: f64,
        frame_w: usize,
        frame_h: usize,
    ) -> Result<Self> {
        let (x0, y0, x1, y1) = bbox;
        let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        let (cx, cy) = (x0 as f64 + bw / 2.0, y0 as f64 + bh / 2.0);
        let w = (bw * scale).round().max(1.0) as usize;
        let h = (bh * scale).round().max(1.0) as usize;
        Self::centered(cx, cy, w, h, frame_w, frame_h)
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x0 as f64 + self.w as f64 / 2.0, self.y0 as f64 + self.h as f64 / 2.0)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// N labelled feature rows, row-major `N × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelDataset {
    features: Vec<f32>,
    n_features: usize,
    labels: Vec<u8>,
    positions: Vec<(usize, usize)>,
}

impl PixelDataset {
    pub fn new(features: Vec<f32>, n_features: usize, labels: Vec<u8>, positions: Vec<(usize, usize)>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if n_features == 0 || features.len() != labels.len() * n_features || positions.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels, {} positions and {} feature values with {n_features} features per row",
                labels.len(),
                positions.len(),
                features.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("training features".into()));
        }
        Ok(Self { features, n_features, labels, positions })
    }

    /// Dataset without pixel positions, for synthetic tabular data.
    pub fn from_rows(features: Vec<f32>, n_features: usize, labels: Vec<u8>) -> Result<Self> {
        let positions = (0..labels.len()).map(|i| (i, 0)).collect();
        Self::new(features, n_features, labels, positions)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Largest label + 1.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// True when every row carries the same label; downstream models degenerate.
    pub fn is_single_class(&self) -> bool {
        self.labels.iter().all(|&l| l == self.labels[0])
    }

    /// Copy with labels replaced by `map(label)`.
    pub fn relabel(&self, map: impl Fn(u8) -> u8) -> PixelDataset {
        PixelDataset {
            features: self.features.clone(),
            n_features: self.n_features,
            labels: self.labels.iter().map(|&l| map(l)).collect(),
            positions: self.positions.clone(),
        }
    }
}

/// Collects window pixels (row-major) followed by the strided outside grid
/// (row-major), each with its mask label.
pub fn build_training_set(
    features: &FeatureMap,
    mask: &LabelMask,
    window: &SearchWindow,
    stride: usize,
) -> Result<PixelDataset> {
    let (w, h) = (features.width(), features.height());
    if mask.width() != w || mask.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "features are {w}x{h}, mask is {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let window = SearchWindow::clipped(
        window.x0 as i64,
        window.y0 as i64,
        window.w as i64,
        window.h as i64,
        w,
        h,
    )?;

    let mut positions = Vec::with_capacity(window.area() + (w / stride + 1) * (h / stride + 1));
    for y in window.y0..window.y0 + window.h {
        for x in window.x0..window.x0 + window.w {
            positions.push((x, y));
        }
    }
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if !window.contains(x, y) {
                positions.push((x, y));
            }
        }
    }

    let c = features.channels();
    let mut rows = vec![0f32; positions.len() * c];
    for (row, &(x, y)) in rows.chunks_exact_mut(c).zip(&positions) {
        features.pixel_into(x, y, row);
    }
    let labels = positions.iter().map(|&(x, y)| mask.get(x, y)).collect();
    PixelDataset::new(rows, c, labels, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn blank(w: usize, h: usize) -> (FeatureMap, LabelMask) {
        let f = FeatureMap::new(2, h, w, (0..2 * w * h).map(|v| v as f32).collect()).unwrap();
        (f, LabelMask::zeros(w, h))
    }

    #[test]
    fn window_plus_grid_count() {
        let (f, m) = blank(100, 100);
        let win = SearchWindow { x0: 0, y0: 0, w: 40, h: 40 };
        let ds = build_training_set(&f, &m, &win, 10).unwrap();
        // brute force: grid points outside the window
        let outside = (0..100)
            .step_by(10)
            .flat_map(|y| (0..100).step_by(10).map(move |x| (x, y)))
            .filter(|&(x, y)| !(x < 40 && y < 40))
            .count();
        assert_eq!(outside, 84);
        assert_eq!(ds.len(), 1600 + 84);
        assert_eq!(ds.positions()[0], (0, 0));
        assert_eq!(ds.positions()[1600], (40, 0));
        assert_eq!(ds.row(1), &[1.0, 10001.0]);
    }

    #[test]
    fn full_window_has_no_grid() {
        let (f, m) = blank(17, 9);
        let ds = build_training_set(&f, &m, &SearchWindow::full(17, 9), 10).unwrap();
        assert_eq!(ds.len(), 17 * 9);
    }

    #[test]
    fn outside_window_keeps_true_labels() {
        let (f, _) = blank(30, 30);
        let m = LabelMask::from_fn(30, 30, |x, _| u8::from(x >= 20));
        let ds = build_training_set(&f, &m, &SearchWindow { x0: 0, y0: 0, w: 10, h: 10 }, 10).unwrap();
        let i = ds.positions().iter().position(|&p| p == (20, 0)).unwrap();
        assert_eq!(ds.labels()[i], 1);
        assert!(!ds.is_single_class());
        let bg = build_training_set(&f, &LabelMask::zeros(30, 30), &SearchWindow::full(30, 30), 3).unwrap();
        assert!(bg.is_single_class());
    }

    #[test]
    fn empty_window_rejected() {
        let (f, m) = blank(10, 10);
        let win = SearchWindow { x0: 10, y0: 0, w: 5, h: 5 };
        assert!(matches!(build_training_set(&f, &m, &win, 2), Err(Error::EmptyWindow)));
        assert!(SearchWindow::clipped(-5, -5, 5, 5, 10, 10).is_err());
    }

    #[test]
    fn bbox_window_arithmetic() {
        let win = SearchWindow::from_bbox((44, 44, 84, 84), 2.0, 128, 128).unwrap();
        assert_eq!((win.w, win.h), (82, 82));
        let (cx, cy) = win.center();
        assert!((cx - 64.5).abs() <= 0.5 && (cy - 64.5).abs() <= 0.5);
    }

    proptest! {
        #[test]
        fn positions_unique_and_monotone(
            w in 5usize..40, h in 5usize..40,
            x0 in 0usize..20, y0 in 0usize..20, ww in 1usize..30, wh in 1usize..30,
            stride in 1usize..7,
        ) {
            prop_assume!(x0 < w && y0 < h);
            let (f, m) = blank(w, h);
            let win = SearchWindow { x0, y0, w: ww, h: wh };
            let ds = build_training_set(&f, &m, &win, stride).unwrap();
            let set: HashSet<_> = ds.positions().iter().collect();
            prop_assert_eq!(set.len(), ds.len());

            let clipped = SearchWindow::clipped(x0 as i64, y0 as i64, ww as i64, wh as i64, w, h).unwrap();
            let inside = ds.positions().iter().filter(|&&(x, y)| clipped.contains(x, y)).count();
            prop_assert_eq!(inside, clipped.area());
            if ww > 1 {
                let smaller = SearchWindow { w: ww - 1, ..win };
                let ds2 = build_training_set(&f, &m, &smaller, stride).unwrap();
                let c2 = SearchWindow::clipped(x0 as i64, y0 as i64, ww as i64 - 1, wh as i64, w, h).unwrap();
                let inside2 = ds2.positions().iter().filter(|&&(x, y)| c2.contains(x, y)).count();
                prop_assert!(inside2 <= inside);
            }
        }
    }
}
