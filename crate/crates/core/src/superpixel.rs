//! SLIC superpixels in RGB and soft mean pooling of confidence over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ConfidenceMap;
use crate::tensor_io::ImageFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub k: usize,
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self { k: 400, compactness: 10.0, iters: 10 }
    }
}

/// Cluster centre in (x, y, r, g, b); colour channels on the 0..255 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub x: f64,
    pub y: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelLabels {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    centers: Vec<Center>,
}

impl SuperpixelLabels {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn centers(&self) -> &[Center] {
        &self.centers
    }

    /// Number of clusters.
    pub fn k(&self) -> usize {
        self.centers.len()
    }
}

fn color_at(frame: &ImageFrame, x: usize, y: usize) -> [f64; 3] {
    let p = frame.pixel(x, y);
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn color_dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Squared colour difference of the horizontal plus vertical neighbours.
fn gradient(frame: &ImageFrame, x: usize, y: usize) -> f64 {
    let (w, h) = (frame.width(), frame.height());
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
    color_dist2(color_at(frame, xr, y), color_at(frame, xl, y))
        + color_dist2(color_at(frame, x, yd), color_at(frame, x, yu))
}

fn seed_centers(frame: &ImageFrame, k: usize) -> (Vec<Center>, f64) {
    let (w, h) = (frame.width(), frame.height());
    let s = ((w * h) as f64 / k as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = ((i as f64 + 0.5) * w as f64 / nx as f64) as usize;
            let gy = ((j as f64 + 0.5) * h as f64 / ny as f64) as usize;
            // move to the lowest-gradient pixel of the 3x3 neighbourhood
            let (mut bx, mut by) = (gx, gy);
            let mut best = gradient(frame, gx, gy);
            for y in gy.saturating_sub(1)..=(gy + 1).min(h - 1) {
                for x in gx.saturating_sub(1)..=(gx + 1).min(w - 1) {
                    let g = gradient(frame, x, y);
                    if g < best {
                        best = g;
                        (bx, by) = (x, y);
                    }
                }
            }
            centers.push(Center { x: bx as f64, y: by as f64, color: color_at(frame, bx, by) });
        }
    }
    (centers, s)
}

/// Squared SLIC distance `d_color² + (m/S)²·d_xy²`.
#[inline]
fn slic_dist2(c: &Center, x: usize, y: usize, color: [f64; 3], spatial_weight: f64) -> f64 {
    let dxy = (c.x - x as f64).powi(2) + (c.y - y as f64).powi(2);
    color_dist2(c.color, color) + spatial_weight * dxy
}

fn assign(frame: &ImageFrame, centers: &[Center], s: f64, spatial_weight: f64, labels: &mut [u32], dist: &mut [f64]) {
    let (w, h) = (frame.width(), frame.height());
    labels.fill(u32::MAX);
    dist.fill(f64::INFINITY);
    for (id, c) in centers.iter().enumerate() {
        let x0 = (c.x - s).ceil().max(0.0) as usize;
        let y0 = (c.y - s).ceil().max(0.0) as usize;
        let x1 = ((c.x + s).floor() as usize).min(w - 1);
        let y1 = ((c.y + s).floor() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let i = y * w + x;
                let d = slic_dist2(c, x, y, color_at(frame, x, y), spatial_weight);
                if d < dist[i] {
                    dist[i] = d;
                    labels[i] = id as u32;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if labels[i] != u32::MAX {
                continue;
            }
            let mut best = (f64::INFINITY, 0u32);
            for (id, c) in centers.iter().enumerate() {
                let d = (c.x - x as f64).powi(2) + (c.y - y as f64).powi(2);
                if d < best.0 {
                    best = (d, id as u32);
                }
            }
            labels[i] = best.1;
            dist[i] = slic_dist2(&centers[best.1 as usize], x, y, color_at(frame, x, y), spatial_weight);
        }
    }
}

/// Moves each centre to the mean (x, y, r, g, b) of its members; centres
/// without members stay put. Returns member counts.
fn update(frame: &ImageFrame, labels: &[u32], centers: &mut [Center]) -> Vec<usize> {
    let w = frame.width();
    let mut acc = vec![[0.0f64; 5]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let c = color_at(frame, x, y);
        let a = &mut acc[l as usize];
        a[0] += x as f64;
        a[1] += y as f64;
        a[2] += c[0];
        a[3] += c[1];
        a[4] += c[2];
        counts[l as usize] += 1;
    }
    for ((center, a), &n) in centers.iter_mut().zip(&acc).zip(&counts) {
        if n > 0 {
            let n = n as f64;
            *center = Center { x: a[0] / n, y: a[1] / n, color: [a[2] / n, a[3] / n, a[4] / n] };
        }
    }
    counts
}

/// SLIC clustering.
///
/// Centres start on a uniform grid with interval `S = √(HW/k)`, nudged to the
/// lowest-gradient pixel of their 3×3 neighbourhood. Each round a centre
/// claims pixels within its `2S × 2S` box, every pixel keeps the claimant with
/// the lowest distance (ties to the lower id), unclaimed pixels go to the
/// spatially nearest centre, and centres move to their member means.
/// Clusters left empty are dropped and ids compacted.
///
/// The grid has `round(W/S) × round(H/S)` cells, so the cluster count is
/// close to, not always equal to, `k`.
pub fn slic(frame: &ImageFrame, params: &SlicParams) -> Result<SuperpixelLabels> {
    let (w, h) = (frame.width(), frame.height());
    if params.k == 0 || params.k > w * h {
        return Err(Error::InvalidInput(format!(
            "superpixel count must be in [1, {}], got {}",
            w * h,
            params.k
        )));
    }
    let (mut centers, s) = seed_centers(frame, params.k);
    let spatial_weight = (params.compactness / s).powi(2);
    let mut labels = vec![0u32; w * h];
    let mut dist = vec![0f64; w * h];
    let mut counts = Vec::new();
    for _ in 0..params.iters.max(1) {
        assign(frame, &centers, s, spatial_weight, &mut labels, &mut dist);
        counts = update(frame, &labels, &mut centers);
    }

    let mut remap = vec![u32::MAX; centers.len()];
    let mut kept = Vec::with_capacity(centers.len());
    for (id, (&n, c)) in counts.iter().zip(&centers).enumerate() {
        if n > 0 {
            remap[id] = kept.len() as u32;
            kept.push(*c);
        }
    }
    labels.iter_mut().for_each(|l| *l = remap[*l as usize]);
    Ok(SuperpixelLabels { width: w, height: h, labels, centers: kept })
}

/// `out[i] = (1 − β)·conf[i] + β·mean(conf over i's superpixel)`.
pub fn soft_mean_pool(conf: &ConfidenceMap, labels: &SuperpixelLabels, blend: f64) -> Result<ConfidenceMap> {
    if conf.width() != labels.width || conf.height() != labels.height {
        return Err(Error::ShapeMismatch(format!(
            "confidence {}x{} vs superpixels {}x{}",
            conf.width(),
            conf.height(),
            labels.width,
            labels.height
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidInput(format!("pooling blend must be in [0, 1], got {blend}")));
    }
    let k = labels.k();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&v, &l) in conf.data().iter().zip(&labels.labels) {
        sums[l as usize] += v;
        counts[l as usize] += 1;
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| s / n.max(1) as f64).collect();
    let data = conf
        .data()
        .iter()
        .zip(&labels.labels)
        .map(|(&v, &l)| (1.0 - blend) * v + blend * means[l as usize])
        .collect();
    ConfidenceMap::new(conf.width(), conf.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_global_mean() {
        let frame = ImageFrame::from_fn(9, 7, |x, y| [(x * 20) as u8, (y * 30) as u8, 5]);
        let sp = slic(&frame, &SlicParams { k: 1, compactness: 10.0, iters: 3 }).unwrap();
        assert_eq!(sp.k(), 1);
        assert!(sp.labels().iter().all(|&l| l == 0));
        let c = sp.centers()[0];
        assert!((c.x - 4.0).abs() < 1e-9 && (c.y - 3.0).abs() < 1e-9);
        assert!((c.color[0] - 80.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_frame_is_spatial_voronoi() {
        let frame = ImageFrame::from_fn(32, 32, |_, _| [90, 90, 90]);
        let sp = slic(&frame, &SlicParams { k: 4, compactness: 10.0, iters: 5 }).unwrap();
        assert_eq!(sp.k(), 4);
        let centers = sp.centers();
        // brute force: nearest centre by position, ties to the lower id
        for y in 0..32 {
            for x in 0..32 {
                let mut best = (f64::INFINITY, 0);
                for (id, c) in centers.iter().enumerate() {
                    let d = (c.x - x as f64).powi(2) + (c.y - y as f64).powi(2);
                    if d < best.0 {
                        best = (d, id);
                    }
                }
                assert_eq!(sp.labels()[y * 32 + x] as usize, best.1);
            }
        }
        let mut pos: Vec<(f64, f64)> = centers.iter().map(|c| (c.x, c.y)).collect();
        pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pos, vec![(8.0, 8.0), (8.0, 24.0), (24.0, 8.0), (24.0, 24.0)]);
    }

    #[test]
    fn two_colour_split_follows_boundary() {
        let frame = ImageFrame::from_fn(20, 10, |x, _| if x < 10 { [250, 0, 0] } else { [0, 0, 250] });
        let sp = slic(&frame, &SlicParams { k: 2, compactness: 1.0, iters: 5 }).unwrap();
        assert_eq!(sp.k(), 2);
        for y in 0..10 {
            for x in 0..20 {
                let same = sp.labels()[y * 20 + x] == sp.labels()[y * 20];
                assert_eq!(same, x < 10, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn too_many_clusters() {
        let frame = ImageFrame::from_fn(2, 2, |_, _| [0, 0, 0]);
        assert!(slic(&frame, &SlicParams { k: 5, ..Default::default() }).is_err());
        assert!(slic(&frame, &SlicParams { k: 0, ..Default::default() }).is_err());
        assert!(slic(&frame, &SlicParams { k: 4, ..Default::default() }).is_ok());
    }

    fn two_cluster_labels() -> SuperpixelLabels {
        SuperpixelLabels {
            width: 2,
            height: 1,
            labels: vec![0, 0],
            centers: vec![Center { x: 0.5, y: 0.0, color: [0.0; 3] }],
        }
    }

    #[test]
    fn pooling_blend() {
        let sp = two_cluster_labels();
        let conf = ConfidenceMap::new(2, 1, vec![0.2, 0.4]).unwrap();
        assert_eq!(soft_mean_pool(&conf, &sp, 0.0).unwrap(), conf);
        let full = soft_mean_pool(&conf, &sp, 1.0).unwrap();
        assert!(full.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let constant = ConfidenceMap::filled(2, 1, 0.7);
        assert_eq!(soft_mean_pool(&constant, &sp, 0.5).unwrap(), constant);
        assert!(soft_mean_pool(&conf, &sp, 1.5).is_err());
    }

    #[test]
    fn assignment_never_worse_than_claimant() {
        let frame = ImageFrame::from_fn(40, 30, |x, y| [((x * 37 + y * 11) % 256) as u8, (y * 8) as u8, (x * 6) as u8]);
        let (centers, s) = seed_centers(&frame, 12);
        let sw = (10.0 / s).powi(2);
        let mut labels = vec![0; 1200];
        let mut dist = vec![0.0; 1200];
        assign(&frame, &centers, s, sw, &mut labels, &mut dist);
        for y in 0..30 {
            for x in 0..40 {
                let i = y * 40 + x;
                let own = slic_dist2(&centers[labels[i] as usize], x, y, color_at(&frame, x, y), sw);
                assert_eq!(own, dist[i]);
                for c in &centers {
                    let in_box = (c.x - x as f64).abs() <= s && (c.y - y as f64).abs() <= s;
                    if in_box {
                        assert!(own <= slic_dist2(c, x, y, color_at(&frame, x, y), sw));
                    }
                }
            }
        }
    }
}
