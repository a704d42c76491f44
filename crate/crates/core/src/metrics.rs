//! Region similarity J, boundary measure F and their per-sequence statistics.
//!
//! Boundaries are mask pixels with a 4-neighbour inside the frame that is not
//! in the mask; pixels beyond the frame edge do not count as outside.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_io::{read_mask, LabelMask};

/// Values above this count toward recall.
pub const RECALL_THRESHOLD: f64 = 0.5;

/// Name of the timing summary written next to predicted masks.
pub const TIMING_FILE: &str = "timing.txt";

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Boundary pixels of a binary mask.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            out[i] = (x > 0 && !mask[i - 1])
                || (x + 1 < width && !mask[i + 1])
                || (y > 0 && !mask[i - width])
                || (y + 1 < height && !mask[i + width]);
        }
    }
    out
}

/// Marks every pixel within Chebyshev distance `tol` of a set pixel.
fn dilate(set: &[bool], width: usize, height: usize, tol: usize) -> Vec<bool> {
    let stride = width + 1;
    let mut sums = vec![0u32; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0;
        for x in 0..width {
            row += u32::from(set[y * width + x]);
            sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![false; set.len()];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(tol), (y + tol + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(tol), (x + tol + 1).min(width));
            let n = sums[y1 * stride + x1] + sums[y0 * stride + x0] - sums[y0 * stride + x1] - sums[y1 * stride + x0];
            out[y * width + x] = n > 0;
        }
    }
    out
}

/// Boundary F-measure with a pixel tolerance.
///
/// Both masks empty gives 1; exactly one empty gives 0.
pub fn boundary_f(pred: &[bool], gt: &[bool], width: usize, height: usize, tol: usize) -> Result<f64> {
    same_len(pred, gt)?;
    if pred.len() != width * height {
        return Err(Error::ShapeMismatch(format!("{} pixels for a {width}x{height} frame", pred.len())));
    }
    let bp = boundary(pred, width, height);
    let bg = boundary(gt, width, height);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let near_g = dilate(&bg, width, height, tol);
    let near_p = dilate(&bp, width, height, tol);
    let hit_p = bp.iter().zip(&near_g).filter(|(&b, &n)| b && n).count();
    let hit_g = bg.iter().zip(&near_p).filter(|(&b, &n)| b && n).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// `⌈0.008 · diagonal⌉`, at least 1.
pub fn default_boundary_tol(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub recall: f64,
    pub decay: f64,
}

/// Mean, recall and decay of a per-frame series.
///
/// Decay splits the series into 4 contiguous bins, the remainder going to the
/// earliest bins, and subtracts the last non-empty bin's mean from the first's.
pub fn sequence_stats(values: &[f64]) -> Result<SeriesStats> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let recall = values.iter().filter(|&&v| v > RECALL_THRESHOLD).count() as f64 / n as f64;
    let (base, extra) = (n / 4, n % 4);
    let mut bins = Vec::with_capacity(4);
    let mut start = 0;
    for b in 0..4 {
        let len = base + usize::from(b < extra);
        if len > 0 {
            let bin = &values[start..start + len];
            bins.push(bin.iter().sum::<f64>() / len as f64);
        }
        start += len;
    }
    let decay = bins[0] - bins[bins.len() - 1];
    Ok(SeriesStats { mean, recall, decay })
}

fn mean_stats(items: &[SeriesStats]) -> SeriesStats {
    let n = items.len() as f64;
    SeriesStats {
        mean: items.iter().map(|s| s.mean).sum::<f64>() / n,
        recall: items.iter().map(|s| s.recall).sum::<f64>() / n,
        decay: items.iter().map(|s| s.decay).sum::<f64>() / n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectReport {
    pub object_id: u8,
    pub j: SeriesStats,
    pub f: SeriesStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceReport {
    pub name: String,
    /// Frames scored, excluding the prompt frame.
    pub frames: usize,
    pub objects: Vec<ObjectReport>,
    pub j: SeriesStats,
    pub f: SeriesStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub sequences: Vec<SequenceReport>,
    pub j: SeriesStats,
    pub f: SeriesStats,
    pub fps: Option<f64>,
}

impl MetricsReport {
    /// Plain `key: value` lines, global figures first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |prefix: &str, j: &SeriesStats, f: &SeriesStats| {
            for (k, v) in [
                ("J_M", j.mean),
                ("J_O", j.recall),
                ("J_D", j.decay),
                ("F_M", f.mean),
                ("F_O", f.recall),
                ("F_D", f.decay),
            ] {
                out.push_str(&format!("{prefix}{k}: {v:.6}\n"));
            }
        };
        put("", &self.j, &self.f);
        for s in &self.sequences {
            put(&format!("{}/", s.name), &s.j, &s.f);
            for o in &s.objects {
                put(&format!("{}/{}/", s.name, o.object_id), &o.j, &o.f);
            }
        }
        if let Some(fps) = self.fps {
            out.push_str(&format!("fps: {fps:.3}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores one sequence of masks against ground truth.
///
/// The first frame is the prompt and is skipped unless it is the only frame.
/// Objects are the ids `1..=max` seen in any ground-truth frame.
pub fn evaluate_masks(name: &str, preds: &[LabelMask], gts: &[LabelMask], tol: Option<usize>) -> Result<SequenceReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{name}: {} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.width() != g.width() || p.height() != g.height() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: frame {} is {}x{} predicted vs {}x{} ground truth",
                i + 1,
                p.width(),
                p.height(),
                g.width(),
                g.height()
            )));
        }
    }
    let skip = usize::from(gts.len() > 1);
    let max_id = gts.iter().map(LabelMask::num_objects).max().unwrap_or(0);
    let mut objects = Vec::new();
    for id in 1..=max_id {
        let scores: Vec<(f64, f64)> = (skip..gts.len())
            .into_par_iter()
            .map(|i| {
                let (p, g) = (preds[i].object(id), gts[i].object(id));
                let (w, h) = (gts[i].width(), gts[i].height());
                let t = tol.unwrap_or_else(|| default_boundary_tol(w, h));
                Ok((jaccard(&p, &g)?, boundary_f(&p, &g, w, h, t)?))
            })
            .collect::<Result<_>>()?;
        let js: Vec<f64> = scores.iter().map(|s| s.0).collect();
        let fs: Vec<f64> = scores.iter().map(|s| s.1).collect();
        objects.push(ObjectReport { object_id: id, j: sequence_stats(&js)?, f: sequence_stats(&fs)? });
    }
    if objects.is_empty() {
        return Err(Error::InvalidInput(format!("{name}: ground truth contains no objects")));
    }
    let j = mean_stats(&objects.iter().map(|o| o.j).collect::<Vec<_>>());
    let f = mean_stats(&objects.iter().map(|o| o.f).collect::<Vec<_>>());
    Ok(SequenceReport { name: name.to_string(), frames: gts.len() - skip, objects, j, f })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn sub_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Reads `fps` from a timing summary in `dir`, if present.
pub fn read_fps(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join(TIMING_FILE)).ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k.trim() == "fps").then(|| v.trim().parse().ok()).flatten()
    })
}

fn evaluate_sequence(name: &str, pred_dir: &Path, gt_dir: &Path, tol: Option<usize>) -> Result<SequenceReport> {
    let gt_files = png_files(gt_dir)?;
    let mut preds = Vec::with_capacity(gt_files.len());
    let mut gts = Vec::with_capacity(gt_files.len());
    for g in &gt_files {
        let p = pred_dir.join(g.file_name().expect("file has a name"));
        if !p.is_file() {
            return Err(Error::NotFound(p));
        }
        preds.push(read_mask(&p)?);
        gts.push(read_mask(g)?);
    }
    evaluate_masks(name, &preds, &gts, tol)
}

/// Evaluates predicted masks against ground truth.
///
/// `gt_dir` holds either one sequence of PNG masks or one sub-directory per
/// sequence; `pred_dir` mirrors its layout with identical file names. The
/// report averages over objects, then over sequences.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, tol: Option<usize>) -> Result<MetricsReport> {
    if !gt_dir.is_dir() {
        return Err(Error::NotFound(gt_dir.to_path_buf()));
    }
    if !pred_dir.is_dir() {
        return Err(Error::NotFound(pred_dir.to_path_buf()));
    }
    let mut sequences = Vec::new();
    let mut fps_values = Vec::new();
    if png_files(gt_dir)?.is_empty() {
        for seq in sub_dirs(gt_dir)? {
            let name = seq.file_name().expect("dir has a name").to_string_lossy().into_owned();
            let pred_seq = pred_dir.join(&name);
            if !pred_seq.is_dir() {
                return Err(Error::NotFound(pred_seq));
            }
            sequences.push(evaluate_sequence(&name, &pred_seq, &seq, tol)?);
            fps_values.extend(read_fps(&pred_seq));
        }
    } else {
        let name = gt_dir.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
        sequences.push(evaluate_sequence(&name, pred_dir, gt_dir, tol)?);
    }
    fps_values.extend(read_fps(pred_dir));
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let j = mean_stats(&sequences.iter().map(|s| s.j).collect::<Vec<_>>());
    let f = mean_stats(&sequences.iter().map(|s| s.f).collect::<Vec<_>>());
    let fps = (!fps_values.is_empty()).then(|| fps_values.iter().sum::<f64>() / fps_values.len() as f64);
    Ok(MetricsReport { sequences, j, f, fps })
}
