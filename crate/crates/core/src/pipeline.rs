//! First-frame fitting and per-frame segmentation.
//!
//! For every object a forest and a logistic model are trained one-vs-rest on
//! the prompt frame. Later frames are segmented inside tracked windows: mixed
//! confidence, superpixel pooling, guided filtering, then a thresholded
//! argmax over objects.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{grayscale, handcrafted_features, FeatureMap};
use crate::forest::{predict_forest_in, train_forest, ForestModel};
use crate::guided_filter::guided_filter;
use crate::linear::{predict_logistic_in, train_logistic, LinearModel};
use crate::maps::ConfidenceMap;
use crate::sampler::{build_training_set, SearchWindow};
use crate::superpixel::{slic, soft_mean_pool};
use crate::tensor_io::{ImageFrame, LabelMask};
use crate::tracker::{init_tracker, track_step, TrackerState};

/// Forest and logistic models for one object against everything else.
#[derive(Clone, Debug, Serialize)]
pub struct SDForestModel {
    pub object_id: u8,
    pub forest: ForestModel,
    pub linear: LinearModel,
    pub forest_weight: f64,
}

fn object_ids(prompt: &LabelMask) -> Result<Vec<u8>> {
    let n = prompt.num_objects();
    if n == 0 {
        return Err(Error::InvalidInput("prompt mask contains no objects".into()));
    }
    let mut counts = [0usize; 256];
    for &l in prompt.labels() {
        counts[l as usize] += 1;
    }
    (1..=n).map(|id| if counts[id as usize] == 0 { Err(Error::EmptyObject(id)) } else { Ok(id) }).collect()
}

/// Trains one model pair per object in `prompt`.
///
/// `windows` gives each object's training window in id order; by default it is
/// the object's bounding box scaled by `config.tracker_scale`.
pub fn fit_first_frame(
    features: &FeatureMap,
    prompt: &LabelMask,
    windows: Option<&[SearchWindow]>,
    config: &Config,
    seed: u64,
) -> Result<Vec<SDForestModel>> {
    if features.width() != prompt.width() || features.height() != prompt.height() {
        return Err(Error::ShapeMismatch(format!(
            "features are {}x{}, prompt is {}x{}",
            features.width(),
            features.height(),
            prompt.width(),
            prompt.height()
        )));
    }
    let ids = object_ids(prompt)?;
    if let Some(w) = windows {
        if w.len() != ids.len() {
            return Err(Error::InvalidInput(format!("{} windows for {} objects", w.len(), ids.len())));
        }
    }
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let window = match windows {
                Some(w) => w[i],
                None => {
                    let bbox = prompt.bbox(id).ok_or(Error::EmptyObject(id))?;
                    SearchWindow::from_bbox(bbox, config.tracker_scale, prompt.width(), prompt.height())?
                }
            };
            let data = build_training_set(features, prompt, &window, config.stride)?.relabel(|l| u8::from(l == id));
            if data.is_single_class() {
                return Err(Error::DegenerateData(format!(
                    "object {id} has no background samples in its training window"
                )));
            }
            Ok(SDForestModel {
                object_id: id,
                forest: train_forest(&data, &config.forest, seed)?,
                linear: train_logistic(&data, &config.linear)?,
                forest_weight: config.forest_weight,
            })
        })
        .collect()
}

/// `γ·forest + (1−γ)·linear` object probability inside `window`, 0 elsewhere.
pub fn predict_confidence(
    model: &SDForestModel,
    features: &FeatureMap,
    window: Option<&SearchWindow>,
) -> Result<ConfidenceMap> {
    let full = SearchWindow::full(features.width(), features.height());
    let window = window.unwrap_or(&full);
    let forest = predict_forest_in(&model.forest, features, window)?.swap_remove(1);
    let linear = predict_logistic_in(&model.linear, features, window)?.swap_remove(1);
    Ok(mix(&forest, &linear, model.forest_weight))
}

/// Convex combination `gamma·a + (1−gamma)·b`.
pub fn mix(a: &ConfidenceMap, b: &ConfidenceMap, gamma: f64) -> ConfidenceMap {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| gamma * x + (1.0 - gamma) * y).collect();
    ConfidenceMap::new(a.width(), a.height(), data).expect("extents match")
}

/// Labels each pixel with the most confident object, or 0 when no object
/// reaches `threshold`. Ties go to the lowest id.
pub fn combine_objects(maps: &[ConfidenceMap], ids: &[u8], threshold: f64) -> LabelMask {
    let (w, h) = (maps[0].width(), maps[0].height());
    let labels = (0..w * h)
        .map(|i| {
            let mut best = (0u8, f64::NEG_INFINITY);
            for (m, &id) in maps.iter().zip(ids) {
                let v = m.data()[i];
                if v > best.1 {
                    best = (id, v);
                }
            }
            if best.1 >= threshold {
                best.0
            } else {
                0
            }
        })
        .collect();
    LabelMask::new(w, h, labels).expect("labels fit the frame")
}

/// Wall time spent in each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub features: Duration,
    pub fit: Duration,
    pub tracking: Duration,
    pub confidence: Duration,
    pub superpixels: Duration,
    pub pooling: Duration,
    pub filtering: Duration,
    pub labelling: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.features
            + self.fit
            + self.tracking
            + self.confidence
            + self.superpixels
            + self.pooling
            + self.filtering
            + self.labelling
    }

    pub fn stages(&self) -> [(&'static str, Duration); 8] {
        [
            ("features", self.features),
            ("fit", self.fit),
            ("tracking", self.tracking),
            ("confidence", self.confidence),
            ("superpixels", self.superpixels),
            ("pooling", self.pooling),
            ("filtering", self.filtering),
            ("labelling", self.labelling),
        ]
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

/// Segments one frame given per-object windows.
///
/// Returns the label mask and each object's filtered confidence map.
pub fn segment_frame(
    models: &[SDForestModel],
    frame: &ImageFrame,
    features: &FeatureMap,
    windows: &[SearchWindow],
    config: &Config,
    timings: &mut StageTimings,
) -> Result<(LabelMask, Vec<ConfidenceMap>)> {
    if models.is_empty() || models.len() != windows.len() {
        return Err(Error::InvalidInput(format!("{} models for {} windows", models.len(), windows.len())));
    }
    if features.width() != frame.width() || features.height() != frame.height() {
        return Err(Error::ShapeMismatch("features and frame differ in extents".into()));
    }
    let raw: Vec<ConfidenceMap> = timed(&mut timings.confidence, || {
        models
            .par_iter()
            .zip(windows)
            .map(|(m, w)| predict_confidence(m, features, Some(w)))
            .collect::<Result<_>>()
    })?;
    let superpixels = timed(&mut timings.superpixels, || slic(frame, &config.slic))?;
    let pooled: Vec<ConfidenceMap> = timed(&mut timings.pooling, || {
        raw.iter().map(|c| soft_mean_pool(c, &superpixels, config.pooling_blend)).collect::<Result<_>>()
    })?;
    let guidance = grayscale(frame);
    let filtered: Vec<ConfidenceMap> = timed(&mut timings.filtering, || {
        pooled.iter().map(|c| guided_filter(&guidance, c, &config.igf)).collect::<Result<_>>()
    })?;
    let ids: Vec<u8> = models.iter().map(|m| m.object_id).collect();
    let mask = timed(&mut timings.labelling, || combine_objects(&filtered, &ids, config.threshold));
    Ok((mask, filtered))
}

#[derive(Clone, Debug)]
pub struct SequenceResult {
    /// One mask per frame; the first is the prompt.
    pub masks: Vec<LabelMask>,
    /// Per frame from the second on, each object's final confidence.
    pub confidences: Option<Vec<Vec<ConfidenceMap>>>,
    /// Per frame from the second on, each object's search window.
    pub windows: Vec<Vec<SearchWindow>>,
    pub timings: StageTimings,
}

impl SequenceResult {
    pub fn frames_per_second(&self) -> f64 {
        let secs = self.timings.total().as_secs_f64();
        if secs > 0.0 {
            self.masks.len() as f64 / secs
        } else {
            f64::INFINITY
        }
    }
}

/// Runs the full pipeline on `frames` with handcrafted features.
pub fn run_sequence(frames: &[ImageFrame], prompt: &LabelMask, config: &Config, seed: u64) -> Result<SequenceResult> {
    run_sequence_with(frames, prompt, config, seed, false, |_, f| Ok(handcrafted_features(f)))
}

/// Runs the full pipeline, obtaining each frame's features from `features`,
/// which receives the frame index and the frame.
pub fn run_sequence_with(
    frames: &[ImageFrame],
    prompt: &LabelMask,
    config: &Config,
    seed: u64,
    keep_confidence: bool,
    mut features: impl FnMut(usize, &ImageFrame) -> Result<FeatureMap>,
) -> Result<SequenceResult> {
    config.validate()?;
    let first = frames.first().ok_or(Error::InvalidInput("sequence has no frames".into()))?;
    let (w, h) = (first.width(), first.height());
    if prompt.width() != w || prompt.height() != h {
        return Err(Error::ShapeMismatch(format!(
            "prompt is {}x{}, first frame is {w}x{h}",
            prompt.width(),
            prompt.height()
        )));
    }
    let mut timings = StageTimings::default();
    let mut masks = vec![prompt.clone()];
    let mut confidences = keep_confidence.then(Vec::new);
    let mut all_windows = Vec::new();
    if frames.len() == 1 {
        return Ok(SequenceResult { masks, confidences, windows: all_windows, timings });
    }

    let check = |fm: &FeatureMap, n: usize| -> Result<()> {
        if fm.width() != w || fm.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "features of frame {} are {}x{}, expected {w}x{h}",
                n + 1,
                fm.width(),
                fm.height()
            )));
        }
        Ok(())
    };
    let fm0 = Arc::new(timed(&mut timings.features, || features(0, first))?);
    check(&fm0, 0)?;
    let models = timed(&mut timings.fit, || fit_first_frame(&fm0, prompt, None, config, seed))?;
    let mut trackers: Vec<TrackerState> = timed(&mut timings.tracking, || {
        models
            .iter()
            .map(|m| init_tracker(fm0.clone(), prompt, m.object_id, config.tracker_scale))
            .collect::<Result<_>>()
    })?;
    drop(fm0);

    for (n, frame) in frames.iter().enumerate().skip(1) {
        if frame.width() != w || frame.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "frame {} is {}x{}, sequence started at {w}x{h}",
                n + 1,
                frame.width(),
                frame.height()
            )));
        }
        let fm = Arc::new(timed(&mut timings.features, || features(n, frame))?);
        check(&fm, n)?;
        if fm.channels() != models[0].forest.n_features() {
            return Err(Error::ShapeMismatch(format!(
                "features of frame {} have {} channels, the first frame had {}",
                n + 1,
                fm.channels(),
                models[0].forest.n_features()
            )));
        }
        let prev = masks.last().expect("prompt is present");
        let stepped: Vec<(TrackerState, SearchWindow)> = timed(&mut timings.tracking, || {
            trackers
                .iter()
                .map(|t| track_step(t, fm.clone(), prev, config.tracker_scale))
                .collect::<Result<_>>()
        })?;
        let windows: Vec<SearchWindow> = stepped.iter().map(|s| s.1).collect();
        trackers = stepped.into_iter().map(|s| s.0).collect();
        let (mask, conf) = segment_frame(&models, frame, &fm, &windows, config, &mut timings)?;
        masks.push(mask);
        if let Some(c) = confidences.as_mut() {
            c.push(conf);
        }
        all_windows.push(windows);
    }
    Ok(SequenceResult { masks, confidences, windows: all_windows, timings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::jaccard;
    use crate::synthetic::{generate, SyntheticSpec};

    fn fast() -> Config {
        Config { slic: crate::superpixel::SlicParams { k: 100, ..Default::default() }, ..Config::default() }
    }

    #[test]
    fn mix_examples() {
        let f = ConfidenceMap::filled(2, 2, 0.5);
        let l = ConfidenceMap::filled(2, 2, 1.0);
        assert!(mix(&f, &l, 0.8).data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert_eq!(mix(&f, &l, 1.0), f);
        assert_eq!(mix(&f, &l, 0.0), l);
    }

    #[test]
    fn combine_rules() {
        let a = ConfidenceMap::new(3, 1, vec![0.8, 0.4, 0.7]).unwrap();
        let b = ConfidenceMap::new(3, 1, vec![0.6, 0.3, 0.7]).unwrap();
        assert_eq!(combine_objects(&[a, b], &[1, 2], 0.5).labels(), &[1, 0, 1]);
        let disk = ConfidenceMap::from_fn(9, 9, |x, y| if (x as i32 - 4).pow(2) + (y as i32 - 4).pow(2) <= 9 { 0.9 } else { 0.1 });
        let m = combine_objects(&[disk], &[1], 0.5);
        assert_eq!(m.labels().iter().filter(|&&l| l == 1).count(), 29);
    }

    #[test]
    fn fit_separable_disk() {
        let seq = generate(&SyntheticSpec::moving_disk(64, 64, 1, 3));
        let fm = handcrafted_features(&seq.frames[0]);
        let cfg = Config::default();
        let models = fit_first_frame(&fm, &seq.masks[0], None, &cfg, 1).unwrap();
        assert_eq!(models.len(), 1);
        let bbox = seq.masks[0].bbox(1).unwrap();
        let win = SearchWindow::from_bbox(bbox, cfg.tracker_scale, 64, 64).unwrap();
        let data = build_training_set(&fm, &seq.masks[0], &win, cfg.stride).unwrap();
        let m = &models[0];
        for i in 0..data.len() {
            let want = usize::from(data.labels()[i] == 1);
            let pf = m.forest.predict_proba(data.row(i));
            let pl = m.linear.predict_proba(data.row(i));
            assert_eq!(usize::from(pf[1] > pf[0]), want);
            assert_eq!(usize::from(pl[1] > pl[0]), want);
        }
    }

    #[test]
    fn fit_errors_and_objects() {
        let seq = generate(&SyntheticSpec::two_disks(64, 64, 1, 0));
        let fm = handcrafted_features(&seq.frames[0]);
        let models = fit_first_frame(&fm, &seq.masks[0], None, &Config::default(), 0).unwrap();
        assert_eq!(models.iter().map(|m| m.object_id).collect::<Vec<_>>(), vec![1, 2]);

        let gap = LabelMask::from_fn(64, 64, |x, _| if x < 4 { 2 } else { 0 });
        assert!(matches!(fit_first_frame(&fm, &gap, None, &Config::default(), 0), Err(Error::EmptyObject(1))));
        assert!(fit_first_frame(&fm, &LabelMask::zeros(64, 64), None, &Config::default(), 0).is_err());
    }

    #[test]
    fn single_frame_returns_prompt() {
        let seq = generate(&SyntheticSpec::moving_disk(48, 48, 1, 0));
        let r = run_sequence(&seq.frames, &seq.masks[0], &fast(), 0).unwrap();
        assert_eq!(r.masks, seq.masks);
    }

    #[test]
    fn static_sequence_stays_put() {
        let seq = generate(&SyntheticSpec::static_disk(96, 96, 5, 2));
        let r = run_sequence(&seq.frames, &seq.masks[0], &fast(), 0).unwrap();
        for (p, g) in r.masks.iter().zip(&seq.masks) {
            let j = jaccard(&p.object(1), &g.object(1)).unwrap();
            assert!(j >= 0.95, "J = {j}");
        }
    }

    #[test]
    fn size_change_rejected() {
        let mut frames = generate(&SyntheticSpec::moving_disk(48, 48, 2, 0)).frames;
        let prompt = generate(&SyntheticSpec::moving_disk(48, 48, 1, 0)).masks.remove(0);
        frames.push(generate(&SyntheticSpec::moving_disk(40, 48, 1, 0)).frames.remove(0));
        assert!(matches!(run_sequence(&frames, &prompt, &fast(), 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn partition_and_range() {
        let seq = generate(&SyntheticSpec::two_disks(80, 80, 3, 1));
        let r = run_sequence_with(&seq.frames, &seq.masks[0], &fast(), 0, true, |_, f| Ok(handcrafted_features(f))).unwrap();
        for frame in r.confidences.unwrap() {
            for c in frame {
                assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(r.masks.iter().all(|m| m.labels().iter().all(|&l| l <= 2)));
    }
}
