//! Run configuration with flat `key = value` text parsing.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::guided_filter::GuidedFilterParams;
use crate::linear::LinearConfig;
use crate::sampler::DEFAULT_STRIDE;
use crate::superpixel::SlicParams;
use crate::tracker::DEFAULT_SCALE;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub stride: usize,
    pub forest: ForestConfig,
    pub linear: LinearConfig,
    /// Weight of the forest in the forest/linear mix.
    pub forest_weight: f64,
    pub threshold: f64,
    pub tracker_scale: f64,
    pub slic: SlicParams,
    pub pooling_blend: f64,
    pub igf: GuidedFilterParams,
    /// Boundary tolerance for evaluation; `None` derives it from the frame size.
    pub metrics_tol: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            stride: DEFAULT_STRIDE,
            forest: ForestConfig::default(),
            linear: LinearConfig::default(),
            forest_weight: 0.8,
            threshold: 0.5,
            tracker_scale: DEFAULT_SCALE,
            slic: SlicParams::default(),
            pooling_blend: 0.5,
            igf: GuidedFilterParams::default(),
            metrics_tol: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "sampler.stride",
    "forest.trees",
    "forest.max_depth",
    "forest.bootstrap",
    "linear.l2",
    "linear.tol",
    "linear.max_iters",
    "ensemble.forest_weight",
    "threshold",
    "tracker.scale",
    "slic.k",
    "slic.compactness",
    "slic.iters",
    "pooling.blend",
    "igf.radius",
    "igf.eps",
    "metrics.tol",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl Config {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "sampler.stride" => self.stride = parse(key, value)?,
            "forest.trees" => self.forest.trees = parse(key, value)?,
            "forest.max_depth" => {
                self.forest.max_depth = match optional(key, value)? {
                    Some(0) => None,
                    d => d,
                }
            }
            "forest.bootstrap" => self.forest.bootstrap = parse(key, value)?,
            "linear.l2" => self.linear.l2 = parse(key, value)?,
            "linear.tol" => self.linear.tol = parse(key, value)?,
            "linear.max_iters" => self.linear.max_iters = parse(key, value)?,
            "ensemble.forest_weight" => self.forest_weight = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "tracker.scale" => self.tracker_scale = parse(key, value)?,
            "slic.k" => self.slic.k = parse(key, value)?,
            "slic.compactness" => self.slic.compactness = parse(key, value)?,
            "slic.iters" => self.slic.iters = parse(key, value)?,
            "pooling.blend" => self.pooling_blend = parse(key, value)?,
            "igf.radius" => self.igf.radius = parse(key, value)?,
            "igf.eps" => self.igf.eps = parse(key, value)?,
            "metrics.tol" => self.metrics_tol = optional(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stride == 0 {
            return fail("sampler.stride must be >= 1".into());
        }
        if self.forest.trees == 0 {
            return fail("forest.trees must be >= 1".into());
        }
        if !(self.linear.l2 >= 0.0 && self.linear.tol > 0.0) {
            return fail("linear.l2 must be >= 0 and linear.tol > 0".into());
        }
        if !(0.0..=1.0).contains(&self.forest_weight) {
            return fail(format!("ensemble.forest_weight {} outside [0, 1]", self.forest_weight));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(self.tracker_scale >= 1.0 && self.tracker_scale.is_finite()) {
            return fail(format!("tracker.scale {} must be >= 1", self.tracker_scale));
        }
        if self.slic.k == 0 || self.slic.compactness.is_nan() || self.slic.compactness < 0.0 {
            return fail("slic.k must be >= 1 and slic.compactness >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.pooling_blend) {
            return fail(format!("pooling.blend {} outside [0, 1]", self.pooling_blend));
        }
        if self.igf.radius == 0 || self.igf.eps.is_nan() || self.igf.eps < 0.0 {
            return fail("igf.radius must be >= 1 and igf.eps >= 0".into());
        }
        Ok(())
    }

    /// Current values as `key = value` lines, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let depth = self.forest.max_depth.map_or("none".to_string(), |d| d.to_string());
        let tol = self.metrics_tol.map_or("auto".to_string(), |t| t.to_string());
        let values = [
            self.seed.to_string(),
            self.stride.to_string(),
            self.forest.trees.to_string(),
            depth,
            self.forest.bootstrap.to_string(),
            self.linear.l2.to_string(),
            self.linear.tol.to_string(),
            self.linear.max_iters.to_string(),
            self.forest_weight.to_string(),
            self.threshold.to_string(),
            self.tracker_scale.to_string(),
            self.slic.k.to_string(),
            self.slic.compactness.to_string(),
            self.slic.iters.to_string(),
            self.pooling_blend.to_string(),
            self.igf.radius.to_string(),
            self.igf.eps.to_string(),
            tol,
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
