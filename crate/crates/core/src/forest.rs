//! Random-forest classifier over pixel features.
//!
//! Trees split on `x[d] <= threshold` rules chosen by maximum Gini impurity
//! decrease. Leaves keep full class histograms (as frequencies), so the
//! forest's confidence for a class is the mean over trees of the reached
//! leaf's frequency.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::maps::ConfidenceMap;
use crate::maps_predict::per_pixel_maps;
use crate::sampler::{PixelDataset, SearchWindow};

/// Minimum impurity decrease for a split to count as an improvement.
const MIN_GAIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    /// Train each tree on a bootstrap resample; otherwise on the full set.
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 20, max_depth: Some(20), bootstrap: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub feature: usize,
    pub threshold: f32,
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, x: &[f32]) -> bool {
        x[self.feature] <= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { rule: SplitRule, left: u32, right: u32 },
    Leaf { freqs: Vec<f64> },
}

/// Arena-allocated tree; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf(&self, x: &[f32]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split { rule, left, right } => {
                    i = if rule.goes_left(x) { *left } else { *right } as usize;
                }
                TreeNode::Leaf { freqs } => return freqs,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + go(nodes, *left as usize).max(go(nodes, *right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<Tree>,
    n_features: usize,
    n_classes: usize,
    config: ForestConfig,
    seed: u64,
}

impl ForestModel {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean over trees of the reached leaf's class frequencies.
    pub fn predict_proba_into(&self, x: &[f32], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for tree in &self.trees {
            for (o, f) in out.iter_mut().zip(tree.leaf(x)) {
                *o += f;
            }
        }
        let t = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= t);
    }

    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        self.predict_proba_into(x, &mut out);
        out
    }

    pub fn predict_class(&self, x: &[f32]) -> u8 {
        argmax(&self.predict_proba(x)) as u8
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    data: &'a PixelDataset,
    n_classes: usize,
    max_depth: usize,
    candidates: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    feature_order: Vec<usize>,
    sort_buf: Vec<(f32, u8)>,
}

struct Split {
    rule: SplitRule,
    gain: f64,
}

impl Builder<'_> {
    fn class_counts(&self, idx: &[u32]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in idx {
            counts[self.data.labels()[i as usize] as usize] += 1;
        }
        counts
    }

    fn leaf(&mut self, counts: &[usize]) -> u32 {
        let n: usize = counts.iter().sum();
        let freqs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        self.nodes.push(TreeNode::Leaf { freqs });
        (self.nodes.len() - 1) as u32
    }

    /// Best threshold on one feature, scanning midpoints in ascending order.
    fn best_threshold(&mut self, idx: &[u32], feature: usize, parent: &[usize]) -> Option<Split> {
        let data = self.data;
        self.sort_buf.clear();
        self.sort_buf
            .extend(idx.iter().map(|&i| (data.row(i as usize)[feature], data.labels()[i as usize])));
        self.sort_buf.sort_by(|a, b| a.0.total_cmp(&b.0));

        let n = idx.len() as f64;
        let sq = |counts: &[usize]| counts.iter().map(|&c| (c * c) as f64).sum::<f64>();
        let parent_term = sq(parent) / n;

        let mut left = vec![0usize; self.n_classes];
        let mut right = parent.to_vec();
        let mut best: Option<Split> = None;
        for k in 0..self.sort_buf.len() - 1 {
            let (v, label) = self.sort_buf[k];
            left[label as usize] += 1;
            right[label as usize] -= 1;
            let next = self.sort_buf[k + 1].0;
            if next <= v {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = n - nl;
            // parent Gini minus the weighted child Ginis
            let gain = (sq(&left) / nl + sq(&right) / nr - parent_term) / n;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = ((v as f64 + next as f64) / 2.0) as f32;
                if threshold >= next {
                    threshold = v;
                }
                best = Some(Split { rule: SplitRule { feature, threshold }, gain });
            }
        }
        best
    }

    fn best_over(&mut self, idx: &[u32], features: &[usize], parent: &[usize]) -> Option<Split> {
        let mut best: Option<Split> = None;
        for &f in features {
            if let Some(s) = self.best_threshold(idx, f, parent) {
                if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        best.filter(|s| s.gain > MIN_GAIN)
    }

    fn grow(&mut self, idx: &mut [u32], depth: usize) -> u32 {
        let counts = self.class_counts(idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || idx.len() < 2 {
            return self.leaf(&counts);
        }

        let mut order = std::mem::take(&mut self.feature_order);
        order.shuffle(&mut self.rng);
        let (drawn, rest) = order.split_at(self.candidates);
        let mut drawn = drawn.to_vec();
        drawn.sort_unstable();
        let mut split = self.best_over(idx, &drawn, &counts);
        if split.is_none() {
            // none of the drawn features separates the node; try the others
            let mut rest = rest.to_vec();
            rest.sort_unstable();
            split = self.best_over(idx, &rest, &counts);
        }
        self.feature_order = order;

        let Some(split) = split else {
            return self.leaf(&counts);
        };

        let data = self.data;
        let rule = split.rule;
        let mut mid = 0;
        for k in 0..idx.len() {
            if rule.goes_left(data.row(idx[k] as usize)) {
                idx.swap(k, mid);
                mid += 1;
            }
        }

        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { freqs: Vec::new() });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = TreeNode::Split { rule, left, right };
        id as u32
    }
}

fn train_tree(data: &PixelDataset, n_classes: usize, config: &ForestConfig, seed: u64) -> Tree {
    let n = data.len();
    let c = data.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = if config.bootstrap {
        (0..n).map(|_| rng.random_range(0..n) as u32).collect()
    } else {
        (0..n as u32).collect()
    };
    let mut builder = Builder {
        data,
        n_classes,
        max_depth: config.max_depth.unwrap_or(usize::MAX),
        candidates: ((c as f64).sqrt().ceil() as usize).clamp(1, c),
        rng,
        nodes: Vec::new(),
        feature_order: (0..c).collect(),
        sort_buf: Vec::with_capacity(n),
    };
    builder.grow(&mut idx, 0);
    Tree { nodes: builder.nodes }
}

/// Trains `config.trees` trees; tree `t` draws from a stream seeded by `seed ^ t`,
/// so the result does not depend on how trees are scheduled across threads.
pub fn train_forest(data: &PixelDataset, config: &ForestConfig, seed: u64) -> Result<ForestModel> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.trees == 0 {
        return Err(Error::InvalidInput("forest needs at least one tree".into()));
    }
    let n_classes = data.n_classes();
    let trees = (0..config.trees)
        .into_par_iter()
        .map(|t| train_tree(data, n_classes, config, seed ^ t as u64))
        .collect();
    Ok(ForestModel {
        trees,
        n_features: data.n_features(),
        n_classes,
        config: config.clone(),
        seed,
    })
}

fn check_channels(model: &ForestModel, features: &FeatureMap) -> Result<()> {
    if features.channels() != model.n_features {
        return Err(Error::ShapeMismatch(format!(
            "forest trained on {} channels, features have {}",
            model.n_features,
            features.channels()
        )));
    }
    Ok(())
}

/// Per-class confidence maps over the whole frame.
pub fn predict_forest(model: &ForestModel, features: &FeatureMap) -> Result<Vec<ConfidenceMap>> {
    check_channels(model, features)?;
    Ok(per_pixel_maps(features, None, model.n_classes, |x, out| model.predict_proba_into(x, out)))
}

/// Like [`predict_forest`] but only inside `window`; zero elsewhere.
pub fn predict_forest_in(
    model: &ForestModel,
    features: &FeatureMap,
    window: &SearchWindow,
) -> Result<Vec<ConfidenceMap>> {
    check_channels(model, features)?;
    Ok(per_pixel_maps(features, Some(window), model.n_classes, |x, out| {
        model.predict_proba_into(x, out)
    }))
}
