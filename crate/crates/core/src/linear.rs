//! Multiclass logistic (softmax) regression on standardized pixel features.
//!
//! The objective is the mean softmax cross-entropy plus `(l2 / 2)·‖θ‖²`,
//! minimized from θ = 0 with a limited-memory BFGS and a backtracking
//! Armijo line search, so the objective never increases between accepted
//! iterations.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::maps::ConfidenceMap;
use crate::maps_predict::per_pixel_maps;
use crate::sampler::{PixelDataset, SearchWindow};

const STD_FLOOR: f64 = 1e-8;
/// Rows per block in the loss/gradient reduction; blocks are summed in order.
const BLOCK: usize = 2048;
const HISTORY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub l2: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { l2: 1e-4, tol: 1e-6, max_iters: 200 }
    }
}

/// Softmax weights `c × (C + 1)` (last column is the bias) plus the
/// standardization learned from the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    n_classes: usize,
    n_features: usize,
    weights: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearModel {
    /// Zero weights with the standardization fitted to `data`.
    pub fn zeros_for(data: &PixelDataset, n_classes: usize) -> Self {
        let (mean, scale) = standardization(data);
        Self {
            n_classes,
            n_features: data.n_features(),
            weights: vec![0.0; n_classes * (data.n_features() + 1)],
            mean,
            scale,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.weights.len(), "weight shape");
        self.weights = weights;
    }

    fn standardize_into(&self, x: &[f32], z: &mut [f64]) {
        for ((zj, &xj), (m, s)) in z.iter_mut().zip(x).zip(self.mean.iter().zip(&self.scale)) {
            *zj = (xj as f64 - m) / s;
        }
    }

    fn logits_into(&self, z: &[f64], logits: &mut [f64]) {
        let stride = self.n_features + 1;
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &self.weights[k * stride..(k + 1) * stride];
            *l = row[self.n_features] + row[..self.n_features].iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn predict_proba_into(&self, x: &[f32], out: &mut [f64]) {
        let mut z = vec![0.0; self.n_features];
        self.standardize_into(x, &mut z);
        self.logits_into(&z, out);
        softmax_in_place(out);
    }

    pub fn predict_proba(&self, x: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        self.predict_proba_into(x, &mut out);
        out
    }
}

fn standardization(data: &PixelDataset) -> (Vec<f64>, Vec<f64>) {
    let c = data.n_features();
    let n = data.len() as f64;
    let mut mean = vec![0.0; c];
    for i in 0..data.len() {
        for (m, &v) in mean.iter_mut().zip(data.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for i in 0..data.len() {
        for ((s, &v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let scale = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, scale)
}

/// Returns log-sum-exp and leaves softmax probabilities in `v`.
fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
    max + sum.ln()
}

fn check_shapes(model: &LinearModel, data: &PixelDataset) -> Result<()> {
    if model.n_features != data.n_features() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} features, data has {}",
            model.n_features,
            data.n_features()
        )));
    }
    if data.n_classes() > model.n_classes {
        return Err(Error::ShapeMismatch(format!(
            "data has label {} but model has {} classes",
            data.n_classes() - 1,
            model.n_classes
        )));
    }
    Ok(())
}

fn objective(model: &LinearModel, data: &PixelDataset, l2: f64) -> (f64, Vec<f64>) {
    let c = model.n_features;
    let k = model.n_classes;
    let stride = c + 1;
    let n = data.len();

    let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; k * stride];
            let mut z = vec![0.0; c];
            let mut p = vec![0.0; k];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                model.standardize_into(data.row(i), &mut z);
                model.logits_into(&z, &mut p);
                let y = data.labels()[i] as usize;
                let logit_y = p[y];
                loss += softmax_in_place(&mut p) - logit_y;
                p[y] -= 1.0;
                for (cls, &err) in p.iter().enumerate() {
                    let g = &mut grad[cls * stride..(cls + 1) * stride];
                    for (gj, zj) in g.iter_mut().zip(&z) {
                        *gj += err * zj;
                    }
                    g[c] += err;
                }
            }
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; k * stride];
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let inv_n = 1.0 / n as f64;
    let mut reg = 0.0;
    for (g, w) in grad.iter_mut().zip(&model.weights) {
        *g = *g * inv_n + l2 * w;
        reg += w * w;
    }
    (loss * inv_n + 0.5 * l2 * reg, grad)
}

/// Objective value and its exact gradient (same layout as the weights).
pub fn loss_and_grad(model: &LinearModel, data: &PixelDataset, l2: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(model, data)?;
    Ok(objective(model, data, l2))
}

/// Per-pixel mask loss `(1 / 2n) Σ log(1 + exp(−y·s))` for labels `y ∈ {−1, +1}`.
///
/// For two classes the softmax cross-entropy of a pixel equals the summand
/// with `s` the logit difference, so the mean cross-entropy is twice this.
pub fn mask_branch_loss(scores: &[f64], signs: &[i8]) -> f64 {
    assert_eq!(scores.len(), signs.len(), "one sign per score");
    let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    let sum: f64 = scores.iter().zip(signs).map(|(&s, &y)| softplus(-(y as f64) * s)).sum();
    sum / (2 * scores.len()) as f64
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    /// Objective after each accepted iteration, starting with the value at θ = 0.
    pub objective: Vec<f64>,
    pub grad_inf_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn train_logistic(data: &PixelDataset, config: &LinearConfig) -> Result<LinearModel> {
    train_logistic_traced(data, config).map(|(m, _)| m)
}

pub fn train_logistic_traced(data: &PixelDataset, config: &LinearConfig) -> Result<(LinearModel, TrainTrace)> {
    if data.len() < 2 {
        return Err(Error::DegenerateData(format!("need at least 2 samples, got {}", data.len())));
    }
    if data.is_single_class() {
        return Err(Error::DegenerateData("all samples carry the same label".into()));
    }
    let mut model = LinearModel::zeros_for(data, data.n_classes());
    let (mut f, mut g) = objective(&model, data, config.l2);
    let mut trace = TrainTrace { objective: vec![f], grad_inf_norm: inf_norm(&g), converged: false };
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);

    for _ in 0..config.max_iters {
        if inf_norm(&g) <= config.tol {
            trace.converged = true;
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = if history.is_empty() { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let base = model.weights.clone();
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = base.iter().zip(&d).map(|(w, di)| w + step * di).collect();
            model.weights = trial;
            let (f_new, g_new) = objective(&model, data, config.l2);
            if f_new <= f + 1e-4 * step * slope {
                accepted = Some((f_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let Some((f_new, g_new)) = accepted else {
            model.weights = base;
            break;
        };

        let s: Vec<f64> = model.weights.iter().zip(&base).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        f = f_new;
        g = g_new;
        trace.objective.push(f);
    }
    trace.grad_inf_norm = inf_norm(&g);
    trace.converged |= trace.grad_inf_norm <= config.tol;
    Ok((model, trace))
}

fn check_channels(model: &LinearModel, features: &FeatureMap) -> Result<()> {
    if features.channels() != model.n_features {
        return Err(Error::ShapeMismatch(format!(
            "linear model trained on {} channels, features have {}",
            model.n_features,
            features.channels()
        )));
    }
    Ok(())
}

/// Per-class softmax probability maps.
pub fn predict_logistic(model: &LinearModel, features: &FeatureMap) -> Result<Vec<ConfidenceMap>> {
    check_channels(model, features)?;
    Ok(per_pixel_maps(features, None, model.n_classes, |x, out| model.predict_proba_into(x, out)))
}

pub fn predict_logistic_in(
    model: &LinearModel,
    features: &FeatureMap,
    window: &SearchWindow,
) -> Result<Vec<ConfidenceMap>> {
    check_channels(model, features)?;
    Ok(per_pixel_maps(features, Some(window), model.n_classes, |x, out| {
        model.predict_proba_into(x, out)
    }))
}
