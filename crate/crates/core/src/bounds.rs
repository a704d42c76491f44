//! Numeric evaluation of generalization bounds.
//!
//! Logarithms are natural. Asymptotic constants are 1 unless passed in.

use serde::Serialize;

use crate::error::{Error, Result};

/// One named additive term of a bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Term {
    pub name: &'static str,
    pub value: f64,
}

/// A bound and the terms that sum to it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Breakdown {
    pub terms: Vec<Term>,
    pub total: f64,
}

impl Breakdown {
    fn new(terms: Vec<Term>) -> Self {
        let total = terms.iter().map(|t| t.value).sum();
        Self { terms, total }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

fn domain(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::BoundDomain(msg()))
    }
}

fn check_m_delta(m: f64, delta: f64) -> Result<()> {
    domain(m.is_finite() && m >= 1.0, || format!("m must be >= 1, got {m}"))?;
    domain(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    domain(v.is_finite() && v >= 0.0, || format!("{name} must be finite and >= 0, got {v}"))
}

/// `√(((Q+1)·ln(J+3) + ln(2/δ)) / (2m))` for a tree with `Q` nodes over `J` features.
pub fn tree_generalization_gap(q: f64, j: f64, m: f64, delta: f64) -> Result<f64> {
    check_nonneg("Q", q)?;
    check_nonneg("J", j)?;
    check_m_delta(m, delta)?;
    Ok((((q + 1.0) * (j + 3.0).ln() + (2.0 / delta).ln()) / (2.0 * m)).sqrt())
}

/// `(Q+1)·ln(J+3)`, the capacity part of the tree bound's numerator.
pub fn tree_capacity(q: f64, j: f64) -> Result<f64> {
    check_nonneg("Q", q)?;
    check_nonneg("J", j)?;
    Ok((q + 1.0) * (j + 3.0).ln())
}

/// `c·W·U·ln(W/U)`: VC lower bound for a ReLU network with `W` weights and `U` layers.
pub fn relu_vc_lower_bound(w: f64, u: f64, c: f64) -> Result<f64> {
    domain(u >= 1.0 && w > u && w.is_finite(), || format!("need W > U >= 1, got W={w}, U={u}"))?;
    domain(c > 0.0 && c.is_finite(), || format!("constant must be > 0, got {c}"))?;
    Ok(c * w * u * (w / u).ln())
}

/// Max-margin bound `logZ/m + 8BC·R_m + √(ln ln 4B)/√m + √(ln(2/δ))/√(2m)`.
///
/// Requires `B > e/4` so the iterated logarithm is positive.
pub fn maxmargin_bound(log_z: f64, m: f64, b: f64, c: f64, r_m: f64, delta: f64) -> Result<Breakdown> {
    check_m_delta(m, delta)?;
    check_nonneg("logZ", log_z)?;
    check_nonneg("C", c)?;
    check_nonneg("R_m", r_m)?;
    domain(b.is_finite() && b > std::f64::consts::E / 4.0, || {
        format!("B must exceed e/4 for ln ln(4B) to be positive, got {b}")
    })?;
    Ok(Breakdown::new(vec![
        Term { name: "log_partition", value: log_z / m },
        Term { name: "rademacher", value: 8.0 * b * c * r_m },
        Term { name: "margin_scale", value: (4.0 * b).ln().ln().sqrt() / m.sqrt() },
        Term { name: "confidence", value: (2.0 / delta).ln().sqrt() / (2.0 * m).sqrt() },
    ]))
}

/// Inputs of the diversity-based multi-task bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiversityInputs {
    pub train_err: f64,
    /// Lipschitz constant of the loss.
    pub lipschitz: f64,
    pub nu: f64,
    /// Number of training tasks.
    pub k: f64,
    /// Samples per task.
    pub m: f64,
    /// Loss bound.
    pub c: f64,
    /// Feature norm bound.
    pub d: f64,
    /// Gaussian complexity of the representation class.
    pub gaussian: f64,
    pub delta: f64,
}

/// `err + L²lnK/ν + L·G + (C/ν)√(ln(2/δ)/K) + √(ln(2/δ)/m) + LD/(νK²)`.
pub fn diversity_bound(p: &DiversityInputs) -> Result<Breakdown> {
    check_m_delta(p.m, p.delta)?;
    domain(p.nu > 0.0 && p.nu.is_finite(), || format!("nu must be > 0, got {}", p.nu))?;
    domain(p.k >= 1.0 && p.k.is_finite(), || format!("K must be >= 1, got {}", p.k))?;
    for (name, v) in [
        ("train_err", p.train_err),
        ("L", p.lipschitz),
        ("C", p.c),
        ("D", p.d),
        ("G", p.gaussian),
    ] {
        check_nonneg(name, v)?;
    }
    let log_term = (2.0 / p.delta).ln();
    Ok(Breakdown::new(vec![
        Term { name: "train_error", value: p.train_err },
        Term { name: "task_count", value: p.lipschitz * p.lipschitz * p.k.ln() / p.nu },
        Term { name: "gaussian_complexity", value: p.lipschitz * p.gaussian },
        Term { name: "task_confidence", value: (p.c / p.nu) * (log_term / p.k).sqrt() },
        Term { name: "sample_confidence", value: (log_term / p.m).sqrt() },
        Term { name: "feature_norm", value: p.lipschitz * p.d / (p.nu * p.k * p.k) },
    ]))
}
