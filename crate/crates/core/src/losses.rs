//! Training objectives. Every loss returns its value together with the exact
//! gradient with respect to the probabilities it was given.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::Pathway;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability margin for shifting negatives.
    pub epsilon: f64,
    /// Stabiliser added inside logarithms.
    pub epsilon0: f64,
    /// Ranking margin for the graph embedding loss.
    pub margin: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { gamma_pos: 0.0, gamma_neg: 4.0, epsilon: 0.05, epsilon0: 1e-8, margin: 1.0 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64, want: &str| Err(Error::Config(format!("train.loss.{field} = {v}: must be {want}")));
        if !(self.gamma_pos >= 0.0 && self.gamma_pos.is_finite()) {
            return bad("gamma_pos", self.gamma_pos, "finite and >= 0");
        }
        if !(self.gamma_neg >= 0.0 && self.gamma_neg.is_finite()) {
            return bad("gamma_neg", self.gamma_neg, "finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon", self.epsilon, "in [0, 1)");
        }
        if !(self.epsilon0 > 0.0 && self.epsilon0.is_finite()) {
            return bad("epsilon0", self.epsilon0, "finite and > 0");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin", self.margin, "finite and > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossValue {
    fn checked(self) -> Result<Self> {
        if self.value.is_finite() && self.gradient.iter().all(|g| g.is_finite()) {
            Ok(self)
        } else {
            Err(Error::Domain(format!("loss evaluated to a non-finite value ({})", self.value)))
        }
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} {p} is not a probability")))
    }
}

fn check_binary(y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("target {y} is not binary")))
    }
}

/// `max(p − ε, 0)`.
pub fn shifted_prob(p: f64, epsilon: f64) -> Result<f64> {
    check_prob(p, "probability")?;
    Ok((p - epsilon).max(0.0))
}

/// `x^γ` and its derivative, with `0^0 = 1` and a zero derivative at γ = 0.
fn pow_and_derivative(x: f64, gamma: f64) -> (f64, f64) {
    if gamma == 0.0 {
        (1.0, 0.0)
    } else {
        (x.powf(gamma), gamma * x.powf(gamma - 1.0))
    }
}

/// Asymmetric multi-label loss averaged over labels.
///
/// The stabiliser sits inside both logarithms, so with both focusing
/// exponents and the shift at zero this is exactly mean binary cross-entropy.
pub fn asl_loss(yhat: &[f64], y: &[f64], p: &LossParams) -> Result<LossValue> {
    if yhat.len() != y.len() {
        return Err(Error::shape(format!("{} targets", yhat.len()), y.len()));
    }
    if yhat.is_empty() {
        return Err(Error::shape("at least one label", 0));
    }
    let m = yhat.len() as f64;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(yhat.len());
    for (&q, &t) in yhat.iter().zip(y) {
        check_prob(q, "prediction")?;
        check_binary(t)?;
        let (mut v, mut g) = (0.0, 0.0);
        if t == 1.0 {
            let (w, dw) = pow_and_derivative(1.0 - q, p.gamma_pos);
            let l = (q + p.epsilon0).ln();
            v += w * l;
            g += -dw * l + w / (q + p.epsilon0);
        } else {
            let shifted = (q - p.epsilon).max(0.0);
            let (w, dw) = pow_and_derivative(shifted, p.gamma_neg);
            let l = (1.0 - shifted + p.epsilon0).ln();
            v += w * l;
            if q > p.epsilon {
                g += dw * l - w / (1.0 - shifted + p.epsilon0);
            }
        }
        value -= v / m;
        gradient.push(-g / m);
    }
    LossValue { value, gradient }.checked()
}

/// Binary cross-entropy of a single probability.
pub fn bce_loss(yhat: f64, y: f64, epsilon0: f64) -> Result<LossValue> {
    check_prob(yhat, "prediction")?;
    check_binary(y)?;
    let value = -(y * (yhat + epsilon0).ln() + (1.0 - y) * (1.0 - yhat + epsilon0).ln());
    let grad = -(y / (yhat + epsilon0)) + (1.0 - y) / (1.0 - yhat + epsilon0);
    LossValue { value, gradient: vec![grad] }.checked()
}

/// Categorical cross-entropy against a one-hot target.
pub fn ce_loss(dist: &[f64], target: &[f64], epsilon0: f64) -> Result<LossValue> {
    if dist.len() != target.len() {
        return Err(Error::shape(format!("{} targets", dist.len()), target.len()));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|&d| !(0.0..=1.0).contains(&d)) {
        return Err(Error::Domain(format!("distribution sums to {sum}, not 1")));
    }
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(dist.len());
    for (&d, &t) in dist.iter().zip(target) {
        value -= t * (d + epsilon0).ln();
        gradient.push(-t / (d + epsilon0));
    }
    LossValue { value, gradient }.checked()
}

/// Selected pathway loss and per-pathway gradients (exact zeros for the
/// pathways not selected).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLoss {
    pub value: f64,
    pub gradients: [Option<Vec<f64>>; 3],
}

/// `δ_M·L_M + δ_V·L_V + δ_T·L_T` for one branch, `losses` ordered (M, V, T).
pub fn level2_loss(losses: [Option<&LossValue>; 3], delta: [f64; 3]) -> Result<GatedLoss> {
    let selected = one_hot_index(&delta)?;
    let chosen = losses[selected].ok_or_else(|| {
        Error::Contract(format!("pathway {} selected but its loss was not computed", Pathway::ALL[selected].name()))
    })?;
    let mut gradients: [Option<Vec<f64>>; 3] = [None, None, None];
    for (k, l) in losses.iter().enumerate() {
        if let Some(l) = l {
            gradients[k] = Some(if k == selected { l.gradient.clone() } else { vec![0.0; l.gradient.len()] });
        }
    }
    Ok(GatedLoss { value: chosen.value, gradients })
}

fn one_hot_index(delta: &[f64; 3]) -> Result<usize> {
    let ones = delta.iter().filter(|&&d| d == 1.0).count();
    let zeros = delta.iter().filter(|&&d| d == 0.0).count();
    if ones != 1 || zeros != 2 {
        return Err(Error::Contract(format!("gate {delta:?} is not one-hot")));
    }
    Ok(delta.iter().position(|&d| d == 1.0).expect("one entry is 1"))
}

/// Hierarchical objective for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallLoss {
    pub value: f64,
    pub level1: f64,
    /// d/d(fiction probability).
    pub level1_grad: f64,
    /// Gradients w.r.t. the fiction and nonfiction Level-2 predictions.
    pub fiction_grad: Option<Vec<f64>>,
    pub nonfiction_grad: Option<Vec<f64>>,
}

impl OverallLoss {
    pub fn level2_active(&self) -> bool {
        [&self.fiction_grad, &self.nonfiction_grad].iter().any(|g| g.as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
    }
}

/// `L1 + y1·gate·L_F + (1 − y1)(1 − gate)·L_N`, with `yhat1` the fiction
/// probability and `class_gate` 1 for a fiction prediction.
///
/// The Level-2 loss of the factor that is zeroed may be absent.
pub fn overall_loss(
    y1: f64,
    yhat1: f64,
    class_gate: f64,
    fiction: Option<&LossValue>,
    nonfiction: Option<&LossValue>,
    epsilon0: f64,
) -> Result<OverallLoss> {
    check_binary(class_gate)?;
    let l1 = bce_loss(yhat1, y1, epsilon0)?;
    let wf = y1 * class_gate;
    let wn = (1.0 - y1) * (1.0 - class_gate);
    let term = |w: f64, l: Option<&LossValue>, name: &str| -> Result<(f64, Option<Vec<f64>>)> {
        match l {
            Some(l) => Ok((w * l.value, Some(l.gradient.iter().map(|g| w * g).collect()))),
            None if w == 0.0 => Ok((0.0, None)),
            None => Err(Error::Contract(format!("{name} Level-2 loss required but absent"))),
        }
    };
    let (vf, fiction_grad) = term(wf, fiction, "fiction")?;
    let (vn, nonfiction_grad) = term(wn, nonfiction, "nonfiction")?;
    Ok(OverallLoss {
        value: l1.value + vf + vn,
        level1: l1.value,
        level1_grad: l1.gradient[0],
        fiction_grad,
        nonfiction_grad,
    })
}

/// `max(Γ + d_pos − d_neg, 0)`; gradient is `[d/d d_pos, d/d d_neg]`.
pub fn margin_ranking_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<LossValue> {
    if !(d_pos >= 0.0 && d_neg >= 0.0) {
        return Err(Error::Domain(format!("negative distance ({d_pos}, {d_neg})")));
    }
    if !(margin > 0.0) {
        return Err(Error::Domain(format!("margin {margin} must be positive")));
    }
    let raw = margin + (d_pos - d_neg);
    let gradient = if raw > 0.0 { vec![1.0, -1.0] } else { vec![0.0, 0.0] };
    LossValue { value: raw.max(0.0), gradient }.checked()
}
