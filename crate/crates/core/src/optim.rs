//! AdamW, Lion and Sophia-G parameter updates, plus the GNB Hessian estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::model::{LayerPlan, ModelParams, record_logits};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, softmax_rows};

/// Floor applied to the RMS when scaling a learning rate per tensor.
pub const RMS_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Lion,
    Sophia,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Sophia clipping threshold.
    pub rho: f64,
    /// Sophia Hessian refresh interval.
    pub hessian_interval: u64,
    pub rms_scaling: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptHyper {
    fn default() -> Self {
        Self::adamw()
    }
}

impl OptHyper {
    pub fn adamw() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-12,
            weight_decay: 0.01,
            rho: 0.01,
            hessian_interval: 10,
            rms_scaling: false,
            grad_clip: Some(0.5),
        }
    }

    pub fn lion() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.1,
            ..Self::adamw()
        }
    }

    pub fn sophia() -> Self {
        Self {
            beta1: 0.965,
            beta2: 0.99,
            weight_decay: 0.015,
            rho: 0.01,
            hessian_interval: 10,
            ..Self::adamw()
        }
    }

    pub fn for_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adamw => Self::adamw(),
            OptimizerKind::Lion => Self::lion(),
            OptimizerKind::Sophia => Self::sophia(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.rho > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps and rho must be positive, weight decay non-negative".into(),
            ));
        }
        if self.hessian_interval == 0 {
            return Err(Error::Config("hessian interval must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip
            && !(c > 0.0)
        {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Moment buffers mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub m: ParamTree<Tensor<S>>,
    /// AdamW second moment.
    pub v: Option<ParamTree<Tensor<S>>>,
    /// Sophia Hessian-diagonal EMA.
    pub h: Option<ParamTree<Tensor<S>>>,
    /// Number of completed steps.
    pub step: u64,
    pub last_hessian_step: Option<u64>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, params: &ParamTree<Tensor<S>>) -> Self {
        let zeros = || params.map(|t| Tensor::zeros(t.shape()));
        Self {
            kind,
            m: zeros(),
            v: (kind == OptimizerKind::Adamw).then(zeros),
            h: (kind == OptimizerKind::Sophia).then(zeros),
            step: 0,
            last_hessian_step: None,
        }
    }

    pub fn stacked(&self) -> Self {
        Self {
            kind: self.kind,
            m: self.m.stacked(),
            v: self.v.as_ref().map(ParamTree::stacked),
            h: self.h.as_ref().map(ParamTree::stacked),
            step: self.step,
            last_hessian_step: self.last_hessian_step,
        }
    }

    /// Whether the step about to run (`step + 1`) refreshes the Hessian:
    /// `t mod k == 1`, read as `(t - 1) mod k == 0` so that `k = 1` refreshes
    /// every step.
    pub fn hessian_due(&self, interval: u64) -> bool {
        self.step.is_multiple_of(interval.max(1))
    }
}

/// `base_lr · max(RMS(tensor), 1e-3)`
pub fn rms_scale_lr<S: Scalar>(base_lr: f64, tensor: &Tensor<S>) -> f64 {
    base_lr * tensor.rms().as_f64().max(RMS_FLOOR)
}

fn tensor_lr<S: Scalar>(hyper: &OptHyper, lr: f64, t: &Tensor<S>) -> f64 {
    if hyper.rms_scaling { rms_scale_lr(lr, t) } else { lr }
}

fn check_shapes<S: Scalar>(params: &ParamTree<Tensor<S>>, other: &ParamTree<Tensor<S>>, what: &str) -> Result<()> {
    if params.len() != other.len() || params.iter().zip(other.iter()).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::shape(
            "optimizer",
            format!("{what} do not match parameter shapes"),
        ));
    }
    Ok(())
}

fn check_finite<S: Scalar>(grads: &ParamTree<Tensor<S>>, step: u64) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NumericInstability {
            step,
            detail: "non-finite gradient".into(),
        })
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<S: Scalar>(grads: &ParamTree<Tensor<S>>) -> f64 {
    grads.iter().map(|t| t.sum_squares().as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut ParamTree<Tensor<S>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let f = S::of(max_norm / norm);
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= f);
        }
    }
    norm
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Decoupled-weight-decay Adam step with bias correction.
pub fn adamw_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut ParamTree<Tensor<S>>,
    grads: &ParamTree<Tensor<S>>,
    hyper: &OptHyper,
    lr: f64,
) -> Result<()> {
    check_shapes(params, grads, "gradients")?;
    check_finite(grads, state.step + 1)?;
    let v = state
        .v
        .as_mut()
        .ok_or_else(|| Error::Contract("AdamW step needs second-moment buffers".into()))?;
    let t = state.step + 1;
    let (b1, b2) = (S::of(hyper.beta1), S::of(hyper.beta2));
    let bc1 = S::of(1.0 - hyper.beta1.powi(t as i32));
    let bc2 = S::of(1.0 - hyper.beta2.powi(t as i32));
    let (eps, wd) = (S::of(hyper.eps), S::of(hyper.weight_decay));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(v.iter_mut())
    {
        let lr = S::of(tensor_lr(hyper, lr, p));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * wd * *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Sign-momentum update with decoupled weight decay folded into the update.
pub fn lion_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut ParamTree<Tensor<S>>,
    grads: &ParamTree<Tensor<S>>,
    hyper: &OptHyper,
    lr: f64,
) -> Result<()> {
    check_shapes(params, grads, "gradients")?;
    check_finite(grads, state.step + 1)?;
    let (b1, b2, wd) = (S::of(hyper.beta1), S::of(hyper.beta2), S::of(hyper.weight_decay));
    for ((p, g), m) in params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut()) {
        let lr = S::of(tensor_lr(hyper, lr, p));
        for ((pi, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
            let u = sign(b1 * *mi + (S::one() - b1) * gi);
            *pi = *pi - lr * (u + wd * *pi);
            *mi = b2 * *mi + (S::one() - b2) * gi;
        }
    }
    state.step += 1;
    Ok(())
}

/// Clipped diagonal-Newton step. `fresh_hessian` must be supplied exactly on
/// refresh steps ([`OptimizerState::hessian_due`]).
pub fn sophia_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut ParamTree<Tensor<S>>,
    grads: &ParamTree<Tensor<S>>,
    hyper: &OptHyper,
    lr: f64,
    fresh_hessian: Option<&ParamTree<Tensor<S>>>,
) -> Result<()> {
    check_shapes(params, grads, "gradients")?;
    let due = state.hessian_due(hyper.hessian_interval);
    match (due, fresh_hessian.is_some()) {
        (true, false) => {
            return Err(Error::Contract(format!(
                "step {} refreshes the Hessian but no estimate was given",
                state.step + 1
            )));
        }
        (false, true) => {
            return Err(Error::Contract(format!(
                "step {} is not a Hessian refresh step",
                state.step + 1
            )));
        }
        _ => {}
    }
    if let Some(fh) = fresh_hessian {
        check_shapes(params, fh, "Hessian estimates")?;
        check_finite(fh, state.step + 1)?;
    }
    check_finite(grads, state.step + 1)?;
    let h = state
        .h
        .as_mut()
        .ok_or_else(|| Error::Contract("Sophia step needs Hessian buffers".into()))?;
    let (b1, b2) = (S::of(hyper.beta1), S::of(hyper.beta2));
    let (eps, rho, wd) = (S::of(hyper.eps), S::of(hyper.rho), S::of(hyper.weight_decay));

    if let Some(fh) = fresh_hessian {
        for (hi, fi) in h.iter_mut().zip(fh.iter()) {
            for (a, &b) in hi.data_mut().iter_mut().zip(fi.data()) {
                *a = b2 * *a + (S::one() - b2) * b;
            }
        }
    }
    for (((p, g), m), hv) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(h.iter())
    {
        let lr = S::of(tensor_lr(hyper, lr, p));
        for (((pi, &gi), mi), &hi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(hv.data()) {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *pi = *pi - lr * wd * *pi;
            let ratio = *mi / hi.max(eps);
            *pi -= lr * ratio.max(-rho).min(rho);
        }
    }
    state.step += 1;
    if due {
        state.last_hessian_step = Some(state.step);
    }
    Ok(())
}

/// Dispatches to the update rule of `state.kind`.
pub fn optimizer_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    params: &mut ParamTree<Tensor<S>>,
    grads: &ParamTree<Tensor<S>>,
    hyper: &OptHyper,
    lr: f64,
    fresh_hessian: Option<&ParamTree<Tensor<S>>>,
) -> Result<()> {
    match state.kind {
        OptimizerKind::Adamw => adamw_step(state, params, grads, hyper, lr),
        OptimizerKind::Lion => lion_step(state, params, grads, hyper, lr),
        OptimizerKind::Sophia => sophia_step(state, params, grads, hyper, lr, fresh_hessian),
    }
}

/// Draws a label from each masked row's predictive distribution.
pub fn sample_labels<S: Scalar, R: Rng>(logits: &Tensor<S>, mask: &[bool], rng: &mut R) -> Vec<usize> {
    let v = logits.last_dim();
    let probs = softmax_rows(logits.data(), v);
    probs
        .chunks(v)
        .zip(mask)
        .map(|(row, &m)| {
            if !m {
                return 0;
            }
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p.as_f64();
                if u < acc {
                    return j;
                }
            }
            v - 1
        })
        .collect()
}

/// Gauss-Newton-Bartlett diagonal estimate: gradient `ĝ` of the cross-entropy
/// against labels sampled from the model itself, returned as `B · ĝ²` with `B`
/// the number of masked positions.
pub fn gnb_estimate<S: Scalar, R: Rng>(
    params: &ModelParams<S>,
    batch: &MaskedBatch,
    rng: &mut R,
) -> Result<ParamTree<Tensor<S>>> {
    let count = batch.masked_count();
    if count == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let plan = LayerPlan::all(params.num_blocks());
    crate::model::check_batch(params, batch, &plan)?;
    let mut tape = crate::autodiff::Tape::new();
    let logits = record_logits(&mut tape, params, batch, &plan)?;
    let sampled = sample_labels(tape.value(logits), &batch.mask, rng);
    let loss = tape.masked_cross_entropy(logits, &sampled, &batch.mask)?;
    let grads = tape.backward(loss)?;
    let b = S::of(count as f64);
    params
        .tensors
        .with_layout_of(grads.into_map().into_values().map(|g| g.map(|x| b * x * x)))
        .ok_or_else(|| Error::Contract("gradient count does not match parameter count".into()))
}
