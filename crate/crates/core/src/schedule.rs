//! Learning-rate and layer-dropping schedules indexed by budget progress.
//!
//! Progress is the consumed fraction of the reference-time budget, so every
//! schedule reaches its terminal value exactly when the budget runs out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    OneCycle,
    CosineWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Peak (one-cycle) or base (cosine) learning rate.
    pub peak_lr: f64,
    #[serde(default)]
    pub final_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

fn default_warmup() -> f64 {
    0.05
}

impl ScheduleSpec {
    pub fn one_cycle(peak_lr: f64) -> Self {
        Self {
            kind: ScheduleKind::OneCycle,
            peak_lr,
            final_lr: 0.0,
            warmup_fraction: default_warmup(),
        }
    }

    pub fn cosine_warmup(base_lr: f64, final_lr: f64, warmup_fraction: f64) -> Self {
        Self {
            kind: ScheduleKind::CosineWarmup,
            peak_lr: base_lr,
            final_lr,
            warmup_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !(self.final_lr >= 0.0) || self.final_lr > self.peak_lr {
            return Err(Error::Config("need 0 <= final_lr <= peak_lr and peak_lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Same shape with every learning rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            peak_lr: self.peak_lr * factor,
            final_lr: self.final_lr * factor,
            ..*self
        }
    }
}

pub fn lr_at(spec: &ScheduleSpec, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Contract(format!("progress {progress} outside [0, 1]")));
    }
    let lr = match spec.kind {
        ScheduleKind::OneCycle => {
            if progress <= 0.5 {
                spec.peak_lr * (progress / 0.5)
            } else {
                spec.peak_lr * ((1.0 - progress) / 0.5)
            }
        }
        ScheduleKind::CosineWarmup => {
            let w = spec.warmup_fraction;
            if progress < w {
                spec.peak_lr * progress / w
            } else if progress == 1.0 {
                spec.final_lr
            } else {
                let t = (progress - w) / (1.0 - w);
                spec.final_lr + (spec.peak_lr - spec.final_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    };
    Ok(lr)
}

/// Layer-dropping hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSchedule {
    /// Asymptotic layer keep probability.
    pub alpha_bar: f64,
    /// Temperature budget; `γ = γ_f / T`.
    pub gamma_f: f64,
}

impl Default for DropSchedule {
    fn default() -> Self {
        Self {
            alpha_bar: 0.5,
            gamma_f: 100.0,
        }
    }
}

impl DropSchedule {
    /// The encoder-decoder preset (`γ_f = 20`, paired with a halved learning rate).
    pub fn t5_preset() -> Self {
        Self {
            alpha_bar: 0.5,
            gamma_f: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_bar > 0.0 && self.alpha_bar <= 1.0) || !(self.gamma_f > 0.0) {
            return Err(Error::Config("need alpha_bar in (0, 1] and gamma_f > 0".into()));
        }
        Ok(())
    }
}

/// Keep probabilities for `layers` blocks at the given progress:
/// `α = (1-ᾱ)·exp(-γ_f·progress) + ᾱ`, `p_d = (1-α)/L`, `p_i = 1 - i·p_d`.
pub fn drop_keep_probs(sched: &DropSchedule, layers: usize, progress: f64) -> Vec<f64> {
    let alpha = (1.0 - sched.alpha_bar) * (-sched.gamma_f * progress).exp() + sched.alpha_bar;
    if layers == 0 {
        return Vec::new();
    }
    let decay = (1.0 - alpha) / layers as f64;
    let mut p = 1.0;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        out.push(p);
        p -= decay;
    }
    out
}

/// Independent Bernoulli keep draw per block; kept blocks carry scale `1/p`.
pub fn sample_layer_plan<R: Rng>(probs: &[f64], rng: &mut R) -> LayerPlan {
    let mut keep = Vec::with_capacity(probs.len());
    let mut scale = Vec::with_capacity(probs.len());
    for &p in probs {
        let kept = rng.random::<f64>() < p;
        keep.push(kept);
        scale.push(if kept { 1.0 / p } else { 1.0 });
    }
    LayerPlan { keep, scale }
}

/// Reference-time instants at which to double the model.
pub fn stacking_points(budget_rst: f64, fractions: &[f64]) -> Result<Vec<f64>> {
    if fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "stacking fractions {fractions:?} must be strictly increasing in (0, 1)"
        )));
    }
    Ok(fractions.iter().map(|f| f * budget_rst).collect())
}
