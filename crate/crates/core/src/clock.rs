//! Reference-time accounting.
//!
//! Every unit of work is charged at the cost a calibrated reference profile
//! assigns to it, never at the local wall time it took. Runs with the same
//! reference profile therefore take identical trajectories on any device.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROFILE_VERSION: u32 = 1;
/// Largest relative residual of a linear fit accepted at calibration time.
pub const MAX_FIT_RESIDUAL: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Forward, backward and optimizer update on one mini-batch.
    FullStep,
    /// Forward pass only, used to score examples.
    ForwardOnly,
    /// Extra work of a curvature estimate.
    HessianStep,
}

impl StepKind {
    pub const ALL: [StepKind; 3] = [StepKind::FullStep, StepKind::ForwardOnly, StepKind::HessianStep];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::FullStep => "full_step",
            StepKind::ForwardOnly => "forward_only",
            StepKind::HessianStep => "hessian_step",
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `t(l) = a + b·l` seconds for a step at `l` active layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    pub a: f64,
    pub b: f64,
}

impl CostFit {
    pub fn at(&self, layers: usize) -> f64 {
        self.a + self.b * layers as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            a: self.a * factor,
            b: self.b * factor,
        }
    }

    /// Ordinary least squares over `(layers, seconds)`. A single distinct
    /// layer count gives a zero slope.
    pub fn fit(points: &[(usize, f64)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Calibration("no measurements to fit".into()));
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
        let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        Ok(Self { a: my - b * mx, b })
    }
}

/// Workload a profile was measured on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileDescriptor {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<Workload>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub scalar: String,
    pub batch_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: StepKind,
    pub layers: usize,
    pub mean_seconds: f64,
    pub iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub version: u32,
    pub descriptor: ProfileDescriptor,
    pub full_step: CostFit,
    pub forward_only: CostFit,
    /// Falls back to the full-step fit when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian_step: Option<CostFit>,
    #[serde(default, rename = "measurement", skip_serializing_if = "Vec::is_empty")]
    pub measurements: Vec<Measurement>,
}

impl CalibrationProfile {
    pub fn new(label: impl Into<String>, full_step: CostFit, forward_only: CostFit) -> Self {
        Self {
            version: PROFILE_VERSION,
            descriptor: ProfileDescriptor {
                label: label.into(),
                workload: None,
            },
            full_step,
            forward_only,
            hessian_step: None,
            measurements: Vec::new(),
        }
    }

    pub fn fit_for(&self, kind: StepKind) -> CostFit {
        match kind {
            StepKind::FullStep => self.full_step,
            StepKind::ForwardOnly => self.forward_only,
            StepKind::HessianStep => self.hessian_step.unwrap_or(self.full_step),
        }
    }

    /// Fitted cost, floored at zero so a small negative intercept never
    /// refunds budget.
    pub fn cost(&self, kind: StepKind, layers: usize) -> f64 {
        self.fit_for(kind).at(layers).max(0.0)
    }

    /// Every fit multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            full_step: self.full_step.scaled(factor),
            forward_only: self.forward_only.scaled(factor),
            hessian_step: self.hessian_step.map(|h| h.scaled(factor)),
            measurements: self
                .measurements
                .iter()
                .map(|m| Measurement {
                    mean_seconds: m.mean_seconds * factor,
                    ..*m
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Worst relative gap between a stored measurement and its fit.
    pub fn max_residual(&self) -> f64 {
        self.measurements
            .iter()
            .map(|m| (self.cost(m.kind, m.layers) - m.mean_seconds).abs() / m.mean_seconds.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PROFILE_VERSION {
            return Err(Error::Calibration(format!(
                "profile version {} (expected {PROFILE_VERSION})",
                self.version
            )));
        }
        for kind in StepKind::ALL {
            let fit = self.fit_for(kind);
            if !fit.a.is_finite() || !fit.b.is_finite() || !(fit.at(1) > 0.0) || fit.b < 0.0 {
                return Err(Error::Calibration(format!(
                    "{kind} fit is not a positive, nondecreasing cost: {fit:?}"
                )));
            }
        }
        let r = self.max_residual();
        if r >= MAX_FIT_RESIDUAL {
            return Err(Error::Calibration(format!(
                "linear fit residual {:.1}% exceeds {:.0}%",
                100.0 * r,
                100.0 * MAX_FIT_RESIDUAL
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("profile: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Builds a profile from timings. `measure(kind, layers)` returns the mean
/// seconds of one unit of `kind` work at `layers` active blocks. The Hessian
/// fit is kept only when `measure_hessian` is set.
pub fn calibrate(
    descriptor: ProfileDescriptor,
    layer_counts: &[usize],
    iters: usize,
    measure_hessian: bool,
    mut measure: impl FnMut(StepKind, usize) -> Result<f64>,
) -> Result<CalibrationProfile> {
    if layer_counts.is_empty() || iters == 0 {
        return Err(Error::Calibration(
            "need at least one layer count and one iteration".into(),
        ));
    }
    let mut kinds = vec![StepKind::FullStep, StepKind::ForwardOnly];
    if measure_hessian {
        kinds.push(StepKind::HessianStep);
    }
    let mut measurements = Vec::new();
    for &kind in &kinds {
        for &layers in layer_counts {
            let mean_seconds = measure(kind, layers)?;
            if !(mean_seconds > 0.0) || !mean_seconds.is_finite() {
                return Err(Error::Calibration(format!(
                    "{kind} at {layers} layers measured {mean_seconds}"
                )));
            }
            measurements.push(Measurement {
                kind,
                layers,
                mean_seconds,
                iters,
            });
        }
    }
    let fit = |kind: StepKind| -> Result<CostFit> {
        let pts: Vec<(usize, f64)> = measurements
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| (m.layers, m.mean_seconds))
            .collect();
        CostFit::fit(&pts)
    };
    let profile = CalibrationProfile {
        version: PROFILE_VERSION,
        descriptor,
        full_step: fit(StepKind::FullStep)?,
        forward_only: fit(StepKind::ForwardOnly)?,
        hessian_step: if measure_hessian {
            Some(fit(StepKind::HessianStep)?)
        } else {
            None
        },
        measurements,
    };
    profile.validate().map_err(|e| {
        let e = match e {
            Error::Calibration(m) => m,
            other => other.to_string(),
        };
        let pts: Vec<String> = profile
            .measurements
            .iter()
            .map(|m| format!("{}@{}={:.4e}s", m.kind, m.layers, m.mean_seconds))
            .collect();
        Error::Calibration(format!("{e}; measured {}", pts.join(", ")))
    })?;
    Ok(profile)
}

/// One charge against the budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeEntry {
    /// Optimizer step the work belongs to (1-based).
    pub step: u64,
    pub kind: StepKind,
    pub layers: usize,
    /// Reference cost the work would have been charged if not free.
    pub nominal: f64,
    pub charged: f64,
}

#[derive(Clone, Debug)]
pub struct BudgetClock {
    budget: f64,
    consumed: f64,
    reference: CalibrationProfile,
    device: Option<CalibrationProfile>,
    device_seconds: f64,
    free: BTreeSet<StepKind>,
    ledger: Vec<ChargeEntry>,
}

impl BudgetClock {
    pub fn new(budget: f64, reference: CalibrationProfile) -> Result<Self> {
        if !(budget >= 0.0) || !budget.is_finite() {
            return Err(Error::Config(format!(
                "budget {budget} must be a finite non-negative number"
            )));
        }
        reference.validate()?;
        Ok(Self {
            budget,
            consumed: 0.0,
            reference,
            device: None,
            device_seconds: 0.0,
            free: BTreeSet::new(),
            ledger: Vec::new(),
        })
    }

    /// Local profile used only to project how long the run takes on this device.
    pub fn with_device(mut self, device: CalibrationProfile) -> Result<Self> {
        device.validate()?;
        self.device = Some(device);
        Ok(self)
    }

    /// Work of this kind is still logged but charged zero.
    pub fn make_free(&mut self, kind: StepKind) {
        self.free.insert(kind);
    }

    pub fn is_free(&self, kind: StepKind) -> bool {
        self.free.contains(&kind)
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    pub fn remaining(&self) -> f64 {
        (self.budget - self.consumed).max(0.0)
    }

    pub fn exhausted(&self) -> bool {
        self.consumed >= self.budget
    }

    pub fn reference(&self) -> &CalibrationProfile {
        &self.reference
    }

    pub fn ledger(&self) -> &[ChargeEntry] {
        &self.ledger
    }

    /// Projected local seconds of all work done so far, free work included.
    pub fn device_seconds(&self) -> Option<f64> {
        self.device.as_ref().map(|_| self.device_seconds)
    }

    pub fn cost(&self, kind: StepKind, layers: usize) -> f64 {
        self.reference.cost(kind, layers)
    }

    /// Whether a unit of `kind` work at `layers` blocks fits in the remaining budget.
    pub fn can_afford(&self, kind: StepKind, layers: usize) -> bool {
        self.is_free(kind) || self.cost(kind, layers) <= self.remaining()
    }

    pub fn charge(&mut self, step: u64, kind: StepKind, layers: usize) -> f64 {
        self.charge_scaled(step, kind, layers, 1.0)
    }

    /// Charges `multiplier` units of `kind` work. Returns the amount charged.
    pub fn charge_scaled(&mut self, step: u64, kind: StepKind, layers: usize, multiplier: f64) -> f64 {
        let nominal = self.cost(kind, layers) * multiplier;
        let charged = if self.is_free(kind) { 0.0 } else { nominal };
        self.consumed += charged;
        if let Some(dev) = &self.device {
            self.device_seconds += dev.cost(kind, layers) * multiplier;
        }
        self.ledger.push(ChargeEntry {
            step,
            kind,
            layers,
            nominal,
            charged,
        });
        charged
    }

    /// Consumed fraction of the budget, clamped to 1.
    pub fn progress(&self) -> Result<f64> {
        if self.budget == 0.0 {
            return Err(Error::ZeroBudget);
        }
        Ok((self.consumed / self.budget).min(1.0))
    }
}
