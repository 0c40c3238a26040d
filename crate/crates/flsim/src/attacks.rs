//! Malicious-client update crafting: sign-flip, the Scaling backdoor, the
//! Distributed Backdoor Attack, A-Little-Is-Enough clamping, and an adaptive
//! variant that trades attack strength against staying close to the update a
//! consistency detector would predict.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::hvp::HistoryWindow;
use crate::linalg::ParamVector;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    SignFlip,
    Scaling,
    Dba,
    Alie,
    Adaptive,
}

/// Fixed feature-pattern trigger. `parts` splits the index set into
/// contiguous chunks for the distributed variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub feature_indices: Vec<usize>,
    pub trigger_values: Vec<f64>,
    pub parts: usize,
}

impl TriggerSpec {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.feature_indices.len() != self.trigger_values.len() {
            return Err(Error::InvalidParameter(format!(
                "trigger has {} indices but {} values",
                self.feature_indices.len(),
                self.trigger_values.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.feature_indices {
            if i >= feature_dim {
                return Err(Error::InvalidParameter(format!(
                    "trigger index {i} out of range (feature_dim={feature_dim})"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidParameter(format!("duplicate trigger index {i}")));
            }
        }
        if self.parts == 0 {
            return Err(Error::InvalidParameter("trigger parts must be positive".into()));
        }
        Ok(())
    }

    /// Contiguous index chunk owned by `part`.
    pub fn chunk(&self, part: usize) -> Result<(&[usize], &[f64])> {
        if part >= self.parts {
            return Err(Error::InvalidParameter(format!(
                "trigger part {part} out of range (parts={})",
                self.parts
            )));
        }
        let len = self.feature_indices.len();
        let size = len.div_ceil(self.parts);
        let start = (part * size).min(len);
        let end = ((part + 1) * size).min(len);
        Ok((&self.feature_indices[start..end], &self.trigger_values[start..end]))
    }
}

/// Per-client attack configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Scaling/DBA amplification factor gamma.
    pub scale_factor: f64,
    pub trigger: TriggerSpec,
    pub target_label: usize,
    /// Clamp width in cohort standard deviations.
    pub alie_z: f64,
    /// Tradeoff weight in (0, 1]; 1 recovers the base attack exactly.
    pub adaptive_lambda: f64,
    pub adaptive_base: Option<Box<AttackConfig>>,
    pub adaptive_steps: usize,
    pub adaptive_step_size: f64,
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            scale_factor: 1.0,
            trigger: TriggerSpec { feature_indices: vec![], trigger_values: vec![], parts: 1 },
            target_label: 0,
            alie_z: 1.0,
            adaptive_lambda: 1.0,
            adaptive_base: None,
            adaptive_steps: 50,
            adaptive_step_size: 0.1,
        }
    }
}

/// Untargeted poisoning: report the reversed true update.
pub fn sign_flip(true_update: &ParamVector) -> ParamVector {
    true_update.scale(-1.0)
}

/// Writes the trigger values into a copy of `x`. With `part` given, only the
/// part-th contiguous chunk of the index set is written.
pub fn embed_trigger(x: &[f64], spec: &TriggerSpec, part: Option<usize>) -> Result<Vec<f64>> {
    let (indices, values) = match part {
        Some(p) => spec.chunk(p)?,
        None => (&spec.feature_indices[..], &spec.trigger_values[..]),
    };
    let mut out = x.to_vec();
    for (&i, &v) in indices.iter().zip(values) {
        if i >= out.len() {
            return Err(Error::InvalidParameter(format!(
                "trigger index {i} out of range (input dim {})",
                out.len()
            )));
        }
        out[i] = v;
    }
    Ok(out)
}

/// Shard augmented with a trigger-embedded, target-relabeled duplicate of
/// every local example (duplication ratio 1:1).
pub fn backdoor_augment(
    shard: &Dataset,
    spec: &TriggerSpec,
    part: Option<usize>,
    target_label: usize,
) -> Result<Dataset> {
    if target_label >= shard.num_classes {
        return Err(Error::InvalidParameter(format!(
            "target label {target_label} out of range (classes={})",
            shard.num_classes
        )));
    }
    let mut examples = shard.examples.clone();
    for ex in &shard.examples {
        examples.push(Example {
            features: embed_trigger(&ex.features, spec, part)?,
            label: target_label,
        });
    }
    Dataset::new(examples, shard.num_classes, shard.feature_dim)
}

/// Scaling backdoor: local update on the backdoor-augmented shard, amplified
/// by gamma.
pub fn scaling_attack(
    model: &Model,
    w_t: &ParamVector,
    shard: &Dataset,
    cfg: &AttackConfig,
) -> Result<ParamVector> {
    let augmented = backdoor_augment(shard, &cfg.trigger, None, cfg.target_label)?;
    let update = model.local_update(w_t, &augmented)?;
    Ok(update.scale(cfg.scale_factor))
}

/// Distributed backdoor: like [`scaling_attack`] but the client embeds only
/// its group's chunk of the trigger pattern.
pub fn dba_attack(
    model: &Model,
    w_t: &ParamVector,
    shard: &Dataset,
    cfg: &AttackConfig,
    group: usize,
) -> Result<ParamVector> {
    if group >= cfg.trigger.parts {
        return Err(Error::InvalidParameter(format!(
            "DBA group {group} out of range (parts={})",
            cfg.trigger.parts
        )));
    }
    let augmented = backdoor_augment(shard, &cfg.trigger, Some(group), cfg.target_label)?;
    let update = model.local_update(w_t, &augmented)?;
    Ok(update.scale(cfg.scale_factor))
}

/// A-Little-Is-Enough clamp: per-coordinate cohort mean and population
/// standard deviation define the band [mu - z*sigma, mu + z*sigma]; the raw
/// crafted update is clipped into it.
pub fn alie_clamp(
    cohort_updates: &[ParamVector],
    raw: &ParamVector,
    z: f64,
) -> Result<ParamVector> {
    if cohort_updates.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "ALIE needs a cohort of at least 2 updates, got {}",
            cohort_updates.len()
        )));
    }
    if z < 0.0 {
        return Err(Error::InvalidParameter(format!("ALIE z must be >= 0, got {z}")));
    }
    let dim = raw.dim();
    for u in cohort_updates {
        if u.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: u.dim() });
        }
    }
    let n = cohort_updates.len() as f64;
    let mut out = Vec::with_capacity(dim);
    for c in 0..dim {
        let mean = cohort_updates.iter().map(|u| u.as_slice()[c]).sum::<f64>() / n;
        let var = cohort_updates
            .iter()
            .map(|u| (u.as_slice()[c] - mean).powi(2))
            .sum::<f64>()
            / n;
        let half = z * var.sqrt();
        out.push(raw.as_slice()[c].clamp(mean - half, mean + half));
    }
    Ok(ParamVector::from_raw(out))
}

/// Rolling state a malicious client keeps for the adaptive attack: a
/// difference window approximating the server's Hessian estimate from the
/// client's own dataset (pairs of global steps and the induced changes in
/// its true local gradient), plus the update it sent last round, which is
/// what the server anchors its prediction on.
#[derive(Debug, Clone)]
pub struct AdaptiveState {
    pub window: HistoryWindow,
    pub prev_sent: Option<ParamVector>,
    prev_true_gradient: Option<ParamVector>,
}

impl AdaptiveState {
    pub fn new(window_size: usize, dim: usize) -> Self {
        Self {
            window: HistoryWindow::new(window_size, dim),
            prev_sent: None,
            prev_true_gradient: None,
        }
    }

    /// The update the detector would predict for this client: last sent
    /// update plus the client-side Hessian estimate applied to the global
    /// step. Falls back to the last sent update while the window is empty or
    /// degenerate.
    pub fn predict(&self, global_step: &ParamVector) -> Option<ParamVector> {
        let prev = self.prev_sent.as_ref()?;
        match self.window.hvp(global_step) {
            Ok(correction) => prev.add(&correction).ok(),
            Err(_) => Some(prev.clone()),
        }
    }

    /// Records this round's observations: the global step, the client's true
    /// local gradient at the current model (whose differences feed the
    /// Hessian window), and the update actually sent.
    pub fn record(
        &mut self,
        global_step: Option<&ParamVector>,
        true_gradient: &ParamVector,
        sent: &ParamVector,
    ) {
        if let (Some(dw), Some(prev_g)) = (global_step, self.prev_true_gradient.as_ref()) {
            if let Ok(dg) = true_gradient.sub(prev_g) {
                let _ = self.window.push_pair(dw.clone(), dg);
            }
        }
        self.prev_true_gradient = Some(true_gradient.clone());
        self.prev_sent = Some(sent.clone());
    }

    pub fn clear(&mut self) {
        self.window.clear();
        self.prev_sent = None;
        self.prev_true_gradient = None;
    }
}

/// Gradient descent on the composite objective
///
/// ```text
/// F(g) = lambda * ||g - base||^2 + (1 - lambda) * ||g - predicted||^2
/// ```
///
/// starting from the base attack's update. lambda = 1 returns the base
/// update bit-identically; lambda -> 0 converges to the predicted update.
pub fn adaptive_refine(
    base: &ParamVector,
    predicted: &ParamVector,
    lambda: f64,
    steps: usize,
    step_size: f64,
) -> Result<ParamVector> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "adaptive lambda must lie in (0, 1], got {lambda}"
        )));
    }
    if base.dim() != predicted.dim() {
        return Err(Error::DimensionMismatch { expected: base.dim(), got: predicted.dim() });
    }
    let mut g = base.clone();
    for _ in 0..steps {
        // grad F = 2 lambda (g - base) + 2 (1-lambda) (g - predicted)
        let mut grad = g.sub(base)?.scale(2.0 * lambda);
        grad.axpy_in_place(2.0 * (1.0 - lambda), &g.sub(predicted)?)?;
        g.axpy_in_place(-step_size, &grad)?;
    }
    Ok(g)
}

/// Composite objective value, used by tests and by callers that audit the
/// tradeoff.
pub fn adaptive_objective(
    g: &ParamVector,
    base: &ParamVector,
    predicted: &ParamVector,
    lambda: f64,
) -> Result<f64> {
    let a = g.sub(base)?.l2();
    let b = g.sub(predicted)?.l2();
    Ok(lambda * a * a + (1.0 - lambda) * b * b)
}
