//! Experiment configuration: a sectioned `key = value` TOML file in which
//! every key is optional (missing keys take the documented defaults) and
//! unknown keys are hard errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, AggregatorConfig};
use crate::attacks::{AttackConfig, AttackKind, TriggerSpec};
use crate::detector::DetectorVariant;
use crate::error::{Error, Result};
use crate::model::ModelKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub fl: FlSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Training iterations per (restart) segment.
    pub budget: usize,
    /// Evaluate test accuracy into the trace every this many rounds; 0 off.
    pub eval_every: usize,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42, budget: 500, eval_every: 0, out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub csv_path: String,
    pub classes: usize,
    pub features: usize,
    /// Target training examples per client (synthetic source).
    pub per_client: usize,
    /// Degree of non-iid in [1/classes, 1].
    pub degree: f64,
    /// Held-out fraction split off before sharding.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            csv_path: String::new(),
            classes: 10,
            features: 32,
            per_client: 50,
            degree: 0.5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Logistic, hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlSection {
    pub clients: usize,
    pub malicious: usize,
    pub alpha: f64,
    pub aggregator: AggregationRule,
    /// Krum / Trimmed-Mean robustness parameter; resolved to `malicious`
    /// when absent.
    pub byz_param: Option<usize>,
    /// Full-batch gradient steps per client per round.
    pub local_steps: usize,
}

impl Default for FlSection {
    fn default() -> Self {
        Self {
            clients: 100,
            malicious: 28,
            alpha: 1e-3,
            aggregator: AggregationRule::Median,
            byz_param: None,
            local_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub scale_factor: f64,
    pub target_label: usize,
    /// Empty: derived at setup as the last 4 feature indices.
    pub trigger_indices: Vec<usize>,
    /// Empty: derived at setup as the train set's 99th-percentile feature
    /// magnitude.
    pub trigger_values: Vec<f64>,
    pub dba_parts: usize,
    pub alie_z: f64,
    pub adaptive_lambda: f64,
    pub adaptive_base: AttackKind,
    pub adaptive_steps: usize,
    pub adaptive_step_size: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            scale_factor: 1.0,
            target_label: 0,
            trigger_indices: vec![],
            trigger_values: vec![],
            dba_parts: 4,
            alie_z: 1.0,
            adaptive_lambda: 1.0,
            adaptive_base: AttackKind::Scaling,
            adaptive_steps: 50,
            adaptive_step_size: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub enabled: bool,
    pub variant: DetectorVariant,
    /// Window size N for both the difference pairs and the score average.
    pub window: usize,
    /// Maximum cluster count K tried by Gap statistics.
    pub k_max: usize,
    /// Reference sample count B in Gap statistics.
    pub gap_b: usize,
    pub start_iteration: usize,
    pub max_restarts: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: DetectorVariant::FlDetector,
            window: 10,
            k_max: 10,
            gap_b: 20,
            start_iteration: 50,
            max_restarts: 3,
        }
    }
}

impl ExperimentConfig {
    /// Parses, resolves defaults, and validates. Parse errors carry the
    /// offending line; validation errors name the failing constraint.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fills post-default fields so the echoed config is fully concrete.
    fn resolve(&mut self) {
        if self.fl.byz_param.is_none() {
            self.fl.byz_param = Some(self.fl.malicious);
        }
    }

    pub fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig {
            rule: self.fl.aggregator,
            byz_param: self.fl.byz_param.unwrap_or(self.fl.malicious),
        }
    }

    /// Attack configuration shared by all malicious clients; the trigger may
    /// still carry empty index/value lists to be derived from data at world
    /// build.
    pub fn attack(&self) -> AttackConfig {
        let a = &self.attack;
        let base_of = |kind: AttackKind| AttackConfig {
            kind,
            scale_factor: a.scale_factor,
            trigger: TriggerSpec {
                feature_indices: a.trigger_indices.clone(),
                trigger_values: a.trigger_values.clone(),
                parts: a.dba_parts,
            },
            target_label: a.target_label,
            alie_z: a.alie_z,
            adaptive_lambda: a.adaptive_lambda,
            adaptive_base: None,
            adaptive_steps: a.adaptive_steps,
            adaptive_step_size: a.adaptive_step_size,
        };
        let mut cfg = base_of(a.kind);
        if a.kind == AttackKind::Adaptive {
            cfg.adaptive_base = Some(Box::new(base_of(a.adaptive_base)));
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.fl.clients;
        let m = self.fl.malicious;
        let c = self.data.classes;
        let fail = |msg: String| Err(Error::Config(msg));

        if n < 2 {
            return fail(format!("fl.clients must be >= 2, got {n}"));
        }
        if m > n {
            return fail(format!("fl.malicious ({m}) exceeds fl.clients ({n})"));
        }
        if !(self.fl.alpha > 0.0) {
            return fail(format!("fl.alpha must be positive, got {}", self.fl.alpha));
        }
        if self.fl.local_steps == 0 {
            return fail("fl.local_steps must be >= 1".into());
        }
        if self.run.budget == 0 {
            return fail("run.budget must be >= 1".into());
        }
        self.aggregator().validate(n).map_err(|e| Error::Config(e.to_string()))?;

        match self.data.source {
            DataSource::Synthetic => {
                if c < 2 {
                    return fail(format!("data.classes must be >= 2, got {c}"));
                }
                if self.data.features < c {
                    return fail(format!(
                        "data.features ({}) must be >= data.classes ({c})",
                        self.data.features
                    ));
                }
                if n < c {
                    return fail(format!(
                        "fl.clients ({n}) must be >= data.classes ({c}) for the group split"
                    ));
                }
                let lo = 1.0 / c as f64;
                if !(lo - 1e-12..=1.0 + 1e-12).contains(&self.data.degree) {
                    return fail(format!(
                        "data.degree must lie in [1/classes, 1] = [{lo:.4}, 1], got {}",
                        self.data.degree
                    ));
                }
                if self.data.per_client == 0 {
                    return fail("data.per_client must be >= 1".into());
                }
            }
            DataSource::Csv => {
                if self.data.csv_path.is_empty() {
                    return fail("data.source = csv requires data.csv_path".into());
                }
            }
        }
        if !(0.0..0.9).contains(&self.data.test_fraction) {
            return fail(format!(
                "data.test_fraction must lie in [0, 0.9), got {}",
                self.data.test_fraction
            ));
        }

        let a = &self.attack;
        let needs_trigger =
            matches!(a.kind, AttackKind::Scaling | AttackKind::Dba | AttackKind::Alie)
                || (a.kind == AttackKind::Adaptive
                    && matches!(
                        a.adaptive_base,
                        AttackKind::Scaling | AttackKind::Dba | AttackKind::Alie
                    ));
        if needs_trigger {
            if a.target_label >= c && self.data.source == DataSource::Synthetic {
                return fail(format!(
                    "attack.target_label ({}) out of range (classes={c})",
                    a.target_label
                ));
            }
            if a.trigger_indices.len() != a.trigger_values.len() {
                return fail(format!(
                    "attack.trigger_indices ({}) and attack.trigger_values ({}) differ in length",
                    a.trigger_indices.len(),
                    a.trigger_values.len()
                ));
            }
            if self.data.source == DataSource::Synthetic {
                for &i in &a.trigger_indices {
                    if i >= self.data.features {
                        return fail(format!(
                            "attack.trigger_indices entry {i} out of range (features={})",
                            self.data.features
                        ));
                    }
                }
            }
        }
        let dba_active = a.kind == AttackKind::Dba
            || (a.kind == AttackKind::Adaptive && a.adaptive_base == AttackKind::Dba);
        if dba_active {
            if a.dba_parts == 0 {
                return fail("attack.dba_parts must be >= 1".into());
            }
            // m = 0 leaves any attack a no-op, so only a nonempty cohort is
            // checked against the split count
            if m > 0 && a.dba_parts > m {
                return fail(format!(
                    "attack.dba_parts ({}) exceeds fl.malicious ({m})",
                    a.dba_parts
                ));
            }
        }
        let alie_active = a.kind == AttackKind::Alie
            || (a.kind == AttackKind::Adaptive && a.adaptive_base == AttackKind::Alie);
        if alie_active && m == 1 {
            return fail("A-Little-Is-Enough needs a cohort of >= 2 malicious clients".into());
        }
        if a.kind == AttackKind::Adaptive {
            if !(a.adaptive_lambda > 0.0 && a.adaptive_lambda <= 1.0) {
                return fail(format!(
                    "attack.adaptive_lambda must lie in (0, 1], got {}",
                    a.adaptive_lambda
                ));
            }
            if a.adaptive_base == AttackKind::Adaptive || a.adaptive_base == AttackKind::None {
                return fail(format!(
                    "attack.adaptive_base must be a concrete base attack, got {:?}",
                    a.adaptive_base
                ));
            }
        }
        if a.scale_factor < 0.0 {
            return fail(format!("attack.scale_factor must be >= 0, got {}", a.scale_factor));
        }
        if a.alie_z < 0.0 {
            return fail(format!("attack.alie_z must be >= 0, got {}", a.alie_z));
        }

        let d = &self.detector;
        if d.window == 0 {
            return fail("detector.window must be >= 1".into());
        }
        if d.k_max < 2 {
            return fail(format!("detector.k_max must be >= 2, got {}", d.k_max));
        }
        if d.gap_b == 0 {
            return fail("detector.gap_b must be >= 1".into());
        }
        Ok(())
    }
}
