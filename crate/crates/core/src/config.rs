//! Run configuration: one JSON document drives every stage, with dotted-path
//! `key=value` overrides layered on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CompError, Result};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Sum,
    Mean,
}

/// How regression scores are turned into binary sentiment labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeRule {
    /// negative (< 0) vs non-negative (>= 0)
    NegNonneg,
}

impl BinarizeRule {
    pub fn apply(self, score: f64) -> usize {
        match self {
            BinarizeRule::NegNonneg => usize::from(score >= 0.0),
        }
    }
}

/// Component toggles matching the four ablation columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// knowledge propagation
    pub kp: bool,
    /// prompt generation
    pub pg: bool,
    /// coordinator
    pub cr: bool,
    /// gradient modulation
    pub gm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Ablation {
    pub const fn all_on() -> Self {
        Self {
            kp: true,
            pg: true,
            cr: true,
            gm: true,
        }
    }

    pub const fn all_off() -> Self {
        Self {
            kp: false,
            pg: false,
            cr: false,
            gm: false,
        }
    }

    /// Parse a comma separated list of components to disable.
    pub fn with_off(mut self, list: &str) -> Result<Self> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "kp" => self.kp = false,
                "pg" => self.pg = false,
                "cr" => self.cr = false,
                "gm" => self.gm = false,
                other => {
                    return Err(CompError::Config(format!("unknown component `{other}`")))
                }
            }
        }
        Ok(self)
    }

    /// Compact label such as `KP+PG+Cr+GM` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.kp, "KP"),
            (self.pg, "PG"),
            (self.cr, "Cr"),
            (self.gm, "GM"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    /// Human readable notes about flag combinations that leave a component
    /// with nothing to act on.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.kp && self.pg {
            out.push("pg is on but kp is off: generated prompts have no consumer".to_string());
        }
        if !self.kp && self.gm {
            out.push("gm is on but kp is off: there are no prototype weights to modulate".to_string());
        } else if !self.pg && self.gm {
            out.push("gm is on but pg is off: there are no prototype weights to modulate".to_string());
        }
        out
    }

    /// The eight component rows of the ablation table, in table order.
    pub fn table_rows() -> Vec<Ablation> {
        let row = |kp, pg, cr, gm| Ablation { kp, pg, cr, gm };
        vec![
            row(false, false, false, false),
            row(true, false, false, false),
            row(true, true, false, false),
            row(true, true, true, false),
            row(false, true, true, true),
            row(true, false, true, true),
            row(true, true, false, true),
            row(true, true, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// shared latent width
    pub d: usize,
    /// prototype count
    pub c: usize,
    /// prompt width
    pub p: usize,
    /// number of knowledge-propagation blocks
    #[serde(rename = "L")]
    pub blocks: usize,
    /// self-attention layers per block
    pub m_msa: usize,
    pub heads: usize,
    /// momentum coefficient for prompt blending
    pub lambda: f64,
    pub mask_neg: f64,
    /// denominator guard for modulation weights
    pub eps: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub dropout_pg: f64,
    pub separate_error_head: bool,
    pub loss_reduction: LossReduction,
    pub binarize_rule: BinarizeRule,
    pub aux_task_weight: f64,

    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_n: usize,
    /// stage-1 learning rate
    pub eta: f64,
    pub eta_stage2: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub freeze_encoders: bool,
    pub mr: f64,
    pub test_fraction: f64,
    pub ablation: Ablation,
    /// Force every modulation weight to 1 while keeping the hook active.
    pub force_neutral_modulation: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            d: 128,
            c: 16,
            p: 32,
            blocks: 3,
            m_msa: 2,
            heads: 4,
            lambda: 0.5,
            mask_neg: -1e9,
            eps: 1e-8,
            w_min: 0.0,
            w_max: 1.0,
            dropout_pg: 0.1,
            separate_error_head: false,
            loss_reduction: LossReduction::Mean,
            binarize_rule: BinarizeRule::NegNonneg,
            aux_task_weight: 0.3,
            epochs_stage1: 50,
            epochs_stage2: 50,
            batch_n: 32,
            eta: 1e-3,
            eta_stage2: 5e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            freeze_encoders: false,
            mr: 0.0,
            test_fraction: 0.3,
            ablation: Ablation::all_on(),
            force_neutral_modulation: false,
        }
    }
}

impl Config {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| CompError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CompError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply a `dotted.key=value` override. Values parse as JSON when
    /// possible and fall back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CompError::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut cursor = &mut doc;
        let path: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in path.iter().enumerate() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| CompError::Config(format!("`{key}` does not name a config field")))?;
            if !obj.contains_key(*part) {
                return Err(CompError::Config(format!("unknown config key `{key}`")));
            }
            if i + 1 == path.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            cursor = obj.get_mut(*part).unwrap();
        }
        *self = serde_json::from_value(doc)
            .map_err(|e| CompError::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CompError::Config(m));
        if self.batch_n < 2 {
            return fail(format!("batch_n must be at least 2, got {}", self.batch_n));
        }
        if self.d == 0 || self.c == 0 {
            return fail("d and c must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout_pg) {
            return fail(format!("dropout_pg must lie in [0, 1), got {}", self.dropout_pg));
        }
        if self.w_min > self.w_max {
            return fail("w_min exceeds w_max".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if !(self.eta > 0.0 && self.eta_stage2 > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.aux_task_weight < 0.0 {
            return fail("aux_task_weight must be non-negative".into());
        }
        Ok(())
    }
}
