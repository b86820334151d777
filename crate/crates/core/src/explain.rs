//! Probability of success from Q-values.
//!
//! For a continuing task the Q-value is normalised by the largest reward a
//! single step can yield, `R^S`:
//!
//! ```text
//! P̂s = ½ · log10(Q / R^S) + 1,   clamped to [0, 1]
//! ```
//!
//! so `Q = R^S` maps to 1 and `Q = R^S / 100` maps to 0. Non-positive Q-values
//! map to 0.

use serde::{Deserialize, Serialize};

use crate::env::ACTION_NAMES;
use crate::error::{Error, Result};

pub fn probability_of_success(q: f64, r_s: f64) -> Result<f64> {
    if !(r_s > 0.0) || !r_s.is_finite() {
        return Err(Error::Argument(format!("R^S must be positive and finite, got {r_s}")));
    }
    Ok(raw_probability(q, r_s).clamp(0.0, 1.0))
}

/// Unclamped transform; `-inf` for non-positive or NaN `q`.
fn raw_probability(q: f64, r_s: f64) -> f64 {
    if !(q > 0.0) {
        return f64::NEG_INFINITY;
    }
    0.5 * (q / r_s).log10() + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsMode {
    /// Fixed `r_step_max`.
    Static,
    /// Running maximum of observed step rewards.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionConfig {
    pub r_step_max: f64,
    pub mode: RsMode,
    pub include_bonus_in_rs: bool,
}

impl IntrospectionConfig {
    pub fn fixed(r_step_max: f64) -> Self {
        IntrospectionConfig { r_step_max, mode: RsMode::Static, include_bonus_in_rs: false }
    }

    pub fn adaptive() -> Self {
        IntrospectionConfig { r_step_max: 0.0, mode: RsMode::Adaptive, include_bonus_in_rs: false }
    }
}

/// Raise the running `R^S` of an adaptive config.
pub fn adaptive_update(config: &IntrospectionConfig, step_reward: f64) -> Result<IntrospectionConfig> {
    if config.mode != RsMode::Adaptive {
        return Err(Error::State("adaptive_update called on a static introspection config".into()));
    }
    Ok(IntrospectionConfig { r_step_max: config.r_step_max.max(step_reward), ..*config })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub step_index: u64,
    pub q_values: Vec<f64>,
    pub ps_values: Vec<f64>,
    pub clamped_low: Vec<bool>,
    pub clamped_high: Vec<bool>,
    pub chosen_action: usize,
    pub r_s_used: f64,
    pub rendered_text: String,
}

pub fn action_name(action: usize) -> &'static str {
    ACTION_NAMES.get(action).copied().unwrap_or("unknown action")
}

/// Fixed sentence template; the wording is this crate's own.
pub fn render_text(action: usize, ps: f64) -> String {
    format!(
        "Action {} chosen with an estimated {:.1}% probability of success",
        action_name(action),
        ps * 100.0
    )
}

pub fn explain(q_values: &[f64], config: &IntrospectionConfig, chosen: usize, step: u64) -> Result<ExplanationRecord> {
    if q_values.is_empty() {
        return Err(Error::Argument("no Q-values to explain".into()));
    }
    if chosen >= q_values.len() {
        return Err(Error::Argument(format!("chosen action {chosen} outside 0..{}", q_values.len())));
    }
    let r_s = config.r_step_max;
    let mut ps_values = Vec::with_capacity(q_values.len());
    let mut clamped_low = Vec::with_capacity(q_values.len());
    let mut clamped_high = Vec::with_capacity(q_values.len());
    for &q in q_values {
        let ps = probability_of_success(q, r_s)?;
        let raw = raw_probability(q, r_s);
        ps_values.push(ps);
        clamped_low.push(raw < 0.0);
        clamped_high.push(raw > 1.0);
    }
    let rendered_text = render_text(chosen, ps_values[chosen]);
    Ok(ExplanationRecord {
        step_index: step,
        q_values: q_values.to_vec(),
        ps_values,
        clamped_low,
        clamped_high,
        chosen_action: chosen,
        r_s_used: r_s,
        rendered_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub action_a: usize,
    pub action_b: usize,
    pub delta_ps: f64,
}

/// How much more likely `a` is to succeed than `b`.
pub fn contrast(record: &ExplanationRecord, a: usize, b: usize) -> Result<ContrastResult> {
    let n = record.ps_values.len();
    if a >= n || b >= n {
        return Err(Error::Argument(format!("contrast indices ({a}, {b}) outside 0..{n}")));
    }
    Ok(ContrastResult { action_a: a, action_b: b, delta_ps: record.ps_values[a] - record.ps_values[b] })
}
