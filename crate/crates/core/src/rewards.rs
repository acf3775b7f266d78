//! Verifiable rewards computed from finished episodes.
//!
//! A stage's total is the weighted sum of four components minus a step
//! penalty, clamped into `[0, 1]`:
//!
//! | stage | correct | tool | format | xml | lambda |
//! |-------|---------|------|--------|-----|--------|
//! | 1     | 0.4     | 0.2  | 0.2    | 0.2 | 0.05   |
//! | 2, 3  | 0.9     | 0    | 0      | 0.1 | 0.05   |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QaSample;
use crate::protocol::xml_report;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("invalid stage weights: {0}")]
    InvalidWeights(String),
    #[error("cannot read weights file {path}: {detail}")]
    WeightsFile { path: String, detail: String },
}

/// Lowercase, drop punctuation, drop standalone articles, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !is_punctuation(*c)).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{00BF}' | '\u{00A1}')
}

pub fn correctness(final_answer: Option<&str>, gold: &str, aliases: &[String]) -> f64 {
    let Some(answer) = final_answer else {
        return 0.0;
    };
    let answer = normalize_answer(answer);
    let hit = std::iter::once(gold)
        .chain(aliases.iter().map(String::as_str))
        .any(|g| normalize_answer(g) == answer);
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Everything the reward functions need from an episode record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RewardInputs {
    pub final_answer: Option<String>,
    pub tool_calls_total: usize,
    pub tool_calls_failed: usize,
    pub policy_turns: usize,
    pub clean_turns: usize,
    pub final_turn_text: String,
}

pub fn tool_execution_score(inputs: &RewardInputs) -> f64 {
    if inputs.tool_calls_total == 0 {
        return 0.0;
    }
    let ok = inputs.tool_calls_total.saturating_sub(inputs.tool_calls_failed);
    ok as f64 / inputs.tool_calls_total as f64
}

pub fn format_adherence_score(inputs: &RewardInputs) -> f64 {
    if inputs.policy_turns == 0 {
        return 1.0;
    }
    inputs.clean_turns as f64 / inputs.policy_turns as f64
}

pub fn xml_compliance_score(final_turn_text: &str) -> f64 {
    let r = xml_report(final_turn_text);
    if r.well_formed && r.open_tags_balanced && r.answer_count == 1 {
        1.0
    } else if r.well_formed {
        0.5
    } else {
        0.0
    }
}

/// `lambda * max(0, calls - 2 * hops)`: one search plus one scrape per hop
/// is free.
pub fn step_penalty(tool_calls_total: usize, hop_count: u8, penalty_lambda: f64) -> f64 {
    let free = 2 * usize::from(hop_count);
    penalty_lambda * tool_calls_total.saturating_sub(free) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub stage: u8,
    pub w_correct: f64,
    pub w_tool: f64,
    pub w_format: f64,
    pub w_xml: f64,
    pub penalty_lambda: f64,
}

pub const DEFAULT_PENALTY_LAMBDA: f64 = 0.05;

impl StageWeights {
    pub fn for_stage(stage: u8) -> Result<Self, RewardError> {
        match stage {
            1 => Ok(Self {
                stage,
                w_correct: 0.4,
                w_tool: 0.2,
                w_format: 0.2,
                w_xml: 0.2,
                penalty_lambda: DEFAULT_PENALTY_LAMBDA,
            }),
            2 | 3 => Ok(Self {
                stage,
                w_correct: 0.9,
                w_tool: 0.0,
                w_format: 0.0,
                w_xml: 0.1,
                penalty_lambda: DEFAULT_PENALTY_LAMBDA,
            }),
            _ => Err(RewardError::InvalidWeights(format!("stage {stage} not in 1..=3"))),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(1..=3).contains(&self.stage) {
            return Err(RewardError::InvalidWeights(format!("stage {} not in 1..=3", self.stage)));
        }
        let all = [self.w_correct, self.w_tool, self.w_format, self.w_xml, self.penalty_lambda];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        let sum = self.w_correct + self.w_tool + self.w_format + self.w_xml;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidWeights(format!("component weights sum to {sum}, not 1")));
        }
        if self.stage >= 2 && (self.w_tool != 0.0 || self.w_format != 0.0) {
            return Err(RewardError::InvalidWeights(format!(
                "stage {} carries no tool or format reward",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RewardError> {
        let path = path.as_ref();
        let err = |detail: String| RewardError::WeightsFile {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let w: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correctness: f64,
    pub tool_execution: f64,
    pub format_adherence: f64,
    pub xml_compliance: f64,
    pub step_penalty: f64,
    pub total: f64,
}

pub fn stage_reward(inputs: &RewardInputs, sample: &QaSample, weights: &StageWeights) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    let correctness = correctness(inputs.final_answer.as_deref(), &sample.gold_answer, &sample.answer_aliases);
    let tool_execution = tool_execution_score(inputs);
    let format_adherence = format_adherence_score(inputs);
    let xml_compliance = xml_compliance_score(&inputs.final_turn_text);
    let step_penalty = step_penalty(inputs.tool_calls_total, sample.hop_count, weights.penalty_lambda);
    let weighted = weights.w_correct * correctness
        + weights.w_tool * tool_execution
        + weights.w_format * format_adherence
        + weights.w_xml * xml_compliance;
    // float error can leave a perfect score a hair above 1
    let total = (weighted - step_penalty).clamp(0.0, 1.0);
    Ok(RewardBreakdown {
        correctness,
        tool_execution,
        format_adherence,
        xml_compliance,
        step_penalty,
        total,
    })
}
