//! Prompt rendering. All template text lives in versioned data files under
//! `data/templates/<version>/`; this module only fills their `{slot}`s.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::values::{ValueDef, ValueSystem};

pub const TEMPLATE_VERSION: &str = "v1";

/// Number of labeled examples shown to the generator in one ICL prompt.
pub const ICL_SLATE_SIZE: usize = 8;

const DETECTOR: &str = include_str!("../data/templates/v1/detector_instruction.txt");
const FINAL: &str = include_str!("../data/templates/v1/final_identify.txt");
const FINAL_COT: &str = include_str!("../data/templates/v1/final_identify_cot.txt");
const EXPLANATION: &str = include_str!("../data/templates/v1/explanation_gen.txt");
const ICL: &str = include_str!("../data/templates/v1/icl_datagen.txt");
const TARGETED: &str = include_str!("../data/templates/v1/targeted_datagen.txt");
const REFLECTION: &str = include_str!("../data/templates/v1/reflection.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("input text is empty")]
    EmptyText,
    #[error("{0} needs at least one value")]
    NoValues(&'static str),
    #[error("ICL generation needs exactly {expected} examples, got {got}")]
    WrongExampleCount { expected: usize, got: usize },
    #[error("template slot {{{0}}} was not supplied")]
    MissingSlot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DetectorInstruction,
    FinalIdentify,
    FinalIdentifyCot,
    ExplanationGen,
    IclDatagen,
    TargetedDatagen,
    Reflection,
    BaselineBatch,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::DetectorInstruction,
        PromptKind::FinalIdentify,
        PromptKind::FinalIdentifyCot,
        PromptKind::ExplanationGen,
        PromptKind::IclDatagen,
        PromptKind::TargetedDatagen,
        PromptKind::Reflection,
        PromptKind::BaselineBatch,
    ];

    /// Baseline batches reuse the final-identification template; the CoT
    /// variant is picked by the caller's flag.
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::DetectorInstruction => DETECTOR,
            PromptKind::FinalIdentify | PromptKind::BaselineBatch => FINAL,
            PromptKind::FinalIdentifyCot => FINAL_COT,
            PromptKind::ExplanationGen => EXPLANATION,
            PromptKind::IclDatagen => ICL,
            PromptKind::TargetedDatagen => TARGETED,
            PromptKind::Reflection => REFLECTION,
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::DetectorInstruction => &["value_count", "value_roster", "input_text"],
            PromptKind::FinalIdentify
            | PromptKind::FinalIdentifyCot
            | PromptKind::BaselineBatch => &["value_definitions", "input_text"],
            PromptKind::ExplanationGen => &["value_name", "definition", "input_text"],
            PromptKind::IclDatagen => &["examples", "next_index"],
            PromptKind::TargetedDatagen => &["value_definitions"],
            PromptKind::Reflection => &["value_name", "definition"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFamily {
    pub kind: PromptKind,
    pub template_version: &'static str,
}

impl PromptFamily {
    pub fn current(kind: PromptKind) -> Self {
        Self {
            kind,
            template_version: TEMPLATE_VERSION,
        }
    }
}

fn is_slot_char(c: u8) -> bool {
    c.is_ascii_lowercase() || c == b'_'
}

/// Replaces each `{name}` (lowercase letters and underscores) with its value.
/// Other braces pass through untouched, and substituted values are never
/// rescanned.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> Result<String, PromptError> {
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len() + 256);
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut end = start;
            while end < bytes.len() && is_slot_char(bytes[end]) {
                end += 1;
            }
            if end > start && end < bytes.len() && bytes[end] == b'}' {
                let name = &template[start..end];
                let value = slots
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::MissingSlot(name.to_string()))?;
                out.push_str(&template[copied..i]);
                out.push_str(value);
                i = end + 1;
                copied = i;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&template[copied..]);
    Ok(out.trim_end().to_string())
}

fn check_text(text: &str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::EmptyText)
    } else {
        Ok(())
    }
}

fn value_definitions<'a>(values: impl IntoIterator<Item = &'a ValueDef>) -> String {
    values
        .into_iter()
        .map(|v| format!("{}, Definition: {}", v.name, v.definition))
        .collect::<Vec<_>>()
        .join("\n        ")
}

/// `(1) Name. Explanation: text;` entries, the detector's output format.
pub fn format_numbered_entries<N: AsRef<str>, E: AsRef<str>>(
    entries: &[(N, E)],
    separator: &str,
) -> String {
    entries
        .iter()
        .enumerate()
        .map(|(k, (name, expl))| {
            format!(
                "({}) {}. Explanation: {};",
                k + 1,
                name.as_ref(),
                expl.as_ref()
            )
        })
        .collect::<Vec<_>>()
        .join(separator)
}

/// Alpaca-format instruction prompt for the local detector. Lists value
/// names only, in system order.
pub fn render_detector_prompt(system: &ValueSystem, text: &str) -> Result<String, PromptError> {
    check_text(text)?;
    let roster = system
        .names()
        .map(|n| format!("'{n}'"))
        .collect::<Vec<_>>()
        .join(", ");
    let count = system.len().to_string();
    let mut prompt = fill(
        DETECTOR,
        &[
            ("value_count", &count),
            ("value_roster", &roster),
            ("input_text", text),
        ],
    )?;
    prompt.push('\n');
    Ok(prompt)
}

/// Sections of a rendered Alpaca-format prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlpacaSections {
    pub instruction: String,
    pub input: String,
    pub response: String,
}

pub fn split_alpaca(rendered: &str) -> Option<AlpacaSections> {
    const INSTRUCTION: &str = "### Instruction:\n";
    const INPUT: &str = "\n\n### Input:\n";
    const RESPONSE: &str = "\n\n### Response:";
    let a = rendered.find(INSTRUCTION)? + INSTRUCTION.len();
    let b = a + rendered[a..].find(INPUT)?;
    let c = b + INPUT.len();
    let d = c + rendered[c..].find(RESPONSE)?;
    Some(AlpacaSections {
        instruction: rendered[a..b].trim().to_string(),
        input: rendered[c..d].trim().to_string(),
        response: rendered[d + RESPONSE.len()..].trim().to_string(),
    })
}

/// The instruction block of the detector prompt, as used in training records.
pub fn detector_instruction(system: &ValueSystem) -> String {
    let rendered = render_detector_prompt(system, "-").expect("placeholder text is nonempty");
    split_alpaca(&rendered)
        .expect("detector template has alpaca sections")
        .instruction
}

/// Final-identification prompt carrying only the candidate definitions.
pub fn render_final_prompt(
    candidates: &[ValueDef],
    text: &str,
    cot: bool,
) -> Result<String, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::NoValues("final identification"));
    }
    check_text(text)?;
    let template = if cot { FINAL_COT } else { FINAL };
    let defs = value_definitions(candidates);
    fill(
        template,
        &[("value_definitions", &defs), ("input_text", text)],
    )
}

/// Baseline batches use the final-identification template unchanged.
pub fn render_baseline_prompt(
    values: &[ValueDef],
    text: &str,
    cot: bool,
) -> Result<String, PromptError> {
    if values.is_empty() {
        return Err(PromptError::NoValues("baseline batch"));
    }
    render_final_prompt(values, text, cot)
}

pub fn render_explanation_prompt(value: &ValueDef, text: &str) -> Result<String, PromptError> {
    check_text(text)?;
    fill(
        EXPLANATION,
        &[
            ("value_name", &value.name),
            ("definition", &value.definition),
            ("input_text", text),
        ],
    )
}

/// A labeled, explained data point shown to the ICL generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclExample {
    pub text: String,
    /// (value name, explanation) in system order.
    pub entries: Vec<(String, String)>,
}

impl IclExample {
    pub fn line(&self, index: usize) -> String {
        format!(
            "DATA {index}: {} - {}",
            self.text,
            format_numbered_entries(&self.entries, " ")
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DatagenPayload<'a> {
    Icl(&'a [IclExample]),
    Targeted(&'a [ValueDef]),
}

pub fn render_datagen_prompt(payload: DatagenPayload<'_>) -> Result<String, PromptError> {
    match payload {
        DatagenPayload::Icl(examples) => {
            if examples.len() != ICL_SLATE_SIZE {
                return Err(PromptError::WrongExampleCount {
                    expected: ICL_SLATE_SIZE,
                    got: examples.len(),
                });
            }
            let body = examples
                .iter()
                .enumerate()
                .map(|(k, e)| e.line(k + 1))
                .collect::<Vec<_>>()
                .join("\n");
            let next = (examples.len() + 1).to_string();
            fill(ICL, &[("examples", &body), ("next_index", &next)])
        }
        DatagenPayload::Targeted(targets) => {
            if targets.is_empty() {
                return Err(PromptError::NoValues("targeted generation"));
            }
            fill(
                TARGETED,
                &[("value_definitions", &value_definitions(targets))],
            )
        }
    }
}

/// (instruction, input, output) triple asking for a value's definition.
pub fn render_reflection_record(value: &ValueDef) -> AlpacaSections {
    let rendered = fill(
        REFLECTION,
        &[
            ("value_name", &value.name),
            ("definition", &value.definition),
        ],
    )
    .expect("reflection slots supplied");
    split_alpaca(&rendered).expect("reflection template has alpaca sections")
}
