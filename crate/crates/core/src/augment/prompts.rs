//! Versioned prompt templates for the agents.

use std::collections::BTreeMap;

use crate::corpus::InstructionRecord;

pub const PROMPT_VERSION: &str = "v1";

macro_rules! asset {
    ($name:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/prompts/v1/", $name))
    };
}

pub const EXPAND_SYSTEM: &str = asset!("expand_system.txt");
pub const EXPAND_USER: &str = asset!("expand_user.txt");
pub const RESPOND_SYSTEM: &str = asset!("respond_system.txt");
pub const RESPOND_USER: &str = asset!("respond_user.txt");
pub const REWRITE_SYSTEM: &str = asset!("rewrite_system.txt");
pub const REWRITE_USER: &str = asset!("rewrite_user.txt");
pub const REWRITE_COT: &str = asset!("rewrite_cot.txt");
pub const REWRITE_PLAIN: &str = asset!("rewrite_plain.txt");
pub const VERIFY_SYSTEM: &str = asset!("verify_system.txt");
pub const VERIFY_USER: &str = asset!("verify_user.txt");
pub const SCORE_SYSTEM: &str = asset!("score_system.txt");
pub const SCORE_USER: &str = asset!("score_user.txt");
pub const SCORE_REPROMPT: &str = asset!("score_reprompt.txt");

/// Substitutes `{{name}}` placeholders in one pass; values are inserted
/// verbatim and never re-scanned. Unknown placeholders are left as they are.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if vars.contains_key(&after[..end]) => {
                out.push_str(&vars[&after[..end]]);
                rest = &after[end + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub(crate) fn record_vars(record: &InstructionRecord) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("id", record.id.to_string()),
        ("category", record.task_category.as_str().to_string()),
        ("instruction", record.instruction.clone()),
        ("response", record.response.clone()),
    ])
}
