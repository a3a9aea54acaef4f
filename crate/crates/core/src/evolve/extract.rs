//! Pulling a candidate program out of a free-text reply.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{PolicyProgram, ProgramMode};

static FENCED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{reason}")]
pub struct ExtractionFailure {
    pub reason: String,
    pub raw_reply: String,
}

fn start_keyword(mode: ProgramMode) -> &'static str {
    match mode {
        ProgramMode::BuiltinRules => "if ",
        _ => "def decide_power",
    }
}

/// Longest run of lines that starts at a keyword line. Blank lines are kept
/// only when the next non-blank line is indented.
fn keyword_block(reply: &str, keyword: &str) -> Option<String> {
    let lines: Vec<&str> = reply.lines().collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < lines.len() {
        if !lines[i].trim_start().starts_with(keyword) {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i + 1;
        while end < lines.len() {
            let line = lines[end];
            if line.trim().is_empty() {
                let next = lines[end..].iter().find(|l| !l.trim().is_empty());
                if next.is_some_and(|l| l.starts_with(char::is_whitespace)) {
                    end += 1;
                    continue;
                }
                break;
            }
            end += 1;
        }
        if best.is_none_or(|(s, e)| end - start > e - s) {
            best = Some((start, end));
        }
        i = end;
    }
    best.map(|(s, e)| lines[s..e].join("\n"))
}

/// First fenced code block, or failing that the longest block that starts
/// with the program's leading keyword.
pub fn extract_program(reply: &str, mode: ProgramMode, name: &str) -> Result<PolicyProgram, ExtractionFailure> {
    let fail = |reason: &str| ExtractionFailure { reason: reason.to_string(), raw_reply: reply.to_string() };
    let source = match FENCED.captures(reply) {
        Some(c) => c[1].to_string(),
        None => keyword_block(reply, start_keyword(mode)).ok_or_else(|| fail("reply contains no code block"))?,
    };
    let source = source.trim_end().to_string();
    if source.trim().is_empty() {
        return Err(fail("code block is empty"));
    }
    Ok(PolicyProgram { name: name.to_string(), source_text: source + "\n", mode, metadata: Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    const RULES: ProgramMode = ProgramMode::BuiltinRules;

    #[test]
    fn single_fenced_block() {
        let reply = "Here you go:\n```rules\nif soc < 0.2 then 7\nelse 0\n```\nThanks.";
        let p = extract_program(reply, RULES, "c").unwrap();
        assert_eq!(p.source_text, "if soc < 0.2 then 7\nelse 0\n");
        assert_eq!(p.mode, RULES);
    }

    #[test]
    fn first_of_two_blocks() {
        let reply = "```\nif soc < 0.3 then 7\n```\nor maybe\n```\nelse 0\n```";
        assert_eq!(extract_program(reply, RULES, "c").unwrap().source_text, "if soc < 0.3 then 7\n");
    }

    #[test]
    fn prose_only_fails_with_raw_reply() {
        let err = extract_program("I would charge when cheap.", RULES, "c").unwrap_err();
        assert_eq!(err.raw_reply, "I would charge when cheap.");
        assert!(err.reason.contains("no code block"));
        assert!(extract_program("```\n\n```", RULES, "c").is_err());
    }

    #[test]
    fn unfenced_python_function() {
        let reply = "Sure.\n\ndef decide_power(charge_price, discharge_price, soc, ttd,\n                 load_kw, pv_kw, max_charge_kw, max_discharge_kw):\n    if soc < 0.2:\n        return max_charge_kw\n\n    return 0.0\n\nThis charges when low.";
        let p = extract_program(reply, ProgramMode::ExternalProcess, "c").unwrap();
        assert!(p.source_text.starts_with("def decide_power("));
        assert!(p.source_text.ends_with("    return 0.0\n"));
        assert!(!p.source_text.contains("charges when low"));
    }

    #[test]
    fn unfenced_rules_pick_longest_block() {
        let reply = "if x then y is how I think.\n\nif soc < 0.2 then 7\nif discharge_price >= 0.35 then -7\nelse 0\n\nDone.";
        let p = extract_program(reply, RULES, "c").unwrap();
        assert_eq!(p.source_text, "if soc < 0.2 then 7\nif discharge_price >= 0.35 then -7\nelse 0\n");
    }
}
