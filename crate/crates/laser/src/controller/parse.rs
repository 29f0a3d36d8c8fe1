//! Strict parsing of agent responses.
//!
//! Agents must answer with exactly one fenced code block holding a JSON
//! value. No heuristic repair happens beyond whitespace trimming: zero
//! blocks, multiple blocks, or JSON not matching the schema are errors.

use crate::error::{Error, Result};
use crate::injection::Strategy;

/// What shape of value the caller expects inside the fenced block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseSchema {
    /// JSON array of non-empty strings.
    PromptList,
    /// JSON string.
    SinglePrompt,
    /// JSON string naming an injection strategy, matched case-insensitively.
    StrategyLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedResponse {
    Prompts(Vec<String>),
    Prompt(String),
    Label(Strategy),
}

/// Byte ranges of the contents of every fenced code block in `raw`.
fn fenced_blocks(raw: &str) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None;
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            match open {
                None => open = Some(offset + line.len()),
                Some(start) => {
                    blocks.push((start, offset));
                    open = None;
                }
            }
        }
        offset += line.len();
    }
    blocks
}

pub fn parse_agent_response(raw: &str, schema: ResponseSchema) -> Result<ParsedResponse> {
    let blocks = fenced_blocks(raw);
    let (start, end) = match blocks.len() {
        0 => {
            return Err(Error::Parse {
                message: "no fenced JSON block found".into(),
                offset: raw.len(),
            })
        }
        1 => blocks[0],
        _ => {
            return Err(Error::Parse {
                message: format!("ambiguous response: {} fenced blocks", blocks.len()),
                offset: blocks[1].0,
            })
        }
    };
    let content = raw[start..end].trim();
    let value: serde_json::Value = serde_json::from_str(content).map_err(|e| Error::Parse {
        message: format!("invalid JSON in fenced block: {e}"),
        offset: start,
    })?;

    match schema {
        ResponseSchema::PromptList => {
            let array = value.as_array().ok_or_else(|| Error::Parse {
                message: "expected a JSON array of strings".into(),
                offset: start,
            })?;
            let mut prompts = Vec::with_capacity(array.len());
            for item in array {
                let s = item.as_str().ok_or_else(|| Error::Parse {
                    message: "prompt list items must be strings".into(),
                    offset: start,
                })?;
                if s.trim().is_empty() {
                    return Err(Error::Parse {
                        message: "prompt list items must be non-empty".into(),
                        offset: start,
                    });
                }
                prompts.push(s.trim().to_string());
            }
            Ok(ParsedResponse::Prompts(prompts))
        }
        ResponseSchema::SinglePrompt => {
            let s = value.as_str().ok_or_else(|| Error::Parse {
                message: "expected a JSON string".into(),
                offset: start,
            })?;
            if s.trim().is_empty() {
                return Err(Error::Parse {
                    message: "prompt must be non-empty".into(),
                    offset: start,
                });
            }
            Ok(ParsedResponse::Prompt(s.trim().to_string()))
        }
        ResponseSchema::StrategyLabel => {
            let s = value.as_str().ok_or_else(|| Error::Parse {
                message: "expected a JSON string label".into(),
                offset: start,
            })?;
            let strategy: Strategy = s.trim().parse().map_err(|_| Error::Parse {
                message: format!("unknown strategy label '{s}'"),
                offset: start,
            })?;
            if strategy == Strategy::None {
                return Err(Error::Parse {
                    message: "'None' is not a selectable strategy label".into(),
                    offset: start,
                });
            }
            Ok(ParsedResponse::Label(strategy))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_fenced_prompt_list() {
        let raw = "Sure, here you go:\n```json\n[\"a\", \"b\"]\n```\n";
        let parsed = parse_agent_response(raw, ResponseSchema::PromptList).unwrap();
        assert_eq!(
            parsed,
            ParsedResponse::Prompts(vec!["a".into(), "b".into()])
        );
    }

    #[test]
    fn label_is_case_insensitive() {
        let raw = "rationale: pose change\n```json\n\"kvai\"\n```\n";
        let parsed = parse_agent_response(raw, ResponseSchema::StrategyLabel).unwrap();
        assert_eq!(parsed, ParsedResponse::Label(Strategy::Kvai));
    }

    #[test]
    fn two_fenced_blocks_are_ambiguous() {
        let raw = "```json\n[\"a\"]\n```\nand also\n```json\n[\"b\"]\n```\n";
        let err = parse_agent_response(raw, ResponseSchema::PromptList).unwrap_err();
        match err {
            Error::Parse { message, offset } => {
                assert!(message.contains("ambiguous"), "{message}");
                assert!(offset > 0 && offset < raw.len());
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_block_reports_end_of_input_offset() {
        let raw = "no fences here";
        let err = parse_agent_response(raw, ResponseSchema::SinglePrompt).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, raw.len()),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn schema_violations_are_rejected() {
        let list_as_string = "```json\n\"just a string\"\n```";
        assert!(parse_agent_response(list_as_string, ResponseSchema::PromptList).is_err());
        let empty_item = "```json\n[\"a\", \"\"]\n```";
        assert!(parse_agent_response(empty_item, ResponseSchema::PromptList).is_err());
        let bad_label = "```json\n\"blend-everything\"\n```";
        assert!(parse_agent_response(bad_label, ResponseSchema::StrategyLabel).is_err());
        let none_label = "```json\n\"None\"\n```";
        assert!(parse_agent_response(none_label, ResponseSchema::StrategyLabel).is_err());
        let invalid_json = "```json\n[unquoted]\n```";
        assert!(parse_agent_response(invalid_json, ResponseSchema::PromptList).is_err());
    }
}
