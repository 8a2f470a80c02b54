//! Extracts a [`PolicyAction`] from a free-text model response.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use super::PolicyAction;
use crate::policy::normalize_tir;
use crate::scenario::{RegionSet, Strategy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("response has no refined_solution object")]
    MissingSolution,
    #[error("refined_solution is not valid JSON: {0}")]
    Json(String),
    #[error("unknown or ineligible region {0:?}")]
    UnknownRegion(String),
    #[error("origin {0} is missing from refined_solution")]
    MissingOrigin(String),
    #[error("origin {code}: expected {expected} fractions, found {found}")]
    WrongLength {
        code: String,
        expected: usize,
        found: usize,
    },
    #[error("origin {0}: fractions must be numbers")]
    NotNumeric(String),
    #[error("origin {0}: allocation cannot be repaired")]
    Unrecoverable(String),
    #[error("target_state must name one origin")]
    MissingTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAction {
    pub action: PolicyAction,
    /// Some allocation needed renormalization.
    pub repaired: bool,
}

/// Returns the balanced `{...}` block following `refined_solution`.
fn solution_object(text: &str) -> Option<&str> {
    let at = text.rfind("refined_solution")?;
    let rest = &text[at..];
    let open = rest.find('{')?;
    let body = &rest[open..];
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (k, c) in body.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&body[..=k]);
                }
            }
            _ => {}
        }
    }
    None
}

fn resolve(key: &str, regions: &RegionSet, origins: &[usize]) -> Result<usize, ParseError> {
    let trimmed = key.trim();
    let code = trimmed
        .get(..6)
        .filter(|p| p.eq_ignore_ascii_case("state_"))
        .map_or(trimmed, |_| &trimmed[6..]);
    let idx = regions
        .index_of(code)
        .or_else(|| regions.iter().position(|r| r.name.eq_ignore_ascii_case(code)))
        .ok_or_else(|| ParseError::UnknownRegion(key.to_string()))?;
    if !origins.contains(&idx) {
        return Err(ParseError::UnknownRegion(key.to_string()));
    }
    Ok(idx)
}

/// Parses the `refined_solution` block for `strategy`.
///
/// TIR needs exactly the expected origins, each with `weeks` numbers; the
/// fractions go through [`normalize_tir`]. SIS/TIS need a `target_state`
/// naming one expected origin.
pub fn parse_action(
    text: &str,
    strategy: Strategy,
    origins: &[usize],
    weeks: usize,
    regions: &RegionSet,
) -> Result<ParsedAction, ParseError> {
    let raw = solution_object(text).ok_or(ParseError::MissingSolution)?;
    let value: Value = serde_json::from_str(raw).map_err(|e| ParseError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(ParseError::MissingSolution)?;
    match strategy {
        Strategy::Tir => {
            let mut allocations = BTreeMap::new();
            let mut repaired = false;
            for (key, v) in obj {
                let origin = resolve(key, regions, origins)?;
                let code = regions.code(origin).to_string();
                let arr = v.as_array().ok_or_else(|| ParseError::NotNumeric(code.clone()))?;
                if arr.len() != weeks {
                    return Err(ParseError::WrongLength {
                        code,
                        expected: weeks,
                        found: arr.len(),
                    });
                }
                let fractions = arr
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| ParseError::NotNumeric(code.clone()))?;
                let (alloc, fixed) =
                    normalize_tir(&fractions).map_err(|_| ParseError::Unrecoverable(code))?;
                repaired |= fixed;
                allocations.insert(origin, alloc);
            }
            if let Some(missing) = origins.iter().find(|o| !allocations.contains_key(o)) {
                return Err(ParseError::MissingOrigin(regions.code(*missing).to_string()));
            }
            Ok(ParsedAction {
                action: PolicyAction::Tir { allocations },
                repaired,
            })
        }
        Strategy::Sis | Strategy::Tis => {
            let target = obj
                .get("target_state")
                .and_then(Value::as_str)
                .ok_or(ParseError::MissingTarget)?;
            let origin = resolve(target, regions, origins)?;
            let action = if strategy == Strategy::Sis {
                PolicyAction::Sis { origin }
            } else {
                PolicyAction::Tis { origin }
            };
            Ok(ParsedAction {
                action,
                repaired: false,
            })
        }
    }
}
