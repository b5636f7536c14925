//! Plain-text policy weights.
//!
//! ```text
//! hcapo-params 1
//! state_count 6
//! vocab_size 6
//! max_action_len 2
//! contexts prior+hindsight
//! weights 2016
//! 0e0
//! -1.6094379124341003e0
//! ...
//! ```
//!
//! Weights follow in `(state, context, prefix, token)` order, one per line,
//! in a shortest round-trip representation.

use std::fmt::Write as _;

use hcapo_core::policy::{PolicyLayout, PolicyParams};

use crate::IoError;

const MAGIC: &str = "hcapo-params";
const VERSION: u32 = 1;
const CONTEXTS: &str = "prior+hindsight";

pub fn to_text(params: &PolicyParams) -> String {
    let l = params.layout();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "state_count {}", l.state_count());
    let _ = writeln!(out, "vocab_size {}", l.vocab_size());
    let _ = writeln!(out, "max_action_len {}", l.max_action_len());
    let _ = writeln!(out, "contexts {CONTEXTS}");
    let _ = writeln!(out, "weights {}", params.weights().len());
    for w in params.weights() {
        let _ = writeln!(out, "{w:e}");
    }
    out
}

fn bad(line: usize, message: impl Into<String>) -> IoError {
    IoError::Format { line, message: message.into() }
}

fn header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> Result<&'a str, IoError> {
    let (n, line) = lines.next().ok_or_else(|| bad(0, format!("missing `{key}` line")))?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.trim()),
        _ => Err(bad(n, format!("expected `{key} <value>`"))),
    }
}

fn number(line: usize, v: &str) -> Result<usize, IoError> {
    v.parse().map_err(|_| bad(line, format!("`{v}` is not a non-negative integer")))
}

pub fn from_text(text: &str) -> Result<PolicyParams, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let version = header(&mut lines, MAGIC)?;
    if version != VERSION.to_string() {
        return Err(bad(1, format!("unsupported version {version}")));
    }
    let states = number(2, header(&mut lines, "state_count")?)?;
    let vocab = number(3, header(&mut lines, "vocab_size")?)?;
    let len = number(4, header(&mut lines, "max_action_len")?)?;
    let contexts = header(&mut lines, "contexts")?;
    if contexts != CONTEXTS {
        return Err(bad(5, format!("unsupported context layout `{contexts}`")));
    }
    let count = number(6, header(&mut lines, "weights")?)?;
    let layout = PolicyLayout::new(states, vocab, len)?;
    if count != layout.weight_count() {
        return Err(bad(6, format!("layout needs {} weights, header says {count}", layout.weight_count())));
    }
    let mut weights = Vec::with_capacity(count);
    for (n, line) in lines {
        let w: f64 = line.trim().parse().map_err(|_| bad(n, format!("`{}` is not a number", line.trim())))?;
        weights.push(w);
    }
    if weights.len() != count {
        return Err(bad(0, format!("expected {count} weights, found {}", weights.len())));
    }
    Ok(PolicyParams::from_weights(layout, weights)?)
}
