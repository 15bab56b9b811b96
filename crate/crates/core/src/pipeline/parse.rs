//! Reply parsing: clue extraction from JSON-ish replies and code extraction
//! from fenced blocks.

use serde_json::Value;

pub const DONE_MARKER: &str = "DONE";

/// Collapses all whitespace runs to single spaces so a clue is one line.
pub fn normalize_clue(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The reply signals a finished plan.
pub fn is_done(reply: &str) -> bool {
    let t = reply.trim().trim_end_matches(['.', '!']);
    t == DONE_MARKER || extract_clue(reply, None).is_some_and(|c| c.trim() == DONE_MARKER)
}

fn clue_in(value: &Value, step: Option<usize>) -> Option<String> {
    match value {
        Value::Array(items) => {
            let mut any = None;
            for v in items {
                if let Some((exact, text)) = clue_in_object(v, step) {
                    if exact {
                        return Some(text);
                    }
                    any.get_or_insert(text);
                }
            }
            any
        }
        v => clue_in_object(v, step).map(|(_, t)| t),
    }
}

fn clue_in_object(value: &Value, step: Option<usize>) -> Option<(bool, String)> {
    let obj = value.as_object()?;
    let wanted = step.map(|s| format!("Clue of Step {s}"));
    let mut any = None;
    for (k, v) in obj {
        let Some(text) = v.as_str().map(str::trim).filter(|t| !t.is_empty()) else {
            continue;
        };
        if wanted.as_deref() == Some(k.as_str()) {
            return Some((true, text.to_string()));
        }
        if k.starts_with("Clue of Step") {
            any.get_or_insert((step.is_none(), text.to_string()));
        }
    }
    any
}

/// Finds the first JSON list or object holding a `Clue of Step N` key,
/// ignoring any prose around it. An exact step match beats any other key.
pub fn extract_clue(reply: &str, step: Option<usize>) -> Option<String> {
    let mut fallback = None;
    for (i, c) in reply.char_indices() {
        if c != '[' && c != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&reply[i..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if let Some(text) = clue_in(&value, step) {
                let exact = step.is_none_or(|s| has_key(&value, &format!("Clue of Step {s}")));
                if exact {
                    return Some(text);
                }
                fallback.get_or_insert(text);
            }
        }
    }
    fallback
}

fn has_key(value: &Value, key: &str) -> bool {
    match value {
        Value::Array(items) => items.iter().any(|v| has_key(v, key)),
        Value::Object(o) => o.contains_key(key),
        _ => false,
    }
}

/// Clue text of a branch continuation that began inside the opened JSON
/// string `prefill`.
pub fn path_clue(prefill: &str, continuation: &str, step: usize) -> Option<String> {
    let joined = format!("{prefill}{continuation}");
    if let Some(c) = extract_clue(&joined, Some(step)) {
        return Some(c);
    }
    for close in ["\"}]", "}]", "]"] {
        if let Some(c) = extract_clue(&format!("{joined}{close}"), Some(step)) {
            return Some(c);
        }
    }
    // raw text up to the first unescaped quote
    let mut end = continuation.len();
    let mut escaped = false;
    for (i, ch) in continuation.char_indices() {
        match ch {
            '\\' if !escaped => escaped = true,
            '"' if !escaped => {
                end = i;
                break;
            }
            _ => escaped = false,
        }
    }
    let raw = continuation[..end].trim();
    (!raw.is_empty()).then(|| raw.to_string())
}

/// Contents of the first fenced block, or the whole reply when it has no
/// fence. `None` when nothing but whitespace remains.
pub fn extract_code(reply: &str) -> Option<String> {
    let code = match reply.find("```") {
        Some(open) => {
            let after = &reply[open + 3..];
            // skip the info string up to the end of the fence line
            let body = match after.find('\n') {
                Some(nl) => &after[nl + 1..],
                None => "",
            };
            match body.find("```") {
                Some(close) => &body[..close],
                None => body,
            }
        }
        None => reply,
    };
    (!code.trim().is_empty()).then(|| code.to_string())
}
