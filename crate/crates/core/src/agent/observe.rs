//! Observation text shaping.

pub const DEFAULT_HEAD_LIMIT: usize = 2000;
pub const DEFAULT_TAIL_LIMIT: usize = 2000;

fn marker(omitted: usize) -> String {
    format!("\n…[{omitted} chars omitted]…\n")
}

/// Whether `text` already has the shape `truncate` produces for these limits.
fn is_truncated(chars: &[char], head: usize, tail: usize) -> bool {
    if chars.len() < head + tail {
        return false;
    }
    let middle: String = chars[head..chars.len() - tail].iter().collect();
    let Some(count) = middle
        .strip_prefix("\n…[")
        .and_then(|m| m.strip_suffix(" chars omitted]…\n"))
    else {
        return false;
    };
    !count.is_empty()
        && count.chars().all(|c| c.is_ascii_digit())
        && count.parse::<usize>().is_ok_and(|n| n > 0)
}

/// Keeps the first `head` and last `tail` characters of `text`.
pub fn truncate(text: &str, head: usize, tail: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() <= head + tail || is_truncated(&chars, head, tail) {
        return text.to_string();
    }
    let omitted = chars.len() - head - tail;
    let mut out: String = chars[..head].iter().collect();
    out.push_str(&marker(omitted));
    out.extend(&chars[chars.len() - tail..]);
    out
}
