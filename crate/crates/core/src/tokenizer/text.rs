//! Text normalization, sentence segmentation and corpus loading.

use std::fs;
use std::ops::Range;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC, whitespace runs collapsed to one space, other control characters
/// removed, ends trimmed.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Byte spans of the sentences in `text`.
///
/// A sentence ends at `.`, `!` or `?` followed by whitespace or the end of
/// input, and keeps its terminator. A trailing unterminated fragment is a
/// sentence too. Spans exclude surrounding whitespace.
pub fn segment_sentences(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_non_ws = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let s = *start.get_or_insert(i);
        last_non_ws = i + c.len_utf8();
        let at_boundary = chars.peek().is_none_or(|&(_, next)| next.is_whitespace());
        if is_terminator(c) && at_boundary {
            spans.push(s..last_non_ws);
            start = None;
        }
    }
    if let Some(s) = start {
        spans.push(s..last_non_ws);
    }
    spans
}

pub fn sentences(text: &str) -> Vec<&str> {
    segment_sentences(text).into_iter().map(|r| &text[r]).collect()
}

/// Loads documents from a directory of `.txt` files (sorted by file name) or
/// from a `.jsonl` file with a `"text"` field per line. Every document is
/// normalized; documents that normalize to nothing are dropped.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let raw = if meta.is_dir() {
        load_txt_dir(path)?
    } else {
        load_jsonl(path)?
    };
    let docs: Vec<String> = raw
        .iter()
        .map(|d| normalize(d))
        .filter(|d| !d.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::Data(format!("no documents in {}", path.display())));
    }
    Ok(docs)
}

fn load_txt_dir(dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "txt") {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    files
        .iter()
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .collect()
}

fn load_jsonl(path: &Path) -> Result<Vec<String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| err("missing string field \"text\"".into()))?;
        docs.push(text.to_owned());
    }
    Ok(docs)
}
