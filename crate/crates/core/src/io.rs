// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSONL and TSV helpers. Every writer goes through [`write_atomic`].

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::container::write_atomic;
use crate::error::{Error, Result};

/// One JSON object per line, `\n`-terminated.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_text(path)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// `lang<TAB>text` lines.
pub fn parse_labeled_tsv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Parse(format!("line {}: expected `lang<TAB>text`", i + 1)))
        })
        .collect()
}

pub fn to_labeled_tsv(rows: &[(String, String)]) -> String {
    rows.iter().map(|(l, t)| format!("{l}\t{t}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let v = vec![serde_json::json!({"a": 1}), serde_json::json!({"a": 2})];
        let s = to_jsonl(&v).unwrap();
        assert_eq!(parse_jsonl::<serde_json::Value>(&s).unwrap(), v);
        let err = parse_jsonl::<serde_json::Value>("{}\n{oops\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn tsv_round_trip() {
        let rows = vec![("A".to_string(), "abc de.".to_string())];
        assert_eq!(parse_labeled_tsv(&to_labeled_tsv(&rows)).unwrap(), rows);
        assert!(parse_labeled_tsv("no tab here\n").is_err());
    }
}
