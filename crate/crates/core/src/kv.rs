//! Line-based `key=value` file parsing, shared by patient sidecar files
//! and run configuration files.
//!
//! Format: one `key=value` pair per line; blank lines and lines starting
//! with `#` are ignored; keys and values are trimmed; duplicate keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_kv_str(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                path,
                format!("line {}: expected key=value, got {line:?}", lineno + 1),
            ));
        };
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::format(
                path,
                format!("line {}: duplicate key {key:?}", lineno + 1),
            ));
        }
    }
    Ok(map)
}

pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_trimmed_pairs_and_skips_comments() {
        let text = "# sidecar\nregion = brain\n\nhospital=A\n";
        let map = parse_kv_str(text, Path::new("meta.txt")).unwrap();
        assert_eq!(map["region"], "brain");
        assert_eq!(map["hospital"], "A");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn rejects_duplicates_and_malformed_lines() {
        assert!(parse_kv_str("a=1\na=2", Path::new("x")).is_err());
        assert!(parse_kv_str("just a line", Path::new("x")).is_err());
    }
}
