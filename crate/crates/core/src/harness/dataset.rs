use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a JSONL dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub prompt: String,
    pub reference: String,
    pub intervened_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<String>,
}

/// Parse JSONL text. Blank lines are ignored; line numbers are 1-based.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<DatasetRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.reference.is_empty() {
            return Err(err("field `reference` is empty".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_dataset("", "x").unwrap().is_empty());
        assert!(parse_dataset("\n  \n", "x").unwrap().is_empty());
    }

    #[test]
    fn missing_reference_names_field_and_line() {
        let text = concat!(
            r#"{"id":"a","prompt":"p","reference":"r","intervened_prompt":"q"}"#,
            "\n",
            r#"{"id":"b","prompt":"p","intervened_prompt":"q"}"#
        );
        let err = parse_dataset(text, "d.jsonl").unwrap_err().to_string();
        assert!(err.contains("d.jsonl:2"), "{err}");
        assert!(err.contains("reference"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"id":"a","prompt":"p","reference":"r","intervened_prompt":"q"}"#;
        let err = parse_dataset(&format!("{line}\n{line}"), "d").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn save_then_load_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![
            DatasetRecord {
                id: "1".into(),
                prompt: "<z1>".into(),
                reference: "h\u{e9}llo \"quoted\"\tx".into(),
                intervened_prompt: "<z3>".into(),
                source: Some(1),
                target: Some(3),
                criterion: Some("register".into()),
            },
            DatasetRecord {
                id: "2".into(),
                prompt: String::new(),
                reference: "r".into(),
                intervened_prompt: "q".into(),
                source: None,
                target: None,
                criterion: None,
            },
        ];
        save_dataset(&path, &recs).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), recs);
    }
}
