//! JSON-lines text records: one `{"id": ..., "text": ...}` object per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
}

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(origin, i + 1, e.to_string())))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

pub fn records_to_text(records: &[Record]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("strings serialise") + "\n")
        .collect()
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, records_to_text(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let recs = vec![
            Record { id: "d1".into(), text: "der \"Hund\"".into() },
            Record { id: "d2".into(), text: String::new() },
        ];
        let text = records_to_text(&recs);
        assert_eq!(parse_records(&text, "x").unwrap(), recs);
        let err = parse_records("{\"id\":\"a\",\"text\":\"b\"}\n{oops}\n", "c.jsonl").unwrap_err();
        assert!(err.to_string().starts_with("c.jsonl:2:"), "{err}");
    }
}
