//! Line-delimited JSON records with a schema tag on line 1.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct SchemaTag {
    schema: String,
}

/// Render records as a schema-tagged JSONL document.
pub fn to_string<T: Serialize>(schema: &str, records: &[T]) -> Result<String> {
    let mut out = serde_json::to_string(&SchemaTag {
        schema: schema.to_string(),
    })
    .map_err(|e| Error::Validation(e.to_string()))?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<()> {
    let body = to_string(schema, records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parse a schema-tagged JSONL document. Errors carry 1-based line numbers.
pub fn parse<T: DeserializeOwned>(path: &Path, schema: &str, text: &str) -> Result<Vec<T>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Err(parse_err(1, "missing schema tag".into())),
        Some((_, first)) => {
            let tag: SchemaTag =
                serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad schema tag: {e}")))?;
            if tag.schema != schema {
                return Err(parse_err(
                    1,
                    format!("expected schema `{schema}`, found `{}`", tag.schema),
                ));
            }
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(path, schema, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_schema_is_rejected_on_line_one() {
        let text = to_string("a.v1", &[1u32, 2]).unwrap();
        let err = parse::<u32>(Path::new("x"), "b.v1", &text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn bad_record_reports_its_line() {
        let text = "{\"schema\":\"a.v1\"}\n1\n2\n{oops\n";
        let err = parse::<u32>(Path::new("x"), "a.v1", text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }
}
