use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{Example, LabelSpace};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    text: String,
    labels: Vec<String>,
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("input file not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

/// Reads one example per non-blank line: `{"id", "text", "labels": [..]}`.
pub fn load_jsonl(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let content = read_input(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        let ex = Example {
            id: line.id,
            text: line.text,
            labels: line.labels,
        };
        ex.validate(space)?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate example id `{}`",
                path.display(),
                i + 1,
                ex.id
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_label_space(path: impl AsRef<Path>) -> Result<LabelSpace> {
    let path = path.as_ref();
    let content = read_input(path)?;
    serde_json::from_str(&content).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    fn space() -> LabelSpace {
        LabelSpace::new(
            TaskKind::Multiclass,
            vec!["PHM".into(), "NPHM".into(), "FM".into()],
        )
        .unwrap()
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_in_file_order() {
        let f = write(
            "{\"id\":\"a\",\"text\":\"I have a headache\",\"labels\":[\"PHM\"]}\n\n{\"id\":\"b\",\"text\":\"x\",\"labels\":[\"FM\"]}\n",
        );
        let exs = load_jsonl(f.path(), &space()).unwrap();
        assert_eq!(exs.len(), 2);
        assert_eq!(exs[0], Example::new("a", "I have a headache", &["PHM"]));
        assert_eq!(exs[1].id, "b");
    }

    #[test]
    fn missing_labels_reports_line() {
        let f = write("{\"id\":\"a\",\"text\":\"t\",\"labels\":[\"PHM\"]}\n{\"id\":\"b\",\"text\":\"t\"}\n");
        match load_jsonl(f.path(), &space()).unwrap_err() {
            Error::Parse { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("labels"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_label_is_named() {
        let f = write("{\"id\":\"a\",\"text\":\"t\",\"labels\":[\"HM\"]}\n");
        let err = load_jsonl(f.path(), &space()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("HM"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = write(
            "{\"id\":\"a\",\"text\":\"t\",\"labels\":[\"PHM\"]}\n{\"id\":\"a\",\"text\":\"u\",\"labels\":[\"FM\"]}\n",
        );
        let err = load_jsonl(f.path(), &space()).unwrap_err();
        assert!(err.to_string().contains("duplicate example id `a`"));
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = load_jsonl("/nonexistent/data.jsonl", &space()).unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn write_then_load() {
        let exs = vec![Example::new("a", "hello \"world\"", &["PHM"])];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &exs).unwrap();
        assert_eq!(load_jsonl(f.path(), &space()).unwrap(), exs);
    }
}
