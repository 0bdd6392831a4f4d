//! Line-delimited JSON instance files.
//!
//! ```text
//! {"labels":{"relations":["Cause","List"],"connectives":["because","and"]}}   <- optional header
//! {"id":"7","arg1":"Never mind.","arg2":"You already know the answer.","connective":"because","relations":["Cause"]}
//! ```
//!
//! `id` is optional (defaults to the record's 0-based position) and
//! `connective` may be `null` or absent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Instance, LabelSpace};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    arg1: String,
    arg2: String,
    #[serde(default)]
    connective: Option<String>,
    relations: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelsHeader {
    relations: Vec<String>,
    #[serde(default)]
    connectives: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    labels: LabelsHeader,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub instances: Vec<Instance>,
}

/// Reads an instance file. Label precedence: `fixed` (from configuration or
/// a checkpoint), then the file header, then names discovered in record
/// order. With a fixed space, unknown names are errors.
pub fn load_instances(path: impl AsRef<Path>, fixed: Option<&LabelSpace>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_instances(BufReader::new(file), &path.display().to_string(), fixed)
}

pub fn read_instances(reader: impl BufRead, source: &str, fixed: Option<&LabelSpace>) -> Result<Dataset> {
    let mut labels = fixed.cloned();
    let mut discovered = LabelSpace::default();
    let mut instances = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if instances.is_empty() && line.contains("\"labels\"") {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                if labels.is_none() {
                    labels = Some(
                        LabelSpace::new(h.labels.relations, h.labels.connectives)
                            .map_err(|e| parse_err(line_no, e.to_string()))?,
                    );
                }
                continue;
            }
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.relations.is_empty() {
            return Err(parse_err(line_no, "relations must be non-empty".into()));
        }
        // A header-declared space is closed just like a caller-supplied one.
        let fixed_space = labels.is_some();
        let space = labels.as_mut().unwrap_or(&mut discovered);
        let mut relations = Vec::with_capacity(rec.relations.len());
        for name in &rec.relations {
            let id = if fixed_space {
                space.relation_id(name).ok_or_else(|| Error::UnknownLabel {
                    kind: "relation",
                    name: name.clone(),
                })?
            } else {
                space.intern_relation(name)
            };
            if !relations.contains(&id) {
                relations.push(id);
            }
        }
        let connective = match &rec.connective {
            None => None,
            Some(name) if fixed_space => Some(space.connective_id(name).ok_or_else(|| Error::UnknownLabel {
                kind: "connective",
                name: name.clone(),
            })?),
            Some(name) => Some(space.intern_connective(name)),
        };
        let inst = Instance {
            id: rec.id.unwrap_or_else(|| instances.len().to_string()),
            arg1: tokenize(&rec.arg1),
            arg2: tokenize(&rec.arg2),
            connective,
            relations,
        };
        if inst.arg1.is_empty() || inst.arg2.is_empty() {
            return Err(parse_err(line_no, "arguments must contain at least one token".into()));
        }
        instances.push(inst);
    }
    Ok(Dataset {
        labels: labels.unwrap_or(discovered),
        instances,
    })
}

/// Writes a header line followed by one record per instance.
pub fn write_instances(path: impl AsRef<Path>, labels: &LabelSpace, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = Header {
        labels: LabelsHeader {
            relations: labels.relations().to_vec(),
            connectives: labels.connectives().to_vec(),
        },
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serialises")).map_err(io)?;
    for inst in instances {
        let rec = Record {
            id: Some(inst.id.clone()),
            arg1: inst.arg1_text(),
            arg2: inst.arg2_text(),
            connective: inst.connective.map(|c| labels.connective_name(c).to_string()),
            relations: inst.relations.iter().map(|&r| labels.relation_name(r).to_string()).collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serialises")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, fixed: Option<&LabelSpace>) -> Result<Dataset> {
        read_instances(text.as_bytes(), "mem", fixed)
    }

    #[test]
    fn reads_the_example_record() {
        let ds = read(
            r#"{"arg1":"Never mind","arg2":"You already know the answer","connective":"because","relations":["Cause"]}"#,
            None,
        )
        .unwrap();
        let inst = &ds.instances[0];
        assert_eq!(inst.arg1.len(), 2);
        assert_eq!(inst.arg2.len(), 5);
        assert_eq!(inst.id, "0");
        assert_eq!(ds.labels.relations(), ["Cause"]);
        assert_eq!(ds.labels.connectives(), ["because"]);
    }

    #[test]
    fn missing_relations_rejected_with_line_number() {
        let err = read("\n{\"arg1\":\"a\",\"arg2\":\"b\"}", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(read(r#"{"arg1":"a","arg2":"b","relations":[]}"#, None).is_err());
    }

    #[test]
    fn labels_are_interned() {
        let ds = read(
            "{\"arg1\":\"a\",\"arg2\":\"b\",\"relations\":[\"Cause\"]}\n{\"arg1\":\"c\",\"arg2\":\"d\",\"relations\":[\"Cause\"]}",
            None,
        )
        .unwrap();
        assert_eq!(ds.instances[0].relations, ds.instances[1].relations);
        assert_eq!(ds.labels.num_relations(), 1);
        assert_eq!(ds.instances[0].connective, None);
    }

    #[test]
    fn fixed_space_rejects_foreign_labels() {
        let fixed = LabelSpace::new(vec!["Cause".into()], vec![]).unwrap();
        let err = read(r#"{"arg1":"a","arg2":"b","relations":["List"]}"#, Some(&fixed)).unwrap_err();
        assert!(err.to_string().contains("List"), "{err}");
    }

    #[test]
    fn caller_labels_win_over_header() {
        let fixed = LabelSpace::new(vec!["B".into(), "A".into()], vec![]).unwrap();
        let text = "{\"labels\":{\"relations\":[\"A\",\"B\"]}}\n{\"arg1\":\"x\",\"arg2\":\"y\",\"relations\":[\"A\"]}";
        let ds = read(text, Some(&fixed)).unwrap();
        assert_eq!(ds.instances[0].relations, [1]);
        let ds = read(text, None).unwrap();
        assert_eq!(ds.instances[0].relations, [0]);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let ds = read(
            "{\"id\":\"q\",\"arg1\":\"One Two\",\"arg2\":\"three\",\"connective\":\"so\",\"relations\":[\"A\",\"B\"]}\n{\"arg1\":\"x\",\"arg2\":\"y z\",\"relations\":[\"B\"]}",
            None,
        )
        .unwrap();
        write_instances(&path, &ds.labels, &ds.instances).unwrap();
        let back = load_instances(&path, None).unwrap();
        assert_eq!(back, ds);
    }
}
