use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Label;
use crate::error::{Error, Result};

const HEADER: &str = "valence,arousal";

/// Reads an annotation stream: a `valence,arousal` header, then one `v,a`
/// line per frame where file line `i + 1` holds frame `i`.
pub fn load_annotations<R: BufRead>(reader: R) -> Result<BTreeMap<u32, Label>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(Error::io("<annotation stream>"))?,
        None => return Err(Error::Format("empty annotation file, expected header".into())),
    };
    let header = header.trim_start_matches('\u{feff}').trim_end_matches('\r');
    if header != HEADER {
        return Err(Error::Format(format!(
            "annotation header must be `{HEADER}`, found `{header}`"
        )));
    }

    let mut labels = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let frame = (i + 1) as u32;
        let line = line.map_err(Error::io("<annotation stream>"))?;
        let line = line.trim_end_matches('\r');
        let (v, a) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `valence,arousal`, found `{line}`"),
        })?;
        let parse = |field: &str| -> Result<f64> {
            let x: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("`{field}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("`{field}` is not finite"),
                });
            }
            Ok(x)
        };
        labels.insert(frame, Label::from_pair(parse(v)?, parse(a)?));
    }
    Ok(labels)
}

pub fn read_annotation_file(path: &Path) -> Result<BTreeMap<u32, Label>> {
    let file = File::open(path).map_err(Error::io(path))?;
    load_annotations(BufReader::new(file)).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes labels for frames `1..=n`. Keys must be contiguous from 1.
pub fn write_annotations<W: Write>(labels: &BTreeMap<u32, Label>, mut out: W) -> Result<()> {
    let io = Error::io("<annotation stream>");
    let mut text = String::with_capacity(16 + labels.len() * 24);
    text.push_str(HEADER);
    text.push('\n');
    for (expected, (&frame, label)) in (1u32..).zip(labels) {
        if frame != expected {
            return Err(Error::Format(format!(
                "annotation frames must be contiguous from 1; frame {expected} is missing"
            )));
        }
        let [v, a] = label.raw();
        text.push_str(&format!("{v},{a}\n"));
    }
    out.write_all(text.as_bytes()).map_err(io)
}
