use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::grammar::{GroupRegistry, Label, MoleculeString};

use super::{DataError, Dataset, DatasetRecord, Split};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: u64,
    tokens: Vec<String>,
    label: Number,
    mask: Option<Vec<u8>>,
    split: Split,
}

fn label_number(label: Label) -> Number {
    match label {
        Label::Class(c) => Number::from(c as u64),
        Label::Value(v) => Number::from_f64(v).expect("finite label"),
    }
}

/// One JSON object per line, in record order.
pub fn write_records<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<(), DataError> {
    for r in records {
        let raw = RawRecord {
            id: r.id,
            tokens: r.tokens.clone(),
            label: label_number(r.label),
            mask: r.mask.clone(),
            split: r.split,
        };
        serde_json::to_writer(&mut w, &raw).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    write_records(BufWriter::new(File::create(path)?), &dataset.records)
}

fn check(raw: RawRecord, line: usize, registry: &GroupRegistry) -> Result<DatasetRecord, DataError> {
    let violation = |why: String| DataError::InvariantViolation(line, why);
    let label = if let Some(c) = raw.label.as_u64() {
        Label::Class(c as usize)
    } else if raw.label.is_i64() {
        return Err(violation(format!("class label {} is negative", raw.label)));
    } else {
        Label::Value(raw.label.as_f64().ok_or(DataError::MalformedRecord(line))?)
    };
    if raw.tokens.is_empty() {
        return Err(violation("no tokens".into()));
    }
    let tokens = raw
        .tokens
        .iter()
        .map(|t| registry.token(t).map_err(|e| violation(format!("token {t:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    MoleculeString::new(tokens, raw.mask.clone(), Some(label)).map_err(|e| violation(e.to_string()))?;
    Ok(DatasetRecord {
        id: raw.id,
        tokens: raw.tokens,
        label,
        mask: raw.mask,
        split: raw.split,
    })
}

/// Parses and validates every line; the first bad line rejects the input.
pub fn read_records<R: BufRead>(r: R, registry: &GroupRegistry) -> Result<Vec<DatasetRecord>, DataError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let raw: RawRecord = serde_json::from_str(&line).map_err(|_| DataError::MalformedRecord(line_no))?;
        let rec = check(raw, line_no, registry)?;
        if !ids.insert(rec.id) {
            return Err(DataError::InvariantViolation(line_no, format!("duplicate id {}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load(path: &Path, registry: &GroupRegistry) -> Result<Dataset, DataError> {
    let records = read_records(BufReader::new(File::open(path)?), registry)?;
    Ok(Dataset {
        registry: registry.clone(),
        records,
    })
}
