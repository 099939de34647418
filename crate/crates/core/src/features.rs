//! Cohort files and structured feature assembly.
//!
//! A structured feature vector is the patient's demographic block followed by
//! the mean of the pre-trained vectors of their codes, taken in age order.
//! Codes missing from the table are skipped; a patient with no known codes
//! gets a zero pooled block.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeEvent {
    pub code: String,
    pub age_days: u64,
}

/// One line of the records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: u8,
    pub split: Split,
    /// Matched case-control pair, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub demo: Vec<f64>,
    pub codes: Vec<CodeEvent>,
    pub note_emb: Option<Vec<f64>>,
}

/// Code string → pre-trained code vector, all of one width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CodeVectorTable {
    vectors: BTreeMap<String, Vec<f64>>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct CodeLine {
    code: String,
    vec: Vec<f64>,
}

impl CodeVectorTable {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let width = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::validation("code vector table is empty"))?;
        if width == 0 {
            return Err(Error::validation("code vectors must have width >= 1"));
        }
        for (code, v) in &vectors {
            if v.len() != width {
                return Err(Error::validation(format!(
                    "code {code:?} has width {} but the table width is {width}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("code {code:?} has non-finite entries")));
            }
        }
        Ok(Self { vectors, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<&[f64]> {
        self.vectors.get(code).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.vectors.iter()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for (line_no, line) in read_lines(path)? {
            let entry: CodeLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
            if vectors.insert(entry.code.clone(), entry.vec).is_some() {
                return Err(Error::validation(format!(
                    "{}:{line_no}: duplicate code {:?}",
                    path.display(),
                    entry.code
                )));
            }
        }
        Self::new(vectors)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (code, vec) in &self.vectors {
            let line = serde_json::to_string(&CodeLine {
                code: code.clone(),
                vec: vec.clone(),
            })
            .expect("code lines serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Demographics followed by the mean code vector (codes sorted by age).
pub fn assemble_structured(record: &PatientRecord, table: &CodeVectorTable) -> Vec<f64> {
    let mut events: Vec<&CodeEvent> = record.codes.iter().collect();
    // Code as secondary key: identical (age, code) events are interchangeable,
    // so the pooled sum does not depend on input order at all.
    events.sort_by(|a, b| a.age_days.cmp(&b.age_days).then_with(|| a.code.cmp(&b.code)));

    let mut pooled = vec![0.0; table.width()];
    let mut count = 0usize;
    for v in events.iter().filter_map(|e| table.get(&e.code)) {
        for (p, x) in pooled.iter_mut().zip(v) {
            *p += x;
        }
        count += 1;
    }
    if count > 0 {
        let inv = count as f64;
        pooled.iter_mut().for_each(|p| *p /= inv);
    }
    let mut out = Vec::with_capacity(record.demo.len() + pooled.len());
    out.extend_from_slice(&record.demo);
    out.extend(pooled);
    out
}

/// Per-column affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance columns keep unit scale.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::validation("cannot fit a standardizer on zero rows"))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.as_ref()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &mut [f64]) {
        for ((x, m), s) in values.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }
}

/// Turns records into standardized structured feature rows.
///
/// Only the demographic columns are standardized, with statistics fitted on the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredEncoder {
    pub demo_width: usize,
    pub code_width: usize,
    pub demo_standardizer: Standardizer,
}

impl StructuredEncoder {
    pub fn fit(cohort: &Cohort) -> Result<Self> {
        let train: Vec<&[f64]> = cohort
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.demo.as_slice())
            .collect();
        Ok(Self {
            demo_width: cohort.demo_width(),
            code_width: cohort.table.width(),
            demo_standardizer: Standardizer::fit(&train)?,
        })
    }

    pub fn width(&self) -> usize {
        self.demo_width + self.code_width
    }

    pub fn encode(&self, record: &PatientRecord, table: &CodeVectorTable) -> Result<Vec<f64>> {
        if record.demo.len() != self.demo_width || table.width() != self.code_width {
            return Err(Error::invalid(format!(
                "feature width mismatch: model expects {} ({} demographic + {} code), cohort provides {} ({} + {})",
                self.width(),
                self.demo_width,
                self.code_width,
                record.demo.len() + table.width(),
                record.demo.len(),
                table.width()
            )));
        }
        let mut v = assemble_structured(record, table);
        self.demo_standardizer.apply(&mut v[..self.demo_width]);
        Ok(v)
    }

    pub fn encode_all(&self, records: &[&PatientRecord], table: &CodeVectorTable) -> Result<Matrix> {
        let rows = records
            .iter()
            .map(|r| self.encode(r, table))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.width()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Records plus code table, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub table: CodeVectorTable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub train_positive: usize,
    pub train_negative: usize,
    pub test_positive: usize,
    pub test_negative: usize,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, table: CodeVectorTable) -> Result<Self> {
        validate_records(&records)?;
        Ok(Self { records, table })
    }

    pub fn demo_width(&self) -> usize {
        self.records.first().map_or(0, |r| r.demo.len())
    }

    /// Width of note embeddings, if any record has one.
    pub fn note_width(&self) -> Option<usize> {
        self.records
            .iter()
            .find_map(|r| r.note_emb.as_ref().map(Vec::len))
    }

    pub fn split(&self, split: Split) -> Vec<&PatientRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn summary(&self) -> CohortSummary {
        let mut s = CohortSummary::default();
        for r in &self.records {
            match (r.split, r.label) {
                (Split::Train, 1) => s.train_positive += 1,
                (Split::Train, _) => s.train_negative += 1,
                (Split::Test, 1) => s.test_positive += 1,
                (Split::Test, _) => s.test_negative += 1,
            }
        }
        s
    }

    pub fn write(&self, records_path: &Path, table_path: &Path) -> Result<()> {
        write_records(records_path, &self.records)?;
        self.table.write_jsonl(table_path)
    }
}

fn validate_records(records: &[PatientRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::validation("empty cohort"))?;
    let demo_width = first.demo.len();
    let mut note_width = None;
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        let id = &r.patient_id;
        if !seen.insert(id.as_str()) {
            return Err(Error::validation(format!("duplicate patient_id {id:?}")));
        }
        if r.label > 1 {
            return Err(Error::validation(format!(
                "patient {id:?} has label {} (expected 0 or 1)",
                r.label
            )));
        }
        if r.demo.len() != demo_width {
            return Err(Error::validation(format!(
                "patient {id:?} has {} demographic values, expected {demo_width}",
                r.demo.len()
            )));
        }
        if r.demo.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!("patient {id:?} has non-finite demographics")));
        }
        if let Some(emb) = &r.note_emb {
            match note_width {
                None => note_width = Some(emb.len()),
                Some(w) if w != emb.len() => {
                    return Err(Error::validation(format!(
                        "patient {id:?} has note embedding width {}, expected {w}",
                        emb.len()
                    )))
                }
                Some(_) => {}
            }
            if emb.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "patient {id:?} has a non-finite note embedding"
                )));
            }
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PatientRecord>> {
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a records file and its code table.
pub fn load_cohort(records_path: &Path, code_table_path: &Path) -> Result<Cohort> {
    let records = read_records(records_path)?;
    let table = CodeVectorTable::read_jsonl(code_table_path)?;
    Cohort::new(records, table)
}
