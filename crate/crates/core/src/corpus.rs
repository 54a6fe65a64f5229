//! Supervised dataset loading and answer canonicalization.
//!
//! A corpus file holds one JSON object per line with `question`, `answer`
//! and an optional `meta` object. Observations are addressed by their
//! position in the file; an optional explicit `id` field is kept as the
//! record's source key and must be unique.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Positional index of an observation inside its corpus.
pub type ObsId = usize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: ObsId,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

impl Observation {
    /// Latent difficulty stored under `meta.difficulty`, if any.
    pub fn difficulty(&self) -> Option<f64> {
        self.meta.get("difficulty").and_then(Value::as_f64)
    }

    /// Canonical form of the gold answer.
    pub fn canonical_answer(&self) -> String {
        canonicalize_answer(&self.answer)
    }

    /// True when `candidate` matches the gold answer after canonicalization.
    pub fn is_correct(&self, candidate: &str) -> bool {
        canonicalize_answer(candidate) == self.canonical_answer()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    name: String,
    observations: Vec<Observation>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<u64>,
    question: String,
    answer: String,
    #[serde(default)]
    meta: Option<Map<String, Value>>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: ObsId,
    question: &'a str,
    answer: &'a str,
    #[serde(skip_serializing_if = "Map::is_empty")]
    meta: &'a Map<String, Value>,
}

impl Corpus {
    /// Builds a corpus from records, renumbering ids to their positions.
    pub fn from_observations(
        name: impl Into<String>,
        observations: Vec<Observation>,
    ) -> Result<Self, CorpusError> {
        if observations.is_empty() {
            return Err(CorpusError::Empty);
        }
        let observations = observations
            .into_iter()
            .enumerate()
            .map(|(id, obs)| Observation { id, ..obs })
            .collect();
        Ok(Self {
            name: name.into(),
            observations,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn get(&self, id: ObsId) -> Option<&Observation> {
        self.observations.get(id)
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter()
    }

    /// Splits off `indices` into a second corpus. Both halves keep file
    /// order and are renumbered from zero.
    pub fn split(&self, held_out: &[ObsId]) -> Result<(Corpus, Corpus), CorpusError> {
        let mut mask = vec![false; self.len()];
        for &id in held_out {
            if let Some(slot) = mask.get_mut(id) {
                *slot = true;
            }
        }
        let (held, kept): (Vec<_>, Vec<_>) = self
            .observations
            .iter()
            .cloned()
            .partition(|obs| mask[obs.id]);
        Ok((
            Corpus::from_observations(self.name.clone(), kept)?,
            Corpus::from_observations(format!("{}-holdout", self.name), held)?,
        ))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for obs in &self.observations {
            let rec = OutRecord {
                id: obs.id,
                question: &obs.question,
                answer: &obs.answer,
                meta: &obs.meta,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let io_err = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_jsonl(&mut out).map_err(io_err)?;
        out.flush().map_err(io_err)
    }
}

/// Reads a line-delimited corpus. With `limit`, only the first `limit`
/// records are kept.
pub fn load_corpus(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_corpus(BufReader::new(file), name, limit)
}

pub fn parse_corpus<R: BufRead>(
    reader: R,
    name: impl Into<String>,
    limit: Option<usize>,
) -> Result<Corpus, CorpusError> {
    let mut observations = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        if limit.is_some_and(|l| observations.len() >= l) {
            break;
        }
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if canonicalize_answer(&raw.answer).is_empty() {
            return Err(CorpusError::Validation {
                line: line_no,
                message: "answer is empty after canonicalization".into(),
            });
        }
        if let Some(explicit) = raw.id {
            if let Some(first) = seen.insert(explicit, line_no) {
                return Err(CorpusError::Validation {
                    line: line_no,
                    message: format!("duplicate id {explicit} (first seen on line {first})"),
                });
            }
        }
        observations.push(Observation {
            id: observations.len(),
            question: raw.question,
            answer: raw.answer,
            source_id: raw.id,
            meta: raw.meta.unwrap_or_default(),
        });
    }
    Corpus::from_observations(name, observations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub cot: String,
    pub answer: String,
}

/// Loads few-shot exemplars, one `{question, cot, answer}` object per line.
pub fn load_exemplars(path: impl AsRef<Path>) -> Result<Vec<Exemplar>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exemplar = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if ex.question.trim().is_empty() || ex.cot.trim().is_empty() || ex.answer.trim().is_empty()
        {
            return Err(CorpusError::Validation {
                line: line_no,
                message: "exemplar fields must be non-empty".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Normalizes an answer for verification.
///
/// Trims, collapses whitespace runs, lowercases and drops trailing periods.
/// Numeric answers also lose thousands separators and leading zeros.
pub fn canonicalize_answer(raw: &str) -> String {
    let mut s = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    loop {
        let trimmed = s.trim_end_matches('.').trim_end();
        if trimmed.len() == s.len() {
            break;
        }
        s = trimmed.to_string();
    }
    normalize_number(&s).unwrap_or(s)
}

fn normalize_number(s: &str) -> Option<String> {
    let stripped: String = s.chars().filter(|&c| c != ',').collect();
    let (sign, body) = match stripped.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", stripped.as_str()),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) || frac_part.is_some_and(|f| !digits(f)) {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    Some(match frac_part {
        Some(f) => format!("{sign}{int_part}.{f}"),
        None => format!("{sign}{int_part}"),
    })
}
