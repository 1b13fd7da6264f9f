//! Corpus JSONL serialization. One sample per line; speech frames are
//! hex-encoded little-endian f64 so round-trips are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sample, Task};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    task: Task,
    tokens: Vec<u32>,
    speech_hex: String,
    #[serde(rename = "T")]
    t: usize,
    in_dim: usize,
    alignment: Vec<usize>,
    target: Vec<u32>,
}

pub fn floats_to_hex(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

pub fn hex_to_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = hex::decode(s).map_err(|e| format!("invalid hex: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("hex length {} is not a multiple of 8 bytes", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write samples as JSONL; returns the number of lines written.
pub fn corpus_write<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    path: &Path,
) -> Result<usize> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut n = 0usize;
    for s in samples {
        let record = SampleRecord {
            id: s.id.clone(),
            task: s.task,
            tokens: s.tokens.clone(),
            speech_hex: floats_to_hex(s.speech.data()),
            t: s.speech.rows(),
            in_dim: s.speech.cols(),
            alignment: s.alignment.clone(),
            target: s.target.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::InvalidArgument(format!("serialize sample {}: {e}", s.id)))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// Streaming JSONL reader; yields one sample at a time without holding the
/// whole corpus in memory.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

pub fn corpus_reader(path: &Path) -> Result<CorpusReader> {
    Ok(CorpusReader {
        lines: BufReader::new(File::open(path)?).lines(),
        line_no: 0,
    })
}

/// Read the whole corpus into memory.
pub fn corpus_read(path: &Path) -> Result<Vec<Sample>> {
    corpus_reader(path)?.collect()
}

impl CorpusReader {
    fn parse_line(&self, line: &str) -> Result<Sample> {
        let schema_err = |field: &str, message: String| Error::CorpusSchema {
            line: self.line_no,
            field: field.to_string(),
            message,
        };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::CorpusSchema {
            line: self.line_no,
            field: "record".into(),
            message: e.to_string(),
        })?;
        let values = hex_to_floats(&record.speech_hex)
            .map_err(|m| schema_err("speech_hex", m))?;
        if values.len() != record.t * record.in_dim {
            return Err(schema_err(
                "speech_hex",
                format!(
                    "{} values for T={} in_dim={}",
                    values.len(),
                    record.t,
                    record.in_dim
                ),
            ));
        }
        if record.alignment.len() != record.t {
            return Err(schema_err(
                "alignment",
                format!("{} entries for T={}", record.alignment.len(), record.t),
            ));
        }
        let speech = Matrix::from_vec(record.t, record.in_dim, values)
            .map_err(|e| schema_err("speech_hex", e.to_string()))?;
        Ok(Sample {
            id: record.id,
            task: record.task,
            tokens: record.tokens,
            speech,
            alignment: record.alignment,
            target: record.target,
        })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(line) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    return Some(self.parse_line(&line));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{language_init, synth_corpus};
    use crate::numerics::Rng;

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = language_init(1);
        let samples = synth_corpus(
            &spec,
            &[(Task::Asr, 3), (Task::Ner, 3)],
            &Rng::new(2),
        );
        let path = dir.path().join("corpus.jsonl");
        let n = corpus_write(&samples, &path).unwrap();
        assert_eq!(n, 6);
        let loaded = corpus_read(&path).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn truncated_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let spec = language_init(1);
        let samples = synth_corpus(&spec, &[(Task::Asr, 2)], &Rng::new(2));
        let path = dir.path().join("corpus.jsonl");
        corpus_write(&samples, &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        // Truncate the second line.
        let cut = content.len() - 40;
        content.truncate(cut);
        std::fs::write(&path, content).unwrap();
        let mut reader = corpus_reader(&path).unwrap();
        assert!(reader.next().unwrap().is_ok());
        match reader.next().unwrap() {
            Err(Error::CorpusSchema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn wrong_speech_length_is_a_field_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let line = format!(
            "{{\"id\":\"x\",\"task\":\"asr\",\"tokens\":[1],\"speech_hex\":\"{}\",\"T\":2,\"in_dim\":2,\"alignment\":[0,0],\"target\":[1]}}",
            floats_to_hex(&[0.0, 1.0, 2.0])
        );
        std::fs::write(&path, line).unwrap();
        match corpus_read(&path) {
            Err(Error::CorpusSchema { field, line, .. }) => {
                assert_eq!(field, "speech_hex");
                assert_eq!(line, 1);
            }
            other => panic!("expected schema error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn reader_streams_incrementally() {
        let dir = tempfile::tempdir().unwrap();
        let spec = language_init(1);
        let samples = synth_corpus(&spec, &[(Task::Asr, 50)], &Rng::new(2));
        let path = dir.path().join("corpus.jsonl");
        corpus_write(&samples, &path).unwrap();
        let first_three: Vec<Sample> = corpus_reader(&path)
            .unwrap()
            .take(3)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(first_three.len(), 3);
        assert_eq!(first_three[0], samples[0]);
    }
}
