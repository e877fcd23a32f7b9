//! JSON Lines dataset files, one [`PairedExample`] per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::synthetic::generate_range;
use super::{PairedExample, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::sequence::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Valid => "valid.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    split: Split,
    vocab: usize,
    s_features: Vec<Vec<f64>>,
    y: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<usize>>,
}

pub fn write_examples(path: &Path, examples: &[PairedExample], split: Split) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        let all_real = ex.mask().iter().all(|&m| m);
        let rec = Record {
            id: ex.id.clone(),
            split,
            vocab: ex.y.vocab_size(),
            s_features: ex.s_features.rows().into_iter().map(|r| r.to_vec()).collect(),
            y: ex.y.tokens().to_vec(),
            mask: (!all_real).then(|| ex.mask().to_vec()),
            x: ex.x.as_ref().map(|x| x.tokens().to_vec()),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<(Split, PairedExample)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let n = rec.y.len();
        let width = rec.s_features.first().map_or(0, Vec::len);
        if rec.s_features.len() != n || rec.s_features.iter().any(|r| r.len() != width) {
            return Err(bad("s_features must be an n x d matrix matching y".into()));
        }
        let flat: Vec<f64> = rec.s_features.into_iter().flatten().collect();
        let feats = Array2::from_shape_vec((n, width), flat).map_err(|e| bad(e.to_string()))?;
        let mask = rec.mask.unwrap_or_else(|| vec![true; n]);
        let y = TokenSequence::with_mask(rec.y, mask.clone(), rec.vocab).map_err(|e| bad(e.to_string()))?;
        let mut ex = PairedExample::new(rec.id, feats, y).map_err(|e| bad(e.to_string()))?;
        if let Some(x) = rec.x {
            ex.x = Some(TokenSequence::with_mask(x, mask, rec.vocab).map_err(|e| bad(e.to_string()))?);
        }
        out.push((rec.split, ex));
    }
    Ok(out)
}

/// Train, validation and test examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Vec<PairedExample>,
    pub valid: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
}

impl DatasetSplits {
    /// Synthetic splits over disjoint example indices: train first, then
    /// validation, then test.
    pub fn generate(spec: &SyntheticTaskSpec, n_train: usize, n_valid: usize, n_test: usize) -> Result<Self> {
        Ok(Self {
            train: generate_range(spec, 0, n_train)?,
            valid: generate_range(spec, n_train, n_valid)?,
            test: generate_range(spec, n_train + n_valid, n_test)?,
        })
    }

    pub fn get(&self, split: Split) -> &[PairedExample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes one file per split into `dir` and returns their paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        [Split::Train, Split::Valid, Split::Test]
            .into_iter()
            .map(|split| {
                let path = dir.join(split.file_name());
                write_examples(&path, self.get(split), split)?;
                Ok(path)
            })
            .collect()
    }

    /// Reads the split files present in `dir`; absent files leave their
    /// split empty.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        let mut out = Self::default();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(split.file_name());
            if path.exists() {
                out.extend(read_examples(&path)?);
            }
        }
        Ok(out)
    }

    /// Reads one file, placing each record by its own split field.
    pub fn read_file(path: &Path) -> Result<Self> {
        let mut out = Self::default();
        out.extend(read_examples(path)?);
        Ok(out)
    }

    fn extend(&mut self, records: Vec<(Split, PairedExample)>) {
        for (split, ex) in records {
            match split {
                Split::Train => self.train.push(ex),
                Split::Valid => self.valid.push(ex),
                Split::Test => self.test.push(ex),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{generate_synthetic, SyntheticTaskSpec};

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut exs = generate_synthetic(&SyntheticTaskSpec::default(), 3).unwrap();
        exs[1].x = Some(exs[1].y.clone());
        write_examples(&path, &exs, Split::Valid).unwrap();
        let back = read_examples(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((split, got), want) in back.iter().zip(&exs) {
            assert_eq!(*split, Split::Valid);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn split_directories() {
        let spec = SyntheticTaskSpec::default();
        let d = DatasetSplits::generate(&spec, 5, 2, 3).unwrap();
        assert_eq!(d.train[..], generate_synthetic(&spec, 5).unwrap()[..]);
        assert_eq!(d.test[0], generate_synthetic(&spec, 8).unwrap()[7]);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(d.write_dir(dir.path()).unwrap().len(), 3);
        assert_eq!(DatasetSplits::read_dir(dir.path()).unwrap(), d);
        let one = DatasetSplits::read_file(&dir.path().join("valid.jsonl")).unwrap();
        assert_eq!((one.train.len(), one.valid.len(), one.test.len()), (0, 2, 0));
        assert!(DatasetSplits::read_dir(&dir.path().join("nope")).unwrap_err().is_io());
    }

    #[test]
    fn malformed_lines_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"split\":\"train\",\"vocab\":3,\"s_features\":[[1.0]],\"y\":[0,1]}\n",
        )
        .unwrap();
        let err = read_examples(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(read_examples(&dir.path().join("missing.jsonl")).unwrap_err().is_io());
    }
}
