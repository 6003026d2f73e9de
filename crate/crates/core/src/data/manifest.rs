//! JSON Lines manifests, one [`UtteranceRecord`] per line.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::features;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub transcript: String,
    /// Feature file, relative to the manifest's directory unless absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    /// Render features on the fly from the task spec with this seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_seed: Option<u64>,
    pub num_frames: usize,
    pub frame_rate_hz: f64,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    File(PathBuf),
    Synthetic(u64),
}

impl UtteranceRecord {
    pub fn source(&self, base: &Path) -> Result<FeatureSource> {
        match (&self.feature_path, self.synthetic_seed) {
            (Some(p), None) => {
                let p = Path::new(p);
                Ok(FeatureSource::File(if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }))
            }
            (None, Some(s)) => Ok(FeatureSource::Synthetic(s)),
            _ => Err(Error::Validation(format!(
                "utterance {} needs exactly one of feature_path / synthetic_seed",
                self.id
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative feature paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Validation(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        let m = Manifest {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate_records()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    fn validate_records(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.transcript.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "utterance {} has an empty transcript",
                    r.id
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id {}",
                    r.id
                )));
            }
            r.source(&self.base_dir)?;
        }
        Ok(())
    }

    /// Checks every referenced feature file header against the record's
    /// `num_frames` and `dim`.
    pub fn validate_features(&self) -> Result<()> {
        for r in &self.records {
            if let FeatureSource::File(p) = r.source(&self.base_dir)? {
                let (t, d) = features::read_header(&p)?;
                if (t, d) != (r.num_frames, r.dim) {
                    return Err(Error::Validation(format!(
                        "utterance {}: manifest says {}x{}, {} holds {t}x{d}",
                        r.id,
                        r.num_frames,
                        r.dim,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
