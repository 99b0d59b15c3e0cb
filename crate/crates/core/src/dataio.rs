//! Dataset layout and access.
//!
//! A dataset directory holds `manifest.json` (category table with static
//! flags, camera intrinsics, split membership) and `frames.jsonl` — one
//! frame record per line with ground-truth pose and detections. Sequences
//! are groups of frames sharing a `seq` name; splits reference sequences,
//! never individual frames.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_norm, CameraIntrinsics, Pose, Quat, Vec3};
use crate::org::Detection;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub id: u32,
    pub name: String,
    /// Static categories anchor localization; dynamic ones are filtered out
    /// before the model sees them.
    #[serde(rename = "static")]
    pub is_static: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub categories: Vec<CategoryInfo>,
    pub intrinsics: CameraIntrinsics,
    pub splits: SplitLists,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.id) {
                return Err(Error::Invalid(format!("duplicate category id {}", c.id)));
            }
        }
        Ok(())
    }

    pub fn static_ids(&self) -> HashSet<u32> {
        self.categories
            .iter()
            .filter(|c| c.is_static)
            .map(|c| c.id)
            .collect()
    }

    /// Size of the category embedding table (ids index into it directly).
    pub fn category_count(&self) -> usize {
        self.categories
            .iter()
            .map(|c| c.id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn split_names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Test => &self.splits.test,
        }
    }
}

/// One frame: ground-truth pose (translation plus unit quaternion, stored
/// exactly as read so files round-trip byte for byte) and its detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub seq: String,
    pub t: Vec3,
    pub q: Quat,
    pub detections: Vec<Detection>,
}

impl FrameRecord {
    /// Pose in regression form (log-quaternion rotation).
    pub fn pose(&self) -> Result<Pose> {
        Pose::from_parts(self.t, self.q)
    }
}

/// A parsed dataset: manifest plus frames grouped by sequence, in file
/// order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<(String, Vec<FrameRecord>)>,
}

impl Dataset {
    /// Groups records by sequence (preserving order) and validates them
    /// against the manifest: known categories, unit quaternions, strictly
    /// increasing frame ids within each sequence.
    pub fn assemble(manifest: DatasetManifest, records: Vec<FrameRecord>) -> Result<Dataset> {
        manifest.validate()?;
        let known_ids: HashSet<u32> = manifest.categories.iter().map(|c| c.id).collect();
        let mut sequences: Vec<(String, Vec<FrameRecord>)> = Vec::new();
        for rec in records {
            if (quat_norm(rec.q) - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "frame {} (seq {}): quaternion is not unit length",
                    rec.frame_id, rec.seq
                )));
            }
            for d in &rec.detections {
                if !known_ids.contains(&d.category) {
                    return Err(Error::Invalid(format!(
                        "frame {} (seq {}): unknown category id {}",
                        rec.frame_id, rec.seq, d.category
                    )));
                }
            }
            match sequences.iter_mut().find(|(s, _)| *s == rec.seq) {
                Some((_, frames)) => {
                    if let Some(last) = frames.last() {
                        if rec.frame_id <= last.frame_id {
                            return Err(Error::Invalid(format!(
                                "seq {}: frame ids not strictly increasing at {}",
                                rec.seq, rec.frame_id
                            )));
                        }
                    }
                    frames.push(rec);
                }
                None => {
                    let seq = rec.seq.clone();
                    sequences.push((seq, vec![rec]));
                }
            }
        }
        Ok(Dataset {
            manifest,
            sequences,
        })
    }

    /// Sequences belonging to a split, in the manifest's split order.
    pub fn split_sequences(&self, split: Split) -> Result<Vec<&(String, Vec<FrameRecord>)>> {
        self.manifest
            .split_names(split)
            .iter()
            .map(|name| {
                self.sequences
                    .iter()
                    .find(|(s, _)| s == name)
                    .ok_or_else(|| {
                        Error::Invalid(format!("split references unknown sequence {name}"))
                    })
            })
            .collect()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|(_, f)| f.len()).sum()
    }
}

/// Writes `manifest.json` and `frames.jsonl` (one compact record per line,
/// in the order given). Output is deterministic for identical inputs.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, frames: &[FrameRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest_body = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_body + "\n")?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(FRAMES_FILE))?);
    for f in frames {
        let line = serde_json::to_string(f)
            .map_err(|e| Error::Internal(format!("frame serialization: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates a dataset directory. Parse failures name the exact
/// file and line; semantic problems (unknown categories, unordered or
/// non-unit-quaternion frames) name the frame.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let body = read_input(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;

    let frames_path = dir.join(FRAMES_FILE);
    let file = std::fs::File::open(&frames_path).map_err(|e| missing_or_io(&frames_path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: frames_path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Dataset::assemble(manifest, records)
}

fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| missing_or_io(path, e))
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingInput(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

/// Index tuples `(a, a + k_f, ..., a + (s-1)·k_f)` for every anchor
/// position `a` that fits in a sequence of length `len`: exactly
/// `max(0, len - (s-1)·k_f)` tuples. `s = 1` degenerates to one singleton
/// per frame.
pub fn sample_tuples(len: usize, s: usize, k_f: usize) -> Vec<Vec<usize>> {
    if s == 0 {
        return Vec::new();
    }
    let span = (s - 1) * k_f;
    if len <= span {
        return Vec::new();
    }
    (0..len - span)
        .map(|a| (0..s).map(|j| a + j * k_f).collect())
        .collect()
}
