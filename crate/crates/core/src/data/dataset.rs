//! On-disk synthetic dataset: `<root>/{train,eval}/seq_NNNN/{frames.bin,groundtruth.txt}`
//! plus a `dataset.json` describing how it was generated.

use super::annotations::{format_got10k_annotations, normalize_boxes, parse_got10k_annotations};
use super::scene::{generate_sequence, SceneSpec, SequenceRecord, CHANNELS};
use crate::container::{Container, DType};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Template for every sequence; its `seed` is replaced per sequence.
    pub scene: SceneSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_sequences: 64,
            eval_sequences: 16,
            scene: SceneSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_sequences,
            Split::Eval => self.eval_sequences,
        }
    }

    /// Scene of sequence `index` in `split`.
    pub fn scene(&self, split: Split, index: usize) -> SceneSpec {
        let mut mixed = self.seed ^ split.stream().rotate_left(48) ^ (index as u64).rotate_left(20);
        // splitmix64 finalizer
        mixed = (mixed ^ (mixed >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        mixed = (mixed ^ (mixed >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        mixed ^= mixed >> 31;
        SceneSpec {
            seed: mixed,
            ..self.scene.clone()
        }
    }

    pub fn generate(&self, split: Split) -> Result<Vec<SequenceRecord>> {
        (0..self.count(split))
            .map(|i| generate_sequence(&self.scene(split, i), &sequence_name(i)))
            .collect()
    }
}

pub fn sequence_name(index: usize) -> String {
    format!("seq_{index:04}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub checksum: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(dir: &Path, seq: &SequenceRecord) -> Result<()> {
    create_dir(dir)?;
    let mut c = Container {
        meta: serde_json::json!({ "name": seq.name }),
        ..Default::default()
    };
    let dims = seq.frames.shape().to_array().to_vec();
    c.push("frames", dims, DType::F32, seq.frames.data().to_vec());
    c.write(&dir.join("frames.bin"))?;
    write_file(
        &dir.join("groundtruth.txt"),
        format_got10k_annotations(&seq.pixel_boxes).as_bytes(),
    )
}

pub fn read_sequence(dir: &Path) -> Result<SequenceRecord> {
    let c = Container::read(&dir.join("frames.bin"))?;
    let (dims, values) = c
        .get("frames")
        .ok_or_else(|| Error::Checkpoint(format!("{} has no frames tensor", dir.display())))?;
    if dims.len() != 4 || dims[1] != CHANNELS || dims[2] != dims[3] {
        return Err(Error::Checkpoint(format!("{}: bad frame dims {dims:?}", dir.display())));
    }
    let frames = Tensor4::from_vec(Shape4::new(dims[0], dims[1], dims[2], dims[3]), values.to_vec())?;
    let gt_path = dir.join("groundtruth.txt");
    let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let pixel_boxes = parse_got10k_annotations(&text)?;
    if pixel_boxes.len() != frames.batch() {
        return Err(Error::contract(format!(
            "{}: {} annotations for {} frames",
            dir.display(),
            pixel_boxes.len(),
            frames.batch()
        )));
    }
    let s = dims[3] as f64;
    let boxes = normalize_boxes(&pixel_boxes, s, s);
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SequenceRecord {
        name,
        frames,
        pixel_boxes,
        boxes,
    })
}

/// Generates and writes both splits, returning counts and the directory checksum.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetSummary> {
    if spec.train_sequences + spec.eval_sequences == 0 {
        return Err(Error::contract("empty dataset: no sequences requested"));
    }
    spec.scene.validate()?;
    create_dir(root)?;
    write_file(&root.join("dataset.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    for split in [Split::Train, Split::Eval] {
        for i in 0..spec.count(split) {
            let seq = generate_sequence(&spec.scene(split, i), &sequence_name(i))?;
            write_sequence(&root.join(split.name()).join(&seq.name), &seq)?;
        }
    }
    Ok(DatasetSummary {
        train_sequences: spec.train_sequences,
        eval_sequences: spec.eval_sequences,
        checksum: directory_checksum(root)?,
    })
}

pub fn read_spec(root: &Path) -> Result<DatasetSpec> {
    let path = root.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Every `seq_*` directory of a split, in name order.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<SequenceRecord>> {
    let dir = root.join(split.name());
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&dir, err))?;
        if e.path().is_dir() && e.file_name().to_string_lossy().starts_with("seq_") {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| read_sequence(d)).collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let path = e.map_err(|err| Error::io(dir, err))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and bytes, in path order.
///
/// A top-level `config.toml` is excluded: it records where the data was
/// written, not what it contains.
pub fn directory_checksum(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.retain(|f| f.strip_prefix(root).map_or(true, |r| r != Path::new("config.toml")));
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            train_sequences: 2,
            eval_sequences: 1,
            scene: SceneSpec {
                frames: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        write_dataset(dir.path(), &spec).unwrap();
        let back = read_split(dir.path(), Split::Train).unwrap();
        let fresh = spec.generate(Split::Train).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&fresh) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.pixel_boxes, b.pixel_boxes);
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.name, b.name);
        }
        assert_eq!(read_spec(dir.path()).unwrap(), spec);
    }

    #[test]
    fn same_seed_same_checksum() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = write_dataset(a.path(), &small()).unwrap();
        let sb = write_dataset(b.path(), &small()).unwrap();
        assert_eq!(sa.checksum, sb.checksum);
        let c = tempfile::tempdir().unwrap();
        let sc = write_dataset(c.path(), &DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(sa.checksum, sc.checksum);
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            train_sequences: 0,
            eval_sequences: 0,
            ..Default::default()
        };
        assert!(write_dataset(dir.path(), &spec).unwrap_err().to_string().contains("empty dataset"));
    }

    #[test]
    fn splits_use_distinct_scenes() {
        let spec = DatasetSpec::default();
        assert_ne!(spec.scene(Split::Train, 0).seed, spec.scene(Split::Eval, 0).seed);
        assert_ne!(spec.scene(Split::Train, 0).seed, spec.scene(Split::Train, 1).seed);
    }
}
