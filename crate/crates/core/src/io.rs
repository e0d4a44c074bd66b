//! On-disk formats: the corpus file, checkpoints, keyframe files and
//! generated motions.
//!
//! Every format carries a `version` string; readers accept any minor
//! revision of [`FORMAT_MAJOR`] and reject other majors.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::{
    Action, Corpus, CorpusRecord, CorpusSpec, CorpusStats, Direction, FeatureLayout, KeyframeMask, Modifier,
    MotionSequence, Prompt, Vocabulary,
};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;

pub fn check_version(version: &str, what: &str) -> Result<()> {
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::Format(format!("{what}: malformed version '{version}'")))?;
    if major != FORMAT_MAJOR {
        return Err(Error::Version(format!(
            "{what} has version {version}, this build reads {FORMAT_MAJOR}.x"
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open(path: &Path, what: &str) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{what} {}: {e}", path.display()))))
}

fn write_json_line<W: Write, S: Serialize>(w: &mut W, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn matrix_rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StatsRecord {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusHeader {
    version: String,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "N_max")]
    max_frames: usize,
    vocab: Vec<String>,
    stats: StatsRecord,
    layout: FeatureLayout,
    spec: CorpusSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SequenceRecord {
    id: usize,
    prompt_text: String,
    prompt_tokens: Vec<usize>,
    action: Action,
    modifier: Modifier,
    direction: Direction,
    fps: u32,
    frames: Vec<Vec<f64>>,
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = create(path)?;
    write_json_line(
        &mut w,
        &CorpusHeader {
            version: FORMAT_VERSION.into(),
            dim: corpus.layout.dim(),
            max_frames: corpus.spec.max_frames,
            vocab: corpus.vocab.words().to_vec(),
            stats: StatsRecord {
                mean: corpus.stats.mean.clone(),
                std: corpus.stats.std.clone(),
            },
            layout: corpus.layout.clone(),
            spec: corpus.spec.clone(),
        },
    )?;
    for r in &corpus.records {
        write_json_line(
            &mut w,
            &SequenceRecord {
                id: r.id,
                prompt_text: r.prompt.text.clone(),
                prompt_tokens: r.prompt.tokens.clone(),
                action: r.prompt.action,
                modifier: r.prompt.modifier,
                direction: r.prompt.direction,
                fps: r.motion.fps,
                frames: matrix_rows(&r.motion.frames),
            },
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut lines = open(path, "corpus")?.lines();
    let header: CorpusHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)
            .map_err(|e| Error::Format(format!("corpus header: {e}")))?,
        None => return Err(Error::Format("corpus file is empty".into())),
    };
    check_version(&header.version, "corpus")?;
    if header.layout.dim() != header.dim {
        return Err(Error::Format(format!(
            "corpus header declares D = {} but layout has {} channels",
            header.dim,
            header.layout.dim()
        )));
    }
    let vocab = Vocabulary::from_words(header.vocab)?;
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("corpus record {k}: {e}")))?;
        let frames = Matrix::from_rows(&rec.frames)?;
        if frames.cols() != header.dim {
            return Err(Error::Format(format!(
                "corpus record {}: {} channels, header declares {}",
                rec.id,
                frames.cols(),
                header.dim
            )));
        }
        let motion = MotionSequence::new(frames, rec.fps, rec.id);
        motion.validate(header.max_frames)?;
        if vocab.encode(&rec.prompt_text)? != rec.prompt_tokens {
            return Err(Error::Format(format!("corpus record {}: prompt tokens do not match text", rec.id)));
        }
        records.push(CorpusRecord {
            id: rec.id,
            prompt: Prompt {
                text: rec.prompt_text,
                tokens: rec.prompt_tokens,
                action: rec.action,
                modifier: rec.modifier,
                direction: rec.direction,
            },
            motion,
        });
    }
    Ok(Corpus {
        spec: header.spec,
        layout: header.layout,
        vocab,
        stats: CorpusStats {
            mean: header.stats.mean,
            std: header.stats.std,
        },
        records,
    })
}

/// One stored tensor inside the checkpoint blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
    pub dtype: String,
}

pub const CHECKPOINT_DTYPE: &str = "float32-little-endian";

/// Checkpoint manifest: everything needed to sample without the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub stats: CorpusStats,
    pub layout: FeatureLayout,
    pub vocab: Vec<String>,
    /// Resolved run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub model: DenoiserModel<T>,
}

impl<T> Checkpoint<T> {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(self.manifest.vocab.clone())
    }
}

/// Sibling path of the blob for a manifest at `path`.
pub fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".bin");
    path.with_file_name(name)
}

pub struct CheckpointMeta<'a> {
    pub schedule: &'a ScheduleParams,
    pub stats: &'a CorpusStats,
    pub layout: &'a FeatureLayout,
    pub vocab: &'a Vocabulary,
    pub config: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &DenoiserModel<T>, meta: CheckpointMeta<'_>) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(model.params().num_scalars() * 4);
    let mut tensors = Vec::new();
    for (name, value) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [value.rows(), value.cols()],
            offset: bytes.len(),
            dtype: CHECKPOINT_DTYPE.into(),
        });
        for v in value.as_slice() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION.into(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: bytes.len(),
        model: model.config().clone(),
        schedule: meta.schedule.clone(),
        stats: meta.stats.clone(),
        layout: meta.layout.clone(),
        vocab: meta.vocab.words().to_vec(),
        config: meta.config,
        tensors,
    };
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    fs::write(&blob, &bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let manifest: CheckpointManifest = serde_json::from_reader(open(path, "checkpoint")?)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    check_version(&manifest.version, "checkpoint")?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("checkpoint blob {}: {e}", blob.display()))))?;
    if bytes.len() != manifest.blob_bytes {
        return Err(Error::Format(format!(
            "checkpoint blob holds {} bytes, manifest declares {}",
            bytes.len(),
            manifest.blob_bytes
        )));
    }
    let mut model = DenoiserModel::<T>::new(manifest.model.clone())?;
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint stores {} tensors, model has {}",
            manifest.tensors.len(),
            ids.len()
        )));
    }
    for entry in &manifest.tensors {
        if entry.dtype != CHECKPOINT_DTYPE {
            return Err(Error::Format(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {}", entry.name)))?;
        let target = model.params_mut().get_mut(id);
        if target.shape() != (entry.shape[0], entry.shape[1]) {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let len = entry.shape[0] * entry.shape[1] * 4;
        let raw = bytes
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside the blob", entry.name)))?;
        for (dst, chunk) in target.as_mut_slice().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
    }
    Ok(Checkpoint { manifest, model })
}

/// One line of a keyframe file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub index: usize,
    pub frame: Vec<f64>,
}

pub fn write_keyframes<T: Scalar>(path: &Path, frames: &Matrix<T>, mask: &KeyframeMask) -> Result<()> {
    let mut w = create(path)?;
    for &i in mask.keyframe_indices() {
        write_json_line(
            &mut w,
            &KeyframeRecord {
                index: i,
                frame: frames.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
            },
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keyframes(path: &Path) -> Result<Vec<KeyframeRecord>> {
    let mut out = Vec::new();
    for (k, line) in open(path, "keyframe file")?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("keyframe line {}: {e}", k + 1)))?);
    }
    Ok(out)
}

/// Builds the `N × D` keyframe matrix and mask from keyframe records.
pub fn keyframes_to_matrix(records: &[KeyframeRecord], frames: usize, dim: usize) -> Result<(Matrix<f64>, KeyframeMask)> {
    let mut m = Matrix::zeros(frames, dim);
    let mut idx = Vec::with_capacity(records.len());
    for r in records {
        if r.frame.len() != dim {
            return Err(Error::Shape(format!("keyframe {} has {} channels, expected {dim}", r.index, r.frame.len())));
        }
        if r.index >= frames {
            return Err(Error::Range(format!("keyframe index {} outside {frames} frames", r.index)));
        }
        m.row_mut(r.index).copy_from_slice(&r.frame);
        idx.push(r.index);
    }
    Ok((m, KeyframeMask::new(frames, idx)?))
}

/// One line of a motion file: a single frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub features: Vec<f64>,
}

pub fn write_motion_jsonl<T: Scalar>(path: &Path, motion: &Matrix<T>) -> Result<()> {
    let mut w = create(path)?;
    for i in 0..motion.rows() {
        write_json_line(
            &mut w,
            &FrameRecord {
                frame: i,
                features: motion.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
            },
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_motion_jsonl(path: &Path) -> Result<Matrix<f64>> {
    let mut rows = Vec::new();
    for (k, line) in open(path, "motion file")?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("motion line {}: {e}", k + 1)))?;
        rows.push(rec.features);
    }
    Matrix::from_rows(&rows)
}

/// Long-format CSV `frame,channel,value` for plotting tools.
pub fn write_motion_csv<T: Scalar>(path: &Path, motion: &Matrix<T>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "frame,channel,value")?;
    for i in 0..motion.rows() {
        for (c, v) in motion.row(i).iter().enumerate() {
            writeln!(w, "{i},{c},{}", v.to_f64_lossy())?;
        }
    }
    w.flush()?;
    Ok(())
}
