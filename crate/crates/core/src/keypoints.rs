//! Whole-body keypoint sequences: data model, JSON Lines I/O and
//! preprocessing.
//!
//! Frames are stored flat in `T × V × C` row-major order where `V` is the
//! joint count (133 for the COCO-WholeBody layout) and `C` is 2 (x, y) or
//! 3 (x, y, confidence).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fnv1a, mix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 133;
pub const LAYOUT_NAME: &str = "coco-wholebody-133";

/// A named contiguous run of joint indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub len: usize,
}

/// Joint layout. Segment order follows the COCO-WholeBody index order:
/// body `0..17`, feet `17..23`, face `23..91`, left hand `91..112`,
/// right hand `112..133`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointLayout {
    pub name: &'static str,
    pub segments: &'static [Segment],
}

pub const COCO_WHOLEBODY: JointLayout = JointLayout {
    name: LAYOUT_NAME,
    segments: &[
        Segment { name: "body", len: 17 },
        Segment { name: "feet", len: 6 },
        Segment { name: "face", len: 68 },
        Segment { name: "left_hand", len: 21 },
        Segment { name: "right_hand", len: 21 },
    ],
};

impl JointLayout {
    pub fn num_joints(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Joint index range of the named segment.
    pub fn range(&self, segment: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for s in self.segments {
            if s.name == segment {
                return Some(start..start + s.len);
            }
            start += s.len;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    /// Flat `T × V × C` coordinates.
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub fps: f64,
    pub identity: String,
    pub source_id: String,
}

impl KeypointSequence {
    pub fn new(
        frames: Vec<f64>,
        num_frames: usize,
        joints: usize,
        channels: usize,
        fps: f64,
        identity: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            num_frames,
            joints,
            channels,
            fps,
            identity: identity.into(),
            source_id: source_id.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::Value(format!("sequence `{}` has no frames", self.source_id)));
        }
        if !(self.channels == 2 || self.channels == 3) {
            return Err(Error::Value(format!(
                "sequence `{}` has {} channels; expected 2 or 3",
                self.source_id, self.channels
            )));
        }
        if self.frames.len() != self.num_frames * self.joints * self.channels {
            return Err(Error::InvalidShape {
                shape: vec![self.num_frames, self.joints, self.channels],
                reason: format!("holds {} values", self.frames.len()),
            });
        }
        if let Some(bad) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "sequence `{}`: non-finite coordinate at flat index {bad}",
                self.source_id
            )));
        }
        if self.has_confidence() {
            let bad = self
                .frames
                .chunks(3)
                .position(|j| !(0.0..=1.0).contains(&j[2]));
            if let Some(bad) = bad {
                return Err(Error::Value(format!(
                    "sequence `{}`: confidence outside [0, 1] at joint slot {bad}",
                    self.source_id
                )));
            }
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Value(format!("sequence `{}`: fps must be positive", self.source_id)));
        }
        Ok(())
    }

    pub fn has_confidence(&self) -> bool {
        self.channels == 3
    }

    pub fn frame_len(&self) -> usize {
        self.joints * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, joint: usize, channel: usize) -> f64 {
        self.frames[(t * self.joints + joint) * self.channels + channel]
    }

    fn with_frames(&self, frames: Vec<f64>, num_frames: usize) -> Self {
        Self {
            frames,
            num_frames,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<KeypointSequence>,
    /// Class index → identity, sorted lexicographically.
    pub classes: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Builds the label index from the identities present.
    pub fn new(sequences: Vec<KeypointSequence>) -> Self {
        let ids: BTreeSet<String> = sequences.iter().map(|s| s.identity.clone()).collect();
        Self::with_classes(sequences, ids.into_iter().collect())
    }

    fn with_classes(sequences: Vec<KeypointSequence>, classes: Vec<String>) -> Self {
        let index = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        Self {
            sequences,
            classes,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn label_of(&self, identity: &str) -> Option<usize> {
        self.index.get(identity).copied()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .map(|s| self.index[&s.identity])
            .collect()
    }

    /// Applies `f` to every sequence, keeping the label index.
    pub fn try_map(&self, f: impl Fn(&KeypointSequence) -> Result<KeypointSequence>) -> Result<Self> {
        let sequences = self.sequences.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Self::with_classes(sequences, self.classes.clone()))
    }

    /// Subset by position, keeping the label index.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self::with_classes(
            indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            self.classes.clone(),
        )
    }

    /// Stacks the selected sequences into a `[B, T, V, C_in]` tensor.
    /// All selected sequences must share `T` and `V`; `C_in` is 2, or 3 when
    /// `with_confidence` is set.
    pub fn batch_tensor<T: Scalar>(&self, indices: &[usize], with_confidence: bool) -> Result<Tensor<T>> {
        let first = self
            .sequences
            .get(*indices.first().ok_or(Error::EmptyDataset)?)
            .ok_or(Error::EmptyDataset)?;
        let (t, v) = (first.num_frames, first.joints);
        let c_in = if with_confidence { 3 } else { 2 };
        let mut data = Vec::with_capacity(indices.len() * t * v * c_in);
        for &i in indices {
            let s = &self.sequences[i];
            if s.num_frames != t || s.joints != v {
                return Err(Error::shape(
                    "batch_tensor",
                    &[t, v],
                    &[s.num_frames, s.joints],
                ));
            }
            if with_confidence && !s.has_confidence() {
                return Err(Error::Value(format!(
                    "sequence `{}` has no confidence channel",
                    s.source_id
                )));
            }
            for joint in s.frames.chunks(s.channels) {
                data.extend(joint[..c_in].iter().map(|&x| T::of(x)));
            }
        }
        Tensor::new(vec![indices.len(), t, v, c_in], data)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    source_id: String,
    identity: String,
    fps: f64,
    layout: String,
    frames: Vec<Vec<Vec<f64>>>,
}

fn parse_record(line: &str, lineno: usize) -> Result<KeypointSequence> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    if rec.layout != LAYOUT_NAME {
        return Err(Error::Parse {
            line: lineno,
            message: format!("unsupported layout `{}`", rec.layout),
        });
    }
    if rec.frames.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            message: "sequence has no frames".into(),
        });
    }
    let channels = rec.frames[0].first().map(|j| j.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(rec.frames.len() * NUM_JOINTS * channels);
    for (t, frame) in rec.frames.iter().enumerate() {
        if frame.len() != NUM_JOINTS {
            return Err(Error::JointCount {
                line: lineno,
                frame: t,
                found: frame.len(),
            });
        }
        for (j, joint) in frame.iter().enumerate() {
            if joint.len() != channels {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!(
                        "frame {t}, joint {j}: {} channels, expected {channels}",
                        joint.len()
                    ),
                });
            }
            flat.extend_from_slice(joint);
        }
    }
    let n = rec.frames.len();
    KeypointSequence::new(flat, n, NUM_JOINTS, channels, rec.fps, rec.identity, rec.source_id).map_err(
        |e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        },
    )
}

/// Reads a JSON Lines file, one sequence per line. Blank lines are
/// skipped; the first malformed line aborts with its 1-based number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut sequences = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = parse_record(&line, i + 1)?;
        if !seen.insert(seq.source_id.clone()) {
            return Err(Error::DuplicateSource(seq.source_id));
        }
        sequences.push(seq);
    }
    Ok(Dataset::new(sequences))
}

pub fn write_jsonl(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    for s in &dataset.sequences {
        let frames = (0..s.num_frames)
            .map(|t| s.frame(t).chunks(s.channels).map(<[f64]>::to_vec).collect())
            .collect();
        let rec = Record {
            source_id: s.source_id.clone(),
            identity: s.identity.clone(),
            fps: s.fps,
            layout: LAYOUT_NAME.to_string(),
            frames,
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Joints with confidence at or below this are ignored when computing the
/// normalization bounding box.
pub const CONFIDENCE_THRESHOLD: f64 = 0.3;

/// Centers the sequence-wide bounding box of confident joints on the
/// origin and scales its longer side to 2.
pub fn normalize_sequence(seq: &KeypointSequence) -> Result<KeypointSequence> {
    let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
    let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in 0..seq.num_frames {
        let mut any = false;
        for joint in seq.frame(t).chunks(seq.channels) {
            if seq.has_confidence() && joint[2] <= CONFIDENCE_THRESHOLD {
                continue;
            }
            any = true;
            lo_x = lo_x.min(joint[0]);
            hi_x = hi_x.max(joint[0]);
            lo_y = lo_y.min(joint[1]);
            hi_y = hi_y.max(joint[1]);
        }
        if !any {
            return Err(Error::Value(format!(
                "sequence `{}`: frame {t} has no joint above confidence {CONFIDENCE_THRESHOLD}",
                seq.source_id
            )));
        }
    }
    let side = (hi_x - lo_x).max(hi_y - lo_y);
    if !(side > 0.0) {
        return Err(Error::DegenerateBox(seq.source_id.clone()));
    }
    let (cx, cy) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
    let scale = 2.0 / side;
    let mut frames = seq.frames.clone();
    for joint in frames.chunks_mut(seq.channels) {
        joint[0] = (joint[0] - cx) * scale;
        joint[1] = (joint[1] - cy) * scale;
    }
    Ok(seq.with_frames(frames, seq.num_frames))
}

/// Keeps every `stride`-th frame, then center-crops or pads (repeating the
/// last kept frame) to exactly `target` frames.
pub fn resample_to_length(seq: &KeypointSequence, stride: usize, target: usize) -> Result<KeypointSequence> {
    if stride == 0 || target == 0 {
        return Err(Error::Config("stride and target length must be positive".into()));
    }
    let kept: Vec<usize> = (0..seq.num_frames).step_by(stride).collect();
    let chosen: Vec<usize> = if kept.len() >= target {
        let start = (kept.len() - target) / 2;
        kept[start..start + target].to_vec()
    } else {
        let last = *kept.last().expect("T >= 1");
        kept.iter()
            .copied()
            .chain(std::iter::repeat_n(last, target - kept.len()))
            .collect()
    };
    let mut frames = Vec::with_capacity(target * seq.frame_len());
    for t in chosen {
        frames.extend_from_slice(seq.frame(t));
    }
    let mut out = seq.with_frames(frames, target);
    out.fps = seq.fps / stride as f64;
    Ok(out)
}

/// Pipeline applied before batching: optional normalization, then
/// resampling to a fixed length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub normalize: bool,
    pub stride: usize,
    pub frames: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            normalize: true,
            stride: 2,
            frames: 30,
        }
    }
}

pub fn preprocess(dataset: &Dataset, spec: Preprocess) -> Result<Dataset> {
    dataset.try_map(|s| {
        let s = if spec.normalize {
            normalize_sequence(s)?
        } else {
            s.clone()
        };
        resample_to_length(&s, spec.stride, spec.frames)
    })
}

/// Frame-to-frame differences of a flat `T × (V·C)` array:
/// `out[t] = frames[t + 1] − frames[t]`.
pub fn velocity(frames: &[f64], num_frames: usize) -> Result<Vec<f64>> {
    if num_frames < 2 {
        return Err(Error::Value(format!(
            "velocity needs at least 2 frames, got {num_frames}"
        )));
    }
    if frames.len() % num_frames != 0 {
        return Err(Error::shape("velocity", &[frames.len()], &[num_frames]));
    }
    let n = frames.len() / num_frames;
    Ok((0..(num_frames - 1) * n)
        .map(|i| frames[i + n] - frames[i])
        .collect())
}

/// Velocity of a whole sequence (`T − 1` frames, all channels).
pub fn sequence_velocity(seq: &KeypointSequence) -> Result<KeypointSequence> {
    let v = velocity(&seq.frames, seq.num_frames)?;
    Ok(seq.with_frames(v, seq.num_frames - 1))
}

/// Frames at indices `0, k, 2k, …` of a flat `T × frame_len` array.
pub fn subsample_stride(frames: &[f64], num_frames: usize, k: usize) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::Config("stride k must be >= 1".into()));
    }
    if num_frames == 0 || frames.len() % num_frames != 0 {
        return Err(Error::shape("subsample_stride", &[frames.len()], &[num_frames]));
    }
    let n = frames.len() / num_frames;
    Ok((0..num_frames)
        .step_by(k)
        .flat_map(|t| frames[t * n..(t + 1) * n].iter().copied())
        .collect())
}

/// Number of frames kept by [`subsample_stride`].
pub fn strided_len(num_frames: usize, k: usize) -> usize {
    num_frames.div_ceil(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Test-set size for an identity with `n` sequences: the test share
/// rounded down, at least 1.
pub fn test_count(n: usize, train_fraction: f64) -> usize {
    (((1.0 - train_fraction) * n as f64 + 1e-9).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Stratified per-identity split at the sequence (utterance) level.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} must lie in (0, 1)",
            spec.train_fraction
        )));
    }
    let mut by_identity: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.sequences.iter().enumerate() {
        by_identity.entry(&s.identity).or_default().push(i);
    }
    let mut test = vec![false; dataset.len()];
    for (identity, members) in &by_identity {
        if members.len() < 2 {
            return Err(Error::SingletonIdentity(identity.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, fnv1a(identity)]));
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..test_count(members.len(), spec.train_fraction)] {
            test[i] = true;
        }
    }
    let train_idx: Vec<usize> = (0..dataset.len()).filter(|&i| !test[i]).collect();
    let test_idx: Vec<usize> = (0..dataset.len()).filter(|&i| test[i]).collect();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}
