//! Skeleton sequences: parsing, derived input streams and batch assembly.

mod cache;
mod ntu;
mod openpose;

pub use cache::{
    load_manifest, read_cache, read_cache_file, write_cache, write_cache_file, ManifestEntry,
};
pub use ntu::{parse_ntu_skeleton, write_ntu_skeleton};
pub use openpose::{parse_openpose_json, write_openpose_json};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

pub const MAX_PERSONS: usize = 2;

/// Joint coordinates laid out as `[person][frame][joint][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    persons: usize,
    frames: usize,
    joints: usize,
    channels: usize,
    coords: Vec<f64>,
    pub label: usize,
    pub valid_frames: usize,
    pub source_id: String,
}

impl SkeletonSequence {
    pub fn zeros(persons: usize, frames: usize, joints: usize, channels: usize) -> Self {
        SkeletonSequence {
            persons,
            frames,
            joints,
            channels,
            coords: vec![0.0; persons * frames * joints * channels],
            label: 0,
            valid_frames: frames,
            source_id: String::new(),
        }
    }

    pub fn from_coords(
        persons: usize,
        frames: usize,
        joints: usize,
        channels: usize,
        coords: Vec<f64>,
    ) -> Result<Self> {
        if coords.len() != persons * frames * joints * channels {
            return Err(Error::shape(
                "SkeletonSequence",
                &[persons, frames, joints, channels],
                &[coords.len()],
            ));
        }
        if persons > MAX_PERSONS {
            return Err(Error::TooManyBodies(persons));
        }
        Ok(SkeletonSequence {
            persons,
            frames,
            joints,
            channels,
            coords,
            label: 0,
            valid_frames: frames,
            source_id: String::new(),
        })
    }

    pub fn persons(&self) -> usize {
        self.persons
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    fn offset(&self, m: usize, t: usize, v: usize) -> usize {
        ((m * self.frames + t) * self.joints + v) * self.channels
    }

    pub fn joint(&self, m: usize, t: usize, v: usize) -> &[f64] {
        let o = self.offset(m, t, v);
        &self.coords[o..o + self.channels]
    }

    pub fn joint_mut(&mut self, m: usize, t: usize, v: usize) -> &mut [f64] {
        let o = self.offset(m, t, v);
        &mut self.coords[o..o + self.channels]
    }

    fn same_layout(&self) -> Self {
        let mut out = Self::zeros(self.persons, self.frames, self.joints, self.channels);
        out.label = self.label;
        out.valid_frames = self.valid_frames;
        out.source_id = self.source_id.clone();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StreamKind {
    #[default]
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Joint,
        StreamKind::Bone,
        StreamKind::JointMotion,
        StreamKind::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::JointMotion => "joint-motion",
            StreamKind::BoneMotion => "bone-motion",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for StreamKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StreamKind> for String {
    fn from(k: StreamKind) -> String {
        k.name().to_string()
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('-', "_") == s)
            .ok_or_else(|| Error::invalid(format!("unknown stream `{s}`")))
    }
}

/// `bone[child] = joint[child] − joint[parent]`; roots get the zero vector.
pub fn to_bone(seq: &SkeletonSequence, graph: &GraphSpec) -> Result<SkeletonSequence> {
    if seq.joints != graph.num_joints() {
        return Err(Error::shape(
            "to_bone",
            &[seq.joints],
            &[graph.num_joints()],
        ));
    }
    let parents = graph.parents();
    let mut out = seq.same_layout();
    for m in 0..seq.persons {
        for t in 0..seq.frames {
            for (v, parent) in parents.iter().enumerate() {
                let Some(p) = *parent else { continue };
                let (child, par) = (seq.joint(m, t, v), seq.joint(m, t, p));
                let diff: Vec<f64> = child.iter().zip(par).map(|(a, b)| a - b).collect();
                out.joint_mut(m, t, v).copy_from_slice(&diff);
            }
        }
    }
    Ok(out)
}

/// `motion[t] = x[t+1] − x[t]`; the last valid frame and any padding get zeros.
pub fn to_motion(seq: &SkeletonSequence) -> SkeletonSequence {
    let mut out = seq.same_layout();
    let last = seq.valid_frames.min(seq.frames);
    for m in 0..seq.persons {
        for t in 0..last.saturating_sub(1) {
            for v in 0..seq.joints {
                let diff: Vec<f64> = seq
                    .joint(m, t + 1, v)
                    .iter()
                    .zip(seq.joint(m, t, v))
                    .map(|(a, b)| a - b)
                    .collect();
                out.joint_mut(m, t, v).copy_from_slice(&diff);
            }
        }
    }
    out
}

pub fn derive_stream(
    seq: &SkeletonSequence,
    stream: StreamKind,
    graph: &GraphSpec,
) -> Result<SkeletonSequence> {
    Ok(match stream {
        StreamKind::Joint => seq.clone(),
        StreamKind::Bone => to_bone(seq, graph)?,
        StreamKind::JointMotion => to_motion(seq),
        StreamKind::BoneMotion => to_motion(&to_bone(seq, graph)?),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    #[default]
    None,
    /// Random in-plane rotation in ±10° and translation in ±0.1 per sample.
    Kinetics,
}

pub const AUG_MAX_ROTATION_DEG: f64 = 10.0;
pub const AUG_MAX_TRANSLATION: f64 = 0.1;

/// How sequences become fixed-shape model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub stream: StreamKind,
    /// Frames per sample after looping.
    pub frames: usize,
    /// Person slots per sample.
    pub persons: usize,
    /// Applied to training batches only.
    pub augment: Augment,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            stream: StreamKind::Joint,
            frames: 300,
            persons: MAX_PERSONS,
            augment: Augment::None,
        }
    }
}

/// A fixed-shape batch `(N, M, C, T, V)` and its labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<usize>,
}

/// Stacks sequences into `(N, M, C, T, V)`, looping short sequences to
/// `max_t` frames and zero-filling absent persons.
pub fn assemble_batch<R: Rng + ?Sized>(
    seqs: &[&SkeletonSequence],
    stream: StreamKind,
    graph: &GraphSpec,
    max_t: usize,
    max_m: usize,
    augment: Augment,
    rng: &mut R,
) -> Result<Batch> {
    let first = seqs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if max_t == 0 || max_m == 0 {
        return Err(Error::invalid("max_t and max_m must be positive"));
    }
    let (c, v) = (first.channels, first.joints);
    let n = seqs.len();
    let mut data = vec![0.0; n * max_m * c * max_t * v];
    let mut labels = Vec::with_capacity(n);
    for (ni, seq) in seqs.iter().enumerate() {
        if seq.channels != c || seq.joints != v {
            return Err(Error::shape(
                "assemble_batch",
                &[c, v],
                &[seq.channels, seq.joints],
            ));
        }
        let mut s = derive_stream(seq, stream, graph)?;
        if augment == Augment::Kinetics {
            augment_in_plane(&mut s, rng);
        }
        labels.push(seq.label);
        let valid = s.valid_frames.min(s.frames);
        if valid == 0 {
            continue;
        }
        for m in 0..s.persons.min(max_m) {
            for t in 0..max_t {
                let src_t = t % valid;
                for vv in 0..v {
                    for (ci, &x) in s.joint(m, src_t, vv).iter().enumerate() {
                        data[(((ni * max_m + m) * c + ci) * max_t + t) * v + vv] = x;
                    }
                }
            }
        }
    }
    Ok(Batch {
        input: Tensor::new(&[n, max_m, c, max_t, v], data)?,
        labels,
    })
}

fn augment_in_plane<R: Rng + ?Sized>(seq: &mut SkeletonSequence, rng: &mut R) {
    let max_rot = AUG_MAX_ROTATION_DEG.to_radians();
    let theta = rng.random_range(-max_rot..=max_rot);
    let dx = rng.random_range(-AUG_MAX_TRANSLATION..=AUG_MAX_TRANSLATION);
    let dy = rng.random_range(-AUG_MAX_TRANSLATION..=AUG_MAX_TRANSLATION);
    let (sin, cos) = theta.sin_cos();
    if seq.channels < 2 {
        return;
    }
    for j in seq.coords.chunks_mut(seq.channels) {
        let (x, y) = (j[0], j[1]);
        // undetected OpenPose joints are (0, 0) and stay that way
        if x == 0.0 && y == 0.0 {
            continue;
        }
        j[0] = cos * x - sin * y + dx;
        j[1] = sin * x + cos * y + dy;
    }
}
