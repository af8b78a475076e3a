//! Keypoint JSON in the ST-GCN Kinetics layout:
//!
//! ```json
//! {"data": [{"frame_index": 1,
//!            "skeleton": [{"pose": [x0, y0, x1, y1, ...], "score": [s0, s1, ...]}]}],
//!  "label": "...", "label_index": 3}
//! ```
//!
//! Channels are `(x, y, confidence)`.

use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, MAX_PERSONS};
use crate::error::{Error, Result};

pub const OPENPOSE_JOINTS: usize = 18;

#[derive(Debug, Deserialize, Serialize)]
struct Document {
    data: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_index: Option<i64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct Frame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_index: Option<usize>,
    #[serde(default)]
    skeleton: Vec<Body>,
}

#[derive(Debug, Deserialize, Serialize)]
struct Body {
    pose: Vec<f64>,
    score: Vec<f64>,
}

impl Body {
    fn mean_score(&self) -> f64 {
        self.score.iter().sum::<f64>() / self.score.len().max(1) as f64
    }
}

pub fn parse_openpose_json(text: &str) -> Result<SkeletonSequence> {
    let doc: Document = serde_json::from_str(text)?;
    let mut slots = Vec::with_capacity(doc.data.len());
    let mut frames = 0;
    for (order, frame) in doc.data.iter().enumerate() {
        let t = match frame.frame_index {
            Some(0) => return Err(Error::invalid("frame_index is 1-based")),
            Some(i) => i - 1,
            None => order,
        };
        frames = frames.max(t + 1);
        for (b, body) in frame.skeleton.iter().enumerate() {
            if body.pose.len() != 2 * OPENPOSE_JOINTS || body.score.len() != OPENPOSE_JOINTS {
                return Err(Error::invalid(format!(
                    "frame {t} body {b}: expected {} pose and {OPENPOSE_JOINTS} score values, got {} and {}",
                    2 * OPENPOSE_JOINTS,
                    body.pose.len(),
                    body.score.len()
                )));
            }
        }
        // most confident bodies first; ties keep file order
        let mut ranked: Vec<&Body> = frame.skeleton.iter().collect();
        ranked.sort_by(|a, b| b.mean_score().total_cmp(&a.mean_score()));
        ranked.truncate(MAX_PERSONS);
        slots.push((t, ranked));
    }
    let persons = slots.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut seq = SkeletonSequence::zeros(persons, frames, OPENPOSE_JOINTS, 3);
    for (t, ranked) in slots {
        for (m, body) in ranked.into_iter().enumerate() {
            for j in 0..OPENPOSE_JOINTS {
                seq.joint_mut(m, t, j).copy_from_slice(&[
                    body.pose[2 * j],
                    body.pose[2 * j + 1],
                    body.score[j],
                ]);
            }
        }
    }
    seq.label = doc
        .label_index
        .and_then(|l| usize::try_from(l).ok())
        .unwrap_or(0);
    Ok(seq)
}

/// Inverse of [`parse_openpose_json`]; all-zero persons are left out of a frame.
pub fn write_openpose_json(seq: &SkeletonSequence) -> Result<String> {
    if seq.joints() != OPENPOSE_JOINTS || seq.channels() != 3 {
        return Err(Error::shape(
            "write_openpose_json",
            &[seq.joints(), seq.channels()],
            &[OPENPOSE_JOINTS, 3],
        ));
    }
    let data = (0..seq.valid_frames.min(seq.frames()))
        .map(|t| Frame {
            frame_index: Some(t + 1),
            skeleton: (0..seq.persons())
                .filter(|&m| {
                    (0..OPENPOSE_JOINTS).any(|j| seq.joint(m, t, j).iter().any(|&x| x != 0.0))
                })
                .map(|m| Body {
                    pose: (0..OPENPOSE_JOINTS)
                        .flat_map(|j| seq.joint(m, t, j)[..2].to_vec())
                        .collect(),
                    score: (0..OPENPOSE_JOINTS)
                        .map(|j| seq.joint(m, t, j)[2])
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let doc = Document {
        data,
        label: None,
        label_index: Some(seq.label as i64),
    };
    Ok(serde_json::to_string(&doc)?)
}
