//! Synthetic labeled skeleton sequences on the 25-joint graph.
//!
//! Each class is a parametric motion blended onto a rest pose. With noise
//! level `σ`, every sample draws amplitude, speed, phase and a global offset
//! scaled by `σ`, plus per-coordinate Gaussian jitter of `0.02·σ` metres; at
//! `σ = 0` all samples of a class are identical.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SkeletonSequence;

pub const SYNTHETIC_CLASSES: [&str; 8] = [
    "hand-to-head",
    "arms-raise",
    "leg-swing",
    "torso-lean",
    "hand-wave",
    "squat",
    "reach-forward",
    "stationary",
];

const JOINTS: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            samples_per_class: 50,
            frames: 64,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Standing pose in metres, `y` up, `z` towards the camera.
pub fn rest_pose() -> [[f64; 3]; JOINTS] {
    [
        [0.0, 0.0, 0.0],      // 0 spine base
        [0.0, 0.3, 0.0],      // 1 spine mid
        [0.0, 0.6, 0.0],      // 2 neck
        [0.0, 0.75, 0.0],     // 3 head
        [0.2, 0.5, 0.0],      // 4 left shoulder
        [0.25, 0.25, 0.0],    // 5 left elbow
        [0.28, 0.02, 0.0],    // 6 left wrist
        [0.29, -0.05, 0.0],   // 7 left hand
        [-0.2, 0.5, 0.0],     // 8 right shoulder
        [-0.25, 0.25, 0.0],   // 9 right elbow
        [-0.28, 0.02, 0.0],   // 10 right wrist
        [-0.29, -0.05, 0.0],  // 11 right hand
        [0.1, -0.05, 0.0],    // 12 left hip
        [0.12, -0.5, 0.0],    // 13 left knee
        [0.12, -0.9, 0.0],    // 14 left ankle
        [0.12, -0.95, 0.1],   // 15 left foot
        [-0.1, -0.05, 0.0],   // 16 right hip
        [-0.12, -0.5, 0.0],   // 17 right knee
        [-0.12, -0.9, 0.0],   // 18 right ankle
        [-0.12, -0.95, 0.1],  // 19 right foot
        [0.0, 0.5, 0.0],      // 20 spine shoulder
        [0.3, -0.12, 0.0],    // 21 left hand tip
        [0.26, -0.06, 0.03],  // 22 left thumb
        [-0.3, -0.12, 0.0],   // 23 right hand tip
        [-0.26, -0.06, 0.03], // 24 right thumb
    ]
}

const LEFT_ARM: [usize; 6] = [5, 6, 7, 21, 22, 4];
const RIGHT_ARM: [usize; 6] = [9, 10, 11, 23, 24, 8];
const RIGHT_HAND: [usize; 5] = [10, 11, 23, 24, 9];
const RIGHT_LEG: [usize; 3] = [17, 18, 19];
const UPPER_BODY: [usize; 18] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24, 12, 16,
];

struct Variation {
    amplitude: f64,
    speed: f64,
    phase: f64,
    offset: [f64; 3],
}

/// Rotation of `p` about the `x` axis through `pivot`.
fn rotate_x(p: [f64; 3], pivot: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let (y, z) = (p[1] - pivot[1], p[2] - pivot[2]);
    [p[0], pivot[1] + c * y - s * z, pivot[2] + s * y + c * z]
}

/// Rotation of `p` about the `z` axis through `pivot`.
fn rotate_z(p: [f64; 3], pivot: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let (x, y) = (p[0] - pivot[0], p[1] - pivot[1]);
    [pivot[0] + c * x - s * y, pivot[1] + s * x + c * y, p[2]]
}

/// Pose of class `class` at normalized time `u ∈ [0, 1)`.
fn pose(class: usize, u: f64, var: &Variation) -> [[f64; 3]; JOINTS] {
    let rest = rest_pose();
    let mut p = rest;
    let a = var.amplitude;
    let s = (PI * u * var.speed + var.phase).sin().abs();
    let osc = (2.0 * PI * 3.0 * u * var.speed + var.phase).sin();
    match class {
        // right arm folds up towards the head
        0 => {
            for &j in &RIGHT_ARM[..5] {
                p[j] = rotate_z(p[j], rest[8], -2.3 * a * s);
            }
            for &j in &RIGHT_HAND[..4] {
                p[j] = rotate_z(p[j], p[9], -1.2 * a * s);
            }
        }
        // both arms swing up overhead
        1 => {
            for &j in &LEFT_ARM[..5] {
                p[j] = rotate_z(p[j], rest[4], 2.6 * a * s);
            }
            for &j in &RIGHT_ARM[..5] {
                p[j] = rotate_z(p[j], rest[8], -2.6 * a * s);
            }
        }
        // right leg swings forward and back
        2 => {
            for &j in &RIGHT_LEG {
                p[j] = rotate_x(p[j], rest[16], 0.7 * a * osc);
            }
        }
        // upper body leans forward
        3 => {
            for &j in &UPPER_BODY[..16] {
                p[j] = rotate_x(p[j], rest[0], 0.8 * a * s);
            }
        }
        // right arm raised, forearm waving
        4 => {
            for &j in &RIGHT_ARM[..5] {
                p[j] = rotate_z(p[j], rest[8], -1.6);
            }
            let elbow = p[9];
            for &j in &RIGHT_HAND[..4] {
                p[j] = rotate_z(p[j], elbow, -1.0 + 0.6 * a * osc);
            }
        }
        // knees bend, body drops
        5 => {
            let drop = 0.35 * a * s;
            for (j, q) in p.iter_mut().enumerate() {
                if ![14, 15, 18, 19].contains(&j) {
                    q[1] -= drop;
                }
                if [13, 17].contains(&j) {
                    q[1] += drop * 0.5;
                    q[2] += drop;
                }
            }
        }
        // right arm extends forward
        6 => {
            for &j in &RIGHT_ARM[..5] {
                p[j] = rotate_x(p[j], rest[8], -1.5 * a * s);
            }
        }
        // standing with slight sway
        _ => {
            for q in p.iter_mut() {
                q[0] += 0.01 * a * osc;
            }
        }
    }
    for q in p.iter_mut() {
        for (c, o) in q.iter_mut().zip(var.offset) {
            *c += o;
        }
    }
    p
}

/// Samples ordered by class, then index; labels are class indices.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Vec<SkeletonSequence>> {
    if spec.num_classes == 0 || spec.num_classes > SYNTHETIC_CLASSES.len() {
        return Err(Error::invalid(format!(
            "synthetic classes must be in 1..={}, got {}",
            SYNTHETIC_CLASSES.len(),
            spec.num_classes
        )));
    }
    if spec.frames == 0 || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid(
            "synthetic frames must be positive and noise finite and non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let sigma = spec.noise;
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let mut z = || std.sample(&mut rng);
            let var = Variation {
                amplitude: (1.0 + 0.15 * sigma * z()).clamp(0.5, 1.5),
                speed: (1.0 + 0.1 * sigma * z()).clamp(0.7, 1.3),
                phase: 0.3 * sigma * z(),
                offset: [0.1 * sigma * z(), 0.05 * sigma * z(), 0.1 * sigma * z()],
            };
            let mut seq = SkeletonSequence::zeros(1, spec.frames, JOINTS, 3);
            for t in 0..spec.frames {
                let p = pose(class, t as f64 / spec.frames as f64, &var);
                for (j, q) in p.iter().enumerate() {
                    let slot = seq.joint_mut(0, t, j);
                    for (dst, &c) in slot.iter_mut().zip(q) {
                        *dst = c + 0.02 * sigma * std.sample(&mut rng);
                    }
                }
            }
            seq.label = class;
            seq.source_id = format!("synth-{}-{i}", SYNTHETIC_CLASSES[class]);
            out.push(seq);
        }
    }
    Ok(out)
}
