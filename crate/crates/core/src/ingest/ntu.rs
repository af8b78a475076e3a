//! NTU RGB+D `.skeleton` text files.
//!
//! Layout: frame count; then per frame a body count followed, per body, by a
//! metadata line, a joint-count line and one line per joint whose first three
//! fields are camera-space `x y z`. Remaining per-joint fields are ignored.

use std::fmt::Write as _;

use super::{SkeletonSequence, MAX_PERSONS};
use crate::error::{Error, Result};

pub const NTU_JOINTS: usize = 25;

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.last = i + 1;
                    if !l.trim().is_empty() {
                        return Ok(l.trim());
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: self.last + 1,
                        msg: format!("truncated file: expected {what}"),
                    })
                }
            }
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let line = self.next(what)?;
        let first = line.split_whitespace().next().unwrap_or("");
        first
            .parse()
            .map_err(|_| self.err(format!("expected {what}, got `{line}`")))
    }

    fn err(&self, msg: String) -> Error {
        Error::Parse {
            line: self.last,
            msg,
        }
    }
}

pub fn parse_ntu_skeleton(text: &str) -> Result<SkeletonSequence> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if text.trim().is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "truncated file: expected frame count".into(),
        });
    }
    let frames = lines.count("frame count")?;
    // per frame, per body: 25 joints × xyz
    let mut bodies: Vec<Vec<[f64; NTU_JOINTS * 3]>> = Vec::with_capacity(frames);
    let mut persons = 0;
    for _ in 0..frames {
        let count = lines.count("body count")?;
        if count > MAX_PERSONS {
            return Err(Error::TooManyBodies(count));
        }
        persons = persons.max(count);
        let mut frame = Vec::with_capacity(count);
        for _ in 0..count {
            lines.next("body metadata")?;
            let joints = lines.count("joint count")?;
            if joints != NTU_JOINTS {
                return Err(lines.err(format!("joint count {joints}, expected {NTU_JOINTS}")));
            }
            let mut xyz = [0.0; NTU_JOINTS * 3];
            for j in 0..NTU_JOINTS {
                let line = lines.next("joint line")?;
                let mut fields = line.split_whitespace();
                for k in 0..3 {
                    let f = fields
                        .next()
                        .ok_or_else(|| lines.err(format!("joint {j} has fewer than 3 fields")))?;
                    xyz[j * 3 + k] = f
                        .parse()
                        .map_err(|_| lines.err(format!("unparseable real `{f}`")))?;
                }
            }
            frame.push(xyz);
        }
        bodies.push(frame);
    }
    let mut seq = SkeletonSequence::zeros(persons, frames, NTU_JOINTS, 3);
    for (t, frame) in bodies.iter().enumerate() {
        for (m, xyz) in frame.iter().enumerate() {
            for j in 0..NTU_JOINTS {
                seq.joint_mut(m, t, j)
                    .copy_from_slice(&xyz[j * 3..j * 3 + 3]);
            }
        }
    }
    Ok(seq)
}

/// Writes the sequence back in `.skeleton` layout with zeroed metadata.
/// Persons whose frame is entirely zero are omitted from that frame.
pub fn write_ntu_skeleton(seq: &SkeletonSequence) -> Result<String> {
    if seq.joints() != NTU_JOINTS || seq.channels() < 3 {
        return Err(Error::shape(
            "write_ntu_skeleton",
            &[seq.joints(), seq.channels()],
            &[NTU_JOINTS, 3],
        ));
    }
    let mut out = String::new();
    let frames = seq.valid_frames.min(seq.frames());
    writeln!(out, "{frames}").unwrap();
    for t in 0..frames {
        let present: Vec<usize> = (0..seq.persons())
            .filter(|&m| (0..NTU_JOINTS).any(|j| seq.joint(m, t, j).iter().any(|&x| x != 0.0)))
            .collect();
        // keep slot order stable: a body in slot 1 implies slot 0 is written too
        let count = present.last().map_or(0, |&m| m + 1);
        writeln!(out, "{count}").unwrap();
        for m in 0..count {
            writeln!(out, "0 0 0 0 0 0 0 0 0 2").unwrap();
            writeln!(out, "{NTU_JOINTS}").unwrap();
            for j in 0..NTU_JOINTS {
                let p = seq.joint(m, t, j);
                writeln!(out, "{:?} {:?} {:?} 0 0 0 0 0 0 0 0 2", p[0], p[1], p[2]).unwrap();
            }
        }
    }
    Ok(out)
}
