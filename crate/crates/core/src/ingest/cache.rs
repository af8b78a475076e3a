//! Binary dataset cache and the plain-text manifest it is built from.
//!
//! Cache layout (little-endian): `HAGD`, sample count `u64`, then per sample
//! `label, M, T, V, C` as `u64` followed by `M·T·V·C` reals in
//! `[person][frame][joint][channel]` order. Only valid frames are stored.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{parse_ntu_skeleton, parse_openpose_json, SkeletonSequence};
use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_u64};

pub const DATASET_MAGIC: &[u8; 4] = b"HAGD";

pub fn write_cache<W: Write>(w: &mut W, seqs: &[SkeletonSequence]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())?;
    for s in seqs {
        let t = s.valid_frames.min(s.frames());
        for d in [s.label, s.persons(), t, s.joints(), s.channels()] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let per_person = s.frames() * s.joints() * s.channels();
        let keep = t * s.joints() * s.channels();
        let mut buf = Vec::with_capacity(s.persons() * keep * 8);
        for m in 0..s.persons() {
            for x in &s.coords()[m * per_person..m * per_person + keep] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_cache<R: Read>(r: &mut R) -> Result<Vec<SkeletonSequence>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::corrupt(
            "dataset cache",
            format!("bad magic {magic:?}"),
        ));
    }
    let count = read_u64(r)?;
    let mut seqs = Vec::new();
    for i in 0..count {
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u64(r)? as usize;
        }
        let [label, m, t, v, c] = dims;
        let numel = [m, t, v, c]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| {
                Error::corrupt(
                    "dataset cache",
                    format!("sample {i}: implausible dims {dims:?}"),
                )
            })?;
        let mut bytes = vec![0u8; numel * 8];
        read_exact(r, &mut bytes)?;
        let coords = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut seq = SkeletonSequence::from_coords(m, t, v, c, coords)?;
        seq.label = label;
        seq.source_id = format!("cache#{i}");
        seqs.push(seq);
    }
    Ok(seqs)
}

pub fn write_cache_file(path: &Path, seqs: &[SkeletonSequence]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_cache(&mut w, seqs)?;
    w.flush()?;
    Ok(())
}

pub fn read_cache_file(path: &Path) -> Result<Vec<SkeletonSequence>> {
    read_cache(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
}

impl ManifestEntry {
    /// Parses the file by extension (`.skeleton` or `.json`). The manifest
    /// label wins; otherwise the JSON `label_index` or an NTU `A###` action
    /// code in the file name is used.
    pub fn load(&self) -> Result<SkeletonSequence> {
        let text = fs::read_to_string(&self.path)?;
        let ext = self.path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let name = self
            .path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_string();
        let mut seq = match ext {
            "skeleton" => {
                let mut s = parse_ntu_skeleton(&text)?;
                if let Some(a) = ntu_action_label(&name) {
                    s.label = a;
                }
                s
            }
            "json" => parse_openpose_json(&text)?,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown skeleton format: {}",
                    self.path.display()
                )))
            }
        };
        if let Some(l) = self.label {
            seq.label = l;
        }
        seq.source_id = name;
        Ok(seq)
    }
}

/// `A###` action code in an NTU file name, as a 0-based label.
fn ntu_action_label(name: &str) -> Option<usize> {
    let i = name.find('A')?;
    let digits = name.get(i + 1..i + 4)?;
    digits.parse::<usize>().ok()?.checked_sub(1)
}

/// One `path [label]` per line; `#` comments; relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let file = fields.next().expect("non-empty line");
        let label = fields
            .next()
            .map(|l| {
                l.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("label `{l}` is not a non-negative integer"),
                })
            })
            .transpose()?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected `path [label]`".into(),
            });
        }
        let p = Path::new(file);
        out.push(ManifestEntry {
            path: if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            },
            label,
        });
    }
    Ok(out)
}
