//! Metrics, multi-stream fusion, branch ablation and attention-mask export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{Branch, CapturedMasks};
use crate::error::{Error, Result};
use crate::graph::Subset;
use crate::ingest::{assemble_batch, Augment, DataConfig, SkeletonSequence};
use crate::network::Model;
use crate::tensor::Tensor;

fn rows(scores: &Tensor) -> Result<(usize, usize)> {
    match scores.shape() {
        &[n, k] => Ok((n, k)),
        s => Err(Error::shape("scores", s, &[0, 0])),
    }
}

/// Fraction of samples whose label is among the `k` highest scores. Equal
/// scores rank the lower class index first.
pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = rows(scores)?;
    if labels.len() != n {
        return Err(Error::shape(
            "topk_accuracy",
            scores.shape(),
            &[labels.len()],
        ));
    }
    if n == 0 {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut hits = 0;
    for (row, &l) in scores.data().chunks(classes).zip(labels) {
        if l >= classes {
            return Err(Error::invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > row[l] || (s == row[l] && j < l))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// `(acc_j − acc_j_base) / (acc_b − acc_b_base)`.
pub fn improvement_ratio(acc_j: f64, acc_j_base: f64, acc_b: f64, acc_b_base: f64) -> Result<f64> {
    let den = acc_b - acc_b_base;
    if den == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok((acc_j - acc_j_base) / den)
}

/// Weighted sum of per-stream scores; weights default to 1.
pub fn fuse_streams(streams: &[Tensor], weights: Option<&[f64]>) -> Result<Tensor> {
    let first = streams
        .first()
        .ok_or_else(|| Error::invalid("no score sets to fuse"))?;
    rows(first)?;
    if let Some(w) = weights {
        if w.len() != streams.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} streams",
                w.len(),
                streams.len()
            )));
        }
    }
    let mut out = vec![0.0; first.numel()];
    for (i, s) in streams.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(Error::shape("fuse_streams", first.shape(), s.shape()));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        for (o, &x) in out.iter_mut().zip(s.data()) {
            *o += w * x;
        }
    }
    Tensor::new(first.shape(), out)
}

/// Eval-mode probabilities `(N, K)` over a dataset, batches in parallel.
pub fn predict_dataset(
    model: &Model,
    seqs: &[SkeletonSequence],
    data: &DataConfig,
    batch_size: usize,
    disable: Option<Branch>,
) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
    let parts: Vec<Tensor> = refs
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let batch = assemble_batch(
                chunk,
                data.stream,
                model.graph(),
                data.frames,
                data.persons,
                Augment::None,
                &mut unused,
            )?;
            model.predict(&batch.input, disable)
        })
        .collect::<Result<_>>()?;
    let k = model.config().num_classes;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[seqs.len(), k], data)
}

fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks(k)
        .map(crate::training::argmax)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub full: f64,
    pub without_ra: f64,
    pub without_rd: f64,
    /// Validation samples whose prediction changes with the branch off.
    pub changed_without_ra: usize,
    pub changed_without_rd: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_stream: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationResult>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub improvement_ratios: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_scores(scores: &Tensor, labels: &[usize]) -> Result<Self> {
        let k = rows(scores)?.1;
        Ok(EvalReport {
            samples: labels.len(),
            top1: topk_accuracy(scores, labels, 1)?,
            top5: topk_accuracy(scores, labels, 5.min(k))?,
            ..Default::default()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn labels_of(seqs: &[SkeletonSequence]) -> Vec<usize> {
    seqs.iter().map(|s| s.label).collect()
}

/// Standard evaluation; returns the report and the score matrix.
pub fn evaluate(
    model: &Model,
    seqs: &[SkeletonSequence],
    data: &DataConfig,
    batch_size: usize,
) -> Result<(EvalReport, Tensor)> {
    let scores = predict_dataset(model, seqs, data, batch_size, None)?;
    let mut report = EvalReport::from_scores(&scores, &labels_of(seqs))?;
    report
        .per_stream
        .insert(data.stream.name().to_string(), report.top1);
    Ok((report, scores))
}

/// Evaluates the same parameters with each attention branch switched off.
pub fn ablation_eval(
    model: &Model,
    seqs: &[SkeletonSequence],
    data: &DataConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let labels = labels_of(seqs);
    let (mut report, full) = evaluate(model, seqs, data, batch_size)?;
    let base = argmax_rows(&full);
    let run = |b: Branch| -> Result<(f64, usize)> {
        let s = predict_dataset(model, seqs, data, batch_size, Some(b))?;
        let changed = argmax_rows(&s)
            .iter()
            .zip(&base)
            .filter(|(a, b)| a != b)
            .count();
        Ok((topk_accuracy(&s, &labels, 1)?, changed))
    };
    let (without_ra, changed_without_ra) = run(Branch::Ra)?;
    let (without_rd, changed_without_rd) = run(Branch::Rd)?;
    report.ablation = Some(AblationResult {
        full: report.top1,
        without_ra,
        without_rd,
        changed_without_ra,
        changed_without_rd,
    });
    Ok(report)
}

/// `label,class_0,…` header, then one row per sample.
pub fn write_scores_csv(path: &Path, scores: &Tensor, labels: &[usize]) -> Result<()> {
    let (n, k) = rows(scores)?;
    if labels.len() != n {
        return Err(Error::shape(
            "write_scores_csv",
            scores.shape(),
            &[labels.len()],
        ));
    }
    let mut out = String::from("label");
    for j in 0..k {
        write!(out, ",class_{j}").unwrap();
    }
    out.push('\n');
    for (row, l) in scores.data().chunks(k).zip(labels) {
        write!(out, "{l}").unwrap();
        for x in row {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty score file".into(),
    })?;
    let k = header.split(',').count().saturating_sub(1);
    if !header.starts_with("label") || k == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "expected `label,class_0,...` header".into(),
        });
    }
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(err(format!(
                "expected {} fields, got {}",
                k + 1,
                fields.len()
            )));
        }
        labels.push(
            fields[0]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad label `{}`", fields[0])))?,
        );
        for f in &fields[1..] {
            data.push(
                f.trim()
                    .parse()
                    .map_err(|_| err(format!("bad score `{f}`")))?,
            );
        }
    }
    Ok((Tensor::new(&[labels.len(), k], data)?, labels))
}

/// Channel mean of sample 0 of an `(N, C, V, V)` mask stack.
pub fn channel_mean(mask: &Tensor) -> Result<Tensor> {
    let &[_, c, v, v2] = mask.shape() else {
        return Err(Error::shape("channel_mean", mask.shape(), &[0, 0, 0, 0]));
    };
    if v != v2 || c == 0 {
        return Err(Error::shape("channel_mean", mask.shape(), &[1, c, v, v]));
    }
    let mut out = vec![0.0; v * v];
    for ch in mask.data()[..c * v * v].chunks(v * v) {
        out.iter_mut().zip(ch).for_each(|(o, x)| *o += x / c as f64);
    }
    Tensor::new(&[v, v], out)
}

pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let &[_, cols] = m.shape() else {
        return Err(Error::shape("write_matrix_csv", m.shape(), &[0, 0]));
    };
    let mut out = String::new();
    for row in m.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut n = 0;
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                msg: "unparseable number".into(),
            })?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "ragged row".into(),
            });
        }
        data.extend(row);
        n += 1;
    }
    Tensor::new(&[n, cols.unwrap_or(0)], data)
}

/// 8-bit binary PGM, min-max scaled (a constant matrix maps to 0).
pub fn write_pgm(path: &Path, m: &Tensor) -> Result<()> {
    let &[h, w] = m.shape() else {
        return Err(Error::shape("write_pgm", m.shape(), &[0, 0]));
    };
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(m.data().iter().map(|&x| {
        if span > 0.0 {
            ((x - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an 8-bit binary PGM as `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| Error::corrupt("pgm", m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(corrupt("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| corrupt("bad height"))?;
    let pixels = bytes
        .get(pos + 1..)
        .ok_or_else(|| corrupt("missing pixels"))?;
    if pixels.len() != w * h {
        return Err(corrupt("pixel count does not match the header"));
    }
    Ok((h, w, pixels.to_vec()))
}

/// One exported matrix.
#[derive(Clone, Debug)]
pub struct ExportedMask {
    pub kind: &'static str,
    pub matrix: Tensor,
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Channel-averaged masks of the first sample (first person) of `input` at
/// block `layer`, written as `layer{L}_{subset}_{kind}.csv/.pgm`.
pub fn export_masks(
    model: &Model,
    input: &Tensor,
    layer: usize,
    subset: Subset,
    out_dir: &Path,
) -> Result<Vec<ExportedMask>> {
    let (_, captured) = model.capture_masks(input, layer)?;
    let masks: &CapturedMasks = captured
        .iter()
        .find(|m| m.subset == subset)
        .ok_or_else(|| Error::invalid(format!("no masks captured for subset {}", subset.name())))?;
    fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    let kinds = [
        ("rd", masks.rd.as_ref()),
        ("ra", masks.ra.as_ref()),
        ("hybrid", Some(&masks.hybrid)),
        ("final", Some(&masks.final_mask)),
    ];
    for (kind, t) in kinds {
        let Some(t) = t else { continue };
        let matrix = channel_mean(t)?;
        let stem = format!("layer{layer}_{}_{kind}", subset.name());
        let csv = out_dir.join(format!("{stem}.csv"));
        let pgm = out_dir.join(format!("{stem}.pgm"));
        write_matrix_csv(&csv, &matrix)?;
        write_pgm(&pgm, &matrix)?;
        out.push(ExportedMask {
            kind,
            matrix,
            csv,
            pgm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
