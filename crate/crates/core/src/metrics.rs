//! Comparisons between trained and predicted geometry.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{entropy, SoftLabelDataset};
use crate::linalg::{nuclear_norm, Mat};
use crate::subspace::{check_shape, DimensionMismatch, SubspaceProjector};
use crate::theory::TheoryPrediction;
use crate::ufm::{ce_loss, EmbeddingPair};

/// Stabilizer in [`ssim`].
pub const SSIM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Columns,
    Rows,
}

/// Cosine-similarity matrix together with the indices of zero vectors,
/// whose rows and columns are set to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCos {
    pub matrix: Mat,
    pub zero_vectors: Vec<usize>,
}

pub fn gram_cos_flagged(x: &Mat, by: Axis) -> GramCos {
    let vecs = match by {
        Axis::Columns => x.clone(),
        Axis::Rows => x.transpose(),
    };
    let n = vecs.ncols();
    let norms: Vec<f64> = vecs.column_iter().map(|c| c.norm()).collect();
    let zero_vectors: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    let gram = vecs.transpose() * &vecs;
    let matrix = Mat::from_fn(n, n, |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else if i == j {
            1.0
        } else {
            (gram[(i, j)] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    });
    GramCos { matrix, zero_vectors }
}

/// Pairwise cosines of the columns (or rows) of `x`.
pub fn gram_cos(x: &Mat, by: Axis) -> Mat {
    let g = gram_cos_flagged(x, by);
    if !g.zero_vectors.is_empty() {
        log::debug!("gram_cos: zero vectors at {:?}", g.zero_vectors);
    }
    g.matrix
}

/// `(σ_XY + ε)/(σ_X σ_Y + ε)` with population moments over all entries.
pub fn ssim(x: &Mat, y: &Mat, eps: f64) -> Result<f64, DimensionMismatch> {
    check_shape(y, x.shape())?;
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let (sxy, sx, sy) = (sxy / n, (sxx / n).sqrt(), (syy / n).sqrt());
    Ok((sxy + eps) / (sx * sy + eps))
}

/// Similarity of the column cosine structure of `h` and `reference`.
pub fn ssim_star_h(h: &Mat, reference: &Mat) -> Result<f64, DimensionMismatch> {
    if h.ncols() != reference.ncols() {
        return Err(DimensionMismatch {
            expected: (h.nrows(), reference.ncols()),
            got: h.shape(),
        });
    }
    ssim(&gram_cos(h, Axis::Columns), &gram_cos(reference, Axis::Columns), SSIM_EPS)
}

/// Similarity of the row cosine structure of `w` and `reference`.
pub fn ssim_star_w(w: &Mat, reference: &Mat) -> Result<f64, DimensionMismatch> {
    if w.nrows() != reference.nrows() {
        return Err(DimensionMismatch {
            expected: (reference.nrows(), w.ncols()),
            got: w.shape(),
        });
    }
    ssim(&gram_cos(w, Axis::Rows), &gram_cos(reference, Axis::Rows), SSIM_EPS)
}

/// `‖P_F(L) − L^in‖_F`.
pub fn proj_dist(l: &Mat, lin: &Mat, proj: &SubspaceProjector) -> Result<f64, DimensionMismatch> {
    check_shape(lin, proj.shape())?;
    Ok((proj.project_f(l)? - lin).norm())
}

/// `‖L/‖L‖_* − L^mm/‖L^mm‖_*‖_F`.
pub fn dir_dist(l: &Mat, lmm: &Mat) -> Result<f64, DimensionMismatch> {
    check_shape(lmm, l.shape())?;
    let nl = nuclear_norm(l);
    let nm = nuclear_norm(lmm);
    let a = if nl > 0.0 { l / nl } else { l.clone() };
    let b = if nm > 0.0 { lmm / nm } else { lmm.clone() };
    Ok((a - b).norm())
}

/// Largest error of the in-support log-odds equations.
pub fn softlabel_max_err(l: &Mat, ds: &SoftLabelDataset) -> Result<f64, DimensionMismatch> {
    check_shape(l, (ds.vocab_size(), ds.num_contexts()))?;
    let mut worst: f64 = 0.0;
    for (j, col) in ds.columns().iter().enumerate() {
        for (a, &z) in col.support.iter().enumerate() {
            for (b, &zp) in col.support.iter().enumerate().skip(a + 1) {
                let want = (col.probs[a] / col.probs[b]).ln();
                worst = worst.max((l[(z, j)] - l[(zp, j)] - want).abs());
            }
        }
    }
    Ok(worst)
}

/// Mean cosine between context embeddings that share a support set.
/// `None` when no two contexts share one.
pub fn collapse_score(h: &Mat, ds: &SoftLabelDataset) -> Option<f64> {
    let mut groups: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for (j, col) in ds.columns().iter().enumerate() {
        groups.entry(col.support.as_slice()).or_default().push(j);
    }
    let cos = gram_cos(h, Axis::Columns);
    let (mut sum, mut count) = (0.0, 0usize);
    for members in groups.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += cos[(i, j)];
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `Sim⋆(H, S̃)`.
    pub sim_h: f64,
    /// `Sim⋆(W, S̃)` over rows.
    pub sim_w: f64,
    /// `Sim⋆(H, H^mm)`.
    pub sim_h_mm: f64,
    /// `Sim⋆(W, W^mm)`.
    pub sim_w_mm: f64,
    pub proj_dist: f64,
    pub dir_dist: f64,
    pub collapse_score: Option<f64>,
    pub softlabel_max_err: f64,
    pub ce_gap: f64,
}

pub fn report(
    pair: &EmbeddingPair,
    ds: &SoftLabelDataset,
    theory: &TheoryPrediction,
    proj: &SubspaceProjector,
) -> Result<MetricReport, DimensionMismatch> {
    let l = pair.logits();
    check_shape(&l, proj.shape())?;
    Ok(MetricReport {
        sim_h: ssim_star_h(&pair.h, &theory.proxy)?,
        sim_w: ssim_star_w(&pair.w, &theory.proxy)?,
        sim_h_mm: ssim_star_h(&pair.h, &theory.hmm)?,
        sim_w_mm: ssim_star_w(&pair.w, &theory.wmm)?,
        proj_dist: proj_dist(&l, &theory.lin, proj)?,
        dir_dist: dir_dist(&l, &theory.lmm)?,
        collapse_score: collapse_score(&pair.h, ds),
        softlabel_max_err: softlabel_max_err(&l, ds)?,
        ce_gap: ce_loss(&l, ds)? - entropy(ds),
    })
}

/// One row per matrix row, comma separated.
pub fn heatmap_csv(x: &Mat) -> String {
    let mut out = String::new();
    for row in x.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Plain grayscale PGM; values in [−1, 1] map linearly to [0, 255], clamped.
pub fn heatmap_pgm(x: &Mat) -> String {
    let mut out = format!("P2\n{} {}\n255\n", x.ncols(), x.nrows());
    for row in x.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| gray_level(v).to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

fn gray_level(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
