//! Fixed context embeddings, trainable decoder: `L = W·H̄`.
//!
//! Constraints on `W` are indexed by rows `(e_a − e_b)ᵀ W h̄_j`, flattened
//! row-major into vectors of length `V·d`. The equality rows pair the anchor
//! of each support with the other support tokens; the margin rows pair the
//! anchor with every off-support token.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{entropy, SoftLabelDataset};
use crate::linalg::{inner, nuclear_norm, pinv, thin_svd, Mat, Vector};
use crate::metrics::proj_dist;
use crate::seeds::{derive_seed, LINEAR_EMBED, LINEAR_INIT};
use crate::subspace::{build_projector, check_shape, DimensionMismatch, SubspaceProjector};
use crate::theory::compute_lin;
use crate::ufm::{checkpoint_schedule, fmt_opt, softmax_residual, Algorithm, Checkpoint, OptimizerConfig, TRACE_COLUMNS};

/// Feasibility and KKT tolerance of the max-margin problem.
pub const SVM_TOL: f64 = 1e-8;
const PINV_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error("constraints are infeasible; most violated: {row} by {violation:.3e}")]
    Infeasible { row: ConstraintRow, violation: f64 },
    #[error("max-margin solver did not converge after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e})")]
    NotConverged {
        best: Box<Mat>,
        iterations: usize,
        primal: f64,
        dual: f64,
    },
    #[error("loss became non-finite at iteration {iteration}; lower the learning rate")]
    NonFiniteLoss { iteration: usize },
}

pub type Result<T> = std::result::Result<T, LinearError>;

/// `(e_plus − e_minus)ᵀ W h̄_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub context: usize,
    pub plus: usize,
    pub minus: usize,
}

impl std::fmt::Display for ConstraintRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "context {} tokens ({}, {})", self.context, self.plus, self.minus)
    }
}

#[derive(Debug, Clone)]
pub struct LinearInstance {
    pub ds: SoftLabelDataset,
    /// `d×m`, one fixed embedding per context.
    pub hbar: Mat,
    /// `√2 · max_j ‖h̄_j‖`.
    pub m_const: f64,
}

impl LinearInstance {
    pub fn new(ds: SoftLabelDataset, hbar: Mat) -> Result<Self> {
        if hbar.ncols() != ds.num_contexts() {
            return Err(DimensionMismatch {
                expected: (hbar.nrows(), ds.num_contexts()),
                got: hbar.shape(),
            }
            .into());
        }
        let norms: Vec<f64> = hbar.column_iter().map(|c| c.norm()).collect();
        if let Some(j) = norms.iter().position(|n| !(n.is_finite() && *n > 0.0)) {
            return Err(LinearError::Invalid(format!("embedding of context {j} is zero or non-finite")));
        }
        let m_const = 2f64.sqrt() * norms.iter().copied().fold(0.0, f64::max);
        Ok(LinearInstance { ds, hbar, m_const })
    }

    /// Standard Gaussian embeddings.
    pub fn gaussian(ds: SoftLabelDataset, d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LINEAR_EMBED));
        let hbar = Mat::from_fn(d, ds.num_contexts(), |_, _| StandardNormal.sample(&mut rng));
        Self::new(ds, hbar)
    }

    pub fn dim(&self) -> usize {
        self.hbar.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.ds.vocab_size()
    }

    /// `L̂ = Σ_j π_j ‖h̄_j‖²`.
    pub fn smoothness(&self) -> f64 {
        self.ds.pi().iter().zip(self.hbar.column_iter()).map(|(p, h)| p * h.norm_squared()).sum()
    }

    /// `min(0.5, 1/(2L̂))`.
    pub fn default_lr(&self) -> f64 {
        (0.5f64).min(1.0 / (2.0 * self.smoothness()))
    }

    /// Anchor-vs-rest rows with log-odds targets.
    pub fn equality_rows(&self) -> (Vec<ConstraintRow>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (j, col) in self.ds.columns().iter().enumerate() {
            for i in 1..col.len() {
                rows.push(ConstraintRow {
                    context: j,
                    plus: col.support[0],
                    minus: col.support[i],
                });
                rhs.push((col.probs[0] / col.probs[i]).ln());
            }
        }
        (rows, rhs)
    }

    /// Anchor-vs-off-support rows.
    pub fn margin_rows(&self) -> Vec<ConstraintRow> {
        let mut rows = Vec::new();
        for (j, col) in self.ds.columns().iter().enumerate() {
            for v in (0..self.vocab_size()).filter(|&v| !col.contains(v)) {
                rows.push(ConstraintRow {
                    context: j,
                    plus: col.support[0],
                    minus: v,
                });
            }
        }
        rows
    }

    /// One flattened constraint row per entry, `k × V·d`.
    pub fn dense_rows(&self, rows: &[ConstraintRow]) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(rows.len(), self.vocab_size() * d);
        for (r, row) in rows.iter().enumerate() {
            let h = self.hbar.column(row.context);
            for a in 0..d {
                out[(r, row.plus * d + a)] += h[a];
                out[(r, row.minus * d + a)] -= h[a];
            }
        }
        out
    }

    pub fn row_value(&self, row: &ConstraintRow, w: &Mat) -> f64 {
        let h = self.hbar.column(row.context);
        (w.row(row.plus) - w.row(row.minus)).transpose().dot(&h)
    }

    pub fn logits(&self, w: &Mat) -> Mat {
        w * &self.hbar
    }
}

fn flatten(w: &Mat) -> Vector {
    Vector::from_iterator(w.len(), w.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
}

fn unflatten(x: &Vector, v: usize, d: usize) -> Mat {
    Mat::from_row_slice(v, d, x.as_slice())
}

/// Outcome of the log-odds system `(e_z − e_z')ᵀ W h̄_j = log(p_z/p_z')`.
#[derive(Debug, Clone)]
pub struct Compatibility {
    pub compatible: bool,
    pub residual: f64,
    /// Minimum-norm solution, which lies in the data subspace; `None` when incompatible.
    pub w_star: Option<Mat>,
}

pub fn check_compatibility(inst: &LinearInstance) -> Compatibility {
    let (rows, rhs) = inst.equality_rows();
    let (v, d) = (inst.vocab_size(), inst.dim());
    if rows.is_empty() {
        return Compatibility {
            compatible: true,
            residual: 0.0,
            w_star: Some(Mat::zeros(v, d)),
        };
    }
    let a = inst.dense_rows(&rows);
    let b = Vector::from_vec(rhs);
    let x = pinv(&a, PINV_TOL) * &b;
    let residual = (&a * &x - &b).norm();
    let compatible = residual <= 1e-8 * (1.0 + b.norm());
    Compatibility {
        compatible,
        residual,
        w_star: compatible.then(|| unflatten(&x, v, d)),
    }
}

/// Orthogonal projector onto `span{(e_z − e_z')h̄_jᵀ : z, z' ∈ S_j}`.
#[derive(Debug, Clone)]
pub struct DataSubspace {
    basis: Mat,
    vocab_size: usize,
    dim: usize,
}

impl DataSubspace {
    pub fn new(inst: &LinearInstance) -> Self {
        let (rows, _) = inst.equality_rows();
        let n = inst.vocab_size() * inst.dim();
        let basis = if rows.is_empty() {
            Mat::zeros(n, 0)
        } else {
            thin_svd(&inst.dense_rows(&rows), PINV_TOL).vt.transpose()
        };
        DataSubspace {
            basis,
            vocab_size: inst.vocab_size(),
            dim: inst.dim(),
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, w: &Mat) -> Mat {
        let x = flatten(w);
        let coef = self.basis.transpose() * &x;
        unflatten(&(&self.basis * coef), self.vocab_size, self.dim)
    }
}

#[derive(Debug, Clone)]
pub struct Separability {
    pub separable: bool,
    /// A point satisfying all constraints when separable.
    pub witness: Option<Mat>,
    pub most_violated: Option<(ConstraintRow, f64)>,
}

/// Decides whether the equality and margin-1 constraints can hold together.
///
/// The least-distance solve settles feasible instances; otherwise a phase-1
/// damped active-set Newton iteration on `½‖Ex‖² + ½‖(1 − Bx)₊‖²` (zero
/// minimum iff feasible) locates the most violated row.
pub fn check_separability(inst: &LinearInstance) -> Separability {
    if inst.margin_rows().is_empty() {
        return phase_one(inst);
    }
    let ldp = least_distance(inst, 1.0);
    if ldp.primal <= SVM_TOL {
        return Separability {
            separable: true,
            witness: Some(ldp.w),
            most_violated: None,
        };
    }
    phase_one(inst)
}

fn phase_one(inst: &LinearInstance) -> Separability {
    let (v, d) = (inst.vocab_size(), inst.dim());
    let (eq_rows, _) = inst.equality_rows();
    let mr = inst.margin_rows();
    let e = inst.dense_rows(&eq_rows);
    let b = inst.dense_rows(&mr);
    let n = v * d;
    let objective = |x: &Vector| -> f64 {
        let ex = &e * x;
        let bx = &b * x;
        0.5 * ex.norm_squared() + 0.5 * bx.iter().map(|t| (1.0 - t).max(0.0).powi(2)).sum::<f64>()
    };
    let mut x = Vector::zeros(n);
    let mut f = objective(&x);
    for _ in 0..200 {
        let bx = &b * &x;
        let active: Vec<usize> = (0..mr.len()).filter(|&i| bx[i] < 1.0).collect();
        if active.is_empty() && (&e * &x).norm() == 0.0 {
            break;
        }
        let mut m = Mat::zeros(e.nrows() + active.len(), n);
        let mut r = Vector::zeros(e.nrows() + active.len());
        m.rows_mut(0, e.nrows()).copy_from(&e);
        for (k, &i) in active.iter().enumerate() {
            m.set_row(e.nrows() + k, &b.row(i));
            r[e.nrows() + k] = 1.0;
        }
        let target = pinv(&m, PINV_TOL) * &r;
        let dir = &target - &x;
        let grad = m.transpose() * (&m * &x - &r);
        let slope = grad.dot(&dir);
        if slope >= 0.0 {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x + &dir * t;
            let fc = objective(&cand);
            if fc <= f + 0.25 * t * slope {
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || f < 1e-30 {
            break;
        }
    }
    let w = unflatten(&x, v, d);
    let scale = 1.0 + w.norm() * inst.m_const;
    let mut worst: Option<(ConstraintRow, f64)> = None;
    for row in &eq_rows {
        let viol = inst.row_value(row, &w).abs();
        if worst.is_none_or(|(_, wv)| viol > wv) {
            worst = Some((*row, viol));
        }
    }
    for row in &mr {
        let viol = 1.0 - inst.row_value(row, &w);
        if worst.is_none_or(|(_, wv)| viol > wv) {
            worst = Some((*row, viol));
        }
    }
    let separable = worst.is_none_or(|(_, viol)| viol <= 1e-9 * scale);
    Separability {
        separable,
        witness: separable.then_some(w),
        most_violated: if separable { None } else { worst },
    }
}

/// Outer-iteration cap of the active-set solver, per margin row.
pub const SVM_MAX_ITER: usize = 3;

/// Minimum Frobenius-norm `W` with zero in-support differences and margin 1.
pub fn solve_svm_w(inst: &LinearInstance) -> Result<Mat> {
    solve_svm_w_margin(inst, 1.0)
}

/// As [`solve_svm_w`] with margin `margin`.
///
/// The equality rows are removed by projecting the margin rows onto their
/// null space, which leaves the least-distance problem
/// `min ‖x‖ s.t. Gx ≥ margin·1`. That is solved exactly through its
/// non-negative least-squares dual and the KKT conditions are verified to
/// [`SVM_TOL`].
pub fn solve_svm_w_margin(inst: &LinearInstance, margin: f64) -> Result<Mat> {
    if inst.margin_rows().is_empty() {
        return Ok(Mat::zeros(inst.vocab_size(), inst.dim()));
    }
    let ldp = least_distance(inst, margin);
    if ldp.primal <= SVM_TOL && ldp.dual <= SVM_TOL {
        return Ok(ldp.w);
    }
    let sep = phase_one(inst);
    if !sep.separable {
        let (row, violation) = sep.most_violated.expect("infeasible instances name a row");
        return Err(LinearError::Infeasible { row, violation });
    }
    Err(LinearError::NotConverged {
        best: Box::new(ldp.w),
        iterations: ldp.iterations,
        primal: ldp.primal,
        dual: ldp.dual,
    })
}

struct LeastDistance {
    w: Mat,
    iterations: usize,
    /// Worst constraint violation relative to the margin.
    primal: f64,
    /// Worst complementarity product, relative.
    dual: f64,
}

fn least_distance(inst: &LinearInstance, margin: f64) -> LeastDistance {
    let (v, d) = (inst.vocab_size(), inst.dim());
    let (eq_rows, _) = inst.equality_rows();
    let mr = inst.margin_rows();
    let mut g = inst.dense_rows(&mr);
    if !eq_rows.is_empty() {
        let basis = thin_svd(&inst.dense_rows(&eq_rows), PINV_TOL).vt;
        g -= (&g * basis.transpose()) * &basis;
    }
    let (n, p) = (g.ncols(), g.nrows());
    // Lawson–Hanson: min ‖Eu − f‖, u ≥ 0 with E = [Gᵀ; margin·1ᵀ], f = e_{n+1}.
    let mut e = Mat::zeros(n + 1, p);
    e.rows_mut(0, n).copy_from(&g.transpose());
    e.row_mut(n).fill(margin);
    let mut f = Vector::zeros(n + 1);
    f[n] = 1.0;
    let (u, iterations) = nnls(&e, &f, SVM_MAX_ITER * p.max(1));
    let denom = 1.0 - margin * u.sum();
    let x = if denom > 0.0 { g.transpose() * &u / denom } else { Vector::zeros(n) };
    let y = &u / denom.max(f64::MIN_POSITIVE);

    let w = unflatten(&x, v, d);
    let scale = margin.abs().max(1.0);
    let eq_viol = eq_rows.iter().map(|row| inst.row_value(row, &w).abs()).fold(0.0, f64::max);
    let gx = &g * &x;
    let margin_viol = gx.iter().map(|&t| margin - t).fold(0.0, f64::max);
    let slack = y.iter().zip(gx.iter()).map(|(&yi, &t)| (yi * (t - margin)).abs()).fold(0.0, f64::max);
    let infeasible = if denom > 0.0 { 0.0 } else { f64::INFINITY };
    LeastDistance {
        w,
        iterations,
        primal: eq_viol.max(margin_viol) / scale + infeasible,
        dual: slack / (scale * y.amax().max(1.0)),
    }
}

/// Lawson–Hanson active-set NNLS; returns the solution and the number of
/// outer iterations.
fn nnls(e: &Mat, f: &Vector, max_iter: usize) -> (Vector, usize) {
    let p = e.ncols();
    let tol = 1e-12 * e.amax().max(1.0) * f.amax().max(1.0) * (p as f64);
    let mut u = Vector::zeros(p);
    let mut passive = vec![false; p];
    let gram = e.transpose() * e;
    let ef = e.transpose() * f;
    let restricted = |passive: &[bool]| -> Vector {
        let idx: Vec<usize> = (0..p).filter(|&j| passive[j]).collect();
        let sub = Mat::from_fn(idx.len(), idx.len(), |a, b| gram[(idx[a], idx[b])]);
        let rhs = Vector::from_fn(idx.len(), |a, _| ef[idx[a]]);
        let sol = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => pinv(&sub, PINV_TOL) * rhs,
        };
        let mut out = Vector::zeros(p);
        for (k, &j) in idx.iter().enumerate() {
            out[j] = sol[k];
        }
        out
    };
    let mut iterations = 0;
    while iterations < max_iter {
        let w = &ef - &gram * &u;
        let Some(t) = (0..p).filter(|&j| !passive[j] && w[j] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b])) else {
            break;
        };
        iterations += 1;
        passive[t] = true;
        loop {
            let s = restricted(&passive);
            if (0..p).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                u = s;
                break;
            }
            let alpha = (0..p)
                .filter(|&j| passive[j] && s[j] <= 0.0)
                .map(|j| u[j] / (u[j] - s[j]))
                .fold(f64::INFINITY, f64::min);
            u += (&s - &u) * alpha;
            for j in 0..p {
                if passive[j] && u[j] <= tol {
                    passive[j] = false;
                    u[j] = 0.0;
                }
            }
        }
    }
    (u, iterations)
}

#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub wmm: Mat,
    pub wstar: Option<Mat>,
    /// Smallest margin-row value of `wmm`.
    pub min_margin: f64,
    /// Largest in-support difference of `wmm`.
    pub max_equality_residual: f64,
    pub compatible: bool,
    pub separable: bool,
}

pub fn solve_linear(inst: &LinearInstance) -> Result<LinearSolution> {
    let comp = check_compatibility(inst);
    let wmm = solve_svm_w(inst)?;
    let (eq_rows, _) = inst.equality_rows();
    let min_margin = inst
        .margin_rows()
        .iter()
        .map(|r| inst.row_value(r, &wmm))
        .fold(f64::INFINITY, f64::min);
    let max_equality_residual = eq_rows.iter().map(|r| inst.row_value(r, &wmm).abs()).fold(0.0, f64::max);
    Ok(LinearSolution {
        wmm,
        wstar: comp.w_star,
        min_margin,
        max_equality_residual,
        compatible: comp.compatible,
        separable: true,
    })
}

/// `CE(W·H̄)` and its gradient `G·H̄ᵀ`.
pub fn linear_ce_grad(inst: &LinearInstance, w: &Mat) -> std::result::Result<(f64, Mat), DimensionMismatch> {
    check_shape(w, (inst.vocab_size(), inst.dim()))?;
    let (ce, g) = softmax_residual(&inst.logits(w), &inst.ds)?;
    Ok((ce, g * inst.hbar.transpose()))
}

fn linear_ce(inst: &LinearInstance, w: &Mat) -> f64 {
    softmax_residual(&inst.logits(w), &inst.ds).expect("shapes checked").0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCheckpoint {
    #[serde(flatten)]
    pub base: Checkpoint,
    /// `⟨W/‖W‖, W^mm/‖W^mm‖⟩`.
    pub alignment: Option<f64>,
    /// `‖P_T(W) − W⋆‖`.
    pub pt_dist: Option<f64>,
}

/// Outcome of checking `CE(W_F + (1+α)‖W_⊥‖ W̄^mm) ≤ CE(W_k)` over the final
/// 10% of iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyLemmaCheck {
    pub alpha: f64,
    pub checked: usize,
    pub violations: usize,
    /// Largest `CE(comparison) − CE(W_k)`.
    pub worst_excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearTrace {
    pub checkpoints: Vec<LinearCheckpoint>,
    pub key_lemma: Option<KeyLemmaCheck>,
}

impl LinearTrace {
    pub fn last(&self) -> Option<&LinearCheckpoint> {
        self.checkpoints.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = TRACE_COLUMNS.join(",");
        out.push_str(",alignment,pt_dist\n");
        for c in &self.checkpoints {
            let b = &c.base;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                b.epoch,
                b.ce,
                b.ce_gap,
                b.norm_w,
                b.norm_h,
                b.nuc_l,
                fmt_opt(b.proj_dist),
                fmt_opt(b.sim_h),
                fmt_opt(b.sim_w),
                fmt_opt(b.dir_dist),
                fmt_opt(c.alignment),
                fmt_opt(c.pt_dist)
            );
        }
        out
    }
}

/// `⟨A/‖A‖, B/‖B‖⟩`, 0 when either is zero.
pub fn alignment(a: &Mat, b: &Mat) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    inner(a, b) / (na * nb)
}

/// Key-Lemma slack used by [`gd_linear`].
pub const KEY_LEMMA_ALPHA: f64 = 0.5;

/// Initial decoder: Gaussian with standard deviation `0.1/√d`.
pub fn init_decoder(inst: &LinearInstance, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, LINEAR_INIT));
    let normal = Normal::new(0.0, 0.1 / (inst.dim() as f64).sqrt()).expect("valid std");
    Mat::from_fn(inst.vocab_size(), inst.dim(), |_, _| normal.sample(&mut rng))
}

/// Runs GD, NGD or Adam on the unregularized loss `CE(W·H̄)`; `weight_decay`
/// and `batch` are ignored. `sol` enables the alignment, `P_T` distance and
/// Key-Lemma columns.
pub fn gd_linear(inst: &LinearInstance, opt: &OptimizerConfig, sol: Option<&LinearSolution>) -> Result<(Mat, LinearTrace)> {
    opt.validate().map_err(|e| LinearError::Invalid(e.to_string()))?;
    let mut w = init_decoder(inst, opt.seed);
    let h_ent = entropy(&inst.ds);
    let norm_h = inst.hbar.norm();
    let proj: SubspaceProjector = build_projector(&inst.ds);
    let lin = compute_lin(&inst.ds, &proj);
    let subspace = DataSubspace::new(inst);
    let wmm_unit = sol.filter(|s| s.wmm.norm() > 0.0).map(|s| &s.wmm / s.wmm.norm());
    let schedule = checkpoint_schedule(opt.epochs, opt.checkpoints);
    let key_from = opt.epochs - opt.epochs / 10;
    let mut key = wmm_unit.as_ref().map(|_| KeyLemmaCheck {
        alpha: KEY_LEMMA_ALPHA,
        checked: 0,
        violations: 0,
        worst_excess: f64::NEG_INFINITY,
    });
    let mut trace = LinearTrace::default();
    let (mut m1, mut m2) = (Mat::zeros(w.nrows(), w.ncols()), Mat::zeros(w.nrows(), w.ncols()));
    for it in 0..=opt.epochs {
        let (ce, grad) = linear_ce_grad(inst, &w)?;
        if !ce.is_finite() {
            return Err(LinearError::NonFiniteLoss { iteration: it });
        }
        if schedule.binary_search(&it).is_ok() {
            let l = inst.logits(&w);
            trace.checkpoints.push(LinearCheckpoint {
                base: Checkpoint {
                    epoch: it,
                    ce,
                    ce_gap: ce - h_ent,
                    norm_w: w.norm(),
                    norm_h,
                    nuc_l: nuclear_norm(&l),
                    proj_dist: proj_dist(&l, &lin, &proj).ok(),
                    sim_h: None,
                    sim_w: None,
                    dir_dist: None,
                },
                alignment: wmm_unit.as_ref().map(|u| alignment(&w, u)),
                pt_dist: sol.and_then(|s| s.wstar.as_ref()).map(|ws| (subspace.project(&w) - ws).norm()),
            });
        }
        if let (Some(k), Some(u)) = (key.as_mut(), wmm_unit.as_ref()) {
            if it >= key_from {
                let wf = subspace.project(&w);
                let perp = (&w - &wf).norm();
                let cmp = linear_ce(inst, &(&wf + u * ((1.0 + k.alpha) * perp)));
                let excess = cmp - ce;
                k.checked += 1;
                k.worst_excess = k.worst_excess.max(excess);
                if excess > 1e-12 {
                    k.violations += 1;
                }
            }
        }
        if it == opt.epochs {
            break;
        }
        match opt.algorithm {
            Algorithm::Gd | Algorithm::Sgd => w -= grad * opt.lr,
            Algorithm::Ngd => {
                let n = grad.norm();
                if n > 0.0 {
                    w -= grad * (opt.lr / n);
                }
            }
            Algorithm::Adam => {
                let t = (it + 1) as i32;
                m1.zip_apply(&grad, |m, g| *m = opt.beta1 * *m + (1.0 - opt.beta1) * g);
                m2.zip_apply(&grad, |m, g| *m = opt.beta2 * *m + (1.0 - opt.beta2) * g * g);
                let (c1, c2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
                for ((wi, a), b) in w.iter_mut().zip(m1.iter()).zip(m2.iter()) {
                    *wi -= opt.lr * (a / c1) / ((b / c2).sqrt() + opt.eps);
                }
            }
        }
    }
    trace.key_lemma = key;
    Ok((w, trace))
}

/// Minimizes `CE(W·H̄)` over `‖W‖ ≤ bound` by accelerated projected gradient.
pub fn reg_path_point(inst: &LinearInstance, bound: f64, iterations: usize) -> Mat {
    let step = 1.0 / (2.0 * inst.smoothness());
    let project = |w: Mat| {
        let n = w.norm();
        if n > bound {
            w * (bound / n)
        } else {
            w
        }
    };
    let mut w = Mat::zeros(inst.vocab_size(), inst.dim());
    let mut z = w.clone();
    let mut t = 1.0f64;
    let mut f_prev = linear_ce(inst, &w);
    for _ in 0..iterations {
        let (_, g) = linear_ce_grad(inst, &z).expect("shapes checked");
        let w_new = project(&z - g * step);
        let f_new = linear_ce(inst, &w_new);
        if f_new > f_prev {
            t = 1.0;
            z = w.clone();
            continue;
        }
        let t_new = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = &w_new + (&w_new - &w) * ((t - 1.0) / t_new);
        w = w_new;
        t = t_new;
        f_prev = f_new;
    }
    w
}
