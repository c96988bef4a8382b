//! The log-bilinear model `L = W·H` with free context embeddings, trained on
//! soft-label cross-entropy plus ridge regularization.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{entropy, Column, SoftLabelDataset};
use crate::linalg::{is_finite, log_sum_exp, nuclear_norm, Mat, MatrixJson};
use crate::metrics::{dir_dist, proj_dist, ssim_star_h, ssim_star_w};
use crate::seeds::{derive_seed, SAMPLING, UFM_INIT};
use crate::subspace::{build_projector, check_shape, DimensionMismatch, SubspaceProjector};
use crate::theory::TheoryPrediction;

/// Stop once `CE − H` falls below this.
pub const STOP_GAP: f64 = 1e-6;
/// Stop once the joint gradient norm falls below this.
pub const STOP_GRAD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum UfmError {
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, UfmError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    /// `V×d` word embeddings.
    pub w: Mat,
    /// `d×m` context embeddings.
    pub h: Mat,
}

impl EmbeddingPair {
    pub fn new(w: Mat, h: Mat) -> std::result::Result<Self, DimensionMismatch> {
        if w.ncols() != h.nrows() {
            return Err(DimensionMismatch {
                expected: (w.ncols(), h.ncols()),
                got: h.shape(),
            });
        }
        Ok(EmbeddingPair { w, h })
    }

    /// Gaussian entries with standard deviation `1/√d`.
    pub fn random(v: usize, m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let w = Mat::from_fn(v, d, |_, _| normal.sample(&mut rng));
        let h = Mat::from_fn(d, m, |_, _| normal.sample(&mut rng));
        EmbeddingPair { w, h }
    }

    pub fn logits(&self) -> Mat {
        &self.w * &self.h
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&WeightsFile {
            w: (&self.w).into(),
            h: (&self.h).into(),
        })
        .expect("matrices serialize")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let f: WeightsFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let w = f.w.to_matrix().ok_or("W: data length does not match shape")?;
        let h = f.h.to_matrix().ok_or("H: data length does not match shape")?;
        EmbeddingPair::new(w, h).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsFile {
    w: MatrixJson,
    h: MatrixJson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Gd,
    Ngd,
    Adam,
    Sgd,
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(Algorithm::Gd),
            "ngd" => Ok(Algorithm::Ngd),
            "adam" => Ok(Algorithm::Adam),
            "sgd" => Ok(Algorithm::Sgd),
            _ => Err(format!("unknown algorithm {s:?} (gd, ngd, adam, sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    Full,
    /// One step per context per epoch, contexts visited in a seeded random order.
    PerContext,
}

impl FromStr for BatchMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(BatchMode::Full),
            "per-context" | "per_context" => Ok(BatchMode::PerContext),
            _ => Err(format!("unknown batch mode {s:?} (full, per-context)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch: BatchMode,
    pub seed: u64,
    /// Number of log-spaced checkpoints.
    pub checkpoints: usize,
    /// Armijo backtracking for `gd`.
    pub backtracking: bool,
    pub parallel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            lr: 0.005,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            epochs: 3000,
            batch: BatchMode::Full,
            seed: 0,
            checkpoints: 32,
            backtracking: false,
            parallel: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(UfmError::InvalidConfig(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if self.checkpoints < 2 {
            return bad("need at least 2 checkpoints");
        }
        Ok(())
    }
}

/// Epochs `0`, `epochs` and `count − 2` log-spaced values in between.
pub fn checkpoint_schedule(epochs: usize, count: usize) -> Vec<usize> {
    let mut out = vec![0];
    if epochs > 0 {
        let n = count.saturating_sub(1).max(1);
        for i in 0..=n {
            let e = (epochs as f64).powf(i as f64 / n as f64).round() as usize;
            out.push(e.clamp(1, epochs));
        }
    }
    out.dedup();
    out
}

fn column_residual(l: &Mat, j: usize, col: &Column, pi: f64) -> (f64, Vec<f64>) {
    let ell = l.column(j);
    let lse = log_sum_exp(ell.iter().copied());
    let mut g: Vec<f64> = ell.iter().map(|&x| pi * (x - lse).exp()).collect();
    let mut loss = 0.0;
    for (&z, &p) in col.support.iter().zip(&col.probs) {
        loss -= pi * p * (ell[z] - lse);
        g[z] -= pi * p;
    }
    (loss, g)
}

fn residual_impl(l: &Mat, ds: &SoftLabelDataset, parallel: bool) -> (f64, Mat) {
    let cols = ds.columns();
    let pi = ds.pi();
    let parts: Vec<(f64, Vec<f64>)> = if parallel {
        (0..cols.len()).into_par_iter().map(|j| column_residual(l, j, &cols[j], pi[j])).collect()
    } else {
        (0..cols.len()).map(|j| column_residual(l, j, &cols[j], pi[j])).collect()
    };
    let mut g = Mat::zeros(l.nrows(), l.ncols());
    let mut loss = 0.0;
    for (j, (lj, gj)) in parts.into_iter().enumerate() {
        loss += lj;
        g.column_mut(j).copy_from_slice(&gj);
    }
    (loss, g)
}

/// `CE(L)` and `G[z,j] = π_j (softmax_z(ℓ_j) − p_{j,z})`.
pub fn softmax_residual(l: &Mat, ds: &SoftLabelDataset) -> std::result::Result<(f64, Mat), DimensionMismatch> {
    check_shape(l, (ds.vocab_size(), ds.num_contexts()))?;
    Ok(residual_impl(l, ds, false))
}

pub fn ce_loss(l: &Mat, ds: &SoftLabelDataset) -> std::result::Result<f64, DimensionMismatch> {
    softmax_residual(l, ds).map(|(loss, _)| loss)
}

/// Gradients of `CE(WH) + λ/2 (‖W‖² + ‖H‖²)`.
pub fn ce_grad(pair: &EmbeddingPair, ds: &SoftLabelDataset, lambda: f64) -> std::result::Result<(Mat, Mat), DimensionMismatch> {
    let (_, g) = softmax_residual(&pair.logits(), ds)?;
    Ok(grads_from_residual(pair, &g, lambda))
}

fn grads_from_residual(pair: &EmbeddingPair, g: &Mat, lambda: f64) -> (Mat, Mat) {
    let gw = g * pair.h.transpose() + &pair.w * lambda;
    let gh = pair.w.transpose() * g + &pair.h * lambda;
    (gw, gh)
}

fn ridge(pair: &EmbeddingPair, lambda: f64) -> f64 {
    0.5 * lambda * (pair.w.norm_squared() + pair.h.norm_squared())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub ce: f64,
    pub ce_gap: f64,
    pub norm_w: f64,
    pub norm_h: f64,
    pub nuc_l: f64,
    pub proj_dist: Option<f64>,
    pub sim_h: Option<f64>,
    pub sim_w: Option<f64>,
    pub dir_dist: Option<f64>,
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "epoch", "ce", "ce_gap", "norm_w", "norm_h", "nuc_l", "proj_dist", "sim_h", "sim_w", "dir_dist",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
}

pub(crate) fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainTrace {
    /// Appends a checkpoint; epochs must increase.
    pub fn push(&mut self, c: Checkpoint) {
        if let Some(last) = self.checkpoints.last() {
            assert!(c.epoch > last.epoch, "checkpoint epochs must increase");
        }
        self.checkpoints.push(c);
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Absent theory metrics are written as empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = TRACE_COLUMNS.join(",");
        out.push('\n');
        for c in &self.checkpoints {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.epoch,
                c.ce,
                c.ce_gap,
                c.norm_w,
                c.norm_h,
                c.nuc_l,
                fmt_opt(c.proj_dist),
                fmt_opt(c.sim_h),
                fmt_opt(c.sim_w),
                fmt_opt(c.dir_dist)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m_w: MatrixJson,
    pub v_w: MatrixJson,
    pub m_h: MatrixJson,
    pub v_h: MatrixJson,
}

/// Everything needed to continue a run: parameters, epoch, optimizer
/// moments, the current step size and the trace so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub w: MatrixJson,
    pub h: MatrixJson,
    pub lr: f64,
    pub adam: Option<AdamState>,
    pub trace: TrainTrace,
    pub stopped_early: bool,
}

impl TrainerState {
    pub fn from_pair(pair: &EmbeddingPair, opt: &OptimizerConfig) -> Self {
        TrainerState {
            epoch: 0,
            w: (&pair.w).into(),
            h: (&pair.h).into(),
            lr: opt.lr,
            adam: None,
            trace: TrainTrace::default(),
            stopped_early: false,
        }
    }

    pub fn pair(&self) -> EmbeddingPair {
        EmbeddingPair {
            w: self.w.to_matrix().expect("state W shape"),
            h: self.h.to_matrix().expect("state H shape"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let st: TrainerState = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let (w, h) = (st.w.to_matrix(), st.h.to_matrix());
        match (w, h) {
            (Some(w), Some(h)) if w.ncols() == h.nrows() => Ok(st),
            _ => Err("checkpoint W/H shapes are inconsistent".into()),
        }
    }
}

pub fn init_state(ds: &SoftLabelDataset, d: usize, opt: &OptimizerConfig) -> TrainerState {
    let pair = EmbeddingPair::random(ds.vocab_size(), ds.num_contexts(), d, derive_seed(opt.seed, UFM_INIT));
    TrainerState::from_pair(&pair, opt)
}

struct TheoryRefs<'a> {
    theory: &'a TheoryPrediction,
    proj: SubspaceProjector,
}

fn make_checkpoint(epoch: usize, pair: &EmbeddingPair, ce: f64, h: f64, refs: Option<&TheoryRefs>) -> Checkpoint {
    let l = pair.logits();
    let mut c = Checkpoint {
        epoch,
        ce,
        ce_gap: ce - h,
        norm_w: pair.w.norm(),
        norm_h: pair.h.norm(),
        nuc_l: nuclear_norm(&l),
        proj_dist: None,
        sim_h: None,
        sim_w: None,
        dir_dist: None,
    };
    if let Some(r) = refs {
        c.proj_dist = proj_dist(&l, &r.theory.lin, &r.proj).ok();
        c.sim_h = ssim_star_h(&pair.h, &r.theory.proxy).ok();
        c.sim_w = ssim_star_w(&pair.w, &r.theory.proxy).ok();
        c.dir_dist = dir_dist(&l, &r.theory.lmm).ok();
    }
    c
}

struct Adam {
    t: u64,
    m_w: Mat,
    v_w: Mat,
    m_h: Mat,
    v_h: Mat,
}

impl Adam {
    fn new(pair: &EmbeddingPair) -> Self {
        Adam {
            t: 0,
            m_w: Mat::zeros(pair.w.nrows(), pair.w.ncols()),
            v_w: Mat::zeros(pair.w.nrows(), pair.w.ncols()),
            m_h: Mat::zeros(pair.h.nrows(), pair.h.ncols()),
            v_h: Mat::zeros(pair.h.nrows(), pair.h.ncols()),
        }
    }

    fn from_state(s: &AdamState) -> Option<Self> {
        Some(Adam {
            t: s.t,
            m_w: s.m_w.to_matrix()?,
            v_w: s.v_w.to_matrix()?,
            m_h: s.m_h.to_matrix()?,
            v_h: s.v_h.to_matrix()?,
        })
    }

    fn to_state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m_w: (&self.m_w).into(),
            v_w: (&self.v_w).into(),
            m_h: (&self.m_h).into(),
            v_h: (&self.v_h).into(),
        }
    }

    fn step(&mut self, pair: &mut EmbeddingPair, gw: &Mat, gh: &Mat, opt: &OptimizerConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (opt.beta1, opt.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let update = |p: &mut Mat, m: &mut Mat, v: &mut Mat, g: &Mat| {
            m.zip_apply(g, |mi, gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            v.zip_apply(g, |vi, gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + opt.eps);
            }
        };
        update(&mut pair.w, &mut self.m_w, &mut self.v_w, gw);
        update(&mut pair.h, &mut self.m_h, &mut self.v_h, gh);
    }
}

/// Trains from a fresh scaled-Gaussian initialization.
pub fn train_ufm(
    ds: &SoftLabelDataset,
    d: usize,
    opt: &OptimizerConfig,
    theory: Option<&TheoryPrediction>,
) -> Result<(EmbeddingPair, TrainTrace)> {
    if d == 0 {
        return Err(UfmError::InvalidConfig("d must be at least 1".into()));
    }
    let state = resume_ufm(ds, opt, theory, init_state(ds, d, opt))?;
    Ok((state.pair(), state.trace))
}

/// Continues `state` up to `opt.epochs`; the trace picks up where it left off.
pub fn resume_ufm(
    ds: &SoftLabelDataset,
    opt: &OptimizerConfig,
    theory: Option<&TheoryPrediction>,
    mut state: TrainerState,
) -> Result<TrainerState> {
    opt.validate()?;
    let mut pair = state.pair();
    check_shape(&pair.w, (ds.vocab_size(), pair.dim()))?;
    check_shape(&pair.h, (pair.dim(), ds.num_contexts()))?;
    if pair.dim() < ds.vocab_size() {
        log::warn!("d = {} < V = {}: the predicted geometry assumes d >= V", pair.dim(), ds.vocab_size());
    }
    let h_ent = entropy(ds);
    let refs = theory.map(|t| TheoryRefs {
        theory: t,
        proj: build_projector(ds),
    });
    let schedule = checkpoint_schedule(opt.epochs, opt.checkpoints);
    let lambda = opt.weight_decay;
    let mut adam = match (&state.adam, opt.algorithm) {
        (Some(s), Algorithm::Adam) => Adam::from_state(s).ok_or_else(|| UfmError::InvalidConfig("corrupt Adam state".into()))?,
        _ => Adam::new(&pair),
    };
    let mut lr = state.lr;
    let record = |trace: &mut TrainTrace, epoch: usize, pair: &EmbeddingPair, ce: f64| {
        if trace.last().is_none_or(|c| c.epoch < epoch) {
            trace.push(make_checkpoint(epoch, pair, ce, h_ent, refs.as_ref()));
        }
    };

    loop {
        let (ce, g) = residual_impl(&pair.logits(), ds, opt.parallel);
        if !ce.is_finite() {
            return Err(UfmError::NonFiniteLoss { epoch: state.epoch });
        }
        if state.epoch == 0 || schedule.binary_search(&state.epoch).is_ok() {
            record(&mut state.trace, state.epoch, &pair, ce);
        }
        if state.epoch >= opt.epochs {
            break;
        }
        let (gw, gh) = grads_from_residual(&pair, &g, lambda);
        let gnorm = (gw.norm_squared() + gh.norm_squared()).sqrt();
        if ce - h_ent < STOP_GAP || gnorm < STOP_GRAD {
            state.stopped_early = true;
            record(&mut state.trace, state.epoch, &pair, ce);
            break;
        }
        match opt.batch {
            BatchMode::Full => {
                full_step(&mut pair, ds, opt, &mut adam, &mut lr, ce, &gw, &gh, gnorm);
            }
            BatchMode::PerContext => {
                let mut order: Vec<usize> = (0..ds.num_contexts()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(opt.seed, SAMPLING), state.epoch as u64));
                order.shuffle(&mut rng);
                for j in order {
                    let (gw, gh) = context_grads(&pair, ds, j, lambda);
                    apply_step(&mut pair, opt, &mut adam, lr, &gw, &gh);
                }
            }
        }
        state.epoch += 1;
        if !is_finite(&pair.w) || !is_finite(&pair.h) {
            return Err(UfmError::NonFiniteLoss { epoch: state.epoch });
        }
    }
    state.w = (&pair.w).into();
    state.h = (&pair.h).into();
    state.lr = lr;
    state.adam = (opt.algorithm == Algorithm::Adam).then(|| adam.to_state());
    Ok(state)
}

/// Unbiased single-context gradient: `m` times the `j`-th term plus ridge.
fn context_grads(pair: &EmbeddingPair, ds: &SoftLabelDataset, j: usize, lambda: f64) -> (Mat, Mat) {
    let m = ds.num_contexts() as f64;
    let h_j = pair.h.column(j);
    let ell = &pair.w * h_j;
    let lse = log_sum_exp(ell.iter().copied());
    let col = ds.column(j);
    let pi = ds.pi()[j] * m;
    let mut g: Vec<f64> = ell.iter().map(|&x| pi * (x - lse).exp()).collect();
    for (&z, &p) in col.support.iter().zip(&col.probs) {
        g[z] -= pi * p;
    }
    let g = crate::linalg::Vector::from_vec(g);
    let gw = &g * h_j.transpose() + &pair.w * lambda;
    let mut gh = &pair.h * lambda;
    gh.set_column(j, &(pair.w.transpose() * &g + h_j * lambda));
    (gw, gh)
}

fn apply_step(pair: &mut EmbeddingPair, opt: &OptimizerConfig, adam: &mut Adam, lr: f64, gw: &Mat, gh: &Mat) {
    match opt.algorithm {
        Algorithm::Gd | Algorithm::Sgd => {
            pair.w -= gw * lr;
            pair.h -= gh * lr;
        }
        Algorithm::Ngd => {
            let n = (gw.norm_squared() + gh.norm_squared()).sqrt();
            if n > 0.0 {
                pair.w -= gw * (lr / n);
                pair.h -= gh * (lr / n);
            }
        }
        Algorithm::Adam => adam.step(pair, gw, gh, opt, lr),
    }
}

#[allow(clippy::too_many_arguments)]
fn full_step(
    pair: &mut EmbeddingPair,
    ds: &SoftLabelDataset,
    opt: &OptimizerConfig,
    adam: &mut Adam,
    lr: &mut f64,
    ce: f64,
    gw: &Mat,
    gh: &Mat,
    gnorm: f64,
) {
    if opt.algorithm == Algorithm::Gd && opt.backtracking {
        let lambda = opt.weight_decay;
        let current = ce + ridge(pair, lambda);
        for _ in 0..60 {
            let trial = EmbeddingPair {
                w: &pair.w - gw * *lr,
                h: &pair.h - gh * *lr,
            };
            let (trial_ce, _) = residual_impl(&trial.logits(), ds, opt.parallel);
            if trial_ce + ridge(&trial, lambda) <= current - 0.5 * *lr * gnorm * gnorm {
                *pair = trial;
                return;
            }
            *lr *= 0.5;
        }
        log::warn!("backtracking failed to find a descent step");
        return;
    }
    apply_step(pair, opt, adam, *lr, gw, gh);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_random, gen_symmetric, SupportSize};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_pair_dataset() -> SoftLabelDataset {
        SoftLabelDataset::new(
            2,
            2,
            vec![1.0],
            vec![Column {
                support: vec![0, 1],
                probs: vec![0.5, 0.5],
            }],
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_logits_give_log_v() {
        let ds = gen_random(7, 5, SupportSize::Range(1, 4), 1).unwrap();
        assert_abs_diff_eq!(ce_loss(&Mat::zeros(7, 5), &ds).unwrap(), 7f64.ln(), epsilon = 1e-14);
        let ds = one_pair_dataset();
        let ce = ce_loss(&Mat::zeros(2, 1), &ds).unwrap();
        assert_abs_diff_eq!(ce, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(ce, entropy(&ds), epsilon = 1e-15);
        assert!(ce_loss(&Mat::zeros(3, 1), &ds).is_err());
    }

    #[test]
    fn ce_bounded_below_by_entropy() {
        let ds = gen_random(6, 9, SupportSize::Range(1, 5), 4).unwrap();
        for seed in 0..10 {
            let pair = EmbeddingPair::random(6, 9, 4, seed);
            let l = pair.logits() * 5.0;
            assert!(ce_loss(&l, &ds).unwrap() >= entropy(&ds) - 1e-12);
        }
    }

    #[test]
    fn residual_columns_sum_to_zero() {
        let ds = gen_random(6, 9, SupportSize::Range(1, 5), 4).unwrap();
        let pair = EmbeddingPair::random(6, 9, 5, 3);
        let (_, g) = softmax_residual(&pair.logits(), &ds).unwrap();
        assert!(g.column_iter().all(|c| c.sum().abs() < 1e-15));
        let lambda = 0.3;
        let (gw, _) = ce_grad(&pair, &ds, lambda).unwrap();
        let lhs = gw.row_sum();
        let rhs = pair.w.row_sum() * lambda;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn saturated_one_hot_gradient_vanishes() {
        let ds = gen_symmetric(4, 1).unwrap();
        let l = crate::linalg::center_columns(&Mat::identity(4, 4));
        let mut prev = f64::INFINITY;
        for scale in [1.0, 10.0, 40.0] {
            let pair = EmbeddingPair::new(Mat::identity(4, 4) * scale, l.clone()).unwrap();
            let (gw, gh) = ce_grad(&pair, &ds, 0.0).unwrap();
            let n = gw.norm() + gh.norm();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-10);
    }

    fn objective(pair: &EmbeddingPair, ds: &SoftLabelDataset, lambda: f64) -> f64 {
        ce_loss(&pair.logits(), ds).unwrap() + ridge(pair, lambda)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let (v, m, d) = (2 + seed as usize % 7, 1 + seed as usize % 8, 1 + seed as usize % 8);
            let ds = gen_random(v, m, SupportSize::Range(1, v), seed).unwrap();
            let pair = EmbeddingPair::random(v, m, d, seed + 100);
            let lambda = 0.01;
            let (gw, gh) = ce_grad(&pair, &ds, lambda).unwrap();
            let step = 1e-5;
            let mut num_w = Mat::zeros(v, d);
            for i in 0..v * d {
                let mut p = pair.clone();
                p.w[i] += step;
                let up = objective(&p, &ds, lambda);
                p.w[i] -= 2.0 * step;
                num_w[i] = (up - objective(&p, &ds, lambda)) / (2.0 * step);
            }
            let mut num_h = Mat::zeros(d, m);
            for i in 0..d * m {
                let mut p = pair.clone();
                p.h[i] += step;
                let up = objective(&p, &ds, lambda);
                p.h[i] -= 2.0 * step;
                num_h[i] = (up - objective(&p, &ds, lambda)) / (2.0 * step);
            }
            let rel = |a: &Mat, b: &Mat| (a - b).norm() / a.norm().max(b.norm()).max(1e-12);
            assert!(rel(&gw, &num_w) < 1e-5, "seed {seed}");
            assert!(rel(&gh, &num_h) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn schedule_is_log_spaced_and_increasing() {
        let s = checkpoint_schedule(3000, 32);
        assert_eq!(s[0], 0);
        assert_eq!(s[1], 1);
        assert_eq!(*s.last().unwrap(), 3000);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.len() <= 33);
        assert_eq!(checkpoint_schedule(0, 32), vec![0]);
    }

    #[test]
    fn deterministic_and_parallel_equivalent() {
        let ds = gen_random(6, 12, SupportSize::Range(1, 4), 8).unwrap();
        let opt = OptimizerConfig {
            epochs: 50,
            seed: 3,
            ..Default::default()
        };
        let (a, ta) = train_ufm(&ds, 6, &opt, None).unwrap();
        let (b, tb) = train_ufm(&ds, 6, &opt, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let par = OptimizerConfig { parallel: true, ..opt };
        let (_, tp) = train_ufm(&ds, 6, &par, None).unwrap();
        assert!((tp.last().unwrap().ce - ta.last().unwrap().ce).abs() < 1e-8);
    }

    #[test]
    fn w_stays_centered_without_weight_decay() {
        let ds = gen_random(5, 7, SupportSize::Range(1, 4), 2).unwrap();
        let mut pair = EmbeddingPair::random(5, 7, 5, 9);
        pair.w = Mat::zeros(5, 5);
        for algorithm in [Algorithm::Gd, Algorithm::Ngd, Algorithm::Sgd] {
            let opt = OptimizerConfig {
                algorithm,
                lr: 0.1,
                weight_decay: 0.0,
                epochs: 40,
                batch: if algorithm == Algorithm::Sgd { BatchMode::PerContext } else { BatchMode::Full },
                ..Default::default()
            };
            let st = resume_ufm(&ds, &opt, None, TrainerState::from_pair(&pair, &opt)).unwrap();
            let w = st.pair().w;
            assert!(w.norm() > 0.0);
            assert!(w.row_sum().norm() < 1e-12, "{algorithm:?}");
        }
    }

    #[test]
    fn backtracking_gd_is_monotone() {
        let ds = gen_random(5, 10, SupportSize::Range(1, 4), 6).unwrap();
        let opt = OptimizerConfig {
            algorithm: Algorithm::Gd,
            lr: 50.0,
            backtracking: true,
            weight_decay: 1e-3,
            epochs: 60,
            checkpoints: 61,
            ..Default::default()
        };
        let mut state = init_state(&ds, 5, &opt);
        let mut prev = objective(&state.pair(), &ds, opt.weight_decay);
        for e in 1..=60 {
            let step = OptimizerConfig { epochs: e, ..opt.clone() };
            state = resume_ufm(&ds, &step, None, state).unwrap();
            let now = objective(&state.pair(), &ds, opt.weight_decay);
            assert!(now <= prev + 1e-14);
            prev = now;
        }
        assert!(state.lr < 50.0);
    }

    #[test]
    fn resume_continues_without_gap() {
        let ds = gen_random(5, 8, SupportSize::Range(1, 4), 1).unwrap();
        let full = OptimizerConfig {
            epochs: 80,
            checkpoints: 10,
            ..Default::default()
        };
        let (pair_full, trace_full) = train_ufm(&ds, 5, &full, None).unwrap();
        let half = OptimizerConfig { epochs: 30, ..full.clone() };
        let st = resume_ufm(&ds, &half, None, init_state(&ds, 5, &full)).unwrap();
        let first: Vec<usize> = st.trace.checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(first.last(), Some(&30));
        let st = TrainerState::from_json(&st.to_json()).unwrap();
        let st = resume_ufm(&ds, &full, None, st).unwrap();
        assert_eq!(st.pair(), pair_full);
        let epochs: Vec<usize> = st.trace.checkpoints.iter().map(|c| c.epoch).collect();
        let mut want = first;
        want.extend(trace_full.checkpoints.iter().map(|c| c.epoch).filter(|&e| e > 30));
        assert_eq!(epochs, want);
        let tail = &st.trace.checkpoints[st.trace.checkpoints.len() - 3..];
        assert_eq!(tail, &trace_full.checkpoints[trace_full.checkpoints.len() - 3..]);
    }

    #[test]
    fn divergent_learning_rate_reports_non_finite() {
        let ds = gen_random(5, 8, SupportSize::Range(1, 4), 1).unwrap();
        let opt = OptimizerConfig {
            algorithm: Algorithm::Gd,
            lr: 1e200,
            epochs: 10,
            ..Default::default()
        };
        assert!(matches!(train_ufm(&ds, 5, &opt, None), Err(UfmError::NonFiniteLoss { .. })));
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!("NGD".parse::<Algorithm>().unwrap(), Algorithm::Ngd);
        assert!("rmsprop".parse::<Algorithm>().is_err());
        assert_eq!("per-context".parse::<BatchMode>().unwrap(), BatchMode::PerContext);
        let cfg: OptimizerConfig = toml::from_str("algorithm = \"gd\"\nlr = 0.5").unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Gd);
        assert_eq!(cfg.epochs, 3000);
    }

    #[test]
    fn trace_csv_layout() {
        let ds = gen_random(4, 5, SupportSize::Range(1, 3), 1).unwrap();
        let opt = OptimizerConfig { epochs: 5, checkpoints: 3, ..Default::default() };
        let (_, trace) = train_ufm(&ds, 4, &opt, None).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[0], "0");
        assert_eq!(row[6], "");
    }

    #[test]
    fn weights_json_round_trip() {
        let pair = EmbeddingPair::random(3, 4, 2, 5);
        assert_eq!(EmbeddingPair::from_json(&pair.to_json()).unwrap(), pair);
        assert!(EmbeddingPair::from_json("{\"w\":{\"shape\":[2,2],\"data\":[1]},\"h\":{\"shape\":[2,1],\"data\":[1,2]}}").is_err());
    }

    proptest! {
        #[test]
        fn ce_at_least_entropy(seed in 0u64..1000, scale in 0.1f64..20.0) {
            let ds = gen_random(5, 6, SupportSize::Range(1, 5), seed).unwrap();
            let l = EmbeddingPair::random(5, 6, 5, seed ^ 1).logits() * scale;
            prop_assert!(ce_loss(&l, &ds).unwrap() >= entropy(&ds) - 1e-12);
        }
    }
}
