//! Predicting the trained geometry from the data alone.
//!
//! The logits of the vanishing-regularization solution split into a finite
//! part `L^in ∈ F` fixed by the log-odds of the soft labels and a diverging
//! part along `L^mm ∈ F⊥`, the minimum nuclear-norm logit matrix with equal
//! in-support logits and unit margin over off-support tokens:
//!
//! ```text
//! L^mm ∈ argmin ‖L‖_*  s.t.  L[z,j] = L[z',j]      z, z' ∈ S_j
//!                            L[z,j] − L[v,j] ≥ 1   z ∈ S_j, v ∉ S_j
//!                            1ᵀL = 0
//! ```
//!
//! The centered support matrix `S̃ = (I − 11ᵀ/V)S` is always feasible (all
//! margins tight) and is optimal when `A = UVᵀ` from its SVD is strictly
//! negative off-support. Otherwise the problem is solved by ADMM with
//! singular-value thresholding and an exact per-column projection onto the
//! constraint set.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, binomial, CorpusError, SoftLabelDataset, SupportMatrix};
use crate::linalg::{center_columns, inner, nuclear_norm, spectral_norm, svt, thin_svd, Mat, MatrixJson, ThinSvd};
use crate::subspace::{build_projector, LogitMatrix, SubspaceProjector};

/// Relative cutoff below which singular values count as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Off-support entries of the certificate must be below this.
pub const CERTIFICATE_THRESHOLD: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("rank(L^mm) = {rank} exceeds the embedding dimension d = {d}")]
    RankExceedsDim { rank: usize, d: usize },
    #[error("NTP-SVM solver did not converge after {} iterations (primal {:.3e}, dual {:.3e})",
        .diagnostics.iterations, .diagnostics.primal_residual, .diagnostics.dual_residual)]
    NotConverged {
        best: Box<LogitMatrix>,
        diagnostics: SolverDiagnostics,
    },
    #[error("the centered support matrix has rank 0")]
    Degenerate,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// `(I − 11ᵀ/V) S`.
pub fn center_support(support: &SupportMatrix) -> Mat {
    center_columns(&support.to_matrix())
}

/// The unique matrix in F whose in-support logit differences equal the
/// log-odds of the soft labels. Zero off-support.
pub fn compute_lin(ds: &SoftLabelDataset, proj: &SubspaceProjector) -> LogitMatrix {
    let mut lin = Mat::zeros(ds.vocab_size(), ds.num_contexts());
    for (j, (col, cp)) in ds.columns().iter().zip(proj.columns()).enumerate() {
        let k = col.len();
        if k < 2 {
            continue;
        }
        let a_pos = col.support.iter().position(|&z| z == cp.anchor).expect("anchor in support");
        let p_anchor = col.probs[a_pos];
        let rhs: Vec<f64> = (0..k).filter(|&i| i != a_pos).map(|i| (p_anchor / col.probs[i]).ln()).collect();
        let rhs = nalgebra::DVector::from_vec(rhs);
        let e = cp.difference_rows();
        let gram = &e * e.transpose();
        let coef = Cholesky::new(gram).expect("E Eᵀ is positive definite").solve(&rhs);
        let ell = e.transpose() * coef;
        for (i, &z) in col.support.iter().enumerate() {
            lin[(z, j)] = ell[i];
        }
    }
    lin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSolverConfig {
    pub max_iter: usize,
    /// ADMM penalty; the SVT threshold is `1/rho`.
    pub rho: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Relative singular-value cutoff inside SVT.
    pub svt_threshold: f64,
    /// Adds `1ᵀL = 0` to the constraints.
    pub center: bool,
    /// Residual balancing: rescale rho by 2 when one residual exceeds the
    /// other tenfold, checked every 10 iterations up to `adapt_until`.
    pub adapt_rho: bool,
    pub adapt_until: usize,
    /// Over-relaxation factor in (0, 2); 1 is plain ADMM.
    pub relaxation: f64,
    /// Also stop once the relative duality gap falls below this; checked
    /// every 50 iterations. Zero disables the test.
    pub tol_gap: f64,
}

impl Default for SvmSolverConfig {
    fn default() -> Self {
        SvmSolverConfig {
            max_iter: 50_000,
            rho: 0.1,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            svt_threshold: RANK_TOL,
            center: true,
            adapt_rho: false,
            adapt_until: 2_000,
            relaxation: 1.6,
            tol_gap: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub rho: f64,
    /// `(‖L‖_* − lower bound) / ‖L‖_*` from the last gap check.
    pub duality_gap: f64,
    pub converged: bool,
}

/// Solver output: the feasible iterate plus the dual matrix recovered from
/// the scaled ADMM multiplier.
#[derive(Debug, Clone)]
pub struct SvmSolution {
    pub lmm: LogitMatrix,
    /// Column-centered `rho·u`; a subgradient of the nuclear norm at `lmm`
    /// at convergence.
    pub dual: Mat,
    pub diagnostics: SolverDiagnostics,
}

/// Euclidean projection of one column onto
/// `{ℓ : ℓ_z = c (z ∈ S), ℓ_v ≤ c − 1 (v ∉ S)}` (optionally with `Σℓ = 0`).
///
/// The set is invariant under shifts along `1`, so the centered version is
/// the projection of the centered input. For fixed `c` the optimum clips
/// off-support entries at `c − 1`; the optimal `c` solves a convex piecewise
/// quadratic in one variable with breakpoints at `x_v + 1`.
fn project_column(x: &[f64], in_support: &[bool], center: bool, out: &mut [f64]) {
    let v = x.len();
    let shift = if center { x.iter().sum::<f64>() / v as f64 } else { 0.0 };
    let mut sum_in = 0.0;
    let mut count_in = 0usize;
    let mut breaks: Vec<f64> = Vec::with_capacity(v);
    for i in 0..v {
        let xi = x[i] - shift;
        if in_support[i] {
            sum_in += xi;
            count_in += 1;
        } else {
            breaks.push(xi + 1.0);
        }
    }
    breaks.sort_by(|a, b| b.total_cmp(a));
    // Active off-support entries are the largest breakpoints above c.
    let mut c = sum_in / count_in as f64;
    let mut acc = sum_in;
    for (k, &y) in breaks.iter().enumerate() {
        if y <= c {
            break;
        }
        acc += y;
        c = acc / (count_in + k + 1) as f64;
    }
    for i in 0..v {
        let xi = x[i] - shift;
        out[i] = if in_support[i] { c } else { xi.min(c - 1.0) };
    }
    if center {
        let mean = out.iter().sum::<f64>() / v as f64;
        out.iter_mut().for_each(|o| *o -= mean);
    }
}

fn project_feasible(x: &Mat, mask: &[Vec<bool>], center: bool) -> Mat {
    let (v, m) = x.shape();
    let mut out = Mat::zeros(v, m);
    let mut buf = vec![0.0; v];
    for j in 0..m {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        project_column(&col, &mask[j], center, &mut buf);
        out.column_mut(j).copy_from_slice(&buf);
    }
    out
}

fn support_mask(support: &SupportMatrix) -> Vec<Vec<bool>> {
    let v = support.vocab_size();
    support
        .sets()
        .iter()
        .map(|set| {
            let mut mask = vec![false; v];
            set.iter().for_each(|&z| mask[z] = true);
            mask
        })
        .collect()
}

/// Lower bound on the NTP-SVM optimum from a dual guess.
///
/// Off-support entries of each column are clipped at zero and the column is
/// re-summed to zero through its support entries; the result `A` then has
/// `min_K ⟨A, L⟩ = −Σ_off A`, and `‖L‖_* ≥ ⟨A, L⟩ / ‖A‖₂` on `K`.
fn dual_lower_bound(mask: &[Vec<bool>], guess: &Mat) -> Option<f64> {
    let mut a = guess.clone();
    let mut value = 0.0;
    for (j, col_mask) in mask.iter().enumerate() {
        let mut col = a.column_mut(j);
        let k = col_mask.iter().filter(|&&b| b).count() as f64;
        for (x, &on) in col.iter_mut().zip(col_mask) {
            if !on {
                *x = x.min(0.0);
                value -= *x;
            }
        }
        let shift = col.sum() / k;
        for (x, &on) in col.iter_mut().zip(col_mask) {
            if on {
                *x -= shift;
            }
        }
    }
    let norm = spectral_norm(&a);
    (norm > 0.0 && value.is_finite()).then(|| value / norm)
}

/// Minimizes the nuclear norm under the NTP-SVM constraints by ADMM.
///
/// Splits `min ‖Z‖_* + ι_K(L)  s.t. L = Z`; the `L`-step is the exact
/// column-wise projection onto `K`, the `Z`-step is singular-value
/// thresholding at `1/rho`. The returned matrix is the projected iterate,
/// so it is feasible to machine precision whatever the residuals.
pub fn solve_ntp_svm(support: &SupportMatrix, cfg: &SvmSolverConfig) -> Result<SvmSolution> {
    let (v, m) = (support.vocab_size(), support.num_contexts());
    let mask = support_mask(support);
    let mut rho = cfg.rho;
    let mut z = Mat::zeros(v, m);
    let mut u = Mat::zeros(v, m);
    let mut l = z.clone();
    let mut diag = SolverDiagnostics {
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        objective: f64::NAN,
        rho,
        duality_gap: f64::INFINITY,
        converged: false,
    };
    for it in 1..=cfg.max_iter {
        l = project_feasible(&(&z - &u), &mask, cfg.center);
        let l_hat = &l * cfg.relaxation + &z * (1.0 - cfg.relaxation);
        let (z_new, _) = svt(&(&l_hat + &u), 1.0 / rho, cfg.svt_threshold);
        let r = (&l - &z_new).norm();
        let s = rho * (&z_new - &z).norm();
        u += &l_hat - &z_new;
        z = z_new;
        let scale = l.norm().max(z.norm()).max(1.0);
        diag.iterations = it;
        diag.primal_residual = r / scale;
        diag.dual_residual = s / (rho * u.norm()).max(1.0);
        if diag.primal_residual <= cfg.tol_primal && diag.dual_residual <= cfg.tol_dual {
            diag.converged = true;
            break;
        }
        if cfg.tol_gap > 0.0 && it % 50 == 0 {
            let nuc = nuclear_norm(&l);
            if let Some(lb) = dual_lower_bound(&mask, &(&u * rho)) {
                diag.duality_gap = ((nuc - lb) / nuc.max(f64::MIN_POSITIVE)).max(0.0);
                if diag.duality_gap <= cfg.tol_gap {
                    diag.converged = true;
                    break;
                }
            }
        }
        if cfg.adapt_rho && it <= cfg.adapt_until && it % 10 == 0 {
            if r > 10.0 * s {
                rho *= 2.0;
                u /= 2.0;
            } else if s > 10.0 * r {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    diag.rho = rho;
    diag.objective = nuclear_norm(&l);
    let dual = center_columns(&(&u * rho));
    if !diag.converged {
        return Err(TheoryError::NotConverged {
            best: Box::new(l),
            diagnostics: diag,
        });
    }
    Ok(SvmSolution {
        lmm: l,
        dual,
        diagnostics: diag,
    })
}

/// Largest violation of the NTP-SVM constraints (equalities and margins).
pub fn constraint_violation(support: &SupportMatrix, l: &LogitMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, set) in support.sets().iter().enumerate() {
        let lo = set.iter().map(|&z| l[(z, j)]).fold(f64::INFINITY, f64::min);
        let hi = set.iter().map(|&z| l[(z, j)]).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(hi - lo);
        for vtok in (0..support.vocab_size()).filter(|&t| !support.contains(t, j)) {
            worst = worst.max(1.0 - (lo - l[(vtok, j)]));
        }
    }
    worst
}

/// Optimality residuals of a candidate `(L, A)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub spectral_norm: f64,
    pub max_column_sum: f64,
    pub max_off_support: f64,
    /// `|⟨A, L⟩ − ‖L‖_*| / ‖L‖_*`.
    pub alignment_gap: f64,
    pub constraint_violation: f64,
}

pub fn kkt_report(support: &SupportMatrix, l: &LogitMatrix, dual: &Mat) -> KktReport {
    let nuc = nuclear_norm(l);
    let mut max_off: f64 = f64::NEG_INFINITY;
    for j in 0..support.num_contexts() {
        for t in (0..support.vocab_size()).filter(|&t| !support.contains(t, j)) {
            max_off = max_off.max(dual[(t, j)]);
        }
    }
    KktReport {
        spectral_norm: spectral_norm(dual),
        max_column_sum: dual.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max),
        max_off_support: max_off,
        alignment_gap: (inner(dual, l) - nuc).abs() / nuc.max(f64::MIN_POSITIVE),
        constraint_violation: constraint_violation(support, l),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub certified: bool,
    /// `U Vᵀ` from the thin SVD of `S̃`.
    pub a: Mat,
    /// Largest off-support entry of `a`; `-inf` when no off-support entry exists.
    pub max_off_support_entry: f64,
}

/// Checks the sufficient condition for `S̃` to solve NTP-SVM.
pub fn certify_candidate(support: &SupportMatrix) -> Certificate {
    let st = center_support(support);
    let svd = thin_svd(&st, RANK_TOL);
    let a = &svd.u * &svd.vt;
    let mut max_off = f64::NEG_INFINITY;
    for j in 0..support.num_contexts() {
        for t in (0..support.vocab_size()).filter(|&t| !support.contains(t, j)) {
            max_off = max_off.max(a[(t, j)]);
        }
    }
    Certificate {
        certified: max_off < CERTIFICATE_THRESHOLD,
        a,
        max_off_support_entry: max_off,
    }
}

/// Balanced factorization `W = UΣ^{1/2}R`, `H = RᵀΣ^{1/2}Vᵀ` with `R` the
/// `r×d` partial identity.
pub fn factorize(lmm: &LogitMatrix, d: usize) -> Result<(Mat, Mat)> {
    let svd = thin_svd(lmm, RANK_TOL);
    factorize_svd(&svd, d)
}

pub fn factorize_svd(svd: &ThinSvd, d: usize) -> Result<(Mat, Mat)> {
    let r = svd.rank();
    if r > d {
        return Err(TheoryError::RankExceedsDim { rank: r, d });
    }
    let (v, m) = (svd.u.nrows(), svd.vt.ncols());
    let mut w = Mat::zeros(v, d);
    let mut h = Mat::zeros(d, m);
    for k in 0..r {
        let root = svd.s[k].sqrt();
        w.set_column(k, &(svd.u.column(k) * root));
        h.set_row(k, &(svd.vt.row(k) * root));
    }
    Ok((w, h))
}

/// Closed-form geometry when the supports are all `C(V,k)` subsets of size `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricGeometry {
    pub vocab_size: usize,
    pub k: usize,
    pub cos_ww: f64,
    /// Indexed by intersection size `0..=k`.
    pub cos_hh: Vec<f64>,
    pub cos_wh_in: f64,
    pub cos_wh_out: f64,
    /// `‖w_v‖² / ‖h_j‖²`.
    pub norm_ratio: f64,
}

impl SymmetricGeometry {
    pub fn cos_hh(&self, intersection: usize) -> f64 {
        self.cos_hh[intersection]
    }
}

pub fn symmetric_geometry(v: usize, k: usize) -> SymmetricGeometry {
    assert!(k >= 1 && k < v, "need 1 <= k <= V-1");
    let (vf, kf) = (v as f64, k as f64);
    let c = binomial(v - 2, k - 1).expect("binomial fits") as f64;
    let base = kf * kf / vf;
    SymmetricGeometry {
        vocab_size: v,
        k,
        cos_ww: -1.0 / (vf - 1.0),
        cos_hh: (0..=k).map(|i| (i as f64 - base) / (kf - base)).collect(),
        // From w_vᵀh_j = S̃[v,j] with ‖w_v‖² = (1 − 1/V)σ, ‖h_j‖² = (k − k²/V)/σ.
        cos_wh_in: ((vf - kf) / (kf * (vf - 1.0))).sqrt(),
        cos_wh_out: -(kf / ((vf - kf) * (vf - 1.0))).sqrt(),
        norm_ratio: (vf - 1.0) * c / (kf * (vf - kf)),
    }
}

/// Verifies `S̃S̃ᵀ = C(V−2,k−1)(I − 11ᵀ/V)` and that the `V−1` nonzero
/// singular values of `S̃` all equal `√C(V−2,k−1)`.
pub fn symmetric_svd_check(v: usize, k: usize) -> Result<bool> {
    let ds = corpus::gen_symmetric(v, k)?;
    let st = center_support(&ds.support());
    let c = binomial(v - 2, k - 1).expect("binomial fits") as f64;
    let target = center_columns(&Mat::identity(v, v)) * c;
    let gram = &st * st.transpose();
    let gram_ok = (&gram - &target).amax() <= 1e-9 * c.max(1.0);
    let svd = thin_svd(&st, RANK_TOL);
    let sv_ok = svd.rank() == v - 1 && svd.s.iter().all(|s| (s - c.sqrt()).abs() <= 1e-9 * c.sqrt());
    Ok(gram_ok && sv_ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmmSource {
    /// `S̃` passed the dual certificate.
    Certificate,
    /// Solved iteratively.
    Solver,
}

#[derive(Debug, Clone)]
pub struct TheoryPrediction {
    pub lin: LogitMatrix,
    pub lmm: LogitMatrix,
    pub svd: ThinSvd,
    pub wmm: Mat,
    pub hmm: Mat,
    pub certificate: Certificate,
    pub proxy: Mat,
    pub source: LmmSource,
    pub diagnostics: Option<SolverDiagnostics>,
}

/// `L^in`, `L^mm` (certificate fast path, else ADMM), its SVD and factors.
pub fn predict(ds: &SoftLabelDataset, d: usize, cfg: &SvmSolverConfig) -> Result<TheoryPrediction> {
    let support = ds.support();
    if d < ds.vocab_size() {
        log::warn!("d = {d} < V = {}: the rank constraint may bind", ds.vocab_size());
    }
    let proj = build_projector(ds);
    let lin = compute_lin(ds, &proj);
    let proxy = center_support(&support);
    let certificate = certify_candidate(&support);
    let (lmm, source, diagnostics) = if certificate.certified {
        (proxy.clone(), LmmSource::Certificate, None)
    } else {
        let sol = solve_ntp_svm(&support, cfg)?;
        (sol.lmm, LmmSource::Solver, Some(sol.diagnostics))
    };
    let svd = thin_svd(&lmm, RANK_TOL);
    let (wmm, hmm) = factorize_svd(&svd, d)?;
    Ok(TheoryPrediction {
        lin,
        lmm,
        svd,
        wmm,
        hmm,
        certificate,
        proxy,
        source,
        diagnostics,
    })
}

/// JSON bundle for [`TheoryPrediction`]; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryBundle {
    pub lin: MatrixJson,
    pub lmm: MatrixJson,
    pub u: MatrixJson,
    pub sigma: Vec<f64>,
    pub vt: MatrixJson,
    pub wmm: MatrixJson,
    pub hmm: MatrixJson,
    pub proxy: MatrixJson,
    pub certified: bool,
    pub certificate_a: MatrixJson,
    pub max_off_support_entry: Option<f64>,
    pub source: LmmSource,
    pub diagnostics: Option<SolverDiagnostics>,
}

impl From<&TheoryPrediction> for TheoryBundle {
    fn from(t: &TheoryPrediction) -> Self {
        let off = t.certificate.max_off_support_entry;
        TheoryBundle {
            lin: (&t.lin).into(),
            lmm: (&t.lmm).into(),
            u: (&t.svd.u).into(),
            sigma: t.svd.s.clone(),
            vt: (&t.svd.vt).into(),
            wmm: (&t.wmm).into(),
            hmm: (&t.hmm).into(),
            proxy: (&t.proxy).into(),
            certified: t.certificate.certified,
            certificate_a: (&t.certificate.a).into(),
            max_off_support_entry: off.is_finite().then_some(off),
            source: t.source,
            diagnostics: t.diagnostics.clone(),
        }
    }
}

impl TheoryBundle {
    pub fn into_prediction(self) -> Option<TheoryPrediction> {
        Some(TheoryPrediction {
            lin: self.lin.to_matrix()?,
            lmm: self.lmm.to_matrix()?,
            svd: ThinSvd {
                u: self.u.to_matrix()?,
                s: self.sigma,
                vt: self.vt.to_matrix()?,
            },
            wmm: self.wmm.to_matrix()?,
            hmm: self.hmm.to_matrix()?,
            certificate: Certificate {
                certified: self.certified,
                a: self.certificate_a.to_matrix()?,
                max_off_support_entry: self.max_off_support_entry.unwrap_or(f64::NEG_INFINITY),
            },
            proxy: self.proxy.to_matrix()?,
            source: self.source,
            diagnostics: self.diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_random, gen_symmetric, Column, SupportSize};
    use approx::assert_abs_diff_eq;

    #[test]
    fn centered_support_columns() {
        let s = SupportMatrix::new(4, vec![vec![0, 1]]).unwrap();
        let st = center_support(&s);
        assert_eq!(st.column(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5, -0.5, -0.5]);

        let st = center_support(&gen_symmetric(3, 1).unwrap().support());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
                assert_abs_diff_eq!(st[(i, j)], want, epsilon = 1e-15);
            }
        }
        let ds = gen_random(9, 30, SupportSize::Range(1, 9), 4).unwrap();
        let st = center_support(&ds.support());
        assert!(st.column_iter().all(|c| c.sum().abs() < 1e-12));
    }

    #[test]
    fn certificate_dual_closes_the_gap() {
        let s = gen_symmetric(5, 2).unwrap().support();
        let cert = certify_candidate(&s);
        let lb = dual_lower_bound(&support_mask(&s), &cert.a).unwrap();
        assert_abs_diff_eq!(lb, nuclear_norm(&center_support(&s)), epsilon = 1e-10);
    }

    #[test]
    fn lin_two_to_one() {
        let ds = SoftLabelDataset::new(
            4,
            3,
            vec![1.0],
            vec![Column {
                support: vec![0, 1],
                probs: vec![2.0 / 3.0, 1.0 / 3.0],
            }],
            None,
        )
        .unwrap();
        let lin = compute_lin(&ds, &build_projector(&ds));
        let half = 2f64.ln() / 2.0;
        assert_abs_diff_eq!(lin[(0, 0)], half, epsilon = 1e-14);
        assert_abs_diff_eq!(lin[(1, 0)], -half, epsilon = 1e-14);
        assert_eq!(lin[(2, 0)], 0.0);
        assert_abs_diff_eq!(lin[(0, 0)], 0.3466, epsilon = 1e-4);
    }

    #[test]
    fn lin_zero_for_uniform_labels() {
        let ds = gen_symmetric(5, 3).unwrap();
        assert!(compute_lin(&ds, &build_projector(&ds)).amax() < 1e-14);
    }

    #[test]
    fn lin_solves_log_odds_and_lives_in_f() {
        let ds = gen_random(8, 25, SupportSize::Range(1, 6), 21).unwrap();
        let proj = build_projector(&ds);
        let lin = compute_lin(&ds, &proj);
        assert!((proj.project_f(&lin).unwrap() - &lin).norm() < 1e-12);
        for (j, col) in ds.columns().iter().enumerate() {
            for (a, &z) in col.support.iter().enumerate() {
                for (b, &zp) in col.support.iter().enumerate() {
                    let want = (col.probs[a] / col.probs[b]).ln();
                    assert!((lin[(z, j)] - lin[(zp, j)] - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn column_projection_matches_brute_force() {
        // Project x onto {ℓ_0 = ℓ_1 = c, ℓ_2, ℓ_3 <= c-1, Σℓ = 0} by scanning c.
        let x = [0.3, -0.2, 0.9, -1.5];
        let mask = [true, true, false, false];
        let mut out = [0.0; 4];
        project_column(&x, &mask, false, &mut out);
        let cost = |c: f64| -> f64 {
            (c - x[0]).powi(2) + (c - x[1]).powi(2) + (x[2] - (c - 1.0)).max(0.0).powi(2) + (x[3] - (c - 1.0)).max(0.0).powi(2)
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut c = -3.0;
        while c < 3.0 {
            if cost(c) < best.0 {
                best = (cost(c), c);
            }
            c += 1e-5;
        }
        assert!((out[0] - best.1).abs() < 1e-4);
        assert!(out[2] <= out[0] - 1.0 + 1e-12);
        project_column(&x, &mask, true, &mut out);
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn two_token_svm() {
        let s = SupportMatrix::new(2, vec![vec![0]]).unwrap();
        let sol = solve_ntp_svm(&s, &SvmSolverConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.lmm[(0, 0)], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.lmm[(1, 0)], -0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(nuclear_norm(&sol.lmm), 0.5f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn one_hot_recovers_etf_logits() {
        let s = gen_symmetric(5, 1).unwrap().support();
        let sol = solve_ntp_svm(&s, &SvmSolverConfig::default()).unwrap();
        assert!((&sol.lmm - center_support(&s)).norm() < 1e-5);
    }

    #[test]
    fn full_support_column_has_no_margin() {
        let s = SupportMatrix::new(3, vec![vec![0, 1, 2], vec![0]]).unwrap();
        let sol = solve_ntp_svm(&s, &SvmSolverConfig::default()).unwrap();
        assert!(sol.lmm.column(0).amax() < 1e-6);
        assert!(constraint_violation(&s, &sol.lmm) < 1e-6);
    }

    #[test]
    fn solver_kkt_on_random_instance() {
        let ds = gen_random(7, 15, SupportSize::Range(1, 4), 5).unwrap();
        let s = ds.support();
        let sol = solve_ntp_svm(&s, &SvmSolverConfig::default()).unwrap();
        let rep = kkt_report(&s, &sol.lmm, &sol.dual);
        assert!(rep.spectral_norm <= 1.0 + 1e-3, "{rep:?}");
        assert!(rep.max_column_sum < 1e-9, "{rep:?}");
        assert!(rep.max_off_support <= 1e-6, "{rep:?}");
        assert!(rep.alignment_gap < 1e-4, "{rep:?}");
        assert!(rep.constraint_violation < 1e-6, "{rep:?}");
        assert!(nuclear_norm(&sol.lmm) <= nuclear_norm(&center_support(&s)) + 1e-4);
    }

    #[test]
    fn symmetric_certificates() {
        for (v, k) in [(3, 1), (4, 2), (5, 2), (6, 3)] {
            let s = gen_symmetric(v, k).unwrap().support();
            let cert = certify_candidate(&s);
            assert!(cert.certified, "V={v} k={k}");
            // A ∝ S̃, so the off-support value is -k/V scaled by 1/√C(V-2,k-1).
            let c = binomial(v - 2, k - 1).unwrap() as f64;
            assert_abs_diff_eq!(cert.max_off_support_entry, -(k as f64) / v as f64 / c.sqrt(), epsilon = 1e-10);
        }
    }

    #[test]
    fn factorization_identities() {
        let ds = gen_random(6, 12, SupportSize::Range(1, 4), 9).unwrap();
        let l = center_support(&ds.support()) + compute_lin(&ds, &build_projector(&ds));
        let (w, h) = factorize(&l, 8).unwrap();
        let svd = thin_svd(&l, RANK_TOL);
        let scale = l.norm();
        assert!((&w * &h - &l).norm() <= 1e-8 * scale);
        let mut us = svd.u.clone();
        let mut vs = svd.vt.transpose();
        for k in 0..svd.rank() {
            us.column_mut(k).scale_mut(svd.s[k]);
            vs.column_mut(k).scale_mut(svd.s[k]);
        }
        assert!((&w * w.transpose() - &us * svd.u.transpose()).norm() <= 1e-8 * scale);
        assert!((h.transpose() * &h - &vs * &svd.vt).norm() <= 1e-8 * scale);
        assert!(matches!(factorize(&l, 2), Err(TheoryError::RankExceedsDim { .. })));
    }

    #[test]
    fn symmetric_formulas() {
        let g = symmetric_geometry(4, 2);
        assert_abs_diff_eq!(g.cos_ww, -1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_hh(0), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_hh(1), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_hh(2), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_wh_in, 3f64.sqrt() / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_wh_out, -(3f64.sqrt()) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.norm_ratio, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(symmetric_geometry(5, 2).norm_ratio, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(symmetric_geometry(7, 1).cos_ww, -1.0 / 6.0, epsilon = 1e-15);
        let g = symmetric_geometry(3, 1);
        assert_abs_diff_eq!(g.cos_wh_in, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.cos_wh_out, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_cosines_reproduce_logits() {
        for v in 2..12usize {
            for k in 1..v {
                let g = symmetric_geometry(v, k);
                let (vf, kf) = (v as f64, k as f64);
                let norms = ((1.0 - 1.0 / vf) * (kf - kf * kf / vf)).sqrt();
                assert_abs_diff_eq!(g.cos_wh_in * norms, 1.0 - kf / vf, epsilon = 1e-14);
                assert_abs_diff_eq!(g.cos_wh_out * norms, -kf / vf, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_svd_checks() {
        assert!(symmetric_svd_check(4, 2).unwrap());
        assert!(symmetric_svd_check(3, 1).unwrap());
        assert!(symmetric_svd_check(7, 3).unwrap());
        let st = center_support(&gen_symmetric(4, 2).unwrap().support());
        let svd = thin_svd(&st, RANK_TOL);
        assert_eq!(svd.rank(), 3);
        assert!(svd.s.iter().all(|s| (s - 2f64.sqrt()).abs() < 1e-12));
        let gram = &st * st.transpose();
        assert!(gram.row_iter().all(|r| r.sum().abs() < 1e-12));
    }

    #[test]
    fn predict_symmetric_and_rank_error() {
        let ds = gen_symmetric(4, 2).unwrap();
        let t = predict(&ds, 4, &SvmSolverConfig::default()).unwrap();
        assert_eq!(t.source, LmmSource::Certificate);
        assert!(t.lin.amax() < 1e-14);
        assert!((&t.lmm - center_support(&ds.support())).norm() < 1e-14);
        assert!(matches!(predict(&ds, 2, &SvmSolverConfig::default()), Err(TheoryError::RankExceedsDim { rank: 3, d: 2 })));
    }

    #[test]
    fn bundle_round_trip() {
        let ds = gen_symmetric(4, 2).unwrap();
        let t = predict(&ds, 4, &SvmSolverConfig::default()).unwrap();
        let json = serde_json::to_string(&TheoryBundle::from(&t)).unwrap();
        let back: TheoryBundle = serde_json::from_str(&json).unwrap();
        let t2 = back.into_prediction().unwrap();
        assert_eq!(t2.lmm, t.lmm);
        assert_eq!(t2.hmm, t.hmm);
    }
}
