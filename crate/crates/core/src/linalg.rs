//! Dense matrix helpers shared by the solver, projector and metric code.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Thin SVD truncated to the numerical rank.
///
/// Singular values below `rel_tol * sigma_max` are dropped. The returned
/// factors satisfy `u * diag(s) * vt ≈ x` with `u: rows×r`, `vt: r×cols`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        &us * &self.vt
    }
}

pub fn thin_svd(x: &Mat, rel_tol: f64) -> ThinSvd {
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return ThinSvd {
            u: Mat::zeros(rows, 0),
            s: Vec::new(),
            vt: Mat::zeros(0, cols),
        };
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = order
        .first()
        .map(|&k| svd.singular_values[k])
        .unwrap_or(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| smax > 0.0 && svd.singular_values[k] > rel_tol * smax)
        .collect();
    let r = keep.len();
    let mut ur = Mat::zeros(rows, r);
    let mut vtr = Mat::zeros(r, cols);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in keep.iter().enumerate() {
        ur.set_column(dst, &u.column(src));
        vtr.set_row(dst, &vt.row(src));
        s.push(svd.singular_values[src]);
    }
    ThinSvd { u: ur, s, vt: vtr }
}

pub fn singular_values(x: &Mat) -> Vec<f64> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = x.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn nuclear_norm(x: &Mat) -> f64 {
    singular_values(x).iter().sum()
}

pub fn spectral_norm(x: &Mat) -> f64 {
    singular_values(x).first().copied().unwrap_or(0.0)
}

/// Frobenius inner product.
pub fn inner(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(I - 11ᵀ/n) x`: subtract each column's mean.
pub fn center_columns(x: &Mat) -> Mat {
    let mut out = x.clone();
    let n = x.nrows() as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Singular value thresholding: `U max(Σ - tau, 0) Vᵀ`.
///
/// Returns the shrunk matrix and its nuclear norm.
pub fn svt(x: &Mat, tau: f64, rel_tol: f64) -> (Mat, f64) {
    let svd = thin_svd(x, rel_tol);
    let mut out = Mat::zeros(x.nrows(), x.ncols());
    let mut nuc = 0.0;
    for (k, &s) in svd.s.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk <= 0.0 {
            continue;
        }
        nuc += shrunk;
        out += (svd.u.column(k) * svd.vt.row(k)) * shrunk;
    }
    (out, nuc)
}

/// Moore-Penrose pseudoinverse via the truncated SVD.
pub fn pinv(x: &Mat, rel_tol: f64) -> Mat {
    let svd = thin_svd(x, rel_tol);
    let mut v = svd.vt.transpose();
    for (k, s) in svd.s.iter().enumerate() {
        v.column_mut(k).scale_mut(1.0 / s);
    }
    v * svd.u.transpose()
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn is_finite(x: &Mat) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Row-major flattening, used by the JSON exports.
pub fn to_row_major(x: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            out.push(x[(r, c)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Option<Mat> {
    if data.len() != rows * cols {
        return None;
    }
    Some(Mat::from_row_slice(rows, cols, data))
}

/// JSON representation of a dense matrix: shape header plus row-major data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatrixJson {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&Mat> for MatrixJson {
    fn from(x: &Mat) -> Self {
        MatrixJson {
            shape: [x.nrows(), x.ncols()],
            data: to_row_major(x),
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Option<Mat> {
        from_row_major(self.shape[0], self.shape[1], &self.data)
    }
}
