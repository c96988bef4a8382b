//! The data subspace F(S) of V×m logit matrices and its projections.
//!
//! F is spanned by the rank-one generators `(e_z − e_z') ẽ_jᵀ` for in-support
//! pairs `z, z' ∈ S_j`. A matrix in F is zero off-support and each of its
//! columns sums to zero over the support. The orthogonal complement F⊥ holds
//! exactly the matrices whose in-support entries are equal within each column.
//!
//! Column `j` of `P_F(L)` is `E_jᵀ (E_j E_jᵀ)⁻¹ E_j ℓ_j`, where the rows of
//! `E_j` are `(e_{z_j} − e_z)ᵀ` for the anchor `z_j` and the other in-support
//! tokens `z`. The operator only touches support coordinates, so it is cached
//! as an `S_j × S_j` block, once per distinct support pattern.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Cholesky;
use thiserror::Error;

use crate::corpus::{SoftLabelDataset, SupportMatrix};
use crate::linalg::Mat;

pub type LogitMatrix = Mat;

#[derive(Debug, Error, PartialEq)]
#[error("dimension mismatch: expected {expected:?}, got {got:?}")]
pub struct DimensionMismatch {
    pub expected: (usize, usize),
    pub got: (usize, usize),
}

pub(crate) fn check_shape(x: &Mat, expected: (usize, usize)) -> Result<(), DimensionMismatch> {
    if x.shape() != expected {
        return Err(DimensionMismatch {
            expected,
            got: x.shape(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ColumnProjector {
    pub support: Vec<usize>,
    pub anchor: usize,
    /// `E_jᵀ(E_j E_jᵀ)⁻¹E_j` restricted to the support coordinates.
    pub operator: Arc<Mat>,
}

impl ColumnProjector {
    /// Rows `(e_{anchor} − e_z)ᵀ` over the support coordinates, `(S_j−1)×S_j`.
    pub fn difference_rows(&self) -> Mat {
        difference_rows(&self.support, self.anchor)
    }
}

fn difference_rows(support: &[usize], anchor: usize) -> Mat {
    let k = support.len();
    let a = support.iter().position(|&z| z == anchor).expect("anchor is in the support");
    let mut e = Mat::zeros(k.saturating_sub(1), k);
    for (row, i) in (0..k).filter(|&i| i != a).enumerate() {
        e[(row, a)] = 1.0;
        e[(row, i)] = -1.0;
    }
    e
}

fn column_operator(support: &[usize], anchor: usize) -> Mat {
    let k = support.len();
    if k <= 1 {
        return Mat::zeros(k, k);
    }
    let e = difference_rows(support, anchor);
    // E Eᵀ = I + 11ᵀ, always positive definite.
    let gram = &e * e.transpose();
    let chol = Cholesky::new(gram).expect("E Eᵀ is positive definite");
    let solved = chol.solve(&e);
    e.transpose() * solved
}

/// Projections onto F(S) and F⊥(S).
#[derive(Debug, Clone)]
pub struct SubspaceProjector {
    vocab_size: usize,
    columns: Vec<ColumnProjector>,
}

impl SubspaceProjector {
    /// Anchors default to the smallest token of each support.
    pub fn new(support: &SupportMatrix) -> Self {
        let anchors: Vec<usize> = support.sets().iter().map(|s| s[0]).collect();
        Self::with_anchors(support, &anchors)
    }

    pub fn with_anchors(support: &SupportMatrix, anchors: &[usize]) -> Self {
        assert_eq!(anchors.len(), support.num_contexts(), "one anchor per context");
        let mut cache: HashMap<(Vec<usize>, usize), Arc<Mat>> = HashMap::new();
        let columns = support
            .sets()
            .iter()
            .zip(anchors)
            .map(|(set, &anchor)| {
                assert!(set.contains(&anchor), "anchor {anchor} is not in support {set:?}");
                let operator = cache
                    .entry((set.clone(), anchor))
                    .or_insert_with(|| Arc::new(column_operator(set, anchor)))
                    .clone();
                ColumnProjector {
                    support: set.clone(),
                    anchor,
                    operator,
                }
            })
            .collect();
        SubspaceProjector {
            vocab_size: support.vocab_size(),
            columns,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_contexts(&self) -> usize {
        self.columns.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.vocab_size, self.columns.len())
    }

    pub fn column(&self, j: usize) -> &ColumnProjector {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[ColumnProjector] {
        &self.columns
    }

    /// Dimension of F: Σ_j (S_j − 1).
    pub fn dim(&self) -> usize {
        self.columns.iter().map(|c| c.support.len() - 1).sum()
    }

    pub fn project_f(&self, l: &LogitMatrix) -> Result<LogitMatrix, DimensionMismatch> {
        check_shape(l, self.shape())?;
        let mut out = Mat::zeros(self.vocab_size, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            let k = col.support.len();
            for a in 0..k {
                let mut acc = 0.0;
                for b in 0..k {
                    acc += col.operator[(a, b)] * l[(col.support[b], j)];
                }
                out[(col.support[a], j)] = acc;
            }
        }
        Ok(out)
    }

    pub fn project_perp(&self, l: &LogitMatrix) -> Result<LogitMatrix, DimensionMismatch> {
        Ok(l - self.project_f(l)?)
    }
}

pub fn build_projector(ds: &SoftLabelDataset) -> SubspaceProjector {
    SubspaceProjector::new(&ds.support())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_random, gen_symmetric, SupportSize};
    use crate::linalg::{inner, thin_svd};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn singleton_support_has_rank_zero() {
        let s = SupportMatrix::new(3, vec![vec![1]]).unwrap();
        let p = SubspaceProjector::new(&s);
        assert_eq!(p.dim(), 0);
        let l = random_matrix(3, 1, 1);
        assert_eq!(p.project_f(&l).unwrap(), Mat::zeros(3, 1));
    }

    #[test]
    fn pair_support_projects_on_difference() {
        let s = SupportMatrix::new(3, vec![vec![0, 1]]).unwrap();
        let p = SubspaceProjector::new(&s);
        let l = Mat::from_column_slice(3, 1, &[3.0, 1.0, 7.0]);
        // onto (1,-1,0)/√2: coefficient (3-1)/2
        let out = p.project_f(&l).unwrap();
        assert!((out - Mat::from_column_slice(3, 1, &[1.0, -1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn operators_are_symmetric_idempotent_with_rank_s_minus_one() {
        let ds = gen_random(8, 20, SupportSize::Range(1, 8), 3).unwrap();
        let p = build_projector(&ds);
        for col in p.columns() {
            let op = col.operator.as_ref();
            assert!((op - op.transpose()).norm() < 1e-12);
            assert!((op * op - op).norm() < 1e-12);
            let rank = thin_svd(op, 1e-9).rank();
            assert_eq!(rank, col.support.len() - 1);
        }
        let sym = build_projector(&gen_symmetric(4, 2).unwrap());
        assert!(sym.columns().iter().all(|c| thin_svd(&c.operator, 1e-9).rank() == 1));
    }

    #[test]
    fn equal_in_support_entries_project_to_zero() {
        let s = SupportMatrix::new(4, vec![vec![0, 2], vec![1, 2, 3]]).unwrap();
        let p = SubspaceProjector::new(&s);
        let l = Mat::from_column_slice(4, 2, &[1.0, -5.0, 1.0, 3.0, 9.0, 2.0, 2.0, 2.0]);
        assert!(p.project_f(&l).unwrap().norm() < 1e-14);
        assert!((p.project_perp(&l).unwrap() - &l).norm() < 1e-14);
    }

    #[test]
    fn generators_are_fixed_points() {
        let ds = gen_random(6, 10, SupportSize::Range(2, 5), 11).unwrap();
        let p = build_projector(&ds);
        for (j, col) in ds.columns().iter().enumerate() {
            for &z in &col.support {
                for &zp in &col.support {
                    if z == zp {
                        continue;
                    }
                    let mut g = Mat::zeros(6, 10);
                    g[(z, j)] = 1.0;
                    g[(zp, j)] = -1.0;
                    assert!((p.project_f(&g).unwrap() - &g).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let p = build_projector(&gen_symmetric(4, 2).unwrap());
        let err = p.project_f(&Mat::zeros(4, 5)).unwrap_err();
        assert_eq!(err.expected, (4, 6));
    }

    proptest! {
        #[test]
        fn projection_laws(seed in 0u64..10_000, v in 2usize..9, m in 1usize..12) {
            let ds = gen_random(v, m, SupportSize::Range(1, v), seed).unwrap();
            let p = build_projector(&ds);
            let l = random_matrix(v, m, seed.wrapping_add(1));
            let f = p.project_f(&l).unwrap();
            let perp = p.project_perp(&l).unwrap();
            prop_assert!((p.project_f(&f).unwrap() - &f).norm() < 1e-12);
            prop_assert!((p.project_perp(&perp).unwrap() - &perp).norm() < 1e-12);
            prop_assert!(inner(&f, &perp).abs() < 1e-10);
            let lhs = l.norm_squared();
            let rhs = f.norm_squared() + perp.norm_squared();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1.0));
            for (j, col) in ds.columns().iter().enumerate() {
                for z in 0..v {
                    if !col.contains(z) {
                        prop_assert_eq!(f[(z, j)], 0.0);
                    }
                }
                let first = perp[(col.support[0], j)];
                for &z in &col.support {
                    prop_assert!((perp[(z, j)] - first).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn anchor_independent(seed in 0u64..10_000) {
            let ds = gen_random(7, 9, SupportSize::Range(1, 7), seed).unwrap();
            let support = ds.support();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchors: Vec<usize> = support
                .sets()
                .iter()
                .map(|s| s[rng.random_range(0..s.len())])
                .collect();
            let a = SubspaceProjector::new(&support);
            let b = SubspaceProjector::with_anchors(&support, &anchors);
            let l = random_matrix(7, 9, seed ^ 0xabc);
            prop_assert!((a.project_f(&l).unwrap() - b.project_f(&l).unwrap()).norm() < 1e-12);
        }
    }
}
