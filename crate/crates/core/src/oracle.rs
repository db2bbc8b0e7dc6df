//! Exact O(N^2) dense Gaussian kernel algebra, always evaluated in `f64`.
//!
//! This is the ground truth the lattice and every analytic gradient are
//! checked against. It refuses instances above [`ORACLE_MAX_POINTS`].

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::affinity::AffinityFilter;
use crate::error::{Error, Result};
use crate::imagery::{FeatureMatrix, ScribbleMask};
use crate::losses::EPS_DEGREE_REL;
use crate::scalar::Scalar;

pub const ORACLE_MAX_POINTS: usize = 4096;
/// Kernels up to this many points keep `W` in memory (8 MB at the cap).
const MATERIALIZE_MAX_POINTS: usize = 1024;

/// Implicit `W_pq = exp(-|f_p - f_q|^2 / 2)`, diagonal included.
#[derive(Debug, Clone)]
pub struct DenseKernel {
    features: Array2<f64>,
    cached: Option<Array2<f64>>,
}

impl DenseKernel {
    pub fn new<T: Scalar>(features: &FeatureMatrix<T>) -> Result<Self> {
        let n = features.len();
        if n > ORACLE_MAX_POINTS {
            return Err(Error::OracleTooLarge {
                n,
                cap: ORACLE_MAX_POINTS,
            });
        }
        let mut kernel = Self {
            features: features.rows().mapv(|v| v.as_f64()),
            cached: None,
        };
        if n <= MATERIALIZE_MAX_POINTS {
            kernel.cached = Some(kernel.materialize());
        }
        Ok(kernel)
    }

    pub fn entry(&self, p: usize, q: usize) -> f64 {
        let d2: f64 = self
            .features
            .row(p)
            .iter()
            .zip(self.features.row(q))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-0.5 * d2).exp()
    }

    pub fn materialize(&self) -> Array2<f64> {
        if let Some(w) = &self.cached {
            return w.clone();
        }
        let n = self.features.nrows();
        Array2::from_shape_fn((n, n), |(p, q)| self.entry(p, q))
    }
}

impl<T: Scalar> AffinityFilter<T> for DenseKernel {
    fn len(&self) -> usize {
        self.features.nrows()
    }

    fn apply(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let n = self.features.nrows();
        if values.nrows() != n {
            return Err(Error::Shape {
                context: "dense_filter",
                expected: (n, values.ncols()),
                actual: values.dim(),
            });
        }
        let c = values.ncols();
        if c == 0 {
            return Err(crate::error::invalid("dense filter", "zero channels"));
        }
        let v = values.mapv(|x| x.as_f64());
        let mut out = Array2::<T>::zeros((n, c));
        out.as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(c)
            .enumerate()
            .for_each(|(p, row)| {
                let mut acc = vec![0.0f64; c];
                for q in 0..n {
                    let w = match &self.cached {
                        Some(m) => m[[p, q]],
                        None => self.entry(p, q),
                    };
                    for (a, x) in acc.iter_mut().zip(v.row(q)) {
                        *a += w * x;
                    }
                }
                for (o, a) in row.iter_mut().zip(acc) {
                    *o = T::of(a);
                }
            });
        Ok(out)
    }
}

/// Exact `W · values`.
pub fn dense_filter<T: Scalar>(
    features: &FeatureMatrix<T>,
    values: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    DenseKernel::new(features)?.apply(values)
}

/// Exact `d = W · 1`.
pub fn degree<T: Scalar>(features: &FeatureMatrix<T>) -> Result<Array1<T>> {
    AffinityFilter::<T>::degree(&DenseKernel::new(features)?)
}

/// Discrete normalized cut of a hard labeling from an explicit affinity
/// matrix: `sum_k cut(A_k, rest) / assoc(A_k, all)` by double loops.
/// Empty classes contribute zero.
pub fn discrete_nc(w: &Array2<f64>, labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let total: f64 = w.iter().sum();
    let eps = EPS_DEGREE_REL * total;
    let mut cut = vec![0.0; classes];
    let mut assoc = vec![0.0; classes];
    for p in 0..n {
        for q in 0..n {
            let k = labels[p];
            assoc[k] += w[[p, q]];
            if labels[q] != k {
                cut[k] += w[[p, q]];
            }
        }
    }
    cut.iter().zip(&assoc).map(|(c, a)| c / a.max(eps)).sum()
}

/// Globally minimal discrete normalized cut by enumerating every labeling
/// consistent with the seeds of `clamp`. Ties keep the first labeling in
/// lexicographic order (pixel 0 most significant).
pub fn brute_force_min_nc<T: Scalar>(
    features: &FeatureMatrix<T>,
    classes: usize,
    clamp: Option<&ScribbleMask>,
) -> Result<(Vec<usize>, f64)> {
    let n = features.len();
    let too_large = Error::SearchTooLarge { classes, points: n };
    if classes < 1 {
        return Err(too_large);
    }
    let count = (0..n).try_fold(1u64, |acc, _| {
        acc.checked_mul(classes as u64).filter(|&c| c <= 1 << 20)
    });
    let Some(count) = count else {
        return Err(too_large);
    };
    if let Some(m) = clamp {
        if m.len() != n {
            return Err(Error::Shape {
                context: "brute_force_min_nc clamp",
                expected: (n, 1),
                actual: (m.len(), 1),
            });
        }
    }
    let w = DenseKernel::new(features)?.materialize();
    let mut labels = vec![0usize; n];
    let mut best: Option<(Vec<usize>, f64)> = None;
    for code in 0..count {
        let mut rest = code;
        for p in (0..n).rev() {
            labels[p] = (rest % classes as u64) as usize;
            rest /= classes as u64;
        }
        if let Some(m) = clamp {
            if m.seeds().any(|(p, y)| labels[p] != y) {
                continue;
            }
        }
        let e = discrete_nc(&w, &labels, classes);
        if best.as_ref().is_none_or(|(_, b)| e < *b) {
            best = Some((labels.clone(), e));
        }
    }
    best.ok_or_else(|| crate::error::invalid("clamp", "no labeling satisfies the seeds"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn features(rows: Array2<f64>) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn coincident_points_sum() {
        let f = features(array![[0.0, 0.0], [0.0, 0.0]]);
        let out = dense_filter(&f, array![[2.0], [5.0]].view()).unwrap();
        assert_eq!(out, array![[7.0], [7.0]]);
        assert_eq!(degree(&f).unwrap(), array![2.0, 2.0]);
    }

    #[test]
    fn far_points_are_identity() {
        let f = features(array![[0.0], [1e3]]);
        let out = dense_filter(&f, array![[2.0, 1.0], [5.0, -1.0]].view()).unwrap();
        assert_eq!(out, array![[2.0, 1.0], [5.0, -1.0]]);
    }

    #[test]
    fn single_point_degree() {
        let f = features(array![[3.0, 1.0, 4.0, 1.0, 5.0]]);
        assert_eq!(degree(&f).unwrap(), array![1.0]);
    }

    #[test]
    fn unit_distance_degree() {
        let f = features(array![[0.0, 0.0], [1.0, 0.0]]);
        let d = degree(&f).unwrap();
        let expect = 1.0 + (-0.5f64).exp();
        assert_abs_diff_eq!(d[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 1.60653, epsilon = 1e-5);
    }

    #[test]
    fn rejects_mismatched_rows() {
        let f = features(array![[0.0], [1.0]]);
        assert!(dense_filter(&f, array![[1.0]].view()).is_err());
    }

    #[test]
    fn caps_point_count() {
        let f = features(Array2::zeros((ORACLE_MAX_POINTS + 1, 1)));
        assert!(matches!(
            DenseKernel::new(&f),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn brute_force_zero_cut() {
        let f = features(array![[0.0], [0.0]]);
        let (labels, e) = brute_force_min_nc(&f, 2, None).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(labels[0], labels[1]);
    }

    #[test]
    fn brute_force_clamped_split() {
        let f = features(array![[0.0], [1.0]]);
        let m = ScribbleMask::new(2, 1, vec![0, 1], 2).unwrap();
        let (labels, e) = brute_force_min_nc(&f, 2, Some(&m)).unwrap();
        let w = (-0.5f64).exp();
        assert_eq!(labels, vec![0, 1]);
        assert_abs_diff_eq!(e, 2.0 * w / (1.0 + w), epsilon = 1e-14);
        assert_abs_diff_eq!(e, 0.755081, epsilon = 1e-6);
    }

    #[test]
    fn brute_force_size_guard() {
        let f = features(Array2::zeros((21, 1)));
        assert!(matches!(
            brute_force_min_nc(&f, 2, None),
            Err(Error::SearchTooLarge { .. })
        ));
        let f = features(Array2::zeros((20, 1)));
        assert!(brute_force_min_nc(&f, 1, None).is_ok());
    }
}
