//! The `W · values` provider abstraction consumed by the regularizers.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::Result;
use crate::scalar::Scalar;

/// Something that multiplies an `N x C` matrix by an affinity matrix `W`.
///
/// Implementations may return `c · W · values` for a fixed unknown `c > 0`
/// (the permutohedral lattice does). Every call on the same provider must use
/// the same `c`.
pub trait AffinityFilter<T: Scalar>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>>;

    /// `filter(1)`, the degree vector up to the provider's scale.
    fn degree(&self) -> Result<Array1<T>> {
        let ones = Array2::from_elem((self.len(), 1), T::one());
        Ok(self.apply(ones.view())?.column(0).to_owned())
    }
}

impl<T: Scalar, F: AffinityFilter<T> + ?Sized> AffinityFilter<T> for &F {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn apply(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>> {
        (**self).apply(values)
    }
}

/// Multiplies every affinity of the wrapped provider by `scale`.
#[derive(Debug, Clone)]
pub struct Scaled<F> {
    pub inner: F,
    pub scale: f64,
}

impl<T: Scalar, F: AffinityFilter<T>> AffinityFilter<T> for Scaled<F> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn apply(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let mut out = self.inner.apply(values)?;
        out.mapv_inplace(|v| v * T::of(self.scale));
        Ok(out)
    }
}
