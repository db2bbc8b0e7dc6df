//! Permutohedral lattice for approximate Gaussian filtering in `O(N·d)`.
//!
//! Points are lifted onto the hyperplane `H_d ⊂ R^{d+1}`, located in the
//! enclosing simplex of the `A*_d` lattice, and splatted onto its `d + 1`
//! vertices with barycentric weights. Blurring runs a `[1, 2, 1] / 4`
//! stencil along each of the `d + 1` lattice axes, and slicing reads the
//! result back with the same weights.
//!
//! The composed operator approximates `c · W` for the unit-bandwidth Gaussian
//! `W_pq = exp(-|f_p - f_q|^2 / 2)` with a fixed `c > 0` that is not removed.
//! The forward and reverse axis orders are averaged so the operator is
//! symmetric up to round-off.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::affinity::AffinityFilter;
use crate::error::{invalid, Error, Result};
use crate::imagery::FeatureMatrix;
use crate::scalar::Scalar;

const EMPTY: u32 = u32::MAX;

/// Open-addressing table from integer lattice keys to dense vertex ids.
#[derive(Debug, Clone)]
struct KeyTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
}

impl KeyTable {
    fn with_capacity(key_len: usize, expected: usize) -> Self {
        let cap = expected.max(16).next_power_of_two();
        Self {
            key_len,
            keys: Vec::with_capacity(expected * key_len),
            slots: vec![EMPTY; cap],
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.key_len.max(1)
    }

    fn key(&self, id: usize) -> &[i32] {
        &self.keys[id * self.key_len..(id + 1) * self.key_len]
    }

    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0;
        for &k in key {
            h = h.wrapping_add(k as i64 as u64).wrapping_mul(2_531_011);
        }
        (h ^ (h >> 29)) as usize
    }

    fn probe(&self, key: &[i32]) -> (usize, Option<u32>) {
        let mask = self.slots.len() - 1;
        let mut slot = Self::hash(key) & mask;
        loop {
            match self.slots[slot] {
                EMPTY => return (slot, None),
                id if self.key(id as usize) == key => return (slot, Some(id)),
                _ => slot = (slot + 1) & mask,
            }
        }
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        self.probe(key).1
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        if let (_, Some(id)) = self.probe(key) {
            return id;
        }
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let (slot, _) = self.probe(key);
        let id = self.len() as u32;
        self.keys.extend_from_slice(key);
        self.slots[slot] = id;
        id
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![EMPTY; cap];
        let mask = cap - 1;
        for id in 0..self.len() {
            let mut slot = Self::hash(self.key(id)) & mask;
            while self.slots[slot] != EMPTY {
                slot = (slot + 1) & mask;
            }
            self.slots[slot] = id as u32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PermutohedralLattice<T> {
    dim: usize,
    points: usize,
    vertices: usize,
    /// `points * (dim + 1)` vertex ids, one simplex per point.
    offsets: Vec<u32>,
    /// Barycentric weights matching `offsets`.
    weights: Vec<T>,
    /// `(dim + 1) * vertices` neighbor pairs; axis-major.
    neighbors: Vec<[u32; 2]>,
}

impl<T: Scalar> PermutohedralLattice<T> {
    pub fn build(features: &FeatureMatrix<T>) -> Self {
        let n = features.len();
        let d = features.dim();
        let d1 = d + 1;

        // Scale so the composed blur approximates a unit-variance Gaussian.
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<T> = (0..d)
            .map(|i| T::of(inv_std / (((i + 1) * (i + 2)) as f64).sqrt()))
            .collect();
        let down = T::of(1.0 / d1 as f64);
        let d1_t = T::of(d1 as f64);

        let mut table = KeyTable::with_capacity(d, n * d1);
        let mut offsets = Vec::with_capacity(n * d1);
        let mut weights = Vec::with_capacity(n * d1);

        let mut elevated = vec![T::zero(); d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![T::zero(); d1 + 1];
        let mut key = vec![0i32; d];

        for row in features.rows().rows() {
            // Lift onto the hyperplane where coordinates sum to zero.
            let mut sm = T::zero();
            for j in (1..=d).rev() {
                let cf = row[j - 1] * scale[j - 1];
                elevated[j] = sm - T::of(j as f64) * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Nearest remainder-zero lattice point.
            let mut sum = 0i32;
            for i in 0..d1 {
                let v = down * elevated[i];
                let up = v.ceil() * d1_t;
                let lo = v.floor() * d1_t;
                let r = if up - elevated[i] < elevated[i] - lo {
                    up
                } else {
                    lo
                };
                rem0[i] = r.to_i32().expect("lattice coordinate fits i32");
                sum += rem0[i];
            }
            let sum = sum / d1 as i32;

            // Rank of each differential coordinate.
            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - T::of(rem0[i] as f64);
                for j in i + 1..d1 {
                    if di < elevated[j] - T::of(rem0[j] as f64) {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            // Walk back onto the plane if the rounded point left it.
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = T::zero());
            for i in 0..d1 {
                let v = (elevated[i] - T::of(rem0[i] as f64)) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d + 1 - r] -= v;
            }
            let wrap = bary[d1];
            bary[0] += T::one() + wrap;

            for (remainder, &weight) in bary.iter().enumerate().take(d1) {
                for i in 0..d {
                    let shift = if rank[i] as usize <= d - remainder {
                        remainder as i32
                    } else {
                        remainder as i32 - d1 as i32
                    };
                    key[i] = rem0[i] + shift;
                }
                offsets.push(table.insert(&key));
                weights.push(weight.max(T::zero()));
            }
        }

        let m = table.len();
        let mut neighbors = Vec::with_capacity(d1 * m);
        let mut lo = vec![0i32; d];
        let mut hi = vec![0i32; d];
        for axis in 0..d1 {
            for id in 0..m {
                let k = table.key(id);
                for i in 0..d {
                    lo[i] = k[i] - 1;
                    hi[i] = k[i] + 1;
                }
                if axis < d {
                    lo[axis] = k[axis] + d as i32;
                    hi[axis] = k[axis] - d as i32;
                }
                neighbors.push([
                    table.find(&lo).unwrap_or(EMPTY),
                    table.find(&hi).unwrap_or(EMPTY),
                ]);
            }
        }

        Self {
            dim: d,
            points: n,
            vertices: m,
            offsets,
            weights,
            neighbors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Vertex ids and barycentric weights of point `p`'s enclosing simplex.
    pub fn simplex(&self, p: usize) -> (&[u32], &[T]) {
        let d1 = self.dim + 1;
        (
            &self.offsets[p * d1..(p + 1) * d1],
            &self.weights[p * d1..(p + 1) * d1],
        )
    }

    /// Approximate `c · W · values` for the lattice's fixed scale `c`.
    pub fn filter(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if values.nrows() != self.points {
            return Err(Error::Shape {
                context: "lattice filter",
                expected: (self.points, values.ncols()),
                actual: values.dim(),
            });
        }
        let c = values.ncols();
        if c == 0 {
            return Err(invalid("lattice filter", "zero channels"));
        }
        let d1 = self.dim + 1;

        let mut splat = vec![T::zero(); self.vertices * c];
        for (p, row) in values.rows().into_iter().enumerate() {
            for r in 0..d1 {
                let v = self.offsets[p * d1 + r] as usize;
                let w = self.weights[p * d1 + r];
                for (acc, &x) in splat[v * c..(v + 1) * c].iter_mut().zip(row.iter()) {
                    *acc += w * x;
                }
            }
        }

        let forward = self.blur(splat.clone(), c, (0..d1).collect());
        let reverse = self.blur(splat, c, (0..d1).rev().collect());
        let half = T::of(0.5);
        let blurred: Vec<T> = forward
            .iter()
            .zip(&reverse)
            .map(|(&a, &b)| half * (a + b))
            .collect();

        let mut out = Array2::<T>::zeros((self.points, c));
        out.as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(c)
            .enumerate()
            .for_each(|(p, row)| {
                for r in 0..d1 {
                    let v = self.offsets[p * d1 + r] as usize;
                    let w = self.weights[p * d1 + r];
                    for (o, &x) in row.iter_mut().zip(&blurred[v * c..(v + 1) * c]) {
                        *o += w * x;
                    }
                }
            });
        Ok(out)
    }

    fn blur(&self, mut values: Vec<T>, c: usize, axes: Vec<usize>) -> Vec<T> {
        let m = self.vertices;
        let mut next = vec![T::zero(); m * c];
        let quarter = T::of(0.25);
        let half = T::of(0.5);
        for axis in axes {
            let nbrs = &self.neighbors[axis * m..(axis + 1) * m];
            let src = &values;
            next.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
                let [lo, hi] = nbrs[i];
                for (ch, o) in out.iter_mut().enumerate() {
                    let mut acc = half * src[i * c + ch];
                    if lo != EMPTY {
                        acc += quarter * src[lo as usize * c + ch];
                    }
                    if hi != EMPTY {
                        acc += quarter * src[hi as usize * c + ch];
                    }
                    *o = acc;
                }
            });
            std::mem::swap(&mut values, &mut next);
        }
        values
    }
}

impl<T: Scalar> AffinityFilter<T> for PermutohedralLattice<T> {
    fn len(&self) -> usize {
        self.points
    }

    fn apply(&self, values: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.filter(values)
    }
}
