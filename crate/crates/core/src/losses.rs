//! Segmentation energies over soft assignments and their analytic gradients.
//!
//! All regularizers take `W` through an [`AffinityFilter`]. The normalized
//! cut energy and gradient are homogeneous of degree zero in `W`, so they can
//! run on the uncalibrated permutohedral lattice. The Potts term is not and
//! takes an explicit calibration factor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityFilter;
use crate::error::{invalid, Error, Result};
use crate::imagery::{FeatureMatrix, ScribbleMask};
use crate::scalar::Scalar;

/// Floor inside logarithms and reciprocals of probabilities.
pub const EPS_LOG: f64 = 1e-12;
/// Normalized-cut denominators are floored at `EPS_DEGREE_REL · sum(d)`.
pub const EPS_DEGREE_REL: f64 = 1e-9;

/// Rows of `S` on the probability simplex: `N` points by `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation<T> {
    s: Array2<T>,
}

impl<T: Scalar> SoftSegmentation<T> {
    pub fn new(s: Array2<T>) -> Result<Self> {
        if s.nrows() == 0 || s.ncols() == 0 {
            return Err(invalid("soft segmentation", "empty matrix"));
        }
        let tol = T::of(1e-6).max(T::epsilon() * T::of(64.0));
        for (p, row) in s.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(invalid(
                    "soft segmentation",
                    format!("row {p} has an entry outside [0, 1]"),
                ));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(invalid(
                    "soft segmentation",
                    format!("row {p} sums to {sum}"),
                ));
            }
        }
        Ok(Self { s })
    }

    /// Wraps `s` without checking the simplex constraints. Energies are
    /// defined on all of `R^{N x K}`, which finite-difference probes need.
    pub fn from_unchecked(s: Array2<T>) -> Self {
        Self { s }
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            s: Array2::from_elem((n, k), T::one() / T::of(k as f64)),
        }
    }

    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("labeling", format!("label {bad} with K = {k}")));
        }
        let mut s = Array2::zeros((labels.len(), k));
        for (p, &l) in labels.iter().enumerate() {
            s[[p, l]] = T::one();
        }
        Self::new(s)
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn k(&self) -> usize {
        self.s.ncols()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.s
    }

    pub fn into_values(self) -> Array2<T> {
        self.s
    }

    /// `S^k`, the soft support of class `k`.
    pub fn column(&self, k: usize) -> ArrayView1<'_, T> {
        self.s.column(k)
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.s
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Overwrites every seed row with the one-hot vector of its label.
    pub fn clamp_seeds(&mut self, mask: &ScribbleMask) {
        for (p, y) in mask.seeds() {
            let mut row = self.s.row_mut(p);
            row.fill(T::zero());
            row[y] = T::one();
        }
    }

    /// Applies a class permutation: column `k` of the result is column `perm[k]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        Self {
            s: self.s.select(Axis(1), perm),
        }
    }
}

/// Unconstrained pre-softmax scores, `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    z: Array2<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn new(z: Array2<T>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits", "non-finite entry"));
        }
        Ok(Self { z })
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            z: Array2::zeros((n, k)),
        }
    }

    pub fn values(&self) -> &Array2<T> {
        &self.z
    }

    pub fn values_mut(&mut self) -> &mut Array2<T> {
        &mut self.z
    }
}

/// Which terms enter the joint loss and their weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub pce: bool,
    pub lambda_nc: f64,
    pub lambda_potts: f64,
    pub lambda_kmeans: f64,
    pub lambda_nel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pce: true,
            lambda_nc: 1.6,
            lambda_potts: 0.0,
            lambda_kmeans: 0.0,
            lambda_nel: 0.1,
        }
    }
}

impl LossConfig {
    pub fn pce_only() -> Self {
        Self {
            pce: true,
            lambda_nc: 0.0,
            lambda_potts: 0.0,
            lambda_kmeans: 0.0,
            lambda_nel: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.pce
            && self.lambda_nc == 0.0
            && self.lambda_potts == 0.0
            && self.lambda_kmeans == 0.0
            && self.lambda_nel == 0.0
    }

    fn needs_filter(&self) -> bool {
        self.lambda_nc != 0.0 || self.lambda_potts != 0.0
    }
}

/// Scalar energy components. Disabled terms are reported as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub pce: f64,
    pub nc: f64,
    pub potts: f64,
    pub kmeans: f64,
    pub nel: f64,
    pub total: f64,
}

impl Energies {
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("pce", self.pce),
            ("nc", self.nc),
            ("potts", self.potts),
            ("kmeans", self.kmeans),
            ("nel", self.nel),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

#[derive(Debug, Clone)]
pub struct LossReport<T> {
    pub energies: Energies,
    /// `dE/dS`.
    pub grad_s: Array2<T>,
    /// `dE/dz` through the softmax.
    pub grad_z: Option<Array2<T>>,
}

fn check_shape<T>(
    context: &'static str,
    expected: (usize, usize),
    m: &ArrayView2<'_, T>,
) -> Result<()> {
    if m.dim() != expected {
        return Err(Error::Shape {
            context,
            expected,
            actual: m.dim(),
        });
    }
    Ok(())
}

pub fn softmax<T: Scalar>(z: &Logits<T>) -> SoftSegmentation<T> {
    let mut s = z.z.clone();
    for mut row in s.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    SoftSegmentation { s }
}

/// `grad_z_p^j = S_p^j (grad_s_p^j - sum_k grad_s_p^k S_p^k)`.
pub fn softmax_backward<T: Scalar>(
    s: &SoftSegmentation<T>,
    grad_s: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    check_shape("softmax_backward", s.s.dim(), &grad_s)?;
    let mut out = Array2::zeros(s.s.dim());
    Zip::from(out.rows_mut())
        .and(s.s.rows())
        .and(grad_s.rows())
        .for_each(|mut o, sp, gp| {
            let inner: T = sp.iter().zip(gp.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut o)
                .and(&sp)
                .and(&gp)
                .for_each(|o, &a, &b| *o = a * (b - inner));
        });
    Ok(out)
}

/// `sum_{p in seeds} -ln S_p^{y_p}` and its gradient.
pub fn partial_cross_entropy<T: Scalar>(
    s: &SoftSegmentation<T>,
    mask: &ScribbleMask,
) -> Result<(T, Array2<T>)> {
    if mask.len() != s.n() {
        return Err(Error::Shape {
            context: "partial_cross_entropy",
            expected: (s.n(), s.k()),
            actual: (mask.len(), mask.num_classes()),
        });
    }
    let eps = T::of(EPS_LOG);
    let mut energy = T::zero();
    let mut grad = Array2::zeros(s.s.dim());
    for (p, y) in mask.seeds() {
        if y >= s.k() {
            return Err(invalid(
                "scribble label",
                format!("label {y} with K = {}", s.k()),
            ));
        }
        let v = s.s[[p, y]].max(eps);
        energy -= v.ln();
        grad[[p, y]] = -v.recip();
    }
    Ok((energy, grad))
}

fn check_filter<T: Scalar>(
    s: &SoftSegmentation<T>,
    filter: &dyn AffinityFilter<T>,
    degree: ArrayView1<'_, T>,
) -> Result<()> {
    if filter.len() != s.n() || degree.len() != s.n() {
        return Err(Error::Shape {
            context: "normalized cut",
            expected: (s.n(), s.k()),
            actual: (filter.len(), degree.len()),
        });
    }
    Ok(())
}

fn degree_floor<T: Scalar>(degree: ArrayView1<'_, T>) -> T {
    T::of(EPS_DEGREE_REL) * degree.sum()
}

/// Energy and gradient of the cut form given `ws = W·S`.
fn nc_terms<T: Scalar>(s: &Array2<T>, ws: &Array2<T>, degree: ArrayView1<'_, T>) -> (T, Array2<T>) {
    let eps = degree_floor(degree);
    let two = T::of(2.0);
    let mut energy = T::zero();
    let mut grad = Array2::zeros(s.dim());
    for k in 0..s.ncols() {
        let sk = s.column(k);
        let wsk = ws.column(k);
        let vol = degree.dot(&sk);
        let assoc = sk.dot(&wsk);
        let mut g = grad.column_mut(k);
        if vol >= eps {
            energy += (vol - assoc) / vol;
            let a = assoc / (vol * vol);
            Zip::from(&mut g)
                .and(degree)
                .and(wsk)
                .for_each(|g, &d, &w| *g = a * d - two * w / vol);
        } else {
            // Floored denominator: the ratio is linear over a constant.
            energy += (vol - assoc) / eps;
            Zip::from(&mut g)
                .and(degree)
                .and(wsk)
                .for_each(|g, &d, &w| *g = (d - two * w) / eps);
        }
    }
    (energy, grad)
}

/// Relaxed normalized cut `sum_k S^k' W (1 - S^k) / d' S^k`.
pub fn nc_energy<T: Scalar>(
    s: &SoftSegmentation<T>,
    filter: &dyn AffinityFilter<T>,
    degree: ArrayView1<'_, T>,
) -> Result<T> {
    check_filter(s, filter, degree)?;
    let ws = filter.apply(s.s.view())?;
    Ok(nc_terms(&s.s, &ws, degree).0)
}

/// Normalized association form `-sum_k S^k' W S^k / d' S^k`; equals
/// [`nc_energy`] minus `K` whenever no denominator is floored.
pub fn nc_association<T: Scalar>(
    s: &SoftSegmentation<T>,
    filter: &dyn AffinityFilter<T>,
    degree: ArrayView1<'_, T>,
) -> Result<T> {
    check_filter(s, filter, degree)?;
    let ws = filter.apply(s.s.view())?;
    let eps = degree_floor(degree);
    Ok((0..s.k())
        .map(|k| {
            let sk = s.s.column(k);
            -sk.dot(&ws.column(k)) / degree.dot(&sk).max(eps)
        })
        .sum())
}

/// `dE/dS^k = (S^k' W S^k) d / (d' S^k)^2 - 2 W S^k / d' S^k`.
pub fn nc_gradient<T: Scalar>(
    s: &SoftSegmentation<T>,
    filter: &dyn AffinityFilter<T>,
    degree: ArrayView1<'_, T>,
) -> Result<Array2<T>> {
    check_filter(s, filter, degree)?;
    let ws = filter.apply(s.s.view())?;
    Ok(nc_terms(&s.s, &ws, degree).1)
}

fn potts_terms<T: Scalar>(
    s: &Array2<T>,
    ws: ArrayView2<'_, T>,
    degree: ArrayView1<'_, T>,
    calibration: T,
) -> (T, Array2<T>) {
    let two = T::of(2.0);
    let mut energy = T::zero();
    let mut grad = Array2::zeros(s.dim());
    for k in 0..s.ncols() {
        let sk = s.column(k);
        let wsk = ws.column(k);
        energy += (sk.dot(&degree) - sk.dot(&wsk)) / calibration;
        Zip::from(grad.column_mut(k))
            .and(degree)
            .and(wsk)
            .for_each(|g, &d, &w| *g = (d - two * w) / calibration);
    }
    (energy, grad)
}

/// Relaxed Potts `sum_k S^k' W (1 - S^k)`, with `W` divided by `calibration`.
pub fn potts_energy<T: Scalar>(
    s: &SoftSegmentation<T>,
    filter: &dyn AffinityFilter<T>,
    calibration: T,
) -> Result<(T, Array2<T>)> {
    if filter.len() != s.n() {
        return Err(Error::Shape {
            context: "potts_energy",
            expected: (s.n(), s.k()),
            actual: (filter.len(), s.k()),
        });
    }
    if calibration.is_nan() || calibration <= T::zero() {
        return Err(invalid("potts calibration", "must be positive"));
    }
    let mut stacked = Array2::ones((s.n(), s.k() + 1));
    stacked.slice_mut(ndarray::s![.., 1..]).assign(&s.s);
    let out = filter.apply(stacked.view())?;
    let degree = out.column(0);
    let ws = out.slice(ndarray::s![.., 1..]);
    Ok(potts_terms(&s.s, ws, degree, calibration))
}

/// Ratio between a scaled filter's mean degree and the exact mean degree,
/// estimated on an evenly strided subset of at most `samples` rows.
pub fn degree_calibration<T: Scalar>(
    filter_degree: ArrayView1<'_, T>,
    features: &FeatureMatrix<T>,
    samples: usize,
) -> T {
    let n = features.len();
    let stride = n.div_ceil(samples.max(1)).max(1);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let f = features.rows().mapv(|v| v.as_f64());
    let mut exact = 0.0;
    let mut approx = 0.0;
    for &p in &rows {
        let fp = f.row(p);
        exact += f
            .rows()
            .into_iter()
            .map(|fq| {
                let d2: f64 = fp
                    .iter()
                    .zip(fq.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (-0.5 * d2).exp()
            })
            .sum::<f64>();
        approx += filter_degree[p].as_f64();
    }
    T::of(approx / exact)
}

/// Soft K-means `sum_k sum_p S_p^k |I_p - mu_k|^2` with `mu_k` the
/// `S^k`-weighted mean color. The gradient holds the means fixed, which is
/// exact because the means are optimal for the current `S`.
pub fn kmeans_energy<T: Scalar>(
    s: &SoftSegmentation<T>,
    colors: ArrayView2<'_, T>,
) -> Result<(T, Array2<T>)> {
    if colors.nrows() != s.n() {
        return Err(Error::Shape {
            context: "kmeans_energy",
            expected: (s.n(), colors.ncols()),
            actual: colors.dim(),
        });
    }
    let means = soft_means(s, colors);
    let mut energy = T::zero();
    let mut grad = Array2::zeros(s.s.dim());
    for (p, color) in colors.rows().into_iter().enumerate() {
        for k in 0..s.k() {
            let dist: T = color
                .iter()
                .zip(means.row(k))
                .map(|(&c, &m)| (c - m) * (c - m))
                .sum();
            grad[[p, k]] = dist;
            energy += s.s[[p, k]] * dist;
        }
    }
    Ok((energy, grad))
}

/// `K x C` matrix of `S^k`-weighted mean colors.
pub fn soft_means<T: Scalar>(s: &SoftSegmentation<T>, colors: ArrayView2<'_, T>) -> Array2<T> {
    let mass = s.s.sum_axis(Axis(0)).mapv(|m| m.max(T::of(EPS_LOG)));
    let mut means = s.s.t().dot(&colors);
    for (mut row, m) in means.rows_mut().into_iter().zip(mass.iter()) {
        row.mapv_inplace(|v| v / *m);
    }
    means
}

/// Non-exist-label penalty: total mass of the classes absent from `present`.
pub fn nel_penalty<T: Scalar>(s: &SoftSegmentation<T>, present: &[bool]) -> Result<(T, Array2<T>)> {
    if present.len() != s.k() {
        return Err(invalid(
            "present classes",
            format!("{} flags for K = {}", present.len(), s.k()),
        ));
    }
    let mut energy = T::zero();
    let mut grad = Array2::zeros(s.s.dim());
    for (k, _) in present.iter().enumerate().filter(|(_, &p)| !p) {
        energy += s.s.column(k).sum();
        grad.column_mut(k).fill(T::one());
    }
    Ok((energy, grad))
}

/// Everything the joint loss needs besides `S`: the affinity provider with
/// its degree vector, colors for K-means, and the optional scribbles.
pub struct LossContext<'a, T: Scalar> {
    filter: &'a dyn AffinityFilter<T>,
    degree: Array1<T>,
    potts_calibration: T,
    colors: Array2<T>,
    mask: Option<&'a ScribbleMask>,
    present: Vec<bool>,
}

impl<'a, T: Scalar> LossContext<'a, T> {
    /// Evaluates `d = filter(1)` once. `num_classes` must match the mask when
    /// one is given; without scribbles every class counts as present.
    pub fn new(
        filter: &'a dyn AffinityFilter<T>,
        colors: Array2<T>,
        mask: Option<&'a ScribbleMask>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = filter.len();
        if colors.nrows() != n {
            return Err(Error::Shape {
                context: "loss context colors",
                expected: (n, colors.ncols()),
                actual: colors.dim(),
            });
        }
        let present = match mask {
            Some(m) => {
                if m.len() != n {
                    return Err(Error::Shape {
                        context: "loss context mask",
                        expected: (n, num_classes),
                        actual: (m.len(), m.num_classes()),
                    });
                }
                if m.num_classes() != num_classes {
                    return Err(invalid(
                        "class count",
                        format!(
                            "mask has K = {}, segmentation K = {num_classes}",
                            m.num_classes()
                        ),
                    ));
                }
                m.present_classes()
            }
            None => vec![true; num_classes],
        };
        Ok(Self {
            filter,
            degree: filter.degree()?,
            potts_calibration: T::one(),
            colors,
            mask,
            present,
        })
    }

    pub fn with_potts_calibration(mut self, calibration: T) -> Self {
        self.potts_calibration = calibration;
        self
    }

    pub fn degree(&self) -> ArrayView1<'_, T> {
        self.degree.view()
    }

    pub fn filter(&self) -> &dyn AffinityFilter<T> {
        self.filter
    }

    pub fn colors(&self) -> ArrayView2<'_, T> {
        self.colors.view()
    }

    pub fn mask(&self) -> Option<&ScribbleMask> {
        self.mask
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn potts_calibration(&self) -> T {
        self.potts_calibration
    }
}

/// `total = pCE + λ_nc NC + λ_potts Potts + λ_kmeans KM + λ_nel NEL`, with
/// the matching weighted gradient and its pullback through the softmax.
pub fn joint_loss<T: Scalar>(
    s: &SoftSegmentation<T>,
    ctx: &LossContext<'_, T>,
    config: &LossConfig,
) -> Result<LossReport<T>> {
    if config.is_empty() {
        return Err(Error::EmptyLossConfig);
    }
    if s.n() != ctx.filter.len() || s.k() != ctx.num_classes() {
        return Err(Error::Shape {
            context: "joint_loss",
            expected: (ctx.filter.len(), ctx.num_classes()),
            actual: (s.n(), s.k()),
        });
    }
    let mut e = Energies::default();
    let mut grad = Array2::<T>::zeros(s.s.dim());
    let mut total = T::zero();

    if config.pce {
        if let Some(mask) = ctx.mask {
            let (v, g) = partial_cross_entropy(s, mask)?;
            e.pce = v.as_f64();
            total += v;
            grad += &g;
        }
    }

    let ws = if config.needs_filter() {
        Some(ctx.filter.apply(s.s.view())?)
    } else {
        None
    };

    if config.lambda_nc != 0.0 {
        let ws = ws.as_ref().expect("filtered");
        let (v, g) = nc_terms(&s.s, ws, ctx.degree.view());
        let lambda = T::of(config.lambda_nc);
        e.nc = v.as_f64();
        total += lambda * v;
        grad.scaled_add(lambda, &g);
    }
    if config.lambda_potts != 0.0 {
        let ws = ws.as_ref().expect("filtered");
        let (v, g) = potts_terms(&s.s, ws.view(), ctx.degree.view(), ctx.potts_calibration);
        let lambda = T::of(config.lambda_potts);
        e.potts = v.as_f64();
        total += lambda * v;
        grad.scaled_add(lambda, &g);
    }
    if config.lambda_kmeans != 0.0 {
        let (v, g) = kmeans_energy(s, ctx.colors.view())?;
        let lambda = T::of(config.lambda_kmeans);
        e.kmeans = v.as_f64();
        total += lambda * v;
        grad.scaled_add(lambda, &g);
    }
    if config.lambda_nel != 0.0 {
        let (v, g) = nel_penalty(s, &ctx.present)?;
        let lambda = T::of(config.lambda_nel);
        e.nel = v.as_f64();
        total += lambda * v;
        grad.scaled_add(lambda, &g);
    }
    e.total = total.as_f64();

    let grad_z = softmax_backward(s, grad.view())?;
    Ok(LossReport {
        energies: e,
        grad_s: grad,
        grad_z: Some(grad_z),
    })
}

/// Every energy of `s`, regardless of which weights are enabled; `total`
/// follows `config`.
pub fn all_energies<T: Scalar>(
    s: &SoftSegmentation<T>,
    ctx: &LossContext<'_, T>,
    config: &LossConfig,
) -> Result<Energies> {
    let ws = ctx.filter.apply(s.s.view())?;
    let pce = match ctx.mask {
        Some(m) => partial_cross_entropy(s, m)?.0.as_f64(),
        None => 0.0,
    };
    let nc = nc_terms(&s.s, &ws, ctx.degree.view()).0.as_f64();
    let potts = potts_terms(&s.s, ws.view(), ctx.degree.view(), ctx.potts_calibration)
        .0
        .as_f64();
    let kmeans = kmeans_energy(s, ctx.colors.view())?.0.as_f64();
    let nel = nel_penalty(s, &ctx.present)?.0.as_f64();
    let total = if config.pce { pce } else { 0.0 }
        + config.lambda_nc * nc
        + config.lambda_potts * potts
        + config.lambda_kmeans * kmeans
        + config.lambda_nel * nel;
    Ok(Energies {
        pce,
        nc,
        potts,
        kmeans,
        nel,
        total,
    })
}
