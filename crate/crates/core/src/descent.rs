//! First-order minimization of the joint loss over free per-pixel logits,
//! plus Lloyd's algorithm as the classical K-means baseline.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::Serialize;

use crate::affinity::AffinityFilter;
use crate::error::{invalid, Error, Result};
use crate::imagery::{embed_features, FeatureMode, Image, KernelSpec, ScribbleMask};
use crate::lattice::PermutohedralLattice;
use crate::losses::{
    all_energies, joint_loss, softmax, Energies, Logits, LossConfig, LossContext, SoftSegmentation,
};
use crate::oracle::DenseKernel;
use crate::scalar::Scalar;
use crate::synth;

/// Logit initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// All-zero logits, i.e. uniform `S`.
    Zeros,
    /// Independent uniform noise in `[-scale, scale]` drawn from `seed`.
    Noise { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub max_iters: usize,
    pub clamp_seeds: bool,
    pub trace_every: usize,
    /// Stop once `|E_t - E_{t-10}| <= stop_tol · |E_{t-10}|`.
    pub stop_tol: f64,
    /// Iterations run with `lambda_nc = 0` before the full loss is enabled.
    pub warmup_iters: usize,
    /// Divide each gradient by its largest absolute entry before stepping.
    pub normalize_gradient: bool,
    pub init: Init,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            momentum: 0.9,
            max_iters: 1000,
            clamp_seeds: true,
            trace_every: 1,
            stop_tol: 1e-4,
            warmup_iters: 100,
            normalize_gradient: true,
            init: Init::Zeros,
        }
    }
}

impl DescentConfig {
    fn validate(&self) -> Result<()> {
        if self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(invalid("descent config", "step_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("descent config", "momentum must lie in [0, 1)"));
        }
        if self.max_iters == 0 || self.trace_every == 0 {
            return Err(invalid(
                "descent config",
                "max_iters and trace_every must be at least 1",
            ));
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(invalid("descent config", "stop_tol must be non-negative"));
        }
        Ok(())
    }
}

/// One CSV row: `iter,pce,nc,kmeans,potts,nel,total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub pce: f64,
    pub nc: f64,
    pub kmeans: f64,
    pub potts: f64,
    pub nel: f64,
    pub total: f64,
}

impl TraceRow {
    fn new(iter: usize, e: &Energies) -> Self {
        Self {
            iter,
            pce: e.pce,
            nc: e.nc,
            kmeans: e.kmeans,
            potts: e.potts,
            nel: e.nel,
            total: e.total,
        }
    }
}

/// Energies of the active loss as descent progressed. Terms that were
/// disabled at an iteration are recorded as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyTrace {
    rows: Vec<TraceRow>,
}

impl EnergyTrace {
    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.iter < row.iter));
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabeling {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl HardLabeling {
    pub fn from_soft<T: Scalar>(s: &SoftSegmentation<T>) -> Self {
        Self {
            labels: s.argmax(),
            num_classes: s.k(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescentOutcome<T> {
    pub soft: SoftSegmentation<T>,
    pub hard: HardLabeling,
    pub trace: EnergyTrace,
    /// All energies of the starting point under the full configuration.
    pub initial: Energies,
    /// All energies of the returned segmentation under the full configuration.
    pub last: Energies,
    pub iterations: usize,
}

fn forward<T: Scalar>(
    z: &Logits<T>,
    mask: Option<&ScribbleMask>,
    clamp: bool,
) -> SoftSegmentation<T> {
    let mut s = softmax(z);
    if clamp {
        if let Some(m) = mask {
            s.clamp_seeds(m);
        }
    }
    s
}

fn initial_logits<T: Scalar>(n: usize, k: usize, init: Init) -> Logits<T> {
    match init {
        Init::Zeros => Logits::zeros(n, k),
        Init::Noise { scale, seed } => {
            let mut rng = synth::rng(seed);
            let z =
                Array2::from_shape_simple_fn((n, k), || T::of(rng.random_range(-scale..=scale)));
            Logits::new(z).expect("finite noise")
        }
    }
}

/// Runs descent; see [`optimize_observed`].
pub fn optimize<T: Scalar>(
    ctx: &LossContext<'_, T>,
    loss: &LossConfig,
    cfg: &DescentConfig,
) -> Result<DescentOutcome<T>> {
    optimize_observed(ctx, loss, cfg, |_, _| {})
}

/// Momentum descent on logits. Each iteration takes the softmax, overwrites
/// seed rows with their one-hot labels when clamping, evaluates the joint
/// loss, zeroes the logit gradient on seeds, and steps. `observe` sees every
/// iterate that enters the loss.
pub fn optimize_observed<T: Scalar>(
    ctx: &LossContext<'_, T>,
    loss: &LossConfig,
    cfg: &DescentConfig,
    mut observe: impl FnMut(usize, &SoftSegmentation<T>),
) -> Result<DescentOutcome<T>> {
    cfg.validate()?;
    if loss.is_empty() {
        return Err(Error::EmptyLossConfig);
    }
    let n = ctx.filter().len();
    let k = ctx.num_classes();
    let mask = ctx.mask();
    if cfg.clamp_seeds {
        if let Some(m) = mask {
            if m.seeds().any(|(_, y)| y >= k) {
                return Err(invalid("scribbles", "seed label exceeds class count"));
            }
        }
    }

    let warm_loss = LossConfig {
        lambda_nc: 0.0,
        ..*loss
    };
    let warmup = if warm_loss.is_empty() || loss.lambda_nc == 0.0 {
        0
    } else {
        cfg.warmup_iters.min(cfg.max_iters)
    };

    let mut z = initial_logits::<T>(n, k, cfg.init);
    let mut velocity = Array2::<T>::zeros((n, k));
    let mut trace = EnergyTrace::default();
    let mut history: Vec<f64> = Vec::new();
    let step = T::of(cfg.step_size);
    let momentum = T::of(cfg.momentum);

    let s0 = forward(&z, mask, cfg.clamp_seeds);
    let initial = all_energies(&s0, ctx, loss)?;

    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        let s = forward(&z, mask, cfg.clamp_seeds);
        observe(it, &s);
        let active = if it < warmup { &warm_loss } else { loss };
        let report = joint_loss(&s, ctx, active)?;
        if let Some(term) = report.energies.first_non_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                term,
            });
        }
        if it % cfg.trace_every == 0 {
            trace.push(TraceRow::new(it, &report.energies));
        }
        iterations = it + 1;

        if it >= warmup {
            history.push(report.energies.total);
            let h = history.len();
            if h > 10 {
                let (now, then) = (history[h - 1], history[h - 11]);
                if (now - then).abs() <= cfg.stop_tol * then.abs() {
                    break;
                }
            }
        }

        let mut g = report.grad_z.expect("joint_loss fills grad_z");
        if cfg.clamp_seeds {
            if let Some(m) = mask {
                for (p, _) in m.seeds() {
                    g.row_mut(p).fill(T::zero());
                }
            }
        }
        if cfg.normalize_gradient {
            let peak = g.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
            if peak > T::zero() {
                g.mapv_inplace(|v| v / peak);
            }
        }
        velocity.mapv_inplace(|v| v * momentum);
        velocity.scaled_add(-step, &g);
        *z.values_mut() += &velocity;
        if z.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                term: "logits",
            });
        }
    }

    let soft = forward(&z, mask, cfg.clamp_seeds);
    observe(iterations, &soft);
    let last = all_energies(&soft, ctx, loss)?;
    if let Some(term) = last.first_non_finite() {
        return Err(Error::NonFinite {
            iteration: iterations,
            term,
        });
    }
    let final_row = joint_loss(&soft, ctx, loss)?.energies;
    trace.push(TraceRow::new(iterations, &final_row));
    Ok(DescentOutcome {
        hard: HardLabeling::from_soft(&soft),
        soft,
        trace,
        initial,
        last,
        iterations,
    })
}

/// How `W` is applied on the production path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Exact,
    Lattice,
}

/// Owns the affinity provider for one image so a [`LossContext`] can borrow it.
pub enum Affinity<T: Scalar> {
    Exact(DenseKernel),
    Lattice(PermutohedralLattice<T>),
}

impl<T: Scalar> Affinity<T> {
    pub fn build(img: &Image, spec: KernelSpec, mode: KernelMode) -> Result<Self> {
        let features = embed_features::<T>(img, spec, FeatureMode::Rgbxy);
        Ok(match mode {
            KernelMode::Exact => Self::Exact(DenseKernel::new(&features)?),
            KernelMode::Lattice => Self::Lattice(PermutohedralLattice::build(&features)),
        })
    }

    pub fn filter(&self) -> &dyn AffinityFilter<T> {
        match self {
            Self::Exact(k) => k,
            Self::Lattice(l) => l,
        }
    }

    /// Potts calibration for this provider: 1 for the exact kernel, the
    /// sampled mean-degree ratio for the lattice.
    pub fn potts_calibration(
        &self,
        img: &Image,
        spec: KernelSpec,
        degree: ndarray::ArrayView1<'_, T>,
    ) -> T {
        match self {
            Self::Exact(_) => T::one(),
            Self::Lattice(_) => {
                let features = embed_features::<T>(img, spec, FeatureMode::Rgbxy);
                crate::losses::degree_calibration(degree, &features, 256)
            }
        }
    }
}

/// Convenience: build the kernel and loss context for `img` and run descent.
pub fn optimize_image<T: Scalar>(
    img: &Image,
    mask: Option<&ScribbleMask>,
    num_classes: usize,
    spec: KernelSpec,
    mode: KernelMode,
    loss: &LossConfig,
    cfg: &DescentConfig,
) -> Result<DescentOutcome<T>> {
    if let Some(m) = mask {
        if !m.matches(img) {
            return Err(invalid("scribbles", "mask size differs from image size"));
        }
    }
    let affinity = Affinity::<T>::build(img, spec, mode)?;
    let ctx = LossContext::new(affinity.filter(), img.colors(), mask, num_classes)?;
    let calibration = if loss.lambda_potts != 0.0 {
        affinity.potts_calibration(img, spec, ctx.degree())
    } else {
        T::one()
    };
    let ctx = ctx.with_potts_calibration(calibration);
    optimize(&ctx, loss, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydOutcome {
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Energy after each completed iteration.
    pub history: Vec<f64>,
}

fn sq_dist<T: Scalar>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Hard K-means energy `sum_p |I_p - mu_{l(p)}|^2` with cluster means.
pub fn hard_kmeans_energy<T: Scalar>(colors: ArrayView2<'_, T>, labels: &[usize], k: usize) -> f64 {
    let means = cluster_means(colors, labels, k);
    colors
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(c, &l)| sq_dist(c, means.row(l)).as_f64())
        .sum()
}

fn cluster_means<T: Scalar>(colors: ArrayView2<'_, T>, labels: &[usize], k: usize) -> Array2<T> {
    let mut sums = Array2::<T>::zeros((k, colors.ncols()));
    let mut counts = vec![0usize; k];
    for (c, &l) in colors.rows().into_iter().zip(labels) {
        let mut row = sums.row_mut(l);
        row += &c;
        counts[l] += 1;
    }
    for (mut row, &count) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
        if count > 0 {
            row.mapv_inplace(|v| v / T::of(count as f64));
        }
    }
    sums
}

/// Lloyd iterations from `k` random distinct pixels. An emptied cluster is
/// reseeded with the point farthest from its assigned center.
pub fn lloyd_kmeans<T: Scalar>(
    colors: ArrayView2<'_, T>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<LloydOutcome> {
    let n = colors.nrows();
    if k == 0 || k > n {
        return Err(invalid("lloyd_kmeans", format!("K = {k} with {n} points")));
    }
    let mut rng = synth::rng(seed);
    let start = synth::distinct_indices(n, k, &mut rng);
    let mut centers = colors.select(Axis(0), &start);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let previous = labels.clone();
        for (p, c) in colors.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(c, centers.row(0));
            for j in 1..k {
                let d = sq_dist(c, centers.row(j));
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            labels[p] = best;
        }
        loop {
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[l] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let means = cluster_means(colors, &labels, k);
            let far = (0..n)
                .filter(|&p| counts[labels[p]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(colors.row(a), means.row(labels[a]));
                    let db = sq_dist(colors.row(b), means.row(labels[b]));
                    da.partial_cmp(&db)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .expect("k <= n leaves a cluster with two points");
            labels[far] = empty;
        }
        centers = cluster_means(colors, &labels, k);
        history.push(hard_kmeans_energy(colors, &labels, k));
        if labels == previous {
            break;
        }
    }
    Ok(LloydOutcome {
        energy: *history.last().expect("at least one iteration"),
        labels,
        history,
    })
}

/// Energies of a segmentation plus pixel accuracy against optional truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub energies: Energies,
    pub accuracy: Option<f64>,
}

pub fn pixel_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            context: "pixel_accuracy",
            expected: (truth.len(), 1),
            actual: (pred.len(), 1),
        });
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn evaluate<T: Scalar>(
    s: &SoftSegmentation<T>,
    ctx: &LossContext<'_, T>,
    config: &LossConfig,
    truth: Option<&[usize]>,
) -> Result<Evaluation> {
    let energies = all_energies(s, ctx, config)?;
    let accuracy = truth.map(|t| pixel_accuracy(&s.argmax(), t)).transpose()?;
    Ok(Evaluation { energies, accuracy })
}
