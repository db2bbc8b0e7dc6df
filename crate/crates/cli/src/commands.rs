use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use ncut_core::descent::{
    evaluate as evaluate_energies, hard_kmeans_energy, lloyd_kmeans, optimize_image,
    pixel_accuracy, Affinity,
};
use ncut_core::formats::{
    read_sseg, write_features_csv, write_image_png, write_label_png, write_mask_png, write_sseg,
    write_trace_csv,
};
use ncut_core::synth::{rng, smooth_image, two_region, TwoRegionParams};
use ncut_core::verify::run_suite;
use ncut_core::{
    embed_features, load_image, load_scribbles, DescentOutcome, FeatureMode, Image, LossConfig,
    LossContext, PermutohedralLattice, Scalar, ScribbleMask, SoftSegmentation,
};
use ndarray::Array2;
use serde_json::json;

use crate::{
    BenchArgs, ClusterArgs, ClusterLoss, EvaluateArgs, Outcome, Precision, SegmentArgs, SynthArgs,
    VerifyArgs,
};

fn read_image(path: &Path) -> Result<Image> {
    load_image(path).with_context(|| format!("reading image {}", path.display()))
}

fn read_mask(path: &Path, classes: usize, img: &Image) -> Result<ScribbleMask> {
    let mask = load_scribbles(path, classes)
        .with_context(|| format!("reading scribbles {}", path.display()))?;
    ensure!(
        mask.matches(img),
        "{} does not match the image size",
        path.display()
    );
    Ok(mask)
}

/// A label PNG in which every pixel carries a class.
fn read_labels(path: &Path, classes: usize, img: &Image) -> Result<Vec<usize>> {
    let mask = read_mask(path, classes, img)?;
    (0..mask.len())
        .map(|p| mask.label(p))
        .collect::<Option<Vec<_>>>()
        .with_context(|| format!("{} leaves pixels unlabeled", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_outputs<T: Scalar>(
    img: &Image,
    out: &DescentOutcome<T>,
    labels: Option<&Path>,
    soft: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    if let Some(p) = labels {
        write_label_png(p, img.width(), img.height(), &out.hard)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = soft {
        let mut w = create(p)?;
        write_sseg(&mut w, &out.soft)?;
        w.flush()?;
    }
    if let Some(p) = trace {
        let mut w = create(p)?;
        write_trace_csv(&mut w, &out.trace)?;
        w.flush()?;
    }
    Ok(())
}

pub fn segment(a: &SegmentArgs, seed: u64) -> Result<Outcome> {
    match a.kernel.precision {
        Precision::Single => segment_as::<f32>(a, seed),
        Precision::Double => segment_as::<f64>(a, seed),
    }
}

fn segment_as<T: Scalar>(a: &SegmentArgs, seed: u64) -> Result<Outcome> {
    let img = read_image(&a.image)?;
    let mask = read_mask(&a.scribbles, a.classes, &img)?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_labels(p, a.classes, &img))
        .transpose()?;
    let spec = a.kernel.spec()?;
    if let Some(p) = &a.features_out {
        let mut w = create(p)?;
        write_features_csv(&mut w, &embed_features::<T>(&img, spec, FeatureMode::Rgbxy))?;
        w.flush()?;
    }
    let out = optimize_image::<T>(
        &img,
        Some(&mask),
        a.classes,
        spec,
        a.kernel.kernel.into(),
        &a.weights.config(),
        &a.descent.config(seed, None),
    )?;
    write_outputs(
        &img,
        &out,
        Some(&a.out),
        a.soft_out.as_deref(),
        a.trace.as_deref(),
    )?;
    let accuracy = truth
        .map(|t| pixel_accuracy(&out.hard.labels, &t))
        .transpose()?;
    println!(
        "{}",
        json!({ "iterations": out.iterations, "energies": out.last, "accuracy": accuracy })
    );
    Ok(Outcome::Ok)
}

pub fn cluster(a: &ClusterArgs, seed: u64) -> Result<Outcome> {
    if a.k < 2 {
        bail!("need K ≥ 2 for clustering");
    }
    match a.kernel.precision {
        Precision::Single => cluster_as::<f32>(a, seed),
        Precision::Double => cluster_as::<f64>(a, seed),
    }
}

fn cluster_as<T: Scalar>(a: &ClusterArgs, seed: u64) -> Result<Outcome> {
    let img = read_image(&a.image)?;
    let off = LossConfig {
        pce: false,
        lambda_nc: 0.0,
        lambda_potts: 0.0,
        lambda_kmeans: 0.0,
        lambda_nel: 0.0,
    };
    let loss = match a.loss {
        ClusterLoss::Kmeans => LossConfig {
            lambda_kmeans: 1.0,
            ..off
        },
        ClusterLoss::Ncut => LossConfig {
            lambda_nc: 1.0,
            ..off
        },
    };
    let cfg = a.descent.config(seed, Some(0.1));
    let out = optimize_image::<T>(
        &img,
        None,
        a.k,
        a.kernel.spec()?,
        a.kernel.kernel.into(),
        &loss,
        &cfg,
    )?;
    write_outputs(
        &img,
        &out,
        a.out.as_deref(),
        a.soft_out.as_deref(),
        a.trace.as_deref(),
    )?;
    let report = match a.loss {
        ClusterLoss::Kmeans => {
            let colors = img.colors::<T>();
            let lloyd = lloyd_kmeans(colors.view(), a.k, a.lloyd_iters, seed)?;
            json!({
                "loss": "kmeans",
                "iterations": out.iterations,
                "descent_energy": out.last.kmeans,
                "descent_hard_energy": hard_kmeans_energy(colors.view(), &out.hard.labels, a.k),
                "lloyd_energy": lloyd.energy,
                "ratio": out.last.kmeans / lloyd.energy,
            })
        }
        ClusterLoss::Ncut => json!({
            "loss": "ncut",
            "iterations": out.iterations,
            "initial_nc": out.initial.nc,
            "final_nc": out.last.nc,
        }),
    };
    println!("{report}");
    Ok(Outcome::Ok)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    match a.kernel.precision {
        Precision::Single => evaluate_as::<f32>(a),
        Precision::Double => evaluate_as::<f64>(a),
    }
}

fn evaluate_as<T: Scalar>(a: &EvaluateArgs) -> Result<Outcome> {
    let img = read_image(&a.image)?;
    let s = match (&a.labels, &a.soft) {
        (Some(p), _) => {
            SoftSegmentation::<T>::one_hot(&read_labels(p, a.classes, &img)?, a.classes)?
        }
        (None, Some(p)) => {
            let file = File::open(p).with_context(|| format!("reading {}", p.display()))?;
            let raw = read_sseg(std::io::BufReader::new(file))?;
            ensure!(
                raw.dim() == (img.len(), a.classes),
                "{} holds {:?}, expected {} x {}",
                p.display(),
                raw.dim(),
                img.len(),
                a.classes
            );
            SoftSegmentation::new(raw.mapv(|v| T::of(v as f64)))?
        }
        (None, None) => bail!("pass --labels or --soft"),
    };
    let mask = a
        .scribbles
        .as_deref()
        .map(|p| read_mask(p, a.classes, &img))
        .transpose()?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_labels(p, a.classes, &img))
        .transpose()?;
    let spec = a.kernel.spec()?;
    let affinity = Affinity::<T>::build(&img, spec, a.kernel.kernel.into())?;
    let ctx = LossContext::new(affinity.filter(), img.colors(), mask.as_ref(), a.classes)?;
    let calibration = affinity.potts_calibration(&img, spec, ctx.degree());
    let ctx = ctx.with_potts_calibration(calibration);
    let report = evaluate_energies(&s, &ctx, &a.weights.config(), truth.as_deref())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(Outcome::Ok)
}

pub fn verify(a: &VerifyArgs, seed: u64) -> Result<Outcome> {
    let checks = run_suite(seed, a.instances, a.corrupt_gradient)?;
    for c in &checks {
        println!("{c}");
    }
    let passed = checks.iter().filter(|c| c.passed()).count();
    println!("{passed} of {} checks passed", checks.len());
    Ok(if passed == checks.len() {
        Outcome::Ok
    } else {
        Outcome::PropertyFailed
    })
}

fn best_of<R>(repeats: usize, mut f: impl FnMut() -> R) -> (R, f64) {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = std::hint::black_box(f());
        best = best.min(t.elapsed().as_secs_f64());
        last = Some(r);
    }
    (last.expect("at least one repeat"), best)
}

pub fn bench(a: &BenchArgs, seed: u64) -> Result<Outcome> {
    if let Some(&s) = a.sizes.iter().find(|&&s| s < 16) {
        bail!("image side {s} is below the minimum of 16");
    }
    ensure!(a.channels >= 1, "--channels must be at least 1");
    let spec = ncut_core::KernelSpec::new(a.sigma_rgb, a.sigma_xy)?;
    println!("n,build_ms,filter_ms_per_channel,ratio");
    let mut previous: Option<(usize, f64)> = None;
    let mut worst: f64 = 0.0;
    for &side in &a.sizes {
        let n = side * side;
        let img = smooth_image(side, side, 10.0, &mut rng(seed ^ side as u64));
        let features = embed_features::<f64>(&img, spec, FeatureMode::Rgbxy);
        let (lattice, build) = best_of(a.repeats, || PermutohedralLattice::build(&features));
        let values = Array2::from_elem((n, a.channels), 1.0);
        let (filtered, filter) = best_of(a.repeats, || lattice.filter(values.view()));
        filtered?;
        let per_channel = filter / a.channels as f64;
        // Growth per fourfold N under a power law fitted to consecutive sizes.
        let ratio = previous.and_then(|(pn, pt)| {
            let size_ratio = n as f64 / pn as f64;
            (size_ratio > 1.0).then(|| 4f64.powf((per_channel / pt).ln() / size_ratio.ln()))
        });
        let ratio_text = ratio.map(|r| format!("{r:.3}")).unwrap_or_default();
        println!(
            "{n},{:.3},{:.3},{ratio_text}",
            build * 1e3,
            per_channel * 1e3
        );
        worst = worst.max(ratio.unwrap_or(0.0));
        previous = Some((n, per_channel));
    }
    if worst > a.max_ratio {
        eprintln!(
            "filter time grew by {worst:.3} per fourfold N (limit {})",
            a.max_ratio
        );
        return Ok(Outcome::PropertyFailed);
    }
    Ok(Outcome::Ok)
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    ensure!(
        a.side >= 2 * a.scribble_len && a.side >= 16,
        "--side must be at least 16 and twice the scribble length"
    );
    let params = TwoRegionParams {
        side: a.side,
        min_gap: a.gap,
        noise: a.noise,
        scribble_len: a.scribble_len,
    };
    let t = two_region(params, &mut rng(seed));
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_image_png(a.out_dir.join("image.png"), &t.image)?;
    write_mask_png(a.out_dir.join("scribbles.png"), &t.scribbles)?;
    let truth = ncut_core::HardLabeling {
        labels: t.truth,
        num_classes: 2,
    };
    write_label_png(a.out_dir.join("truth.png"), a.side, a.side, &truth)?;
    println!("{}", json!({ "side": a.side, "colors": t.colors }));
    Ok(Outcome::Ok)
}
