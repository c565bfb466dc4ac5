//! The finite-difference suite run by `mrrn gradcheck`: every differentiable
//! op on random instances, then the whole tiny MRRN and U-Net.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, ArchConfig, ModelKind};
use crate::error::{Error, Result};
use crate::gradcheck::{default_tolerance, grad_check, grad_check_f64_oracle, GradCheckReport};
use crate::kernels::{BnMode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::{LabelMask, Real, Shape, Tensor};

/// Resamples allowed per instance before giving up on finding a point away
/// from every kink.
pub const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random<T: Real>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)))
}

fn weights<T: Real>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()
}

/// Runs `attempt` on fresh random points until one is away from every kink.
fn resampled(seed: u64, mut attempt: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        let report = attempt(&mut rng)?;
        if !report.near_kink() {
            return Ok(report);
        }
    }
    Err(Error::Invalid(format!("no kink-free sample in {MAX_RESAMPLES} draws (seed {seed})")))
}

type OpCase = fn(&mut ChaCha8Rng, u64) -> Result<GradCheckReport, Error>;

fn op_cases<T: Real>() -> Vec<(&'static str, OpCase)> {
    vec![
        ("conv2d", |rng, i| {
            let k = if i % 2 == 0 { 3 } else { 1 };
            let (n, c, o) = (1 + i as usize % 2, 1 + i as usize % 3, 2 + i as usize % 2);
            let x: Tensor<T> = random(Shape::new(n, c, 4 + i as usize % 3, 5), rng);
            let w: Tensor<T> = random(Shape::new(o, c, k, k), rng);
            let b: Tensor<T> = random(Shape::new(1, o, 1, 1), rng);
            let lw = weights::<T>(n * o * x.shape().plane(), rng);
            grad_check(&[x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("batch_norm (train)", |rng, i| {
            let c = 1 + i as usize % 3;
            let x: Tensor<T> = random(Shape::new(2, c, 3, 3 + i as usize % 2), rng);
            let g: Tensor<T> = random(Shape::new(1, c, 1, 1), rng);
            let b: Tensor<T> = random(Shape::new(1, c, 1, 1), rng);
            let lw = weights::<T>(x.numel(), rng);
            grad_check(&[x, g, b], |t, v| {
                let mut stats = RunningStats::new(c);
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Train, "bn")?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("batch_norm (eval)", |rng, _| {
            let x: Tensor<T> = random(Shape::new(2, 2, 3, 3), rng);
            let g: Tensor<T> = random(Shape::new(1, 2, 1, 1), rng);
            let b: Tensor<T> = random(Shape::new(1, 2, 1, 1), rng);
            let lw = weights::<T>(36, rng);
            let stats = RunningStats { mean: weights::<T>(2, rng), var: vec![T::of(0.5), T::of(1.5)], updates: 3 };
            grad_check(&[x, g, b], |t, v| {
                let mut s = stats.clone();
                let y = t.batch_norm(v[0], v[1], v[2], &mut s, BnMode::Eval, "bn")?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("relu", |rng, i| {
            let x: Tensor<T> = random(Shape::new(2, 1 + i as usize % 2, 3, 3), rng);
            let lw = weights::<T>(x.numel(), rng);
            grad_check(&[x], |t, v| {
                let y = t.relu(v[0])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("maxpool2x2", |rng, i| {
            let x: Tensor<T> = random(Shape::new(1, 1 + i as usize % 2, 4, 6), rng);
            let lw = weights::<T>(x.numel() / 4, rng);
            grad_check(&[x], |t, v| {
                let y = t.maxpool2x2(v[0])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("upsample2x", |rng, i| {
            let x: Tensor<T> = random(Shape::new(2, 1 + i as usize % 2, 3, 2), rng);
            let lw = weights::<T>(x.numel() * 4, rng);
            grad_check(&[x], |t, v| {
                let y = t.upsample2x(v[0])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("concat", |rng, i| {
            let (ca, cb) = (1 + i as usize % 2, 1 + i as usize % 3);
            let a: Tensor<T> = random(Shape::new(2, ca, 3, 3), rng);
            let b: Tensor<T> = random(Shape::new(2, cb, 3, 3), rng);
            let lw = weights::<T>(18 * (ca + cb), rng);
            grad_check(&[a, b], |t, v| {
                let y = t.concat(v[0], v[1])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("add", |rng, _| {
            let a: Tensor<T> = random(Shape::new(2, 2, 3, 3), rng);
            let b: Tensor<T> = random(Shape::new(2, 2, 3, 3), rng);
            let lw = weights::<T>(36, rng);
            grad_check(&[a, b], |t, v| {
                let y = t.add(v[0], v[1])?;
                t.weighted_sum(y, lw.clone())
            })
        }),
        ("softmax_ce", |rng, i| {
            let k = 2 + i as usize % 5;
            let x: Tensor<T> = random(Shape::new(2, k, 3, 3), rng);
            let labels = (0..18).map(|_| rng.gen_range(0..k as u8)).collect();
            let target = LabelMask::new(2, 3, 3, labels)?;
            grad_check(&[x], |t, v| t.softmax_ce(v[0], &target))
        }),
    ]
}

/// Whole-network check with a softmax cross-entropy loss. Inputs are the
/// image and every trainable parameter. Below f64 the finite differences run
/// on an f64 copy of the graph at the same point.
pub fn model_check<T: Real>(config: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let model_seed = rng.gen();
    let mut model = build_model::<T>(config, model_seed)?;
    let mut wide = build_model::<f64>(config, model_seed)?;
    let s = config.input_size;
    let x: Tensor<T> = random(Shape::new(2, 1, s, s), rng);
    let labels = (0..2 * s * s).map(|_| rng.gen_range(0..config.num_classes as u8)).collect();
    let target = LabelMask::new(2, s, s, labels)?;
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| p.tensor.clone()));
    let f = |t: &mut Tape<T>, v: &[Var]| {
        let out = model.forward_with(t, &v[1..], v[0])?;
        t.softmax_ce(out.logits, &target)
    };
    if T::BYTES == 8 {
        grad_check(&inputs, f)
    } else {
        grad_check_f64_oracle(&inputs, f, |t, v| {
            let out = wide.forward_with(t, &v[1..], v[0])?;
            t.softmax_ce(out.logits, &target)
        })
    }
}

/// Checks every op on `instances` random instances and the tiny MRRN and
/// U-Net on `model_instances` each, at the default tolerance of `T`.
pub fn run_suite<T: Real>(instances: usize, model_instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let tolerance = default_tolerance::<T>();
    let mut out = Vec::new();
    for (oi, (name, case)) in op_cases::<T>().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances as u64 {
            let r = resampled(seed ^ ((oi as u64) << 32) ^ i, |rng| case(rng, i))?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(SuiteEntry { name, instances, max_rel_error: worst, tolerance });
    }
    for (name, kind) in [("tiny MRRN", ModelKind::Mrrn), ("tiny U-Net", ModelKind::Unet)] {
        let config = ArchConfig::tiny().with_model(kind);
        let mut worst: f64 = 0.0;
        for i in 0..model_instances as u64 {
            let r = resampled(seed ^ (0xABCD << 32) ^ i ^ (kind as u64 * 7919), |rng| model_check::<T>(&config, rng))?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(SuiteEntry { name, instances: model_instances, max_rel_error: worst, tolerance });
    }
    Ok(out)
}
