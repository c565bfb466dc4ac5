//! Forward and backward numeric kernels. These operate on plain tensors and
//! slices; gradient bookkeeping lives in [`crate::tape`].

use crate::error::{Error, Result};
use crate::tensor::{LabelMask, Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

pub(crate) fn check_conv(x: Shape, w: Shape, b: Shape) -> Result<usize> {
    if w.h != w.w || !(w.h == 1 || w.h == 3) {
        return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {}x{}", w.h, w.w)));
    }
    if x.c != w.c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels (dim 1) = {} but weight expects c_in = {}", x.c, w.c),
        ));
    }
    if b.numel() != w.n {
        return Err(Error::shape("conv2d", format!("bias has {} elements but c_out = {}", b.numel(), w.n)));
    }
    Ok(w.h)
}

/// Unfolds one sample (c, h, w) into a (c*k*k, h*w) patch matrix with zero padding.
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { T::zero() } else { src_row[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back into (c, h, w).
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all row-major and contiguous.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: lengths checked above; strides describe contiguous row-major matrices.
    unsafe {
        T::gemm(
            m, k, n, T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// Same-padded, stride-1 cross-correlation plus per-channel bias.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = check_conv(xs, ws, b.shape())?;
    let hw = xs.plane();
    let patch = ws.c * k * k;
    let out_shape = Shape::new(xs.n, ws.n, xs.h, xs.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    for n in 0..xs.n {
        let dst = &mut out[n * ws.n * hw..(n + 1) * ws.n * hw];
        for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(b.data()[co]);
        }
        let src = x.sample(n);
        let rhs = if k == 1 {
            src
        } else {
            im2col(src, xs.c, xs.h, xs.w, k, &mut cols);
            &cols
        };
        matmul(ws.n, patch, hw, w.data(), rhs, T::one(), dst);
    }
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let hw = xs.plane();
    let patch = ws.c * k * k;
    let mut dx = want[0].then(|| vec![T::zero(); xs.numel()]);
    let mut dw = want[1].then(|| vec![T::zero(); ws.numel()]);
    let mut db = want[2].then(|| vec![T::zero(); ws.n]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    let mut dcols = if want[0] && k != 1 { vec![T::zero(); patch * hw] } else { Vec::new() };

    for n in 0..xs.n {
        let g = &dy[n * ws.n * hw..(n + 1) * ws.n * hw];
        if let Some(db) = db.as_mut() {
            for (co, plane) in g.chunks_exact(hw).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src = x.sample(n);
            let rhs = if k == 1 {
                src
            } else {
                im2col(src, xs.c, xs.h, xs.w, k, &mut cols);
                &cols
            };
            // dw (cout×patch) += g (cout×hw) · rhsᵀ (hw×patch)
            // SAFETY: g is cout×hw, rhs is patch×hw read transposed, dw is cout×patch.
            unsafe {
                T::gemm(
                    ws.n, hw, patch, T::one(),
                    g.as_ptr(), hw as isize, 1,
                    rhs.as_ptr(), 1, hw as isize,
                    T::one(),
                    dw.as_mut_ptr(), patch as isize, 1,
                )
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * xs.c * hw..(n + 1) * xs.c * hw];
            let target: &mut [T] = if k == 1 { dst } else { &mut dcols };
            // target (patch×hw) = wᵀ (patch×cout) · g (cout×hw)
            // SAFETY: w is cout×patch read transposed; shapes match the buffers.
            unsafe {
                T::gemm(
                    patch, ws.n, hw, T::one(),
                    w.data().as_ptr(), 1, patch as isize,
                    g.as_ptr(), hw as isize, 1,
                    T::zero(),
                    target.as_mut_ptr(), hw as isize, 1,
                )
            }
            if k != 1 {
                col2im(&dcols, xs.c, xs.h, xs.w, k, dst);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// NaN passes through so a diverged network still yields a non-finite loss.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the statistics.
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], updates: 0 }
    }

    pub fn is_populated(&self) -> bool {
        self.updates > 0
    }
}

/// Saved state for the batch-norm backward pass.
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || stats.mean.len() != s.c {
        return Err(Error::shape(
            "batch_norm",
            format!("input channels (dim 1) = {} but gamma/beta/stats have {}/{}/{}", s.c, gamma.len(), beta.len(), stats.mean.len()),
        ));
    }
    let hw = s.plane();
    let count = T::of((s.n * hw) as f64);
    let eps = T::of(BN_EPS);
    let (mean, var) = match mode {
        BnMode::Train => {
            if s.n * hw == 0 {
                return Err(Error::shape("batch_norm", "empty batch"));
            }
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += x.plane(n, c).iter().copied().sum::<T>();
                }
                let m = acc / count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    sq += x.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[c] = m;
                var[c] = sq / count;
            }
            let keep = T::of(BN_MOMENTUM);
            let take = T::one() - keep;
            for c in 0..s.c {
                stats.mean[c] = keep * stats.mean[c] + take * mean[c];
                stats.var[c] = keep * stats.var[c] + take * var[c];
            }
            stats.updates += 1;
            (mean, var)
        }
        BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); s.numel()];
    let mut xhat = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * hw;
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (i, &v) in x.plane(n, c).iter().enumerate() {
                let xh = (v - m) * is;
                xhat[base + i] = xh;
                out[base + i] = g * xh + b;
            }
        }
    }
    Ok((Tensor::from_vec(s, out)?, BnCache { xhat, inv_std, mode }))
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(shape: Shape, gamma: &[T], cache: &BnCache<T>, dy: &[T]) -> BnGrads<T> {
    let hw = shape.plane();
    let count = T::of((shape.n * hw) as f64);
    let mut dgamma = vec![T::zero(); shape.c];
    let mut dbeta = vec![T::zero(); shape.c];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * hw;
            for i in base..base + hw {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); shape.numel()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * hw;
            let scale = gamma[c] * cache.inv_std[c];
            match cache.mode {
                BnMode::Train => {
                    let (sb, sg) = (dbeta[c] / count, dgamma[c] / count);
                    for i in base..base + hw {
                        dx[i] = scale * (dy[i] - sb - cache.xhat[i] * sg);
                    }
                }
                BnMode::Eval => {
                    for i in base..base + hw {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }
    }
    BnGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// 2×2 max-pool. Returns the pooled tensor and, per output element, the flat
/// input index that won (first in row-major order on ties). A NaN wins.
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape("maxpool2x2", format!("spatial dims must be even, got {}x{}", s.h, s.w)));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let data = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = x.index(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
                        if data[i] > data[best] || (data[i].is_nan() && !data[best].is_nan()) {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(input: Shape, argmax: &[u32], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input.numel()];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}

pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    Tensor::from_fn(os, |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

pub fn upsample_nearest2x_backward<T: Real>(input: Shape, dy: &[T]) -> Vec<T> {
    let (oh, ow) = (input.h * 2, input.w * 2);
    let mut dx = vec![T::zero(); input.numel()];
    for nc in 0..input.n * input.c {
        let src = &dy[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut dx[nc * input.plane()..(nc + 1) * input.plane()];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * input.w + x / 2] += src[y * ow + x];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (name, x, y) in [("batch (dim 0)", sa.n, sb.n), ("height (dim 2)", sa.h, sb.h), ("width (dim 3)", sa.w, sb.w)] {
        if x != y {
            return Err(Error::shape("concat_channels", format!("{name} differs: {x} vs {y}")));
        }
    }
    let os = sa.with_channels(sa.c + sb.c);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        out.extend_from_slice(a.sample(n));
        out.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(os, out)
}

/// Splits a concatenated gradient back into the `a` and `b` parts.
pub fn concat_channels_backward<T: Real>(sa: Shape, sb: Shape, dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (la + lb);
        da.extend_from_slice(&dy[base..base + la]);
        db.extend_from_slice(&dy[base + la..base + la + lb]);
    }
    (da, db)
}

/// Mean per-pixel cross-entropy of softmax(logits) against integer targets.
/// Returns the loss, accumulated in f64 whatever the element type, and the
/// softmax probabilities.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, target: &LabelMask) -> Result<(f64, Vec<T>)> {
    let s = logits.shape();
    if target.n != s.n || target.h != s.h || target.w != s.w {
        return Err(Error::shape(
            "softmax_ce_loss",
            format!("logits {s} vs target ({}, {}, {})", target.n, target.h, target.w),
        ));
    }
    if s.c == 0 {
        return Err(Error::shape("softmax_ce_loss", "zero classes"));
    }
    if let Some((index, &label)) = target.labels.iter().enumerate().find(|(_, &l)| l as usize >= s.c) {
        return Err(Error::LabelOutOfRange { label, classes: s.c, index });
    }
    let hw = s.plane();
    let pixels = s.n * hw;
    let mut probs = vec![T::zero(); s.numel()];
    let mut total = 0.0f64;
    let mut column = vec![0.0f64; s.c];
    let data = logits.data();
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for (c, z) in column.iter_mut().enumerate() {
                *z = data[base + c * hw + p].as_f64();
                max = max.max(*z);
            }
            let mut denom = 0.0;
            for z in column.iter_mut() {
                *z = (*z - max).exp();
                denom += *z;
            }
            for (c, &e) in column.iter().enumerate() {
                probs[base + c * hw + p] = T::of(e / denom);
            }
            let t = target.labels[n * hw + p] as usize;
            total += denom.ln() - (data[base + t * hw + p].as_f64() - max);
        }
    }
    Ok((total / pixels as f64, probs))
}

pub fn softmax_ce_backward<T: Real>(shape: Shape, probs: &[T], target: &[u8], dloss: T) -> Vec<T> {
    let hw = shape.plane();
    let scale = dloss / T::of((shape.n * hw) as f64);
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for n in 0..shape.n {
        for p in 0..hw {
            let t = target[n * hw + p] as usize;
            dx[(n * shape.c + t) * hw + p] -= scale;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct same-padded cross-correlation, one output at a time.
    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let pad = (ws.h / 2) as isize;
        Tensor::from_fn(Shape::new(xs.n, ws.n, xs.h, xs.w), |n, co, y, xx| {
            let mut acc = b[co];
            for ci in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let sy = y as isize + ky as isize - pad;
                        let sx = xx as isize + kx as isize - pad;
                        if sy >= 0 && sx >= 0 && (sy as usize) < xs.h && (sx as usize) < xs.w {
                            acc += x.at(n, ci, sy as usize, sx as usize) * w.at(co, ci, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 1, 5, 7), &mut rng);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d(&x, &w, &b).unwrap().data(), x.data());
    }

    #[test]
    fn conv3x3_ones_on_constant_image() {
        let x = Tensor::full(Shape::new(1, 1, 4, 4), 2.0f64);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let y = conv2d(&x, &w, &b).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let border = [r == 0 || r == 3, c == 0 || c == 3];
                let expected = match border {
                    [true, true] => 8.0,
                    [false, false] => 18.0,
                    _ => 12.0,
                };
                assert_eq!(y.at(0, 0, r, c), expected, "pixel ({r}, {c})");
            }
        }
    }

    #[test]
    fn conv3x3_impulse_stamps_flipped_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(Shape::new(1, 1, 3, 3), &mut rng);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let x = Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.data(), direct_conv(&x, &w, &[0.0]).data());
        for r in 0..5 {
            for c in 0..5 {
                let (dy, dx) = (r as isize - 2, c as isize - 2);
                let expected = if dy.abs() <= 1 && dx.abs() <= 1 {
                    w.at(0, 0, (1 - dy) as usize, (1 - dx) as usize)
                } else {
                    0.0
                };
                assert_eq!(y.at(0, 0, r, c), expected);
            }
        }
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, ci, co) in &[(3, 3, 4), (1, 5, 2), (3, 1, 1)] {
            let x = random(Shape::new(2, ci, 6, 5), &mut rng);
            let w = random(Shape::new(co, ci, k, k), &mut rng);
            let b = random(Shape::new(1, co, 1, 1), &mut rng);
            let got = conv2d(&x, &w, &b).unwrap();
            let want = direct_conv(&x, &w, b.data());
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(3, 4, 3, 3));
        let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let err = conv2d(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("input channels (dim 1) = 2"), "{err}");
        let w5 = Tensor::zeros(Shape::new(3, 2, 5, 5));
        assert!(conv2d(&x, &w5, &b).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(x.data(), &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
        let neg = Tensor::full(Shape::new(1, 2, 2, 2), -0.5f32);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(neg.data(), &[3.0; 8]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(2, 3, 4, 4), &mut rng);
        let mut stats = RunningStats::new(3);
        let (y, _) = batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut stats, BnMode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(stats.is_populated());
    }

    #[test]
    fn batch_norm_constant_channel_yields_beta() {
        let x = Tensor::full(Shape::new(2, 2, 3, 3), 4.2f64);
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm(&x, &[1.7, -0.3], &[0.25, -1.5], &mut stats, BnMode::Train).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn batch_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(3, 2, 5, 4), &mut rng);
        let gamma = [0.7, 1.3];
        let beta = [0.1, -0.4];
        let mut stats = RunningStats::new(2);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut stats, BnMode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| x.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for n in 0..3 {
                for (i, &v) in x.plane(n, c).iter().enumerate() {
                    let want = gamma[c] * (v - mean) / (var + BN_EPS).sqrt() + beta[c];
                    assert!((y.plane(n, c)[i] - want).abs() < 1e-6);
                }
            }
            assert!((stats.mean[c] - 0.1 * mean).abs() < 1e-12);
            assert!((stats.var[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0f64, 3.0]).unwrap();
        let mut stats = RunningStats { mean: vec![1.0], var: vec![4.0 - BN_EPS], updates: 1 };
        let (y, _) = batch_norm(&x, &[2.0], &[1.0], &mut stats, BnMode::Eval).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 3.0).abs() < 1e-12);
        assert_eq!(stats.updates, 1);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::full(Shape::new(1, 2, 4, 4), 0.5f32);
        let (y, arg) = maxpool2x2(&c).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 2));
        assert!(y.data().iter().all(|&v| v == 0.5));
        // ties resolve to the first element of each window in scan order
        assert_eq!(arg[..2], [0, 2]);
        assert!(maxpool2x2(&Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(Shape::new(2, 3, 8, 8), &mut rng);
        let (y, _) = maxpool2x2(&x).unwrap();
        let want = Tensor::from_fn(Shape::new(2, 3, 4, 4), |n, c, oy, ox| {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.at(n, c, 2 * oy + dy, 2 * ox + dx));
                }
            }
            m
        });
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![5.0f32]).unwrap();
        assert_eq!(upsample_nearest2x(&x).data(), &[5.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::new(2, 2, 3, 4), &mut rng);
        let (back, _) = maxpool2x2(&upsample_nearest2x(&x)).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn upsample_backward_is_block_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Shape::new(2, 3, 3, 5);
        let dy = random(Shape::new(2, 3, 6, 10), &mut rng);
        let got = upsample_nearest2x_backward(input, dy.data());
        let want = Tensor::from_fn(input, |n, c, y, x| {
            dy.at(n, c, 2 * y, 2 * x) + dy.at(n, c, 2 * y, 2 * x + 1) + dy.at(n, c, 2 * y + 1, 2 * x) + dy.at(n, c, 2 * y + 1, 2 * x + 1)
        });
        assert_eq!(got, want.into_data());
    }

    #[test]
    fn concat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(Shape::new(2, 2, 3, 3), &mut rng);
        let b = random(Shape::new(2, 3, 3, 3), &mut rng);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 3, 3));
        for n in 0..2 {
            for c in 0..2 {
                assert_eq!(y.plane(n, c), a.plane(n, c));
            }
            for c in 0..3 {
                assert_eq!(y.plane(n, c + 2), b.plane(n, c));
            }
        }
        let empty = Tensor::zeros(Shape::new(2, 0, 3, 3));
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let bad = Tensor::zeros(Shape::new(2, 1, 4, 3));
        assert!(concat_channels(&a, &bad).unwrap_err().to_string().contains("height"));
    }

    #[test]
    fn softmax_ce_examples() {
        let logits = Tensor::full(Shape::new(1, 6, 2, 2), 0.3f64);
        let target = LabelMask::new(1, 2, 2, vec![0, 1, 4, 5]).unwrap();
        let (loss, probs) = softmax_ce(&logits, &target).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.791759).abs() < 1e-6);
        assert!(probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));

        let mut sat = Tensor::zeros(Shape::new(1, 6, 1, 1));
        sat.data_mut()[2] = 1000.0f64;
        let (loss, _) = softmax_ce(&sat, &LabelMask::new(1, 1, 1, vec![2]).unwrap()).unwrap();
        assert!((0.0..1e-12).contains(&loss));

        let bad = LabelMask::new(1, 2, 2, vec![0, 6, 0, 0]).unwrap();
        assert!(matches!(softmax_ce(&logits, &bad), Err(Error::LabelOutOfRange { label: 6, .. })));
    }

    #[test]
    fn softmax_ce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits: Tensor<f64> = Tensor::from_fn(Shape::new(2, 6, 4, 4), |_, _, _, _| rng.gen_range(-4.0..4.0));
        let labels: Vec<u8> = (0..32).map(|_| rng.gen_range(0..6)).collect();
        let target = LabelMask::new(2, 4, 4, labels.clone()).unwrap();
        let (loss, probs) = softmax_ce(&logits, &target).unwrap();
        let mut total = 0.0;
        for n in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let z: f64 = (0..6).map(|c| logits.at(n, c, y, x).exp()).sum();
                    let t = labels[(n * 4 + y) * 4 + x] as usize;
                    total -= (logits.at(n, t, y, x).exp() / z).ln();
                    let psum: f64 = (0..6).map(|c| probs[logits.index(n, c, y, x)]).sum();
                    assert!((psum - 1.0).abs() < 1e-6);
                }
            }
        }
        assert!((loss - total / 32.0).abs() < 1e-6);
    }
}
