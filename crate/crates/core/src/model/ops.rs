//! Forward and backward kernels for the layers of the 3D U-Net.
//!
//! Weight layouts:
//! - `conv3`: `[c_out, c_in, 3, 3, 3]`, zero padding 1, stride 1
//! - `down2`: `[c_out, c_in, 2, 2, 2]`, stride 2
//! - `up2`:   `[c_in, c_out, 2, 2, 2]`, transposed, stride 2
//! - `pointwise`: `[c_out, c_in]`
//!
//! Backward kernels accumulate (`+=`) into the weight/bias gradient slices.

use crate::scalar::{silu, silu_grad, sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

/// Dot product with four partial sums (fixed order, so deterministic).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range along one axis for kernel offset `k - 1`.
#[inline]
fn span(n: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

pub fn conv3<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], c_out: usize) -> Tensor<T> {
    conv3_partial(input, input.channels(), weight, bias, c_out)
}

/// 3×3×3 convolution that only reads the first `active_in` input channels
/// (the remaining ones are known to be zero), with weights laid out for the
/// full `input.channels()`.
pub fn conv3_partial<T: Scalar>(
    input: &Tensor<T>,
    active_in: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
) -> Tensor<T> {
    let [c_in, nd, nh, nw] = input.shape();
    debug_assert_eq!(weight.len(), c_out * c_in * 27);
    let mut out = Tensor::zeros([c_out, nd, nh, nw]);
    for co in 0..c_out {
        let oc = out.channel_mut(co);
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..active_in {
            let ic = input.channel(ci);
            let wk = &weight[(co * c_in + ci) * 27..(co * c_in + ci + 1) * 27];
            for kd in 0..3 {
                let (z0, z1) = span(nd, kd);
                for kh in 0..3 {
                    let (y0, y1) = span(nh, kh);
                    for kw in 0..3 {
                        let wv = wk[kd * 9 + kh * 3 + kw];
                        if wv.is_zero() {
                            continue;
                        }
                        let (x0, x1) = span(nw, kw);
                        for z in z0..z1 {
                            let zi = z + kd - 1;
                            for y in y0..y1 {
                                let yi = y + kh - 1;
                                let o = (z * nh + y) * nw;
                                let i = (zi * nh + yi) * nw + kw;
                                axpy(wv, &ic[i + x0 - 1..i + x1 - 1], &mut oc[o + x0..o + x1]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient when `need_input` is set. Only the first
/// `active_in` input channels are visited; the rest are taken to be zero,
/// so their weight and input gradients stay zero.
pub fn conv3_backward<T: Scalar>(
    input: &Tensor<T>,
    active_in: usize,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input: bool,
) -> Option<Tensor<T>> {
    let [c_in, nd, nh, nw] = input.shape();
    let c_out = grad_out.channels();
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    for co in 0..c_out {
        let gc = grad_out.channel(co);
        grad_b[co] += gc.iter().copied().sum::<T>();
        for ci in 0..active_in {
            let ic = input.channel(ci);
            let base = (co * c_in + ci) * 27;
            for kd in 0..3 {
                let (z0, z1) = span(nd, kd);
                for kh in 0..3 {
                    let (y0, y1) = span(nh, kh);
                    for kw in 0..3 {
                        let (x0, x1) = span(nw, kw);
                        let k = base + kd * 9 + kh * 3 + kw;
                        let wv = weight[k];
                        let mut acc = T::zero();
                        for z in z0..z1 {
                            let zi = z + kd - 1;
                            for y in y0..y1 {
                                let yi = y + kh - 1;
                                let o = (z * nh + y) * nw;
                                let i = (zi * nh + yi) * nw + kw;
                                acc += dot(&gc[o + x0..o + x1], &ic[i + x0 - 1..i + x1 - 1]);
                            }
                        }
                        grad_w[k] += acc;
                        if let Some(gi) = grad_in.as_mut() {
                            if wv.is_zero() {
                                continue;
                            }
                            let gic = gi.channel_mut(ci);
                            for z in z0..z1 {
                                let zi = z + kd - 1;
                                for y in y0..y1 {
                                    let yi = y + kh - 1;
                                    let o = (z * nh + y) * nw;
                                    let i = (zi * nh + yi) * nw + kw;
                                    axpy(wv, &gc[o + x0..o + x1], &mut gic[i + x0 - 1..i + x1 - 1]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2×2×2 stride-2 convolution (learned downsampling).
pub fn down2<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], c_out: usize) -> Tensor<T> {
    let [c_in, nd, nh, nw] = input.shape();
    let (od, oh, ow) = (nd / 2, nh / 2, nw / 2);
    let mut out = Tensor::zeros([c_out, od, oh, ow]);
    let mut row = vec![T::zero(); ow];
    for co in 0..c_out {
        let oc = out.channel_mut(co);
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let ic = input.channel(ci);
            let wk = &weight[(co * c_in + ci) * 8..(co * c_in + ci + 1) * 8];
            for z in 0..od {
                for y in 0..oh {
                    let o = (z * oh + y) * ow;
                    for a in 0..2 {
                        for b in 0..2 {
                            let i = ((2 * z + a) * nh + 2 * y + b) * nw;
                            let (w0, w1) = (wk[a * 4 + b * 2], wk[a * 4 + b * 2 + 1]);
                            for (x, r) in row.iter_mut().enumerate() {
                                *r = w0 * ic[i + 2 * x] + w1 * ic[i + 2 * x + 1];
                            }
                            for (ov, &r) in oc[o..o + ow].iter_mut().zip(&row) {
                                *ov += r;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn down2_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input: bool,
) -> Option<Tensor<T>> {
    let [c_in, _, nh, nw] = input.shape();
    let [c_out, od, oh, ow] = grad_out.shape();
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    for co in 0..c_out {
        let gc = grad_out.channel(co);
        grad_b[co] += gc.iter().copied().sum::<T>();
        for ci in 0..c_in {
            let ic = input.channel(ci);
            let base = (co * c_in + ci) * 8;
            for z in 0..od {
                for y in 0..oh {
                    let o = (z * oh + y) * ow;
                    for a in 0..2 {
                        for b in 0..2 {
                            let i = ((2 * z + a) * nh + 2 * y + b) * nw;
                            for c in 0..2 {
                                let k = base + a * 4 + b * 2 + c;
                                let mut acc = T::zero();
                                for x in 0..ow {
                                    acc += gc[o + x] * ic[i + 2 * x + c];
                                }
                                grad_w[k] += acc;
                                if let Some(gi) = grad_in.as_mut() {
                                    let wv = weight[k];
                                    let gic = gi.channel_mut(ci);
                                    for x in 0..ow {
                                        gic[i + 2 * x + c] += wv * gc[o + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2×2×2 stride-2 transposed convolution (learned upsampling).
pub fn up2<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], c_out: usize) -> Tensor<T> {
    let [c_in, nd, nh, nw] = input.shape();
    let (od, oh, ow) = (2 * nd, 2 * nh, 2 * nw);
    let mut out = Tensor::zeros([c_out, od, oh, ow]);
    for co in 0..c_out {
        let oc = out.channel_mut(co);
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let ic = input.channel(ci);
            let wk = &weight[(ci * c_out + co) * 8..(ci * c_out + co + 1) * 8];
            for z in 0..nd {
                for y in 0..nh {
                    let i = (z * nh + y) * nw;
                    for a in 0..2 {
                        for b in 0..2 {
                            let o = ((2 * z + a) * oh + 2 * y + b) * ow;
                            let (w0, w1) = (wk[a * 4 + b * 2], wk[a * 4 + b * 2 + 1]);
                            for x in 0..nw {
                                let v = ic[i + x];
                                oc[o + 2 * x] += w0 * v;
                                oc[o + 2 * x + 1] += w1 * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn up2_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input: bool,
) -> Option<Tensor<T>> {
    let [c_in, nd, nh, nw] = input.shape();
    let [c_out, _, oh, ow] = grad_out.shape();
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    for co in 0..c_out {
        let gc = grad_out.channel(co);
        grad_b[co] += gc.iter().copied().sum::<T>();
        for ci in 0..c_in {
            let ic = input.channel(ci);
            let base = (ci * c_out + co) * 8;
            for z in 0..nd {
                for y in 0..nh {
                    let i = (z * nh + y) * nw;
                    for a in 0..2 {
                        for b in 0..2 {
                            let o = ((2 * z + a) * oh + 2 * y + b) * ow;
                            for c in 0..2 {
                                let k = base + a * 4 + b * 2 + c;
                                let mut acc = T::zero();
                                for x in 0..nw {
                                    acc += gc[o + 2 * x + c] * ic[i + x];
                                }
                                grad_w[k] += acc;
                                if let Some(gi) = grad_in.as_mut() {
                                    let wv = weight[k];
                                    let gic = gi.channel_mut(ci);
                                    for x in 0..nw {
                                        gic[i + x] += wv * gc[o + 2 * x + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 1×1×1 convolution.
pub fn pointwise<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], c_out: usize) -> Tensor<T> {
    let [c_in, nd, nh, nw] = input.shape();
    let mut out = Tensor::zeros([c_out, nd, nh, nw]);
    for co in 0..c_out {
        let oc = out.channel_mut(co);
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let wv = weight[co * c_in + ci];
            axpy(wv, input.channel(ci), oc);
        }
    }
    out
}

pub fn pointwise_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input: bool,
) -> Option<Tensor<T>> {
    let c_in = input.channels();
    let c_out = grad_out.channels();
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    for co in 0..c_out {
        let gc = grad_out.channel(co);
        grad_b[co] += gc.iter().copied().sum::<T>();
        for ci in 0..c_in {
            grad_w[co * c_in + ci] += dot(gc, input.channel(ci));
            if let Some(gi) = grad_in.as_mut() {
                axpy(weight[co * c_in + ci], gc, gi.channel_mut(ci));
            }
        }
    }
    grad_in
}

pub const NORM_EPS: f64 = 1e-5;

/// Cached normalized activations and inverse standard deviations.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel standardization over spatial positions, optionally followed
/// by a per-channel affine map.
pub fn instance_norm<T: Scalar>(input: &Tensor<T>, affine: Option<(&[T], &[T])>) -> (Tensor<T>, NormCache<T>) {
    let n = T::of_usize(input.spatial_len());
    let eps = T::lit(NORM_EPS);
    let mut xhat = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let x = input.channel(c);
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.channel_mut(c);
        for v in xh.iter_mut() {
            *v = (*v - mean) * is;
        }
        let o = out.channel_mut(c);
        match affine {
            Some((g, b)) => {
                for (ov, &h) in o.iter_mut().zip(xhat.channel(c)) {
                    *ov = g[c] * h + b[c];
                }
            }
            None => o.copy_from_slice(xhat.channel(c)),
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    grad_out: &Tensor<T>,
    affine: Option<(&[T], &mut [T], &mut [T])>,
) -> Tensor<T> {
    let n = T::of_usize(grad_out.spatial_len());
    let mut grad_in = grad_out.clone();
    let mut affine = affine;
    for c in 0..grad_out.channels() {
        let gy = grad_out.channel(c);
        let xh = cache.xhat.channel(c);
        let gamma = match affine.as_mut() {
            Some((g, gg, gb)) => {
                gg[c] += dot(gy, xh);
                gb[c] += gy.iter().copied().sum::<T>();
                g[c]
            }
            None => T::one(),
        };
        let mean_g = gy.iter().copied().sum::<T>() * gamma / n;
        let mean_gx = dot(gy, xh) * gamma / n;
        let is = cache.inv_std[c];
        for ((gi, &g), &h) in grad_in.channel_mut(c).iter_mut().zip(gy).zip(xh) {
            *gi = is * (g * gamma - mean_g - h * mean_gx);
        }
    }
    grad_in
}

/// Smooth ReLU-family nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Softplus => softplus(x),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = self.apply(*v));
        out
    }

    /// Gradient through the activation given the pre-activation input.
    pub fn backward<T: Scalar>(self, pre: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
            *gv = *gv * self.derivative(x);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct zero-padded convolution, one output voxel at a time.
    fn naive_conv3(x: &Tensor<f64>, w: &[f64], b: &[f64], c_out: usize) -> Tensor<f64> {
        let [c_in, nd, nh, nw] = x.shape();
        let mut out = Tensor::zeros([c_out, nd, nh, nw]);
        for co in 0..c_out {
            for z in 0..nd as isize {
                for y in 0..nh as isize {
                    for xx in 0..nw as isize {
                        let mut s = b[co];
                        for ci in 0..c_in {
                            for kd in 0..3isize {
                                for kh in 0..3isize {
                                    for kw in 0..3isize {
                                        let (zi, yi, xi) = (z + kd - 1, y + kh - 1, xx + kw - 1);
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= nd as isize || yi >= nh as isize || xi >= nw as isize {
                                            continue;
                                        }
                                        let wi = (co * c_in + ci) * 27 + (kd * 9 + kh * 3 + kw) as usize;
                                        let xi_ = ((ci * nd + zi as usize) * nh + yi as usize) * nw + xi as usize;
                                        s += w[wi] * x.data()[xi_];
                                    }
                                }
                            }
                        }
                        let oi = ((co * nd + z as usize) * nh + y as usize) * nw + xx as usize;
                        out.data_mut()[oi] = s;
                    }
                }
            }
        }
        out
    }

    /// Loss = sum(out * probe); checks every weight and input gradient by
    /// central differences.
    fn check_layer(
        fwd: &dyn Fn(&Tensor<f64>, &[f64], &[f64]) -> Tensor<f64>,
        bwd: &dyn Fn(&Tensor<f64>, &[f64], &Tensor<f64>, &mut [f64], &mut [f64]) -> Tensor<f64>,
        x: Tensor<f64>,
        w: Vec<f64>,
        b: Vec<f64>,
    ) {
        let out = fwd(&x, &w, &b);
        let probe = rand_tensor(out.shape(), 99);
        let loss = |x: &Tensor<f64>, w: &[f64], b: &[f64]| -> f64 {
            fwd(x, w, b).data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let gx = bwd(&x, &w, &probe, &mut gw, &mut gb);
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6, "w[{i}] fd {fd} an {}", gw[i]);
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "x[{i}]");
        }
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let x = rand_tensor([2, 4, 5, 3], 1);
        let w = rand_vec(3 * 2 * 27, 2);
        let b = rand_vec(3, 3);
        let fast = conv3(&x, &w, &b, 3);
        let slow = naive_conv3(&x, &w, &b, 3);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3_partial_equals_full_on_zero_tail() {
        let mut x = rand_tensor([3, 4, 4, 4], 5);
        x.channel_mut(2).iter_mut().for_each(|v| *v = 0.0);
        let w = rand_vec(2 * 3 * 27, 6);
        let b = rand_vec(2, 7);
        assert_eq!(conv3(&x, &w, &b, 2), conv3_partial(&x, 2, &w, &b, 2));
    }

    #[test]
    fn conv3_gradients() {
        check_layer(
            &|x, w, b| conv3(x, w, b, 2),
            &|x, w, g, gw, gb| conv3_backward(x, x.channels(), w, g, gw, gb, true).unwrap(),
            rand_tensor([2, 3, 4, 3], 10),
            rand_vec(2 * 2 * 27, 11),
            rand_vec(2, 12),
        );
    }

    #[test]
    fn down2_gradients() {
        check_layer(
            &|x, w, b| down2(x, w, b, 3),
            &|x, w, g, gw, gb| down2_backward(x, w, g, gw, gb, true).unwrap(),
            rand_tensor([2, 4, 2, 4], 13),
            rand_vec(3 * 2 * 8, 14),
            rand_vec(3, 15),
        );
    }

    #[test]
    fn up2_gradients() {
        check_layer(
            &|x, w, b| up2(x, w, b, 2),
            &|x, w, g, gw, gb| up2_backward(x, w, g, gw, gb, true).unwrap(),
            rand_tensor([3, 2, 1, 2], 16),
            rand_vec(3 * 2 * 8, 17),
            rand_vec(2, 18),
        );
    }

    #[test]
    fn pointwise_gradients() {
        check_layer(
            &|x, w, b| pointwise(x, w, b, 4),
            &|x, w, g, gw, gb| pointwise_backward(x, w, g, gw, gb, true).unwrap(),
            rand_tensor([3, 2, 3, 2], 19),
            rand_vec(12, 20),
            rand_vec(4, 21),
        );
    }

    #[test]
    fn instance_norm_gradients() {
        check_layer(
            &|x, g, b| instance_norm(x, Some((g, b))).0,
            &|x, g, gy, gg, gb| {
                let (_, cache) = instance_norm(x, Some((g, &[0.0, 0.0][..])));
                instance_norm_backward(&cache, gy, Some((g, gg, gb)))
            },
            rand_tensor([2, 2, 3, 2], 22),
            rand_vec(2, 23),
            rand_vec(2, 24),
        );
    }

    #[test]
    fn down_then_up_shapes() {
        let x = rand_tensor([1, 4, 6, 8], 0);
        let d = down2(&x, &rand_vec(16, 1), &[0.0, 0.0], 2);
        assert_eq!(d.shape(), [2, 2, 3, 4]);
        let u = up2(&d, &rand_vec(16, 2), &[0.0], 1);
        assert_eq!(u.shape(), [1, 4, 6, 8]);
    }
}
