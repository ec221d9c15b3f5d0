//! The biomass network: stacked 3x3 convolutions with rectifier activations
//! and replicate padding, a global average pool, and two linear heads
//! producing a mean and a positive scale per patch.
//!
//! Everything is generic over the scalar type: training and inference run in
//! f32, while gradient verification runs in f64 where central differences
//! are meaningful. Activations are laid out height-major with channels
//! innermost so the convolution inner product runs over contiguous memory.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::{Error, Result};

/// Scalar bound for network arithmetic.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn c(v: f64) -> Self {
        Self::from(v).unwrap()
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Keeps the scale head strictly positive.
const SIGMA_FLOOR: f64 = 1e-3;

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetArch {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// Square patch side in pixels.
    pub patch: usize,
}

impl NetArch {
    /// Production architecture: 6 conv layers, 3x3 kernels, channel depths
    /// 16/32/64/128/128/128, 15x15 input patches of 4 channels.
    pub fn standard() -> Self {
        Self {
            in_channels: 4,
            channels: vec![16, 32, 64, 128, 128, 128],
            patch: 15,
        }
    }

    /// Small architecture for gradient verification.
    pub fn downsized() -> Self {
        Self {
            in_channels: 4,
            channels: vec![2, 3],
            patch: 5,
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        let mut c_in = self.in_channels;
        for &c_out in &self.channels {
            n += c_out * 9 * c_in + c_out;
            c_in = c_out;
        }
        let c = *self.channels.last().unwrap();
        n + 2 * (c + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }
}

#[derive(Debug, Clone)]
struct Conv<T> {
    /// `[ky][kx][c_in][c_out]`: output channels innermost, so the inner
    /// convolution loops run elementwise over contiguous memory.
    w: Vec<T>,
    b: Vec<T>,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone)]
struct Dense<T> {
    w: Vec<T>,
    b: T,
}

/// Full parameter set.
#[derive(Debug, Clone)]
pub struct NetParams<T> {
    pub arch: NetArch,
    convs: Vec<Conv<T>>,
    mu_head: Dense<T>,
    sigma_head: Dense<T>,
}

impl<T: Scalar> NetParams<T> {
    /// He-style random initialization; members of an ensemble differ only by
    /// this seed.
    pub fn init(arch: &NetArch, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut normal = move |std: f64| -> f64 {
            // Box-Muller on the ChaCha stream keeps init independent of any
            // distribution crate's internals.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut convs = Vec::new();
        let mut c_in = arch.in_channels;
        for &c_out in &arch.channels {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let w = (0..c_out * 9 * c_in).map(|_| T::c(normal(std))).collect();
            convs.push(Conv {
                w,
                b: vec![T::zero(); c_out],
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        let c = *arch.channels.last().unwrap();
        let hstd = (c as f64).sqrt().recip();
        let mu_head = Dense {
            w: (0..c).map(|_| T::c(normal(hstd))).collect(),
            b: T::zero(),
        };
        let sigma_head = Dense {
            w: (0..c).map(|_| T::c(normal(hstd))).collect(),
            b: T::zero(),
        };
        Self {
            arch: arch.clone(),
            convs,
            mu_head,
            sigma_head,
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.arch.n_params());
        for c in &self.convs {
            out.extend_from_slice(&c.w);
            out.extend_from_slice(&c.b);
        }
        out.extend_from_slice(&self.mu_head.w);
        out.push(self.mu_head.b);
        out.extend_from_slice(&self.sigma_head.w);
        out.push(self.sigma_head.b);
        out
    }

    pub fn from_flat(arch: &NetArch, flat: &[T]) -> Result<Self> {
        if flat.len() != arch.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.n_params(),
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = flat[pos..pos + n].to_vec();
            pos += n;
            s
        };
        let mut convs = Vec::new();
        let mut c_in = arch.in_channels;
        for &c_out in &arch.channels {
            let w = take(c_out * 9 * c_in);
            let b = take(c_out);
            convs.push(Conv { w, b, c_in, c_out });
            c_in = c_out;
        }
        let c = *arch.channels.last().unwrap();
        let mu_w = take(c);
        let mu_b = take(1)[0];
        let s_w = take(c);
        let s_b = take(1)[0];
        Ok(Self {
            arch: arch.clone(),
            convs,
            mu_head: Dense { w: mu_w, b: mu_b },
            sigma_head: Dense { w: s_w, b: s_b },
        })
    }
}

#[inline]
fn clampi(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Dot product with four independent accumulators: the fixed reassociation
/// lets the compiler vectorize the reduction while keeping results
/// bit-identical across runs and thread counts.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for k in 0..chunks {
        let i = 4 * k;
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail = tail + a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Rectified 3x3 convolution with replicate padding. For each spatial
/// position, every kernel tap contributes an elementwise multiply-add over
/// the contiguous output-channel axis.
fn conv_forward<T: Scalar>(inp: &[T], side: usize, layer: &Conv<T>, out: &mut [T]) {
    let (c_in, c_out) = (layer.c_in, layer.c_out);
    debug_assert_eq!(inp.len(), side * side * c_in);
    debug_assert_eq!(out.len(), side * side * c_out);
    for y in 0..side {
        for x in 0..side {
            let ob = (y * side + x) * c_out;
            let acc = &mut out[ob..ob + c_out];
            acc.copy_from_slice(&layer.b);
            for ky in 0..3usize {
                let yy = clampi(y as isize + ky as isize - 1, side);
                for kx in 0..3usize {
                    let xx = clampi(x as isize + kx as isize - 1, side);
                    let ib = (yy * side + xx) * c_in;
                    let tap = (ky * 3 + kx) * c_in;
                    for ci in 0..c_in {
                        let a = inp[ib + ci];
                        if a == T::zero() {
                            continue;
                        }
                        let ws = &layer.w[(tap + ci) * c_out..(tap + ci + 1) * c_out];
                        for co in 0..c_out {
                            acc[co] = acc[co] + a * ws[co];
                        }
                    }
                }
            }
            for v in acc.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
}

/// Backward through one rectified convolution.
///
/// `d_out` must already be masked by the layer's own rectifier. Returns
/// gradients into `d_w`, `d_b` (accumulated) and `d_in` (overwritten,
/// unmasked: the caller applies the previous layer's rectifier mask).
fn conv_backward<T: Scalar>(
    inp: &[T],
    side: usize,
    layer: &Conv<T>,
    d_out: &[T],
    d_w: &mut [T],
    d_b: &mut [T],
    d_in: &mut [T],
) {
    let (c_in, c_out) = (layer.c_in, layer.c_out);
    for v in d_in.iter_mut() {
        *v = T::zero();
    }
    for y in 0..side {
        for x in 0..side {
            let ob = (y * side + x) * c_out;
            let g = &d_out[ob..ob + c_out];
            for co in 0..c_out {
                d_b[co] = d_b[co] + g[co];
            }
            for ky in 0..3usize {
                let yy = clampi(y as isize + ky as isize - 1, side);
                for kx in 0..3usize {
                    let xx = clampi(x as isize + kx as isize - 1, side);
                    let ib = (yy * side + xx) * c_in;
                    let tap = (ky * 3 + kx) * c_in;
                    for ci in 0..c_in {
                        let a = inp[ib + ci];
                        let ws = &layer.w[(tap + ci) * c_out..(tap + ci + 1) * c_out];
                        // d_w: elementwise axpy; d_in: fixed-order dot.
                        if a != T::zero() {
                            let dws = &mut d_w[(tap + ci) * c_out..(tap + ci + 1) * c_out];
                            for co in 0..c_out {
                                dws[co] = dws[co] + a * g[co];
                            }
                        }
                        d_in[ib + ci] = d_in[ib + ci] + dot4(g, ws);
                    }
                }
            }
        }
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::c(30.0) {
        x
    } else {
        (T::one() + x.exp()).ln()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

/// Forward pass on one normalized patch. Outputs the raw mean and the
/// positive scale (both in normalized target units).
pub fn net_forward<T: Scalar>(params: &NetParams<T>, patch: &[T]) -> Result<(T, T)> {
    forward_impl(params, patch, None).map(|(mu, sigma, _)| (mu, sigma))
}

struct ActivationCache<T> {
    layers: Vec<Vec<T>>, // post-rectifier activations per conv layer
    pooled: Vec<T>,
    s_raw: T,
}

impl<T: Scalar> ActivationCache<T> {
    fn new() -> Self {
        Self {
            layers: Vec::new(),
            pooled: Vec::new(),
            s_raw: T::zero(),
        }
    }
}

fn forward_impl<T: Scalar>(
    params: &NetParams<T>,
    patch: &[T],
    mut cache: Option<&mut ActivationCache<T>>,
) -> Result<(T, T, Vec<T>)> {
    let arch = &params.arch;
    let side = arch.patch;
    if patch.len() != arch.patch_len() {
        return Err(Error::Shape(format!(
            "patch of {} values, expected {} ({}x{}x{})",
            patch.len(),
            arch.patch_len(),
            side,
            side,
            arch.in_channels
        )));
    }
    let mut current: Vec<T> = patch.to_vec();
    for conv in &params.convs {
        let mut next = vec![T::zero(); side * side * conv.c_out];
        conv_forward(&current, side, conv, &mut next);
        if let Some(c) = cache.as_deref_mut() {
            c.layers.push(next.clone());
        }
        current = next;
    }
    // Global average pool over the spatial grid.
    let c = *arch.channels.last().unwrap();
    let hw = T::c((side * side) as f64);
    let mut pooled = vec![T::zero(); c];
    for px in 0..side * side {
        for ch in 0..c {
            pooled[ch] = pooled[ch] + current[px * c + ch];
        }
    }
    for v in pooled.iter_mut() {
        *v = *v / hw;
    }
    let mut mu = params.mu_head.b;
    let mut s_raw = params.sigma_head.b;
    for ch in 0..c {
        mu = mu + params.mu_head.w[ch] * pooled[ch];
        s_raw = s_raw + params.sigma_head.w[ch] * pooled[ch];
    }
    let sigma = softplus(s_raw) + T::c(SIGMA_FLOOR);
    if let Some(cch) = cache {
        cch.pooled = pooled.clone();
        cch.s_raw = s_raw;
    }
    Ok((mu, sigma, pooled))
}

/// Weighted Gaussian negative log-likelihood of one sample (constant terms
/// dropped): `w * (ln sigma + (y - mu)^2 / (2 sigma^2))`.
pub fn gaussian_nll<T: Scalar>(mu: T, sigma: T, y: T, w: T) -> T {
    let r = y - mu;
    w * (sigma.ln() + r * r / (T::c(2.0) * sigma * sigma))
}

/// Loss and flat gradient for one sample; the workhorse of training and the
/// finite-difference check.
pub fn loss_and_grad<T: Scalar>(
    params: &NetParams<T>,
    patch: &[T],
    y: T,
    w: T,
    grad: &mut [T],
) -> Result<T> {
    let arch = &params.arch;
    let side = arch.patch;
    let mut cache = ActivationCache::new();
    let (mu, sigma, pooled) = forward_impl(params, patch, Some(&mut cache))?;
    let loss = gaussian_nll(mu, sigma, y, w);

    let r = mu - y;
    let d_mu = w * r / (sigma * sigma);
    let d_sigma = w * (sigma.recip() - r * r / (sigma * sigma * sigma));
    let d_sraw = d_sigma * sigmoid(cache.s_raw);

    let c = *arch.channels.last().unwrap();
    // Head gradients live at the tail of the flat layout.
    let mut offsets = Vec::with_capacity(params.convs.len());
    let mut pos = 0;
    for conv in &params.convs {
        offsets.push(pos);
        pos += conv.w.len() + conv.b.len();
    }
    let mu_w_at = pos;
    let sigma_w_at = pos + c + 1;
    for ch in 0..c {
        grad[mu_w_at + ch] = grad[mu_w_at + ch] + d_mu * pooled[ch];
        grad[sigma_w_at + ch] = grad[sigma_w_at + ch] + d_sraw * pooled[ch];
    }
    grad[mu_w_at + c] = grad[mu_w_at + c] + d_mu;
    grad[sigma_w_at + c] = grad[sigma_w_at + c] + d_sraw;

    // Pool backward into the last activation map.
    let hw = T::c((side * side) as f64);
    let mut d_act = vec![T::zero(); side * side * c];
    for px in 0..side * side {
        for ch in 0..c {
            d_act[px * c + ch] =
                (d_mu * params.mu_head.w[ch] + d_sraw * params.sigma_head.w[ch]) / hw;
        }
    }

    // Conv layers, top down.
    for li in (0..params.convs.len()).rev() {
        let conv = &params.convs[li];
        let act = &cache.layers[li];
        // Mask by this layer's rectifier.
        for (d, a) in d_act.iter_mut().zip(act.iter()) {
            if *a <= T::zero() {
                *d = T::zero();
            }
        }
        let inp_owned;
        let inp: &[T] = if li == 0 {
            patch
        } else {
            inp_owned = cache.layers[li - 1].clone();
            &inp_owned
        };
        let off = offsets[li];
        let (dw, db) = grad[off..off + conv.w.len() + conv.b.len()].split_at_mut(conv.w.len());
        let mut d_in = vec![T::zero(); inp.len()];
        conv_backward(inp, side, conv, &d_act, dw, db, &mut d_in);
        d_act = d_in;
    }
    Ok(loss)
}

/// Adam optimizer state.
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
    pub learning_rate: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
            learning_rate,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        let b1 = T::c(0.9);
        let b2 = T::c(0.999);
        let eps = T::c(1e-8);
        self.t += 1;
        let c1 = T::one() - T::c(0.9f64.powi(self.t as i32));
        let c2 = T::one() - T::c(0.999f64.powi(self.t as i32));
        let lr = T::c(self.learning_rate);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_patch(arch: &NetArch, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..arch.patch_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sigma_positive_for_random_inputs() {
        let arch = NetArch::downsized();
        for seed in 0..5 {
            let params: NetParams<f64> = NetParams::init(&arch, seed);
            let patch = random_patch(&arch, seed + 100);
            let (_, sigma) = net_forward(&params, &patch).unwrap();
            assert!(sigma > 0.0);
        }
    }

    #[test]
    fn forward_is_pure() {
        let arch = NetArch::downsized();
        let params: NetParams<f64> = NetParams::init(&arch, 1);
        let patch = random_patch(&arch, 2);
        let a = net_forward(&params, &patch).unwrap();
        let b = net_forward(&params, &patch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_patch_shape_errors() {
        let arch = NetArch::downsized();
        let params: NetParams<f64> = NetParams::init(&arch, 1);
        assert!(matches!(
            net_forward(&params, &[0.0; 7]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn flat_roundtrip() {
        let arch = NetArch::downsized();
        let params: NetParams<f64> = NetParams::init(&arch, 3);
        let flat = params.flatten();
        assert_eq!(flat.len(), arch.n_params());
        let back = NetParams::from_flat(&arch, &flat).unwrap();
        let patch = random_patch(&arch, 4);
        assert_eq!(
            net_forward(&params, &patch).unwrap(),
            net_forward(&back, &patch).unwrap()
        );
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = NetArch::downsized();
        // Fixed seed chosen so no pre-activation sits within the central
        // difference step of a rectifier kink.
        let params: NetParams<f64> = NetParams::init(&arch, 0);
        let patch = random_patch(&arch, 100);
        let (y, w) = (0.8, 1.3);

        let n = arch.n_params();
        assert!(n >= 100, "downsized net has {n} parameters");
        let mut grad = vec![0.0f64; n];
        loss_and_grad(&params, &patch, y, w, &mut grad).unwrap();

        let flat = params.flatten();
        let h = 1e-3;
        for i in 0..n {
            let mut up = flat.clone();
            up[i] += h;
            let pu = NetParams::from_flat(&arch, &up).unwrap();
            let (mu, s) = net_forward(&pu, &patch).unwrap();
            let lu = gaussian_nll(mu, s, y, w);

            let mut dn = flat.clone();
            dn[i] -= h;
            let pd = NetParams::from_flat(&arch, &dn).unwrap();
            let (mu, s) = net_forward(&pd, &patch).unwrap();
            let ld = gaussian_nll(mu, s, y, w);

            let fd = (lu - ld) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            let rel = (grad[i] - fd).abs() / denom;
            assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn adam_descends_on_quadratic() {
        // Minimize (p - 3)^2 elementwise.
        let mut p = vec![0.0f64; 4];
        let mut opt = Adam::new(4, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * (v - 3.0)).collect();
            opt.step(&mut p, &g);
        }
        for v in p {
            assert!((v - 3.0).abs() < 0.05, "{v}");
        }
    }
}
