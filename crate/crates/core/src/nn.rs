//! Layer kernels with explicit backward passes.
//!
//! Everything operates on single samples in `(channels, height, width)` layout
//! ([`Planes`]); batching is done by the callers, one sample per task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Planes;
use crate::Real;

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, ordered collection of parameter tensors. The same layout is used for
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub tensors: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|p| p.data.len()).sum()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|p| p.name == name)
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for p in &mut self.tensors {
            for x in &mut p.data {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// Name of the first tensor containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }
}

/// Draw `n` weights from `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real>(rng: &mut Stream, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.normal() * std)).collect()
}

pub fn ensure_finite<T: Real>(data: &[T], layer: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in layer {layer}")))
    }
}

/// Column buffer for a 3x3, stride-1, zero-padded convolution:
/// row `(ci * 9 + ky * 3 + kx)`, column `y * w + x`.
pub fn im2col3x3<T: Real>(x: &Planes<T>) -> Vec<T> {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let mut col = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = x.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3x3`]: scatter-add columns back onto the image.
pub fn col2im3x3<T: Real>(col: &[T], c: usize, h: usize, w: usize) -> Planes<T> {
    let hw = h * w;
    let mut out = Planes::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d = *d + s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3 "same" convolution. `weight` is `(cout, cin * 9)` row-major.
/// Returns the output and the column buffer needed by the backward pass.
pub fn conv3x3_forward<T: Real>(x: &Planes<T>, weight: &[T], bias: &[T], cout: usize) -> (Planes<T>, Vec<T>) {
    let k = x.c * 9;
    debug_assert_eq!(weight.len(), cout * k);
    let hw = x.hw();
    let col = im2col3x3(x);
    let mut out = Planes::zeros(cout, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].fill(b);
    }
    T::gemm(
        cout,
        k,
        hw,
        T::one(),
        weight,
        k as isize,
        1,
        &col,
        hw as isize,
        1,
        T::one(),
        &mut out.data,
        hw as isize,
        1,
    );
    (out, col)
}

/// Accumulate weight and bias gradients; return the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    col: &[T],
    cin: usize,
    dy: &Planes<T>,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Planes<T>> {
    let (cout, h, w) = (dy.c, dy.h, dy.w);
    let hw = h * w;
    let k = cin * 9;
    // dW += dY . col^T
    T::gemm(
        cout,
        hw,
        k,
        T::one(),
        &dy.data,
        hw as isize,
        1,
        col,
        1,
        hw as isize,
        T::one(),
        dweight,
        k as isize,
        1,
    );
    for (db, plane) in dbias.iter_mut().zip(dy.data.chunks_exact(hw)) {
        let s: T = plane.iter().copied().sum();
        *db = *db + s;
    }
    if !need_dx {
        return None;
    }
    // dcol = W^T . dY
    let mut dcol = vec![T::zero(); k * hw];
    T::gemm(
        k,
        cout,
        hw,
        T::one(),
        weight,
        1,
        k as isize,
        &dy.data,
        hw as isize,
        1,
        T::zero(),
        &mut dcol,
        hw as isize,
        1,
    );
    Some(col2im3x3(&dcol, cin, h, w))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    // exp(-40) is negligible next to 1 in either precision. Cutting here
    // keeps tiny activations out of the matmuls, where their products with
    // small gradients turn subnormal and slow everything down.
    if x < T::of(-40.0) {
        return T::zero();
    }
    T::one() / (T::one() + (-x).exp())
}

/// Subnormal values become zero. Deeply negative pre-activations otherwise
/// leave subnormal floats that slow every later multiply several-fold.
fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// In-place SiLU; returns the pre-activation values.
pub fn silu_inplace<T: Real>(x: &mut [T]) -> Vec<T> {
    let pre = x.to_vec();
    for v in x.iter_mut() {
        *v = flush(*v * sigmoid(*v));
    }
    pre
}

pub fn silu_backward<T: Real>(pre: &[T], dy: &mut [T]) {
    for (g, &x) in dy.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g = flush(*g * s * (T::one() + x * (T::one() - s)));
    }
}

pub fn avg_pool2<T: Real>(x: &Planes<T>) -> Planes<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Planes::zeros(x.c, h2, w2);
    let q = T::of(0.25);
    for c in 0..x.c {
        let src = x.plane(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h2 + y) * w2 + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Planes<T>) -> Planes<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut out = Planes::zeros(dy.c, h, w);
    let q = T::of(0.25);
    for c in 0..dy.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = dy.data[(c * dy.h + y / 2) * dy.w + x / 2] * q;
            }
        }
    }
    out
}

pub fn upsample2<T: Real>(x: &Planes<T>) -> Planes<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Planes::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Planes<T>) -> Planes<T> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut out = Planes::zeros(dy.c, h2, w2);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                let o = (c * h2 + y / 2) * w2 + x / 2;
                out.data[o] = out.data[o] + dy.data[(c * dy.h + y) * dy.w + x];
            }
        }
    }
    out
}

/// Stack `a` then `b` along channels.
pub fn concat_channels<T: Real>(a: &Planes<T>, b: &Planes<T>) -> Planes<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Planes {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Planes<T>, first: usize) -> (Planes<T>, Planes<T>) {
    let n = first * x.hw();
    (
        Planes {
            c: first,
            h: x.h,
            w: x.w,
            data: x.data[..n].to_vec(),
        },
        Planes {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: x.data[n..].to_vec(),
        },
    )
}

/// Add a per-channel bias vector.
pub fn add_channel_bias<T: Real>(x: &mut Planes<T>, bias: &[T]) {
    let hw = x.hw();
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut x.data[c * hw..(c + 1) * hw] {
            *v = *v + b;
        }
    }
}

/// Per-channel sums, the gradient of [`add_channel_bias`] w.r.t. the bias.
pub fn channel_sums<T: Real>(x: &Planes<T>) -> Vec<T> {
    (0..x.c).map(|c| x.plane(c).iter().copied().sum()).collect()
}

/// `y = W x + b` with `W` of shape `(dout, din)`.
pub fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let din = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            weight[o * din..(o + 1) * din]
                .iter()
                .zip(x)
                .fold(b, |acc, (&w, &v)| acc + w * v)
        })
        .collect()
}

pub fn dense_backward<T: Real>(x: &[T], dy: &[T], weight: &[T], dweight: &mut [T], dbias: &mut [T]) -> Vec<T> {
    let din = x.len();
    let mut dx = vec![T::zero(); din];
    for (o, &g) in dy.iter().enumerate() {
        dbias[o] = dbias[o] + g;
        let row = &weight[o * din..(o + 1) * din];
        let drow = &mut dweight[o * din..(o + 1) * din];
        for i in 0..din {
            drow[i] = drow[i] + g * x[i];
            dx[i] = dx[i] + g * row[i];
        }
    }
    dx
}

/// Sinusoidal encoding of a scalar: `[sin(v * f_k)..., cos(v * f_k)...]` with
/// wavelengths `1 / f_k` spaced geometrically from 1 to 10^4.
pub fn sinusoidal<T: Real>(value: f64, dim: usize) -> Vec<T> {
    let half = (dim / 2).max(1);
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (-(10_000f64.ln()) * frac).exp();
        let angle = value * freq;
        if k < dim {
            out[k] = T::of(angle.sin());
        }
        if half + k < dim {
            out[half + k] = T::of(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_planes(seed: u64, c: usize, h: usize, w: usize) -> Planes<f64> {
        let mut s = Stream::new(seed);
        Planes {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| s.normal()).collect(),
        }
    }

    fn naive_conv(x: &Planes<f64>, wt: &[f64], b: &[f64], cout: usize) -> Planes<f64> {
        let mut out = Planes::zeros(cout, x.h, x.w);
        for co in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[co];
                    for ci in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = wt[co * x.c * 9 + ci * 9 + (ky * 3 + kx) as usize];
                                acc += wv * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = random_planes(1, 3, 5, 7);
        let mut s = Stream::new(2);
        let wt: Vec<f64> = (0..4 * 27).map(|_| s.normal()).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let (y, _) = conv3x3_forward(&x, &wt, &b, 4);
        let r = naive_conv(&x, &wt, &b, 4);
        for (a, e) in y.data.iter().zip(&r.data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = random_planes(3, 2, 4, 6);
        let col = im2col3x3(&x);
        let mut s = Stream::new(4);
        let g: Vec<f64> = (0..col.len()).map(|_| s.normal()).collect();
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im3x3(&g, 2, 4, 6);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = random_planes(5, 2, 4, 6);
        let g = random_planes(6, 2, 2, 3);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&avg_pool2_backward(&g).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u = random_planes(7, 2, 2, 3);
        let gu = random_planes(8, 2, 4, 6);
        let lhs: f64 = upsample2(&u).data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = u
            .data
            .iter()
            .zip(&upsample2_backward(&gu).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random_planes(9, 2, 3, 4);
        let mut s = Stream::new(10);
        let wt: Vec<f64> = (0..3 * 18).map(|_| s.normal()).collect();
        let b = vec![0.0; 3];
        let g = random_planes(11, 3, 3, 4);
        let loss = |x: &Planes<f64>, wt: &[f64]| -> f64 {
            let (y, _) = conv3x3_forward(x, wt, &b, 3);
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let (_, col) = conv3x3_forward(&x, &wt, &b, 3);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3x3_backward(&col, 2, &g, &wt, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in 0..wt.len() {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss(&p, &wt) - loss(&m, &wt)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        let sums = channel_sums(&g);
        assert_eq!(db, sums);
    }

    #[test]
    fn silu_and_dense_gradients() {
        let xs = [-3.0f64, -0.5, 0.0, 0.7, 4.0];
        let mut y = xs.to_vec();
        let pre = silu_inplace(&mut y);
        let mut g = vec![1.0; 5];
        silu_backward(&pre, &mut g);
        for (i, &x) in xs.iter().enumerate() {
            let f = |v: f64| v / (1.0 + (-v).exp());
            let fd = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }

        let x = vec![0.5, -1.0, 2.0];
        let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        let b = vec![0.3, -0.1];
        let y = dense_forward(&x, &w, &b);
        assert!((y[0] - (0.3 + -0.2 * 0.5 + -0.1 * -1.0 + 0.0 * 2.0)).abs() < 1e-12);
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = dense_backward(&x, &[1.0, 2.0], &w, &mut dw, &mut db);
        assert_eq!(db, vec![1.0, 2.0]);
        assert!((dx[0] - (w[0] + 2.0 * w[3])).abs() < 1e-12);
        assert!((dw[4] - 2.0 * x[1]).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_layout() {
        let e: Vec<f64> = sinusoidal(0.0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e: Vec<f64> = sinusoidal(2.0, 4);
        // frequencies 1 and 1e-4
        assert!((e[0] - 2f64.sin()).abs() < 1e-15);
        assert!((e[1] - (2e-4f64).sin()).abs() < 1e-15);
        assert!((e[2] - 2f64.cos()).abs() < 1e-15);
    }
}
