//! Reconstruction metrics: PSNR, SSIM and a differentiable perceptual proxy.
//!
//! The proxy runs both images through a fixed, untrained three-stage conv
//! pyramid (3 -> 16 -> 32 -> 64 channels, 3x3 kernels, SiLU, 2x average pool
//! between stages). Weights are drawn once from `N(0, 2 / fan_in)` with the
//! [`crate::rng::Stream`] keyed by [`EXTRACTOR_SEED`], in the order stage 1,
//! 2, 3 (row-major `(cout, cin, 3, 3)`); biases are zero. Images are mapped to
//! `[-1, 1]` before the first stage. At every stage features are normalized to
//! unit L2 norm across channels per pixel, and the proxy is the mean of the
//! three per-stage mean squared differences.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::Stream;
use crate::tensor::{Planes, Tensor3};
use crate::Real;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const EXTRACTOR_SEED: u64 = 1234;
pub const EXTRACTOR_CHANNELS: [usize; 4] = [3, 16, 32, 64];
const NORM_EPS: f64 = 1e-8;

fn mse<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    a.ensure_same_shape(b, "metric inputs")?;
    if a.is_empty() {
        return Err(Error::Input("empty images".into()));
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio for unit-range images; `+inf` for identical
/// inputs.
pub fn psnr<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// [`psnr`] capped at [`PSNR_CAP_DB`] for reporting.
pub fn psnr_capped<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    psnr(a, b).map(|v| v.min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, data range 1),
/// averaged over valid window positions and then over channels.
pub fn ssim<T: Real>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = ssim_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|p| a.as_slice()[p * c + ch].f64()).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b.as_slice()[p * c + ch].f64()).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let saa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let sbb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let sab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// Fixed random convolutional feature pyramid.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    weights: [Vec<T>; 3],
    biases: [Vec<T>; 3],
}

/// Unit-normalized features of each stage.
#[derive(Debug, Clone)]
pub struct Features<T> {
    pub stages: [Planes<T>; 3],
}

struct StageCache<T> {
    col: Vec<T>,
    pre: Vec<T>,
    raw: Planes<T>,
}

impl<T: Real> Default for FeatureExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new() -> Self {
        let mut rng = Stream::new(EXTRACTOR_SEED);
        let ch = EXTRACTOR_CHANNELS;
        let weights = [0, 1, 2].map(|s| nn::he_normal::<T>(&mut rng, ch[s + 1] * ch[s] * 9, ch[s] * 9));
        let biases = [0, 1, 2].map(|s| vec![T::zero(); ch[s + 1]]);
        FeatureExtractor { weights, biases }
    }

    /// Raw weight buffers, stage by stage.
    pub fn weights(&self) -> &[Vec<T>; 3] {
        &self.weights
    }

    fn check(img: &Tensor3<T>) -> Result<()> {
        let (h, w, c) = img.shape();
        if c != EXTRACTOR_CHANNELS[0] {
            return Err(Error::Shape(format!("perceptual proxy needs 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "perceptual proxy needs sides divisible by 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn forward(&self, img: &Tensor3<T>) -> Result<(Features<T>, [StageCache<T>; 3])> {
        Self::check(img)?;
        let two = T::of(2.0);
        let mut x = Planes::from_hwc(&img.map(|v| two * v - T::one()));
        let mut caches: Vec<StageCache<T>> = Vec::with_capacity(3);
        let mut normed: Vec<Planes<T>> = Vec::with_capacity(3);
        for s in 0..3 {
            if s > 0 {
                x = nn::avg_pool2(&x);
            }
            let (mut y, col) = nn::conv3x3_forward(&x, &self.weights[s], &self.biases[s], EXTRACTOR_CHANNELS[s + 1]);
            let pre = nn::silu_inplace(&mut y.data);
            normed.push(normalize_channels(&y));
            caches.push(StageCache {
                col,
                pre,
                raw: y.clone(),
            });
            x = y;
        }
        let stages: [Planes<T>; 3] = normed.try_into().expect("three stages");
        let caches: [StageCache<T>; 3] = caches.try_into().ok().expect("three stages");
        Ok((Features { stages }, caches))
    }

    pub fn features(&self, img: &Tensor3<T>) -> Result<Features<T>> {
        self.forward(img).map(|(f, _)| f)
    }

    /// Image gradient given gradients w.r.t. each stage's normalized features.
    fn backward(&self, caches: &[StageCache<T>; 3], mut dnorm: [Planes<T>; 3], h: usize, w: usize) -> Tensor3<T> {
        let mut carry: Option<Planes<T>> = None;
        for s in (0..3).rev() {
            let cache = &caches[s];
            let mut d = normalize_channels_backward(&cache.raw, &dnorm[s]);
            if let Some(c) = carry.take() {
                for (a, b) in d.data.iter_mut().zip(c.data) {
                    *a = *a + b;
                }
            }
            nn::silu_backward(&cache.pre, &mut d.data);
            let mut dw = vec![T::zero(); self.weights[s].len()];
            let mut db = vec![T::zero(); self.biases[s].len()];
            let dx = nn::conv3x3_backward(
                &cache.col,
                EXTRACTOR_CHANNELS[s],
                &d,
                &self.weights[s],
                &mut dw,
                &mut db,
                true,
            )
            .expect("input gradient requested");
            carry = Some(if s > 0 { nn::avg_pool2_backward(&dx) } else { dx });
            dnorm[s].data.clear();
        }
        let dx = carry.expect("stage 0 ran");
        debug_assert_eq!((dx.h, dx.w), (h, w));
        // chain through x -> 2x - 1
        dx.to_hwc().map(|v| v * T::of(2.0))
    }
}

impl FeatureExtractor<f32> {
    /// Process-wide single-precision instance.
    pub fn shared() -> &'static FeatureExtractor<f32> {
        static EXTRACTOR: OnceLock<FeatureExtractor<f32>> = OnceLock::new();
        EXTRACTOR.get_or_init(FeatureExtractor::new)
    }
}

fn normalize_channels<T: Real>(x: &Planes<T>) -> Planes<T> {
    let hw = x.hw();
    let mut out = x.clone();
    for p in 0..hw {
        let ss: f64 = (0..x.c).map(|c| x.data[c * hw + p].f64().powi(2)).sum();
        let inv = T::of(1.0 / (ss + NORM_EPS).sqrt());
        for c in 0..x.c {
            out.data[c * hw + p] = x.data[c * hw + p] * inv;
        }
    }
    out
}

/// Backward of `n = f / sqrt(|f|^2 + eps)` per pixel:
/// `df = g / r - f (f . g) / r^3`.
fn normalize_channels_backward<T: Real>(f: &Planes<T>, g: &Planes<T>) -> Planes<T> {
    let hw = f.hw();
    let mut out = Planes::zeros(f.c, f.h, f.w);
    for p in 0..hw {
        let mut ss = 0.0;
        let mut fg = 0.0;
        for c in 0..f.c {
            let (fv, gv) = (f.data[c * hw + p].f64(), g.data[c * hw + p].f64());
            ss += fv * fv;
            fg += fv * gv;
        }
        let r = (ss + NORM_EPS).sqrt();
        let r3 = r * r * r;
        for c in 0..f.c {
            let (fv, gv) = (f.data[c * hw + p].f64(), g.data[c * hw + p].f64());
            out.data[c * hw + p] = T::of(gv / r - fv * fg / r3);
        }
    }
    out
}

fn stage_distance<T: Real>(a: &Planes<T>, b: &Planes<T>) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    s / a.data.len() as f64
}

/// Proxy distance between two precomputed feature sets.
pub fn feature_distance<T: Real>(a: &Features<T>, b: &Features<T>) -> f64 {
    (0..3).map(|s| stage_distance(&a.stages[s], &b.stages[s])).sum::<f64>() / 3.0
}

/// `sum_i proxy(x, target_i)` and its gradient w.r.t. `x`.
pub fn proxy_sum_and_grad<T: Real>(
    extractor: &FeatureExtractor<T>,
    x: &Tensor3<T>,
    targets: &[Features<T>],
) -> Result<(f64, Tensor3<T>)> {
    let (fx, caches) = extractor.forward(x)?;
    let mut value = 0.0;
    let dnorm: [Planes<T>; 3] = [0, 1, 2].map(|s| {
        let xs = &fx.stages[s];
        let n = xs.data.len() as f64;
        let scale = T::of(2.0 / (3.0 * n));
        let mut g = Planes::zeros(xs.c, xs.h, xs.w);
        for t in targets {
            let ts = &t.stages[s];
            value += stage_distance(xs, ts) / 3.0;
            for ((gv, &a), &b) in g.data.iter_mut().zip(&xs.data).zip(&ts.data) {
                *gv = *gv + scale * (a - b);
            }
        }
        g
    });
    let grad = extractor.backward(&caches, dnorm, x.height(), x.width());
    Ok((value, grad))
}

fn proxy_with<T: Real>(extractor: &FeatureExtractor<T>, a: &Tensor3<T>, b: &Tensor3<T>) -> Result<f64> {
    a.ensure_same_shape(b, "perceptual proxy")?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    Ok(feature_distance(&fa, &fb))
}

/// Perceptual proxy distance between two unit-range RGB images.
pub fn perceptual_proxy(a: &Tensor3<f32>, b: &Tensor3<f32>) -> Result<f64> {
    proxy_with(FeatureExtractor::shared(), a, b)
}

/// Double-precision variant, used for gradient checks.
pub fn perceptual_proxy_f64(a: &Tensor3<f64>, b: &Tensor3<f64>) -> Result<f64> {
    proxy_with(&FeatureExtractor::<f64>::new(), a, b)
}

/// Proxy value and its gradient w.r.t. `a`.
pub fn perceptual_proxy_grad<T: Real>(
    extractor: &FeatureExtractor<T>,
    a: &Tensor3<T>,
    b: &Tensor3<T>,
) -> Result<(f64, Tensor3<T>)> {
    a.ensure_same_shape(b, "perceptual proxy")?;
    let fb = extractor.features(b)?;
    proxy_sum_and_grad(extractor, a, std::slice::from_ref(&fb))
}

/// Distance between per-channel moments of stage-3 features of two image
/// sets: `|mu_a - mu_b|^2 + |sd_a - sd_b|^2` (a diagonal-covariance Frechet
/// distance). A realism indicator only; not comparable to FID.
pub fn feature_moment_distance(set_a: &[Tensor3<f32>], set_b: &[Tensor3<f32>]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Input("feature moments need nonempty sets".into()));
    }
    let ext = FeatureExtractor::shared();
    let moments = |set: &[Tensor3<f32>]| -> Result<(Vec<f64>, Vec<f64>)> {
        let c = EXTRACTOR_CHANNELS[3];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for img in set {
            let f = ext.features(img)?;
            let s3 = &f.stages[2];
            for ch in 0..c {
                for &v in s3.plane(ch) {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64).powi(2);
                }
            }
            count += s3.hw();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let sd = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count as f64 - m * m).max(0.0).sqrt())
            .collect();
        Ok((mean, sd))
    };
    let (ma, sa) = moments(set_a)?;
    let (mb, sb) = moments(set_b)?;
    Ok(ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        + sa.iter().zip(&sb).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor3<f32> {
        let mut s = Stream::new(seed);
        Tensor3::from_fn(h, w, 3, |_, _, _| s.uniform() as f32)
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(1, 16, 16).map(|v| v * 0.8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), 100.0);
        let a64: Tensor3<f64> = a.cast();
        let b64 = a64.map(|v| v + 0.1);
        assert!((psnr(&a64, &b64).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(2, 16, 16);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &random_image(3, 8, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_cases() {
        let a = random_image(4, 24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = random_image(5, 24, 24);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let checker = Tensor3::<f32>::from_fn(16, 16, 3, |y, x, _| ((x + y) % 2) as f32);
        let inv = checker.map(|v| 1.0 - v);
        assert!(ssim(&checker, &inv).unwrap() < 0.0);
        assert!(matches!(
            ssim(&random_image(6, 8, 8), &random_image(7, 8, 8)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn proxy_identity_and_symmetry() {
        let a = random_image(8, 16, 16);
        let b = random_image(9, 16, 16);
        assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        let ab = perceptual_proxy(&a, &b).unwrap();
        let ba = perceptual_proxy(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-9);
        assert!(perceptual_proxy(&a, &random_image(1, 8, 16)).is_err());
    }

    #[test]
    fn extractor_weights_are_reproducible() {
        let a = FeatureExtractor::<f32>::new();
        let b = FeatureExtractor::<f32>::new();
        for s in 0..3 {
            let x: Vec<u32> = a.weights()[s].iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> = b.weights()[s].iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
        assert_eq!(a.weights()[0].len(), 16 * 27);
        assert_eq!(a.weights()[2].len(), 64 * 32 * 9);
    }

    #[test]
    fn proxy_gradient_matches_finite_differences() {
        let ext = FeatureExtractor::<f64>::new();
        let mut s = Stream::new(10);
        let a = Tensor3::<f64>::from_fn(8, 8, 3, |_, _, _| s.uniform());
        let b = Tensor3::<f64>::from_fn(8, 8, 3, |_, _, _| s.uniform());
        let (v, g) = perceptual_proxy_grad(&ext, &a, &b).unwrap();
        assert!((v - perceptual_proxy_f64(&a, &b).unwrap()).abs() < 1e-12);
        let h = 1e-3;
        let gmax = g.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            let mut p = a.clone();
            let mut m = a.clone();
            p.as_mut_slice()[i] += h;
            m.as_mut_slice()[i] -= h;
            let fd = (perceptual_proxy_f64(&p, &b).unwrap() - perceptual_proxy_f64(&m, &b).unwrap()) / (2.0 * h);
            let an = g.as_slice()[i];
            worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs())).max(1e-3 * gmax));
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn proxy_prefers_blur_over_shuffle() {
        let cfg = SceneConfig {
            n_lr: 1,
            ..Default::default()
        };
        let mut wins = 0;
        for i in 0..20 {
            let hr = generate_scene(&cfg, i).unwrap().hr;
            let blurred = Tensor3::from_fn(32, 32, 3, |y, x, c| {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if (0..32).contains(&yy) && (0..32).contains(&xx) {
                            acc += hr.get(yy as usize, xx as usize, c);
                            n += 1.0;
                        }
                    }
                }
                acc / n
            });
            let mut rng = Stream::new(100 + i as u64);
            let perm = rng.choose_distinct(32 * 32, 32 * 32);
            let shuffled = Tensor3::from_fn(32, 32, 3, |y, x, c| {
                let p = perm[y * 32 + x];
                hr.get(p / 32, p % 32, c)
            });
            if perceptual_proxy(&hr, &blurred).unwrap() < perceptual_proxy(&hr, &shuffled).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 16, "{wins}/20");
    }

    #[test]
    fn moment_distance_zero_on_identical_sets() {
        let set = vec![random_image(1, 16, 16), random_image(2, 16, 16)];
        assert!(feature_moment_distance(&set, &set).unwrap().abs() < 1e-12);
        let other = vec![random_image(3, 16, 16).map(|v| v * 0.2)];
        assert!(feature_moment_distance(&set, &other).unwrap() > 0.0);
    }
}
