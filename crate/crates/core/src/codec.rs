//! Fixed latent codec: one level of the orthonormal 2D Haar transform.
//!
//! Each 2x2 block `(a b; c d)` of every image channel becomes four latent
//! channels, ordered `LL, LH, HL, HH`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so `decode` is both its inverse and its
//! adjoint, and L2 distances are identical in image and latent space.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;
use crate::Real;

pub const SUBBANDS: usize = 4;

/// Latent of an image: `(h / 2, w / 2, 4 * channels)`.
pub type Latent<T = f32> = Tensor3<T>;

pub fn latent_shape(h: usize, w: usize, c: usize) -> (usize, usize, usize) {
    (h / 2, w / 2, c * SUBBANDS)
}

pub fn encode<T: Real>(image: &Tensor3<T>) -> Result<Latent<T>> {
    let (h, w, c) = image.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("encode needs even spatial dims, got {h}x{w}")));
    }
    let half = T::of(0.5);
    let mut out = Tensor3::zeros(h / 2, w / 2, c * SUBBANDS);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let a = image.get(2 * y, 2 * x, ch);
                let b = image.get(2 * y, 2 * x + 1, ch);
                let cc = image.get(2 * y + 1, 2 * x, ch);
                let d = image.get(2 * y + 1, 2 * x + 1, ch);
                let base = out.idx(y, x, ch * SUBBANDS);
                let o = out.as_mut_slice();
                o[base] = (a + b + cc + d) * half;
                o[base + 1] = (a - b + cc - d) * half;
                o[base + 2] = (a + b - cc - d) * half;
                o[base + 3] = (a - b - cc + d) * half;
            }
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(latent: &Latent<T>) -> Result<Tensor3<T>> {
    let (lh, lw, lc) = latent.shape();
    if lc == 0 || lc % SUBBANDS != 0 {
        return Err(Error::Shape(format!(
            "latent channel count {lc} is not a positive multiple of {SUBBANDS}"
        )));
    }
    let c = lc / SUBBANDS;
    let half = T::of(0.5);
    let mut out = Tensor3::zeros(lh * 2, lw * 2, c);
    for y in 0..lh {
        for x in 0..lw {
            for ch in 0..c {
                let base = latent.idx(y, x, ch * SUBBANDS);
                let s = latent.as_slice();
                let (ll, lo, hl, hh) = (s[base], s[base + 1], s[base + 2], s[base + 3]);
                out.set(2 * y, 2 * x, ch, (ll + lo + hl + hh) * half);
                out.set(2 * y, 2 * x + 1, ch, (ll - lo + hl - hh) * half);
                out.set(2 * y + 1, 2 * x, ch, (ll + lo - hl - hh) * half);
                out.set(2 * y + 1, 2 * x + 1, ch, (ll - lo - hl + hh) * half);
            }
        }
    }
    Ok(out)
}

/// Range of latent channel `ch` over all images with values in `[0, 1]`:
/// `[0, 2]` for LL, `[-1, 1]` for the detail bands.
pub fn unit_image_bounds(ch: usize) -> (f64, f64) {
    if ch.is_multiple_of(SUBBANDS) {
        (0.0, 2.0)
    } else {
        (-1.0, 1.0)
    }
}

/// Clamp every element into [`unit_image_bounds`] of its channel.
pub fn clamp_to_unit_box<T: Real>(latent: &mut Latent<T>) {
    let c = latent.channels();
    for (i, v) in latent.as_mut_slice().iter_mut().enumerate() {
        let (lo, hi) = unit_image_bounds(i % c);
        *v = (*v).max(T::of(lo)).min(T::of(hi));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Tensor3<f64> {
        let mut s = Stream::new(seed);
        Tensor3::from_fn(h, w, c, |_, _, _| s.normal())
    }

    #[test]
    fn constant_image_has_only_ll() {
        let img = Tensor3::<f64>::filled(4, 6, 3, 0.3);
        let z = encode(&img).unwrap();
        assert_eq!(z.shape(), (2, 3, 12));
        for y in 0..2 {
            for x in 0..3 {
                for ch in 0..3 {
                    assert!((z.get(y, x, 4 * ch) - 0.6).abs() < 1e-15);
                    for band in 1..4 {
                        assert_eq!(z.get(y, x, 4 * ch + band), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_block_by_hand() {
        // (a b; c d) = (1 2; 3 4)
        let img = Tensor3::<f64>::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = encode(&img).unwrap();
        assert_eq!(z.as_slice(), &[5.0, -1.0, -2.0, 0.0]);
    }

    #[test]
    fn zeros_map_to_zeros() {
        let z = encode(&Tensor3::<f32>::zeros(8, 8, 3)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let x = decode(&Tensor3::<f32>::zeros(4, 4, 12)).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(encode(&Tensor3::<f32>::zeros(3, 4, 1)), Err(Error::Shape(_))));
        assert!(matches!(decode(&Tensor3::<f32>::zeros(2, 2, 6)), Err(Error::Shape(_))));
        assert!(matches!(decode(&Tensor3::<f32>::zeros(2, 2, 0)), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_isometry(seed in any::<u64>(), hh in 1usize..6, hw in 1usize..6, c in 1usize..4) {
            let x = random_image(seed, 2 * hh, 2 * hw, c);
            let z = encode(&x).unwrap();
            prop_assert!(decode(&z).unwrap().max_abs_diff(&x) <= 1e-12);
            prop_assert!((z.norm() - x.norm()).abs() <= 1e-12 * (1.0 + x.norm()));
        }

        #[test]
        fn linear_and_decode_isometric(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_image(seed, 6, 4, 2);
            let y = random_image(seed ^ 1, 6, 4, 2);
            let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = encode(&combo).unwrap();
            let rhs = encode(&x).unwrap().zip_map(&encode(&y).unwrap(), |p, q| a * p + b * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);

            let za = encode(&x).unwrap();
            let zb = encode(&y).unwrap();
            let dz = za.zip_map(&zb, |p, q| p - q).unwrap().norm();
            let dx = decode(&za).unwrap().zip_map(&decode(&zb).unwrap(), |p, q| p - q).unwrap().norm();
            prop_assert!((dz - dx).abs() <= 1e-12 * (1.0 + dz));
        }
    }

    #[test]
    fn unit_images_fill_the_latent_box() {
        let mut s = Stream::new(8);
        let img = Tensor3::from_vec(
            6,
            6,
            3,
            (0..108).map(|_| if s.uniform() < 0.5 { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        let z = encode(&img).unwrap();
        let mut clamped = z.clone();
        clamp_to_unit_box(&mut clamped);
        assert_eq!(clamped, z);
        let mut wild = z.map(|v| 5.0 * v - 2.0);
        clamp_to_unit_box(&mut wild);
        for (i, v) in wild.as_slice().iter().enumerate() {
            let (lo, hi) = unit_image_bounds(i % 12);
            assert!((lo..=hi).contains(v));
        }
        assert_eq!(unit_image_bounds(4), (0.0, 2.0));
        assert_eq!(unit_image_bounds(7), (-1.0, 1.0));
    }
}
