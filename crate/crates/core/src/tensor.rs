use crate::error::{Error, Result};
use crate::Real;

/// Row-major `(height, width, channels)` array. Used for images, Haar latents
/// and width-concatenated latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T = f32> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

pub type Image = Tensor3<f32>;

impl<T: Real> Tensor3<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: T) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fit ({h}, {w}, {c})",
                data.len()
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor3 { h, w, c, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[self.idx(y, x, ch)]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: T) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self, ch: usize) -> f64 {
        let n = self.h * self.w;
        self.data[ch..].iter().step_by(self.c).map(|v| v.f64()).sum::<f64>() / n as f64
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Columns `[x0, x0 + width)`.
    pub fn crop_width(&self, x0: usize, width: usize) -> Self {
        assert!(x0 + width <= self.w);
        let mut data = Vec::with_capacity(self.h * width * self.c);
        for y in 0..self.h {
            let start = self.idx(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + width * self.c]);
        }
        Tensor3 {
            h: self.h,
            w: width,
            c: self.c,
            data,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h && x0 + w <= self.w);
        Tensor3::from_fn(h, w, self.c, |y, x, ch| self.get(y0 + y, x0 + x, ch))
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }
}

/// `(channels, height, width)` feature map used inside the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Planes<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Planes {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, ch: usize) -> &[T] {
        let n = self.hw();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn from_hwc(t: &Tensor3<T>) -> Self {
        let (h, w, c) = t.shape();
        let mut data = vec![T::zero(); c * h * w];
        let src = t.as_slice();
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = src[p * c + ch];
            }
        }
        Planes { c, h, w, data }
    }

    pub fn to_hwc(&self) -> Tensor3<T> {
        let (c, h, w) = (self.c, self.h, self.w);
        let mut data = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = self.data[ch * h * w + p];
            }
        }
        Tensor3 { h, w, c, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planes_round_trip() {
        let t = Tensor3::<f32>::from_fn(3, 5, 2, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let p = Planes::from_hwc(&t);
        assert_eq!(p.plane(1)[0], 1.0);
        assert_eq!(p.plane(0)[6], 110.0);
        assert_eq!(p.to_hwc(), t);
    }

    #[test]
    fn crop_width_selects_columns() {
        let t = Tensor3::<f32>::from_fn(2, 4, 1, |y, x, _| (y * 4 + x) as f32);
        let r = t.crop_width(2, 2);
        assert_eq!(r.as_slice(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor3::<f32>::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
