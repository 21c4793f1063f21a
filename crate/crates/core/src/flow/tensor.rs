//! Dense `(channels, height, width)` tensors with space-to-depth helpers.
//!
//! Storage is channel-major: element `(ch, y, x)` lives at
//! `(ch * height + y) * width + x`.

use super::{FlowError, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self, FlowError> {
        if data.len() != c * h * w {
            return Err(FlowError::Shape(format!(
                "{} values for a {c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Spatial size `h * w`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> T {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let p = self.plane();
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[ch * p..(ch + 1) * p]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First `k` channels and the rest.
    pub fn split_channels(&self, k: usize) -> (Self, Self) {
        let p = self.plane();
        let (a, b) = self.data.split_at(k * p);
        (
            Self { c: k, h: self.h, w: self.w, data: a.to_vec() },
            Self { c: self.c - k, h: self.h, w: self.w, data: b.to_vec() },
        )
    }

    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self, FlowError> {
        if (a.h, a.w) != (b.h, b.w) {
            return Err(FlowError::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Self { c: a.c + b.c, h: a.h, w: a.w, data })
    }

    /// Per-channel spatial mean.
    pub fn channel_means(&self) -> Vec<T> {
        let n = T::of(self.plane() as f64);
        (0..self.c).map(|ch| self.channel(ch).iter().copied().sum::<T>() / n).collect()
    }

    /// 2×2 space-to-depth. Output channel `4·ch + 2·dy + dx` holds the
    /// sub-pixel `(dy, dx)` of input channel `ch`.
    pub fn squeeze(&self) -> Result<Self, FlowError> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(FlowError::Shape(format!(
                "squeeze needs even spatial dims, got {}x{}",
                self.h, self.w
            )));
        }
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut out = Self::zeros(self.c * 4, h2, w2);
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let oc = ch * 4 + (y % 2) * 2 + x % 2;
                    out.data[(oc * h2 + y / 2) * w2 + x / 2] = self.data[(ch * self.h + y) * self.w + x];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::squeeze`].
    pub fn unsqueeze(&self) -> Result<Self, FlowError> {
        if self.c % 4 != 0 {
            return Err(FlowError::Shape(format!(
                "unsqueeze needs a multiple of 4 channels, got {}",
                self.c
            )));
        }
        let (h, w) = (self.h * 2, self.w * 2);
        let mut out = Self::zeros(self.c / 4, h, w);
        for ch in 0..self.c / 4 {
            for y in 0..h {
                for x in 0..w {
                    let ic = ch * 4 + (y % 2) * 2 + x % 2;
                    out.data[(ch * h + y) * w + x] = self.data[(ic * self.h + y / 2) * self.w + x / 2];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_ramp_ordering() {
        let t = Tensor::<f64>::from_vec(1, 4, 4, (0..16).map(f64::from).collect()).unwrap();
        let s = t.squeeze().unwrap();
        assert_eq!(s.shape(), (4, 2, 2));
        // Enumerate by the documented ordering: channel 2·dy + dx, position (y, x)
        // takes input pixel (2y + dy, 2x + dx) = value 4·(2y + dy) + 2x + dx.
        let mut want = Vec::new();
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        want.push((4 * (2 * y + dy) + 2 * x + dx) as f64);
                    }
                }
            }
        }
        assert_eq!(s.data(), &want[..]);
        assert_eq!(
            s.data(),
            &[0., 2., 8., 10., 1., 3., 9., 11., 4., 6., 12., 14., 5., 7., 13., 15.]
        );
        assert_eq!(s.unsqueeze().unwrap(), t);
    }

    #[test]
    fn squeeze_rejects_odd() {
        let t = Tensor::<f32>::zeros(1, 3, 4);
        assert!(matches!(t.squeeze(), Err(FlowError::Shape(_))));
    }

    #[test]
    fn split_concat_roundtrip() {
        let t = Tensor::<f32>::from_vec(4, 2, 3, (0..24).map(|v| v as f32).collect()).unwrap();
        let (a, b) = t.split_channels(2);
        assert_eq!(a.shape(), (2, 2, 3));
        assert_eq!(Tensor::concat_channels(&a, &b).unwrap(), t);
    }
}
