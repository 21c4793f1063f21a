//! Same-padded 2-D convolution via im2col and gemm.

use rand::Rng;

use super::param::{join, Param, Params};
use super::real::{matmul, Op};
use super::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[cout, cin, k, k]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    k: usize,
}

/// Activations kept by a forward pass for the matching backward pass: the
/// im2col matrix, or the raw input on the tap-stacked path.
pub struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
}

/// Visit every in-bounds pair `(dst, src)` of flat plane indices with
/// `src = dst + (dy, dx)`.
#[inline]
fn for_shift(h: usize, w: usize, dy: isize, dx: isize, mut f: impl FnMut(usize, usize)) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        for x in x0..x1 {
            f(y * w + x, sy * w + (x as isize + dx) as usize);
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        Self { weight: Param::zeros(&[cout, cin, k, k]), bias: Param::zeros(&[cout]), k }
    }

    pub fn random(cin: usize, cout: usize, k: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(cin, cout, k);
        c.weight = Param::normal(&[cout, cin, k, k], std, rng);
        c
    }

    /// LeCun-style normal initialization.
    pub fn lecun(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::random(cin, cout, k, (1.0 / (cin * k * k) as f64).sqrt(), rng)
    }

    pub fn cin(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let (cin, h, w) = x.shape();
        let k = self.k;
        if k == 1 {
            return x.data().to_vec();
        }
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![T::zero(); cin * k * k * hw];
        for ci in 0..cin {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let srow = sy as usize * w;
                        for x in x0..x1 {
                            dst[y * w + x] = src[srow + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], cin: usize, h: usize, w: usize) -> Tensor<T> {
        let k = self.k;
        if k == 1 {
            return Tensor::from_vec(cin, h, w, cols.to_vec()).expect("shape");
        }
        let r = (k / 2) as isize;
        let hw = h * w;
        let mut out = Tensor::zeros(cin, h, w);
        for ci in 0..cin {
            let dst = out.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - r;
                    let dx = kx as isize - r;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        let srow = sy as usize * w;
                        for x in x0..x1 {
                            dst[srow + (x as isize + dx) as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
        out
    }

    /// Narrow outputs from wide inputs: one gemm over all taps at once,
    /// then shift-and-add, instead of a large im2col with a thin gemm.
    fn stacked(&self) -> bool {
        self.k > 1 && self.cout() * 2 <= self.cin()
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.k;
        let r = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - r, (t % k) as isize - r))
    }

    /// Weights as `[(tap · cout + co), ci]`.
    fn stack_weight(&self) -> Vec<T> {
        let (cout, cin, kk) = (self.cout(), self.cin(), self.k * self.k);
        let mut ws = vec![T::zero(); kk * cout * cin];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..kk {
                    ws[(t * cout + co) * cin + ci] = self.weight.data[(co * cin + ci) * kk + t];
                }
            }
        }
        ws
    }

    fn with_bias(&self, h: usize, w: usize) -> Tensor<T> {
        let hw = h * w;
        let mut out = Tensor::zeros(self.cout(), h, w);
        let data = out.data_mut();
        for (co, &b) in self.bias.data.iter().enumerate() {
            data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        out
    }

    fn apply(&self, cols: &[T], h: usize, w: usize) -> Tensor<T> {
        let cout = self.cout();
        let hw = h * w;
        let mut out = self.with_bias(h, w);
        if self.stacked() {
            let kk = self.k * self.k;
            let mut y = vec![T::zero(); kk * cout * hw];
            matmul(kk * cout, self.cin(), hw, &self.stack_weight(), Op::N, cols, Op::N, T::zero(), &mut y);
            let data = out.data_mut();
            for (t, dy, dx) in self.taps() {
                for co in 0..cout {
                    let src = &y[(t * cout + co) * hw..(t * cout + co + 1) * hw];
                    let dst = &mut data[co * hw..(co + 1) * hw];
                    for_shift(h, w, dy, dx, |d, s| dst[d] += src[s]);
                }
            }
            return out;
        }
        let kk = self.cin() * self.k * self.k;
        matmul(cout, kk, hw, &self.weight.data, Op::N, cols, Op::N, T::one(), out.data_mut());
        out
    }

    fn prepare(&self, x: &Tensor<T>) -> Vec<T> {
        if self.stacked() {
            x.data().to_vec()
        } else {
            self.im2col(x)
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.channels(), self.cin());
        if self.stacked() {
            return self.apply(x.data(), x.height(), x.width());
        }
        let cols = self.im2col(x);
        self.apply(&cols, x.height(), x.width())
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        debug_assert_eq!(x.channels(), self.cin());
        let cols = self.prepare(x);
        let y = self.apply(&cols, x.height(), x.width());
        (y, ConvCache { cols, h: x.height(), w: x.width() })
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        g_out: &Tensor<T>,
        grads: &mut Self,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let cout = self.cout();
        let cin = self.cin();
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let g = g_out.data();
        for co in 0..cout {
            grads.bias.data[co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if self.stacked() {
            let kk = self.k * self.k;
            // Output gradient replicated per tap at the input positions it touches.
            let mut gs = vec![T::zero(); kk * cout * hw];
            for (t, dy, dx) in self.taps() {
                for co in 0..cout {
                    let src = &g[co * hw..(co + 1) * hw];
                    let dst = &mut gs[(t * cout + co) * hw..(t * cout + co + 1) * hw];
                    for_shift(h, w, dy, dx, |d, s| dst[s] = src[d]);
                }
            }
            let mut gws = vec![T::zero(); kk * cout * cin];
            matmul(kk * cout, hw, cin, &gs, Op::N, &cache.cols, Op::T, T::zero(), &mut gws);
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..kk {
                        grads.weight.data[(co * cin + ci) * kk + t] += gws[(t * cout + co) * cin + ci];
                    }
                }
            }
            if !want_input {
                return None;
            }
            let mut gx = Tensor::zeros(cin, h, w);
            matmul(cin, kk * cout, hw, &self.stack_weight(), Op::T, &gs, Op::N, T::zero(), gx.data_mut());
            return Some(gx);
        }
        let kk = cin * self.k * self.k;
        matmul(cout, hw, kk, g, Op::N, &cache.cols, Op::T, T::one(), &mut grads.weight.data);
        if !want_input {
            return None;
        }
        let mut g_cols = vec![T::zero(); kk * hw];
        matmul(kk, cout, hw, &self.weight.data, Op::T, g, Op::N, T::zero(), &mut g_cols);
        Some(self.col2im(&g_cols, cin, h, w))
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
