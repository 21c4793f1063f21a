//! Conditional ActNorm: per-channel affine map whose log-scale and bias get
//! additive offsets from the spatially pooled conditioning features.

use super::param::{join, Param, Params};
use super::{FlowError, Real, Tensor};

/// `|s| < 1e-12` is treated as singular.
const MIN_LOG_SCALE: f64 = -27.631_021_115_928_547;

#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<T> {
    pub log_scale: Param<T>,
    pub bias: Param<T>,
    /// `[channels, cond_hidden]`, zero at construction.
    pub cond_scale: Param<T>,
    pub cond_bias: Param<T>,
}

impl<T: Real> ActNorm<T> {
    pub fn identity(channels: usize, cond_hidden: usize) -> Self {
        Self {
            log_scale: Param::zeros(&[channels]),
            bias: Param::zeros(&[channels]),
            cond_scale: Param::zeros(&[channels, cond_hidden]),
            cond_bias: Param::zeros(&[channels, cond_hidden]),
        }
    }

    fn channels(&self) -> usize {
        self.log_scale.len()
    }

    fn coeffs(&self, pooled: &[T]) -> Result<(Vec<T>, Vec<T>), FlowError> {
        let c = self.channels();
        let hc = pooled.len();
        let mut ls = self.log_scale.data.clone();
        let mut b = self.bias.data.clone();
        for ch in 0..c {
            for (h, &p) in pooled.iter().enumerate() {
                ls[ch] += self.cond_scale.data[ch * hc + h] * p;
                b[ch] += self.cond_bias.data[ch * hc + h] * p;
            }
            if !(ls[ch].f64() >= MIN_LOG_SCALE) {
                return Err(FlowError::Singular(format!(
                    "actnorm channel {ch} has scale exp({})",
                    ls[ch]
                )));
            }
        }
        Ok((ls, b))
    }

    pub fn forward(&self, x: &Tensor<T>, pooled: &[T]) -> Result<(Tensor<T>, T), FlowError> {
        let (ls, b) = self.coeffs(pooled)?;
        let mut y = x.clone();
        for ch in 0..self.channels() {
            let s = ls[ch].exp();
            y.channel_mut(ch).iter_mut().for_each(|v| *v = s * *v + b[ch]);
        }
        let logdet = T::of(x.plane() as f64) * ls.iter().copied().sum::<T>();
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: &Tensor<T>, pooled: &[T]) -> Result<Tensor<T>, FlowError> {
        let (ls, b) = self.coeffs(pooled)?;
        let mut x = y.clone();
        for ch in 0..self.channels() {
            let inv = (-ls[ch]).exp();
            x.channel_mut(ch).iter_mut().for_each(|v| *v = (*v - b[ch]) * inv);
        }
        Ok(x)
    }

    /// Gradient step through the layer. `x` is reconstructed from `y` unless
    /// supplied. Returns `(x, dL/dx)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        y: &Tensor<T>,
        x: Option<&Tensor<T>>,
        g_y: &Tensor<T>,
        pooled: &[T],
        ld_grad: T,
        grads: &mut Self,
        g_pooled: &mut [T],
    ) -> Result<(Tensor<T>, Tensor<T>), FlowError> {
        let (ls, _) = self.coeffs(pooled)?;
        let x = match x {
            Some(x) => x.clone(),
            None => self.inverse(y, pooled)?,
        };
        let hw = T::of(x.plane() as f64);
        let hc = pooled.len();
        let mut g_x = g_y.clone();
        for ch in 0..self.channels() {
            let s = ls[ch].exp();
            let gy = g_y.channel(ch);
            let xs = x.channel(ch);
            let g_b: T = gy.iter().copied().sum();
            let g_ls: T = gy.iter().zip(xs).map(|(&g, &v)| g * v).sum::<T>() * s + ld_grad * hw;
            g_x.channel_mut(ch).iter_mut().for_each(|v| *v *= s);
            grads.bias.data[ch] += g_b;
            grads.log_scale.data[ch] += g_ls;
            for (h, &p) in pooled.iter().enumerate() {
                grads.cond_bias.data[ch * hc + h] += g_b * p;
                grads.cond_scale.data[ch * hc + h] += g_ls * p;
                g_pooled[h] += self.cond_bias.data[ch * hc + h] * g_b + self.cond_scale.data[ch * hc + h] * g_ls;
            }
        }
        Ok((x, g_x))
    }

    /// Set base scale and bias so that `xs` map to zero mean and unit
    /// variance per channel (conditioning offsets assumed zero).
    pub fn init_from_data(&mut self, xs: &[Tensor<T>]) {
        for ch in 0..self.channels() {
            let mut n = 0.0;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for x in xs {
                for &v in x.channel(ch) {
                    let v = v.f64();
                    n += 1.0;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            let std = (sq / n - mean * mean).max(0.0).sqrt();
            let ls = -(std + 1e-6).ln();
            self.log_scale.data[ch] = T::of(ls);
            self.bias.data[ch] = T::of(-mean * ls.exp());
        }
    }
}

impl<T: Real> Params<T> for ActNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "log_scale"), &self.log_scale));
        out.push((join(prefix, "bias"), &self.bias));
        out.push((join(prefix, "cond_scale"), &self.cond_scale));
        out.push((join(prefix, "cond_bias"), &self.cond_bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "log_scale"), &mut self.log_scale));
        out.push((join(prefix, "bias"), &mut self.bias));
        out.push((join(prefix, "cond_scale"), &mut self.cond_scale));
        out.push((join(prefix, "cond_bias"), &mut self.cond_bias));
    }
}
