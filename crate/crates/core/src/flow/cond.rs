//! Conditioning network: per scale, two 3×3 convolutions on the layout
//! squeezed down to that scale's resolution.

use rand::Rng;

use super::conv::{Conv2d, ConvCache};
use super::coupling::relu_mask;
use super::param::{join, Param, Params};
use super::{FlowError, Real, Tensor};
use crate::raster::LayoutMask;

/// Input channels before squeezing: occupancy and source proximity.
pub const LAYOUT_CHANNELS: usize = 2;

/// Occupancy (1 = building) and a source-proximity ramp
/// `1 − log10(max(r, 1)) / log10(n·√2)`, which is 1 at the source and falls
/// to about 0 at the far corner of an `n × n` grid.
pub fn layout_channels<T: Real>(mask: &LayoutMask) -> Tensor<T> {
    let n = mask.size();
    let (sr, sc) = mask.source();
    let far = (n as f64 * std::f64::consts::SQRT_2).log10().max(1e-9);
    let mut t = Tensor::zeros(LAYOUT_CHANNELS, n, n);
    let data = t.data_mut();
    for r in 0..n {
        for c in 0..n {
            data[r * n + c] = if mask.is_building(r, c) { T::one() } else { T::zero() };
            let dr = r as f64 - sr as f64;
            let dc = c as f64 - sc as f64;
            let d = (dr * dr + dc * dc).sqrt().max(1.0);
            data[n * n + r * n + c] = T::of(1.0 - d.log10() / far);
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondScale<T> {
    pub conv_a: Conv2d<T>,
    pub conv_b: Conv2d<T>,
}

/// One feature map per scale, each matching the flow tensor's spatial size there.
#[derive(Clone, Debug, PartialEq)]
pub struct CondFeatures<T> {
    pub scales: Vec<Tensor<T>>,
    pub pooled: Vec<Vec<T>>,
}

pub(crate) struct CondTrace<T> {
    a: ConvCache<T>,
    h: Tensor<T>,
    b: ConvCache<T>,
}

impl<T: Real> CondScale<T> {
    pub fn new(scale: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let cin = LAYOUT_CHANNELS << (2 * (scale + 1));
        Self { conv_a: Conv2d::lecun(cin, hidden, 3, rng), conv_b: Conv2d::lecun(hidden, hidden, 3, rng) }
    }

    pub fn in_channels(&self) -> usize {
        self.conv_a.cin()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        let h = self.conv_a.forward(input).map(|v| v.max(T::zero()));
        self.conv_b.forward(&h)
    }

    pub(crate) fn forward_cached(&self, input: &Tensor<T>) -> (Tensor<T>, CondTrace<T>) {
        let (pa, a) = self.conv_a.forward_cached(input);
        let h = pa.map(|v| v.max(T::zero()));
        let (out, b) = self.conv_b.forward_cached(&h);
        (out, CondTrace { a, h, b })
    }

    pub(crate) fn backward(&self, trace: &CondTrace<T>, g_out: &Tensor<T>, grads: &mut Self) {
        let mut g_h = self.conv_b.backward(&trace.b, g_out, &mut grads.conv_b, true).expect("input grad");
        relu_mask(&mut g_h, &trace.h);
        self.conv_a.backward(&trace.a, &g_h, &mut grads.conv_a, false);
    }
}

/// Squeezed layout inputs for every scale.
pub(crate) fn scale_inputs<T: Real>(mask: &LayoutMask, num_scales: usize) -> Result<Vec<Tensor<T>>, FlowError> {
    let mut t = layout_channels::<T>(mask);
    let mut out = Vec::with_capacity(num_scales);
    for _ in 0..num_scales {
        t = t.squeeze()?;
        out.push(t.clone());
    }
    Ok(out)
}

impl<T: Real> Params<T> for CondScale<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv_a.visit(&join(prefix, "conv_a"), out);
        self.conv_b.visit(&join(prefix, "conv_b"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), out);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), out);
    }
}
