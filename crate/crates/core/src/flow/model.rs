//! The multi-scale model: squeeze → steps → split per scale, exact
//! log-likelihood, sampling and the reverse-mode pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::actnorm::ActNorm;
use super::cond::{scale_inputs, CondFeatures, CondScale, CondTrace};
use super::coupling::Coupling;
use super::invconv::InvConv;
use super::param::{join, Param, Params};
use super::{FlowConfig, FlowError, Real, Tensor};
use crate::raster::{LayoutMask, NormMap};

/// Normalized targets are shifted by this before entering the flow, so the
/// zero latent decodes to a mid-range map.
pub const MEAN_SHIFT: f64 = 0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStep<T> {
    pub actnorm: ActNorm<T>,
    pub invconv: InvConv<T>,
    pub coupling: Coupling<T>,
}

/// Latents factored out at each split followed by the final one.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T> {
    pub zs: Vec<Tensor<T>>,
    /// Σ log N(z; 0, I) over every element, in nats.
    pub log_prior: f64,
}

impl<T: Real> LatentBundle<T> {
    pub fn new(zs: Vec<Tensor<T>>) -> Self {
        let log_prior = zs
            .iter()
            .flat_map(|z| z.data().iter())
            .map(|v| {
                let v = v.f64();
                -0.5 * v * v - HALF_LN_2PI
            })
            .sum();
        Self { zs, log_prior }
    }

    pub fn element_count(&self) -> usize {
        self.zs.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihood {
    pub nats: f64,
    pub nats_per_dim: f64,
}

/// How the reverse pass obtains each layer's input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradMode {
    /// Invert layers on the way back; memory is independent of depth.
    #[default]
    Recompute,
    /// Keep every layer input from the forward pass.
    StoreAll,
}

/// Recorded layer inputs for [`GradMode::StoreAll`]: per scale, per step,
/// the inputs of ActNorm, 1×1 conv and coupling.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    inputs: Vec<Vec<[Tensor<T>; 3]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    config: FlowConfig,
    pub cond: Vec<CondScale<T>>,
    pub steps: Vec<Vec<FlowStep<T>>>,
}

fn at(layer: String) -> impl FnOnce(FlowError) -> FlowError {
    move |e| match e {
        FlowError::Singular(m) => FlowError::Singular(format!("{layer}: {m}")),
        FlowError::Shape(m) => FlowError::Shape(format!("{layer}: {m}")),
        other => other,
    }
}

fn finite<T: Real>(t: &Tensor<T>, layer: impl FnOnce() -> String) -> Result<(), FlowError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(FlowError::NonFinite { layer: layer() })
    }
}

fn layer_name(scale: usize, step: usize, layer: &str) -> String {
    format!("scale {scale} step {step} {layer}")
}

impl<T: Real> FlowModel<T> {
    /// Fresh model: unit ActNorm, identity LU, zero final coupling layers,
    /// zero conditioning projections. Hidden layers are seeded.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self, FlowError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hc = config.cond_hidden_channels;
        let chans = config.scale_channels();
        let cond = (0..config.num_scales).map(|i| CondScale::new(i, hc, &mut rng)).collect();
        let mut steps = Vec::with_capacity(config.num_scales);
        for (i, &c) in chans.iter().enumerate() {
            let mut scale = Vec::with_capacity(config.steps_per_scale[i]);
            for _ in 0..config.steps_per_scale[i] {
                scale.push(FlowStep {
                    actnorm: ActNorm::identity(c, hc),
                    invconv: InvConv::identity(c, hc),
                    coupling: Coupling::new(c, hc, config.coupling_hidden_channels, &mut rng)?,
                });
            }
            steps.push(scale);
        }
        Ok(Self { config, cond, steps })
    }

    /// Every trainable parameter perturbed by `U(−spread, spread)` and each
    /// 1×1 conv replaced by a random rotation. Used for verification.
    pub fn randomized(config: FlowConfig, seed: u64, spread: f64) -> Result<Self, FlowError> {
        let mut m = Self::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let hc = m.config.cond_hidden_channels;
        for scale in &mut m.steps {
            for step in scale {
                step.invconv = InvConv::random_rotation(step.invconv.channels(), hc, &mut rng);
            }
        }
        for (_, p) in m.blocks_mut() {
            if p.trainable {
                for v in &mut p.data {
                    *v += T::of(rng.random_range(-spread..spread));
                }
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    /// Same structure, every block zero. Serves as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.blocks_mut() {
            p.fill_zero();
        }
        z
    }

    pub fn blocks(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.blocks().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        let mut out = FlowModel::<U>::new(self.config.clone(), 0).expect("validated config");
        for ((_, dst), (_, src)) in out.blocks_mut().into_iter().zip(self.blocks()) {
            *dst = src.cast();
        }
        out
    }

    pub fn cond_features(&self, mask: &LayoutMask) -> Result<CondFeatures<T>, FlowError> {
        self.config.check_size(mask.size())?;
        let inputs = scale_inputs::<T>(mask, self.config.num_scales)?;
        let scales: Vec<Tensor<T>> = self.cond.iter().zip(&inputs).map(|(c, x)| c.forward(x)).collect();
        let pooled = scales.iter().map(Tensor::channel_means).collect();
        Ok(CondFeatures { scales, pooled })
    }

    fn cond_traced(&self, mask: &LayoutMask) -> Result<(CondFeatures<T>, Vec<CondTrace<T>>), FlowError> {
        self.config.check_size(mask.size())?;
        let inputs = scale_inputs::<T>(mask, self.config.num_scales)?;
        let mut scales = Vec::new();
        let mut traces = Vec::new();
        for (c, x) in self.cond.iter().zip(&inputs) {
            let (f, t) = c.forward_cached(x);
            scales.push(f);
            traces.push(t);
        }
        let pooled = scales.iter().map(Tensor::channel_means).collect();
        Ok((CondFeatures { scales, pooled }, traces))
    }

    fn check_input(&self, x: &Tensor<T>, mask: &LayoutMask) -> Result<(), FlowError> {
        let n = mask.size();
        if x.shape() != (1, n, n) {
            return Err(FlowError::Shape(format!("input {:?} for a {n}x{n} layout", x.shape())));
        }
        self.config.check_size(n)
    }

    pub fn forward(&self, x: &Tensor<T>, mask: &LayoutMask) -> Result<(LatentBundle<T>, T), FlowError> {
        self.check_input(x, mask)?;
        let cond = self.cond_features(mask)?;
        self.forward_with(x, &cond, None)
    }

    /// Forward pass with precomputed conditioning; optionally records layer inputs.
    pub fn forward_with(
        &self,
        x: &Tensor<T>,
        cond: &CondFeatures<T>,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<(LatentBundle<T>, T), FlowError> {
        let last = self.config.num_scales - 1;
        let mut h = x.clone();
        let mut logdet = T::zero();
        let mut zs = Vec::with_capacity(self.config.num_scales);
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.clear();
        }
        for (i, scale) in self.steps.iter().enumerate() {
            h = h.squeeze()?;
            let c = &cond.scales[i];
            let pooled = &cond.pooled[i];
            if (c.height(), c.width()) != (h.height(), h.width()) {
                return Err(FlowError::Shape(format!(
                    "conditioning {:?} at scale {i} for flow tensor {:?}",
                    c.shape(),
                    h.shape()
                )));
            }
            let mut rec = Vec::new();
            for (j, step) in scale.iter().enumerate() {
                let x0 = h;
                let (x1, l1) = step.actnorm.forward(&x0, pooled).map_err(at(layer_name(i, j, "actnorm")))?;
                finite(&x1, || layer_name(i, j, "actnorm"))?;
                let (x2, l2) = step.invconv.forward(&x1, pooled).map_err(at(layer_name(i, j, "invconv")))?;
                finite(&x2, || layer_name(i, j, "invconv"))?;
                let (y, l3) = step.coupling.forward(&x2, c).map_err(at(layer_name(i, j, "coupling")))?;
                finite(&y, || layer_name(i, j, "coupling"))?;
                logdet += l1 + l2 + l3;
                if tape.is_some() {
                    rec.push([x0, x1, x2]);
                }
                h = y;
            }
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(rec);
            }
            if i < last {
                let (keep, z) = h.split_channels(h.channels() / 2);
                zs.push(z);
                h = keep;
            }
        }
        zs.push(h);
        Ok((LatentBundle::new(zs), logdet))
    }

    /// Latent shapes produced for an `n × n` input.
    pub fn latent_shapes(&self, n: usize) -> Vec<(usize, usize, usize)> {
        let chans = self.config.scale_channels();
        let last = self.config.num_scales - 1;
        let mut out = Vec::new();
        for (i, &c) in chans.iter().enumerate() {
            let s = n >> (i + 1);
            if i < last {
                out.push((c / 2, s, s));
            } else {
                out.push((c, s, s));
            }
        }
        out
    }

    pub fn inverse(&self, bundle: &LatentBundle<T>, mask: &LayoutMask) -> Result<Tensor<T>, FlowError> {
        let cond = self.cond_features(mask)?;
        self.inverse_with(bundle, &cond)
    }

    pub fn inverse_with(&self, bundle: &LatentBundle<T>, cond: &CondFeatures<T>) -> Result<Tensor<T>, FlowError> {
        let n = cond.scales[0].height() * 2;
        let want = self.latent_shapes(n);
        let got: Vec<_> = bundle.zs.iter().map(Tensor::shape).collect();
        if got != want {
            return Err(FlowError::Shape(format!("latent shapes {got:?}, model expects {want:?}")));
        }
        let last = self.config.num_scales - 1;
        let mut h = bundle.zs[last].clone();
        for i in (0..self.config.num_scales).rev() {
            if i < last {
                h = Tensor::concat_channels(&h, &bundle.zs[i])?;
            }
            let c = &cond.scales[i];
            let pooled = &cond.pooled[i];
            for (j, step) in self.steps[i].iter().enumerate().rev() {
                h = step.coupling.inverse(&h, c).map_err(at(layer_name(i, j, "coupling")))?;
                finite(&h, || format!("{} inverse", layer_name(i, j, "coupling")))?;
                h = step.invconv.inverse(&h, pooled).map_err(at(layer_name(i, j, "invconv")))?;
                finite(&h, || format!("{} inverse", layer_name(i, j, "invconv")))?;
                h = step.actnorm.inverse(&h, pooled).map_err(at(layer_name(i, j, "actnorm")))?;
                finite(&h, || format!("{} inverse", layer_name(i, j, "actnorm")))?;
            }
            h = h.unsqueeze()?;
        }
        Ok(h)
    }

    /// `log p(x | mask) = log N(z) + Σ logdet`.
    pub fn log_likelihood(&self, x: &Tensor<T>, mask: &LayoutMask) -> Result<LogLikelihood, FlowError> {
        let (bundle, logdet) = self.forward(x, mask)?;
        let nats = bundle.log_prior + logdet.f64();
        if !nats.is_finite() {
            return Err(FlowError::NonFinite { layer: "latent prior".into() });
        }
        Ok(LogLikelihood { nats, nats_per_dim: nats / x.len() as f64 })
    }

    /// Draw `z ~ N(0, τ²I)` from `seed`, decode, undo the mean shift and clamp
    /// to [0, 1]. Returns the map and the number of clamped pixels.
    pub fn sample(&self, mask: &LayoutMask, tau: f64, seed: u64) -> Result<(NormMap, usize), FlowError> {
        if !(tau > 0.0) {
            return Err(FlowError::Config(format!("temperature must be positive, got {tau}")));
        }
        let n = mask.size();
        self.config.check_size(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs = self
            .latent_shapes(n)
            .into_iter()
            .map(|(c, h, w)| {
                let v = (0..c * h * w)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        T::of(tau * e)
                    })
                    .collect();
                Tensor::from_vec(c, h, w, v).expect("shape")
            })
            .collect();
        let x = self.inverse(&LatentBundle::new(zs), mask)?;
        Ok(tensor_to_norm(&x))
    }

    /// Reverse-mode pass from latent gradients `g_z` and the log-determinant
    /// weight `ld_grad` (= ∂L/∂logdet). Accumulates into `grads` and returns
    /// the reconstructed input together with ∂L/∂x.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        mask: &LayoutMask,
        bundle: &LatentBundle<T>,
        g_z: &[Tensor<T>],
        ld_grad: T,
        tape: Option<&Tape<T>>,
        grads: &mut Self,
    ) -> Result<(Tensor<T>, Tensor<T>), FlowError> {
        let (cond, traces) = self.cond_traced(mask)?;
        let last = self.config.num_scales - 1;
        if g_z.len() != bundle.zs.len() || g_z.iter().zip(&bundle.zs).any(|(g, z)| g.shape() != z.shape()) {
            return Err(FlowError::Shape("latent gradients do not match the bundle".into()));
        }
        let mut h = bundle.zs[last].clone();
        let mut g = g_z[last].clone();
        for i in (0..self.config.num_scales).rev() {
            if i < last {
                h = Tensor::concat_channels(&h, &bundle.zs[i])?;
                g = Tensor::concat_channels(&g, &g_z[i])?;
            }
            let c = &cond.scales[i];
            let pooled = &cond.pooled[i];
            let mut g_c = Tensor::zeros(c.channels(), c.height(), c.width());
            let mut g_pooled = vec![T::zero(); pooled.len()];
            for j in (0..self.steps[i].len()).rev() {
                let step = &self.steps[i][j];
                let gs = &mut grads.steps[i][j];
                let rec = tape.map(|t| &t.inputs[i][j]);
                let (x2, g2) = step
                    .coupling
                    .backward(&h, rec.map(|r| &r[2]), &g, c, ld_grad, &mut gs.coupling, &mut g_c)
                    .map_err(at(layer_name(i, j, "coupling")))?;
                let (x1, g1) = step
                    .invconv
                    .backward(&x2, rec.map(|r| &r[1]), &g2, pooled, ld_grad, &mut gs.invconv, &mut g_pooled)
                    .map_err(at(layer_name(i, j, "invconv")))?;
                let (x0, g0) = step
                    .actnorm
                    .backward(&x1, rec.map(|r| &r[0]), &g1, pooled, ld_grad, &mut gs.actnorm, &mut g_pooled)
                    .map_err(at(layer_name(i, j, "actnorm")))?;
                h = x0;
                g = g0;
            }
            // Spatial mean pooling spreads its gradient uniformly.
            let inv = T::one() / T::of(c.plane() as f64);
            for (ch, &gp) in g_pooled.iter().enumerate() {
                g_c.channel_mut(ch).iter_mut().for_each(|v| *v += gp * inv);
            }
            self.cond[i].backward(&traces[i], &g_c, &mut grads.cond[i]);
            h = h.unsqueeze()?;
            g = g.unsqueeze()?;
        }
        Ok((h, g))
    }

    /// Data-dependent ActNorm initialization: each ActNorm is set so that its
    /// outputs over `xs` have zero mean and unit variance per channel.
    pub fn data_init(&mut self, xs: &[Tensor<T>], masks: &[LayoutMask]) -> Result<(), FlowError> {
        if xs.len() != masks.len() || xs.is_empty() {
            return Err(FlowError::Shape("data init needs one mask per input".into()));
        }
        for (x, m) in xs.iter().zip(masks) {
            self.check_input(x, m)?;
        }
        let conds = masks.iter().map(|m| self.cond_features(m)).collect::<Result<Vec<_>, _>>()?;
        let last = self.config.num_scales - 1;
        let mut hs: Vec<Tensor<T>> = xs.to_vec();
        for i in 0..self.config.num_scales {
            hs = hs.iter().map(Tensor::squeeze).collect::<Result<_, _>>()?;
            for j in 0..self.steps[i].len() {
                self.steps[i][j].actnorm.init_from_data(&hs);
                let step = &self.steps[i][j];
                for (h, cond) in hs.iter_mut().zip(&conds) {
                    let p = &cond.pooled[i];
                    let (a, _) = step.actnorm.forward(h, p)?;
                    let (b, _) = step.invconv.forward(&a, p)?;
                    *h = step.coupling.forward(&b, &cond.scales[i])?.0;
                }
            }
            if i < last {
                for h in &mut hs {
                    *h = h.split_channels(h.channels() / 2).0;
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for FlowModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, c) in self.cond.iter().enumerate() {
            c.visit(&join(prefix, &format!("cond{i}")), out);
        }
        for (i, scale) in self.steps.iter().enumerate() {
            for (j, s) in scale.iter().enumerate() {
                let p = join(prefix, &format!("scale{i}.step{j}"));
                s.actnorm.visit(&join(&p, "actnorm"), out);
                s.invconv.visit(&join(&p, "invconv"), out);
                s.coupling.visit(&join(&p, "coupling"), out);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, c) in self.cond.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("cond{i}")), out);
        }
        for (i, scale) in self.steps.iter_mut().enumerate() {
            for (j, s) in scale.iter_mut().enumerate() {
                let p = join(prefix, &format!("scale{i}.step{j}"));
                s.actnorm.visit_mut(&join(&p, "actnorm"), out);
                s.invconv.visit_mut(&join(&p, "invconv"), out);
                s.coupling.visit_mut(&join(&p, "coupling"), out);
            }
        }
    }
}

/// `x − 0.5` as a `1 × h × w` tensor.
pub fn norm_to_tensor<T: Real>(map: &NormMap) -> Tensor<T> {
    let v = map.values().iter().map(|&v| T::of(v - MEAN_SHIFT)).collect();
    Tensor::from_vec(1, map.height(), map.width(), v).expect("shape")
}

/// Undo the mean shift and clamp into [0, 1]; returns the clamp count.
pub fn tensor_to_norm<T: Real>(x: &Tensor<T>) -> (NormMap, usize) {
    let mut clamped = 0;
    let v = x
        .data()
        .iter()
        .map(|v| {
            let u = v.f64() + MEAN_SHIFT;
            if u < 0.0 || u > 1.0 || u.is_nan() {
                clamped += 1;
            }
            if u.is_nan() {
                0.0
            } else {
                u.clamp(0.0, 1.0)
            }
        })
        .collect();
    (NormMap::from_values(x.width(), x.height(), v).expect("clamped"), clamped)
}
