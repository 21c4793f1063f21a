//! Conditional affine coupling. The first channel half passes through and,
//! together with the conditioning features, predicts a scale and shift for
//! the second half.

use rand::Rng;

use super::conv::{Conv2d, ConvCache};
use super::param::{join, Param, Params};
use super::{FlowError, Real, Tensor};

/// Soft bound on the log-scale: `5·tanh(a/5)` keeps it inside (−5, 5).
pub const LOG_SCALE_BOUND: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    /// Zero at construction so a fresh coupling is the identity.
    pub conv3: Conv2d<T>,
}

struct NetTrace<T> {
    c1: ConvCache<T>,
    h1: Tensor<T>,
    c2: ConvCache<T>,
    h2: Tensor<T>,
    c3: ConvCache<T>,
    log_s: Tensor<T>,
    shift: Tensor<T>,
}

impl<T: Real> Coupling<T> {
    pub fn new(channels: usize, cond_ch: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self, FlowError> {
        if channels % 2 != 0 {
            return Err(FlowError::Shape(format!("coupling needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            conv1: Conv2d::lecun(half + cond_ch, hidden, 3, rng),
            conv2: Conv2d::lecun(hidden, hidden, 1, rng),
            conv3: Conv2d::zeros(hidden, channels, 3),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |c: &Conv2d<T>| Conv2d::zeros(c.cin(), c.cout(), c.kernel());
        Self { conv1: z(&self.conv1), conv2: z(&self.conv2), conv3: z(&self.conv3) }
    }

    fn half(&self) -> usize {
        self.conv3.cout() / 2
    }

    fn check(&self, x: &Tensor<T>) -> Result<(), FlowError> {
        if x.channels() % 2 != 0 || x.channels() != self.conv3.cout() {
            return Err(FlowError::Shape(format!(
                "coupling built for {} channels got {}",
                self.conv3.cout(),
                x.channels()
            )));
        }
        Ok(())
    }

    fn net(&self, x1: &Tensor<T>, cond: &Tensor<T>) -> Result<NetTrace<T>, FlowError> {
        let inp = Tensor::concat_channels(x1, cond)?;
        let (p1, c1) = self.conv1.forward_cached(&inp);
        let h1 = p1.map(relu);
        let (p2, c2) = self.conv2.forward_cached(&h1);
        let h2 = p2.map(relu);
        let (out, c3) = self.conv3.forward_cached(&h2);
        let (a, shift) = out.split_channels(self.half());
        let bound = T::of(LOG_SCALE_BOUND);
        let log_s = a.map(|v| bound * (v / bound).tanh());
        Ok(NetTrace { c1, h1, c2, h2, c3, log_s, shift })
    }

    pub fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>) -> Result<(Tensor<T>, T), FlowError> {
        self.check(x)?;
        let (x1, mut x2) = x.split_channels(self.half());
        let t = self.net(&x1, cond)?;
        for ((v, &ls), &sh) in x2.data_mut().iter_mut().zip(t.log_s.data()).zip(t.shift.data()) {
            *v = ls.exp() * *v + sh;
        }
        let logdet = t.log_s.data().iter().copied().sum();
        Ok((Tensor::concat_channels(&x1, &x2)?, logdet))
    }

    pub fn inverse(&self, y: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>, FlowError> {
        self.check(y)?;
        let (y1, mut y2) = y.split_channels(self.half());
        let t = self.net(&y1, cond)?;
        for ((v, &ls), &sh) in y2.data_mut().iter_mut().zip(t.log_s.data()).zip(t.shift.data()) {
            *v = (*v - sh) * (-ls).exp();
        }
        Tensor::concat_channels(&y1, &y2)
    }

    /// Returns `(x, dL/dx)` and accumulates parameter gradients plus the
    /// gradient with respect to the conditioning features into `g_cond`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        y: &Tensor<T>,
        x: Option<&Tensor<T>>,
        g_y: &Tensor<T>,
        cond: &Tensor<T>,
        ld_grad: T,
        grads: &mut Self,
        g_cond: &mut Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), FlowError> {
        self.check(y)?;
        let half = self.half();
        let (y1, y2) = y.split_channels(half);
        let t = self.net(&y1, cond)?;
        let x2 = match x {
            Some(x) => x.split_channels(half).1,
            None => {
                let mut x2 = y2.clone();
                for ((v, &ls), &sh) in x2.data_mut().iter_mut().zip(t.log_s.data()).zip(t.shift.data()) {
                    *v = (*v - sh) * (-ls).exp();
                }
                x2
            }
        };
        let (g_y1, g_y2) = g_y.split_channels(half);

        let mut g_x2 = g_y2.clone();
        let mut g_a = g_y2.clone();
        let bound = T::of(LOG_SCALE_BOUND);
        for i in 0..g_x2.len() {
            let ls = t.log_s.data()[i];
            let s = ls.exp();
            let gy = g_y2.data()[i];
            g_x2.data_mut()[i] = gy * s;
            let g_ls = gy * x2.data()[i] * s + ld_grad;
            let r = ls / bound;
            g_a.data_mut()[i] = g_ls * (T::one() - r * r);
        }
        let g_out = Tensor::concat_channels(&g_a, &g_y2)?;

        let mut g_h2 = self.conv3.backward(&t.c3, &g_out, &mut grads.conv3, true).expect("input grad");
        relu_mask(&mut g_h2, &t.h2);
        let mut g_h1 = self.conv2.backward(&t.c2, &g_h2, &mut grads.conv2, true).expect("input grad");
        relu_mask(&mut g_h1, &t.h1);
        let g_inp = self.conv1.backward(&t.c1, &g_h1, &mut grads.conv1, true).expect("input grad");
        let (g_x1_net, g_c) = g_inp.split_channels(half);
        for (a, &b) in g_cond.data_mut().iter_mut().zip(g_c.data()) {
            *a += b;
        }
        let mut g_x1 = g_y1;
        for (a, &b) in g_x1.data_mut().iter_mut().zip(g_x1_net.data()) {
            *a += b;
        }
        Ok((Tensor::concat_channels(&y1, &x2)?, Tensor::concat_channels(&g_x1, &g_x2)?))
    }
}

fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Zero the gradient where the post-ReLU activation is zero.
pub(crate) fn relu_mask<T: Real>(g: &mut Tensor<T>, act: &Tensor<T>) {
    for (gv, &a) in g.data_mut().iter_mut().zip(act.data()) {
        if a <= T::zero() {
            *gv = T::zero();
        }
    }
}

impl<T: Real> Params<T> for Coupling<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.conv3.visit(&join(prefix, "conv3"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), out);
        self.conv2.visit_mut(&join(prefix, "conv2"), out);
        self.conv3.visit_mut(&join(prefix, "conv3"), out);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::invconv::tests::log_abs_det;
    use super::*;

    fn randomize(c: &mut Coupling<f64>, rng: &mut ChaCha8Rng, std: f64) {
        let mut blocks = Vec::new();
        c.visit_mut("", &mut blocks);
        for (_, p) in blocks {
            for v in &mut p.data {
                *v += rng.random_range(-std..std);
            }
        }
    }

    #[test]
    fn fresh_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Coupling::<f32>::new(4, 3, 8, &mut rng).unwrap();
        let x = Tensor::from_vec(4, 3, 3, (0..36).map(|v| v as f32 * 0.1).collect()).unwrap();
        let cond = Tensor::from_vec(3, 3, 3, (0..27).map(|v| (v as f32).cos()).collect()).unwrap();
        let (y, ld) = c.forward(&x, &cond).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(Coupling::<f32>::new(3, 1, 4, &mut rng), Err(FlowError::Shape(_))));
    }

    #[test]
    fn first_half_passes_bitwise_and_logdet_matches_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = Coupling::<f64>::new(2, 1, 6, &mut rng).unwrap();
        randomize(&mut c, &mut rng, 0.4);
        let x = Tensor::from_vec(2, 2, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cond = Tensor::from_vec(1, 2, 2, vec![0.3, -0.1, 0.8, 0.0]).unwrap();
        let (y, ld) = c.forward(&x, &cond).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[..4]);

        let n = x.len();
        let eps = 1e-6;
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let yp = c.forward(&xp, &cond).unwrap().0;
            let ym = c.forward(&xm, &cond).unwrap().0;
            for i in 0..n {
                jac[i * n + j] = (yp.data()[i] - ym.data()[i]) / (2.0 * eps);
            }
        }
        assert!((ld - log_abs_det(&jac, n)).abs() < 1e-8);
        assert!(c.inverse(&y, &cond).unwrap().max_abs_diff(&x) < 1e-14);
    }
}
