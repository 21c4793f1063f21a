//! Invertible 1×1 convolution in LU form, `W = P·L·(U + diag(sign·exp(log|s| + δ)))`
//! with `δ` a projection of the pooled conditioning features.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::param::{join, Param, Params};
use super::real::{matmul, Op};
use super::{FlowError, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct InvConv<T> {
    /// Only the strictly lower triangle is used; the unit diagonal is implicit.
    pub lower: Param<T>,
    /// Only the strictly upper triangle is used.
    pub upper: Param<T>,
    pub log_diag: Param<T>,
    /// Fixed ±1.
    pub sign: Param<T>,
    /// Fixed row permutation: row `i` of `W` is row `perm[i]` of `L·U`.
    pub perm: Param<T>,
    /// `[channels, cond_hidden]` projection onto `log_diag`.
    pub cond: Param<T>,
}

struct Factors<T> {
    lower: Vec<T>,
    upper: Vec<T>,
    diag: Vec<T>,
    log_diag: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Real> InvConv<T> {
    pub fn identity(channels: usize, cond_hidden: usize) -> Self {
        let c = channels;
        Self {
            lower: Param::zeros(&[c, c]),
            upper: Param::zeros(&[c, c]),
            log_diag: Param::zeros(&[c]),
            sign: Param::fixed(&[c], vec![T::one(); c]),
            perm: Param::fixed(&[c], (0..c).map(|i| T::of(i as f64)).collect()),
            cond: Param::zeros(&[c, cond_hidden]),
        }
    }

    /// LU factors of a random rotation with a random row permutation.
    pub fn random_rotation(channels: usize, cond_hidden: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        let mut q: Vec<f64> = (0..c * c).map(|_| rng.sample(StandardNormal)).collect();
        gram_schmidt(&mut q, c);
        let mut rows: Vec<usize> = (0..c).collect();
        rows.shuffle(rng);
        let w: Vec<f64> = (0..c * c).map(|i| q[rows[i / c] * c + i % c]).collect();
        let (piv, lu) = lu_decompose(&w, c);
        let mut out = Self::identity(c, cond_hidden);
        let mut perm = vec![0usize; c];
        for (i, &p) in piv.iter().enumerate() {
            perm[p] = i;
        }
        for i in 0..c {
            for j in 0..c {
                let v = T::of(lu[i * c + j]);
                if j < i {
                    out.lower.data[i * c + j] = v;
                } else if j > i {
                    out.upper.data[i * c + j] = v;
                }
            }
            let d = lu[i * c + i];
            out.log_diag.data[i] = T::of(d.abs().ln());
            out.sign.data[i] = T::of(d.signum());
            out.perm.data[i] = T::of(perm[i] as f64);
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.log_diag.len()
    }

    fn factors(&self, pooled: &[T]) -> Factors<T> {
        let c = self.channels();
        let hc = pooled.len();
        let mut lower = vec![T::zero(); c * c];
        let mut upper = vec![T::zero(); c * c];
        let mut diag = vec![T::zero(); c];
        let mut log_diag = self.log_diag.data.clone();
        for i in 0..c {
            for (h, &p) in pooled.iter().enumerate() {
                log_diag[i] += self.cond.data[i * hc + h] * p;
            }
            diag[i] = self.sign.data[i] * log_diag[i].exp();
            lower[i * c + i] = T::one();
            for j in 0..i {
                lower[i * c + j] = self.lower.data[i * c + j];
            }
            upper[i * c + i] = diag[i];
            for j in i + 1..c {
                upper[i * c + j] = self.upper.data[i * c + j];
            }
        }
        let perm = self.perm.data.iter().map(|v| v.f64() as usize).collect();
        Factors { lower, upper, diag, log_diag, perm }
    }

    /// The assembled `C×C` weight matrix, row-major.
    pub fn weight(&self, pooled: &[T]) -> Vec<T> {
        let f = self.factors(pooled);
        assemble(&f, self.channels())
    }

    pub fn forward(&self, x: &Tensor<T>, pooled: &[T]) -> Result<(Tensor<T>, T), FlowError> {
        let c = self.channels();
        let f = self.factors(pooled);
        let w = assemble(&f, c);
        let mut y = Tensor::zeros(c, x.height(), x.width());
        matmul(c, c, x.plane(), &w, Op::N, x.data(), Op::N, T::zero(), y.data_mut());
        let logdet = T::of(x.plane() as f64) * f.log_diag.iter().copied().sum::<T>();
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: &Tensor<T>, pooled: &[T]) -> Result<Tensor<T>, FlowError> {
        let c = self.channels();
        let f = self.factors(pooled);
        let winv = inverse_from_factors(&f, c);
        let mut x = Tensor::zeros(c, y.height(), y.width());
        matmul(c, c, y.plane(), &winv, Op::N, y.data(), Op::N, T::zero(), x.data_mut());
        Ok(x)
    }

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
        let c = self.channels();
        let hw = y.plane();
        let f = self.factors(pooled);
        let w = assemble(&f, c);
        let x = match x {
            Some(x) => x.clone(),
            None => {
                let winv = inverse_from_factors(&f, c);
                let mut x = Tensor::zeros(c, y.height(), y.width());
                matmul(c, c, hw, &winv, Op::N, y.data(), Op::N, T::zero(), x.data_mut());
                x
            }
        };
        let mut g_x = Tensor::zeros(c, y.height(), y.width());
        matmul(c, c, hw, &w, Op::T, g_y.data(), Op::N, T::zero(), g_x.data_mut());

        // dL/dW, then undo the permutation to get dL/d(L·U).
        let mut g_w = vec![T::zero(); c * c];
        matmul(c, hw, c, g_y.data(), Op::N, x.data(), Op::T, T::zero(), &mut g_w);
        let mut g_a = vec![T::zero(); c * c];
        for i in 0..c {
            let r = f.perm[i];
            g_a[r * c..(r + 1) * c].copy_from_slice(&g_w[i * c..(i + 1) * c]);
        }
        let mut g_l = vec![T::zero(); c * c];
        matmul(c, c, c, &g_a, Op::N, &f.upper, Op::T, T::zero(), &mut g_l);
        let mut g_u = vec![T::zero(); c * c];
        matmul(c, c, c, &f.lower, Op::T, &g_a, Op::N, T::zero(), &mut g_u);

        let hc = pooled.len();
        let hw_t = T::of(hw as f64);
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    grads.lower.data[i * c + j] += g_l[i * c + j];
                } else if j > i {
                    grads.upper.data[i * c + j] += g_u[i * c + j];
                }
            }
            let g_ld = g_u[i * c + i] * f.diag[i] + ld_grad * hw_t;
            grads.log_diag.data[i] += g_ld;
            for (h, &p) in pooled.iter().enumerate() {
                grads.cond.data[i * hc + h] += g_ld * p;
                g_pooled[h] += self.cond.data[i * hc + h] * g_ld;
            }
        }
        Ok((x, g_x))
    }
}

fn assemble<T: Real>(f: &Factors<T>, c: usize) -> Vec<T> {
    let mut a = vec![T::zero(); c * c];
    matmul(c, c, c, &f.lower, Op::N, &f.upper, Op::N, T::zero(), &mut a);
    let mut w = vec![T::zero(); c * c];
    for i in 0..c {
        let r = f.perm[i];
        w[i * c..(i + 1) * c].copy_from_slice(&a[r * c..(r + 1) * c]);
    }
    w
}

/// `W⁻¹ = U⁻¹·L⁻¹·Pᵀ` from triangular inverses.
fn inverse_from_factors<T: Real>(f: &Factors<T>, c: usize) -> Vec<T> {
    // Unit lower triangular inverse by forward substitution.
    let mut linv = vec![T::zero(); c * c];
    for j in 0..c {
        linv[j * c + j] = T::one();
        for i in j + 1..c {
            let mut acc = T::zero();
            for k in j..i {
                acc += f.lower[i * c + k] * linv[k * c + j];
            }
            linv[i * c + j] = -acc;
        }
    }
    // Upper triangular inverse by back substitution.
    let mut uinv = vec![T::zero(); c * c];
    for j in 0..c {
        uinv[j * c + j] = T::one() / f.upper[j * c + j];
        for i in (0..j).rev() {
            let mut acc = T::zero();
            for k in i + 1..=j {
                acc += f.upper[i * c + k] * uinv[k * c + j];
            }
            uinv[i * c + j] = -acc / f.upper[i * c + i];
        }
    }
    let mut m = vec![T::zero(); c * c];
    matmul(c, c, c, &uinv, Op::N, &linv, Op::N, T::zero(), &mut m);
    // Right-multiplying by Pᵀ moves column perm[i] of m to column i.
    let mut out = vec![T::zero(); c * c];
    for r in 0..c {
        for i in 0..c {
            out[r * c + i] = m[r * c + f.perm[i]];
        }
    }
    out
}

fn gram_schmidt(q: &mut [f64], c: usize) {
    for i in 0..c {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| q[i * c + k] * q[j * c + k]).sum();
            for k in 0..c {
                q[i * c + k] -= dot * q[j * c + k];
            }
        }
        let norm = (0..c).map(|k| q[i * c + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            q[i * c + k] /= norm;
        }
    }
}

/// Partial-pivot LU. Returns `piv` with `(L·U)[i] = w[piv[i]]` and the packed factors.
fn lu_decompose(w: &[f64], c: usize) -> (Vec<usize>, Vec<f64>) {
    let mut a = w.to_vec();
    let mut piv: Vec<usize> = (0..c).collect();
    for k in 0..c {
        let p = (k..c)
            .max_by(|&i, &j| a[i * c + k].abs().total_cmp(&a[j * c + k].abs()))
            .unwrap_or(k);
        if p != k {
            for j in 0..c {
                a.swap(k * c + j, p * c + j);
            }
            piv.swap(k, p);
        }
        for i in k + 1..c {
            let m = a[i * c + k] / a[k * c + k];
            a[i * c + k] = m;
            for j in k + 1..c {
                a[i * c + j] -= m * a[k * c + j];
            }
        }
    }
    (piv, a)
}

impl<T: Real> Params<T> for InvConv<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "lower"), &self.lower));
        out.push((join(prefix, "upper"), &self.upper));
        out.push((join(prefix, "log_diag"), &self.log_diag));
        out.push((join(prefix, "sign"), &self.sign));
        out.push((join(prefix, "perm"), &self.perm));
        out.push((join(prefix, "cond"), &self.cond));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "lower"), &mut self.lower));
        out.push((join(prefix, "upper"), &mut self.upper));
        out.push((join(prefix, "log_diag"), &mut self.log_diag));
        out.push((join(prefix, "sign"), &mut self.sign));
        out.push((join(prefix, "perm"), &mut self.perm));
        out.push((join(prefix, "cond"), &mut self.cond));
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// log|det| by Gaussian elimination with partial pivoting.
    pub(crate) fn log_abs_det(m: &[f64], n: usize) -> f64 {
        let mut a = m.to_vec();
        let mut acc = 0.0;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            let d = a[k * n + k];
            acc += d.abs().ln();
            for i in k + 1..n {
                let f = a[i * n + k] / d;
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        acc
    }

    #[test]
    fn identity_is_identity() {
        let ic = InvConv::<f64>::identity(4, 2);
        let x = Tensor::from_vec(4, 2, 2, (0..16).map(|v| v as f64).collect()).unwrap();
        let (y, ld) = ic.forward(&x, &[0.3, -0.2]).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn diagonal_weight_logdet() {
        let mut ic = InvConv::<f64>::identity(2, 0);
        ic.log_diag.data = vec![2f64.ln(), 0.5f64.ln()];
        let x = Tensor::from_vec(2, 3, 3, (0..18).map(|v| v as f64).collect()).unwrap();
        let (y, ld) = ic.forward(&x, &[]).unwrap();
        assert!(ld.abs() < 1e-12);
        assert!((y.get(0, 1, 1) - 8.0).abs() < 1e-12);
        assert!((y.get(1, 1, 1) - 6.5).abs() < 1e-12);
    }

    #[test]
    fn rotation_factors_reassemble() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ic = InvConv::<f64>::random_rotation(6, 0, &mut rng);
        let w = ic.weight(&[]);
        // Orthogonal: W·Wᵀ = I.
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| w[i * 6 + k] * w[j * 6 + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(ic.log_diag.data.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn random_weight_logdet_matches_dense_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let mut ic = InvConv::<f64>::random_rotation(8, 3, &mut rng);
            for p in [&mut ic.lower, &mut ic.upper, &mut ic.log_diag, &mut ic.cond] {
                for v in &mut p.data {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
            let pooled = [0.2, -0.7, 1.1];
            let x = Tensor::from_vec(8, 2, 3, (0..48).map(|v| (v as f64).sin()).collect()).unwrap();
            let (y, ld) = ic.forward(&x, &pooled).unwrap();
            let want = 6.0 * log_abs_det(&ic.weight(&pooled), 8);
            assert!((ld - want).abs() < 1e-10, "{ld} vs {want}");
            assert!(ic.inverse(&y, &pooled).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }
}
