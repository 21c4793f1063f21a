use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;

/// One named parameter block. Non-trainable blocks (the fixed permutation,
/// the LU sign vector) travel with the model and the checkpoint but never
/// receive updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], trainable: true }
    }

    pub fn fixed(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape: shape.to_vec(), data, trainable: false }
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::of(z * std);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            trainable: self.trainable,
        }
    }
}

/// Structured access to every parameter block under a stable dotted name.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
