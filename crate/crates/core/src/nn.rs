//! Named parameter storage and the convolution layers both networks are built
//! from.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{CrrnError, Result};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors. Values are reference counted so a
/// forward graph can borrow them without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor<f32>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<f32>) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, index: usize) -> &Tensor<f32> {
        &self.values[index]
    }

    /// Copy-on-write access; free when no graph still holds the value.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f32> {
        Arc::make_mut(&mut self.values[index])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &*self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Register every tensor as a graph leaf, in order.
    pub fn bind(&self, g: &Graph<f32>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| g.param_shared(v.clone(), trainable)).collect()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Overwrite every parameter from `source`, which must hold exactly the
    /// same names and shapes.
    pub fn assign(&mut self, mut source: HashMap<String, Tensor<f32>>) -> Result<()> {
        for i in 0..self.names.len() {
            let name = &self.names[i];
            let t = source
                .remove(name)
                .ok_or_else(|| CrrnError::Integrity(format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(CrrnError::Integrity(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t);
        }
        if let Some(extra) = source.keys().next() {
            return Err(CrrnError::Integrity(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Weight initialisation source.
pub enum Init {
    /// He-normal weights, zero biases.
    Kaiming(ChaCha8Rng),
    /// Every parameter zero.
    Zeros,
}

impl Init {
    pub fn kaiming(seed: u64) -> Self {
        Init::Kaiming(ChaCha8Rng::seed_from_u64(seed))
    }

    fn normal(&mut self, shape: [usize; 4], std: f64) -> Tensor<f32> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Kaiming(rng) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                let n = shape.iter().product();
                Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng) as f32).collect())
            }
        }
    }
}

/// `k x k` convolution with bias, "same" padding at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: &mut Init,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w = init.normal([out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt());
        let weight = ps.push(format!("{name}.weight"), w);
        let bias = ps.push(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn forward(&self, g: &Graph<f32>, vars: &[Var], x: Var) -> Var {
        g.conv2d(x, vars[self.weight], Some(vars[self.bias]), self.stride, self.pad())
    }

    pub fn forward_relu(&self, g: &Graph<f32>, vars: &[Var], x: Var) -> Var {
        g.relu(self.forward(g, vars, x))
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvT {
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvT {
    pub const STRIDE: usize = 2;

    /// `fan_scale` divides the He variance, for branches whose outputs are
    /// summed.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        fan_scale: f64,
        init: &mut Init,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        // Average number of taps feeding one output pixel.
        let fan_in = (in_channels * kernel * kernel) as f64 / (Self::STRIDE * Self::STRIDE) as f64;
        let std = (2.0 / (fan_in.max(1.0) * fan_scale)).sqrt();
        let w = init.normal([in_channels, out_channels, kernel, kernel], std);
        let weight = ps.push(format!("{name}.weight"), w);
        let bias = ps.push(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn forward(&self, g: &Graph<f32>, vars: &[Var], x: Var) -> Var {
        g.conv_transpose2d(x, vars[self.weight], Some(vars[self.bias]), Self::STRIDE, self.pad(), 1)
    }
}

pub(crate) fn check_channels(g: &Graph<f32>, x: Var, expected: usize, what: &str) -> Result<()> {
    let c = g.shape(x)[1];
    if c != expected {
        return Err(CrrnError::Dimension(format!("{what}: expected {expected} channels, got {c}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convt_doubles_size_for_every_odd_kernel() {
        for k in [1, 3, 5, 7] {
            let mut ps = ParamSet::new();
            let layer = ConvT::new(&mut ps, "t", 2, 3, k, 1.0, &mut Init::kaiming(1));
            let g = Graph::new();
            let vars = ps.bind(&g, false);
            let x = g.constant(Tensor::full([1, 2, 3, 5], 0.5));
            assert_eq!(g.shape(layer.forward(&g, &vars, x)), [1, 3, 6, 10], "k={k}");
        }
    }

    #[test]
    fn assign_rejects_mismatch() {
        let mut ps = ParamSet::new();
        Conv::new(&mut ps, "c", 2, 3, 3, 1, &mut Init::Zeros);
        let mut src: HashMap<_, _> = ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(ps.clone().assign(src.clone()).is_ok());
        src.insert("c.bias".into(), Tensor::zeros([1, 4, 1, 1]));
        assert!(matches!(ps.assign(src), Err(CrrnError::Integrity(_))));
    }

    #[test]
    fn kaiming_is_seeded() {
        let build = |seed| {
            let mut ps = ParamSet::new();
            Conv::new(&mut ps, "c", 4, 8, 3, 1, &mut Init::kaiming(seed));
            ps
        };
        assert!(build(3).bitwise_eq(&build(3)));
        assert!(!build(3).bitwise_eq(&build(4)));
        assert_eq!(build(3).digest(), build(3).digest());
    }
}
