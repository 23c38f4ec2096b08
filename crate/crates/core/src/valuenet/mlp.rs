//! Fully-connected network with ReLU hidden layers and a linear output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer. `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs {
            return Err(Error::DimensionMismatch { expected: self.inputs * self.outputs, got: self.weights.len() });
        }
        if self.biases.len() != self.outputs {
            return Err(Error::DimensionMismatch { expected: self.outputs, got: self.biases.len() });
        }
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite network parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Post-activation values of every layer from the last cached forward pass;
/// `values[0]` is the input.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    values: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.values.last().map_or(&[], Vec::as_slice)
    }
}

/// Gradient accumulator shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(&mut l.biases).for_each(|g| *g *= c);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases)).fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub(crate) fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let j = 4 * k;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// He-uniform initialisation for hidden layers, a narrower uniform range
    /// for the output layer, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let n_layers = net.layers.len();
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let fan_in = layer.inputs.max(1) as f64;
            let bound = if k + 1 == n_layers { (1.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer dims {dims:?}")));
        }
        Ok(Self { layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for l in &layers {
            l.check()?;
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch { expected: w[0].outputs, got: w[1].inputs });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(&mut l.biases).for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            x = affine(l, &x, k < last);
        }
        Ok(x)
    }

    /// Forward pass that keeps every activation for [`Mlp::backward`].
    pub fn forward_cached(&self, input: &[f64], acts: &mut Activations) -> Result<()> {
        self.check_input(input)?;
        acts.values.resize_with(self.layers.len() + 1, Vec::new);
        acts.values[0].clear();
        acts.values[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let (done, rest) = acts.values.split_at_mut(k + 1);
            let out = &mut rest[0];
            out.clear();
            out.extend(l.biases.iter().enumerate().map(|(o, b)| {
                let z = b + dot(l.row(o), &done[k]);
                if k < last { z.max(0.0) } else { z }
            }));
        }
        Ok(())
    }

    /// Accumulates `d loss / d params` into `grads`, given the cached forward
    /// pass and `d loss / d output`.
    pub fn backward(&self, acts: &Activations, grad_out: &[f64], grads: &mut Gradients) -> Result<()> {
        if grad_out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: grad_out.len() });
        }
        if acts.values.len() != self.layers.len() + 1 {
            return Err(Error::InvalidConfig("backward called without a cached forward pass".into()));
        }
        let mut delta = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let g = &mut grads.layers[k];
            let x = &acts.values[k];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(&mut g.weights[o * l.inputs..(o + 1) * l.inputs], d, x);
                    g.biases[o] += d;
                }
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(&mut prev, d, l.row(o));
                }
            }
            // x holds ReLU outputs of the previous layer
            for (p, &xv) in prev.iter_mut().zip(x) {
                if xv <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }
}

/// Activations of a row-major batch; `values[k]` is `rows x dims[k]`.
#[derive(Debug, Clone, Default)]
pub struct BatchActivations {
    rows: usize,
    values: Vec<Vec<f64>>,
}

impl BatchActivations {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `rows x output_dim`, row-major.
    pub fn output(&self) -> &[f64] {
        self.values.last().map_or(&[], Vec::as_slice)
    }
}

/// `c (m x n) = beta * c + a (m x k) * b^T`, where `b` is stored `n x k` row-major.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    // SAFETY: slice lengths are asserted to cover every strided access.
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m x n) += a^T * b`, where `a` is `k x m` and `b` is `k x n`, both row-major.
fn gemm_atb_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: as above.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c (m x n) = a (m x k) * b`, with `b` stored `k x n` row-major.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: as above.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Mlp {
    /// Forward pass over `rows` inputs stored row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], rows: usize, acts: &mut BatchActivations) -> Result<()> {
        let d0 = self.input_dim();
        if inputs.len() != rows * d0 {
            return Err(Error::DimensionMismatch { expected: rows * d0, got: inputs.len() });
        }
        acts.rows = rows;
        acts.values.resize_with(self.layers.len() + 1, Vec::new);
        acts.values[0].clear();
        acts.values[0].extend_from_slice(inputs);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let (done, rest) = acts.values.split_at_mut(k + 1);
            let out = &mut rest[0];
            out.clear();
            for _ in 0..rows {
                out.extend_from_slice(&l.biases);
            }
            gemm_abt(rows, l.inputs, l.outputs, &done[k], &l.weights, 1.0, out);
            if k < last {
                out.iter_mut().for_each(|z| *z = z.max(0.0));
            }
        }
        Ok(())
    }

    /// Batched counterpart of [`Mlp::backward`]; `grad_out` is `rows x output_dim`.
    pub fn backward_batch(&self, acts: &BatchActivations, grad_out: &[f64], grads: &mut Gradients) -> Result<()> {
        let rows = acts.rows;
        if grad_out.len() != rows * self.output_dim() {
            return Err(Error::DimensionMismatch { expected: rows * self.output_dim(), got: grad_out.len() });
        }
        if acts.values.len() != self.layers.len() + 1 {
            return Err(Error::InvalidConfig("backward called without a cached forward pass".into()));
        }
        let mut delta = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let g = &mut grads.layers[k];
            let x = &acts.values[k];
            gemm_atb_acc(l.outputs, rows, l.inputs, &delta, x, &mut g.weights);
            for r in 0..rows {
                axpy(&mut g.biases, 1.0, &delta[r * l.outputs..(r + 1) * l.outputs]);
            }
            if k == 0 {
                break;
            }
            let mut prev = vec![0.0; rows * l.inputs];
            gemm_ab(rows, l.outputs, l.inputs, &delta, &l.weights, &mut prev);
            for (p, &xv) in prev.iter_mut().zip(x) {
                if xv <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }
}

fn affine(l: &Layer, x: &[f64], relu: bool) -> Vec<f64> {
    l.biases
        .iter()
        .enumerate()
        .map(|(o, b)| {
            let z = b + dot(l.row(o), x);
            if relu { z.max(0.0) } else { z }
        })
        .collect()
}

/// Largest relative error between the analytic gradient of
/// `loss(params) = sum_k c_k * out_k(input)` and central differences with step `h`.
pub fn gradient_check(net: &Mlp, input: &[f64], coeffs: &[f64], h: f64) -> Result<f64> {
    let mut acts = Activations::default();
    net.forward_cached(input, &mut acts)?;
    let mut grads = net.zero_gradients();
    net.backward(&acts, coeffs, &mut grads)?;
    let analytic = grads.flat();

    let loss = |p: &Mlp| -> Result<f64> { Ok(dot(&p.forward(input)?, coeffs)) };
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[j] = base[j] + h;
        probe.set_flat_params(&p)?;
        let up = loss(&probe)?;
        p[j] = base[j] - h;
        probe.set_flat_params(&p)?;
        let down = loss(&probe)?;
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seeder;

    /// Textbook forward pass with plain nested loops.
    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let n = net.layers().len();
        for (k, l) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut z = l.biases[o];
                for i in 0..l.inputs {
                    z += l.weights[o * l.inputs + i] * cur[i];
                }
                next[o] = if k + 1 < n && z < 0.0 { 0.0 } else { z };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut l = Layer::zeros(3, 3);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_layers(vec![l]).unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn matches_naive_forward() {
        let mut rng = Seeder::new(11).rng();
        for dims in [vec![7, 16, 16, 1], vec![3, 5, 4], vec![10, 2]] {
            let net = Mlp::new(&dims, &mut rng).unwrap();
            for _ in 0..20 {
                let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = net.forward(&x).unwrap();
                let want = naive_forward(&net, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
                }
                let mut acts = Activations::default();
                net.forward_cached(&x, &mut acts).unwrap();
                assert_eq!(acts.output(), got.as_slice());
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let net = Mlp::zeros(&[2, 3]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::from_layers(vec![Layer::zeros(2, 3), Layer::zeros(4, 1)]).is_err());
    }

    #[test]
    fn finite_difference_agreement() {
        let mut rng = Seeder::new(5).rng();
        for dims in [vec![4, 16, 16, 1], vec![6, 8, 3], vec![3, 2], vec![5, 12, 9, 4]] {
            let net = Mlp::new(&dims, &mut rng).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = gradient_check(&net, &x, &c, 1e-5).unwrap();
            assert!(err < 1e-4, "{dims:?}: {err}");
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = Seeder::new(13).rng();
        let net = Mlp::new(&[7, 16, 16, 2], &mut rng).unwrap();
        let rows = 9;
        let x: Vec<f64> = (0..rows * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gout: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ba = BatchActivations::default();
        net.forward_batch(&x, rows, &mut ba).unwrap();
        let mut gb = net.zero_gradients();
        net.backward_batch(&ba, &gout, &mut gb).unwrap();
        let mut gs = net.zero_gradients();
        for r in 0..rows {
            let mut a = Activations::default();
            net.forward_cached(&x[r * 7..(r + 1) * 7], &mut a).unwrap();
            for (u, v) in a.output().iter().zip(&ba.output()[r * 2..(r + 1) * 2]) {
                assert!((u - v).abs() < 1e-12);
            }
            net.backward(&a, &gout[r * 2..(r + 1) * 2], &mut gs).unwrap();
        }
        for (u, v) in gb.flat().iter().zip(gs.flat()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut rng = Seeder::new(2).rng();
        let net = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let mut other = Mlp::zeros(&[3, 4, 2]).unwrap();
        other.set_flat_params(&net.flat_params()).unwrap();
        assert_eq!(net, other);
        assert_eq!(net.n_params(), 3 * 4 + 4 + 4 * 2 + 2);
    }
}
