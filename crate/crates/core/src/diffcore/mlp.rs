//! Fixed-pipeline multilayer perceptrons.
//!
//! Every layer is `affine -> [batch-norm] -> [ReLU]`. A residual network adds
//! its input to the output of the last layer and needs equal input and output
//! widths. Weights are stored `[in, out]` so a batch `x` maps to `x·W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation, batch_norm: bool) -> Self {
        Self {
            width,
            activation,
            batch_norm,
        }
    }

    pub fn linear(width: usize) -> Self {
        Self::new(width, Activation::None, false)
    }

    pub fn relu(width: usize) -> Self {
        Self::new(width, Activation::Relu, false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(input_width: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_width,
            layers,
            residual: false,
        }
    }

    pub fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    /// Hidden layers with ReLU (and optional batch-norm), linear output layer.
    pub fn feed_forward(input_width: usize, hidden: &[usize], output: usize, batch_norm: bool) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&w| LayerSpec::new(w, Activation::Relu, batch_norm))
            .collect();
        layers.push(LayerSpec::linear(output));
        Self::new(input_width, layers)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("an MLP needs at least one layer"));
        }
        if self.input_width == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        if self.residual && self.output_width() != self.input_width {
            return Err(Error::arg(format!(
                "residual MLP needs equal input and output widths, got {} and {}",
                self.input_width,
                self.output_width()
            )));
        }
        Ok(())
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.layers[layer - 1].width
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

/// Parameters of an MLP. Also used to hold their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Tensor::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    bn: l.bn.as_ref().map(|b| BatchNorm {
                        gamma: vec![0.0; b.gamma.len()],
                        beta: vec![0.0; b.beta.len()],
                        running_mean: vec![0.0; b.running_mean.len()],
                        running_var: vec![0.0; b.running_var.len()],
                    }),
                })
                .collect(),
        }
    }

    /// Trainable slices tagged with their layer index, in a fixed order.
    /// Batch-norm running statistics are not trainable and are skipped.
    pub fn groups(&self) -> Vec<(usize, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((i, l.weight.data()));
            out.push((i, l.bias.as_slice()));
            if let Some(bn) = &l.bn {
                out.push((i, bn.gamma.as_slice()));
                out.push((i, bn.beta.as_slice()));
            }
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(usize, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((i, l.weight.data_mut()));
            out.push((i, l.bias.as_mut_slice()));
            if let Some(bn) = &mut l.bn {
                out.push((i, bn.gamma.as_mut_slice()));
                out.push((i, bn.beta.as_mut_slice()));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// All trainable values concatenated in [`ParamSet::groups`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups().into_iter().flat_map(|(_, g)| g.iter().copied()).collect()
    }

    /// Overwrite trainable values from a flat vector produced by [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, g) in self.groups_mut() {
            g.copy_from_slice(&flat[off..off + g.len()]);
            off += g.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor,
    bn: Option<BnCache>,
    /// Post-activation output, used for the ReLU mask.
    output: Tensor,
}

/// Everything [`Mlp::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    widths: Vec<usize>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// An MLP: its fixed architecture plus current parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fan_in = spec.fan_in(i);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * l.width).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams {
                    weight: Tensor::from_vec(fan_in, l.width, w).expect("sized above"),
                    bias: (0..l.width).map(|_| rng.random_range(-bound..bound)).collect(),
                    bn: l.batch_norm.then(|| BatchNorm::new(l.width)),
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: ParamSet { layers },
        })
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        if params.layers.len() != spec.layers.len() {
            return Err(Error::dim(format!(
                "{} parameter layers for a {}-layer spec",
                params.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (l, p)) in spec.layers.iter().zip(&params.layers).enumerate() {
            let fan_in = spec.fan_in(i);
            if p.weight.shape() != [fan_in, l.width] || p.bias.len() != l.width {
                return Err(Error::dim(format!("layer {i} parameters do not match its spec")));
            }
            if p.bn.is_some() != l.batch_norm {
                return Err(Error::dim(format!("layer {i} batch-norm parameters do not match its spec")));
            }
        }
        Ok(Self { spec, params })
    }

    /// Single affine layer initialized to the identity map.
    pub fn identity_linear(width: usize) -> Self {
        let spec = MlpSpec::new(width, vec![LayerSpec::linear(width)]);
        let params = ParamSet {
            layers: vec![LayerParams {
                weight: Tensor::identity(width),
                bias: vec![0.0; width],
                bn: None,
            }],
        };
        Self { spec, params }
    }

    /// Zero the last layer's weights and bias. A residual network then starts
    /// as the identity map.
    pub fn zero_last_layer(&mut self) {
        if let Some(l) = self.params.layers.last_mut() {
            l.weight.data_mut().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.spec.input_width {
            return Err(Error::dim(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.spec.input_width
            )));
        }
        Ok(())
    }

    /// Forward pass. Train mode uses batch statistics and updates batch-norm
    /// running statistics; eval mode uses the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut h = x.clone();
        for (spec, p) in self.spec.layers.iter().zip(self.params.layers.iter_mut()) {
            let mut a = h.matmul(&p.weight)?;
            add_bias(&mut a, &p.bias);
            let bn_cache = p.bn.as_mut().map(|bn| batch_norm_forward(&mut a, bn, mode));
            if spec.activation == Activation::Relu {
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            caches.push(LayerCache {
                input: h,
                bn: bn_cache,
                output: a.clone(),
            });
            h = a;
        }
        if self.spec.residual {
            h.add_assign(x)?;
        }
        let cache = ForwardCache {
            mode,
            widths: self.spec.layers.iter().map(|l| l.width).collect(),
            layers: caches,
        };
        Ok((h, cache))
    }

    /// Eval-mode forward without a cache. Pure: identical inputs give
    /// bitwise-identical outputs.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (spec, p) in self.spec.layers.iter().zip(&self.params.layers) {
            let mut a = h.matmul(&p.weight)?;
            add_bias(&mut a, &p.bias);
            if let Some(bn) = &p.bn {
                let c = a.cols();
                for row in a.data_mut().chunks_mut(c) {
                    for j in 0..c {
                        let inv = 1.0 / (bn.running_var[j] + BN_EPS).sqrt();
                        row[j] = bn.gamma[j] * (row[j] - bn.running_mean[j]) * inv + bn.beta[j];
                    }
                }
            }
            if spec.activation == Activation::Relu {
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = a;
        }
        if self.spec.residual {
            h.add_assign(x)?;
        }
        Ok(h)
    }

    /// Reverse pass: parameter gradients and the gradient on the input.
    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor) -> Result<(ParamSet, Tensor)> {
        let widths: Vec<usize> = self.spec.layers.iter().map(|l| l.width).collect();
        if cache.widths != widths {
            return Err(Error::state("forward cache was produced by a different network"));
        }
        let out_rows = cache.layers.last().map_or(0, |l| l.output.rows());
        if dy.rows() != out_rows || dy.cols() != self.output_width() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match output [{out_rows}, {}]",
                dy.shape(),
                self.output_width()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut d = dy.clone();
        for (i, (spec, lc)) in self.spec.layers.iter().zip(&cache.layers).enumerate().rev() {
            if spec.activation == Activation::Relu {
                d.data_mut()
                    .iter_mut()
                    .zip(lc.output.data())
                    .for_each(|(g, &o)| {
                        if o <= 0.0 {
                            *g = 0.0
                        }
                    });
            }
            if let (Some(bn_cache), Some(bn)) = (&lc.bn, &self.params.layers[i].bn) {
                let g = grads.layers[i].bn.as_mut().expect("mirrors params");
                d = batch_norm_backward(&d, bn, bn_cache, cache.mode, g);
            }
            let gl = &mut grads.layers[i];
            gl.weight = lc.input.matmul_tn(&d)?;
            gl.bias = d.sum_rows();
            d = d.matmul_nt(&self.params.layers[i].weight)?;
        }
        if self.spec.residual {
            d.add_assign(dy)?;
        }
        Ok((grads, d))
    }
}

fn add_bias(a: &mut Tensor, bias: &[f64]) {
    let c = a.cols();
    for row in a.data_mut().chunks_mut(c) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn batch_norm_forward(a: &mut Tensor, bn: &mut BatchNorm, mode: Mode) -> BnCache {
    let (n, c) = (a.rows(), a.cols());
    let (mean, var) = match mode {
        Mode::Train => {
            let mean = a.mean_rows();
            let mut var = vec![0.0; c];
            for row in a.iter_rows() {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n.max(1) as f64);
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for j in 0..c {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * var[j] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = Tensor::zeros(n, c);
    for i in 0..n {
        let (src, dst) = (a.row_mut(i), x_hat.row_mut(i));
        for j in 0..c {
            dst[j] = (src[j] - mean[j]) * inv_std[j];
            src[j] = bn.gamma[j] * dst[j] + bn.beta[j];
        }
    }
    BnCache { x_hat, inv_std }
}

fn batch_norm_backward(d: &Tensor, bn: &BatchNorm, cache: &BnCache, mode: Mode, g: &mut BatchNorm) -> Tensor {
    let (n, c) = (d.rows(), d.cols());
    let mut sum_d = vec![0.0; c];
    let mut sum_dx = vec![0.0; c];
    for i in 0..n {
        let (dr, xr) = (d.row(i), cache.x_hat.row(i));
        for j in 0..c {
            g.gamma[j] += dr[j] * xr[j];
            g.beta[j] += dr[j];
            let dxh = dr[j] * bn.gamma[j];
            sum_d[j] += dxh;
            sum_dx[j] += dxh * xr[j];
        }
    }
    let mut out = Tensor::zeros(n, c);
    let nf = n as f64;
    for i in 0..n {
        let (dr, xr, o) = (d.row(i), cache.x_hat.row(i), out.row_mut(i));
        for j in 0..c {
            let dxh = dr[j] * bn.gamma[j];
            o[j] = match mode {
                Mode::Train => cache.inv_std[j] * (dxh - sum_d[j] / nf - xr[j] * sum_dx[j] / nf),
                Mode::Eval => cache.inv_std[j] * dxh,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::rng::stream;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[99]);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn identity_layer() {
        let mut m = Mlp::identity_linear(2);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (y, _) = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_clamps() {
        let spec = MlpSpec::new(1, vec![LayerSpec::relu(1)]);
        let params = ParamSet {
            layers: vec![LayerParams {
                weight: Tensor::from_rows(&[vec![2.0]]).unwrap(),
                bias: vec![1.0],
                bn: None,
            }],
        };
        let m = Mlp::from_parts(spec, params).unwrap();
        let y = m.forward_eval(&Tensor::from_rows(&[vec![-3.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn two_layer_matches_straight_line_oracle() {
        let spec = MlpSpec::feed_forward(4, &[5], 3, false);
        let m = Mlp::new(spec, &mut stream(3, &[])).unwrap();
        let x = randn(6, 4, 4);
        let y = m.forward_eval(&x).unwrap();
        let (l0, l1) = (&m.params.layers[0], &m.params.layers[1]);
        for i in 0..6 {
            let mut h = [0.0; 5];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = l0.bias[j];
                for k in 0..4 {
                    s += x.row(i)[k] * l0.weight.row(k)[j];
                }
                *hj = s.max(0.0);
            }
            for j in 0..3 {
                let mut s = l1.bias[j];
                for (k, hk) in h.iter().enumerate() {
                    s += hk * l1.weight.row(k)[j];
                }
                assert!((s - y.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_backward_by_hand() {
        let spec = MlpSpec::new(1, vec![LayerSpec::linear(1)]);
        let params = ParamSet {
            layers: vec![LayerParams {
                weight: Tensor::from_rows(&[vec![3.0]]).unwrap(),
                bias: vec![0.0],
                bn: None,
            }],
        };
        let mut m = Mlp::from_parts(spec, params).unwrap();
        let x = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let (_, cache) = m.forward(&x, Mode::Train).unwrap();
        let (g, dx) = m.backward(&cache, &Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weight.data(), &[2.0]);
        assert_eq!(dx.data(), &[3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = MlpSpec::feed_forward(3, &[4], 2, true);
        let mut m = Mlp::new(spec, &mut stream(1, &[])).unwrap();
        let x = randn(5, 3, 2);
        let (_, cache) = m.forward(&x, Mode::Train).unwrap();
        let (g, dx) = m.backward(&cache, &Tensor::zeros(5, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut a = Mlp::new(MlpSpec::feed_forward(3, &[4], 2, false), &mut stream(1, &[])).unwrap();
        let b = Mlp::new(MlpSpec::feed_forward(3, &[6], 2, false), &mut stream(1, &[])).unwrap();
        let (_, cache) = a.forward(&randn(2, 3, 1), Mode::Train).unwrap();
        assert!(matches!(b.backward(&cache, &Tensor::zeros(2, 2)), Err(Error::State(_))));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut a = Mlp::new(MlpSpec::feed_forward(3, &[4], 2, false), &mut stream(1, &[])).unwrap();
        assert!(matches!(a.forward(&randn(2, 5, 1), Mode::Eval), Err(Error::Dimension(_))));
    }

    fn finite_difference_check(spec: MlpSpec, mode: Mode) -> f64 {
        let base = Mlp::new(spec, &mut stream(7, &[])).unwrap();
        let x = randn(6, base.input_width(), 8);
        let w = randn(6, base.output_width(), 9);
        // loss = <w, f(x)>, differentiated with respect to parameters and input
        let loss = |m: &Mlp, x: &Tensor| -> (f64, ParamSet, Tensor) {
            let mut m = m.clone();
            let (y, cache) = m.forward(x, mode).unwrap();
            let l = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let (g, dx) = m.backward(&cache, &w).unwrap();
            (l, g, dx)
        };
        let n = base.params.num_params();
        let nx = x.data().len();
        let mut theta = base.params.flatten();
        theta.extend_from_slice(x.data());
        grad_check(
            |t| {
                let mut m = base.clone();
                m.params.unflatten(&t[..n]).unwrap();
                let xx = Tensor::from_vec(x.rows(), x.cols(), t[n..n + nx].to_vec()).unwrap();
                let (l, g, dx) = loss(&m, &xx);
                let mut grad = g.flatten();
                grad.extend_from_slice(dx.data());
                (l, grad)
            },
            &theta,
        )
    }

    #[test]
    fn gradients_match_finite_differences() {
        let plain = MlpSpec::feed_forward(4, &[5, 3], 2, false);
        assert!(finite_difference_check(plain, Mode::Train) < 1e-4);
        let bn = MlpSpec::feed_forward(4, &[5], 3, true);
        assert!(finite_difference_check(bn.clone(), Mode::Train) < 1e-4);
        assert!(finite_difference_check(bn, Mode::Eval) < 1e-4);
        let res = MlpSpec::feed_forward(3, &[5], 3, true).residual();
        assert!(finite_difference_check(res, Mode::Train) < 1e-4);
    }

    #[test]
    fn eval_is_pure_and_train_updates_running_stats() {
        let mut m = Mlp::new(MlpSpec::feed_forward(3, &[4], 2, true), &mut stream(1, &[])).unwrap();
        let x = randn(8, 3, 5);
        let a = m.forward_eval(&x).unwrap();
        let b = m.forward_eval(&x).unwrap();
        assert_eq!(a.data(), b.data());
        let before = m.params.layers[0].bn.clone().unwrap();
        m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(m.params.layers[0].bn.as_ref().unwrap(), &before);
        m.forward(&x, Mode::Train).unwrap();
        assert_ne!(m.params.layers[0].bn.as_ref().unwrap().running_mean, before.running_mean);
    }

    #[test]
    fn residual_with_zero_last_layer_is_identity() {
        let mut m = Mlp::new(MlpSpec::feed_forward(4, &[8], 4, true).residual(), &mut stream(2, &[])).unwrap();
        m.zero_last_layer();
        let x = randn(5, 4, 3);
        assert_eq!(m.forward(&x, Mode::Train).unwrap().0, x);
    }
}
