//! Phase 3: learn the latent drift between consecutive encoders from paired
//! embeddings and carry stored centroids across it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{CentroidStore, sq_dist};
use crate::diffcore::{adamw_step, cosine_lr, Activation, LayerSpec, Mlp, MlpSpec, Mode, OptState, Tensor};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Identity,
    Linear,
    Mlp,
    Trex,
    Sdc,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [
        AdapterKind::Identity,
        AdapterKind::Linear,
        AdapterKind::Mlp,
        AdapterKind::Trex,
        AdapterKind::Sdc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Identity => "identity",
            AdapterKind::Linear => "linear",
            AdapterKind::Mlp => "mlp",
            AdapterKind::Trex => "trex",
            AdapterKind::Sdc => "sdc",
        }
    }

    pub fn is_trained(self) -> bool {
        matches!(self, AdapterKind::Linear | AdapterKind::Mlp | AdapterKind::Trex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Hidden width of the mlp and trex adapters.
    pub width: usize,
    /// Kernel width of the sdc field; the median pairwise distance when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sdc_sigma: Option<f64>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Linear,
            width: 384,
            sdc_sigma: None,
        }
    }
}

impl AdapterSpec {
    pub fn of(kind: AdapterKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::arg("adapter width must be positive"));
        }
        if let Some(s) = self.sdc_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::arg("sdc_sigma must be positive"));
            }
        }
        Ok(())
    }

    /// The adapter network for latent width `dim`, at (near-)identity.
    /// `None` for kinds without parameters.
    pub fn build(&self, dim: usize, seed: u64) -> Result<Option<Mlp>> {
        let hidden = |n: usize| -> Vec<LayerSpec> {
            let mut layers = vec![LayerSpec::new(self.width, Activation::Relu, true); n];
            layers.push(LayerSpec::linear(dim));
            layers
        };
        let spec = match self.kind {
            AdapterKind::Identity | AdapterKind::Sdc => return Ok(None),
            AdapterKind::Linear => return Ok(Some(Mlp::identity_linear(dim))),
            AdapterKind::Mlp => MlpSpec::new(dim, hidden(1)).residual(),
            AdapterKind::Trex => MlpSpec::new(dim, hidden(2)).residual(),
        };
        let mut net = Mlp::new(spec, &mut rng::stream(seed, &[tag::ADAPTER, 0]))?;
        net.zero_last_layer();
        Ok(Some(net))
    }
}

/// Optimization schedule for gradient-trained adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterTraining {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Pair counts up to this train full-batch.
    pub full_batch_limit: usize,
    pub batch_size: usize,
}

impl Default for AdapterTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            weight_decay: OptState::DEFAULT_WEIGHT_DECAY,
            full_batch_limit: 4096,
            batch_size: 256,
        }
    }
}

/// Paired embeddings and kernel width of a drift field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdcField {
    pub old: Tensor,
    pub new: Tensor,
    pub sigma: f64,
}

/// Whitened coordinates the network works in: `x̂ = (x - mean)·whiten` and
/// back through `ŷ·color + mean`, with `whiten = color⁻¹`.
///
/// Pairs often span only a few directions strongly; in whitened coordinates
/// every direction converges at the same rate, so weakly covered directions
/// are still fitted before past centroids are carried along them. The frame
/// is an invertible affine map, so an identity network stays the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub mean: Vec<f64>,
    pub whiten: Tensor,
    pub color: Tensor,
}

/// Ridge added to the covariance, relative to its mean eigenvalue.
const FRAME_RIDGE: f64 = 1e-3;

impl Frame {
    /// Mean and Cholesky factor of the ridged covariance of `x`.
    pub fn fit(x: &Tensor) -> Self {
        let d = x.cols();
        let mean = if x.rows() == 0 { vec![0.0; d] } else { x.mean_rows() };
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            centered.row_mut(r).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        let mut cov = centered.matmul_tn(&centered).expect("square");
        let n = x.rows().max(1) as f64;
        let trace = (0..d).map(|i| cov.data()[i * d + i]).sum::<f64>() / n;
        let ridge = if trace > 0.0 && trace.is_finite() { FRAME_RIDGE * trace / d as f64 } else { 1.0 };
        cov.data_mut().iter_mut().for_each(|v| *v /= n);
        (0..d).for_each(|i| cov.data_mut()[i * d + i] += ridge);
        let lower = cholesky(&cov);
        let color = lower.transpose();
        let whiten = invert_upper(&color);
        Self { mean, whiten, color }
    }

    pub fn into_frame(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        out.matmul(&self.whiten).expect("frame width")
    }

    /// `net` applied in the frame, written as `x + (ŷ - x̂)·color` so that an
    /// identity network returns `x` exactly.
    pub fn carry(&self, net: &Mlp, x: &Tensor) -> Result<Tensor> {
        self.carry_framed(net, x, &self.into_frame(x))
    }

    fn carry_framed(&self, net: &Mlp, x: &Tensor, x_f: &Tensor) -> Result<Tensor> {
        let delta = net.forward_eval(x_f)?.sub(x_f)?;
        x.add(&delta.matmul(&self.color)?)
    }
}

/// Lower factor `L` of a symmetric positive definite `a = L·Lᵀ`.
fn cholesky(a: &Tensor) -> Tensor {
    let d = a.rows();
    let mut l = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l.data()[i * d + k] * l.data()[j * d + k]).sum();
            let v = a.data()[i * d + j] - dot;
            l.data_mut()[i * d + j] = if i == j { v.max(f64::MIN_POSITIVE).sqrt() } else { v / l.data()[j * d + j] };
        }
    }
    l
}

/// Inverse of an upper triangular matrix by back substitution.
fn invert_upper(u: &Tensor) -> Tensor {
    let d = u.rows();
    let mut inv = Tensor::zeros(d, d);
    for col in 0..d {
        for i in (0..=col).rev() {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let acc: f64 = (i + 1..=col).map(|k| u.data()[i * d + k] * inv.data()[k * d + col]).sum();
            inv.data_mut()[i * d + col] = (rhs - acc) / u.data()[i * d + i];
        }
    }
    inv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub spec: AdapterSpec,
    pub network: Option<Mlp>,
    /// Coordinates the network was trained in; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Frame>,
    pub field: Option<SdcField>,
    /// Mean squared drift residual on the training pairs; entry 0 is before
    /// any update, then one entry per epoch.
    pub loss_curve: Vec<f64>,
}

impl AdapterState {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("curve has an initial entry")
    }

    /// Map rows from the old space into the new one.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.network, &self.field) {
            (Some(net), _) => match &self.frame {
                Some(f) => f.carry(net, x),
                None => net.forward_eval(x),
            },
            (None, Some(f)) => sdc_shift(x, f),
            (None, None) => Ok(x.clone()),
        }
    }
}

/// Mean over rows of the squared Euclidean residual.
fn drift_loss(pred: &Tensor, target: &Tensor) -> f64 {
    if pred.rows() == 0 {
        return 0.0;
    }
    pred.iter_rows().zip(target.iter_rows()).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / pred.rows() as f64
}

/// Fit `spec` to map `old` rows onto the paired `new` rows.
///
/// The returned parameters are the best seen on the full training set, so
/// the final loss never exceeds the initial one.
pub fn train_adapter(old: &Tensor, new: &Tensor, spec: &AdapterSpec, sched: &AdapterTraining, seed: u64) -> Result<AdapterState> {
    spec.validate()?;
    if old.shape() != new.shape() {
        return Err(Error::dim(format!(
            "paired embeddings differ in shape: {:?} vs {:?}",
            old.shape(),
            new.shape()
        )));
    }
    let identity_loss = drift_loss(old, new);
    let mut net = match spec.build(old.cols(), seed)? {
        Some(net) => net,
        None => {
            let field = (spec.kind == AdapterKind::Sdc).then(|| SdcField {
                old: old.clone(),
                new: new.clone(),
                sigma: spec.sdc_sigma.unwrap_or_else(|| median_pairwise_distance(old, 1024)),
            });
            let mut state = AdapterState {
                spec: *spec,
                network: None,
                frame: None,
                field,
                loss_curve: vec![identity_loss],
            };
            if state.field.is_some() {
                let l = drift_loss(&state.apply(old)?, new);
                state.loss_curve.push(l);
            }
            return Ok(state);
        }
    };
    let n = old.rows();
    let frame = Frame::fit(old);
    let (old_f, new_f) = (frame.into_frame(old), frame.into_frame(new));
    // losses are reported in the original units
    let loss = |net: &Mlp| -> Result<f64> { Ok(drift_loss(&frame.carry_framed(net, old, &old_f)?, new)) };
    let mut curve = vec![loss(&net)?];
    let mut best = (curve[0], net.params.clone());
    if n == 0 || sched.epochs == 0 {
        return Ok(AdapterState {
            spec: *spec,
            network: Some(net),
            frame: Some(frame),
            field: None,
            loss_curve: curve,
        });
    }
    let mut opt = OptState::for_params(&net.params, sched.lr).with_weight_decay(sched.weight_decay);
    let batch = if n <= sched.full_batch_limit { n } else { sched.batch_size.max(2) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[tag::ADAPTER, 1]);
    for epoch in 0..sched.epochs {
        let lr = cosine_lr(epoch, sched.epochs, sched.lr)?;
        if batch < n {
            order.shuffle(&mut r);
        }
        for chunk in order.chunks(batch) {
            // batch-norm needs two rows
            if chunk.len() < 2 && n >= 2 {
                continue;
            }
            let (x, y) = if batch == n {
                (old_f.clone(), new_f.clone())
            } else {
                (old_f.select_rows(chunk), new_f.select_rows(chunk))
            };
            let (pred, cache) = net.forward(&x, Mode::Train)?;
            let scale = 2.0 / x.rows() as f64;
            let mut dy = pred.sub(&y)?;
            dy.data_mut().iter_mut().for_each(|v| *v *= scale);
            let (grads, _) = net.backward(&cache, &dy)?;
            adamw_step(&mut net.params, &grads, &mut opt, lr)?;
        }
        let l = loss(&net)?;
        curve.push(l);
        if l < best.0 {
            best = (l, net.params.clone());
        }
    }
    net.params = best.1;
    let final_loss = best.0;
    // the curve ends with the loss of the parameters actually kept
    if *curve.last().expect("non-empty") != final_loss {
        curve.push(final_loss);
    }
    Ok(AdapterState {
        spec: *spec,
        network: Some(net),
        frame: Some(frame),
        field: None,
        loss_curve: curve,
    })
}

/// Carry every centroid of latent space `target - 1` into space `target`.
/// Centroids already in `target` are left alone. Fails if no centroid awaits
/// adaptation, so a transition cannot be applied twice.
pub fn adapt_centroids(store: &CentroidStore, adapter: &AdapterState, target: usize) -> Result<CentroidStore> {
    transform_store(store, target, |x| adapter.apply(x))
}

/// Drift-field compensation: each centroid moves by the Gaussian-weighted mean
/// displacement of nearby training pairs.
pub fn sdc_adapt(store: &CentroidStore, old: &Tensor, new: &Tensor, sigma: f64, target: usize) -> Result<CentroidStore> {
    if old.shape() != new.shape() {
        return Err(Error::dim("paired embeddings differ in shape"));
    }
    if !(sigma > 0.0) {
        return Err(Error::arg("sigma must be positive"));
    }
    let field = SdcField {
        old: old.clone(),
        new: new.clone(),
        sigma,
    };
    transform_store(store, target, |x| sdc_shift(x, &field))
}

fn sdc_shift(x: &Tensor, f: &SdcField) -> Result<Tensor> {
    if x.cols() != f.old.cols() {
        return Err(Error::dim("centroid and drift-field widths differ"));
    }
    let denom = 2.0 * f.sigma * f.sigma;
    let mut out = x.clone();
    for (i, p) in x.iter_rows().enumerate() {
        let d2: Vec<f64> = f.old.iter_rows().map(|o| sq_dist(o, p)).collect();
        // shifting by the smallest distance leaves the normalized weights
        // unchanged and keeps them representable
        let d_min = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let mut acc = vec![0.0; x.cols()];
        let mut total = 0.0;
        let mut raw_total = 0.0;
        for ((o, n), &d) in f.old.iter_rows().zip(f.new.iter_rows()).zip(&d2) {
            let w = (-(d - d_min) / denom).exp();
            raw_total += (-d / denom).exp();
            total += w;
            acc.iter_mut().zip(n.iter().zip(o)).for_each(|(a, (nv, ov))| *a += w * (nv - ov));
        }
        if raw_total < 1e-12 || total == 0.0 {
            continue;
        }
        out.row_mut(i).iter_mut().zip(&acc).for_each(|(v, a)| *v += a / total);
    }
    Ok(out)
}

fn transform_store(store: &CentroidStore, target: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<CentroidStore> {
    if target == 0 {
        return Err(Error::arg("space 0 has no predecessor"));
    }
    let idx: Vec<usize> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.space + 1 == target)
        .map(|(i, _)| i)
        .collect();
    if let Some(e) = store.entries().iter().find(|e| e.space + 1 != target && e.space != target) {
        return Err(Error::state(format!(
            "centroid of class {} lives in space {}, cannot reach space {target}",
            e.class_id, e.space
        )));
    }
    if idx.is_empty() {
        return Err(Error::state(format!("no centroid awaits adaptation into space {target}")));
    }
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| store.entries()[i].centroid.clone()).collect();
    let mapped = f(&Tensor::from_rows(&rows)?)?;
    if mapped.cols() != rows[0].len() || !mapped.is_finite() {
        return Err(Error::dim("adapter output does not match the centroid space"));
    }
    let mut out = store.clone();
    let entries = out.entries_mut();
    for (r, &i) in idx.iter().enumerate() {
        entries[i].centroid = mapped.row(r).to_vec();
        entries[i].space = target;
    }
    Ok(out)
}

/// Median Euclidean distance over pairs of rows, using at most `max_rows`
/// evenly spaced rows.
pub fn median_pairwise_distance(x: &Tensor, max_rows: usize) -> f64 {
    let n = x.rows();
    let step = n.div_ceil(max_rows.max(2)).max(1);
    let idx: Vec<usize> = (0..n).step_by(step).collect();
    let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = d[mid];
    let m = if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}
