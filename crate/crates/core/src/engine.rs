//! Per-task orchestration of representation learning, centroid discovery and
//! centroid adaptation, for CAMP and the GCD baselines.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_centroids, train_adapter, AdapterKind, AdapterSpec, AdapterState, AdapterTraining};
use crate::clustering::{estimate_class_count, ss_kmeans, CentroidEntry, CentroidStore, EstimateOptions, KMeansOptions};
use crate::datagen::{augment_views, buffer_update, AugmentConfig, ClassKind, ExemplarBuffer, LabeledSet, Scenario, TaskData};
use crate::diffcore::{adamw_step, cosine_lr, Activation, LayerSpec, Mlp, MlpSpec, Mode, OptState, Tensor};
use crate::eval::{self, MetricsReport};
use crate::losses::{
    ce_loss, kd_loss, proto_soft_assign, pseudo_loss, simclr_loss, supcon_loss, LossConfig, PrototypeBank, ViewPair,
};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CAMP", alias = "camp")]
    Camp,
    #[serde(rename = "GCD", alias = "gcd")]
    Gcd,
    #[serde(rename = "GCD_FD", alias = "gcd_fd")]
    GcdFd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Camp => "CAMP",
            Method::Gcd => "GCD",
            Method::GcdFd => "GCD_FD",
        }
    }
}

/// Family of the distillation projector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distiller {
    None,
    /// Distill features directly, without a projector.
    Fd,
    Linear,
    Mlp,
    Trex,
}

impl Distiller {
    pub const ALL: [Distiller; 5] = [Distiller::None, Distiller::Fd, Distiller::Linear, Distiller::Mlp, Distiller::Trex];

    pub fn name(self) -> &'static str {
        match self {
            Distiller::None => "none",
            Distiller::Fd => "fd",
            Distiller::Linear => "linear",
            Distiller::Mlp => "mlp",
            Distiller::Trex => "trex",
        }
    }

    /// Projector from the current latent space back to the previous one,
    /// initialized at (near-)identity.
    fn projector(self, dim: usize, seed: u64) -> Result<Option<Mlp>> {
        let bn_relu = LayerSpec::new(dim, Activation::Relu, true);
        let spec = match self {
            Distiller::None | Distiller::Fd => return Ok(None),
            Distiller::Linear => return Ok(Some(Mlp::identity_linear(dim))),
            Distiller::Mlp => MlpSpec::new(dim, vec![bn_relu, LayerSpec::linear(dim)]).residual(),
            Distiller::Trex => MlpSpec::new(dim, vec![bn_relu, bn_relu, LayerSpec::linear(dim)]).residual(),
        };
        let mut net = Mlp::new(spec, &mut rng::stream(seed, &[tag::PROJECTOR_INIT]))?;
        net.zero_last_layer();
        Ok(Some(net))
    }
}

/// Widths of the encoder and the contrastive head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub latent: usize,
    pub head_hidden: Vec<usize>,
    pub head_out: usize,
    pub batch_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 256],
            latent: 64,
            head_hidden: vec![128],
            head_out: 128,
            batch_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub method: Method,
    /// Distillation weight. Unset means 0.5, or 0.1 with exemplars, or 0.9 in
    /// class-incremental mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub beta: f64,
    pub distiller: Distiller,
    /// Centroid adapter; absent for the baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    pub adapter_training: AdapterTraining,
    /// Add exemplars to the adapter's training pairs.
    pub adapter_uses_exemplars: bool,
    pub exemplars_per_class: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub epsilon: f64,
    /// Train with the prototype pseudo-label and cross-entropy terms.
    pub prototype_losses: bool,
    pub estimate_k: bool,
    pub cil_mode: bool,
    /// Leading encoder layers kept fixed after the first task.
    pub freeze_layers: usize,
    pub architecture: Architecture,
    pub augment: AugmentConfig,
    pub kmeans: KMeansOptions,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self::camp()
    }
}

impl MethodConfig {
    pub fn camp() -> Self {
        let loss = LossConfig::default();
        Self {
            method: Method::Camp,
            alpha: None,
            beta: loss.beta,
            distiller: Distiller::Mlp,
            adapter: Some(AdapterSpec::default()),
            adapter_training: AdapterTraining::default(),
            adapter_uses_exemplars: true,
            exemplars_per_class: 0,
            epochs: 100,
            base_lr: 1e-3,
            weight_decay: OptState::DEFAULT_WEIGHT_DECAY,
            batch_size: 128,
            tau: loss.tau,
            tau_s: loss.tau_s,
            tau_t: loss.tau_t,
            epsilon: loss.epsilon,
            prototype_losses: true,
            estimate_k: false,
            cil_mode: false,
            freeze_layers: 0,
            architecture: Architecture::default(),
            augment: AugmentConfig::default(),
            kmeans: KMeansOptions::default(),
        }
    }

    /// Fine-tuned GCD: contrastive losses only, no distillation or adaptation.
    pub fn gcd() -> Self {
        Self {
            method: Method::Gcd,
            alpha: None,
            distiller: Distiller::None,
            adapter: None,
            prototype_losses: false,
            ..Self::camp()
        }
    }

    /// GCD with direct feature distillation.
    pub fn gcd_fd() -> Self {
        Self {
            method: Method::GcdFd,
            distiller: Distiller::Fd,
            ..Self::gcd()
        }
    }

    /// Preset for `method`.
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Camp => Self::camp(),
            Method::Gcd => Self::gcd(),
            Method::GcdFd => Self::gcd_fd(),
        }
    }

    pub fn resolved_alpha(&self) -> f64 {
        match (self.method, self.alpha) {
            (Method::Gcd, _) => 0.0,
            (_, Some(a)) => a,
            _ if self.cil_mode => 0.9,
            _ if self.exemplars_per_class > 0 => 0.1,
            _ => 0.5,
        }
    }

    /// Copy with the distillation weight written out.
    pub fn resolved(&self) -> Self {
        Self {
            alpha: Some(self.resolved_alpha()),
            ..self.clone()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_s: self.tau_s,
            tau_t: self.tau_t,
            epsilon: self.epsilon,
            alpha: self.resolved_alpha(),
            beta: self.beta,
        }
    }

    pub fn adapter_kind(&self) -> AdapterKind {
        self.adapter.map_or(AdapterKind::Identity, |a| a.kind)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        match self.method {
            Method::Gcd if self.distiller != Distiller::None || self.alpha.is_some_and(|a| a != 0.0) => {
                return Err(Error::arg("GCD runs without a distiller and with alpha 0"));
            }
            Method::GcdFd if self.distiller != Distiller::Fd => {
                return Err(Error::arg("GCD_FD distills features directly (distiller = fd)"));
            }
            Method::Gcd | Method::GcdFd if self.adapter.is_some_and(|a| a.kind != AdapterKind::Identity) => {
                return Err(Error::arg("the GCD baselines do not adapt centroids"));
            }
            _ => {}
        }
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::arg("epochs must be positive and batch_size at least 2"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::arg("base_lr must be positive and weight_decay non-negative"));
        }
        let arch = &self.architecture;
        if arch.latent == 0 || arch.head_out == 0 || arch.encoder_hidden.contains(&0) || arch.head_hidden.contains(&0) {
            return Err(Error::arg("architecture widths must be positive"));
        }
        if self.freeze_layers > arch.encoder_hidden.len() + 1 {
            return Err(Error::arg("freeze_layers exceeds the encoder depth"));
        }
        Ok(())
    }

    /// Coefficients of the self-supervised, supervised and distillation terms.
    fn weights(&self, distilling: bool) -> (f64, f64, f64) {
        let alpha = if distilling { self.resolved_alpha() } else { 0.0 };
        if self.cil_mode {
            (0.0, 1.0 - alpha, alpha)
        } else {
            ((1.0 - alpha) * (1.0 - self.beta), (1.0 - alpha) * self.beta, alpha)
        }
    }

    fn needs_previous_encoder(&self) -> bool {
        self.distiller != Distiller::None || self.adapter_kind() != AdapterKind::Identity
    }
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: Mlp,
    pub head: Mlp,
    pub protos: PrototypeBank,
    /// Prototype row of every labeled class seen so far.
    pub proto_index: BTreeMap<usize, usize>,
    pub projector: Option<Mlp>,
    pub frozen_prev: Option<Mlp>,
    pub store: CentroidStore,
    pub buffer: ExemplarBuffer,
    /// Index of the next task to train.
    pub task_index: usize,
}

impl ModelState {
    pub fn new(input_dim: usize, cfg: &MethodConfig, seed: u64) -> Result<Self> {
        let arch = &cfg.architecture;
        let encoder = Mlp::new(
            MlpSpec::feed_forward(input_dim, &arch.encoder_hidden, arch.latent, arch.batch_norm),
            &mut rng::stream(seed, &[tag::ENCODER_INIT]),
        )?;
        let head = Mlp::new(
            MlpSpec::feed_forward(arch.latent, &arch.head_hidden, arch.head_out, false),
            &mut rng::stream(seed, &[tag::HEAD_INIT]),
        )?;
        Ok(Self {
            encoder,
            head,
            protos: PrototypeBank::random(0, arch.latent, &mut rng::stream(seed, &[tag::PROTO_INIT])),
            proto_index: BTreeMap::new(),
            projector: None,
            frozen_prev: None,
            store: CentroidStore::new(),
            buffer: ExemplarBuffer::new(cfg.exemplars_per_class),
            task_index: 0,
        })
    }
}

/// Loss components averaged over one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub ssl: f64,
    pub sl: f64,
    pub kd: f64,
    pub total: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Number of clusters found in the task.
    pub clusters: usize,
    /// The store just before past centroids were adapted.
    pub pre_adaptation: Option<CentroidStore>,
    pub adapter: Option<AdapterState>,
}

/// Train on one task: representation learning, clustering and, from the
/// second task on, centroid adaptation.
pub fn run_task(mut state: ModelState, task: &TaskData, cfg: &MethodConfig, seed: u64) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if task.index != state.task_index {
        return Err(Error::state(format!(
            "model expects task {}, got task {}",
            state.task_index, task.index
        )));
    }
    if task.labeled.is_empty() {
        return Err(Error::state(format!("task {} has no labeled data", task.index)));
    }
    if task.dim() != state.encoder.input_width() {
        return Err(Error::dim(format!(
            "task features have width {}, encoder expects {}",
            task.dim(),
            state.encoder.input_width()
        )));
    }
    let t = task.index;
    let task_seed = rng::derive(seed, &[t as u64]);
    let mut log = TrainLog::default();

    let new_rows = task.num_classes();
    let offset = state.protos.len();
    state
        .protos
        .grow(new_rows, &mut rng::stream(task_seed, &[tag::PROTO_INIT]));
    for (i, &c) in task.known_classes.iter().enumerate() {
        state.proto_index.insert(c, offset + i);
    }
    let distilling = t > 0 && state.frozen_prev.is_some() && cfg.distiller != Distiller::None;
    state.projector = if distilling {
        cfg.distiller.projector(cfg.architecture.latent, task_seed)?
    } else {
        None
    };

    info!("task {t}: phase 1 ({} epochs)", cfg.epochs);
    log.epochs = train_representation(&mut state, task, cfg, distilling, task_seed)?;

    info!("task {t}: phase 2");
    log.clusters = discover(&mut state, task, cfg, task_seed)?;

    if t > 0 {
        let kind = cfg.adapter_kind();
        log.pre_adaptation = Some(state.store.clone());
        let adapter = match (&state.frozen_prev, cfg.adapter) {
            (Some(prev), Some(spec)) if kind != AdapterKind::Identity => {
                info!("task {t}: phase 3 ({})", kind.name());
                let mut x = task.train_features()?;
                if cfg.adapter_uses_exemplars && !state.buffer.is_empty() {
                    x = Tensor::vstack(&[&x, &state.buffer.as_labeled(task.dim()).features])?;
                }
                let old = prev.forward_eval(&x)?;
                let new = state.encoder.forward_eval(&x)?;
                let a = train_adapter(&old, &new, &spec, &cfg.adapter_training, rng::derive(task_seed, &[tag::ADAPTER]))?;
                debug!("adapter loss {:.6} -> {:.6}", a.initial_loss(), a.final_loss());
                a
            }
            _ => identity_adapter(),
        };
        state.store = adapt_centroids(&state.store, &adapter, t)?;
        log.adapter = Some(adapter);
    }

    state.buffer = buffer_update(&state.buffer, task, cfg.exemplars_per_class, task_seed);
    state.frozen_prev = cfg.needs_previous_encoder().then(|| state.encoder.clone());
    state.task_index += 1;
    Ok((state, log))
}

fn identity_adapter() -> AdapterState {
    AdapterState {
        spec: AdapterSpec::of(AdapterKind::Identity),
        network: None,
        frame: None,
        field: None,
        loss_curve: vec![0.0],
    }
}

/// One optimizer per trainable component.
struct Optimizers {
    encoder: OptState,
    head: OptState,
    protos: OptState,
    projector: Option<OptState>,
}

fn train_representation(
    state: &mut ModelState,
    task: &TaskData,
    cfg: &MethodConfig,
    distilling: bool,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    let (w_ssl, w_sl, w_kd) = cfg.weights(distilling);
    let frozen_layers = if task.index > 0 { cfg.freeze_layers } else { 0 };
    let mut encoder_opt = OptState::for_params(&state.encoder.params, cfg.base_lr).with_weight_decay(cfg.weight_decay);
    encoder_opt.frozen_layers = frozen_layers;
    let mut opt = Optimizers {
        encoder: encoder_opt,
        head: OptState::for_params(&state.head.params, cfg.base_lr).with_weight_decay(cfg.weight_decay),
        protos: OptState::new(&[state.protos.prototypes.data().len()], cfg.base_lr).with_weight_decay(cfg.weight_decay),
        projector: state
            .projector
            .as_ref()
            .map(|p| OptState::for_params(&p.params, cfg.base_lr).with_weight_decay(cfg.weight_decay)),
    };

    // Labeled stream: the task's labeled data plus replayed exemplars.
    let replay = state.buffer.as_labeled(task.dim());
    let labeled = if replay.is_empty() { task.labeled.clone() } else { task.labeled.concat(&replay)? };
    let unlabeled = task.unlabeled.features();
    let n_l = labeled.len();
    let n = n_l + unlabeled.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(seed, &[tag::BATCHES]);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)?;
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochLog::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            // labeled rows first within the batch
            let mut idx = chunk.to_vec();
            idx.sort_by_key(|&i| i >= n_l);
            let lab_rows: Vec<usize> = idx.iter().copied().filter(|&i| i < n_l).collect();
            let unl_rows: Vec<usize> = idx.iter().filter(|&&i| i >= n_l).map(|&i| i - n_l).collect();
            let x = Tensor::vstack(&[&labeled.features.select_rows(&lab_rows), &unlabeled.select_rows(&unl_rows)])?;
            let labels: Vec<usize> = lab_rows.iter().map(|&i| labeled.labels[i]).collect();
            let aug_seed = rng::derive(seed, &[tag::AUGMENT, epoch as u64, b as u64]);
            let step = train_step(state, &mut opt, &x, &labels, cfg, aug_seed, (w_ssl, w_sl, w_kd), lr)?;
            acc.ssl += step.ssl;
            acc.sl += step.sl;
            acc.kd += step.kd;
            acc.total += step.total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let entry = EpochLog {
            ssl: acc.ssl / nb,
            sl: acc.sl / nb,
            kd: acc.kd / nb,
            total: acc.total / nb,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        debug!(
            "task {} epoch {epoch}: total {:.4} ssl {:.4} sl {:.4} kd {:.4}",
            task.index, entry.total, entry.ssl, entry.sl, entry.kd
        );
        logs.push(entry);
    }
    Ok(logs)
}

/// Take rows `[a, b)` and `[a + half, b + half)` of a stacked two-view tensor.
fn both_views(x: &Tensor, half: usize, a: usize, b: usize) -> Result<Tensor> {
    Tensor::vstack(&[&x.slice_rows(a, b), &x.slice_rows(half + a, half + b)])
}

/// Swap the two stacked views.
fn swap_views(x: &Tensor) -> Result<Tensor> {
    let half = x.rows() / 2;
    Tensor::vstack(&[&x.slice_rows(half, 2 * half), &x.slice_rows(0, half)])
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut ModelState,
    opt: &mut Optimizers,
    x: &Tensor,
    labels: &[usize],
    cfg: &MethodConfig,
    aug_seed: u64,
    (w_ssl, w_sl, w_kd): (f64, f64, f64),
    lr: f64,
) -> Result<EpochLog> {
    let b = x.rows();
    let n_l = labels.len();
    let (v1, v2) = augment_views(x, &cfg.augment, aug_seed);
    let views = Tensor::vstack(&[&v1, &v2])?;
    let (z, enc_cache) = state.encoder.forward(&views, Mode::Train)?;
    let (h, head_cache) = state.head.forward(&z, Mode::Train)?;
    let h1 = h.slice_rows(0, b);
    let h2 = h.slice_rows(b, 2 * b);

    // contrastive terms, symmetrized over the two views
    let mut d_h = Tensor::zeros(2 * b, h.cols());
    let mut ssl = 0.0;
    let mut sl = 0.0;
    if w_ssl > 0.0 {
        let a = simclr_loss(&ViewPair::new(h1.clone(), h2.clone())?, cfg.tau)?;
        let c = simclr_loss(&ViewPair::new(h2.clone(), h1.clone())?, cfg.tau)?;
        ssl += 0.5 * (a.value + c.value);
        add_rows(&mut d_h, 0, &a.d_h.add(&c.d_h_prime)?, 0.5 * w_ssl);
        add_rows(&mut d_h, b, &a.d_h_prime.add(&c.d_h)?, 0.5 * w_ssl);
    }
    if w_sl > 0.0 && n_l > 0 {
        let l1 = h1.slice_rows(0, n_l);
        let l2 = h2.slice_rows(0, n_l);
        let a = supcon_loss(&ViewPair::new(l1.clone(), l2.clone())?.with_labels(labels.to_vec())?, cfg.tau)?;
        let c = supcon_loss(&ViewPair::new(l2, l1)?.with_labels(labels.to_vec())?, cfg.tau)?;
        sl += 0.5 * (a.value + c.value);
        add_rows(&mut d_h, 0, &a.d_h.add(&c.d_h_prime)?, 0.5 * w_sl);
        add_rows(&mut d_h, b, &a.d_h_prime.add(&c.d_h)?, 0.5 * w_sl);
    }
    let (g_head, mut dz) = state.head.backward(&head_cache, &d_h)?;

    // prototype self-distillation and labeled cross-entropy
    let mut g_protos = None;
    if cfg.prototype_losses {
        let student = proto_soft_assign(&z, &state.protos, cfg.tau_s)?;
        let teacher = swap_views(&proto_soft_assign(&z, &state.protos, cfg.tau_t)?.probs)?;
        let mut d_probs = Tensor::zeros(2 * b, state.protos.len());
        if w_ssl > 0.0 {
            let p = pseudo_loss(&student.probs, &teacher, cfg.epsilon)?;
            ssl += p.value;
            d_probs.axpy(w_ssl, &p.grad)?;
        }
        if w_sl > 0.0 && n_l > 0 {
            let targets: Vec<usize> = labels
                .iter()
                .chain(labels)
                .map(|c| {
                    state
                        .proto_index
                        .get(c)
                        .copied()
                        .ok_or_else(|| Error::state(format!("class {c} has no prototype")))
                })
                .collect::<Result<_>>()?;
            let p_lab = both_views(&student.probs, b, 0, n_l)?;
            let ce = ce_loss(&p_lab, &targets)?;
            sl += ce.value;
            let g = ce.grad.scale(w_sl);
            add_rows(&mut d_probs, 0, &g.slice_rows(0, n_l), 1.0);
            add_rows(&mut d_probs, b, &g.slice_rows(n_l, 2 * n_l), 1.0);
        }
        let (dz_p, dc) = student.backward(&d_probs)?;
        dz.add_assign(&dz_p)?;
        g_protos = Some(dc);
    }

    // distillation toward the frozen previous encoder
    let mut kd = 0.0;
    let mut g_proj = None;
    if w_kd > 0.0 {
        let prev = state.frozen_prev.as_ref().ok_or_else(|| Error::state("distillation without a previous encoder"))?;
        let target = prev.forward_eval(&views)?;
        match state.projector.as_mut() {
            Some(proj) => {
                let (pz, cache) = proj.forward(&z, Mode::Train)?;
                let l = kd_loss(&pz, &target)?;
                kd = l.value;
                let (g, dz_kd) = proj.backward(&cache, &l.grad.scale(w_kd))?;
                dz.add_assign(&dz_kd)?;
                g_proj = Some(g);
            }
            None => {
                let l = kd_loss(&z, &target)?;
                kd = l.value;
                dz.axpy(w_kd, &l.grad)?;
            }
        }
    }

    let (g_enc, _) = state.encoder.backward(&enc_cache, &dz)?;
    adamw_step(&mut state.encoder.params, &g_enc, &mut opt.encoder, lr)?;
    adamw_step(&mut state.head.params, &g_head, &mut opt.head, lr)?;
    if let Some(dc) = g_protos {
        if state.protos.trainable {
            opt.protos
                .step_groups(&mut [(0, state.protos.prototypes.data_mut())], &[(0, dc.data())], lr)?;
        }
    }
    if let (Some(g), Some(proj), Some(o)) = (g_proj, state.projector.as_mut(), opt.projector.as_mut()) {
        adamw_step(&mut proj.params, &g, o, lr)?;
    }
    let total = w_ssl * ssl + w_sl * sl + w_kd * kd;
    if !total.is_finite() {
        return Err(Error::NonFinite { layer: 0 });
    }
    Ok(EpochLog {
        ssl,
        sl,
        kd,
        total,
        ..EpochLog::default()
    })
}

fn add_rows(dst: &mut Tensor, at: usize, src: &Tensor, scale: f64) {
    for (i, row) in src.iter_rows().enumerate() {
        dst.row_mut(at + i).iter_mut().zip(row).for_each(|(d, s)| *d += scale * s);
    }
}

/// Cluster the task in the new latent space and append its centroids.
fn discover(state: &mut ModelState, task: &TaskData, cfg: &MethodConfig, seed: u64) -> Result<usize> {
    let labeled = LabeledSet {
        features: state.encoder.forward_eval(&task.labeled.features)?,
        labels: task.labeled.labels.clone(),
    };
    let unlabeled = state.encoder.forward_eval(task.unlabeled.features())?;
    let n_known = task.known_classes.len();
    let k_novel = if cfg.estimate_k {
        let k_max = (2 * n_known).max(n_known + 1).min(n_known + unlabeled.rows() / 2);
        let est = estimate_class_count(
            task,
            &state.encoder,
            n_known,
            k_max.max(n_known),
            rng::derive(seed, &[tag::ESTIMATE]),
            &EstimateOptions {
                kmeans: cfg.kmeans,
                ..EstimateOptions::default()
            },
        )?;
        info!("task {}: estimated {} classes", task.index, est.k);
        est.k - n_known
    } else {
        task.num_novel()
    };
    let res = ss_kmeans(&labeled, &unlabeled, k_novel, &cfg.kmeans, rng::derive(seed, &[tag::CLUSTER]))?;
    for (j, row) in res.centroids.iter_rows().enumerate() {
        let (class_id, kind) = match res.known_classes.get(j) {
            Some(&c) => (c, ClassKind::Known),
            None => (state.store.allocate_cluster_id(), ClassKind::Novel),
        };
        state.store.push(CentroidEntry {
            centroid: row.to_vec(),
            class_id,
            task_id: task.index,
            kind,
            space: task.index,
        })?;
    }
    Ok(res.centroids.rows())
}

/// Index into `store.entries()` of the nearest centroid to each embedded row;
/// ties go to the lower class id.
pub fn ncc_assign(store: &CentroidStore, z: &Tensor) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(Error::state("centroid store is empty"));
    }
    if store.dim() != Some(z.cols()) {
        return Err(Error::dim("embedding and centroid widths differ"));
    }
    let entries = store.entries();
    Ok(z
        .iter_rows()
        .map(|x| {
            let mut best = (0usize, f64::INFINITY);
            for (i, e) in entries.iter().enumerate() {
                let d: f64 = x.iter().zip(&e.centroid).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 || (d == best.1 && e.class_id < entries[best.0].class_id) {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect())
}

/// Nearest-centroid class ids of raw inputs `x`.
pub fn ncc_predict(encoder: &Mlp, store: &CentroidStore, x: &Tensor) -> Result<Vec<usize>> {
    let z = encoder.forward_eval(x)?;
    let entries = store.entries();
    Ok(ncc_assign(store, &z)?.into_iter().map(|i| entries[i].class_id).collect())
}

/// Train over every task of `scenario` and evaluate after each one.
pub fn run_scenario(scenario: &Scenario, cfg: &MethodConfig, seed: u64) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut state = ModelState::new(scenario.dim, cfg, seed)?;
    let mut evals = Vec::with_capacity(scenario.num_tasks());
    let mut distances = Vec::new();
    for task in &scenario.tasks {
        let (next, log) = run_task(state, task, cfg, seed)?;
        state = next;
        let snapshot = eval::evaluate_after_task(scenario, &state.encoder, &state.store, task.index)?;
        if let Some(before) = &log.pre_adaptation {
            distances.push(eval::centroid_distance_report(
                before,
                &state.store,
                &state.encoder,
                scenario,
                task.index,
                &snapshot.mapping,
            )?);
        }
        info!("task {}: accuracy so far {:?}", task.index, snapshot.accuracies);
        evals.push(snapshot);
    }
    eval::build_report(scenario, cfg.resolved(), &evals, distances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_synthetic_scenario, SyntheticConfig};

    fn tiny_cfg(method: Method) -> MethodConfig {
        MethodConfig {
            epochs: 2,
            batch_size: 32,
            architecture: Architecture {
                encoder_hidden: vec![16],
                latent: 8,
                head_hidden: vec![16],
                head_out: 8,
                batch_norm: false,
            },
            adapter: MethodConfig::for_method(method).adapter.map(|a| AdapterSpec { width: 8, ..a }),
            adapter_training: AdapterTraining {
                epochs: 5,
                ..AdapterTraining::default()
            },
            ..MethodConfig::for_method(method)
        }
    }

    fn tiny_scenario(tasks: usize) -> Scenario {
        let cfg = SyntheticConfig {
            dim: 6,
            classes_per_task: 4,
            known_fraction: 0.5,
            samples_per_class: 12,
            ..SyntheticConfig::default()
        };
        make_synthetic_scenario(&cfg, tasks, 5).unwrap()
    }

    #[test]
    fn alpha_defaults() {
        assert_eq!(MethodConfig::camp().resolved_alpha(), 0.5);
        let with_m = MethodConfig {
            exemplars_per_class: 20,
            ..MethodConfig::camp()
        };
        assert_eq!(with_m.resolved_alpha(), 0.1);
        let cil = MethodConfig {
            cil_mode: true,
            ..MethodConfig::camp()
        };
        assert_eq!(cil.resolved_alpha(), 0.9);
        assert_eq!(MethodConfig::gcd().resolved_alpha(), 0.0);
    }

    #[test]
    fn baseline_invariants_are_checked() {
        let bad = MethodConfig {
            distiller: Distiller::Mlp,
            ..MethodConfig::gcd()
        };
        assert!(bad.validate().is_err());
        let bad_fd = MethodConfig {
            distiller: Distiller::Linear,
            ..MethodConfig::gcd_fd()
        };
        assert!(bad_fd.validate().is_err());
        assert!(MethodConfig::gcd_fd().validate().is_ok());
    }

    #[test]
    fn first_task_is_method_independent_among_prototype_free_methods() {
        let sc = tiny_scenario(1);
        let run = |m| {
            let cfg = tiny_cfg(m);
            let st = ModelState::new(sc.dim, &cfg, 3).unwrap();
            run_task(st, &sc.tasks[0], &cfg, 3).unwrap().0
        };
        let a = run(Method::Gcd);
        let b = run(Method::GcdFd);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn frozen_encoder_is_untouched_and_store_grows() {
        let sc = tiny_scenario(2);
        let cfg = tiny_cfg(Method::Camp);
        let st = ModelState::new(sc.dim, &cfg, 1).unwrap();
        let (st, _) = run_task(st, &sc.tasks[0], &cfg, 1).unwrap();
        let frozen = st.frozen_prev.clone().unwrap();
        assert_eq!(st.store.len(), 4);
        let (st, log) = run_task(st, &sc.tasks[1], &cfg, 1).unwrap();
        assert_eq!(st.store.len(), 8);
        assert!(log.pre_adaptation.is_some());
        assert!(st.store.entries().iter().all(|e| e.space == 1));
        // the frozen copy used during task 1 is the encoder after task 0
        assert_ne!(frozen, st.encoder);
        assert_eq!(st.frozen_prev.unwrap(), st.encoder);
    }

    #[test]
    fn task_order_is_enforced() {
        let sc = tiny_scenario(2);
        let cfg = tiny_cfg(Method::Gcd);
        let st = ModelState::new(sc.dim, &cfg, 1).unwrap();
        assert!(matches!(run_task(st, &sc.tasks[1], &cfg, 1), Err(Error::State(_))));
    }

    #[test]
    fn ncc_ties_go_to_lower_class() {
        let mut store = CentroidStore::new();
        for (c, x) in [(7, 1.0), (3, -1.0)] {
            store
                .push(CentroidEntry {
                    centroid: vec![x],
                    class_id: c,
                    task_id: 0,
                    kind: ClassKind::Known,
                    space: 0,
                })
                .unwrap();
        }
        let enc = Mlp::identity_linear(1);
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(ncc_predict(&enc, &store, &x).unwrap(), vec![3, 7, 3]);
        assert!(matches!(ncc_predict(&enc, &CentroidStore::new(), &x), Err(Error::State(_))));
    }

    #[test]
    fn scenario_runs_are_deterministic() {
        let sc = tiny_scenario(2);
        let cfg = tiny_cfg(Method::Camp);
        let a = run_scenario(&sc, &cfg, 4).unwrap();
        let b = run_scenario(&sc, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.acc_matrix.len(), 2);
    }
}
