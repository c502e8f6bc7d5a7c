//! Phase-1 training objectives.
//!
//! Every loss returns its value together with the gradient on its inputs, so
//! callers chain them into [`crate::diffcore::Mlp::backward`]. Batch
//! reductions are means throughout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad_check, l2_normalize, l2_normalize_backward, Normalized, Tensor};
use crate::{Error, Result};

/// Temperatures and weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Student temperature for prototype soft assignment.
    pub tau_s: f64,
    /// Teacher temperature; sharper than the student's.
    pub tau_t: f64,
    /// Weight of the mean-entropy regularizer.
    pub epsilon: f64,
    /// Distillation weight.
    pub alpha: f64,
    /// Supervision weight.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            tau_s: 0.1,
            tau_t: 0.05,
            epsilon: 1.0,
            alpha: 0.5,
            beta: 0.35,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_s > 0.0 && self.tau_t > 0.0) {
            return Err(Error::arg("temperatures must be positive"));
        }
        if self.tau_t >= self.tau_s {
            return Err(Error::arg(format!(
                "teacher temperature {} must be below student temperature {}",
                self.tau_t, self.tau_s
            )));
        }
        if self.epsilon < 0.0 {
            return Err(Error::arg("epsilon must be non-negative"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Trainable class vectors used for cosine soft assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub prototypes: Tensor,
    pub trainable: bool,
}

impl PrototypeBank {
    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..k * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            prototypes: Tensor::from_vec(k, dim, data).expect("sized above"),
            trainable: true,
        }
    }

    /// Append `extra` freshly initialized rows.
    pub fn grow<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        if extra == 0 {
            return;
        }
        let new = Self::random(extra, self.prototypes.cols(), rng);
        self.prototypes = Tensor::vstack(&[&self.prototypes, &new.prototypes]).expect("same width");
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two augmented views of one batch, plus labels for the labeled subset.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub h: Tensor,
    pub h_prime: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl ViewPair {
    pub fn new(h: Tensor, h_prime: Tensor) -> Result<Self> {
        if h.shape() != h_prime.shape() {
            return Err(Error::dim(format!("views {:?} and {:?}", h.shape(), h_prime.shape())));
        }
        Ok(Self { h, h_prime, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.h.rows() {
            return Err(Error::dim(format!("{} labels for {} rows", labels.len(), self.h.rows())));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// Loss value with gradients on both views.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub d_h: Tensor,
    pub d_h_prime: Tensor,
}

/// Loss value with the gradient on its (single) input.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

/// Shared contrastive core: anchors `h_i` against all of `h'`, with the
/// positives of anchor `i` given by `positives[i]`. The denominator runs over
/// every `h'_n`, positive included.
fn contrastive(views: &ViewPair, tau: f64, positives: &[Vec<usize>]) -> Result<PairLoss> {
    if tau <= 0.0 {
        return Err(Error::arg("temperature must be positive"));
    }
    let b = views.h.rows();
    let u = l2_normalize(&views.h);
    let v = l2_normalize(&views.h_prime);
    let sim = u.values.matmul_nt(&v.values)?.scale(1.0 / tau);
    let mut d_sim = Tensor::zeros(b, b);
    let mut total = 0.0;
    for i in 0..b {
        let row = sim.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + z.ln();
        let pos = &positives[i];
        let w = 1.0 / pos.len() as f64;
        let pos_mean: f64 = pos.iter().map(|&q| row[q]).sum::<f64>() * w;
        total += lse - pos_mean;
        let dr = d_sim.row_mut(i);
        for n in 0..b {
            dr[n] = (row[n] - lse).exp() / b as f64;
        }
        for &q in pos {
            dr[q] -= w / b as f64;
        }
    }
    let d_sim = d_sim.scale(1.0 / tau);
    let du = d_sim.matmul(&v.values)?;
    let dv = d_sim.matmul_tn(&u.values)?;
    Ok(PairLoss {
        value: total / b as f64,
        d_h: l2_normalize_backward(&u, &du),
        d_h_prime: l2_normalize_backward(&v, &dv),
    })
}

/// NT-Xent: the positive of anchor `h_i` is `h'_i`.
pub fn simclr_loss(views: &ViewPair, tau: f64) -> Result<PairLoss> {
    let b = views.h.rows();
    if b < 2 {
        return Err(Error::arg(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let positives: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
    contrastive(views, tau, &positives)
}

/// Supervised contrastive loss: the positives of anchor `i` are the other
/// samples sharing its label. An anchor without such a partner falls back to
/// its own second view.
pub fn supcon_loss(views: &ViewPair, tau: f64) -> Result<PairLoss> {
    let labels = views
        .labels
        .as_ref()
        .ok_or_else(|| Error::arg("supervised contrastive loss needs labels"))?;
    if labels.is_empty() {
        return Err(Error::arg("supervised contrastive loss needs a non-empty batch"));
    }
    let positives: Vec<Vec<usize>> = labels
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let p: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|&(q, l)| q != i && l == y)
                .map(|(q, _)| q)
                .collect();
            if p.is_empty() {
                vec![i]
            } else {
                p
            }
        })
        .collect();
    contrastive(views, tau, &positives)
}

/// Softmax over scaled cosine similarities to the prototypes.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    pub probs: Tensor,
    z: Normalized,
    c: Normalized,
    temperature: f64,
}

pub fn proto_soft_assign(z: &Tensor, bank: &PrototypeBank, temperature: f64) -> Result<SoftAssignment> {
    if bank.is_empty() {
        return Err(Error::state("prototype bank is empty"));
    }
    if temperature <= 0.0 {
        return Err(Error::arg("temperature must be positive"));
    }
    if z.cols() != bank.prototypes.cols() {
        return Err(Error::dim(format!(
            "features of width {} against prototypes of width {}",
            z.cols(),
            bank.prototypes.cols()
        )));
    }
    let zn = l2_normalize(z);
    let cn = l2_normalize(&bank.prototypes);
    let mut probs = zn.values.matmul_nt(&cn.values)?.scale(1.0 / temperature);
    for i in 0..probs.rows() {
        softmax_in_place(probs.row_mut(i));
    }
    Ok(SoftAssignment {
        probs,
        z: zn,
        c: cn,
        temperature,
    })
}

impl SoftAssignment {
    /// Gradients on the features and on the prototypes.
    pub fn backward(&self, d_probs: &Tensor) -> Result<(Tensor, Tensor)> {
        if d_probs.shape() != self.probs.shape() {
            return Err(Error::dim("probability gradient shape"));
        }
        let mut d_logits = d_probs.clone();
        for i in 0..d_logits.rows() {
            let p = self.probs.row(i);
            let g = d_logits.row_mut(i);
            let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            g.iter_mut().zip(p).for_each(|(gk, pk)| *gk = pk * (*gk - dot));
        }
        let d_logits = d_logits.scale(1.0 / self.temperature);
        let dz = d_logits.matmul(&self.c.values)?;
        let dc = d_logits.matmul_tn(&self.z.values)?;
        Ok((l2_normalize_backward(&self.z, &dz), l2_normalize_backward(&self.c, &dc)))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

const LOG_FLOOR: f64 = 1e-300;

/// Cross-entropy against constant teacher soft labels minus `epsilon` times
/// the entropy of the batch-mean student prediction. Pass both views stacked
/// to average the entropy term over both.
pub fn pseudo_loss(student: &Tensor, teacher: &Tensor, epsilon: f64) -> Result<Loss> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim(format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape())));
    }
    let n = student.rows();
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let nf = n as f64;
    let k = student.cols();
    let mut grad = Tensor::zeros(n, k);
    let mut ce = 0.0;
    for i in 0..n {
        let (p, q, g) = (student.row(i), teacher.row(i), grad.row_mut(i));
        for j in 0..k {
            if q[j] != 0.0 {
                let pj = p[j].max(LOG_FLOOR);
                ce -= q[j] * pj.ln();
                g[j] = -q[j] / (pj * nf);
            }
        }
    }
    let mean = student.mean_rows();
    let mut entropy = 0.0;
    let mut d_mean = vec![0.0; k];
    for j in 0..k {
        let m = mean[j].max(LOG_FLOOR);
        entropy -= mean[j] * m.ln();
        d_mean[j] = epsilon * (m.ln() + 1.0) / nf;
    }
    for i in 0..n {
        grad.row_mut(i).iter_mut().zip(&d_mean).for_each(|(g, d)| *g += d);
    }
    Ok(Loss {
        value: ce / nf - epsilon * entropy,
        grad,
    })
}

/// Mean negative log-probability of the true class.
pub fn ce_loss(student: &Tensor, labels: &[usize]) -> Result<Loss> {
    if labels.len() != student.rows() {
        return Err(Error::dim(format!("{} labels for {} rows", labels.len(), student.rows())));
    }
    if labels.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let (n, k) = (student.rows(), student.cols());
    let mut grad = Tensor::zeros(n, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::arg(format!("label {y} outside [0, {k})")));
        }
        let p = student.row(i)[y].max(LOG_FLOOR);
        total -= p.ln();
        grad.row_mut(i)[y] = -1.0 / (p * n as f64);
    }
    Ok(Loss {
        value: total / n as f64,
        grad,
    })
}

/// Mean squared Euclidean distance between projected current features and
/// the frozen previous model's features. The gradient is on `projected` only.
pub fn kd_loss(projected: &Tensor, frozen: &Tensor) -> Result<Loss> {
    if projected.shape() != frozen.shape() {
        return Err(Error::dim(format!("projected {:?} vs frozen {:?}", projected.shape(), frozen.shape())));
    }
    let n = projected.rows().max(1) as f64;
    let diff = projected.sub(frozen)?;
    Ok(Loss {
        value: diff.frobenius_sq() / n,
        grad: diff.scale(2.0 / n),
    })
}

/// Coefficients of the self-supervised, supervised and distillation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ssl: f64,
    pub sl: f64,
    pub kd: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            ssl: (1.0 - alpha) * (1.0 - beta),
            sl: (1.0 - alpha) * beta,
            kd: alpha,
        }
    }
}

/// `(1-α)((1-β)·ssl + β·sl) + α·kd`.
pub fn total_loss(ssl: f64, sl: f64, kd: f64, cfg: &LossConfig) -> f64 {
    let w = LossWeights::new(cfg.alpha, cfg.beta);
    w.ssl * ssl + w.sl * sl + w.kd * kd
}

/// Finite-difference check of every loss on random inputs of width `dim` and
/// `batch` rows. With `corrupt`, the analytic gradients are deliberately
/// perturbed so every check must fail.
pub fn gradient_checks(dim: usize, batch: usize, seed: u64, corrupt: bool) -> Vec<(&'static str, f64)> {
    let mut rng = crate::rng::stream(seed, &[0x6c6f_7373]);
    let mut randn = |r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
    };
    let k = 4;
    let h = randn(batch, dim);
    let hp = randn(batch, dim);
    let z = randn(2 * batch, dim);
    let protos = randn(k, dim);
    let frozen = randn(batch, dim);
    let teacher_src = randn(2 * batch, dim);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    let cfg = LossConfig::default();
    let bump = |g: &mut Vec<f64>| {
        if corrupt {
            g.iter_mut().for_each(|v| *v = *v * 1.5 + 0.05);
        }
    };

    let split = |t: &[f64], parts: &[(usize, usize)]| -> Vec<Tensor> {
        let mut off = 0;
        parts
            .iter()
            .map(|&(r, c)| {
                let out = Tensor::from_vec(r, c, t[off..off + r * c].to_vec()).expect("sized");
                off += r * c;
                out
            })
            .collect()
    };
    let cat = |ts: &[&Tensor]| -> Vec<f64> { ts.iter().flat_map(|t| t.data().iter().copied()).collect() };
    let bank_of = |c: Tensor| PrototypeBank {
        prototypes: c,
        trainable: true,
    };
    let teacher = proto_soft_assign(&teacher_src, &bank_of(protos.clone()), cfg.tau_t)
        .expect("valid")
        .probs;

    let mut out = Vec::new();
    let pair_shape = [(batch, dim), (batch, dim)];

    let simclr = |t: &[f64]| {
        let p = split(t, &pair_shape);
        let l = simclr_loss(&ViewPair::new(p[0].clone(), p[1].clone()).unwrap(), cfg.tau).unwrap();
        let mut g = cat(&[&l.d_h, &l.d_h_prime]);
        bump(&mut g);
        (l.value, g)
    };
    out.push(("simclr", grad_check(simclr, &cat(&[&h, &hp]))));

    let supcon = |t: &[f64]| {
        let p = split(t, &pair_shape);
        let views = ViewPair::new(p[0].clone(), p[1].clone()).unwrap().with_labels(labels.clone()).unwrap();
        let l = supcon_loss(&views, cfg.tau).unwrap();
        let mut g = cat(&[&l.d_h, &l.d_h_prime]);
        bump(&mut g);
        (l.value, g)
    };
    out.push(("supcon", grad_check(supcon, &cat(&[&h, &hp]))));

    let proto_shape = [(2 * batch, dim), (k, dim)];
    let pseudo = |t: &[f64]| {
        let p = split(t, &proto_shape);
        let sa = proto_soft_assign(&p[0], &bank_of(p[1].clone()), cfg.tau_s).unwrap();
        let l = pseudo_loss(&sa.probs, &teacher, cfg.epsilon).unwrap();
        let (dz, dc) = sa.backward(&l.grad).unwrap();
        let mut g = cat(&[&dz, &dc]);
        bump(&mut g);
        (l.value, g)
    };
    out.push(("pseudo_entropy", grad_check(pseudo, &cat(&[&z, &protos]))));

    let ce_labels: Vec<usize> = (0..2 * batch).map(|i| i % k).collect();
    let ce = |t: &[f64]| {
        let p = split(t, &proto_shape);
        let sa = proto_soft_assign(&p[0], &bank_of(p[1].clone()), cfg.tau_s).unwrap();
        let l = ce_loss(&sa.probs, &ce_labels).unwrap();
        let (dz, dc) = sa.backward(&l.grad).unwrap();
        let mut g = cat(&[&dz, &dc]);
        bump(&mut g);
        (l.value, g)
    };
    out.push(("ce", grad_check(ce, &cat(&[&z, &protos]))));

    let kd = |t: &[f64]| {
        let p = split(t, &[(batch, dim)]);
        let l = kd_loss(&p[0], &frozen).unwrap();
        let mut g = l.grad.data().to_vec();
        bump(&mut g);
        (l.value, g)
    };
    out.push(("kd", grad_check(kd, h.data())));

    // Full objective over both views, prototypes and the projected features.
    let total_shape = [(batch, dim), (batch, dim), (k, dim), (batch, dim)];
    let total = |t: &[f64]| {
        let p = split(t, &total_shape);
        let views = ViewPair::new(p[0].clone(), p[1].clone()).unwrap().with_labels(labels.clone()).unwrap();
        let bank = bank_of(p[2].clone());
        let w = LossWeights::new(cfg.alpha, cfg.beta);
        let sc = simclr_loss(&views, cfg.tau).unwrap();
        let sup = supcon_loss(&views, cfg.tau).unwrap();
        let both = Tensor::vstack(&[&p[0], &p[1]]).unwrap();
        let sa = proto_soft_assign(&both, &bank, cfg.tau_s).unwrap();
        let ps = pseudo_loss(&sa.probs, &teacher, cfg.epsilon).unwrap();
        let lab2: Vec<usize> = labels.iter().chain(&labels).map(|&y| y % k).collect();
        let c = ce_loss(&sa.probs, &lab2).unwrap();
        let kdl = kd_loss(&p[3], &frozen).unwrap();
        let value = total_loss(sc.value + ps.value, sup.value + c.value, kdl.value, &cfg);
        let d_probs = ps.grad.scale(w.ssl).add(&c.grad.scale(w.sl)).unwrap();
        let (dz, dc) = sa.backward(&d_probs).unwrap();
        let mut dh = sc.d_h.scale(w.ssl).add(&sup.d_h.scale(w.sl)).unwrap();
        let mut dhp = sc.d_h_prime.scale(w.ssl).add(&sup.d_h_prime.scale(w.sl)).unwrap();
        dh.add_assign(&dz.slice_rows(0, batch)).unwrap();
        dhp.add_assign(&dz.slice_rows(batch, 2 * batch)).unwrap();
        let mut g = cat(&[&dh, &dhp, &dc, &kdl.grad.scale(w.kd)]);
        bump(&mut g);
        (value, g)
    };
    out.push(("total", grad_check(total, &cat(&[&h, &hp, &protos, &randn(batch, dim)]))));
    out
}
