//! PK batch sampling, Adam with linear warm-up and step decay, and the
//! end-to-end training loop over the total objective.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::losses::{self, LossBreakdown, LossError, LossWeights, Objective, OrthForm};
use crate::model::{self, MixerModel, ModelError};
use crate::rng;
use crate::synthgen::{Dataset, Modality, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: u64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("history file: {0}")]
    History(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// `(epoch, factor)`: from `epoch` on the rate is `base_lr · factor`.
    pub decay_epochs: Vec<(usize, f64)>,
    pub p_ids: usize,
    pub k_per_modality: usize,
    pub weights: LossWeights,
    pub grl_coeff: f64,
    pub orth_form: OrthForm,
    /// Include the doubled-label related loss.
    pub related_loss: bool,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for every layer after the backbone (heads and
    /// classifiers, including the adversarial modality classifier).
    pub head_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            base_lr: 0.0004,
            warmup_epochs: 10,
            decay_epochs: vec![(30, 0.1), (45, 0.01)],
            p_ids: 10,
            k_per_modality: 8,
            weights: LossWeights::default(),
            grl_coeff: 1.0,
            orth_form: OrthForm::Squared,
            related_loss: true,
            adam: AdamConfig::default(),
            head_lr_scale: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.p_ids < 2 {
            return fail(format!("p_ids must be >= 2, got {}", self.p_ids));
        }
        if self.k_per_modality < 2 {
            return fail(format!("k_per_modality must be >= 2, got {}", self.k_per_modality));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.head_lr_scale.is_finite() && self.head_lr_scale > 0.0) {
            return fail(format!("head_lr_scale must be positive, got {}", self.head_lr_scale));
        }
        if !(self.grl_coeff.is_finite() && self.grl_coeff >= 0.0) {
            return fail(format!("grl_coeff must be >= 0, got {}", self.grl_coeff));
        }
        self.weights.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn objective(&self, num_ids: usize) -> Objective {
        Objective {
            weights: self.weights,
            orth_form: self.orth_form,
            grl_coeff: self.grl_coeff,
            related_loss: self.related_loss,
            num_ids,
        }
    }
}

/// Learning rate for `epoch` (0-based): linear warm-up to `base_lr`, then the
/// factor of the latest decay threshold reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let factor = cfg
        .decay_epochs
        .iter()
        .filter(|(e, _)| epoch >= *e)
        .max_by_key(|(e, _)| *e)
        .map_or(1.0, |(_, f)| *f);
    cfg.base_lr * factor
}

/// Adam first/second moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    adam_step_per_param(params, grads, state, &vec![lr; params.len()], cfg);
}

/// [`adam_step`] with one learning rate per parameter tensor.
pub fn adam_step_per_param(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lrs: &[f64],
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        let lr = lrs[i];
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj / c1;
            let v_hat = vj / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Per-identity sample pools for PK sampling.
#[derive(Debug, Clone)]
pub struct PkSampler<'a> {
    ids: Vec<usize>,
    /// `pools[i][modality]` for identity `ids[i]`.
    pools: Vec<[Vec<&'a Sample>; 2]>,
}

impl<'a> PkSampler<'a> {
    /// Fails if any identity is missing a modality entirely.
    pub fn new(samples: &[&'a Sample]) -> Result<Self> {
        let mut by_id: BTreeMap<usize, [Vec<&'a Sample>; 2]> = BTreeMap::new();
        for s in samples {
            by_id.entry(s.id).or_default()[s.modality.index()].push(*s);
        }
        for (id, pools) in &by_id {
            for m in Modality::ALL {
                if pools[m.index()].is_empty() {
                    return Err(TrainError::Sampling(format!("identity {id} has no {m} samples")));
                }
            }
        }
        let (ids, pools) = by_id.into_iter().unzip();
        Ok(PkSampler { ids, pools })
    }

    pub fn num_ids(&self) -> usize {
        self.ids.len()
    }

    /// `p` identities, each with `k` visible then `k` infrared samples.
    /// Pools smaller than `k` are drawn with replacement.
    pub fn sample(&self, p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<&'a Sample>> {
        if p > self.ids.len() {
            return Err(TrainError::Sampling(format!(
                "requested {p} identities, only {} available",
                self.ids.len()
            )));
        }
        let mut batch = Vec::with_capacity(2 * p * k);
        for slot in index::sample(rng, self.ids.len(), p) {
            for pool in &self.pools[slot] {
                if pool.len() >= k {
                    batch.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
                } else {
                    batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
                }
            }
        }
        Ok(batch)
    }
}

/// Convenience wrapper over [`PkSampler`].
pub fn sample_batch<'a>(train: &[&'a Sample], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<&'a Sample>> {
    PkSampler::new(train)?.sample(p, k, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub losses: LossBreakdown,
}

/// Model plus optimizer progress; enough to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: MixerModel,
    pub optimizer: AdamState,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn fresh(model: MixerModel) -> Self {
        let optimizer = AdamState::new(&model.params());
        TrainState {
            model,
            optimizer,
            epochs_completed: 0,
        }
    }

    pub fn from_checkpoint(ck: model::Checkpoint) -> Self {
        let optimizer = match ck.moments {
            Some((m, v)) => AdamState { m, v, step: ck.step },
            None => AdamState {
                step: ck.step,
                ..AdamState::new(&ck.model.params())
            },
        };
        TrainState {
            model: ck.model,
            optimizer,
            epochs_completed: ck.epochs_completed,
        }
    }

    pub fn to_checkpoint(&self) -> model::Checkpoint {
        model::Checkpoint {
            model: self.model.clone(),
            epochs_completed: self.epochs_completed,
            step: self.optimizer.step,
            moments: Some((self.optimizer.m.clone(), self.optimizer.v.clone())),
        }
    }
}

pub fn iterations_per_epoch(train_size: usize, batch_size: usize) -> usize {
    (train_size / batch_size.max(1)).max(1)
}

const TAG_EPOCH: u64 = 0x65706f6368;

/// Per-tensor learning rates: `lr` for the backbone, `lr · head_scale` for
/// everything after it.
pub fn layer_rates(model: &MixerModel, lr: f64, head_scale: f64) -> Vec<f64> {
    let backbone = 2 * model.backbone.len();
    (0..model.params().len())
        .map(|i| if i < backbone { lr } else { lr * head_scale })
        .collect()
}

/// Runs one optimizer step on `batch`; returns the loss breakdown.
pub fn train_step(
    model: &mut MixerModel,
    optimizer: &mut AdamState,
    batch: &[&Sample],
    objective: &Objective,
    lrs: &[f64],
    adam: &AdamConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (x, modalities) = model::batch_inputs(&mut tape, batch, model.config.input_dim)?;
    let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
    let fwd = bound.forward(&mut tape, x, &modalities)?;
    let (total, breakdown) = losses::loss_total(&mut tape, &bound, &fwd, &ids, &modalities, objective)?;
    if let Some(component) = breakdown.non_finite() {
        return Err(TrainError::NonFinite {
            component: component.into(),
            epoch: 0,
            step: optimizer.step,
        });
    }
    tape.backward(total).map_err(LossError::from)?;
    let grads: Vec<&Tensor> = bound.params.iter().map(|&p| tape.grad(p)).collect();
    let mut params = model.params_mut();
    adam_step_per_param(&mut params, &grads, optimizer, lrs, adam);
    Ok(breakdown)
}

/// Trains from `state` until `cfg.epochs` epochs are completed. Each epoch
/// draws its batches from its own seeded stream, so a resumed run matches an
/// uninterrupted one.
pub fn train_from(mut state: TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochRecord>)> {
    cfg.validate()?;
    let train = dataset.train();
    let sampler = PkSampler::new(&train)?;
    let p = cfg.p_ids.min(sampler.num_ids());
    if p < 2 {
        return Err(TrainError::Sampling("need at least 2 identities with both modalities".into()));
    }
    let k = cfg.k_per_modality;
    let iters = iterations_per_epoch(train.len(), 2 * p * k);
    let objective = cfg.objective(state.model.config.num_ids);
    let mut history = Vec::new();
    for epoch in state.epochs_completed..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let lrs = layer_rates(&state.model, lr, cfg.head_lr_scale);
        let mut rng = rng::stream(cfg.seed, &[TAG_EPOCH, epoch as u64]);
        let mut sums = LossBreakdown::default();
        for _ in 0..iters {
            let batch = sampler.sample(p, k, &mut rng)?;
            let b = train_step(&mut state.model, &mut state.optimizer, &batch, &objective, &lrs, &cfg.adam)
                .map_err(|e| match e {
                    TrainError::NonFinite { component, step, .. } => TrainError::NonFinite { component, epoch, step },
                    other => other,
                })?;
            if !state.model.is_finite() {
                return Err(TrainError::NonFinite {
                    component: "parameters".into(),
                    epoch,
                    step: state.optimizer.step,
                });
            }
            sums.l_yme += b.l_yme;
            sums.l_ymr += b.l_ymr;
            sums.l_m += b.l_m;
            sums.l_o += b.l_o;
            sums.l_f += b.l_f;
            sums.total += b.total;
        }
        let n = iters as f64;
        let losses = LossBreakdown {
            l_yme: sums.l_yme / n,
            l_ymr: sums.l_ymr / n,
            l_m: sums.l_m / n,
            l_o: sums.l_o / n,
            l_f: sums.l_f / n,
            total: sums.total / n,
        };
        history.push(EpochRecord { epoch, lr, losses });
        state.epochs_completed = epoch + 1;
    }
    Ok((state, history))
}

pub fn train(model: MixerModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(MixerModel, Vec<EpochRecord>)> {
    let (state, history) = train_from(TrainState::fresh(model), dataset, cfg)?;
    Ok((state.model, history))
}

pub const HISTORY_HEADER: &str = "epoch,lr,l_yme,l_ymr,l_m,l_o,l_f,total";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, l.l_yme, l.l_ymr, l.l_m, l.l_o, l.l_f, l.total
        )
        .expect("string write");
    }
    out
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(TrainError::History("missing or unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| TrainError::History(format!("line {}: {m}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("{} fields, expected 8", f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|e| bad(format!("field {j}: {e}")));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                lr: num(1)?,
                losses: LossBreakdown {
                    l_yme: num(2)?,
                    l_ymr: num(3)?,
                    l_m: num(4)?,
                    l_o: num(5)?,
                    l_f: num(6)?,
                    total: num(7)?,
                },
            })
        })
        .collect()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    std::fs::write(path, history_csv(history))
}
