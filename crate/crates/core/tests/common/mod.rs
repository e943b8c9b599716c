#![allow(dead_code)]

use mixer_core::autodiff::Tape;
use mixer_core::losses::{self, LossWeights, Objective, OrthForm};
use mixer_core::model::{self, BoundModel, ForwardOutput, MixerModel, ModelConfig};
use mixer_core::rng;
use mixer_core::synthgen::{Modality, Sample, Split};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn tiny_model(seed: u64) -> MixerModel {
    MixerModel::new(ModelConfig {
        input_dim: 6,
        hidden_dims: vec![5],
        d_e: 4,
        d_r: 4,
        num_ids: 3,
        seed,
    })
    .unwrap()
}

/// Mixed batch: 2–3 identities, each with 1–3 samples per modality.
pub fn random_batch(seed: u64) -> Vec<Sample> {
    let mut r = rng::stream(seed, &[0xba7c4]);
    let ids = r.random_range(2..=3);
    let mut out = Vec::new();
    for id in 0..ids {
        for m in Modality::ALL {
            for _ in 0..r.random_range(1..=3) {
                out.push(Sample {
                    features: (0..6).map(|_| StandardNormal.sample(&mut r)).collect(),
                    id,
                    modality: m,
                    camera: m.index(),
                    split: Split::Train,
                });
            }
        }
    }
    out
}

pub type LossFn = fn(&mut Tape, &BoundModel, &ForwardOutput, &[usize], &[Modality], &Objective) -> mixer_core::autodiff::Var;

pub fn objective(grl: f64) -> Objective {
    Objective {
        weights: LossWeights::default(),
        orth_form: OrthForm::Squared,
        grl_coeff: grl,
        related_loss: true,
        num_ids: 3,
    }
}

/// Loss value and analytic parameter gradients (flattened, parameter order).
pub fn analytic(model: &MixerModel, batch: &[Sample], obj: &Objective, f: LossFn) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let refs: Vec<&Sample> = batch.iter().collect();
    let (x, mods) = model::batch_inputs(&mut tape, &refs, model.config.input_dim).unwrap();
    let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
    let fwd = bound.forward(&mut tape, x, &mods).unwrap();
    let loss = f(&mut tape, &bound, &fwd, &ids, &mods, obj);
    tape.backward(loss).unwrap();
    let grads = bound.params.iter().flat_map(|&p| tape.grad(p).data().to_vec()).collect();
    (tape.value(loss).item(), grads)
}

pub fn value(model: &MixerModel, batch: &[Sample], obj: &Objective, f: LossFn) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let refs: Vec<&Sample> = batch.iter().collect();
    let (x, mods) = model::batch_inputs(&mut tape, &refs, model.config.input_dim).unwrap();
    let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
    let fwd = bound.forward(&mut tape, x, &mods).unwrap();
    let loss = f(&mut tape, &bound, &fwd, &ids, &mods, obj);
    tape.value(loss).item()
}

/// Central differences over every parameter element.
pub fn numeric(model: &MixerModel, batch: &[Sample], obj: &Objective, f: LossFn) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.parameter_count());
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    for (t, &n) in shapes.iter().enumerate() {
        for j in 0..n {
            let orig = probe.params()[t].data()[j];
            probe.params_mut()[t].data_mut()[j] = orig + FD_STEP;
            let up = value(&probe, batch, obj, f);
            probe.params_mut()[t].data_mut()[j] = orig - FD_STEP;
            let down = value(&probe, batch, obj, f);
            probe.params_mut()[t].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Largest elementwise difference relative to the larger gradient scale.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Number of leading flattened entries that sit upstream of the gradient
/// reversal (backbone and erased head).
pub fn upstream_of_grl(model: &MixerModel) -> usize {
    let backbone: usize = model.backbone.iter().map(|l| l.weight.len() + l.bias.len()).sum();
    backbone + model.erased_head.weight.len() + model.erased_head.bias.len()
}

/// Offset of the modality classifier in the flattened gradient.
pub fn modality_classifier_offset(model: &MixerModel) -> usize {
    model.parameter_count() - model.modality_classifier.weight.len() - model.modality_classifier.bias.len()
}

pub fn loss_yme(t: &mut Tape, m: &BoundModel, f: &ForwardOutput, ids: &[usize], _: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    losses::loss_yme(t, &m.id_classifier, f.z_e, ids, o.weights.cc_margin_rho).unwrap()
}

pub fn loss_ymr(t: &mut Tape, m: &BoundModel, f: &ForwardOutput, ids: &[usize], mods: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    losses::loss_ymr(t, &m.related_classifier, f.z_r, ids, mods, o.num_ids, o.weights.cc_margin_rho).unwrap()
}

pub fn loss_m(t: &mut Tape, m: &BoundModel, f: &ForwardOutput, _: &[usize], mods: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    losses::loss_m(t, &m.modality_classifier, f.z_e, mods, o.grl_coeff).unwrap()
}

pub fn loss_orth(t: &mut Tape, _: &BoundModel, f: &ForwardOutput, _: &[usize], _: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    losses::loss_orth(t, f.z_r, f.z_e, o.orth_form).unwrap()
}

pub fn loss_fusion(t: &mut Tape, _: &BoundModel, f: &ForwardOutput, ids: &[usize], mods: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    let z_f = losses::fused(t, f.z_e, f.z_r).unwrap();
    losses::loss_fusion(t, f.z_e, z_f, ids, mods, o.weights.margin_alpha).unwrap()
}

pub fn loss_total(t: &mut Tape, m: &BoundModel, f: &ForwardOutput, ids: &[usize], mods: &[Modality], o: &Objective) -> mixer_core::autodiff::Var {
    losses::loss_total(t, m, f, ids, mods, o).unwrap().0
}

/// Worst relative error between analytic and numeric gradients of `f`,
/// with the reversal applied to the numeric gradient of the modality term.
pub fn gradient_error(seed: u64, f: LossFn, name: &str) -> f64 {
    let model = tiny_model(seed);
    let batch = random_batch(seed);
    let obj = objective(1.0);
    let (_, a) = analytic(&model, &batch, &obj, f);
    let mut n = numeric(&model, &batch, &obj, f);
    let reversed_weight = match name {
        "l_m" => 1.0,
        "total" => obj.weights.lambda_m,
        _ => 0.0,
    };
    if reversed_weight > 0.0 {
        let lm = numeric(&model, &batch, &obj, loss_m);
        let upstream = upstream_of_grl(&model);
        for i in 0..upstream {
            n[i] -= (1.0 + obj.grl_coeff) * reversed_weight * lm[i];
        }
    }
    relative_error(&a, &n)
}

/// Gradients of the modality loss with and without the reversal layer.
pub fn modality_grads(seed: u64, coeff: Option<f64>) -> Vec<f64> {
    let m = tiny_model(seed);
    let batch = random_batch(seed);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let refs: Vec<&Sample> = batch.iter().collect();
    let (x, mods) = model::batch_inputs(&mut tape, &refs, m.config.input_dim).unwrap();
    let fwd = bound.forward(&mut tape, x, &mods).unwrap();
    let labels: Vec<usize> = mods.iter().map(|m| m.index()).collect();
    let input = match coeff {
        Some(c) => tape.grad_reverse(fwd.z_e, c),
        None => fwd.z_e,
    };
    let logits = bound.modality_classifier.apply(&mut tape, input).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    bound.params.iter().flat_map(|&p| tape.grad(p).data().to_vec()).collect()
}
