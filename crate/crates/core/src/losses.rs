//! Training objectives and their weighted combination.
//!
//! Every loss is built on the caller's tape so that one backward pass through
//! the total reaches all parameters. Distances between embeddings are
//! `1 - cosine` throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::model::{BoundLinear, BoundModel, ForwardOutput};
use crate::synthgen::Modality;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("identity label {label} out of range for {num_ids} identities")]
    Label { label: usize, num_ids: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Dimension(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights and margins of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_o: f64,
    pub lambda_f: f64,
    /// Triplet margin of the fusion loss.
    pub margin_alpha: f64,
    /// Minimum separation between class centers in the center-cluster loss.
    pub cc_margin_rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_m: 0.4,
            lambda_o: 0.6,
            lambda_f: 0.4,
            margin_alpha: 0.3,
            cc_margin_rho: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [
            ("lambda_m", self.lambda_m),
            ("lambda_o", self.lambda_o),
            ("lambda_f", self.lambda_f),
            ("margin_alpha", self.margin_alpha),
            ("cc_margin_rho", self.cc_margin_rho),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Form of the orthogonality loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthForm {
    /// Mean squared cosine; zero exactly when every pair is orthogonal.
    #[default]
    Squared,
    /// Mean signed cosine.
    Raw,
}

/// Everything [`loss_total`] needs besides the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub orth_form: OrthForm,
    pub grl_coeff: f64,
    /// When false the doubled-label term is left out (reported as 0).
    pub related_loss: bool,
    pub num_ids: usize,
}

/// Detached per-term values of one evaluation of the total loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_yme: f64,
    pub l_ymr: f64,
    pub l_m: f64,
    pub l_o: f64,
    pub l_f: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.l_yme + self.l_ymr + w.lambda_m * self.l_m + w.lambda_o * self.l_o + w.lambda_f * self.l_f
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("l_yme", self.l_yme),
            ("l_ymr", self.l_ymr),
            ("l_m", self.l_m),
            ("l_o", self.l_o),
            ("l_f", self.l_f),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Splits every identity into one class per modality: `2y` for V, `2y+1` for I.
pub fn double_labels(ids: &[usize], modalities: &[Modality], num_ids: usize) -> Result<Vec<usize>> {
    if ids.len() != modalities.len() {
        return Err(LossError::Dimension(format!(
            "{} labels but {} modalities",
            ids.len(),
            modalities.len()
        )));
    }
    ids.iter()
        .zip(modalities)
        .map(|(&y, &m)| {
            if y >= num_ids {
                Err(LossError::Label { label: y, num_ids })
            } else {
                Ok(2 * y + m.index())
            }
        })
        .collect()
}

fn check_rows(tape: &Tape, z: Var, labels: &[usize]) -> Result<()> {
    let rows = tape.value(z).rows();
    if rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    if rows != labels.len() {
        return Err(LossError::Dimension(format!("{rows} rows but {} labels", labels.len())));
    }
    Ok(())
}

/// Orthogonality between the related and erased embeddings of each sample.
pub fn loss_orth(tape: &mut Tape, z_r: Var, z_e: Var, form: OrthForm) -> Result<Var> {
    let (sr, se) = (tape.value(z_r).shape(), tape.value(z_e).shape());
    if sr != se {
        return Err(LossError::Dimension(format!(
            "orthogonality needs equal shapes, got {sr:?} and {se:?}"
        )));
    }
    if sr.0 == 0 {
        return Err(LossError::EmptyBatch);
    }
    let cos = tape.cosine(z_r, z_e)?;
    let per_row = match form {
        OrthForm::Squared => tape.square(cos),
        OrthForm::Raw => cos,
    };
    Ok(tape.mean(per_row))
}

/// Center-cluster loss: squared distance of each sample to its batch class
/// mean, plus a squared hinge keeping every pair of class means at least
/// `rho` apart.
pub fn loss_cc(tape: &mut Tape, z: Var, labels: &[usize], rho: f64) -> Result<Var> {
    check_rows(tape, z, labels)?;
    let b = labels.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let slot = |y: usize| classes.binary_search(&y).expect("present");

    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[slot(y)] += 1;
    }
    let mut avg = Tensor::zeros(k, b);
    let mut assign = Tensor::zeros(b, k);
    for (i, &y) in labels.iter().enumerate() {
        let c = slot(y);
        avg.data_mut()[c * b + i] = 1.0 / counts[c] as f64;
        assign.data_mut()[i * k + c] = 1.0;
    }
    let avg = tape.leaf(avg);
    let centers = tape.matmul(avg, z)?;
    let assign = tape.leaf(assign);
    let own = tape.matmul(assign, centers)?;
    let diff = tape.sub(z, own)?;
    let sq = tape.square(diff);
    let total_sq = tape.sum(sq);
    let pull = tape.scale(total_sq, 1.0 / b as f64);
    if k < 2 {
        return Ok(pull);
    }

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|j| (j + 1..k).map(move |l| (j, l))).collect();
    let mut sel = Tensor::zeros(pairs.len(), k);
    for (p, &(j, l)) in pairs.iter().enumerate() {
        sel.data_mut()[p * k + j] = 1.0;
        sel.data_mut()[p * k + l] = -1.0;
    }
    let sel = tape.leaf(sel);
    let center_diff = tape.matmul(sel, centers)?;
    let dist = tape.row_norm(center_diff);
    let neg = tape.scale(dist, -1.0);
    let margin = tape.add_scalar(neg, rho);
    let hinge = tape.relu(margin);
    let hinge_sq = tape.square(hinge);
    let push = tape.mean(hinge_sq);
    Ok(tape.add(pull, push)?)
}

/// Identity cross-entropy on the erased embedding plus its center-cluster loss.
pub fn loss_yme(
    tape: &mut Tape,
    classifier: &BoundLinear,
    z_e: Var,
    ids: &[usize],
    rho: f64,
) -> Result<Var> {
    check_rows(tape, z_e, ids)?;
    let logits = classifier.apply(tape, z_e).map_err(model_err)?;
    let ce = tape.softmax_cross_entropy(logits, ids)?;
    let cc = loss_cc(tape, z_e, ids, rho)?;
    Ok(tape.add(ce, cc)?)
}

/// Modality confusion: cross-entropy of the modality classifier applied to the
/// gradient-reversed erased embedding.
pub fn loss_m(
    tape: &mut Tape,
    classifier: &BoundLinear,
    z_e: Var,
    modalities: &[Modality],
    coeff: f64,
) -> Result<Var> {
    let labels: Vec<usize> = modalities.iter().map(|m| m.index()).collect();
    check_rows(tape, z_e, &labels)?;
    let reversed = tape.grad_reverse(z_e, coeff);
    let logits = classifier.apply(tape, reversed).map_err(model_err)?;
    Ok(tape.softmax_cross_entropy(logits, &labels)?)
}

/// Doubled-label cross-entropy on the related embedding plus its
/// center-cluster loss over the doubled labels.
pub fn loss_ymr(
    tape: &mut Tape,
    classifier: &BoundLinear,
    z_r: Var,
    ids: &[usize],
    modalities: &[Modality],
    num_ids: usize,
    rho: f64,
) -> Result<Var> {
    let doubled = double_labels(ids, modalities, num_ids)?;
    check_rows(tape, z_r, &doubled)?;
    let logits = classifier.apply(tape, z_r).map_err(model_err)?;
    let ce = tape.softmax_cross_entropy(logits, &doubled)?;
    let cc = loss_cc(tape, z_r, &doubled, rho)?;
    Ok(tape.add(ce, cc)?)
}

fn model_err(e: crate::model::ModelError) -> LossError {
    match e {
        crate::model::ModelError::Autodiff(a) => LossError::Autodiff(a),
        other => LossError::Dimension(other.to_string()),
    }
}

/// `concat(l2n(z_e), l2n(z_r))` on the tape.
pub fn fused(tape: &mut Tape, z_e: Var, z_r: Var) -> Result<Var> {
    let e = tape.l2_normalize(z_e)?;
    let r = tape.l2_normalize(z_r)?;
    Ok(tape.concat_cols(e, r)?)
}

/// Batch-hard mining result for one anchor of the fusion loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionTriplet {
    pub anchor: usize,
    /// Hardest same-modality positive under the fused distance.
    pub pos_same: usize,
    /// Hardest same-modality negative under the fused distance.
    pub neg_same: usize,
    /// Hardest cross-modality positive under the erased distance.
    pub pos_cross: usize,
    /// Hardest cross-modality negative under the erased distance.
    pub neg_cross: usize,
}

/// Picks the four batch-hard partners of every anchor from cosine matrices.
/// Anchors missing any partner are left out. Ties go to the lower index.
pub fn mine_fusion_triplets(
    cos_e: &Tensor,
    cos_f: &Tensor,
    ids: &[usize],
    modalities: &[Modality],
) -> Vec<FusionTriplet> {
    let b = ids.len();
    let pick = |j: usize, cos: &Tensor, same_id: bool, same_mod: bool, hardest_far: bool| {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..b {
            if i == j || (ids[i] == ids[j]) != same_id || (modalities[i] == modalities[j]) != same_mod {
                continue;
            }
            let d = 1.0 - cos.get(j, i);
            let better = match best {
                None => true,
                Some((_, bd)) => {
                    if hardest_far {
                        d > bd
                    } else {
                        d < bd
                    }
                }
            };
            if better {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    };
    (0..b)
        .filter_map(|j| {
            Some(FusionTriplet {
                anchor: j,
                pos_same: pick(j, cos_f, true, true, true)?,
                neg_same: pick(j, cos_f, false, true, false)?,
                pos_cross: pick(j, cos_e, true, false, true)?,
                neg_cross: pick(j, cos_e, false, false, false)?,
            })
        })
        .collect()
}

/// Mixed cross-modal triplet loss balancing fused same-modality distances
/// against erased cross-modality distances:
///
/// `max(D_f(j,p) - D_e(j,ñ) + α, 0) + max(D_e(j,p̃) - D_f(j,n) + α, 0)`
///
/// averaged over anchors that have all four partners.
pub fn loss_fusion(
    tape: &mut Tape,
    z_e: Var,
    z_f: Var,
    ids: &[usize],
    modalities: &[Modality],
    alpha: f64,
) -> Result<Var> {
    check_rows(tape, z_e, ids)?;
    if tape.value(z_f).rows() != ids.len() || modalities.len() != ids.len() {
        return Err(LossError::Dimension("fusion inputs disagree on batch size".into()));
    }
    let e = tape.l2_normalize(z_e)?;
    let f = tape.l2_normalize(z_f)?;
    let et = tape.transpose(e);
    let ft = tape.transpose(f);
    let cos_e = tape.matmul(e, et)?;
    let cos_f = tape.matmul(f, ft)?;
    let triplets = mine_fusion_triplets(tape.value(cos_e), tape.value(cos_f), ids, modalities);
    if triplets.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let at = |sel: fn(&FusionTriplet) -> usize| -> Vec<(usize, usize)> {
        triplets.iter().map(|t| (t.anchor, sel(t))).collect()
    };
    let c_fp = tape.gather_elements(cos_f, &at(|t| t.pos_same))?;
    let c_fn = tape.gather_elements(cos_f, &at(|t| t.neg_same))?;
    let c_ep = tape.gather_elements(cos_e, &at(|t| t.pos_cross))?;
    let c_en = tape.gather_elements(cos_e, &at(|t| t.neg_cross))?;
    // D_f(p) - D_e(ñ) = cos_e(ñ) - cos_f(p)
    let a = tape.sub(c_en, c_fp)?;
    let a = tape.add_scalar(a, alpha);
    let a = tape.relu(a);
    // D_e(p̃) - D_f(n) = cos_f(n) - cos_e(p̃)
    let b = tape.sub(c_fn, c_ep)?;
    let b = tape.add_scalar(b, alpha);
    let b = tape.relu(b);
    let both = tape.add(a, b)?;
    Ok(tape.mean(both))
}

/// Builds the weighted total and returns it with the detached breakdown.
pub fn loss_total(
    tape: &mut Tape,
    model: &BoundModel,
    fwd: &ForwardOutput,
    ids: &[usize],
    modalities: &[Modality],
    objective: &Objective,
) -> Result<(Var, LossBreakdown)> {
    let w = &objective.weights;
    let l_yme = loss_yme(tape, &model.id_classifier, fwd.z_e, ids, w.cc_margin_rho)?;
    let l_ymr = if objective.related_loss {
        Some(loss_ymr(
            tape,
            &model.related_classifier,
            fwd.z_r,
            ids,
            modalities,
            objective.num_ids,
            w.cc_margin_rho,
        )?)
    } else {
        None
    };
    let l_m = loss_m(tape, &model.modality_classifier, fwd.z_e, modalities, objective.grl_coeff)?;
    let l_o = loss_orth(tape, fwd.z_r, fwd.z_e, objective.orth_form)?;
    let z_f = fused(tape, fwd.z_e, fwd.z_r)?;
    let l_f = loss_fusion(tape, fwd.z_e, z_f, ids, modalities, w.margin_alpha)?;

    let mut total = l_yme;
    if let Some(r) = l_ymr {
        total = tape.add(total, r)?;
    }
    for (term, lambda) in [(l_m, w.lambda_m), (l_o, w.lambda_o), (l_f, w.lambda_f)] {
        let scaled = tape.scale(term, lambda);
        total = tape.add(total, scaled)?;
    }
    let v = |x: Var| tape.value(x).item();
    let breakdown = LossBreakdown {
        l_yme: v(l_yme),
        l_ymr: l_ymr.map_or(0.0, v),
        l_m: v(l_m),
        l_o: v(l_o),
        l_f: v(l_f),
        total: v(total),
    };
    Ok((total, breakdown))
}
