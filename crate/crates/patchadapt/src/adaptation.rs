//! Adversarial alignment: gradient reversal, frame/relation/video domain
//! discriminators, entropy-driven domain attention, verb/noun classifiers,
//! and the attentive entropy losses — everything that turns the extracted
//! features into the adaptation objective.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Tape, Var};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{init_linear, ParamGroup, ParamId, ParamStore};

/// Adversarial warm-up: lambda(p) = 2/(1+exp(-10p)) - 1 over training
/// progress p in [0,1].
pub fn grl_schedule(progress: f64) -> f32 {
    let p = progress.clamp(0.0, 1.0);
    (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0) as f32
}

/// Shannon entropy of a probability vector, natural log, 0*ln 0 = 0.
pub fn entropy(probs: &[f32]) -> Result<f32> {
    let mut sum = 0.0f64;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::invalid_input(format!(
                "entropy: probability {p} is negative or non-finite"
            )));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid_input(format!(
            "entropy: probabilities sum to {sum}, not 1"
        )));
    }
    let h: f64 = probs
        .iter()
        .map(|&p| {
            let p = p as f64;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok(h as f32)
}

/// Domain-attention weight from a 2-class domain prediction:
/// w = 1 - H(probs)/ln 2, in [0,1]; high when the discriminator is confident
/// (large domain discrepancy at that scale).
pub fn attention_weight(probs: &[f32; 2]) -> Result<f32> {
    let h = entropy(probs)?;
    Ok((1.0 - h / std::f32::consts::LN_2).clamp(0.0, 1.0))
}

fn domain_index(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Two-layer domain discriminator: FeatDim -> FeatDim/4 -> 2 logits.
pub struct Discriminator {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    feat_dim: usize,
}

impl Discriminator {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        feat_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Discriminator {
        let hidden = (feat_dim / 4).max(2);
        let l1 = init_linear(store, &format!("{name}.0"), ParamGroup::Adapt, feat_dim, hidden, rng);
        let l2 = init_linear(store, &format!("{name}.1"), ParamGroup::Adapt, hidden, 2, rng);
        Discriminator { l1, l2, feat_dim }
    }

    /// (N, FeatDim) -> (N, 2) domain logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.feat_dim {
            return Err(Error::invalid_input(format!(
                "discriminator expects (N,{}), got {shape:?}",
                self.feat_dim
            )));
        }
        let w1 = store.on_tape(tape, self.l1.0);
        let b1 = store.on_tape(tape, self.l1.1);
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        let w2 = store.on_tape(tape, self.l2.0);
        let b2 = store.on_tape(tape, self.l2.1);
        Ok(tape.linear(h, w2, b2))
    }
}

/// Result of one adversarial loss evaluation.
pub struct DomainLoss {
    pub loss: Var,
    /// Softmax probabilities per row, detached (plain values) — consumed by
    /// domain attention and attentive entropy.
    pub probs: Array2<f32>,
    /// True when the batch contained a single domain: the loss is defined but
    /// the adversarial signal is degenerate.
    pub degenerate: bool,
}

/// Mean 2-class cross-entropy of `disc` on GRL-reversed features vs domain
/// tags. Used verbatim for frame-level (z rows), relation-level (r^n rows),
/// and video-level features.
pub fn domain_adversarial_loss(
    tape: &mut Tape,
    store: &ParamStore,
    disc: &Discriminator,
    feats: Var,
    domains: &[Domain],
    lambda: f32,
) -> Result<DomainLoss> {
    let n = tape.value(feats).shape()[0];
    if n != domains.len() {
        return Err(Error::invalid_input(format!(
            "domain loss: {n} feature rows vs {} domain tags",
            domains.len()
        )));
    }
    let reversed = tape.grl(feats, lambda);
    let logits = disc.forward(tape, store, reversed)?;
    let labels: Vec<usize> = domains.iter().map(|&d| domain_index(d)).collect();
    let loss = tape.cross_entropy_mean(logits, &labels);

    let lv = tape.value(logits);
    let mut probs = Array2::<f32>::zeros((n, 2));
    for i in 0..n {
        let row = ndarray::Array1::from_vec(vec![lv[[i, 0]], lv[[i, 1]]]);
        probs.row_mut(i).assign(&softmax_row(&row));
    }
    let first = domains[0];
    let degenerate = domains.iter().all(|&d| d == first);
    Ok(DomainLoss { loss, probs, degenerate })
}

/// Residual domain attention for one clip: r_tilde^n = (1 + w^n) * r^n.
/// Weights are plain constants (detached), per the attention design.
pub fn apply_domain_attention(
    tape: &mut Tape,
    r: &BTreeMap<usize, Var>,
    w: &BTreeMap<usize, f32>,
) -> Result<BTreeMap<usize, Var>> {
    if r.keys().ne(w.keys()) {
        return Err(Error::invalid_input(format!(
            "attention scales {:?} do not match relation scales {:?}",
            w.keys().collect::<Vec<_>>(),
            r.keys().collect::<Vec<_>>()
        )));
    }
    let mut out = BTreeMap::new();
    for (&n, &rv) in r {
        let wn = w[&n];
        if !(0.0..=1.0).contains(&wn) {
            return Err(Error::invalid_input(format!(
                "attention weight {wn} for scale {n} outside [0,1]"
            )));
        }
        out.insert(n, tape.scale(rv, 1.0 + wn));
    }
    Ok(out)
}

/// Verb and noun classification heads over the video feature.
pub struct Classifier {
    verb: (ParamId, ParamId),
    noun: (ParamId, ParamId),
    feat_dim: usize,
    pub verbs: usize,
    pub nouns: usize,
}

impl Classifier {
    pub fn init(
        store: &mut ParamStore,
        feat_dim: usize,
        verbs: usize,
        nouns: usize,
        rng: &mut ChaCha20Rng,
    ) -> Classifier {
        let verb = init_linear(store, "classifier.verb", ParamGroup::Adapt, feat_dim, verbs, rng);
        let noun = init_linear(store, "classifier.noun", ParamGroup::Adapt, feat_dim, nouns, rng);
        Classifier { verb, noun, feat_dim, verbs, nouns }
    }

    /// (N, FeatDim) video features -> ((N, V), (N, N)) logits.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, video: Var) -> Result<(Var, Var)> {
        let shape = tape.value(video).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.feat_dim {
            return Err(Error::invalid_input(format!(
                "classify expects (N,{}), got {shape:?}",
                self.feat_dim
            )));
        }
        let wv = store.on_tape(tape, self.verb.0);
        let bv = store.on_tape(tape, self.verb.1);
        let verb_logits = tape.linear(video, wv, bv);
        let wn = store.on_tape(tape, self.noun.0);
        let bn = store.on_tape(tape, self.noun.1);
        let noun_logits = tape.linear(video, wn, bn);
        Ok((verb_logits, noun_logits))
    }
}

/// Mean cross-entropy per head over a batch that must be all-source.
/// Passing any target-domain row is a contract violation, not a warning.
pub fn classification_loss(
    tape: &mut Tape,
    verb_logits: Var,
    noun_logits: Var,
    domains: &[Domain],
    verbs: &[usize],
    nouns: &[usize],
) -> Result<(Var, Var)> {
    if let Some(i) = domains.iter().position(|&d| d == Domain::Target) {
        return Err(Error::invalid_input(format!(
            "label hygiene: classification batch row {i} is target-domain"
        )));
    }
    let n = tape.value(verb_logits).shape()[0];
    if n != verbs.len() || n != nouns.len() || n != domains.len() {
        return Err(Error::invalid_input(format!(
            "classification batch size mismatch: {n} rows, {} verb labels, {} noun labels",
            verbs.len(),
            nouns.len()
        )));
    }
    let l_v = tape.cross_entropy_mean(verb_logits, verbs);
    let l_n = tape.cross_entropy_mean(noun_logits, nouns);
    Ok((l_v, l_n))
}

/// Attentive entropy per head: mean over the batch of (1 + H_d) * H(class),
/// with H_d the ln-2-normalized video-domain entropy (detached constant).
/// Computed on clips from BOTH domains.
pub fn attentive_entropy(
    tape: &mut Tape,
    verb_logits: Var,
    noun_logits: Var,
    video_domain_probs: &Array2<f32>,
) -> Result<(Var, Var)> {
    let n = tape.value(verb_logits).shape()[0];
    if video_domain_probs.shape() != [n, 2] {
        return Err(Error::invalid_input(format!(
            "attentive entropy: {n} rows but domain probs are {:?}",
            video_domain_probs.shape()
        )));
    }
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let p = [video_domain_probs[[i, 0]], video_domain_probs[[i, 1]]];
        let h_d = entropy(&p)? / std::f32::consts::LN_2;
        weights.push(1.0 + h_d);
    }
    let h_v = tape.entropy_rows(verb_logits);
    let h_n = tape.entropy_rows(noun_logits);
    let l_v = tape.weighted_mean_vec(h_v, &weights);
    let l_n = tape.weighted_mean_vec(h_n, &weights);
    Ok((l_v, l_n))
}

/// Coefficients of the total objective. The paper names the loss terms but
/// not their weights; these defaults are configuration, not claims.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_sd: f32,
    pub lambda_rd: f32,
    pub lambda_td: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sd: 0.5, lambda_rd: 0.5, lambda_td: 0.5, gamma: 0.01 }
    }
}

/// The scalar loss nodes of one batch, pre-weighting.
pub struct LossParts {
    pub l_y_verb: Var,
    pub l_y_noun: Var,
    pub l_sd: Var,
    /// Per-scale relation domain losses.
    pub l_rd: BTreeMap<usize, Var>,
    pub l_td: Var,
    pub l_ae_verb: Var,
    pub l_ae_noun: Var,
}

/// Per-epoch loss record, serialized as one JSON line in the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_y_verb")]
    pub l_y_verb: f32,
    #[serde(rename = "L_y_noun")]
    pub l_y_noun: f32,
    #[serde(rename = "L_sd")]
    pub l_sd: f32,
    /// Keyed by scale n (as a string, for JSON).
    #[serde(rename = "L_rd")]
    pub l_rd: BTreeMap<String, f32>,
    #[serde(rename = "L_td")]
    pub l_td: f32,
    #[serde(rename = "L_ae_verb")]
    pub l_ae_verb: f32,
    #[serde(rename = "L_ae_noun")]
    pub l_ae_noun: f32,
    pub total: f32,
}

/// Weighted total:
/// total = L_y_verb + L_y_noun + lambda_sd*L_sd + lambda_rd*mean_n(L_rd^n)
///       + lambda_td*L_td + gamma*(L_ae_verb + L_ae_noun).
/// A non-finite component aborts training, naming the component.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let check = |name: &str, v: Var| -> Result<f32> {
        let x = tape.scalar(v);
        if !x.is_finite() {
            return Err(Error::TrainAbort(format!("loss component {name} is not finite ({x})")));
        }
        Ok(x)
    };
    let v_y_verb = check("L_y_verb", parts.l_y_verb)?;
    let v_y_noun = check("L_y_noun", parts.l_y_noun)?;
    let v_sd = check("L_sd", parts.l_sd)?;
    let mut rd_map = BTreeMap::new();
    for (&n, &v) in &parts.l_rd {
        rd_map.insert(n.to_string(), check(&format!("L_rd[{n}]"), v)?);
    }
    let v_td = check("L_td", parts.l_td)?;
    let v_ae_verb = check("L_ae_verb", parts.l_ae_verb)?;
    let v_ae_noun = check("L_ae_noun", parts.l_ae_noun)?;

    let k = parts.l_rd.len().max(1) as f32;
    let rd_vars: Vec<Var> = parts.l_rd.values().copied().collect();
    let rd_weights = vec![1.0 / k; rd_vars.len()];
    let mean_rd = tape.weighted_sum_scalars(&rd_vars, &rd_weights);

    let total = tape.weighted_sum_scalars(
        &[
            parts.l_y_verb,
            parts.l_y_noun,
            parts.l_sd,
            mean_rd,
            parts.l_td,
            parts.l_ae_verb,
            parts.l_ae_noun,
        ],
        &[
            1.0,
            1.0,
            weights.lambda_sd,
            weights.lambda_rd,
            weights.lambda_td,
            weights.gamma,
            weights.gamma,
        ],
    );
    let total_v = tape.scalar(total);
    if !total_v.is_finite() {
        return Err(Error::TrainAbort(format!("total loss is not finite ({total_v})")));
    }
    Ok((
        total,
        LossBreakdown {
            l_y_verb: v_y_verb,
            l_y_noun: v_y_noun,
            l_sd: v_sd,
            l_rd: rd_map,
            l_td: v_td,
            l_ae_verb: v_ae_verb,
            l_ae_noun: v_ae_noun,
            total: total_v,
        },
    ))
}
