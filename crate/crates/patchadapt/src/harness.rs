//! Two-phase training driver, evaluation metrics, checkpointing, and patch
//! visualization — the operational face of the crate.
//!
//! Phase 1 (`train_local`) trains the per-stream extractors (glancer, policy,
//! focuser, global encoders) on source-domain labels through an auxiliary
//! classification head over fused features. Phase 2 (`train_adapt`) freezes
//! the extractor bit-for-bit, precomputes fused features once, and trains the
//! relation + adaptation stack with adversarial and attentive-entropy losses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    apply_domain_attention, attention_weight, domain_adversarial_loss, grl_schedule,
    total_loss, Classifier, Discriminator, LossParts, LossWeights,
};
use crate::autodiff::{softmax_row, Tape, Var};
use crate::container::{self, sha256_hex};
use crate::data::{ingest_features, Clip, Dataset, DatasetConfig, Domain, FeatureStore, Split};
use crate::error::{Error, Result};
use crate::nn::{init_linear, ParamGroup, ParamId, ParamStore, Sgd};
use crate::relation::RelationNet;
use crate::sampler::{crop_patch, patch_rect, ImageGrid, PatchSpec};
use crate::streams::{uniform_indices, Extractor, ExtractorConfig, GlobalSource};

const CHECKPOINT_FORMAT: &str = "patchadapt.checkpoint.v1";
/// Fixed seed for relation-tuple sampling during evaluation, so a report is a
/// pure function of (checkpoint, dataset, split).
const EVAL_TUPLE_SEED: u64 = 0x5eed_0f0c_u64;

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Full training configuration: dataset, extractor, relation/adaptation
/// dimensions, learning rates, schedule, and loss weights. Every field is
/// addressable from the single JSON config file; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub extractor: ExtractorConfig,
    /// Shared feature dimension of the relation/adaptation stack (FeatDim).
    pub feat_dim: usize,
    /// Hidden width of the per-scale relation MLPs.
    pub relation_hidden: usize,
    /// Max sampled frame tuples per relation scale.
    pub subset_cap: usize,
    pub loss: LossWeights,
    pub lr_glancer: f32,
    pub lr_focuser: f32,
    pub lr_policy: f32,
    /// Phase-1 rate for the global encoders and auxiliary head.
    pub lr_global: f32,
    /// Phase-2 base rate for the relation/adaptation stack.
    pub lr_adapt: f32,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub local_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetConfig::default(),
            extractor: ExtractorConfig::default(),
            feat_dim: 128,
            relation_hidden: 128,
            subset_cap: 3,
            loss: LossWeights::default(),
            lr_glancer: 0.005,
            lr_focuser: 0.01,
            lr_policy: 1e-4,
            lr_global: 0.01,
            lr_adapt: 3e-3,
            lr_decay_epochs: vec![10, 20],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            local_epochs: 30,
            adapt_epochs: 30,
            batch_size: 8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.extractor.validate(self.dataset.frame_size)?;
        for (name, r) in [
            ("lr_glancer", self.lr_glancer),
            ("lr_focuser", self.lr_focuser),
            ("lr_policy", self.lr_policy),
            ("lr_global", self.lr_global),
            ("lr_adapt", self.lr_adapt),
            ("weight_decay", self.weight_decay),
        ] {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::invalid_config(format!("{name} must be finite and >= 0, got {r}")));
            }
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !self.lr_decay_factor.is_finite() || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid_config(format!(
                "lr_decay_factor must be in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid_config(format!(
                "lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if self.local_epochs == 0 || self.adapt_epochs == 0 {
            return Err(Error::invalid_config("epochs per phase must be >= 1".to_string()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::invalid_config(format!(
                "batch_size must be even and >= 2 (paired-domain batches), got {}",
                self.batch_size
            )));
        }
        if self.feat_dim < 4 {
            return Err(Error::invalid_config(format!("feat_dim must be >= 4, got {}", self.feat_dim)));
        }
        if self.relation_hidden == 0 || self.subset_cap == 0 {
            return Err(Error::invalid_config("relation_hidden and subset_cap must be >= 1".to_string()));
        }
        if self.extractor.t_f < 2 {
            return Err(Error::invalid_config("t_f must be >= 2 (relation scales need pairs)".to_string()));
        }
        for (name, w) in [
            ("lambda_sd", self.loss.lambda_sd),
            ("lambda_rd", self.loss.lambda_rd),
            ("lambda_td", self.loss.lambda_td),
            ("gamma", self.loss.gamma),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid_config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Phase-2 learning rate at a 1-indexed epoch: base rate decayed by
    /// `lr_decay_factor` once per decay epoch already completed.
    pub fn adapt_lr_at(&self, epoch: usize) -> f32 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr_adapt * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Load and validate a `TrainConfig` from a JSON file.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Error::invalid_config(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Every network in the system plus the shared parameter store.
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub relation: RelationNet,
    pub frame_d: Discriminator,
    pub relation_d: BTreeMap<usize, Discriminator>,
    pub video_d: Discriminator,
    pub classifier: Classifier,
    aux_verb: (ParamId, ParamId),
    aux_noun: (ParamId, ParamId),
}

impl Model {
    /// Construct all networks with parameters drawn from a single seeded RNG
    /// in a fixed order, so identical configs yield identical parameters.
    pub fn build(cfg: &TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let extractor = Extractor::init(
            &mut store,
            &cfg.extractor,
            cfg.dataset.frame_size,
            cfg.dataset.audio_dim,
            &mut rng,
        )?;
        let d_e = extractor.layout().d_e();
        let relation = RelationNet::init(
            &mut store,
            cfg.extractor.t_f,
            d_e,
            cfg.feat_dim,
            cfg.relation_hidden,
            cfg.subset_cap,
            &mut rng,
        )?;
        let frame_d = Discriminator::init(&mut store, "adapt.d_frame", cfg.feat_dim, &mut rng);
        let mut relation_d = BTreeMap::new();
        for n in 2..=cfg.extractor.t_f {
            relation_d.insert(
                n,
                Discriminator::init(&mut store, &format!("adapt.d_relation.{n}"), cfg.feat_dim, &mut rng),
            );
        }
        let video_d = Discriminator::init(&mut store, "adapt.d_video", cfg.feat_dim, &mut rng);
        let classifier =
            Classifier::init(&mut store, cfg.feat_dim, cfg.dataset.verbs, cfg.dataset.nouns, &mut rng);
        let aux_verb =
            init_linear(&mut store, "local_head.verb", ParamGroup::Global, d_e, cfg.dataset.verbs, &mut rng);
        let aux_noun =
            init_linear(&mut store, "local_head.noun", ParamGroup::Global, d_e, cfg.dataset.nouns, &mut rng);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            extractor,
            relation,
            frame_d,
            relation_d,
            video_d,
            classifier,
            aux_verb,
            aux_noun,
        })
    }

    /// Phase-1 auxiliary heads on mean fused features: (N, D_e) -> logits.
    fn aux_logits(&self, tape: &mut Tape, fused_mean: Var) -> (Var, Var) {
        let wv = self.store.on_tape(tape, self.aux_verb.0);
        let bv = self.store.on_tape(tape, self.aux_verb.1);
        let verb = tape.linear(fused_mean, wv, bv);
        let wn = self.store.on_tape(tape, self.aux_noun.0);
        let bn = self.store.on_tape(tape, self.aux_noun.1);
        let noun = tape.linear(fused_mean, wn, bn);
        (verb, noun)
    }

    /// Adaptation-stack forward for one clip's embedded frames `z` (T_f, F):
    /// relation features, attention weights from the per-scale discriminators,
    /// attended aggregation -> (1, F) video feature.
    fn adapt_video(&self, tape: &mut Tape, z: Var, tuple_seed: u64) -> Result<Var> {
        let r = self.relation.relation_features(tape, &self.store, z, tuple_seed)?;
        let mut w = BTreeMap::new();
        for (&n, &rn) in &r {
            let disc = &self.relation_d[&n];
            let logits = disc.forward(tape, &self.store, rn)?;
            let lv = tape.value(logits);
            let p = softmax_row(&ndarray::Array1::from_vec(vec![lv[[0, 0]], lv[[0, 1]]]));
            w.insert(n, attention_weight(&[p[0], p[1]])?);
        }
        let attended = apply_domain_attention(tape, &r, &w)?;
        self.relation.aggregate_video(tape, &attended)
    }
}

/// Load the precomputed-global-feature store when the extractor is configured
/// to ingest instead of encode. Features live in `<dataset root>/features`.
fn maybe_ingest(dataset: &Dataset, cfg: &TrainConfig) -> Result<Option<FeatureStore>> {
    match cfg.extractor.global_source {
        GlobalSource::Encode => Ok(None),
        GlobalSource::Ingest => {
            let dir = dataset.root().join("features");
            let store = ingest_features(&dir, cfg.dataset.t, cfg.extractor.ingest_dim)?;
            Ok(Some(store))
        }
    }
}

/// Training phase a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Local,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Local => "local",
            Phase::Adapt => "adapt",
        }
    }
}

/// A trained (or initialized) model plus its provenance.
pub struct Checkpoint {
    pub model: Model,
    pub phase: Phase,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    phase: Phase,
    epoch: usize,
    seed: u64,
    config: TrainConfig,
    params: Vec<ParamEntry>,
    blob_sha256: String,
    blob_f32_len: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = self.model.store.to_blob();
        let bytes = container::f32s_to_le_bytes(&blob);
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            phase: self.phase,
            epoch: self.epoch,
            seed: self.model.cfg.seed,
            config: self.model.cfg.clone(),
            params: self
                .model
                .store
                .manifest()
                .into_iter()
                .map(|(name, group, shape)| ParamEntry { name, group: group.as_str().to_string(), shape })
                .collect(),
            blob_sha256: sha256_hex(&bytes),
            blob_f32_len: blob.len(),
        };
        container::write_with_header(path, &header, &blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (header, blob): (CheckpointHeader, Vec<f32>) = container::read_with_header(path)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "{}: unknown checkpoint format {:?}",
                path.display(),
                header.format
            )));
        }
        container::expect_len(path, &blob, header.blob_f32_len, "checkpoint parameter blob")?;
        let bytes = container::f32s_to_le_bytes(&blob);
        let digest = sha256_hex(&bytes);
        if digest != header.blob_sha256 {
            return Err(Error::data(format!(
                "{}: checkpoint blob checksum mismatch (expected {}, got {digest})",
                path.display(),
                header.blob_sha256
            )));
        }
        let mut model = Model::build(&header.config)?;
        let manifest = model.store.manifest();
        if manifest.len() != header.params.len() {
            return Err(Error::data(format!(
                "{}: checkpoint declares {} parameters, model has {}",
                path.display(),
                header.params.len(),
                manifest.len()
            )));
        }
        for ((name, group, shape), entry) in manifest.into_iter().zip(&header.params) {
            if name != entry.name || group.as_str() != entry.group || shape != entry.shape {
                return Err(Error::data(format!(
                    "{}: checkpoint parameter manifest mismatch at {name} ({}/{:?} vs {}/{:?})",
                    path.display(),
                    group.as_str(),
                    shape,
                    entry.group,
                    entry.shape
                )));
            }
        }
        model.store.load_blob(&blob)?;
        Ok(Checkpoint { model, phase: header.phase, epoch: header.epoch })
    }
}

/// A finished training run: the checkpoint and one JSON log object per epoch.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<serde_json::Value>,
}

fn ensure_finite(value: f32, component: &str, phase: &str, epoch: usize) -> Result<f32> {
    if !value.is_finite() {
        return Err(Error::TrainAbort(format!(
            "{phase} epoch {epoch}: loss component {component} is not finite ({value})"
        )));
    }
    Ok(value)
}

/// Phase 1: train glancer/policy/focuser/global encoders on source-domain
/// labels through the auxiliary verb+noun heads over mean fused features.
pub fn train_local(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::build(cfg)?;
    let ingest = maybe_ingest(dataset, cfg)?;
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);

    let ids: Vec<String> =
        dataset.records(Domain::Source, Split::Train).iter().map(|r| r.clip_id.clone()).collect();
    if ids.is_empty() {
        return Err(Error::data("source training split is empty".to_string()));
    }

    let mut log = Vec::with_capacity(cfg.local_epochs);
    for epoch in 1..=cfg.local_epochs {
        let mut order = ids.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(mix(cfg.seed ^ (0x50 << 56) ^ epoch as u64));
        order.shuffle(&mut rng);

        let mut sum_v = 0.0f64;
        let mut sum_n = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut means = Vec::with_capacity(chunk.len());
            let mut verbs = Vec::with_capacity(chunk.len());
            let mut nouns = Vec::with_capacity(chunk.len());
            for id in chunk {
                let clip = dataset.load_clip(id)?;
                let (verb, noun) = clip.train_labels()?;
                verbs.push(verb);
                nouns.push(noun);
                let ext = model.extractor.extract(&mut tape, &model.store, &clip, ingest.as_ref())?;
                means.push(tape.mean_rows(ext.features));
            }
            let batch = tape.concat_rows(&means);
            let (verb_logits, noun_logits) = model.aux_logits(&mut tape, batch);
            let l_v = tape.cross_entropy_mean(verb_logits, &verbs);
            let l_n = tape.cross_entropy_mean(noun_logits, &nouns);
            let v_v = ensure_finite(tape.scalar(l_v), "L_y_verb", "phase 1", epoch)?;
            let v_n = ensure_finite(tape.scalar(l_n), "L_y_noun", "phase 1", epoch)?;
            sum_v += v_v as f64;
            sum_n += v_n as f64;
            steps += 1;

            let total = tape.weighted_sum_scalars(&[l_v, l_n], &[1.0, 1.0]);
            let grads = tape.backward(total);
            let param_grads = tape.param_grads(&grads);
            sgd.step(&mut model.store, &param_grads, |group| match group {
                ParamGroup::Glancer => cfg.lr_glancer,
                ParamGroup::Focuser => cfg.lr_focuser,
                ParamGroup::Policy => cfg.lr_policy,
                ParamGroup::Global => cfg.lr_global,
                ParamGroup::Adapt => 0.0,
            });
        }
        let denom = steps.max(1) as f64;
        log.push(serde_json::json!({
            "phase": "local",
            "epoch": epoch,
            "lr_glancer": cfg.lr_glancer,
            "lr_focuser": cfg.lr_focuser,
            "lr_policy": cfg.lr_policy,
            "lr_global": cfg.lr_global,
            "L_y_verb": sum_v / denom,
            "L_y_noun": sum_n / denom,
            "total": (sum_v + sum_n) / denom,
        }));
    }
    let epoch = cfg.local_epochs;
    Ok(TrainOutcome { checkpoint: Checkpoint { model, phase: Phase::Local, epoch }, log })
}

fn config_fingerprint(cfg: &TrainConfig) -> Result<serde_json::Value> {
    // Fields that determine network architecture and data semantics; training
    // hyperparameters (rates, epochs, batch) may differ between phases.
    let v = serde_json::json!({
        "dataset": serde_json::to_value(&cfg.dataset).map_err(|e| Error::data(e.to_string()))?,
        "extractor": serde_json::to_value(&cfg.extractor).map_err(|e| Error::data(e.to_string()))?,
        "feat_dim": cfg.feat_dim,
        "relation_hidden": cfg.relation_hidden,
        "subset_cap": cfg.subset_cap,
        "seed": cfg.seed,
    });
    Ok(v)
}

/// Phase 2: freeze the extractor, precompute fused features once, and train
/// the relation + adaptation stack on source labels plus both-domain
/// adversarial and attentive-entropy losses.
pub fn train_adapt(dataset: &Dataset, init: Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if config_fingerprint(&init.model.cfg)? != config_fingerprint(cfg)? {
        return Err(Error::invalid_config(
            "checkpoint/config mismatch: dataset, extractor, feature dimensions, and seed must match phase 1"
                .to_string(),
        ));
    }
    let mut model = init.model;
    model.cfg = cfg.clone();
    let ingest = maybe_ingest(dataset, cfg)?;

    // Freeze contract: everything outside the Adapt group must come out
    // bit-identical.
    let frozen_ids: Vec<ParamId> = [ParamGroup::Glancer, ParamGroup::Focuser, ParamGroup::Policy, ParamGroup::Global]
        .iter()
        .flat_map(|&g| model.store.ids_in_group(g))
        .collect();
    let frozen_before: Vec<ArrayD<f32>> =
        frozen_ids.iter().map(|&id| model.store.value(id).as_ref().clone()).collect();

    // Precompute fused features (extractor is frozen, so once is enough) and
    // collect source labels through the hygiene-checked accessor.
    let mut feats: BTreeMap<String, Array2<f32>> = BTreeMap::new();
    let mut labels: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut source_ids = Vec::new();
    let mut target_ids = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for rec in dataset.records(domain, Split::Train) {
            let clip = dataset.load_clip(&rec.clip_id)?;
            let mut tape = Tape::new();
            let ext = model.extractor.extract(&mut tape, &model.store, &clip, ingest.as_ref())?;
            let value = tape.value(ext.features).clone();
            let t_f = value.shape()[0];
            let d_e = value.shape()[1];
            let flat: Vec<f32> = value.iter().copied().collect();
            feats.insert(
                rec.clip_id.clone(),
                Array2::from_shape_vec((t_f, d_e), flat).expect("feature shape"),
            );
            match domain {
                Domain::Source => {
                    labels.insert(rec.clip_id.clone(), clip.train_labels()?);
                    source_ids.push(rec.clip_id.clone());
                }
                Domain::Target => target_ids.push(rec.clip_id.clone()),
            }
        }
    }
    if source_ids.is_empty() || target_ids.is_empty() {
        return Err(Error::data("adaptation training requires clips in both domains".to_string()));
    }

    let half = cfg.batch_size / 2;
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.adapt_epochs);

    for epoch in 1..=cfg.adapt_epochs {
        let progress = (epoch - 1) as f64 / (cfg.adapt_epochs - 1).max(1) as f64;
        let lambda = grl_schedule(progress);
        let lr = cfg.adapt_lr_at(epoch);

        let mut src_order = source_ids.clone();
        let mut tgt_order = target_ids.clone();
        let mut rng_s = ChaCha20Rng::seed_from_u64(mix(cfg.seed ^ (0x51 << 56) ^ epoch as u64));
        let mut rng_t = ChaCha20Rng::seed_from_u64(mix(cfg.seed ^ (0x52 << 56) ^ epoch as u64));
        src_order.shuffle(&mut rng_s);
        tgt_order.shuffle(&mut rng_t);

        let steps = src_order.chunks(half).count().min(tgt_order.chunks(half).count());
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut rd_sums: BTreeMap<usize, f64> = BTreeMap::new();

        for step in 0..steps {
            let src_chunk = &src_order[step * half..((step + 1) * half).min(src_order.len())];
            let tgt_chunk = &tgt_order[step * half..((step + 1) * half).min(tgt_order.len())];
            let batch: Vec<(String, Domain)> = src_chunk
                .iter()
                .map(|id| (id.clone(), Domain::Source))
                .chain(tgt_chunk.iter().map(|id| (id.clone(), Domain::Target)))
                .collect();

            let mut tape = Tape::new();
            let tuple_seed = mix(cfg.seed ^ (0xAD << 56) ^ ((epoch as u64) << 24) ^ step as u64);

            // Per-clip embeddings and relation features.
            let mut z_vars = Vec::with_capacity(batch.len());
            let mut r_maps = Vec::with_capacity(batch.len());
            let mut clip_domains = Vec::with_capacity(batch.len());
            let mut frame_domains = Vec::new();
            for (id, domain) in &batch {
                let leaf = tape.leaf(feats[id].clone().into_dyn());
                let z = model.relation.shared_embed(&mut tape, &model.store, leaf)?;
                let t_f = tape.value(z).shape()[0];
                z_vars.push(z);
                r_maps.push(model.relation.relation_features(&mut tape, &model.store, z, tuple_seed)?);
                clip_domains.push(*domain);
                frame_domains.extend(std::iter::repeat(*domain).take(t_f));
            }

            // Frame-level adversarial loss over all frames of all clips.
            let frame_feats = tape.concat_rows(&z_vars);
            let sd = domain_adversarial_loss(
                &mut tape, &model.store, &model.frame_d, frame_feats, &frame_domains, lambda,
            )?;

            // Per-scale relation adversarial losses; their predictions drive
            // the per-clip domain attention weights.
            let scales: Vec<usize> = r_maps[0].keys().copied().collect();
            let mut l_rd = BTreeMap::new();
            let mut w_per_clip: Vec<BTreeMap<usize, f32>> =
                vec![BTreeMap::new(); batch.len()];
            for &n in &scales {
                let rows: Vec<Var> = r_maps.iter().map(|m| m[&n]).collect();
                let stacked = tape.concat_rows(&rows);
                let rd = domain_adversarial_loss(
                    &mut tape, &model.store, &model.relation_d[&n], stacked, &clip_domains, lambda,
                )?;
                for (i, w) in w_per_clip.iter_mut().enumerate() {
                    w.insert(n, attention_weight(&[rd.probs[[i, 0]], rd.probs[[i, 1]]])?);
                }
                l_rd.insert(n, rd.loss);
            }

            // Attended aggregation to video features.
            let mut videos = Vec::with_capacity(batch.len());
            for (i, r) in r_maps.iter().enumerate() {
                let attended = apply_domain_attention(&mut tape, r, &w_per_clip[i])?;
                videos.push(model.relation.aggregate_video(&mut tape, &attended)?);
            }
            let video_feats = tape.concat_rows(&videos);
            let td = domain_adversarial_loss(
                &mut tape, &model.store, &model.video_d, video_feats, &clip_domains, lambda,
            )?;

            // Classification on source rows only; attentive entropy on all.
            let (verb_logits, noun_logits) = model.classifier.classify(&mut tape, &model.store, video_feats)?;
            let src_idx: Vec<usize> = clip_domains
                .iter()
                .enumerate()
                .filter(|(_, &d)| d == Domain::Source)
                .map(|(i, _)| i)
                .collect();
            let src_verb = tape.gather_rows(verb_logits, &src_idx);
            let src_noun = tape.gather_rows(noun_logits, &src_idx);
            let verbs: Vec<usize> = src_idx.iter().map(|&i| labels[&batch[i].0].0).collect();
            let nouns: Vec<usize> = src_idx.iter().map(|&i| labels[&batch[i].0].1).collect();
            let src_domains = vec![Domain::Source; src_idx.len()];
            let (l_y_verb, l_y_noun) = crate::adaptation::classification_loss(
                &mut tape, src_verb, src_noun, &src_domains, &verbs, &nouns,
            )?;
            let (l_ae_verb, l_ae_noun) =
                crate::adaptation::attentive_entropy(&mut tape, verb_logits, noun_logits, &td.probs)?;

            let parts = LossParts {
                l_y_verb,
                l_y_noun,
                l_sd: sd.loss,
                l_rd,
                l_td: td.loss,
                l_ae_verb,
                l_ae_noun,
            };
            let (total, bd) = total_loss(&mut tape, &parts, &cfg.loss).map_err(|e| match e {
                Error::TrainAbort(msg) => Error::TrainAbort(format!("phase 2 epoch {epoch}: {msg}")),
                other => other,
            })?;

            for (key, value) in [
                ("L_y_verb", bd.l_y_verb),
                ("L_y_noun", bd.l_y_noun),
                ("L_sd", bd.l_sd),
                ("L_td", bd.l_td),
                ("L_ae_verb", bd.l_ae_verb),
                ("L_ae_noun", bd.l_ae_noun),
                ("total", bd.total),
            ] {
                *sums.entry(key.to_string()).or_insert(0.0) += value as f64;
            }
            for (n, v) in &bd.l_rd {
                *rd_sums.entry(n.parse().expect("scale key")).or_insert(0.0) += *v as f64;
            }

            let grads = tape.backward(total);
            let param_grads = tape.param_grads(&grads);
            sgd.step(&mut model.store, &param_grads, |group| match group {
                ParamGroup::Adapt => lr,
                _ => 0.0,
            });
        }

        let denom = steps.max(1) as f64;
        let mut line = serde_json::json!({
            "phase": "adapt",
            "epoch": epoch,
            "lr": lr,
            "lambda": lambda,
        });
        let obj = line.as_object_mut().expect("json object");
        for (key, sum) in &sums {
            obj.insert(key.clone(), serde_json::json!(sum / denom));
        }
        let rd_avg: BTreeMap<String, f64> =
            rd_sums.iter().map(|(n, s)| (n.to_string(), s / denom)).collect();
        obj.insert("L_rd".to_string(), serde_json::json!(rd_avg));
        log.push(line);
    }

    for (id, before) in frozen_ids.iter().zip(&frozen_before) {
        let after = model.store.value(*id);
        assert!(
            before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "freeze contract violated: extractor parameter {} changed during phase 2",
            model.store.name(*id)
        );
    }

    let epoch = cfg.adapt_epochs;
    Ok(TrainOutcome { checkpoint: Checkpoint { model, phase: Phase::Adapt, epoch }, log })
}

/// One clip's class predictions and ground truth, the unit of metric
/// computation.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub verb_probs: Vec<f32>,
    pub noun_probs: Vec<f32>,
    pub verb: usize,
    pub noun: usize,
}

/// Top-1/top-5 accuracies (%) for verb, noun, and action over one
/// domain/split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub domain: String,
    pub split: String,
    pub clips: usize,
    pub verb_top1: f32,
    pub verb_top5: f32,
    pub noun_top1: f32,
    pub noun_top5: f32,
    pub action_top1: f32,
    pub action_top5: f32,
}

fn topk_contains(probs: &[f32], k: usize, true_idx: usize) -> bool {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite prob").then(a.cmp(&b)));
    idx[..k.min(idx.len())].contains(&true_idx)
}

fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Action top-k membership: rank all (verb, noun) pairs by p_v * p_n, ties
/// broken by ascending pair index, and test the true pair against the top k.
fn action_topk_contains(pred: &Prediction, k: usize) -> bool {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(pred.verb_probs.len() * pred.noun_probs.len());
    for i in 0..pred.verb_probs.len() {
        for j in 0..pred.noun_probs.len() {
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|&a, &b| {
        let sa = pred.verb_probs[a.0] * pred.noun_probs[a.1];
        let sb = pred.verb_probs[b.0] * pred.noun_probs[b.1];
        sb.partial_cmp(&sa).expect("finite prob").then(a.cmp(&b))
    });
    pairs[..k.min(pairs.len())].contains(&(pred.verb, pred.noun))
}

/// Compute the challenge metrics from per-clip predictions.
pub fn metrics_from_predictions(
    domain: Domain,
    split: Split,
    preds: &[Prediction],
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::invalid_input(format!(
            "no clips to evaluate in {}/{}",
            domain.as_str(),
            split.as_str()
        )));
    }
    for (i, p) in preds.iter().enumerate() {
        if p.verb_probs.is_empty()
            || p.noun_probs.is_empty()
            || p.verb >= p.verb_probs.len()
            || p.noun >= p.noun_probs.len()
            || p.verb_probs.iter().chain(&p.noun_probs).any(|x| !x.is_finite())
        {
            return Err(Error::invalid_input(format!("prediction {i} is malformed")));
        }
    }
    let n = preds.len() as f32;
    let pct = |count: usize| 100.0 * count as f32 / n;
    let mut v1 = 0;
    let mut v5 = 0;
    let mut n1 = 0;
    let mut n5 = 0;
    let mut a1 = 0;
    let mut a5 = 0;
    for p in preds {
        let verb_ok = argmax(&p.verb_probs) == p.verb;
        let noun_ok = argmax(&p.noun_probs) == p.noun;
        v1 += verb_ok as usize;
        n1 += noun_ok as usize;
        a1 += (verb_ok && noun_ok) as usize;
        v5 += topk_contains(&p.verb_probs, 5, p.verb) as usize;
        n5 += topk_contains(&p.noun_probs, 5, p.noun) as usize;
        a5 += action_topk_contains(p, 5) as usize;
    }
    Ok(MetricsReport {
        domain: domain.as_str().to_string(),
        split: split.as_str().to_string(),
        clips: preds.len(),
        verb_top1: pct(v1),
        verb_top5: pct(v5),
        noun_top1: pct(n1),
        noun_top5: pct(n5),
        action_top1: pct(a1),
        action_top5: pct(a5),
    })
}

fn probs_row(tape: &Tape, logits: Var, row: usize) -> Vec<f32> {
    let lv = tape.value(logits);
    let cols = lv.shape()[1];
    let raw: Vec<f32> = (0..cols).map(|j| lv[[row, j]]).collect();
    softmax_row(&ndarray::Array1::from_vec(raw)).to_vec()
}

fn predict_clip(model: &Model, phase: Phase, clip: &Clip, ingest: Option<&FeatureStore>) -> Result<Prediction> {
    let mut tape = Tape::new();
    let ext = model.extractor.extract(&mut tape, &model.store, clip, ingest)?;
    let (verb_logits, noun_logits) = match phase {
        Phase::Local => {
            let mean = tape.mean_rows(ext.features);
            model.aux_logits(&mut tape, mean)
        }
        Phase::Adapt => {
            let z = model.relation.shared_embed(&mut tape, &model.store, ext.features)?;
            let video = model.adapt_video(&mut tape, z, EVAL_TUPLE_SEED)?;
            model.classifier.classify(&mut tape, &model.store, video)?
        }
    };
    let (verb, noun) = clip.eval_labels();
    Ok(Prediction {
        verb_probs: probs_row(&tape, verb_logits, 0),
        noun_probs: probs_row(&tape, noun_logits, 0),
        verb,
        noun,
    })
}

/// Evaluate a checkpoint on one domain/split of the dataset.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, domain: Domain, split: Split) -> Result<MetricsReport> {
    let ingest = maybe_ingest(dataset, &ckpt.model.cfg)?;
    let records = dataset.records(domain, split);
    if records.is_empty() {
        return Err(Error::invalid_input(format!(
            "no clips to evaluate in {}/{}",
            domain.as_str(),
            split.as_str()
        )));
    }
    let mut preds = Vec::with_capacity(records.len());
    for rec in records {
        let clip = dataset.load_clip(&rec.clip_id)?;
        preds.push(predict_clip(&ckpt.model, ckpt.phase, &clip, ingest.as_ref())?);
    }
    metrics_from_predictions(domain, split, &preds)
}

/// Parse the CLI `domain/split` selector, e.g. `target/val`.
pub fn parse_split(s: &str) -> Result<(Domain, Split)> {
    let (d, sp) = s
        .split_once('/')
        .ok_or_else(|| Error::invalid_config(format!("split must be domain/split, e.g. target/val, got {s:?}")))?;
    let domain = match d {
        "source" => Domain::Source,
        "target" => Domain::Target,
        _ => return Err(Error::invalid_config(format!("unknown domain {d:?} (source|target)"))),
    };
    let split = match sp {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => return Err(Error::invalid_config(format!("unknown split {sp:?} (train|val)"))),
    };
    Ok((domain, split))
}

fn write_ppm(path: &Path, img: &ArrayView3<f32>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(Error::invalid_input(format!("ppm writer expects 3 channels, got {c}")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn draw_rect(img: &mut Array3<f32>, x0: usize, y0: usize, size: usize) {
    let h = img.shape()[1];
    let w = img.shape()[2];
    let x1 = (x0 + size - 1).min(w - 1);
    let y1 = (y0 + size - 1).min(h - 1);
    let mut paint = |y: usize, x: usize| {
        img[[0, y, x]] = 1.0;
        img[[1, y, x]] = 0.0;
        img[[2, y, x]] = 0.0;
    };
    for x in x0..=x1 {
        paint(y0, x);
        paint(y1, x);
    }
    for y in y0..=y1 {
        paint(y, x0);
        paint(y, x1);
    }
}

/// Pixel-space box [x0, y0, x1, y1] of a (clamped) patch spec.
pub fn patch_box(spec: &PatchSpec, height: usize, width: usize) -> Result<[f32; 4]> {
    let (x0, y0) = patch_rect(spec, height, width)?;
    let size = spec.size_px as f32;
    Ok([x0 as f32, y0 as f32, x0 as f32 + size, y0 as f32 + size])
}

/// Intersection-over-union of two [x0, y0, x1, y1] boxes.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: [f32; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// For each requested clip, write one overlay image per focus frame
/// (`<clip_id>_f<n>.ppm`, selected patch rectangle drawn in red) and the
/// cropped patch itself (`<clip_id>_f<n>_patch.ppm`).
pub fn visualize_patches(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    clip_ids: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let ingest = maybe_ingest(dataset, &ckpt.model.cfg)?;
    let mut written = Vec::new();
    let patch = ckpt.model.cfg.extractor.patch_size;
    for id in clip_ids {
        let clip = dataset.load_clip(id)?;
        let specs =
            ckpt.model.extractor.spatial_patch_specs(&ckpt.model.store, &clip, ingest.as_ref())?;
        let t = clip.rgb.shape()[0];
        let h = clip.rgb.shape()[2];
        let w = clip.rgb.shape()[3];
        let frames = uniform_indices(t, ckpt.model.cfg.extractor.t_f)?;
        if specs.len() != frames.len() {
            return Err(Error::invalid_input(format!(
                "clip {id}: {} patch specs for {} focus frames",
                specs.len(),
                frames.len()
            )));
        }
        for (spec, &frame_idx) in specs.iter().zip(&frames) {
            let frame = clip.rgb.index_axis(Axis(0), frame_idx);
            let (x0, y0) = patch_rect(spec, h, w)?;

            let mut overlay = frame.to_owned();
            draw_rect(&mut overlay, x0.round() as usize, y0.round() as usize, patch);
            let overlay_path = out_dir.join(format!("{id}_f{frame_idx}.ppm"));
            write_ppm(&overlay_path, &overlay.view())?;
            written.push(overlay_path);

            let grid = ImageGrid::new(frame.to_owned())?;
            let cropped = crop_patch(&grid, spec)?;
            let crop_path = out_dir.join(format!("{id}_f{frame_idx}_patch.ppm"));
            write_ppm(&crop_path, &cropped.data().view())?;
            written.push(crop_path);
        }
    }
    Ok(written)
}

/// Mean patch-vs-sprite IoU of the trained spatial policy over one
/// domain/split, paired with a random-center baseline under the identical
/// clamp and box mapping. Returns (policy_iou, random_iou).
pub fn policy_iou_vs_random(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    domain: Domain,
    split: Split,
    baseline_seed: u64,
) -> Result<(f32, f32)> {
    let records = dataset.records(domain, split);
    if records.is_empty() {
        return Err(Error::invalid_input(format!(
            "no clips in {}/{}",
            domain.as_str(),
            split.as_str()
        )));
    }
    let ingest = maybe_ingest(dataset, &ckpt.model.cfg)?;
    let patch = ckpt.model.cfg.extractor.patch_size;
    let mut rng = ChaCha20Rng::seed_from_u64(baseline_seed);
    let mut policy_sum = 0.0f64;
    let mut random_sum = 0.0f64;
    let mut count = 0usize;
    for rec in records {
        let clip = dataset.load_clip(&rec.clip_id)?;
        let t = clip.rgb.shape()[0];
        let h = clip.rgb.shape()[2];
        let w = clip.rgb.shape()[3];
        let specs =
            ckpt.model.extractor.spatial_patch_specs(&ckpt.model.store, &clip, ingest.as_ref())?;
        let frames = uniform_indices(t, ckpt.model.cfg.extractor.t_f)?;
        for (spec, &frame_idx) in specs.iter().zip(&frames) {
            let sprite = rec.sprite_boxes[frame_idx];
            policy_sum += iou(patch_box(spec, h, w)?, sprite) as f64;
            let rx: f64 = rng.gen();
            let ry: f64 = rng.gen();
            let random_spec = PatchSpec::new(rx, ry, patch)?;
            random_sum += iou(patch_box(&random_spec, h, w)?, sprite) as f64;
            count += 1;
        }
    }
    Ok(((policy_sum / count as f64) as f32, (random_sum / count as f64) as f32))
}
