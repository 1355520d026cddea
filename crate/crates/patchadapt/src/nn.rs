//! Parameter storage, initialization, and SGD.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a stable name and a
//! [`ParamGroup`] tag; the tag is how the two-phase harness applies the
//! per-network learning rates (the local branches train at different rates)
//! and how phase 2 freezes the extractor while the adaptation stack moves.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
pub use crate::autodiff::ParamId;
use crate::error::{Error, Result};

/// Which learning-rate group a parameter belongs to.
///
/// `Glancer`/`Focuser`/`Policy` carry the per-network phase-1 rates;
/// `Global` covers the global encoder and the phase-1 auxiliary heads;
/// `Adapt` is everything phase 2 trains (embedding, relation, discriminators,
/// classifiers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Glancer,
    Focuser,
    Policy,
    Global,
    Adapt,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Glancer => "glancer",
            ParamGroup::Focuser => "focuser",
            ParamGroup::Policy => "policy",
            ParamGroup::Global => "global",
            ParamGroup::Adapt => "adapt",
        }
    }
}

struct ParamEntry {
    name: String,
    group: ParamGroup,
    value: Arc<ArrayD<f32>>,
}

/// Named, grouped parameter tensors. Registration order defines [`ParamId`]s
/// and the flat blob layout used by checkpoints.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: ArrayD<f32>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value: Arc::new(value),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> Arc<ArrayD<f32>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Put this parameter on a tape as a gradient-tracked leaf.
    pub fn on_tape(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.value(id))
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(
            value.shape(),
            self.entries[id.0].value.shape(),
            "parameter {} shape changed",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Flatten all parameters into one f32 vector in registration order.
    pub fn to_blob(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_elems());
        for e in &self.entries {
            out.extend(e.value.iter().copied());
        }
        out
    }

    /// Restore all parameters from a flat blob produced by [`Self::to_blob`].
    pub fn load_blob(&mut self, blob: &[f32]) -> Result<()> {
        if blob.len() != self.total_elems() {
            return Err(Error::data(format!(
                "parameter blob has {} values, model needs {}",
                blob.len(),
                self.total_elems()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            let arr = ArrayD::from_shape_vec(e.value.raw_dim(), blob[off..off + n].to_vec())
                .expect("blob slice matches shape");
            e.value = Arc::new(arr);
            off += n;
        }
        Ok(())
    }

    /// (name, group, shape) for every parameter, in registration order.
    /// This is the checkpoint manifest's layout record.
    pub fn manifest(&self) -> Vec<(String, String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    e.group.as_str().to_string(),
                    e.value.shape().to_vec(),
                )
            })
            .collect()
    }

    /// Copy of current values, for freeze assertions.
    pub fn snapshot(&self) -> Vec<ArrayD<f32>> {
        self.entries.iter().map(|e| e.value.as_ref().clone()).collect()
    }

    /// True when every parameter is bitwise equal to the snapshot.
    pub fn matches_snapshot(&self, snap: &[ArrayD<f32>]) -> bool {
        self.entries.len() == snap.len()
            && self
                .entries
                .iter()
                .zip(snap)
                .all(|(e, s)| e.value.as_ref() == s)
    }
}

/// Kaiming-style normal init for conv weights (Cout, Cin, k, k).
pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> ParamId {
    let fan_in = (cin * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0f32, std).expect("valid normal");
    let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[cout, cin, k, k]), |_| dist.sample(rng));
    store.add(name, group, w)
}

/// Kaiming-style normal init for dense weights (in, out), plus zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha20Rng,
) -> (ParamId, ParamId) {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("valid normal");
    let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[fan_in, fan_out]), |_| dist.sample(rng));
    let b = ArrayD::zeros(ndarray::IxDyn(&[fan_out]));
    let wid = store.add(&format!("{name}.w"), group, w);
    let bid = store.add(&format!("{name}.b"), group, b);
    (wid, bid)
}

/// Zero-initialized channel bias for a conv layer.
pub fn init_bias(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    c: usize,
) -> ParamId {
    store.add(name, group, ArrayD::zeros(ndarray::IxDyn(&[c])))
}

/// Small uniform perturbation, used where exact zeros would stall learning.
pub fn uniform_perturb(arr: &mut ArrayD<f32>, scale: f32, rng: &mut ChaCha20Rng) {
    arr.mapv_inplace(|v| v + rng.gen_range(-scale..scale));
}

/// SGD with momentum and decoupled-from-nothing weight decay, matching the
/// common convention: `g = grad + wd*w; v = mu*v + g; w -= lr*v`.
pub struct Sgd {
    velocity: Vec<ArrayD<f32>>,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        let velocity = store
            .ids()
            .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Sgd { velocity, momentum, weight_decay }
    }

    /// Apply one update. Gradients for the same parameter are summed;
    /// parameters without a gradient (or whose group rate is 0) are
    /// untouched bit for bit.
    pub fn step<F>(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, ArrayD<f32>)],
        lr_of: F,
    ) where
        F: Fn(ParamGroup) -> f32,
    {
        let mut folded: BTreeMap<ParamId, ArrayD<f32>> = BTreeMap::new();
        for (id, g) in grads {
            match folded.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    folded.insert(*id, g.clone());
                }
            }
        }
        for (id, g) in folded {
            let lr = lr_of(store.group(id));
            if lr == 0.0 {
                continue;
            }
            let w = store.value(id);
            let v = &mut self.velocity[id.0];
            ndarray::Zip::from(&mut *v)
                .and(w.as_ref())
                .and(&g)
                .for_each(|vi, &wi, &gi| {
                    *vi = self.momentum * *vi + gi + self.weight_decay * wi;
                });
            let mut new_w = w.as_ref().clone();
            ndarray::Zip::from(&mut new_w).and(&*v).for_each(|wi, &vi| {
                *wi -= lr * vi;
            });
            store.set_value(id, new_w);
        }
    }
}
