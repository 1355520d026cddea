//! Shared-space embedding and the multi-scale temporal relation module.
//!
//! Per-segment fused features are mapped into the shared space (the features
//! the frame-level discriminator aligns), then every scale n in 2..=T gets a
//! relation feature r^n: the average of a per-scale two-layer perceptron g_n
//! applied to concatenations of z rows at strictly increasing frame tuples.
//! After domain attention, the per-scale features sum into the video feature.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_linear, ParamGroup, ParamId, ParamStore};

/// All strictly increasing n-tuples over 0..t, capped at `cap` samples.
///
/// When C(t,n) <= cap every tuple is returned in lexicographic order;
/// otherwise a seed-deterministic uniform sample of `cap` distinct tuples
/// (sorted lexicographically) is returned.
pub fn enumerate_ordered_subsets(
    t: usize,
    n: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n < 2 || n > t {
        return Err(Error::invalid_input(format!(
            "subset arity must satisfy 2 <= n <= T, got n={n}, T={t}"
        )));
    }
    if cap < 1 {
        return Err(Error::invalid_input("subset cap must be >= 1"));
    }
    let mut all = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        all.push(current.clone());
        // next lexicographic combination
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(finish_subsets(all, cap, seed));
            }
            i -= 1;
            if current[i] != i + t - n {
                break;
            }
        }
        current[i] += 1;
        for j in i + 1..n {
            current[j] = current[j - 1] + 1;
        }
    }
}

fn finish_subsets(all: Vec<Vec<usize>>, cap: usize, seed: u64) -> Vec<Vec<usize>> {
    if all.len() <= cap {
        return all;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sample: Vec<Vec<usize>> = all
        .choose_multiple(&mut rng, cap)
        .cloned()
        .collect();
    sample.sort();
    sample
}

struct ScaleMlp {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
}

/// Embedding layer plus one g_n perceptron per scale.
pub struct RelationNet {
    /// Segment count T; scales run 2..=T.
    pub t: usize,
    pub feat_dim: usize,
    pub subset_cap: usize,
    d_e: usize,
    embed: (ParamId, ParamId),
    g: BTreeMap<usize, ScaleMlp>,
}

impl RelationNet {
    pub fn init(
        store: &mut ParamStore,
        t: usize,
        d_e: usize,
        feat_dim: usize,
        hidden: usize,
        subset_cap: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<RelationNet> {
        if t < 2 {
            return Err(Error::invalid_config(format!(
                "relation module needs T >= 2 segments, got {t}"
            )));
        }
        let embed = init_linear(store, "relation.embed", ParamGroup::Adapt, d_e, feat_dim, rng);
        let mut g = BTreeMap::new();
        for n in 2..=t {
            let l1 = init_linear(
                store,
                &format!("relation.g{n}.0"),
                ParamGroup::Adapt,
                n * feat_dim,
                hidden,
                rng,
            );
            let l2 = init_linear(
                store,
                &format!("relation.g{n}.1"),
                ParamGroup::Adapt,
                hidden,
                feat_dim,
                rng,
            );
            g.insert(n, ScaleMlp { l1, l2 });
        }
        Ok(RelationNet { t, feat_dim, subset_cap, d_e, embed, g })
    }

    /// (T, D_e) fused features -> (T, FeatDim) shared-space features z.
    pub fn shared_embed(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> Result<Var> {
        let shape = tape.value(e).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_e {
            return Err(Error::invalid_input(format!(
                "shared_embed expects (T,{}), got {shape:?}",
                self.d_e
            )));
        }
        let w = store.on_tape(tape, self.embed.0);
        let b = store.on_tape(tape, self.embed.1);
        let a = tape.linear(e, w, b);
        Ok(tape.relu(a))
    }

    /// Per-scale relation features r^n, each (1, FeatDim). `seed` controls
    /// tuple subsampling when C(T,n) exceeds the cap.
    pub fn relation_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        seed: u64,
    ) -> Result<BTreeMap<usize, Var>> {
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.t || shape[1] != self.feat_dim {
            return Err(Error::invalid_input(format!(
                "relation_features expects ({},{}), got {shape:?}",
                self.t, self.feat_dim
            )));
        }
        let mut out = BTreeMap::new();
        for (&n, mlp) in &self.g {
            let tuples =
                enumerate_ordered_subsets(self.t, n, self.subset_cap, seed ^ (n as u64) << 32)?;
            let tc = tape.tuple_concat(z, &tuples);
            let w1 = store.on_tape(tape, mlp.l1.0);
            let b1 = store.on_tape(tape, mlp.l1.1);
            let h = tape.linear(tc, w1, b1);
            let h = tape.relu(h);
            let w2 = store.on_tape(tape, mlp.l2.0);
            let b2 = store.on_tape(tape, mlp.l2.1);
            let o = tape.linear(h, w2, b2);
            let o = tape.relu(o);
            out.insert(n, tape.mean_rows(o));
        }
        Ok(out)
    }

    /// Sum the attended per-scale features into the (1, FeatDim) video
    /// feature. The scale set must be exactly 2..=T.
    pub fn aggregate_video(
        &self,
        tape: &mut Tape,
        attended: &BTreeMap<usize, Var>,
    ) -> Result<Var> {
        let want: Vec<usize> = (2..=self.t).collect();
        let got: Vec<usize> = attended.keys().copied().collect();
        if got != want {
            return Err(Error::invalid_input(format!(
                "aggregate_video: scales {got:?} do not match expected {want:?}"
            )));
        }
        let parts: Vec<Var> = attended.values().copied().collect();
        Ok(tape.sum_nodes(&parts))
    }
}

/// Brute-force n-subset enumeration used as the test oracle.
#[cfg(test)]
fn brute_force_subsets(t: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, t: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..t {
            cur.push(i);
            rec(i + 1, t, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, t, n, &mut Vec::new(), &mut out);
    out
}
