//! Two-stream glance–select–focus feature extraction and fusion.
//!
//! Each stream (spatial RGB, temporal flow) owns four small networks: a
//! glancer that produces a coarse map per frame, a policy that squashes that
//! map into a normalized patch center, a focuser that encodes the cropped
//! patch, and a global encoder for the whole frame. The differentiable crop
//! (in [`crate::sampler`], recorded by the tape) is what connects the policy
//! to the classification loss. Per-segment fusion concatenates, in fixed
//! order: spatial global, spatial local, temporal global, temporal local,
//! audio.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, Tape, Var};
use crate::data::{Clip, FeatureStore};
use crate::error::{Error, Result};
use crate::nn::{init_bias, init_conv, init_linear, ParamGroup, ParamId, ParamStore};
use crate::sampler::PatchSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Spatial,
    Temporal,
}

impl StreamKind {
    pub fn channels(&self) -> usize {
        match self {
            StreamKind::Spatial => 3,
            StreamKind::Temporal => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::Spatial => "spatial",
            StreamKind::Temporal => "temporal",
        }
    }

    /// Modality tag used by precomputed feature files.
    pub fn modality(&self) -> &'static str {
        match self {
            StreamKind::Spatial => "rgb",
            StreamKind::Temporal => "flow",
        }
    }
}

/// Where per-segment global features come from: the built-in small encoder,
/// or ingested precomputed feature files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalSource {
    Encode,
    Ingest,
}

/// Shapes of the extraction networks (shared by both streams, as in the
/// paper's identical per-stream settings).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// When false, the glance/policy/focus branch is absent entirely and
    /// fusion carries only global + audio blocks (the "global-only" ablation).
    pub use_local: bool,
    pub patch_size: usize,
    /// Frames seen by glancer+policy (left of NumSeg's "+").
    pub t_g: usize,
    /// Frames seen by focuser+global (right of NumSeg's "+"); the segment
    /// count of every downstream feature.
    pub t_f: usize,
    /// Channel widths of the glancer's three stride-2 conv blocks; the last
    /// is the coarse-map depth C_g.
    pub glance_widths: [usize; 3],
    /// Widths of the focuser's four conv blocks; the last is D_L.
    pub focus_widths: [usize; 4],
    /// Widths of the global encoder's four stride-2 conv blocks; the last
    /// is D_G (encode path).
    pub global_widths: [usize; 4],
    pub policy_hidden: usize,
    pub global_source: GlobalSource,
    /// Declared D of ingested feature files (ingest path only).
    pub ingest_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            use_local: true,
            patch_size: 24,
            t_g: 6,
            t_f: 6,
            glance_widths: [6, 8, 12],
            focus_widths: [12, 16, 24, 24],
            global_widths: [8, 12, 16, 24],
            policy_hidden: 32,
            global_source: GlobalSource::Encode,
            ingest_dim: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn local_dim(&self) -> usize {
        if self.use_local {
            self.focus_widths[3]
        } else {
            0
        }
    }

    pub fn global_dim(&self) -> usize {
        match self.global_source {
            GlobalSource::Encode => self.global_widths[3],
            GlobalSource::Ingest => self.ingest_dim,
        }
    }

    pub fn validate(&self, frame_size: usize) -> Result<()> {
        if self.t_g < 1 || self.t_f < 1 {
            return Err(Error::invalid_config("t_g and t_f must be >= 1"));
        }
        if self.patch_size < 8 || self.patch_size > frame_size {
            return Err(Error::invalid_config(format!(
                "patch_size must be in 8..={frame_size}, got {}",
                self.patch_size
            )));
        }
        if frame_size % 8 != 0 {
            return Err(Error::invalid_config(format!(
                "frame_size must be divisible by 8 for the stride-2 stacks, got {frame_size}"
            )));
        }
        if self.global_source == GlobalSource::Ingest && self.ingest_dim == 0 {
            return Err(Error::invalid_config(
                "ingest_dim must be set when global_source = ingest",
            ));
        }
        for w in self
            .glance_widths
            .iter()
            .chain(&self.focus_widths)
            .chain(&self.global_widths)
            .chain([&self.policy_hidden])
        {
            if *w < 1 {
                return Err(Error::invalid_config("network widths must be >= 1"));
            }
        }
        Ok(())
    }
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

/// The glance -> policy -> focus parameter set of one stream.
struct LocalBranch {
    glance: Vec<ConvLayer>,
    policy_l1: (ParamId, ParamId),
    policy_l2: (ParamId, ParamId),
    focus: Vec<ConvLayer>,
}

/// One stream's glancer / policy / focuser / global-encoder parameters.
pub struct StreamNet {
    pub kind: StreamKind,
    frame_size: usize,
    patch_size: usize,
    local: Option<LocalBranch>,
    global: Vec<ConvLayer>,
}

fn add_conv(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    cout: usize,
    cin: usize,
    stride: usize,
    rng: &mut ChaCha20Rng,
) -> ConvLayer {
    let w = init_conv(store, &format!("{name}.w"), group, cout, cin, 3, rng);
    let b = init_bias(store, &format!("{name}.b"), group, cout);
    ConvLayer { w, b, stride }
}

impl StreamNet {
    pub fn init(
        store: &mut ParamStore,
        kind: StreamKind,
        cfg: &ExtractorConfig,
        frame_size: usize,
        rng: &mut ChaCha20Rng,
    ) -> StreamNet {
        let name = kind.name();
        let cin = kind.channels();
        let local = if cfg.use_local {
            let gw = cfg.glance_widths;
            let glance = vec![
                add_conv(store, &format!("{name}.glancer.0"), ParamGroup::Glancer, gw[0], cin, 2, rng),
                add_conv(store, &format!("{name}.glancer.1"), ParamGroup::Glancer, gw[1], gw[0], 2, rng),
                add_conv(store, &format!("{name}.glancer.2"), ParamGroup::Glancer, gw[2], gw[1], 2, rng),
            ];
            let coarse_side = frame_size / 8;
            let flat = gw[2] * coarse_side * coarse_side;
            let policy_l1 = init_linear(
                store,
                &format!("{name}.policy.0"),
                ParamGroup::Policy,
                flat,
                cfg.policy_hidden,
                rng,
            );
            let policy_l2 = init_linear(
                store,
                &format!("{name}.policy.1"),
                ParamGroup::Policy,
                cfg.policy_hidden,
                2,
                rng,
            );
            // damp the head so initial centers sit near the frame middle
            // (sigmoid of a small logit), where the sprite band lives
            {
                let w = store.value(policy_l2.0).mapv(|v| v * 0.1);
                store.set_value(policy_l2.0, w);
            }
            let fw = cfg.focus_widths;
            let focus = vec![
                add_conv(store, &format!("{name}.focuser.0"), ParamGroup::Focuser, fw[0], cin, 2, rng),
                add_conv(store, &format!("{name}.focuser.1"), ParamGroup::Focuser, fw[1], fw[0], 2, rng),
                add_conv(store, &format!("{name}.focuser.2"), ParamGroup::Focuser, fw[2], fw[1], 2, rng),
                add_conv(store, &format!("{name}.focuser.3"), ParamGroup::Focuser, fw[3], fw[2], 1, rng),
            ];
            Some(LocalBranch { glance, policy_l1, policy_l2, focus })
        } else {
            None
        };
        let ow = cfg.global_widths;
        let global = vec![
            add_conv(store, &format!("{name}.global.0"), ParamGroup::Global, ow[0], cin, 2, rng),
            add_conv(store, &format!("{name}.global.1"), ParamGroup::Global, ow[1], ow[0], 2, rng),
            add_conv(store, &format!("{name}.global.2"), ParamGroup::Global, ow[2], ow[1], 2, rng),
            add_conv(store, &format!("{name}.global.3"), ParamGroup::Global, ow[3], ow[2], 2, rng),
        ];
        StreamNet {
            kind,
            frame_size,
            patch_size: cfg.patch_size,
            local,
            global,
        }
    }

    fn local(&self) -> Result<&LocalBranch> {
        self.local.as_ref().ok_or_else(|| {
            Error::invalid_config(format!(
                "{} stream has no local branch (use_local = false)",
                self.kind.name()
            ))
        })
    }

    fn check_frames(&self, tape: &Tape, frames: Var, what: &str) -> Result<()> {
        let shape = tape.value(frames).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.kind.channels() {
            return Err(Error::invalid_input(format!(
                "{what}: {} stream expects (T,{},H,W) frames, got {shape:?}",
                self.kind.name(),
                self.kind.channels()
            )));
        }
        Ok(())
    }

    fn conv_stack(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layers: &[ConvLayer],
        mut x: Var,
    ) -> Var {
        for layer in layers {
            let w = store.on_tape(tape, layer.w);
            let b = store.on_tape(tape, layer.b);
            let c = tape.conv2d(x, w, layer.stride, 1);
            let cb = tape.add_bias4(c, b);
            x = tape.relu(cb);
        }
        x
    }

    /// (T,C,H,W) frames -> (T, C_g, H/8, W/8) coarse maps.
    pub fn glance(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        self.check_frames(tape, frames, "glance")?;
        let local = self.local()?;
        Ok(self.conv_stack(tape, store, &local.glance, frames))
    }

    /// Coarse maps -> (T,2) normalized centers in [0,1]^2.
    pub fn select_patch(&self, tape: &mut Tape, store: &ParamStore, coarse: Var) -> Result<Var> {
        let local = self.local()?;
        let flat = tape.flatten(coarse);
        let w1 = store.on_tape(tape, local.policy_l1.0);
        let b1 = store.on_tape(tape, local.policy_l1.1);
        let h = tape.linear(flat, w1, b1);
        let h = tape.relu(h);
        let w2 = store.on_tape(tape, local.policy_l2.0);
        let b2 = store.on_tape(tape, local.policy_l2.1);
        let logits = tape.linear(h, w2, b2);
        Ok(tape.sigmoid(logits))
    }

    /// (T,C,P,P) patches -> (T, D_L) local features.
    pub fn focus(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        self.check_frames(tape, patches, "focus")?;
        let local = self.local()?;
        let shape = tape.value(patches).shape().to_vec();
        if shape[2] != self.patch_size || shape[3] != self.patch_size {
            return Err(Error::invalid_input(format!(
                "focus: expected {0}x{0} patches, got {1}x{2}",
                self.patch_size, shape[2], shape[3]
            )));
        }
        let maps = self.conv_stack(tape, store, &local.focus, patches);
        Ok(tape.global_avg_pool(maps))
    }

    /// (T,C,H,W) frames -> (T, D_G) global features (encode path).
    pub fn encode_global(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        self.check_frames(tape, frames, "encode_global")?;
        let maps = self.conv_stack(tape, store, &self.global, frames);
        Ok(tape.global_avg_pool(maps))
    }

    /// Expected coarse-map side length, for policy input sizing.
    pub fn coarse_side(&self) -> usize {
        let mut side = self.frame_size;
        for _ in 0..3 {
            side = conv_out_len(side, 3, 2, 1);
        }
        side
    }
}

/// Deterministic uniform segment sampling: index of segment i out of k over
/// t frames (TSN-style segment centers).
pub fn uniform_indices(t_total: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > t_total {
        return Err(Error::invalid_config(format!(
            "cannot sample {k} segments from {t_total} frames"
        )));
    }
    Ok((0..k).map(|i| ((2 * i + 1) * t_total) / (2 * k)).collect())
}

/// For each focus frame, the position (within `glance_idx`) of the temporally
/// nearest glanced frame; ties break toward the earlier frame.
pub fn nearest_map(glance_idx: &[usize], focus_idx: &[usize]) -> Vec<usize> {
    focus_idx
        .iter()
        .map(|&f| {
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (pos, &g) in glance_idx.iter().enumerate() {
                let d = f.abs_diff(g);
                if d < best_d {
                    best_d = d;
                    best = pos;
                }
            }
            best
        })
        .collect()
}

/// Widths of the five fusion blocks, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLayout {
    pub d_sg: usize,
    pub d_sl: usize,
    pub d_tg: usize,
    pub d_tl: usize,
    pub d_a: usize,
}

impl FusionLayout {
    pub fn d_e(&self) -> usize {
        self.d_sg + self.d_sl + self.d_tg + self.d_tl + self.d_a
    }

    /// (start, len) of each block within a fused row.
    pub fn offsets(&self) -> [(usize, usize); 5] {
        let widths = [self.d_sg, self.d_sl, self.d_tg, self.d_tl, self.d_a];
        let mut out = [(0usize, 0usize); 5];
        let mut start = 0;
        for (i, w) in widths.iter().enumerate() {
            out[i] = (start, *w);
            start += w;
        }
        out
    }

    /// Recover block `i` of a fused (T, D_e) matrix.
    pub fn slice_block(&self, e: &Array2<f32>, i: usize) -> Result<Array2<f32>> {
        if e.shape()[1] != self.d_e() {
            return Err(Error::invalid_input(format!(
                "fused width {} does not match layout D_e {}",
                e.shape()[1],
                self.d_e()
            )));
        }
        let (start, len) = self.offsets()[i];
        Ok(e.slice(ndarray::s![.., start..start + len]).to_owned())
    }
}

/// Fusion: concatenate the five per-segment blocks in fixed order.
/// Every block must be present — there is no silent zero-fill.
pub fn fuse(tape: &mut Tape, blocks: &[Option<Var>; 5]) -> Result<Var> {
    const NAMES: [&str; 5] = ["e_sG", "e_sL", "e_tG", "e_tL", "e_aG"];
    let mut parts = Vec::with_capacity(5);
    for (i, b) in blocks.iter().enumerate() {
        match b {
            Some(v) => parts.push(*v),
            None => {
                return Err(Error::invalid_input(format!(
                    "fusion block {} missing",
                    NAMES[i]
                )))
            }
        }
    }
    let rows = tape.value(parts[0]).shape()[0];
    for (i, p) in parts.iter().enumerate() {
        if tape.value(*p).shape()[0] != rows {
            return Err(Error::invalid_input(format!(
                "fusion block {} has {} rows, expected {rows}",
                NAMES[i],
                tape.value(*p).shape()[0]
            )));
        }
    }
    Ok(tape.concat_cols(&parts))
}

/// Both streams plus the fusion layout — the complete feature extractor.
pub struct Extractor {
    pub spatial: StreamNet,
    pub temporal: StreamNet,
    pub cfg: ExtractorConfig,
    pub audio_dim: usize,
    frame_size: usize,
}

/// Gradient-carrying results of one clip's extraction.
pub struct Extraction {
    /// (T_f, D_e) fused per-segment features.
    pub features: Var,
    /// (T_f, 2) normalized patch centers per stream (after nearest-frame
    /// reuse when T_g != T_f). `None` in the global-only configuration.
    pub spatial_centers: Option<Var>,
    pub temporal_centers: Option<Var>,
    /// Original frame indices feeding the focuser/global encoders.
    pub focus_indices: Vec<usize>,
}

impl Extractor {
    pub fn init(
        store: &mut ParamStore,
        cfg: &ExtractorConfig,
        frame_size: usize,
        audio_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Extractor> {
        cfg.validate(frame_size)?;
        let spatial = StreamNet::init(store, StreamKind::Spatial, cfg, frame_size, rng);
        let temporal = StreamNet::init(store, StreamKind::Temporal, cfg, frame_size, rng);
        Ok(Extractor { spatial, temporal, cfg: cfg.clone(), audio_dim, frame_size })
    }

    pub fn layout(&self) -> FusionLayout {
        FusionLayout {
            d_sg: self.cfg.global_dim(),
            d_sl: self.cfg.local_dim(),
            d_tg: self.cfg.global_dim(),
            d_tl: self.cfg.local_dim(),
            d_a: self.audio_dim,
        }
    }

    fn gather_frames(frames: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
        let s = frames.shape();
        let mut out = Array4::<f32>::zeros((idx.len(), s[1], s[2], s[3]));
        for (i, &f) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&frames.index_axis(Axis(0), f));
        }
        out
    }

    /// One stream's glance -> select -> crop -> focus chain plus its global
    /// branch. Returns (global (T_f,D_G), local (T_f,D_L), centers (T_f,2));
    /// the local pair is `None` in the global-only configuration.
    fn stream_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        net: &StreamNet,
        frames: &Array4<f32>,
        clip_id: &str,
        feats: Option<&FeatureStore>,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let t_total = frames.shape()[0];
        let f_idx = uniform_indices(t_total, self.cfg.t_f)?;
        let focus_frames = tape.leaf(Self::gather_frames(frames, &f_idx).into_dyn());

        let (local, centers) = if self.cfg.use_local {
            let g_idx = uniform_indices(t_total, self.cfg.t_g)?;
            let reuse = nearest_map(&g_idx, &f_idx);
            let glance_frames = tape.leaf(Self::gather_frames(frames, &g_idx).into_dyn());
            let coarse = net.glance(tape, store, glance_frames)?;
            let centers_g = net.select_patch(tape, store, coarse)?;
            let centers = tape.gather_rows(centers_g, &reuse);
            let patches = tape.bilinear_crop(focus_frames, centers, self.cfg.patch_size);
            (Some(net.focus(tape, store, patches)?), Some(centers))
        } else {
            (None, None)
        };

        let global = match self.cfg.global_source {
            GlobalSource::Encode => net.encode_global(tape, store, focus_frames)?,
            GlobalSource::Ingest => {
                let fs = feats.ok_or_else(|| {
                    Error::invalid_config(
                        "global_source = ingest but no feature store supplied",
                    )
                })?;
                let m = fs.get(clip_id, net.kind.modality()).ok_or_else(|| {
                    Error::data(format!(
                        "clip {clip_id}: no ingested {} features",
                        net.kind.modality()
                    ))
                })?;
                if m.shape() != [self.cfg.t_f, self.cfg.ingest_dim] {
                    return Err(Error::data(format!(
                        "clip {clip_id}: ingested {} features are {:?}, expected {:?}",
                        net.kind.modality(),
                        m.shape(),
                        [self.cfg.t_f, self.cfg.ingest_dim]
                    )));
                }
                tape.leaf(m.clone().into_dyn())
            }
        };
        Ok((global, local, centers))
    }

    /// Full glance→policy→crop→focus→fuse extraction of one clip.
    pub fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &Clip,
        feats: Option<&FeatureStore>,
    ) -> Result<Extraction> {
        if clip.rgb.shape()[2] != self.frame_size || clip.rgb.shape()[3] != self.frame_size {
            return Err(Error::invalid_input(format!(
                "clip {}: frames are {}x{}, extractor built for {}",
                clip.clip_id,
                clip.rgb.shape()[2],
                clip.rgb.shape()[3],
                self.frame_size
            )));
        }
        if clip.audio.len() != self.audio_dim {
            return Err(Error::invalid_input(format!(
                "clip {}: audio dim {} != configured {}",
                clip.clip_id,
                clip.audio.len(),
                self.audio_dim
            )));
        }
        let (e_sg, e_sl, s_centers) =
            self.stream_features(tape, store, &self.spatial, &clip.rgb, &clip.clip_id, feats)?;
        let (e_tg, e_tl, t_centers) =
            self.stream_features(tape, store, &self.temporal, &clip.flow, &clip.clip_id, feats)?;

        let audio_row = tape.leaf(
            Array2::from_shape_vec((1, self.audio_dim), clip.audio.to_vec())
                .expect("audio row")
                .into_dyn(),
        );
        let e_a = tape.broadcast_rows(audio_row, self.cfg.t_f);

        let features = if self.cfg.use_local {
            fuse(tape, &[Some(e_sg), e_sl, Some(e_tg), e_tl, Some(e_a)])?
        } else {
            // global-only ablation: the two local blocks are width 0, so the
            // fused row is just [e_sG | e_tG | e_aG]
            for (v, what) in [(e_sg, "e_sG"), (e_tg, "e_tG"), (e_a, "e_aG")] {
                if tape.value(v).shape()[0] != self.cfg.t_f {
                    return Err(Error::invalid_input(format!(
                        "fusion block {what} has {} rows, expected T_f = {}",
                        tape.value(v).shape()[0],
                        self.cfg.t_f
                    )));
                }
            }
            tape.concat_cols(&[e_sg, e_tg, e_a])
        };
        let focus_indices = uniform_indices(clip.rgb.shape()[0], self.cfg.t_f)?;
        Ok(Extraction {
            features,
            spatial_centers: s_centers,
            temporal_centers: t_centers,
            focus_indices,
        })
    }

    /// Eval-time helper: the spatial stream's selected patches as PatchSpecs,
    /// one per focus frame.
    pub fn spatial_patch_specs(
        &self,
        store: &ParamStore,
        clip: &Clip,
        feats: Option<&FeatureStore>,
    ) -> Result<Vec<PatchSpec>> {
        let mut tape = Tape::new();
        let ex = self.extract(&mut tape, store, clip, feats)?;
        let centers = ex.spatial_centers.ok_or_else(|| {
            Error::invalid_config("no patch centers: extractor was built with use_local = false")
        })?;
        let centers = tape.value(centers);
        (0..centers.shape()[0])
            .map(|i| {
                PatchSpec::new(
                    centers[[i, 0]] as f64,
                    centers[[i, 1]] as f64,
                    self.cfg.patch_size,
                )
            })
            .collect()
    }
}
