//! Synthetic two-domain "moving sprites" dataset, plus ingestion of
//! precomputed per-clip features.
//!
//! Each clip shows one bright sprite (its shape is the noun) translating with
//! one of four motion patterns (the verb) over a domain-styled background with
//! static distractor sprites. Flow is analytic: the sprite's velocity on its
//! support, zero elsewhere, plus optional noise. Audio is a class-conditioned
//! Gaussian whose mean shifts across domains. Domain shift touches only
//! background palette/texture/brightness, distractor count, and the audio
//! mean — the sprite's shape-motion semantics are identical in both domains,
//! so an informative patch exists by construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, ArrayHeader, FeatHeader};
use crate::error::{Error, Result};

pub const MOTION_PATTERNS: usize = 4; // left, right, up, down
pub const NOUN_SHAPES: usize = 4; // square, disc, plus, triangle
const ALL_SHAPES: usize = 8; // 4 noun shapes + 4 distractor-only shapes
const PALETTES: usize = 3;
const TEXTURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Per-domain rendering style — the domain-shift knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DomainStyle {
    pub palette: usize,
    pub texture: usize,
    /// Added to background and distractor pixels only; the sprite keeps its
    /// domain-invariant appearance.
    pub brightness: f32,
    pub distractors: usize,
}

impl Default for DomainStyle {
    fn default() -> Self {
        DomainStyle { palette: 0, texture: 0, brightness: 0.0, distractors: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Verb classes = motion patterns (max 4: left/right/up/down).
    pub verbs: usize,
    /// Noun classes = sprite shapes (max 4: square/disc/plus/triangle).
    pub nouns: usize,
    pub train_clips_per_domain: usize,
    pub val_clips_per_domain: usize,
    /// Frames per clip.
    pub t: usize,
    /// Square frame side H = W.
    pub frame_size: usize,
    pub sprite_size: usize,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub audio_dim: usize,
    /// Scale of class-conditioned audio means. Sized so audio is a genuinely
    /// informative modality (a classifier that ignores it leaves accuracy on
    /// the table) without being sufficient on its own.
    pub audio_mean_scale: f32,
    /// Gaussian audio noise, the source of class overlap in the audio cue.
    pub audio_noise_std: f32,
    /// Magnitude of the target-domain audio mean offset. This is the main
    /// covariate shift of the benchmark: a constant translation of the audio
    /// block that systematically misleads a source-only classifier but that
    /// feature alignment can project out.
    pub audio_domain_shift: f32,
    pub rgb_noise_std: f32,
    pub flow_noise_std: f32,
    /// Sprite speed in pixels per frame (jittered ±20% per clip).
    pub sprite_speed: f32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            verbs: 4,
            nouns: 4,
            train_clips_per_domain: 200,
            val_clips_per_domain: 64,
            t: 6,
            frame_size: 64,
            sprite_size: 14,
            source_style: DomainStyle { palette: 0, texture: 0, brightness: 0.0, distractors: 2 },
            target_style: DomainStyle { palette: 1, texture: 1, brightness: 0.30, distractors: 7 },
            audio_dim: 16,
            audio_mean_scale: 0.8,
            audio_noise_std: 1.0,
            audio_domain_shift: 2.0,
            rgb_noise_std: 0.02,
            flow_noise_std: 0.05,
            sprite_speed: 2.2,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::invalid_config(m));
        if self.verbs < 1 || self.verbs > MOTION_PATTERNS {
            return e(format!("verbs must be 1..={MOTION_PATTERNS}, got {}", self.verbs));
        }
        if self.nouns < 1 || self.nouns > NOUN_SHAPES {
            return e(format!("nouns must be 1..={NOUN_SHAPES}, got {}", self.nouns));
        }
        if self.train_clips_per_domain < 1 || self.val_clips_per_domain < 1 {
            return e("clip counts must be >= 1".to_string());
        }
        if self.t < 2 {
            return e(format!("t must be >= 2, got {}", self.t));
        }
        if self.frame_size < 16 {
            return e(format!("frame_size must be >= 16, got {}", self.frame_size));
        }
        if self.sprite_size < 3 || self.sprite_size * 2 > self.frame_size {
            return e(format!(
                "sprite_size must be in 3..={} for frame_size {}",
                self.frame_size / 2,
                self.frame_size
            ));
        }
        for (name, style) in [("source", &self.source_style), ("target", &self.target_style)] {
            if style.palette >= PALETTES || style.texture >= TEXTURES {
                return e(format!(
                    "{name}_style: palette must be < {PALETTES}, texture < {TEXTURES}"
                ));
            }
        }
        if self.audio_dim < 1 {
            return e("audio_dim must be >= 1".to_string());
        }
        for (name, v) in [
            ("audio_mean_scale", self.audio_mean_scale),
            ("audio_noise_std", self.audio_noise_std),
            ("audio_domain_shift", self.audio_domain_shift),
            ("rgb_noise_std", self.rgb_noise_std),
            ("flow_noise_std", self.flow_noise_std),
            ("sprite_speed", self.sprite_speed),
        ] {
            if !v.is_finite() || v < 0.0 {
                return e(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source_style,
            Domain::Target => &self.target_style,
        }
    }
}

/// One clip's manifest entry. Sprite boxes are generator ground truth used by
/// evaluation and visualization (patch-vs-sprite IoU), never by training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub domain: Domain,
    pub split: Split,
    pub verb: usize,
    pub noun: usize,
    pub rgb_payload_offset: u64,
    pub flow_payload_offset: u64,
    pub audio_payload_offset: u64,
    /// Per-frame sprite bounding boxes [x0, y0, x1, y1] in pixels.
    pub sprite_boxes: Vec<[f32; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub clips: Vec<ClipRecord>,
}

/// An opened (or freshly generated) on-disk dataset.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

/// One loaded clip. Verb/noun are private: training code must go through
/// [`Clip::train_labels`], which refuses to reveal target-domain labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub clip_id: String,
    pub domain: Domain,
    /// (T, 3, H, W)
    pub rgb: Array4<f32>,
    /// (T, 2, H, W) analytic motion field
    pub flow: Array4<f32>,
    pub audio: Array1<f32>,
    verb: usize,
    noun: usize,
}

impl Clip {
    /// Labels for training. Target-domain labels are off limits: the UDA
    /// contract is enforced here, not by convention.
    pub fn train_labels(&self) -> Result<(usize, usize)> {
        match self.domain {
            Domain::Source => Ok((self.verb, self.noun)),
            Domain::Target => Err(Error::invalid_input(format!(
                "label hygiene: clip {} is target-domain; its labels are evaluation-only",
                self.clip_id
            ))),
        }
    }

    /// Labels for evaluation/reporting only.
    pub fn eval_labels(&self) -> (usize, usize) {
        (self.verb, self.noun)
    }
}

// splitmix64: cheap, stable per-clip seed derivation from the master seed.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn clip_seed(master: u64, domain: Domain, split: Split, index: usize) -> u64 {
    let d = match domain {
        Domain::Source => 1u64,
        Domain::Target => 2,
    };
    let s = match split {
        Split::Train => 1u64,
        Split::Val => 2,
    };
    mix64(mix64(mix64(master) ^ d) ^ (s << 32) ^ index as u64)
}

/// Binary mask of one sprite shape. Shapes 0..4 are the noun vocabulary;
/// 4..8 appear only as distractors.
fn sprite_mask(shape: usize, s: usize) -> Array2<f32> {
    let c = (s - 1) as f32 / 2.0;
    let r = c;
    let bar = (s as f32 / 6.0).max(1.0);
    Array2::from_shape_fn((s, s), |(y, x)| {
        let dx = x as f32 - c;
        let dy = y as f32 - c;
        let inside = match shape {
            0 => true,                                      // square
            1 => dx * dx + dy * dy <= r * r,                // disc
            2 => dx.abs() <= bar || dy.abs() <= bar,        // plus
            3 => y >= x,                                    // triangle
            4 => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r) // ring
            }
            5 => ((2 * x / s) + (2 * y / s)) % 2 == 0,      // checker
            6 => {
                let diag = (s as f32 / 8.0).max(1.0);
                (dx - dy).abs() <= diag || (dx + dy).abs() <= diag // X
            }
            7 => {
                let b = (s as f32 / 5.0).ceil() as usize;   // hollow square
                x < b || y < b || x >= s - b || y >= s - b
            }
            _ => unreachable!("shape id out of range"),
        };
        if inside { 1.0 } else { 0.0 }
    })
}

fn palette_colors(palette: usize) -> [[f32; 3]; 3] {
    match palette {
        0 => [[0.18, 0.22, 0.30], [0.26, 0.31, 0.39], [0.12, 0.15, 0.22]], // cool
        1 => [[0.31, 0.24, 0.15], [0.39, 0.32, 0.20], [0.22, 0.17, 0.10]], // warm
        _ => [[0.15, 0.26, 0.17], [0.21, 0.34, 0.23], [0.10, 0.18, 0.12]], // green
    }
}

/// Static background for one clip: palette colors arranged by the domain's
/// texture, tiny pixel jitter, plus the domain brightness offset.
fn render_background(
    style: &DomainStyle,
    h: usize,
    w: usize,
    rng: &mut ChaCha20Rng,
) -> Array3<f32> {
    let colors = palette_colors(style.palette);
    let i1 = rng.gen_range(0..3);
    let i2 = (i1 + 1 + rng.gen_range(0..2)) % 3;
    let (c1, c2) = (colors[i1], colors[i2]);
    let phase = rng.gen_range(0..16usize);
    let mut block_choice = Array2::<f32>::zeros((h / 8 + 1, w / 8 + 1));
    block_choice.mapv_inplace(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let mut bg = Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        let mixv = match style.texture {
            0 => y as f32 / (h - 1) as f32,                               // vertical gradient
            1 => (((x + y + phase) / 8) % 2) as f32,                      // diagonal stripes
            _ => block_choice[[y / 8, x / 8]],                            // coarse blocks
        };
        c1[ch] * (1.0 - mixv) + c2[ch] * mixv + style.brightness
    });
    bg.mapv_inplace(|v| (v + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0));
    bg
}

fn stamp(canvas: &mut Array3<f32>, mask: &Array2<f32>, color: [f32; 3], x0: i64, y0: i64) {
    let (_, h, w) = (canvas.shape()[0], canvas.shape()[1], canvas.shape()[2]);
    for my in 0..mask.shape()[0] {
        for mx in 0..mask.shape()[1] {
            if mask[[my, mx]] == 0.0 {
                continue;
            }
            let y = y0 + my as i64;
            let x = x0 + mx as i64;
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            for ch in 0..3 {
                canvas[[ch, y as usize, x as usize]] = color[ch];
            }
        }
    }
}

struct RenderedClip {
    rgb: Array4<f32>,
    flow: Array4<f32>,
    audio: Array1<f32>,
    boxes: Vec<[f32; 4]>,
}

/// Class-conditioned audio mean, stable across splits for one dataset seed.
fn audio_class_mean(cfg: &DatasetConfig, verb: usize, noun: usize) -> Array1<f32> {
    let mut rng =
        ChaCha20Rng::seed_from_u64(mix64(cfg.seed ^ 0xau64 << 56 ^ (verb * 16 + noun) as u64));
    let n = Normal::new(0.0f32, 1.0).expect("unit normal");
    Array1::from_shape_fn(cfg.audio_dim, |_| n.sample(&mut rng) * cfg.audio_mean_scale)
}

fn audio_domain_offset(cfg: &DatasetConfig) -> Array1<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(mix64(cfg.seed ^ 0xdu64 << 56));
    let n = Normal::new(0.0f32, 1.0).expect("unit normal");
    Array1::from_shape_fn(cfg.audio_dim, |_| n.sample(&mut rng) * cfg.audio_domain_shift)
}

/// Deterministically render one clip from its derived seed.
fn render_clip(
    cfg: &DatasetConfig,
    domain: Domain,
    verb: usize,
    noun: usize,
    seed: u64,
) -> RenderedClip {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (h, w, s, t) = (cfg.frame_size, cfg.frame_size, cfg.sprite_size, cfg.t);
    let style = cfg.style(domain);

    // motion: pure axis translation; the trajectory is centered in a middle
    // band so an untrained center-initialized policy still sees the sprite
    let speed = cfg.sprite_speed * rng.gen_range(0.8..1.2);
    let (vx, vy): (f32, f32) = match verb {
        0 => (-speed, 0.0),
        1 => (speed, 0.0),
        2 => (0.0, -speed),
        _ => (0.0, speed),
    };
    let band = (0.38 * w as f32, 0.62 * w as f32);
    let tc_x = rng.gen_range(band.0..band.1);
    let tc_y = rng.gen_range(band.0..band.1);
    let half_span = (t - 1) as f32 / 2.0;
    let start_x = tc_x - vx * half_span - s as f32 / 2.0;
    let start_y = tc_y - vy * half_span - s as f32 / 2.0;

    let mut base = render_background(style, h, w, &mut rng);

    // sprite trajectory (continuous top-left positions, rendered at rounded
    // pixels) — computed before distractors so they can avoid it
    let positions: Vec<(f32, f32)> = (0..t)
        .map(|n| (start_x + vx * n as f32, start_y + vy * n as f32))
        .collect();

    // static distractors: shapes outside the noun vocabulary, tinted from the
    // domain palette (brighter than the background, dimmer than the sprite),
    // never overlapping the sprite's path
    let palette = palette_colors(style.palette);
    for _ in 0..style.distractors {
        let shape = rng.gen_range(NOUN_SHAPES..ALL_SHAPES);
        let base_color = palette[rng.gen_range(0..3)];
        let lift = rng.gen_range(1.25..1.55);
        let color = [
            (base_color[0] * lift + style.brightness).min(0.62),
            (base_color[1] * lift + style.brightness).min(0.62),
            (base_color[2] * lift + style.brightness).min(0.62),
        ];
        let mask = sprite_mask(shape, s);
        for _attempt in 0..50 {
            let dx = rng.gen_range(0..(w - s)) as i64;
            let dy = rng.gen_range(0..(h - s)) as i64;
            let clear = positions.iter().all(|&(px, py)| {
                let px = px.round() as i64;
                let py = py.round() as i64;
                dx + s as i64 + 1 < px
                    || px + s as i64 + 1 < dx
                    || dy + s as i64 + 1 < py
                    || py + s as i64 + 1 < dy
            });
            if clear {
                stamp(&mut base, &mask, color, dx, dy);
                break;
            }
        }
    }

    // bright domain-invariant sprite
    let sprite_color = [
        rng.gen_range(0.65..1.0),
        rng.gen_range(0.65..1.0),
        rng.gen_range(0.65..1.0),
    ];
    let mask = sprite_mask(noun, s);

    let mut rgb = Array4::<f32>::zeros((t, 3, h, w));
    let mut flow = Array4::<f32>::zeros((t, 2, h, w));
    let mut boxes = Vec::with_capacity(t);
    let rgb_noise = Normal::new(0.0f32, cfg.rgb_noise_std.max(1e-12)).expect("normal");
    let flow_noise = Normal::new(0.0f32, cfg.flow_noise_std.max(1e-12)).expect("normal");
    for n in 0..t {
        let (px, py) = positions[n];
        let (ix, iy) = (px.round() as i64, py.round() as i64);
        let mut frame = base.clone();
        stamp(&mut frame, &mask, sprite_color, ix, iy);
        if cfg.rgb_noise_std > 0.0 {
            frame.mapv_inplace(|v| (v + rgb_noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
        rgb.index_axis_mut(ndarray::Axis(0), n).assign(&frame);

        // analytic flow: velocity on the rendered support, zero elsewhere
        for my in 0..s {
            for mx in 0..s {
                if mask[[my, mx]] == 0.0 {
                    continue;
                }
                let y = iy + my as i64;
                let x = ix + mx as i64;
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                flow[[n, 0, y as usize, x as usize]] = vx;
                flow[[n, 1, y as usize, x as usize]] = vy;
            }
        }
        if cfg.flow_noise_std > 0.0 {
            flow.index_axis_mut(ndarray::Axis(0), n)
                .mapv_inplace(|v| v + flow_noise.sample(&mut rng));
        }
        boxes.push([ix as f32, iy as f32, (ix + s as i64) as f32, (iy + s as i64) as f32]);
    }

    let mut audio = audio_class_mean(cfg, verb, noun);
    if domain == Domain::Target {
        audio = audio + audio_domain_offset(cfg);
    }
    let an = Normal::new(0.0f32, cfg.audio_noise_std.max(1e-12)).expect("normal");
    if cfg.audio_noise_std > 0.0 {
        audio.mapv_inplace(|v| v + an.sample(&mut rng));
    }

    RenderedClip { rgb, flow, audio, boxes }
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.manifest.config
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn records(&self, domain: Domain, split: Split) -> Vec<&ClipRecord> {
        self.manifest
            .clips
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .collect()
    }

    pub fn record(&self, clip_id: &str) -> Result<&ClipRecord> {
        self.manifest
            .clips
            .iter()
            .find(|r| r.clip_id == clip_id)
            .ok_or_else(|| Error::data(format!("clip {clip_id} not in manifest")))
    }

    /// Generate the full dataset under `root` and write its manifest.
    pub fn generate(cfg: &DatasetConfig, root: &Path) -> Result<Dataset> {
        cfg.validate()?;
        let audio_dir = root.join("audio");
        fs::create_dir_all(&audio_dir)
            .map_err(|e| Error::data(format!("cannot create {}: {e}", audio_dir.display())))?;

        let mut clips = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for split in [Split::Train, Split::Val] {
                let dir = root.join(domain.as_str()).join(split.as_str());
                fs::create_dir_all(&dir)
                    .map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
                let count = match split {
                    Split::Train => cfg.train_clips_per_domain,
                    Split::Val => cfg.val_clips_per_domain,
                };
                for i in 0..count {
                    let verb = i % cfg.verbs;
                    let noun = (i / cfg.verbs) % cfg.nouns;
                    let clip_id = format!(
                        "{}_{}_{:04}",
                        match domain {
                            Domain::Source => "src",
                            Domain::Target => "tgt",
                        },
                        split.as_str(),
                        i
                    );
                    let seed = clip_seed(cfg.seed, domain, split, i);
                    let rc = render_clip(cfg, domain, verb, noun, seed);

                    let rgb_path = dir.join(format!("{clip_id}.rgb.bin"));
                    let rgb_off = container::write_with_header(
                        &rgb_path,
                        &ArrayHeader {
                            clip_id: clip_id.clone(),
                            shape: rc.rgb.shape().to_vec(),
                            dtype: "f32".into(),
                        },
                        rc.rgb.as_slice().expect("contiguous rgb"),
                    )?;
                    let flow_path = dir.join(format!("{clip_id}.flow.bin"));
                    let flow_off = container::write_with_header(
                        &flow_path,
                        &ArrayHeader {
                            clip_id: clip_id.clone(),
                            shape: rc.flow.shape().to_vec(),
                            dtype: "f32".into(),
                        },
                        rc.flow.as_slice().expect("contiguous flow"),
                    )?;
                    let audio_path = audio_dir.join(format!("{clip_id}.audio.bin"));
                    let audio_off = container::write_with_header(
                        &audio_path,
                        &ArrayHeader {
                            clip_id: clip_id.clone(),
                            shape: vec![cfg.audio_dim],
                            dtype: "f32".into(),
                        },
                        rc.audio.as_slice().expect("contiguous audio"),
                    )?;

                    clips.push(ClipRecord {
                        clip_id,
                        domain,
                        split,
                        verb,
                        noun,
                        rgb_payload_offset: rgb_off,
                        flow_payload_offset: flow_off,
                        audio_payload_offset: audio_off,
                        sprite_boxes: rc.boxes,
                    });
                }
            }
        }

        let manifest = DatasetManifest { config: cfg.clone(), clips };
        let manifest_json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::data(format!("cannot serialize manifest: {e}")))?;
        fs::write(root.join("manifest.json"), manifest_json)
            .map_err(|e| Error::data(format!("cannot write manifest: {e}")))?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    /// Open an existing dataset directory.
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))?;
        manifest.config.validate()?;
        let ids: BTreeSet<&str> = manifest.clips.iter().map(|c| c.clip_id.as_str()).collect();
        if ids.len() != manifest.clips.len() {
            return Err(Error::data("manifest has duplicate clip ids"));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    fn read_array(&self, path: &Path, clip_id: &str, want_shape: &[usize]) -> Result<Vec<f32>> {
        let (header, payload): (ArrayHeader, Vec<f32>) = container::read_with_header(path)
            .map_err(|e| Error::data(format!("clip {clip_id}: {e}")))?;
        if header.clip_id != clip_id {
            return Err(Error::data(format!(
                "clip {clip_id}: file {} belongs to {}",
                path.display(),
                header.clip_id
            )));
        }
        if header.shape != want_shape {
            return Err(Error::data(format!(
                "clip {clip_id}: {} has shape {:?}, config implies {:?}",
                path.display(),
                header.shape,
                want_shape
            )));
        }
        let expect: usize = want_shape.iter().product();
        container::expect_len(path, &payload, expect, "header shape")
            .map_err(|e| Error::data(format!("clip {clip_id}: {e}")))?;
        if payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "clip {clip_id}: {} contains non-finite values",
                path.display()
            )));
        }
        Ok(payload)
    }

    pub fn load_clip(&self, clip_id: &str) -> Result<Clip> {
        let rec = self.record(clip_id)?;
        let cfg = &self.manifest.config;
        let dir = self.root.join(rec.domain.as_str()).join(rec.split.as_str());
        let (t, h, w) = (cfg.t, cfg.frame_size, cfg.frame_size);

        let rgb_raw =
            self.read_array(&dir.join(format!("{clip_id}.rgb.bin")), clip_id, &[t, 3, h, w])?;
        let flow_raw =
            self.read_array(&dir.join(format!("{clip_id}.flow.bin")), clip_id, &[t, 2, h, w])?;
        let audio_raw = self.read_array(
            &self.root.join("audio").join(format!("{clip_id}.audio.bin")),
            clip_id,
            &[cfg.audio_dim],
        )?;

        Ok(Clip {
            clip_id: clip_id.to_string(),
            domain: rec.domain,
            rgb: Array4::from_shape_vec((t, 3, h, w), rgb_raw).expect("rgb shape checked"),
            flow: Array4::from_shape_vec((t, 2, h, w), flow_raw).expect("flow shape checked"),
            audio: Array1::from_vec(audio_raw),
            verb: rec.verb,
            noun: rec.noun,
        })
    }
}

/// In-memory store of ingested per-clip feature matrices, keyed by
/// (clip_id, modality).
#[derive(Default)]
#[derive(Debug)]
pub struct FeatureStore {
    feats: std::collections::BTreeMap<(String, String), Array2<f32>>,
}

impl FeatureStore {
    pub fn get(&self, clip_id: &str, modality: &str) -> Option<&Array2<f32>> {
        self.feats.get(&(clip_id.to_string(), modality.to_string()))
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// Ingest every `<clip_id>.<modality>.feat` file in `dir`, validating the
/// declared dimensions against the expected (T, D).
pub fn ingest_features(dir: &Path, expected_t: usize, expected_d: usize) -> Result<FeatureStore> {
    let mut store = FeatureStore::default();
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read feature dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "feat").unwrap_or(false))
        .collect();
    paths.sort();
    for path in paths {
        let stem = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::data(format!("bad feature file name {}", path.display())))?;
        // name layout: <clip_id>.<modality>.feat
        let without = stem.trim_end_matches(".feat");
        let (clip_id, modality) = without.rsplit_once('.').ok_or_else(|| {
            Error::data(format!("feature file {} is not <clip_id>.<modality>.feat", path.display()))
        })?;
        let (header, payload): (FeatHeader, Vec<f32>) = container::read_with_header(&path)?;
        if header.clip_id != clip_id {
            return Err(Error::data(format!(
                "feature file {}: header clip_id {} does not match file name",
                path.display(),
                header.clip_id
            )));
        }
        if header.t != expected_t || header.d != expected_d {
            return Err(Error::data(format!(
                "clip {clip_id}: feature dims {}x{} do not match configured {expected_t}x{expected_d}",
                header.t, header.d
            )));
        }
        container::expect_len(&path, &payload, header.t * header.d, "TxD")
            .map_err(|e| Error::data(format!("clip {clip_id}: {e}")))?;
        if payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("clip {clip_id}: non-finite feature values")));
        }
        store.feats.insert(
            (clip_id.to_string(), modality.to_string()),
            Array2::from_shape_vec((header.t, header.d), payload).expect("len checked"),
        );
    }
    Ok(store)
}

/// Hash of every dataset file (manifest + arrays), for determinism checks.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    walk(root, &mut files).map_err(|e| Error::data(format!("walk {}: {e}", root.display())))?;
    files.sort();
    let mut all = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        all.extend_from_slice(rel.to_string_lossy().as_bytes());
        all.extend_from_slice(
            &fs::read(f).map_err(|e| Error::data(format!("read {}: {e}", f.display())))?,
        );
    }
    Ok(container::sha256_hex(&all))
}
