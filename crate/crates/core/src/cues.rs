//! Visual and textual cue tokens behind a provider interface.
//!
//! [`SyntheticCueProvider`] derives visual tokens from fixed random
//! projections of a sample's features and text tokens from a coarse 3×3
//! direction description of the sample's gaze, corrupted with probability
//! `p_desc`. It reads gaze from a "gaze view" handed over at construction,
//! which plays the part of a captioning model looking at the image.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Sample};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::SphericalGaze;

pub const DEFAULT_PROMPT: &str = "In 3D space, where is the person looking, including details about horizontal (left/right) direction, vertical (up/down) direction, and forward/backward relative to the viewer?";

/// `(M+1) × d_v` tokens: one summary token followed by `M` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualCue {
    pub tokens: Tensor,
}

/// `n_t × d_t` description-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCue {
    pub tokens: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt must not be empty"));
        }
        Ok(Self { text })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueMode {
    Synthetic,
    Remote,
}

/// Token counts and widths of both cue kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueDims {
    pub patches: usize,
    pub visual_width: usize,
    pub text_tokens: usize,
    pub text_width: usize,
}

impl CueDims {
    pub fn visual_tokens(&self) -> usize {
        self.patches + 1
    }

    pub fn visual_len(&self) -> usize {
        self.visual_tokens() * self.visual_width
    }

    pub fn text_len(&self) -> usize {
        self.text_tokens * self.text_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueProviderConfig {
    pub mode: CueMode,
    pub patches: usize,
    pub visual_width: usize,
    pub text_tokens: usize,
    pub text_width: usize,
    /// Probability that a description is replaced by a uniformly random class.
    pub p_desc: f32,
    /// Yaw/pitch magnitude (radians) separating "center" from the sides.
    pub class_threshold: f32,
    /// Scale of the fixed per-token offsets added to visual tokens.
    pub visual_offset_scale: f32,
    /// Scale of the fixed per-position jitter added to text tokens.
    pub text_jitter: f32,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for CueProviderConfig {
    fn default() -> Self {
        Self {
            mode: CueMode::Synthetic,
            patches: 8,
            visual_width: 16,
            text_tokens: 4,
            text_width: 16,
            p_desc: 0.15,
            class_threshold: 0.2,
            visual_offset_scale: 0.1,
            text_jitter: 0.05,
            endpoint: None,
            timeout_ms: 5_000,
            max_in_flight: 8,
        }
    }
}

impl CueProviderConfig {
    pub fn dims(&self) -> CueDims {
        CueDims {
            patches: self.patches,
            visual_width: self.visual_width,
            text_tokens: self.text_tokens,
            text_width: self.text_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.visual_width == 0 || self.text_tokens == 0 || self.text_width == 0 {
            return Err(Error::invalid("cue dims must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_desc) {
            return Err(Error::invalid("p_desc must lie in [0, 1]"));
        }
        if !(self.class_threshold >= 0.0 && self.visual_offset_scale >= 0.0 && self.text_jitter >= 0.0) {
            return Err(Error::invalid(
                "class_threshold and cue noise scales must be non-negative",
            ));
        }
        if self.mode == CueMode::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::invalid("remote cue mode needs an endpoint"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be positive"));
        }
        Ok(())
    }
}

/// Source of cue tokens for a sample.
pub trait CueProvider {
    fn dims(&self) -> CueDims;
    fn visual_cue(&self, sample: &Sample) -> Result<VisualCue>;
    fn text_cue(&self, sample: &Sample, prompt: &PromptTemplate) -> Result<TextCue>;
}

// ---- direction classes ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizontal {
    Left,
    Center,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vertical {
    Up,
    Center,
    Down,
}

/// Coarse 3×3 gaze description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectionClass {
    pub horizontal: Horizontal,
    pub vertical: Vertical,
}

impl DirectionClass {
    pub const COUNT: usize = 9;

    pub fn of(g: SphericalGaze, threshold: f32) -> Self {
        let horizontal = if g.yaw > threshold {
            Horizontal::Right
        } else if g.yaw < -threshold {
            Horizontal::Left
        } else {
            Horizontal::Center
        };
        let vertical = if g.pitch > threshold {
            Vertical::Up
        } else if g.pitch < -threshold {
            Vertical::Down
        } else {
            Vertical::Center
        };
        Self { horizontal, vertical }
    }

    pub fn index(self) -> usize {
        self.horizontal as usize * 3 + self.vertical as usize
    }

    pub fn from_index(i: usize) -> Self {
        const H: [Horizontal; 3] = [Horizontal::Left, Horizontal::Center, Horizontal::Right];
        const V: [Vertical; 3] = [Vertical::Up, Vertical::Center, Vertical::Down];
        Self {
            horizontal: H[(i / 3) % 3],
            vertical: V[i % 3],
        }
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 9] = [
            "left-up",
            "left-center",
            "left-down",
            "center-up",
            "center-center",
            "center-down",
            "right-up",
            "right-center",
            "right-down",
        ];
        NAMES[self.index()]
    }
}

// ---- synthetic provider -----------------------------------------------------

/// Deterministic cue source for synthetic data.
#[derive(Debug, Clone)]
pub struct SyntheticCueProvider {
    config: CueProviderConfig,
    seed: u64,
    feature_width: usize,
    /// `[(M+1) × d_x × d_v]`: one projection per visual token.
    projections: Vec<f32>,
    /// `[(M+1) × d_v]`
    offsets: Vec<f32>,
    /// `[9 × d_t]`
    class_table: Vec<f32>,
    /// `[n_t × d_t]`
    jitter: Vec<f32>,
    gaze_view: BTreeMap<String, SphericalGaze>,
}

impl SyntheticCueProvider {
    pub fn new(config: CueProviderConfig, feature_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feature_width == 0 {
            return Err(Error::invalid("feature_width must be positive"));
        }
        let dims = config.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6375_6573_5f74_6162);
        let mut normal = |n: usize, scale: f32| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let proj_scale = 1.0 / libm::sqrtf(feature_width as f32);
        let projections = normal(dims.visual_tokens() * feature_width * dims.visual_width, proj_scale);
        let offsets = normal(dims.visual_len(), config.visual_offset_scale);
        let class_table = normal(DirectionClass::COUNT * dims.text_width, 1.0);
        let jitter = normal(dims.text_len(), config.text_jitter);
        Ok(Self {
            config,
            seed,
            feature_width,
            projections,
            offsets,
            class_table,
            jitter,
            gaze_view: BTreeMap::new(),
        })
    }

    /// Registers the gaze the describer "sees" for each id.
    pub fn with_gaze_view<'a>(mut self, view: impl IntoIterator<Item = (&'a str, SphericalGaze)>) -> Self {
        self.add_gaze_view(view);
        self
    }

    pub fn add_gaze_view<'a>(&mut self, view: impl IntoIterator<Item = (&'a str, SphericalGaze)>) {
        self.gaze_view
            .extend(view.into_iter().map(|(id, g)| (id.to_string(), g)));
    }

    /// Adds every labeled sample of `ds` to the gaze view.
    pub fn add_dataset_view(&mut self, ds: &Dataset) {
        self.add_gaze_view(ds.samples().iter().filter_map(|s| s.label.map(|g| (s.id.as_str(), g))));
    }

    pub fn config(&self) -> &CueProviderConfig {
        &self.config
    }

    fn sample_rng(&self, id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(id.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    /// The (possibly corrupted) description class emitted for `id`.
    pub fn described_class(&self, id: &str) -> Result<DirectionClass> {
        let g = self
            .gaze_view
            .get(id)
            .ok_or_else(|| Error::invalid(alloc::format!("no gaze view for sample {id}")))?;
        let true_class = DirectionClass::of(*g, self.config.class_threshold);
        let mut rng = self.sample_rng(id);
        let flip: f32 = rng.random();
        if flip < self.config.p_desc {
            Ok(DirectionClass::from_index(rng.random_range(0..DirectionClass::COUNT)))
        } else {
            Ok(true_class)
        }
    }

    /// Text tokens for a given class.
    pub fn class_tokens(&self, class: DirectionClass) -> Tensor {
        let d = self.config.text_width;
        let base = &self.class_table[class.index() * d..(class.index() + 1) * d];
        let data = (0..self.config.text_tokens)
            .flat_map(|t| (0..d).map(move |j| base[j] + self.jitter[t * d + j]))
            .collect();
        Tensor::new(&[self.config.text_tokens, d], data).expect("dims validated")
    }
}

impl CueProvider for SyntheticCueProvider {
    fn dims(&self) -> CueDims {
        self.config.dims()
    }

    fn visual_cue(&self, sample: &Sample) -> Result<VisualCue> {
        if sample.features.len() != self.feature_width {
            return Err(Error::shape(
                "visual_cue",
                &[sample.features.len()],
                &[self.feature_width],
            ));
        }
        let dims = self.config.dims();
        let (dx, dv) = (self.feature_width, dims.visual_width);
        let mut data = self.offsets.clone();
        for t in 0..dims.visual_tokens() {
            let proj = &self.projections[t * dx * dv..(t + 1) * dx * dv];
            let out = &mut data[t * dv..(t + 1) * dv];
            for (i, &x) in sample.features.iter().enumerate() {
                let row = &proj[i * dv..(i + 1) * dv];
                out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
            }
        }
        Ok(VisualCue {
            tokens: Tensor::new(&[dims.visual_tokens(), dv], data)?,
        })
    }

    fn text_cue(&self, sample: &Sample, _prompt: &PromptTemplate) -> Result<TextCue> {
        let class = self.described_class(&sample.id)?;
        Ok(TextCue {
            tokens: self.class_tokens(class),
        })
    }
}

/// Cue tokens of a whole dataset in contiguous row-major banks.
#[derive(Debug, Clone, PartialEq)]
pub struct CueBank {
    dims: CueDims,
    visual: Vec<f32>,
    text: Vec<f32>,
}

impl CueBank {
    pub fn build<P: CueProvider + ?Sized>(provider: &P, ds: &Dataset, prompt: &PromptTemplate) -> Result<Self> {
        let dims = provider.dims();
        let mut visual = Vec::with_capacity(ds.len() * dims.visual_len());
        let mut text = Vec::with_capacity(ds.len() * dims.text_len());
        for s in ds.samples() {
            let v = provider.visual_cue(s)?;
            let t = provider.text_cue(s, prompt)?;
            if v.tokens.numel() != dims.visual_len() {
                return Err(Error::shape(
                    "visual_cue",
                    v.tokens.shape(),
                    &[dims.visual_tokens(), dims.visual_width],
                ));
            }
            if t.tokens.numel() != dims.text_len() {
                return Err(Error::shape(
                    "text_cue",
                    t.tokens.shape(),
                    &[dims.text_tokens, dims.text_width],
                ));
            }
            visual.extend_from_slice(v.tokens.data());
            text.extend_from_slice(t.tokens.data());
        }
        Ok(Self { dims, visual, text })
    }

    pub fn dims(&self) -> CueDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.visual.len() / self.dims.visual_len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    /// Visual and text tokens of the given rows, `[B·(M+1)·d_v]` and `[B·n_t·d_t]`.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let (vl, tl) = (self.dims.visual_len(), self.dims.text_len());
        let mut v = Vec::with_capacity(idx.len() * vl);
        let mut t = Vec::with_capacity(idx.len() * tl);
        for &i in idx {
            v.extend_from_slice(&self.visual[i * vl..(i + 1) * vl]);
            t.extend_from_slice(&self.text[i * tl..(i + 1) * tl]);
        }
        (v, t)
    }
}
