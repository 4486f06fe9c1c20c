//! Samples and datasets, the synthetic gaze generator with a controllable
//! domain shift, pseudo-label corruption, and balanced minibatching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{direction_unchecked, to_spherical, DirectionVector, SphericalGaze};

pub const SOURCE_LABELED: &str = "synthetic-source";
pub const SOURCE_UNLABELED: &str = "synthetic-shifted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f32>,
    pub label: Option<SphericalGaze>,
    pub source: String,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Ordered samples with unique ids and a uniform feature width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub name: String,
    pub feature_width: usize,
    pub spec_hash: Option<String>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let feature_width = samples.first().map_or(0, |s| s.features.len());
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.features.len() != feature_width {
                return Err(Error::Validation(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    feature_width
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            feature_width,
            spec_hash: None,
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Row-major `[len × feature_width]` copy of all features.
    pub fn feature_matrix(&self) -> Vec<f32> {
        self.samples.iter().flat_map(|s| s.features.iter().copied()).collect()
    }

    /// Row-major features of the given sample indices.
    pub fn gather_features(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.feature_width);
        for &i in idx {
            out.extend_from_slice(&self.samples[i].features);
        }
        out
    }

    pub fn all_labeled(&self) -> bool {
        self.samples.iter().all(Sample::is_labeled)
    }

    /// Splits off samples `[at..]` into a new dataset.
    pub fn split_off(&mut self, at: usize, name: impl Into<String>) -> Dataset {
        let rest = self.samples.split_off(at.min(self.samples.len()));
        Dataset {
            name: name.into(),
            feature_width: self.feature_width,
            spec_hash: self.spec_hash.clone(),
            samples: rest,
        }
    }

    /// Copy with every label removed.
    pub fn without_labels(&self, name: impl Into<String>) -> Dataset {
        let mut d = self.clone();
        d.name = name.into();
        d.samples.iter_mut().for_each(|s| s.label = None);
        d
    }
}

// ---- synthetic generation ---------------------------------------------------

/// Parameters of the synthetic gaze task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub feature_width: usize,
    pub latent_width: usize,
    pub yaw_range: (f32, f32),
    pub pitch_range: (f32, f32),
    pub feature_noise: f32,
    /// Norm of the appearance-latent mean offset of the unlabeled domain.
    pub shift_norm: f32,
    /// Strength of an optional `tanh` distortion layered on the linear map.
    pub nonlinearity: f32,
    pub corruption_fraction: f32,
    pub corruption_deg: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            feature_width: 24,
            latent_width: 8,
            yaw_range: (-core::f32::consts::FRAC_PI_2, core::f32::consts::FRAC_PI_2),
            pitch_range: (-core::f32::consts::FRAC_PI_3, core::f32::consts::FRAC_PI_3),
            feature_noise: 0.05,
            shift_norm: 1.0,
            nonlinearity: 0.0,
            corruption_fraction: 0.3,
            corruption_deg: 30.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f32, f32)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if self.feature_width == 0 || self.latent_width == 0 {
            return Err(Error::invalid("feature_width and latent_width must be positive"));
        }
        if !ordered(self.yaw_range) || !ordered(self.pitch_range) {
            return Err(Error::invalid("yaw_range/pitch_range must be non-degenerate"));
        }
        if self.pitch_range.0 < -core::f32::consts::FRAC_PI_2 || self.pitch_range.1 > core::f32::consts::FRAC_PI_2 {
            return Err(Error::invalid("pitch_range must lie within [-pi/2, pi/2]"));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::invalid("corruption_fraction must lie in [0, 1]"));
        }
        if !(self.feature_noise >= 0.0 && self.shift_norm >= 0.0 && self.nonlinearity >= 0.0) {
            return Err(Error::invalid(
                "feature_noise, shift_norm and nonlinearity must be non-negative",
            ));
        }
        if !(0.0..=180.0).contains(&self.corruption_deg) {
            return Err(Error::invalid("corruption_deg must lie in [0, 180]"));
        }
        Ok(())
    }

    /// Hex digest identifying `(spec, seed)`.
    pub fn hash_hex(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update((self.feature_width as u64).to_le_bytes());
        h.update((self.latent_width as u64).to_le_bytes());
        for v in [
            self.yaw_range.0,
            self.yaw_range.1,
            self.pitch_range.0,
            self.pitch_range.1,
            self.feature_noise,
            self.shift_norm,
            self.nonlinearity,
            self.corruption_fraction,
            self.corruption_deg,
        ] {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize()[..8])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Output of [`generate_synthetic`]. `oracle` carries the true gaze of every
/// unlabeled sample and is meant for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub oracle: Dataset,
}

/// The fixed per-seed generative map shared by both domains.
#[derive(Debug, Clone)]
pub struct GenerativeMap {
    /// `[feature_width × (3 + latent_width)]`, row-major.
    mixing: Vec<f32>,
    /// `[feature_width × (3 + latent_width)]` used by the optional distortion.
    distortion: Vec<f32>,
    /// Latent mean of the unlabeled domain.
    shift: Vec<f32>,
}

impl GenerativeMap {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_705f_7365_6564);
        let cols = 3 + spec.latent_width;
        let scale = 1.0 / libm::sqrtf(cols as f32);
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        };
        let mixing = draw(spec.feature_width * cols, &mut rng);
        let distortion = draw(spec.feature_width * cols, &mut rng);
        let mut shift: Vec<f32> = (0..spec.latent_width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = libm::sqrtf(shift.iter().map(|v| v * v).sum());
        shift.iter_mut().for_each(|v| *v *= spec.shift_norm / norm.max(1e-12));
        Self {
            mixing,
            distortion,
            shift,
        }
    }

    pub fn shift(&self) -> &[f32] {
        &self.shift
    }

    /// Noise-free features for a latent `(direction, appearance)`.
    pub fn render(&self, spec: &SyntheticSpec, gaze: SphericalGaze, appearance: &[f32]) -> Vec<f32> {
        let d = direction_unchecked(gaze);
        let mut latent = Vec::with_capacity(3 + appearance.len());
        latent.extend_from_slice(&[d.x as f32, d.y as f32, d.z as f32]);
        latent.extend_from_slice(appearance);
        let cols = latent.len();
        (0..spec.feature_width)
            .map(|r| {
                let row = &self.mixing[r * cols..(r + 1) * cols];
                let mut f: f32 = row.iter().zip(&latent).map(|(a, b)| a * b).sum();
                if spec.nonlinearity > 0.0 {
                    let drow = &self.distortion[r * cols..(r + 1) * cols];
                    let pre: f32 = drow.iter().zip(&latent).map(|(a, b)| a * b).sum();
                    f += spec.nonlinearity * libm::tanhf(2.0 * pre);
                }
                f
            })
            .collect()
    }
}

fn sample_rng(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) | index as u64);
    rng
}

/// Draws `n_labeled` source-domain samples (with labels) and `n_unlabeled`
/// shifted-domain samples (labels withheld, kept in `oracle`). Each sample
/// uses its own RNG stream, so sample `i` does not depend on the counts.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    seed: u64,
) -> Result<SyntheticData> {
    spec.validate()?;
    let map = GenerativeMap::new(spec, seed);
    let noise = Normal::new(0.0f32, spec.feature_noise).map_err(|_| Error::invalid("bad feature_noise"))?;
    let zero = alloc::vec![0.0f32; spec.latent_width];
    let draw = |domain: u64, i: usize, mean: &[f32]| -> (SphericalGaze, Vec<f32>) {
        let mut rng = sample_rng(seed, domain, i);
        let yaw = rng.random_range(spec.yaw_range.0..=spec.yaw_range.1);
        let pitch = rng.random_range(spec.pitch_range.0..=spec.pitch_range.1);
        let g = SphericalGaze::new(yaw, pitch);
        let z: Vec<f32> = mean
            .iter()
            .map(|m| {
                let e: f32 = StandardNormal.sample(&mut rng);
                m + e
            })
            .collect();
        let mut f = map.render(spec, g, &z);
        if spec.feature_noise > 0.0 {
            f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        (g, f)
    };
    let hash = spec.hash_hex(seed);
    let labeled: Vec<Sample> = (0..n_labeled)
        .map(|i| {
            let (g, features) = draw(1, i, &zero);
            Sample {
                id: format!("lab-{i:06}"),
                features,
                label: Some(g),
                source: SOURCE_LABELED.to_string(),
            }
        })
        .collect();
    let oracle: Vec<Sample> = (0..n_unlabeled)
        .map(|i| {
            let (g, features) = draw(2, i, map.shift());
            Sample {
                id: format!("unl-{i:06}"),
                features,
                label: Some(g),
                source: SOURCE_UNLABELED.to_string(),
            }
        })
        .collect();
    let mut labeled = Dataset::new("labeled", labeled)?;
    let mut oracle = Dataset::new("unlabeled-oracle", oracle)?;
    labeled.feature_width = spec.feature_width;
    oracle.feature_width = spec.feature_width;
    labeled.spec_hash = Some(hash.clone());
    oracle.spec_hash = Some(hash);
    let unlabeled = oracle.without_labels("unlabeled");
    Ok(SyntheticData {
        labeled,
        unlabeled,
        oracle,
    })
}

// ---- pseudo-labels ----------------------------------------------------------

/// Pseudo-labels aligned with the sample order of an unlabeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    ids: Vec<String>,
    labels: Vec<SphericalGaze>,
    /// Epoch at which the labels were generated (0 = after teacher training).
    pub epoch: u32,
}

impl PseudoLabelSet {
    pub fn new(ids: Vec<String>, labels: Vec<SphericalGaze>, epoch: u32) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::shape("PseudoLabelSet", &[ids.len()], &[labels.len()]));
        }
        if labels.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("non-finite pseudo-label"));
        }
        Ok(Self { ids, labels, epoch })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[SphericalGaze] {
        &self.labels
    }

    pub fn label_at(&self, i: usize) -> SphericalGaze {
        self.labels[i]
    }

    pub fn get(&self, id: &str) -> Option<SphericalGaze> {
        self.ids.iter().position(|x| x == id).map(|i| self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SphericalGaze)> {
        self.ids.iter().map(String::as_str).zip(self.labels.iter().copied())
    }

    /// True when the set carries exactly the ids of `ds`, in order.
    pub fn covers(&self, ds: &Dataset) -> bool {
        self.ids.len() == ds.len() && self.ids.iter().map(String::as_str).eq(ds.ids())
    }
}

/// Rotates an exact `⌊ρ·N⌋` subset of labels (chosen without replacement)
/// by an angle in `[magnitude, min(2·magnitude, 180)]` degrees about a random
/// axis orthogonal to each label's direction. Returns the corrupted set and
/// a per-position mask of the corrupted entries.
pub fn corrupt_labels(
    pseudo: &PseudoLabelSet,
    fraction: f32,
    magnitude_deg: f32,
    seed: u64,
) -> Result<(PseudoLabelSet, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("corruption fraction must lie in [0, 1]"));
    }
    if !(0.0..=180.0).contains(&magnitude_deg) {
        return Err(Error::invalid("corruption magnitude must lie in [0, 180] degrees"));
    }
    let n = pseudo.len();
    let count = libm::floor(fraction as f64 * n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_7272_7570_7421);
    let mut chosen: Vec<usize> = (0..n).collect();
    chosen.partial_shuffle(&mut rng, count);
    chosen.truncate(count);
    let mut mask = alloc::vec![false; n];
    let mut labels = pseudo.labels.clone();
    let lo = magnitude_deg as f64;
    let hi = (2.0 * lo).min(180.0);
    let mut picks = chosen;
    picks.sort_unstable();
    for i in picks {
        mask[i] = true;
        let angle = if hi > lo { rng.random_range(lo..=hi) } else { lo }.to_radians();
        let v = direction_unchecked(labels[i]);
        let w = random_orthogonal(&mut rng, v);
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let rotated = DirectionVector::new(v.x * c + w.x * s, v.y * c + w.y * s, v.z * c + w.z * s);
        labels[i] = to_spherical(rotated)?;
    }
    Ok((
        PseudoLabelSet {
            ids: pseudo.ids.clone(),
            labels,
            epoch: pseudo.epoch,
        },
        mask,
    ))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, v: DirectionVector) -> DirectionVector {
    loop {
        let u = DirectionVector::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let d = u.dot(&v);
        let w = DirectionVector::new(u.x - d * v.x, u.y - d * v.y, u.z - d * v.z);
        let n = w.norm();
        if n > 1e-6 {
            return DirectionVector::new(w.x / n, w.y / n, w.z / n);
        }
    }
}

// ---- batching ---------------------------------------------------------------

/// Indices into the labeled and unlabeled pools for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Mixes an epoch number into a base seed.
pub fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// One epoch of minibatches with `⌊b/2⌋` labeled and `⌈b/2⌉` unlabeled
/// samples per step. The pool that needs more steps defines the epoch and
/// contributes each of its samples exactly once (its last batch may be
/// short); the other pool is recycled, reshuffling whenever it runs out.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    rng: ChaCha8Rng,
    labeled: Cycler,
    unlabeled: Cycler,
    per_labeled: usize,
    per_unlabeled: usize,
    labeled_defines_epoch: bool,
    steps: usize,
    step: usize,
}

#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng, recycle: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                if !recycle {
                    break;
                }
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

impl BalancedBatches {
    pub fn new(n_labeled: usize, n_unlabeled: usize, batch_size: usize, seed: u64, epoch: u32) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if n_labeled == 0 || n_unlabeled == 0 {
            return Err(Error::invalid("balanced batching needs two non-empty pools"));
        }
        let per_labeled = batch_size / 2;
        let per_unlabeled = batch_size - per_labeled;
        let steps_l = n_labeled.div_ceil(per_labeled);
        let steps_u = n_unlabeled.div_ceil(per_unlabeled);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        let labeled = Cycler::new(n_labeled, &mut rng);
        let unlabeled = Cycler::new(n_unlabeled, &mut rng);
        Ok(Self {
            rng,
            labeled,
            unlabeled,
            per_labeled,
            per_unlabeled,
            labeled_defines_epoch: steps_l > steps_u,
            steps: steps_l.max(steps_u),
            step: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl Iterator for BalancedBatches {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.step == self.steps {
            return None;
        }
        self.step += 1;
        let labeled = self
            .labeled
            .take(self.per_labeled, &mut self.rng, !self.labeled_defines_epoch);
        let unlabeled = self
            .unlabeled
            .take(self.per_unlabeled, &mut self.rng, self.labeled_defines_epoch);
        Some(PairedBatch { labeled, unlabeled })
    }
}

/// Shuffled minibatches over a single pool for one epoch.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: u32) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
