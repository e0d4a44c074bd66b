//! Pose representation, the procedural toy corpus, keyframe masks and
//! feature normalization.
//!
//! Frame layout for a `J`-joint skeleton with `F` foot joints:
//!
//! | channels            | content                                   |
//! |---------------------|-------------------------------------------|
//! | `0 .. 3J`           | joint positions `(x, y, z)`, joint-major   |
//! | `3J .. 3J + F`      | foot contact indicators in `[0, 1]`        |
//! | `3J + F .. 3J+F+2`  | root planar velocity `(x, z)` per frame    |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::Scalar;

/// Lower clamp applied to per-channel standard deviations.
pub const STD_EPS: f64 = 1e-6;
/// Shortest sequence the generator emits.
pub const MIN_FRAMES: usize = 16;
pub const DEFAULT_FPS: u32 = 20;

/// Which channels of a frame hold positions, contacts and root velocity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub joints: usize,
    /// Joint indices that carry a contact indicator, in channel order.
    pub foot_joints: Vec<usize>,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            joints: 5,
            foot_joints: vec![joint::LEFT_FOOT, joint::RIGHT_FOOT],
        }
    }
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        3 * self.joints + self.foot_joints.len() + 2
    }

    pub fn position_channels(&self) -> std::ops::Range<usize> {
        0..3 * self.joints
    }

    pub fn contact_channels(&self) -> std::ops::Range<usize> {
        let s = 3 * self.joints;
        s..s + self.foot_joints.len()
    }

    pub fn root_velocity_channels(&self) -> std::ops::Range<usize> {
        let s = 3 * self.joints + self.foot_joints.len();
        s..s + 2
    }

    /// Position channels `(x, y, z)` of joint `j`.
    pub fn joint_channels(&self, j: usize) -> std::ops::Range<usize> {
        3 * j..3 * j + 3
    }
}

/// Joint indices of the default five-joint skeleton.
pub mod joint {
    pub const PELVIS: usize = 0;
    pub const HEAD: usize = 1;
    pub const RIGHT_HAND: usize = 2;
    pub const LEFT_FOOT: usize = 3;
    pub const RIGHT_FOOT: usize = 4;
}

/// One pose, `D` features.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame<T> {
    pub features: Vec<T>,
}

impl<T: Scalar> PoseFrame<T> {
    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        if self.features.len() != layout.dim() {
            return Err(Error::Shape(format!(
                "pose has {} features, layout declares {}",
                self.features.len(),
                layout.dim()
            )));
        }
        for c in layout.contact_channels() {
            let v = self.features[c];
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Input(format!("contact channel {c} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `N × D` motion with metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    pub frames: Matrix<T>,
    pub fps: u32,
    pub prompt_id: usize,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Matrix<T>, fps: u32, prompt_id: usize) -> Self {
        Self {
            frames,
            fps,
            prompt_id,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, i: usize) -> PoseFrame<T> {
        PoseFrame {
            features: self.frames.row(i).to_vec(),
        }
    }

    /// Checks length bounds and finiteness.
    pub fn validate(&self, max_frames: usize) -> Result<()> {
        let n = self.len();
        if !(MIN_FRAMES..=max_frames).contains(&n) {
            return Err(Error::Input(format!(
                "sequence has {n} frames, expected {MIN_FRAMES}..={max_frames}"
            )));
        }
        if !self.frames.is_finite() {
            return Err(Error::NonFinite("motion contains non-finite features".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MotionSequence<U> {
        MotionSequence {
            frames: self.frames.cast(),
            fps: self.fps,
            prompt_id: self.prompt_id,
        }
    }
}

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Input(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

label_enum!(Action { Walk => "walk", Wave => "wave", Jump => "jump", Bend => "bend", Stand => "stand" });
label_enum!(Modifier { Slow => "slow", Fast => "fast" });
label_enum!(Direction { Forward => "forward", Left => "left", Right => "right" });

impl Action {
    fn verb(self) -> &'static str {
        match self {
            Action::Walk => "walks",
            Action::Wave => "waves",
            Action::Jump => "jumps",
            Action::Bend => "bends",
            Action::Stand => "stands",
        }
    }
}

impl Modifier {
    fn adverb(self) -> &'static str {
        match self {
            Modifier::Slow => "slowly",
            Modifier::Fast => "quickly",
        }
    }

    fn frequency_scale(self) -> f64 {
        match self {
            Modifier::Slow => 0.6,
            Modifier::Fast => 1.6,
        }
    }
}

impl Direction {
    fn phrase(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Left => "to the left",
            Direction::Right => "to the right",
        }
    }

    /// Unit facing vector in the ground plane `(x, z)`.
    fn facing(self) -> (f64, f64) {
        match self {
            Direction::Forward => (0.0, 1.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
        }
    }
}

/// Fixed word list shared by prompts and the prompt encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const PAD_TOKEN: usize = 0;

impl Default for Vocabulary {
    fn default() -> Self {
        let words = [
            "<pad>", "<unk>", "a", "person", "walks", "waves", "jumps", "bends", "stands",
            "slowly", "quickly", "forward", "to", "the", "left", "right",
        ];
        Self {
            words: words.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.is_empty() || words.len() > 64 {
            return Err(Error::Config(format!(
                "vocabulary must hold 1..=64 words, got {}",
                words.len()
            )));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.words
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| Error::Input(format!("word '{w}' is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|&t| {
                self.words
                    .get(t)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Input(format!("token id {t} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// A templated text prompt and the labels it was generated from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<usize>,
    pub action: Action,
    pub modifier: Modifier,
    pub direction: Direction,
}

impl Prompt {
    pub fn new(
        action: Action,
        modifier: Modifier,
        direction: Direction,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let text = format!(
            "a person {} {} {}",
            action.verb(),
            modifier.adverb(),
            direction.phrase()
        );
        let tokens = vocab.encode(&text)?;
        Ok(Self {
            text,
            tokens,
            action,
            modifier,
            direction,
        })
    }
}

/// Row-constant keyframe mask over an `N`-frame sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeMask {
    frames: usize,
    keyframes: Vec<usize>,
}

impl KeyframeMask {
    /// Mask with the given keyframe indices (sorted and deduplicated).
    pub fn new(frames: usize, mut keyframes: Vec<usize>) -> Result<Self> {
        keyframes.sort_unstable();
        keyframes.dedup();
        if keyframes.is_empty() {
            return Err(Error::Precondition("a keyframe mask needs at least one keyframe".into()));
        }
        if let Some(&last) = keyframes.last() {
            if last >= frames {
                return Err(Error::Range(format!(
                    "keyframe index {last} outside a {frames}-frame sequence"
                )));
            }
        }
        Ok(Self { frames, keyframes })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn keyframe_indices(&self) -> &[usize] {
        &self.keyframes
    }

    pub fn count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_keyframe(&self, i: usize) -> bool {
        self.keyframes.binary_search(&i).is_ok()
    }

    /// Per-frame flags, `true` on keyframes.
    pub fn row_flags(&self) -> Vec<bool> {
        let mut v = vec![false; self.frames];
        for &k in &self.keyframes {
            v[k] = true;
        }
        v
    }

    /// Binary `N × D` matrix `M`.
    pub fn matrix<T: Scalar>(&self, dim: usize) -> Matrix<T> {
        let flags = self.row_flags();
        Matrix::from_fn(self.frames, dim, |i, _| if flags[i] { T::one() } else { T::zero() })
    }

    /// `X ⊙ M`
    pub fn keyframe_part<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<T> {
        x.hadamard(&self.matrix(x.cols()))
    }

    /// `X ⊙ (1 − M)`
    pub fn target_part<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<T> {
        let m = self.matrix::<T>(x.cols());
        x.zip_map(&m, |a, b| a * (T::one() - b))
    }
}

/// Number of keyframes for `n` frames at `rate`: `max(1, round(rate·n))`,
/// rounding halves up, capped at `n`.
pub fn keyframe_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Draws keyframe rows uniformly without replacement.
///
/// The indices are a prefix of one seeded permutation, so for a fixed seed
/// the keyframe set at a higher rate contains the set at a lower rate.
pub fn sample_keyframe_mask(n: usize, rate: f64, seed: u64) -> Result<KeyframeMask> {
    if n == 0 {
        return Err(Error::Precondition("cannot place keyframes in an empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("keyframe rate {rate} outside [0, 1]")));
    }
    let k = keyframe_count(n, rate);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0x6b66));
    order.truncate(k);
    KeyframeMask::new(n, order)
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CorpusStats {
    /// Mean and (population) standard deviation over every frame, with the
    /// std clamped at [`STD_EPS`]. Contact channels keep the identity
    /// transform so normalized contacts remain indicators in `[0, 1]`.
    pub fn compute<'a>(
        motions: impl IntoIterator<Item = &'a MotionSequence<f64>>,
        layout: &FeatureLayout,
    ) -> Result<Self> {
        let d = layout.dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for m in motions {
            if m.dim() != d {
                return Err(Error::Shape(format!("motion has {} channels, expected {d}", m.dim())));
            }
            for i in 0..m.len() {
                for (c, &v) in m.frames.row(i).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += m.len();
        }
        if count == 0 {
            return Err(Error::Input("statistics need at least one frame".into()));
        }
        let n = count as f64;
        let mut mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(STD_EPS))
            .collect();
        for c in layout.contact_channels() {
            mean[c] = 0.0;
            std[c] = 1.0;
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.mean.len() || d != self.std.len() {
            return Err(Error::Shape(format!(
                "motion has {d} channels, statistics cover {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_frames<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(x.cols())?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, c| {
            (x[(i, c)] - T::lit(self.mean[c])) / T::lit(self.std[c].max(STD_EPS))
        }))
    }

    pub fn denormalize_frames<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(x.cols())?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, c| {
            x[(i, c)] * T::lit(self.std[c].max(STD_EPS)) + T::lit(self.mean[c])
        }))
    }
}

pub fn normalize<T: Scalar>(x: &MotionSequence<T>, stats: &CorpusStats) -> Result<MotionSequence<T>> {
    Ok(MotionSequence {
        frames: stats.normalize_frames(&x.frames)?,
        ..x.clone()
    })
}

pub fn denormalize<T: Scalar>(
    x: &MotionSequence<T>,
    stats: &CorpusStats,
) -> Result<MotionSequence<T>> {
    Ok(MotionSequence {
        frames: stats.denormalize_frames(&x.frames)?,
        ..x.clone()
    })
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub size: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub noise_scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 500,
            max_frames: 64,
            seed: 0,
            noise_scale: 0.01,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        if self.max_frames < MIN_FRAMES {
            return Err(Error::Config(format!(
                "max_frames {} below the minimum length {MIN_FRAMES}",
                self.max_frames
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::Config(format!("noise_scale {} must be finite and >= 0", self.noise_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: usize,
    pub prompt: Prompt,
    pub motion: MotionSequence<f64>,
}

/// Records plus the shared vocabulary, layout and training-split statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub layout: FeatureLayout,
    pub vocab: Vocabulary,
    pub stats: CorpusStats,
    pub records: Vec<CorpusRecord>,
}

/// Every `HOLDOUT_EVERY`-th record (ids `9, 19, ...`) is held out.
pub const HOLDOUT_EVERY: usize = 10;

pub fn is_holdout(id: usize) -> bool {
    id % HOLDOUT_EVERY == HOLDOUT_EVERY - 1
}

impl Corpus {
    pub fn max_frames(&self) -> usize {
        self.spec.max_frames
    }

    pub fn train_records(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(|r| !is_holdout(r.id))
    }

    pub fn holdout_records(&self) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(|r| is_holdout(r.id))
    }
}

/// Builds the procedural corpus. Record `i` draws from its own random stream
/// derived from `(seed, i)`, so generation order does not matter.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let layout = FeatureLayout::default();
    let vocab = Vocabulary::default();
    let records = (0..spec.size)
        .map(|id| generate_record(spec, &layout, &vocab, id))
        .collect::<Result<Vec<_>>>()?;
    let train = records.iter().filter(|r| !is_holdout(r.id)).map(|r| &r.motion);
    let stats = if records.iter().any(|r| !is_holdout(r.id)) {
        CorpusStats::compute(train, &layout)?
    } else {
        CorpusStats::compute(records.iter().map(|r| &r.motion), &layout)?
    };
    Ok(Corpus {
        spec: spec.clone(),
        layout,
        vocab,
        stats,
        records,
    })
}

fn generate_record(
    spec: &CorpusSpec,
    layout: &FeatureLayout,
    vocab: &Vocabulary,
    id: usize,
) -> Result<CorpusRecord> {
    let mut r = rng::stream(spec.seed, id as u64);
    let action = Action::ALL[r.random_range(0..Action::ALL.len())];
    let modifier = Modifier::ALL[r.random_range(0..Modifier::ALL.len())];
    let direction = Direction::ALL[r.random_range(0..Direction::ALL.len())];
    let n = r.random_range(MIN_FRAMES..=spec.max_frames);
    let style = MotionStyle {
        phase: r.random_range(0.0..1.0),
        amplitude: r.random_range(0.8..1.2),
        frequency: BASE_FREQUENCY * modifier.frequency_scale() * r.random_range(0.9..1.1),
    };
    let prompt = Prompt::new(action, modifier, direction, vocab)?;
    let mut frames = synthesize(action, direction, &style, n, layout);
    if spec.noise_scale > 0.0 {
        let contacts = layout.contact_channels();
        for i in 0..n {
            for c in 0..layout.dim() {
                if !contacts.contains(&c) {
                    let z: f64 = r.sample(StandardNormal);
                    frames[(i, c)] += spec.noise_scale * z;
                }
            }
        }
    }
    Ok(CorpusRecord {
        id,
        prompt,
        motion: MotionSequence::new(frames, DEFAULT_FPS, id),
    })
}

/// Cycles per frame at unit modifier (one cycle per second at 20 fps).
const BASE_FREQUENCY: f64 = 1.0 / 20.0;

/// Per-sequence latent style that the text does not determine.
#[derive(Clone, Copy, Debug)]
struct MotionStyle {
    /// Cycle offset in `[0, 1)`.
    phase: f64,
    amplitude: f64,
    /// Cycles per frame.
    frequency: f64,
}

/// Swing profile: 0 during stance (first half-cycle), eased 0→1 during swing.
fn swing_progress(x: f64) -> f64 {
    if x < 0.5 {
        0.0
    } else {
        (1.0 - (2.0 * PI * (x - 0.5)).cos()) / 2.0
    }
}

fn synthesize(
    action: Action,
    direction: Direction,
    style: &MotionStyle,
    n: usize,
    layout: &FeatureLayout,
) -> Matrix<f64> {
    use joint::*;
    let (fx, fz) = direction.facing();
    // Lateral axis, to the body's right.
    let (lx, lz) = (fz, -fx);
    let a = style.amplitude;
    let f = style.frequency;
    let stride = 0.5 * a;
    let speed = if action == Action::Walk { stride * f } else { 0.0 };
    let d = layout.dim();
    let mut out = Matrix::zeros(n, d);

    for t in 0..n {
        let c = f * t as f64 + style.phase;
        let w = 2.0 * PI * c;
        let root_fwd = speed * t as f64;
        // Body-local (lateral, height, forward) coordinates, forward measured
        // from the world origin along the facing direction.
        let mut local = [
            [0.0, 1.0, root_fwd],
            [0.0, 1.7, root_fwd],
            [0.25, 1.0, root_fwd],
            [-0.1, 0.0, root_fwd],
            [0.1, 0.0, root_fwd],
        ];
        let mut contact = [1.0, 1.0];
        match action {
            Action::Walk => {
                for (side, foot) in [(0usize, LEFT_FOOT), (1, RIGHT_FOOT)] {
                    let cf = c + 0.5 * side as f64;
                    let cycle = cf.floor();
                    let x = cf - cycle;
                    let start = style.phase + 0.5 * side as f64;
                    local[foot][2] = stride * (cycle + swing_progress(x) - start + 0.5);
                    if x >= 0.5 {
                        local[foot][1] = 0.12 * a * (2.0 * PI * (x - 0.5)).sin();
                        contact[side] = 0.0;
                    }
                }
                local[RIGHT_HAND][2] += 0.2 * a * w.sin();
                local[PELVIS][1] += 0.03 * a * (2.0 * w).cos();
                local[HEAD][1] += 0.03 * a * (2.0 * w).cos();
            }
            Action::Wave => {
                local[RIGHT_HAND][0] += 0.05 + 0.2 * a * w.sin();
                local[RIGHT_HAND][1] += 0.55 + 0.1 * a * w.cos();
            }
            Action::Jump => {
                let s = w.sin();
                let lift = 0.35 * a * s.max(0.0);
                let crouch = 0.1 * a * (-s).max(0.0);
                for j in local.iter_mut() {
                    j[1] += lift;
                }
                local[PELVIS][1] -= crouch;
                local[HEAD][1] -= crouch;
                local[RIGHT_HAND][1] += 0.5 * lift - crouch;
                if lift > 0.02 {
                    contact = [0.0, 0.0];
                }
            }
            Action::Bend => {
                let b = a * (1.0 - w.cos()) / 2.0;
                local[HEAD][1] -= 0.5 * b;
                local[HEAD][2] += 0.4 * b;
                local[PELVIS][2] -= 0.1 * b;
                local[RIGHT_HAND][1] -= 0.5 * b;
                local[RIGHT_HAND][2] += 0.3 * b;
                local[RIGHT_HAND][0] += 0.1 * a * w.sin();
            }
            Action::Stand => {
                local[HEAD][0] += 0.02 * a * w.sin();
                local[RIGHT_HAND][0] += 0.01 * a * w.cos();
            }
        }
        let row = out.row_mut(t);
        for (j, p) in local.iter().enumerate().take(layout.joints) {
            row[3 * j] = p[0] * lx + p[2] * fx;
            row[3 * j + 1] = p[1];
            row[3 * j + 2] = p[0] * lz + p[2] * fz;
        }
        for (k, ch) in layout.contact_channels().enumerate() {
            row[ch] = contact[k];
        }
        let rv = layout.root_velocity_channels();
        row[rv.start] = speed * fx;
        row[rv.start + 1] = speed * fz;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(size: usize) -> CorpusSpec {
        CorpusSpec {
            size,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec(20)).unwrap();
        let b = generate_corpus(&small_spec(20)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec {
            seed: 1,
            ..small_spec(20)
        })
        .unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn lengths_respect_bounds() {
        let corpus = generate_corpus(&small_spec(500)).unwrap();
        assert_eq!(corpus.records.len(), 500);
        for r in &corpus.records {
            r.motion.validate(64).unwrap();
            for i in 0..r.motion.len() {
                r.motion.frame(i).validate(&corpus.layout).unwrap();
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        assert!(matches!(generate_corpus(&small_spec(0)), Err(Error::Config(_))));
        let bad = CorpusSpec {
            max_frames: 8,
            ..small_spec(3)
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn prompts_round_trip_through_vocabulary() {
        let corpus = generate_corpus(&small_spec(50)).unwrap();
        for r in &corpus.records {
            assert_eq!(corpus.vocab.decode(&r.prompt.tokens).unwrap(), r.prompt.text);
            assert!(r.prompt.tokens.iter().all(|&t| t < 64));
        }
        assert!(corpus.vocab.encode("a person flies").is_err());
    }

    #[test]
    fn keyframe_counts() {
        assert_eq!(sample_keyframe_mask(60, 0.05, 1).unwrap().count(), 3);
        assert_eq!(sample_keyframe_mask(40, 0.0, 1).unwrap().count(), 1);
        let full = sample_keyframe_mask(10, 1.0, 1).unwrap();
        assert_eq!(full.keyframe_indices(), &(0..10).collect::<Vec<_>>()[..]);
        assert!(matches!(sample_keyframe_mask(10, 1.5, 1), Err(Error::Config(_))));
        assert!(matches!(sample_keyframe_mask(10, -0.1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn keyframe_sets_are_nested_across_rates() {
        for seed in 0..20 {
            let lo = sample_keyframe_mask(64, 0.02, seed).unwrap();
            let hi = sample_keyframe_mask(64, 0.10, seed).unwrap();
            assert!(lo.keyframe_indices().iter().all(|&k| hi.is_keyframe(k)));
        }
    }

    #[test]
    fn mask_parts_recombine_exactly() {
        let corpus = generate_corpus(&small_spec(3)).unwrap();
        let x = &corpus.records[0].motion.frames;
        let m = sample_keyframe_mask(x.rows(), 0.1, 7).unwrap();
        let mm = m.matrix::<f64>(x.cols());
        for i in 0..x.rows() {
            let v = mm.row(i);
            assert!(v.iter().all(|&e| e == v[0]));
        }
        assert_eq!(m.keyframe_part(x).add(&m.target_part(x)), *x);
    }

    #[test]
    fn normalization_round_trip() {
        let corpus = generate_corpus(&small_spec(30)).unwrap();
        let x = &corpus.records[4].motion;
        let back = denormalize(&normalize(x, &corpus.stats).unwrap(), &corpus.stats).unwrap();
        assert!(back.frames.sub(&x.frames).max_abs() < 1e-6);

        let mean_motion = MotionSequence::new(
            Matrix::from_fn(3, corpus.layout.dim(), |_, c| corpus.stats.mean[c]),
            20,
            0,
        );
        assert_eq!(normalize(&mean_motion, &corpus.stats).unwrap().frames.max_abs(), 0.0);

        let wrong = MotionSequence::new(Matrix::<f64>::zeros(3, 4), 20, 0);
        assert!(matches!(normalize(&wrong, &corpus.stats), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_channel_uses_clamped_std() {
        let layout = FeatureLayout::default();
        let d = layout.dim();
        let motions: Vec<_> = (0..4)
            .map(|k| {
                MotionSequence::new(
                    Matrix::from_fn(20, d, |i, c| if c == 1 { 0.7 } else { (i * k + c) as f64 }),
                    20,
                    k,
                )
            })
            .collect();
        let stats = CorpusStats::compute(&motions, &layout).unwrap();
        assert_eq!(stats.std[1], STD_EPS);
        let z = normalize(&motions[2], &stats).unwrap();
        assert!(z.frames.is_finite());
        assert!(z.frames[(3, 1)].abs() < 1e-6);
    }
}
