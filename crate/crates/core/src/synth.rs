//! Synthetic conversational identities with controlled postural and
//! rhythmic structure.
//!
//! Coordinates live in body units: the canonical skeleton spans roughly
//! `[-1, 1]` vertically. Frequencies are in Hz. The mode presets assume the
//! default 60 fps, 60-frame recordings, which the standard preprocessing
//! (every second frame, 30 frames) turns into one second at 30 fps.

use std::f64::consts::TAU;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{Dataset, KeypointSequence, COCO_WHOLEBODY, NUM_JOINTS};
use crate::nn::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// Identities differ only in posture; nothing moves.
    PostureOnly,
    /// Shared posture; identities differ only in gesture frequency.
    RhythmOnly,
    /// Posture and rhythm each carry half of the identity. Postures swap
    /// left and right joints, so the set of joint positions is shared.
    Mixed,
    /// Shared posture; fast gestures whose frequency pairs coincide when
    /// sampled every ninth frame.
    Micro,
    /// Held postures plus pause duty cycles.
    Stillness,
}

impl SynthMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "posture-only" | "posture" => Self::PostureOnly,
            "rhythm-only" | "rhythm" => Self::RhythmOnly,
            "mixed" => Self::Mixed,
            "micro" => Self::Micro,
            "stillness" => Self::Stillness,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PostureOnly => "posture-only",
            Self::RhythmOnly => "rhythm-only",
            Self::Mixed => "mixed",
            Self::Micro => "micro",
            Self::Stillness => "stillness",
        }
    }
}

/// Rhythm-only frequencies. Their aliases at 10 Hz and 6 Hz sampling
/// (strides 3 and 5 at 30 fps) are pairwise distinct.
pub const RHYTHM_FREQUENCIES: [f64; 10] = [1.0, 2.0, 4.0, 6.0, 7.0, 8.0, 10.0, 11.0, 12.0, 13.0];

/// Mixed-mode frequencies, shared by pairs of identities.
pub const MIXED_FREQUENCIES: [f64; 5] = [2.0, 4.0, 7.0, 11.0, 13.0];

/// Micro-gesture pairs are `f` and `f + MICRO_ALIAS_SHIFT`: a 4.8 and a
/// 3.2 frame period at 30 fps, identical when sampled every ninth frame.
pub const MICRO_BASE_FREQUENCY: f64 = 6.2;
pub const MICRO_ALIAS_SHIFT: f64 = 10.0 / 3.0;
pub const MICRO_AMPLITUDES: [f64; 5] = [0.03, 0.06, 0.09, 0.12, 0.15];

pub const STILLNESS_DUTY: [f64; 2] = [0.3, 0.9];
pub const STILLNESS_FREQUENCY: f64 = 2.5;
pub const PAUSE_PERIOD: f64 = 0.5;

/// Sinusoidal joint motion: the joints trace a circle of radius
/// `amplitude`, `x = A cos(2π f t + φ)`, `y = A sin(2π f t + φ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub joints: Vec<usize>,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Motion runs for the first `duty` fraction of every `period` seconds and
/// freezes for the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PausePattern {
    pub period: f64,
    pub duty: f64,
}

impl PausePattern {
    pub const ALWAYS: PausePattern = PausePattern { period: 1.0, duty: 1.0 };

    /// Seconds spent moving during `[0, t)` when the cycle starts `offset`
    /// seconds in.
    pub fn moving_time(&self, t: f64, offset: f64) -> f64 {
        if self.duty >= 1.0 {
            return t;
        }
        let active = |s: f64| {
            let cycles = (s / self.period).floor();
            let rem = s - cycles * self.period;
            cycles * self.duty * self.period + rem.min(self.duty * self.period)
        };
        active(t + offset) - active(offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityProfile {
    pub name: String,
    /// `NUM_JOINTS × 2` offsets from the canonical skeleton.
    pub base_posture: Vec<f64>,
    pub gestures: Vec<Oscillator>,
    pub pause: PausePattern,
    pub noise_sigma: f64,
    /// Standard deviation of the per-sequence rigid shift of each body part.
    pub posture_jitter: f64,
    /// Width of the uniform per-sequence phase offset added to every
    /// oscillator (0 keeps the profile phases).
    pub phase_jitter: f64,
}

impl IdentityProfile {
    pub fn validate(&self, fps: f64) -> Result<()> {
        if self.base_posture.len() != NUM_JOINTS * 2 {
            return Err(Error::Config("base posture must hold 133 × 2 offsets".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.posture_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be >= 0".into()));
        }
        for g in &self.gestures {
            if !(g.frequency > 0.0 && g.frequency < fps / 2.0) {
                return Err(Error::Config(format!(
                    "frequency {} Hz outside (0, {}) at {fps} fps",
                    g.frequency,
                    fps / 2.0
                )));
            }
            if g.joints.iter().any(|&j| j >= NUM_JOINTS) {
                return Err(Error::Config("oscillator joint out of range".into()));
            }
        }
        if !(self.pause.period > 0.0 && self.pause.duty > 0.0 && self.pause.duty <= 1.0) {
            return Err(Error::Config("pause duty must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub sequences_per_identity: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub mode: SynthMode,
    pub noise_sigma: f64,
    /// Standard deviation of each body part's habitual offset. Used by the
    /// posture-only and stillness modes.
    pub posture_scale: f64,
    /// Minimum RMS distance between two identities' postures, in units of
    /// `noise_sigma`.
    pub separation_ratio: f64,
    pub posture_jitter: f64,
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 10,
            sequences_per_identity: 40,
            frames: 60,
            fps: 60.0,
            seed: 0,
            mode: SynthMode::Mixed,
            noise_sigma: 0.01,
            posture_scale: 0.06,
            separation_ratio: 3.0,
            posture_jitter: 0.005,
            amplitude: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 || self.sequences_per_identity < 2 || self.frames < 1 {
            return Err(Error::Config(
                "need >= 2 identities, >= 2 sequences each and >= 1 frame".into(),
            ));
        }
        let cap = match self.mode {
            SynthMode::RhythmOnly => RHYTHM_FREQUENCIES.len(),
            SynthMode::Mixed => 2 << MIRROR_PAIRS.len(),
            SynthMode::Micro => 2 * MICRO_AMPLITUDES.len(),
            _ => usize::MAX,
        };
        if self.n_identities > cap {
            return Err(Error::Config(format!(
                "{} mode supports at most {cap} identities",
                self.mode.name()
            )));
        }
        if !(self.fps > 0.0) || !(self.noise_sigma >= 0.0) || !(self.posture_scale >= 0.0) {
            return Err(Error::Config("fps must be positive, scales >= 0".into()));
        }
        Ok(())
    }
}

/// Body parts moved rigidly by postures and gestures.
fn part(name: &str) -> Vec<usize> {
    let seg = |s: &str| -> Range<usize> { COCO_WHOLEBODY.range(s).expect("known segment") };
    match name {
        "head" => (0..5).chain(seg("face")).collect(),
        "left_arm" => [7, 9].into_iter().chain(seg("left_hand")).collect(),
        "right_arm" => [8, 10].into_iter().chain(seg("right_hand")).collect(),
        "shoulders" => vec![5, 6],
        "hands" => seg("left_hand").chain(seg("right_hand")).collect(),
        _ => unreachable!("unknown part {name}"),
    }
}

const POSTURE_PARTS: [&str; 4] = ["head", "left_arm", "right_arm", "shoulders"];

/// Left/right joint groups exchanged by mixed-mode postures: forearms with
/// hands, elbows, shoulders, hips, knees, lower legs with feet, eyes and ears.
const MIRROR_PAIRS: [(&[usize], &[usize]); 7] = [
    (&[9], &[10]),
    (&[7], &[8]),
    (&[5], &[6]),
    (&[11], &[12]),
    (&[13], &[14]),
    (&[15, 17, 18, 19], &[16, 20, 21, 22]),
    (&[1, 3], &[2, 4]),
];

/// Offsets that move the canonical skeleton into swap pattern `group`: bit
/// `i` exchanges the positions of the `i`-th mirror pair joint by joint.
/// The hands travel with the wrists.
pub fn mirrored_posture(group: usize) -> Vec<f64> {
    let canon = canonical_skeleton();
    let mut offsets = vec![0.0; NUM_JOINTS * 2];
    let seg = |s: &str| COCO_WHOLEBODY.range(s).expect("known segment");
    for (bit, (left, right)) in MIRROR_PAIRS.iter().enumerate() {
        if group >> bit & 1 == 0 {
            continue;
        }
        let mut pairs: Vec<(usize, usize)> = left.iter().copied().zip(right.iter().copied()).collect();
        if bit == 0 {
            pairs.extend(seg("left_hand").zip(seg("right_hand")));
        }
        for (l, r) in pairs {
            for c in 0..2 {
                let d = canon[2 * r + c] - canon[2 * l + c];
                offsets[2 * l + c] = d;
                offsets[2 * r + c] = -d;
            }
        }
    }
    offsets
}

/// A fixed frontal whole-body skeleton, `NUM_JOINTS × 2`.
pub fn canonical_skeleton() -> Vec<f64> {
    let mut p = vec![[0.0f64; 2]; NUM_JOINTS];
    let body = [
        [0.0, 0.80],
        [0.04, 0.84],
        [-0.04, 0.84],
        [0.08, 0.82],
        [-0.08, 0.82],
        [0.20, 0.60],
        [-0.20, 0.60],
        [0.28, 0.30],
        [-0.28, 0.30],
        [0.18, 0.05],
        [-0.18, 0.05],
        [0.12, 0.00],
        [-0.12, 0.00],
        [0.13, -0.50],
        [-0.13, -0.50],
        [0.13, -0.95],
        [-0.13, -0.95],
    ];
    p[..17].copy_from_slice(&body);
    let feet = [
        [0.18, -1.0],
        [0.22, -0.99],
        [0.12, -0.99],
        [-0.18, -1.0],
        [-0.22, -0.99],
        [-0.12, -0.99],
    ];
    p[17..23].copy_from_slice(&feet);
    // face: jaw arc, then the inner landmarks on a small grid
    for i in 0..17 {
        let a = std::f64::consts::PI * (1.1 + 0.8 * i as f64 / 16.0);
        p[23 + i] = [0.09 * a.cos(), 0.80 + 0.11 * a.sin()];
    }
    for i in 0..51 {
        let (r, c) = (i / 9, i % 9);
        p[40 + i] = [-0.06 + 0.015 * c as f64, 0.86 - 0.02 * r as f64];
    }
    for (root, sign) in [(91, 1.0), (112, -1.0)] {
        let wrist = if sign > 0.0 { body[9] } else { body[10] };
        p[root] = [wrist[0], wrist[1] - 0.03];
        for finger in 0..5 {
            let a = -std::f64::consts::FRAC_PI_2 + sign * (finger as f64 - 2.0) * 0.3;
            for k in 0..4 {
                let len = 0.03 + 0.02 * k as f64;
                p[root + 1 + finger * 4 + k] = [p[root][0] + len * a.cos(), p[root][1] + len * a.sin()];
            }
        }
    }
    p.into_iter().flatten().collect()
}

fn draw_posture(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut offsets = vec![0.0; NUM_JOINTS * 2];
    if config.posture_scale == 0.0 {
        return offsets;
    }
    let part_dist = Normal::new(0.0, config.posture_scale).expect("valid std");
    let joint_dist = Normal::new(0.0, config.posture_scale / 4.0).expect("valid std");
    for name in POSTURE_PARTS {
        let shift = [part_dist.sample(rng), part_dist.sample(rng)];
        for j in part(name) {
            offsets[2 * j] += shift[0] + joint_dist.sample(rng);
            offsets[2 * j + 1] += shift[1] + joint_dist.sample(rng);
        }
    }
    offsets
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / (a.len() / 2) as f64).sqrt()
}

/// Number of distinct postures a mode needs for `n` identities.
fn posture_count(mode: SynthMode, n: usize) -> usize {
    match mode {
        SynthMode::PostureOnly => n,
        SynthMode::Stillness => n.div_ceil(2),
        SynthMode::Mixed | SynthMode::RhythmOnly | SynthMode::Micro => 0,
    }
}

/// Draws `count` postures whose pairwise RMS distance is at least
/// `separation_ratio · noise_sigma`.
pub fn draw_postures(config: &SynthConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let min = config.separation_ratio * config.noise_sigma;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        let p = draw_posture(config, rng);
        if out.iter().all(|q| rms_distance(&p, q) >= min) {
            out.push(p);
        }
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Config(format!(
                "could not draw {count} postures {min} apart; lower the separation ratio"
            )));
        }
    }
    Ok(out)
}

pub fn identity_name(index: usize) -> String {
    format!("id{index:03}")
}

/// Profile of identity `index`. `postures` must come from
/// [`draw_postures`] with the mode's posture count.
pub fn generate_identity(config: &SynthConfig, index: usize, postures: &[Vec<f64>]) -> IdentityProfile {
    let shared = vec![0.0; NUM_JOINTS * 2];
    let hands = |amplitude: f64, frequency: f64| Oscillator {
        joints: part("hands"),
        amplitude,
        frequency,
        phase: 0.0,
    };
    let (base_posture, gestures, pause) = match config.mode {
        SynthMode::PostureOnly => (postures[index].clone(), vec![hands(0.0, 1.0)], PausePattern::ALWAYS),
        SynthMode::RhythmOnly => (
            shared,
            vec![hands(config.amplitude, RHYTHM_FREQUENCIES[index])],
            PausePattern::ALWAYS,
        ),
        SynthMode::Mixed => (
            mirrored_posture(index / 2),
            vec![hands(config.amplitude, MIXED_FREQUENCIES[index % MIXED_FREQUENCIES.len()])],
            PausePattern::ALWAYS,
        ),
        SynthMode::Micro => (
            shared,
            vec![hands(
                MICRO_AMPLITUDES[index / 2],
                MICRO_BASE_FREQUENCY + (index % 2) as f64 * MICRO_ALIAS_SHIFT,
            )],
            PausePattern::ALWAYS,
        ),
        SynthMode::Stillness => (
            postures[index / 2].clone(),
            vec![hands(config.amplitude, STILLNESS_FREQUENCY)],
            PausePattern {
                period: PAUSE_PERIOD,
                duty: STILLNESS_DUTY[index % 2],
            },
        ),
    };
    IdentityProfile {
        name: identity_name(index),
        base_posture,
        gestures,
        pause,
        noise_sigma: config.noise_sigma,
        posture_jitter: config.posture_jitter,
        phase_jitter: TAU,
    }
}

/// Renders one recording of `profile`: canonical skeleton, plus the
/// habitual posture and a per-sequence part shift, plus the gated
/// oscillators, plus gaussian jitter.
pub fn generate_sequence(
    profile: &IdentityProfile,
    frames: usize,
    fps: f64,
    source_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointSequence> {
    if frames == 0 {
        return Err(Error::Config("need at least one frame".into()));
    }
    profile.validate(fps)?;
    let mut base: Vec<f64> = canonical_skeleton()
        .iter()
        .zip(&profile.base_posture)
        .map(|(c, o)| c + o)
        .collect();
    if profile.posture_jitter > 0.0 {
        let d = Normal::new(0.0, profile.posture_jitter).expect("valid std");
        for name in POSTURE_PARTS {
            let shift = [d.sample(rng), d.sample(rng)];
            for j in part(name) {
                base[2 * j] += shift[0];
                base[2 * j + 1] += shift[1];
            }
        }
    }
    let phases: Vec<f64> = profile
        .gestures
        .iter()
        .map(|g| g.phase + rng.random::<f64>() * profile.phase_jitter)
        .collect();
    let pause_offset = rng.random::<f64>() * profile.pause.period;
    let noise = (profile.noise_sigma > 0.0).then(|| Normal::new(0.0, profile.noise_sigma).expect("valid std"));
    let mut data = Vec::with_capacity(frames * NUM_JOINTS * 2);
    for t in 0..frames {
        let mut frame = base.clone();
        let moving = profile.pause.moving_time(t as f64 / fps, pause_offset);
        for (g, &phase) in profile.gestures.iter().zip(&phases) {
            if g.amplitude == 0.0 {
                continue;
            }
            let a = TAU * g.frequency * moving + phase;
            let (dx, dy) = (g.amplitude * a.cos(), g.amplitude * a.sin());
            for &j in &g.joints {
                frame[2 * j] += dx;
                frame[2 * j + 1] += dy;
            }
        }
        if let Some(n) = &noise {
            for v in &mut frame {
                *v += n.sample(rng);
            }
        }
        data.extend(frame);
    }
    KeypointSequence::new(
        data,
        frames,
        NUM_JOINTS,
        2,
        fps,
        profile.name.clone(),
        source_id.to_string(),
    )
}

/// All identity profiles of a config, deterministic in the seed.
pub fn generate_identities(config: &SynthConfig) -> Result<Vec<IdentityProfile>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 0x1D]));
    let postures = draw_postures(config, posture_count(config.mode, config.n_identities), &mut rng)?;
    Ok((0..config.n_identities)
        .map(|i| generate_identity(config, i, &postures))
        .collect())
}

/// `n_identities × sequences_per_identity` labelled sequences. Each
/// sequence draws from its own stream keyed by (seed, identity, index).
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let profiles = generate_identities(config)?;
    let mut sequences = Vec::with_capacity(config.n_identities * config.sequences_per_identity);
    for (i, p) in profiles.iter().enumerate() {
        for s in 0..config.sequences_per_identity {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, i as u64, s as u64]));
            let id = format!("{}-{s:03}", p.name);
            sequences.push(generate_sequence(p, config.frames, config.fps, &id, &mut rng)?);
        }
    }
    Ok(Dataset::new(sequences))
}
