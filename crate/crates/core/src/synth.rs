//! Synthetic non-parallel corpora with a known class-to-class F0 map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contour::{Contour, Spectrogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShape {
    pub mean: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub noise_std: f64,
}

/// The A→B ground-truth relation `p_B = scale * p_A + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        scale: 1.0,
        shift: 0.0,
    };

    pub fn apply(&self, v: f64) -> f64 {
        (self.scale * v + self.shift).max(0.0)
    }

    pub fn apply_contour(&self, c: &Contour) -> Contour {
        let values = c.values().iter().map(|&v| self.apply(v)).collect();
        Contour::new(values, c.kind()).expect("affine image of a valid contour is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub length: usize,
    pub class_a: ClassShape,
    pub affine_map: AffineMap,
    pub spectral_profile: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    /// Small corpus used by the tests and the quick-start examples.
    pub fn toy(num_pairs: usize, length: usize, bins: usize, seed: u64) -> Self {
        SynthSpec {
            num_pairs,
            length,
            class_a: ClassShape {
                mean: 120.0,
                amplitude: 20.0,
                frequency: 1.0,
                noise_std: 2.0,
            },
            affine_map: AffineMap {
                scale: 1.0,
                shift: 30.0,
            },
            spectral_profile: (0..bins).map(|f| 2.0 / (1.0 + f as f64 * 0.25)).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_pairs == 0 {
            return bad("num_pairs must be at least 1");
        }
        if self.length == 0 {
            return bad("length must be at least 1");
        }
        let c = &self.class_a;
        for (name, v) in [
            ("class_a.mean", c.mean),
            ("class_a.amplitude", c.amplitude),
            ("class_a.frequency", c.frequency),
            ("class_a.noise_std", c.noise_std),
            ("affine_map.scale", self.affine_map.scale),
            ("affine_map.shift", self.affine_map.shift),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!("{name} must be finite")));
            }
        }
        if c.noise_std < 0.0 {
            return bad("class_a.noise_std must be >= 0");
        }
        if c.mean < 0.0 {
            return bad("class_a.mean must be >= 0");
        }
        if self.affine_map.scale <= 0.0 {
            return bad("affine_map.scale must be > 0");
        }
        if self.spectral_profile.is_empty() {
            return bad("spectral_profile must have at least one bin");
        }
        if self.spectral_profile.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("spectral_profile entries must be finite and > 0");
        }
        Ok(())
    }
}

/// One utterance: spectrogram surrogate and F0 contour.
pub type Item = (Spectrogram, Contour);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedCorpus {
    pub source: Vec<Item>,
    pub target: Vec<Item>,
    pub ground_truth_map: Option<AffineMap>,
}

impl PairedCorpus {
    pub fn new(source: Vec<Item>, target: Vec<Item>, map: Option<AffineMap>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidSpec("corpus lists must be non-empty".into()));
        }
        let (t, f) = (source[0].0.frames(), source[0].0.bins());
        for (s, p) in source.iter().chain(&target) {
            if s.frames() != t || s.bins() != f || p.len() != t {
                return Err(Error::ShapeMismatch(format!(
                    "corpus item {}x{} / {} does not match {t}x{f}",
                    s.frames(),
                    s.bins(),
                    p.len()
                )));
            }
        }
        Ok(PairedCorpus {
            source,
            target,
            ground_truth_map: map,
        })
    }

    pub fn length(&self) -> usize {
        self.source[0].1.len()
    }

    pub fn bins(&self) -> usize {
        self.source[0].0.bins()
    }
}

fn class_a_contour(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = &spec.class_a;
    let t_len = spec.length as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, c.noise_std).expect("noise_std validated");
    (0..spec.length)
        .map(|t| {
            let base = c.mean + c.amplitude * (2.0 * PI * c.frequency * t as f64 / t_len + phase).sin();
            let eps = if c.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (base + eps).max(0.0)
        })
        .collect()
}

// Rank-1 surrogate: S[t][f] = g(t) * profile[f] with a smooth positive envelope g.
fn rank_one_spectrogram(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Spectrogram {
    let t_len = spec.length as f64;
    let level = rng.random_range(0.8..1.25);
    let depth = rng.random_range(0.1..0.4);
    let phase = rng.random_range(0.0..2.0 * PI);
    let bins = spec.spectral_profile.len();
    let mut data = Vec::with_capacity(spec.length * bins);
    for t in 0..spec.length {
        let g = level * (depth * (2.0 * PI * t as f64 / t_len + phase).sin()).exp();
        data.extend(spec.spectral_profile.iter().map(|w| g * w));
    }
    Spectrogram::new(spec.length, bins, data).expect("envelope and profile are positive")
}

/// Draws a non-parallel corpus: targets are affine images of independently
/// drawn class-A contours, never of the listed sources.
pub fn synth_dataset(spec: &SynthSpec) -> Result<PairedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut source = Vec::with_capacity(spec.num_pairs);
    let mut target = Vec::with_capacity(spec.num_pairs);
    for _ in 0..spec.num_pairs {
        let p = class_a_contour(spec, &mut rng);
        let s = rank_one_spectrogram(spec, &mut rng);
        source.push((s, Contour::f0(p)?));
    }
    for _ in 0..spec.num_pairs {
        let p = class_a_contour(spec, &mut rng);
        let mapped = p.iter().map(|&v| spec.affine_map.apply(v)).collect();
        let s = rank_one_spectrogram(spec, &mut rng);
        target.push((s, Contour::f0(mapped)?));
    }
    PairedCorpus::new(source, target, Some(spec.affine_map))
}
