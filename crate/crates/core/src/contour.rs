//! Prosodic contours, the spectrogram surrogate, and the energy identities
//! linking them.
//!
//! Energy is the per-frame sum of spectral magnitude. Re-applying a new
//! energy contour rescales every bin of a frame by the same factor, so the
//! spectral shape of each frame is untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourKind {
    F0,
    Energy,
}

/// A length-T prosodic trajectory (pitch in Hz or linear energy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    values: Vec<f64>,
    kind: ContourKind,
}

impl Contour {
    pub fn new(values: Vec<f64>, kind: ContourKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidContour("contour must have at least one frame".into()));
        }
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidContour(format!("non-finite value at frame {t}")));
        }
        if kind == ContourKind::F0 {
            if let Some(t) = values.iter().position(|&v| v < 0.0) {
                return Err(Error::InvalidContour(format!(
                    "negative F0 {} at frame {t}",
                    values[t]
                )));
            }
        }
        Ok(Contour { values, kind })
    }

    pub fn f0(values: Vec<f64>) -> Result<Self> {
        Self::new(values, ContourKind::F0)
    }

    pub fn energy(values: Vec<f64>) -> Result<Self> {
        Self::new(values, ContourKind::Energy)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn kind(&self) -> ContourKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// T×F non-negative magnitude matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
    frame_period_ms: f64,
}

pub const DEFAULT_FRAME_PERIOD_MS: f64 = 5.0;

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_frame_period(frames, bins, data, DEFAULT_FRAME_PERIOD_MS)
    }

    pub fn with_frame_period(
        frames: usize,
        bins: usize,
        data: Vec<f64>,
        frame_period_ms: f64,
    ) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(Error::InvalidSpectrogram(format!(
                "dimensions must be positive, got {frames}x{bins}"
            )));
        }
        if data.len() != frames * bins {
            return Err(Error::InvalidSpectrogram(format!(
                "{frames}x{bins} needs {} entries, got {}",
                frames * bins,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidSpectrogram(format!(
                "entry ({}, {}) = {} is not a finite non-negative magnitude",
                i / bins,
                i % bins,
                data[i]
            )));
        }
        Ok(Spectrogram {
            frames,
            bins,
            data,
            frame_period_ms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let bins = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != bins) {
            return Err(Error::InvalidSpectrogram(format!("row {r} has a different width")));
        }
        Self::new(rows.len(), bins, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }
}

/// Per-frame energy: the sum of every bin of the frame.
pub fn extract_energy(s: &Spectrogram) -> Contour {
    let values = (0..s.frames()).map(|t| s.row(t).iter().sum()).collect();
    Contour {
        values,
        kind: ContourKind::Energy,
    }
}

/// Rescales each frame of `s` so its energy equals `target`.
pub fn apply_energy(s: &Spectrogram, target: &Contour) -> Result<Spectrogram> {
    if target.len() != s.frames() {
        return Err(Error::LengthMismatch {
            expected: s.frames(),
            actual: target.len(),
        });
    }
    let source = extract_energy(s);
    let mut data = Vec::with_capacity(s.data.len());
    for (t, (&e_src, &e_tgt)) in source.values.iter().zip(&target.values).enumerate() {
        if e_src == 0.0 {
            return Err(Error::ZeroEnergyFrame { frame: t });
        }
        if !(e_tgt > 0.0 && e_tgt.is_finite()) {
            return Err(Error::InvalidEnergyTarget {
                frame: t,
                value: e_tgt,
            });
        }
        // ratio first: an unchanged target gives exactly 1.0 and leaves the row bit-identical
        let ratio = e_tgt / e_src;
        data.extend(s.row(t).iter().map(|v| v * ratio));
    }
    Spectrogram::with_frame_period(s.frames, s.bins, data, s.frame_period_ms)
}

/// Root mean square difference between two equal-length contours.
pub fn rmse(a: &Contour, b: &Contour) -> Result<f64> {
    rmse_slices(a.values(), b.values())
}

pub(crate) fn rmse_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}
