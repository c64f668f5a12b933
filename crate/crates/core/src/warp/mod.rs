//! Geodesic shooting of 1-D contours under a Gaussian kernel.
//!
//! A contour `q` and momenta `m` are integrated for a fixed number of explicit
//! steps:
//!
//! ```text
//! d_ij = q_i - q_j
//! K_ij = exp(-d_ij^2 / sigma^2)
//! q_i <- q_i + dt * sum_l K_il m_l
//! m_i <- m_i + dt * 2 * sum_j (-K_ij / sigma^2) d_ij m_i m_j
//! ```
//!
//! Both updates read the state at the start of the step. The same evolving
//! state feeds the kernel and the contour update.
//!
//! [`warp_pullback`] is the exact vector-Jacobian product of the final
//! contour with respect to the initial contour and momenta, obtained by
//! running the recursion backwards over the stored trajectory.

mod register;

pub use register::{momenta_objective, register, InitMomenta, Registration, RegistrationConfig};

use serde::{Deserialize, Serialize};

use crate::contour::{Contour, ContourKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Kernel width in contour-value units.
    pub sigma_value: f64,
    /// Optional kernel width along the frame axis (frames). `None` is the
    /// value-only kernel.
    pub sigma_time: Option<f64>,
    pub steps: usize,
    pub dt: f64,
}

impl KernelSpec {
    pub const fn new(sigma_value: f64) -> Self {
        KernelSpec {
            sigma_value,
            sigma_time: None,
            steps: 5,
            dt: 1.0,
        }
    }

    pub const F0: KernelSpec = KernelSpec::new(50.0);
    pub const ENERGY: KernelSpec = KernelSpec::new(2.0);

    pub fn with_sigma_time(mut self, sigma_time: f64) -> Self {
        self.sigma_time = Some(sigma_time);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_value > 0.0
            && self.sigma_value.is_finite()
            && self.steps >= 1
            && self.dt > 0.0
            && self.dt.is_finite()
            && self.sigma_time.is_none_or(|s| s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid kernel spec {self:?}")))
        }
    }
}

/// Initial momenta of the flow, one value per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Momenta(Vec<f64>);

impl Momenta {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidContour(format!("non-finite momentum at frame {t}")));
        }
        Ok(Momenta(values))
    }

    pub fn zeros(len: usize) -> Self {
        Momenta(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub contour: Vec<f64>,
    pub momenta: Vec<f64>,
}

/// Every intermediate state of one shooting run; `states[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub states: Vec<FlowState>,
}

impl FlowTrajectory {
    pub fn final_contour(&self) -> &[f64] {
        &self.states.last().expect("trajectory is never empty").contour
    }
}

// Squared time distances scaled by sigma_time, or None for the value-only kernel.
fn time_penalty(n: usize, times: Option<&[f64]>, spec: &KernelSpec) -> Option<Vec<f64>> {
    let st = spec.sigma_time?;
    let default: Vec<f64>;
    let t = match times {
        Some(t) => t,
        None => {
            default = (0..n).map(|i| i as f64).collect();
            &default
        }
    };
    let inv = 1.0 / (st * st);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dt = t[i] - t[j];
            out[i * n + j] = dt * dt * inv;
        }
    }
    Some(out)
}

/// Gram matrix of the contour values under the warp kernel, row-major T×T.
pub fn kernel_matrix(points: &Contour, times: Option<&[f64]>, spec: &KernelSpec) -> Vec<Vec<f64>> {
    kernel_rows(points.values(), times, spec)
}

pub(crate) fn kernel_rows(q: &[f64], times: Option<&[f64]>, spec: &KernelSpec) -> Vec<Vec<f64>> {
    let n = q.len();
    let tp = time_penalty(n, times, spec);
    let inv_s2 = 1.0 / (spec.sigma_value * spec.sigma_value);
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d = q[i] - q[j];
                    let extra = tp.as_ref().map_or(0.0, |tp| tp[i * n + j]);
                    (-(d * d * inv_s2 + extra)).exp()
                })
                .collect()
        })
        .collect()
}

/// Runs the shooting recursion on raw slices and keeps every state.
pub fn shoot(p: &[f64], m: &[f64], spec: &KernelSpec) -> Result<FlowTrajectory> {
    if p.len() != m.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: m.len(),
        });
    }
    let n = p.len();
    let tp = time_penalty(n, None, spec);
    let inv_s2 = 1.0 / (spec.sigma_value * spec.sigma_value);
    let mut states = Vec::with_capacity(spec.steps + 1);
    states.push(FlowState {
        contour: p.to_vec(),
        momenta: m.to_vec(),
    });
    for step in 0..spec.steps {
        let cur = states.last().expect("non-empty");
        let (q, mom) = (&cur.contour, &cur.momenta);
        let mut next_q = q.clone();
        let mut next_m = mom.clone();
        for i in 0..n {
            let mut vel = 0.0;
            let mut acc = 0.0;
            for j in 0..n {
                let d = q[i] - q[j];
                let extra = tp.as_ref().map_or(0.0, |tp| tp[i * n + j]);
                let k = (-(d * d * inv_s2 + extra)).exp();
                vel += k * mom[j];
                acc += k * d * mom[j];
            }
            next_q[i] = q[i] + spec.dt * vel;
            next_m[i] = mom[i] + spec.dt * 2.0 * (-inv_s2) * acc * mom[i];
        }
        if next_q.iter().chain(&next_m).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: step + 1 });
        }
        states.push(FlowState {
            contour: next_q,
            momenta: next_m,
        });
    }
    Ok(FlowTrajectory { states })
}

/// Warps `p` by the flow generated from momenta `m`.
pub fn warp(p: &Contour, m: &Momenta, spec: &KernelSpec) -> Result<(Contour, FlowTrajectory)> {
    let traj = shoot(p.values(), m.values(), spec)?;
    let out = traj.final_contour().to_vec();
    if p.kind() == ContourKind::F0 {
        if let Some(t) = out.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidContour(format!(
                "warped F0 is negative ({}) at frame {t}",
                out[t]
            )));
        }
    }
    Ok((Contour::new(out, p.kind())?, traj))
}

/// Reverse sweep over a stored trajectory. Returns adjoints of the initial
/// contour and momenta given the adjoint of the final contour.
pub fn pullback_trajectory(
    traj: &FlowTrajectory,
    spec: &KernelSpec,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = traj.states[0].contour.len();
    if upstream.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: upstream.len(),
        });
    }
    let tp = time_penalty(n, None, spec);
    let inv_s2 = 1.0 / (spec.sigma_value * spec.sigma_value);
    let c = 2.0 * spec.dt * inv_s2;
    let mut aq = upstream.to_vec();
    let mut am = vec![0.0; n];
    for s in (0..traj.states.len() - 1).rev() {
        let FlowState {
            contour: q,
            momenta: m,
        } = &traj.states[s];
        let mut gq = aq.clone();
        let mut gm = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let d = q[i] - q[j];
                let extra = tp.as_ref().map_or(0.0, |tp| tp[i * n + j]);
                let k = (-(d * d * inv_s2 + extra)).exp();
                acc += k * d * m[j];

                let coupling = c * am[i] * m[i];
                gm[j] += spec.dt * aq[i] * k - coupling * k * d;
                let k_bar = spec.dt * aq[i] * m[j] - coupling * d * m[j];
                let d_bar = -coupling * k * m[j] + k_bar * k * (-2.0 * d * inv_s2);
                gq[i] += d_bar;
                gq[j] -= d_bar;
            }
            gm[i] += am[i] * (1.0 - c * acc);
        }
        if gq.iter().chain(&gm).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: s + 1 });
        }
        aq = gq;
        am = gm;
    }
    Ok((aq, am))
}

/// Vector-Jacobian product of the warped contour with respect to the source
/// contour and the momenta.
pub fn warp_pullback(
    p: &[f64],
    m: &[f64],
    spec: &KernelSpec,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: spec.steps });
    }
    let traj = shoot(p, m, spec)?;
    pullback_trajectory(&traj, spec, upstream)
}
