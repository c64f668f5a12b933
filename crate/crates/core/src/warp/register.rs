use serde::{Deserialize, Serialize};

use super::{kernel_rows, pullback_trajectory, shoot, KernelSpec, Momenta};
use crate::contour::Contour;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMomenta {
    #[default]
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Weight of the data-fit term against the kinetic term.
    pub lambda: f64,
    pub max_iters: usize,
    /// Largest step the line search will try.
    pub learning_rate: f64,
    pub grad_tolerance: f64,
    #[serde(default)]
    pub init_momenta: InitMomenta,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            lambda: 1.0,
            max_iters: 5000,
            learning_rate: 1e-2,
            grad_tolerance: 1e-8,
            init_momenta: InitMomenta::Zeros,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if pos(self.lambda) && pos(self.learning_rate) && pos(self.grad_tolerance) && self.max_iters >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid registration config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub momenta: Momenta,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    pub warped: Vec<f64>,
}

impl Registration {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_objective(&self) -> f64 {
        *self.history.last().expect("history starts with the initial objective")
    }
}

struct Problem<'a> {
    src: &'a [f64],
    tgt: &'a [f64],
    gram: Vec<Vec<f64>>,
    lambda: f64,
    spec: &'a KernelSpec,
}

impl Problem<'_> {
    fn kinetic(&self, m: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                acc += g * m[i] * m[j];
            }
        }
        0.5 * acc
    }

    fn value(&self, m: &[f64]) -> Result<(f64, super::FlowTrajectory)> {
        let traj = shoot(self.src, m, self.spec)?;
        let data: f64 = traj
            .final_contour()
            .iter()
            .zip(self.tgt)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = self.kinetic(m) + self.lambda * data;
        if !v.is_finite() {
            return Err(Error::NonFiniteState { step: self.spec.steps });
        }
        Ok((v, traj))
    }

    fn gradient(&self, m: &[f64], traj: &super::FlowTrajectory) -> Result<Vec<f64>> {
        let upstream: Vec<f64> = traj
            .final_contour()
            .iter()
            .zip(self.tgt)
            .map(|(a, b)| 2.0 * self.lambda * (a - b))
            .collect();
        let (_, mut g) = pullback_trajectory(traj, self.spec, &upstream)?;
        for (i, row) in self.gram.iter().enumerate() {
            g[i] += row.iter().zip(m).map(|(k, mj)| k * mj).sum::<f64>();
        }
        Ok(g)
    }
}

fn check_lengths(m: usize, src: &Contour, tgt: &Contour) -> Result<()> {
    for actual in [m, tgt.len()] {
        if actual != src.len() {
            return Err(Error::LengthMismatch {
                expected: src.len(),
                actual,
            });
        }
    }
    Ok(())
}

/// Kinetic energy of the momenta under the source-contour kernel plus the
/// weighted squared residual of the warped source against the target.
pub fn momenta_objective(
    m: &Momenta,
    src: &Contour,
    tgt: &Contour,
    cfg: &RegistrationConfig,
    spec: &KernelSpec,
) -> Result<f64> {
    check_lengths(m.len(), src, tgt)?;
    let problem = Problem {
        src: src.values(),
        tgt: tgt.values(),
        gram: kernel_rows(src.values(), None, spec),
        lambda: cfg.lambda,
        spec,
    };
    Ok(problem.value(m.values())?.0)
}

const MAX_HALVINGS: usize = 8;
const MAX_FAILED_STEPS: usize = 10;

/// Gradient descent with a halving line search, starting from zero momenta.
///
/// Only steps that do not increase the objective are taken, so the
/// returned history is non-increasing.
pub fn register(
    src: &Contour,
    tgt: &Contour,
    cfg: &RegistrationConfig,
    spec: &KernelSpec,
) -> Result<Registration> {
    cfg.validate()?;
    spec.validate()?;
    check_lengths(src.len(), src, tgt)?;
    let problem = Problem {
        src: src.values(),
        tgt: tgt.values(),
        gram: kernel_rows(src.values(), None, spec),
        lambda: cfg.lambda,
        spec,
    };
    let mut m = match cfg.init_momenta {
        InitMomenta::Zeros => vec![0.0; src.len()],
    };
    let (mut obj, mut traj) = problem.value(&m)?;
    let mut grad = problem.gradient(&m, &traj)?;
    let mut history = vec![obj];
    let mut step = cfg.learning_rate;
    let mut failures = 0;

    for _ in 0..cfg.max_iters {
        if grad.iter().fold(0.0f64, |a, g| a.max(g.abs())) < cfg.grad_tolerance {
            break;
        }
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = m.iter().zip(&grad).map(|(mi, gi)| mi - step * gi).collect();
            // trial steps that overflow the flow are simply too long
            if let Ok((v, t)) = problem.value(&trial) {
                if v <= obj {
                    m = trial;
                    obj = v;
                    traj = t;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if accepted {
            failures = 0;
            history.push(obj);
            grad = problem.gradient(&m, &traj)?;
            step = (step * 2.0).min(cfg.learning_rate);
        } else {
            failures += 1;
            if failures >= MAX_FAILED_STEPS {
                return Err(Error::Diverged {
                    iterations: history.len() - 1,
                });
            }
        }
    }
    Ok(Registration {
        momenta: Momenta::new(m)?,
        history,
        warped: traj.final_contour().to_vec(),
    })
}
