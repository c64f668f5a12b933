//! Executable checks of the cyclic-loss bounds, the split-discriminator
//! gradient attenuation argument, adversarial stability and conversion RMSE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::contour::{extract_energy, rmse};
use crate::error::{Error, Result};
use crate::nn::{Mode, Tape, Tensor};
use crate::synth::PairedCorpus;
use crate::vcgan::{convert, Batch, Direction, Graph, ModelConfig, TrainHistory, VcganModel};

/// Environment variable capping Monte Carlo worker threads.
pub const THREADS_ENV: &str = "PROSODY_MORPH_THREADS";

/// A check result in its on-disk form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub check_name: String,
    pub inputs: serde_json::Value,
    pub outputs: serde_json::Value,
    pub pass: bool,
}

impl Report {
    pub fn new(check_name: &str, inputs: impl Serialize, outputs: impl Serialize, pass: bool) -> Self {
        Report {
            check_name: check_name.to_string(),
            inputs: serde_json::to_value(inputs).expect("serializable inputs"),
            outputs: serde_json::to_value(outputs).expect("serializable outputs"),
            pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Mean row-wise L1 distance against the L1 distance of the row means.
pub fn check_prop1(x: &[Vec<f64>], x_cyclic: &[Vec<f64>]) -> Result<Prop1Result> {
    if x.is_empty() || x.len() != x_cyclic.len() {
        return Err(Error::ShapeMismatch(format!(
            "batches of {} and {} rows",
            x.len(),
            x_cyclic.len()
        )));
    }
    let n = x[0].len();
    if x.iter().chain(x_cyclic).any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("rows of unequal length".into()));
    }
    let rows = x.len() as f64;
    let mut lhs = 0.0;
    let mut mean_diff = vec![0.0; n];
    for (a, b) in x.iter().zip(x_cyclic) {
        for i in 0..n {
            lhs += (a[i] - b[i]).abs();
        }
        for i in 0..n {
            mean_diff[i] += a[i] / rows - b[i] / rows;
        }
    }
    lhs /= rows;
    let rhs: f64 = mean_diff.iter().map(|d| d.abs()).sum();
    // slack scaled to the magnitudes involved absorbs summation rounding
    let holds = lhs >= rhs - 1e-12 * rhs.max(1.0);
    Ok(Prop1Result { lhs, rhs, holds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XDistribution {
    #[default]
    Normal,
    /// Uniform on [-1, 1).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop2Config {
    pub n: usize,
    /// Standard deviation of the additive Gaussian perturbation.
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub x_distribution: XDistribution,
}

impl Prop2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.samples == 0 || !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid Monte Carlo config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop2Result {
    pub estimate: f64,
    pub closed_form: f64,
    pub rel_error: f64,
}

/// Work is split into this many independently seeded shards regardless of
/// the thread count, so results do not depend on parallelism.
const SHARDS: u64 = 16;

/// Worker threads allowed by the environment, default 1.
pub fn thread_limit() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn prop2_shard(cfg: &Prop2Config, shard: u64) -> f64 {
    let per = cfg.samples as u64 / SHARDS;
    let count = per + u64::from(shard < cfg.samples as u64 % SHARDS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(shard);
    let mut sum = 0.0;
    for _ in 0..count {
        for _ in 0..cfg.n {
            let x: f64 = match cfg.x_distribution {
                XDistribution::Normal => rng.sample(StandardNormal),
                XDistribution::Uniform => rng.random_range(-1.0..1.0),
            };
            let z: f64 = rng.sample(StandardNormal);
            let x_hat = x + cfg.tau * z;
            sum += (x - x_hat).abs();
        }
    }
    sum
}

/// Monte Carlo estimate of `E ||X - X_hat||_1` for `X_hat = X + N(0, tau^2 I)`
/// against `sqrt(2 / pi) * n * tau`, using [`thread_limit`] threads.
pub fn mc_prop2(cfg: &Prop2Config) -> Result<Prop2Result> {
    mc_prop2_with_threads(cfg, thread_limit())
}

pub fn mc_prop2_with_threads(cfg: &Prop2Config, threads: usize) -> Result<Prop2Result> {
    cfg.validate()?;
    let threads = threads.clamp(1, SHARDS as usize);
    let mut sums = vec![0.0; SHARDS as usize];
    if threads == 1 {
        for (k, s) in sums.iter_mut().enumerate() {
            *s = prop2_shard(cfg, k as u64);
        }
    } else {
        let chunk = (SHARDS as usize).div_ceil(threads);
        std::thread::scope(|scope| {
            for (c, slots) in sums.chunks_mut(chunk).enumerate() {
                scope.spawn(move || {
                    for (j, s) in slots.iter_mut().enumerate() {
                        *s = prop2_shard(cfg, (c * chunk + j) as u64);
                    }
                });
            }
        });
    }
    let estimate = sums.iter().sum::<f64>() / cfg.samples as f64;
    let closed_form = (2.0 / std::f64::consts::PI).sqrt() * cfg.n as f64 * cfg.tau;
    let rel_error = if closed_form == 0.0 {
        estimate.abs()
    } else {
        (estimate - closed_form).abs() / closed_form
    };
    Ok(Prop2Result {
        estimate,
        closed_form,
        rel_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttenuationResult {
    pub norm_split: f64,
    pub norm_unified: f64,
    pub ratio: f64,
}

impl AttenuationResult {
    fn from_norms(norm_split: f64, norm_unified: f64) -> Result<Self> {
        if !norm_split.is_finite() || !norm_unified.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "gradient norms {norm_split} and {norm_unified}"
            )));
        }
        Ok(AttenuationResult {
            norm_split,
            norm_unified,
            ratio: norm_unified / norm_split,
        })
    }
}

/// What sits between the F0 warp and the critic on the unified path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyBlock {
    /// The generator's energy sampler and energy warp.
    Model,
    /// Pass the converted F0 straight through.
    Identity,
}

fn f0_gradient_norm(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    seed: u64,
    cascade: Option<EnergyBlock>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(model, &mut rng, Mode::Train);
    let (src, _) = batch.roles(dir);
    let mut terms = Vec::with_capacity(src.len());
    for item in src {
        let a = g.input(item)?;
        let x = g.cascade(dir, &a, cascade == Some(EnergyBlock::Model))?;
        terms.push(g.pitch_fake_log(dir, a.p, x)?);
    }
    let n = terms.len() as f64;
    let root = g.tape.linear(terms.into_iter().map(|t| (t, 1.0 / n)).collect())?;
    let grads = g.tape.backward_many(&[(root, dir.gen_group())])?;
    let f0 = grads[0].params_with_prefix(&format!("{}f0/", dir.gen_prefix()));
    Ok(f0.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt())
}

/// Norm of the F0 sampler gradient of `E log(1 - D(p_A, x))` when the pitch
/// critic sees the warped F0 directly (split) versus the output of the
/// cascaded energy block (unified). Both evaluations share dropout masks.
pub fn gradient_attenuation_experiment(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    energy_block: EnergyBlock,
    seed: u64,
) -> Result<AttenuationResult> {
    if model.discriminator(dir).pitch.is_none() {
        return Err(Error::InvalidConfig("attenuation experiment needs a pitch discriminator".into()));
    }
    let split = f0_gradient_norm(model, dir, batch, seed, None)?;
    let unified = f0_gradient_norm(model, dir, batch, seed, Some(energy_block))?;
    AttenuationResult::from_norms(split, unified)
}

/// Closed-form cascade: `f(z) = theta * z` at `theta = 0`, an energy block
/// that scales by `energy_scale`, and the critic `D(x) = 1/2 + sum(x)`.
pub fn linear_toy_attenuation(z: &[f64], energy_scale: f64) -> Result<AttenuationResult> {
    let norm = |scale: Option<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.param("theta", &Tensor::zeros(&[z.len()]), 1);
        let zc = tape.constant(Tensor::vector(z.to_vec()));
        let f = tape.mul(theta, zc)?;
        let x = match scale {
            Some(k) => tape.scale(f, k),
            None => f,
        };
        let s = tape.sum(x);
        let one = tape.constant(Tensor::scalar(1.0));
        // 1 - D(x) = 1/2 - sum(x)
        let flip = tape.linear(vec![(one, 0.5), (s, -1.0)])?;
        let l = tape.ln(flip);
        let g = tape.backward(l, &Tensor::scalar(1.0))?;
        Ok(g.param("theta").expect("registered").l2_norm())
    };
    AttenuationResult::from_norms(norm(None)?, norm(Some(energy_scale))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationSweep {
    pub seeds: Vec<u64>,
    pub results: Vec<AttenuationResult>,
    pub median_ratio: f64,
}

/// Runs the attenuation experiment on a freshly initialized model per seed.
pub fn attenuation_sweep(config: &ModelConfig, batch: &Batch, seeds: &[u64]) -> Result<AttenuationSweep> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = VcganModel::new(ModelConfig {
            seed,
            ..config.clone()
        })?;
        results.push(gradient_attenuation_experiment(
            &model,
            Direction::Forward,
            batch,
            EnergyBlock::Model,
            seed,
        )?);
    }
    let mut ratios: Vec<f64> = results.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let median_ratio = median_sorted(&ratios);
    Ok(AttenuationSweep {
        seeds: seeds.to_vec(),
        results,
        median_ratio,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `|loss_gen - loss_disc|` per history record.
    pub gap: Vec<f64>,
    pub first_quartile_mean: f64,
    pub final_quartile_mean: f64,
    pub max_gap: f64,
    pub diverged: bool,
}

/// Gap between generator and discriminator losses; diverged when the mean
/// gap over the final quarter exceeds ten times the mean over the first.
pub fn equilibrium_gap(history: &TrainHistory) -> Result<StabilityReport> {
    gap_report(
        history
            .records
            .iter()
            .map(|r| (r.loss_gen - r.loss_disc).abs())
            .collect(),
    )
}

fn gap_report(gap: Vec<f64>) -> Result<StabilityReport> {
    if gap.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let n = gap.len();
    let q = (n / 4).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first_quartile_mean = mean(&gap[..q]);
    let final_quartile_mean = mean(&gap[n - q..]);
    let max_gap = gap.iter().cloned().fold(0.0, f64::max);
    Ok(StabilityReport {
        diverged: final_quartile_mean > 10.0 * first_quartile_mean,
        gap,
        first_quartile_mean,
        final_quartile_mean,
        max_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionEval {
    pub rmse_f0: f64,
    /// Against the source energy, since the corpus maps only F0.
    pub rmse_energy: f64,
    pub baseline_rmse_f0: f64,
}

/// Converts every source item forward and compares with the affine
/// ground truth; the baseline leaves the source unchanged.
pub fn evaluate_conversion<R: Rng + ?Sized>(
    model: &VcganModel,
    corpus: &PairedCorpus,
    rng: &mut R,
) -> Result<ConversionEval> {
    let map = corpus.ground_truth_map.ok_or(Error::MissingGroundTruth)?;
    let (mut f0, mut energy, mut base) = (0.0, 0.0, 0.0);
    for (s, p) in &corpus.source {
        let truth = map.apply_contour(p);
        let c = convert(model, Direction::Forward, s, p, rng)?;
        f0 += rmse(&c.p_out, &truth)?;
        energy += rmse(&c.e_out, &extract_energy(s))?;
        base += rmse(p, &truth)?;
    }
    let n = corpus.source.len() as f64;
    Ok(ConversionEval {
        rmse_f0: f0 / n,
        rmse_energy: energy / n,
        baseline_rmse_f0: base / n,
    })
}
