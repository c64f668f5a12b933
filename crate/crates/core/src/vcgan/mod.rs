//! Variational Cycle-GAN over prosodic contours.
//!
//! Each generator samples F0 momenta from the source spectrogram and F0,
//! warps the F0 contour, samples energy momenta from the spectrogram and the
//! converted F0, warps the energy contour and rescales the spectrogram to it.
//! Two pair-density discriminators per direction score 4-tuples
//! `(S_A, p_A, S_B, p_B)`: a pitch network on the contour pair and a spectral
//! network on both spectrograms with their contours as extra channels. In
//! joint mode one network scores the full tuple.

mod graph;
mod loss;
mod train;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    convert, discriminator_loss, discriminator_loss_and_grad, generator_loss, generator_loss_and_grad,
    sample_energy_momenta, sample_f0_momenta, Batch, Conversion, LossComponents,
};
pub use train::{history_to_csv, train, TrainConfig, TrainHistory, UpdateRecord, HISTORY_CSV_HEADER};

pub(crate) use graph::Graph;

use crate::error::{Error, Result};
use crate::nn::{build_network, Checkpoint, NetSpec, ParamTree, DEFAULT_DROPOUT};
use crate::warp::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Class A to class B, generator γ.
    #[serde(rename = "fwd")]
    Forward,
    /// Class B to class A, generator θ.
    #[serde(rename = "bwd")]
    Backward,
}

impl Direction {
    pub fn other(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    pub(crate) fn gen_group(self) -> u32 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => 2,
        }
    }

    pub(crate) fn disc_group(self) -> u32 {
        match self {
            Direction::Forward => 4,
            Direction::Backward => 8,
        }
    }

    pub(crate) fn gen_prefix(self) -> &'static str {
        match self {
            Direction::Forward => "gen_fwd/",
            Direction::Backward => "gen_bwd/",
        }
    }

    pub(crate) fn disc_prefix(self) -> &'static str {
        match self {
            Direction::Forward => "disc_fwd/",
            Direction::Backward => "disc_bwd/",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" => Ok(Direction::Forward),
            "bwd" => Ok(Direction::Backward),
            _ => Err(Error::InvalidConfig(format!("direction must be fwd or bwd, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorMode {
    #[default]
    Split,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c1: f64,
    pub lambda_m: f64,
    pub lambda_i: f64,
    pub lambda_c2: f64,
    pub lambda_d: f64,
}

impl LossWeights {
    /// The neutral-to-angry setting.
    pub const NEUTRAL_ANGRY: LossWeights = LossWeights {
        lambda_c1: 1e-5,
        lambda_m: 1e-6,
        lambda_i: 1e-10,
        lambda_c2: 0.1,
        lambda_d: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c1, self.lambda_m, self.lambda_i, self.lambda_c2, self.lambda_d];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::NEUTRAL_ANGRY
    }
}

fn default_divisor() -> usize {
    4
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

fn default_f0_scale() -> f64 {
    0.01
}

fn default_momenta_scale() -> f64 {
    0.1
}

fn default_f0_kernel() -> KernelSpec {
    KernelSpec::F0
}

fn default_energy_kernel() -> KernelSpec {
    KernelSpec::ENERGY
}

/// Architecture and feature settings shared by all four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub bins: usize,
    /// Channel counts of the full-size architecture are divided by this.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// F0 values are multiplied by this before entering a network.
    #[serde(default = "default_f0_scale")]
    pub f0_input_scale: f64,
    /// Sampler network outputs are multiplied by this to give momenta.
    #[serde(default = "default_momenta_scale")]
    pub momenta_scale: f64,
    #[serde(default = "default_f0_kernel")]
    pub f0_kernel: KernelSpec,
    #[serde(default = "default_energy_kernel")]
    pub energy_kernel: KernelSpec,
    #[serde(default)]
    pub discriminator_mode: DiscriminatorMode,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(frames: usize, bins: usize) -> Self {
        ModelConfig {
            frames,
            bins,
            width_divisor: default_divisor(),
            dropout: DEFAULT_DROPOUT,
            f0_input_scale: default_f0_scale(),
            momenta_scale: default_momenta_scale(),
            f0_kernel: KernelSpec::F0,
            energy_kernel: KernelSpec::ENERGY,
            discriminator_mode: DiscriminatorMode::Split,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.bins == 0 || self.width_divisor == 0 {
            return Err(Error::InvalidConfig(format!("invalid model dimensions {self:?}")));
        }
        if !(self.f0_input_scale.is_finite() && self.f0_input_scale > 0.0) {
            return Err(Error::InvalidConfig("f0_input_scale must be > 0".into()));
        }
        if !(self.momenta_scale.is_finite() && self.momenta_scale > 0.0) {
            return Err(Error::InvalidConfig("momenta_scale must be > 0".into()));
        }
        self.f0_kernel.validate()?;
        self.energy_kernel.validate()
    }

    fn sampler_spec(&self) -> NetSpec {
        NetSpec::sampler(self.bins + 1, self.frames, self.width_divisor, self.dropout)
    }

    fn pitch_spec(&self) -> NetSpec {
        NetSpec::critic(2, self.frames, self.width_divisor)
    }

    fn spect_spec(&self) -> NetSpec {
        NetSpec::critic(2 * self.bins + 2, self.frames, self.width_divisor)
    }
}

/// A network specification with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: ParamTree,
}

impl Network {
    fn build(spec: NetSpec, seed: u64) -> Result<Self> {
        let params = build_network(&spec, seed)?;
        Ok(Network { spec, params })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub f0_sampler: Network,
    pub energy_sampler: Network,
    pub f0_kernel: KernelSpec,
    pub energy_kernel: KernelSpec,
}

impl Generator {
    pub fn zero_out(&mut self) {
        self.f0_sampler.params.zero_out();
        self.energy_sampler.params.zero_out();
    }

    fn parts(&self) -> [(&'static str, &Network); 2] {
        [("f0/", &self.f0_sampler), ("energy/", &self.energy_sampler)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    /// Pitch-pair network; absent in joint mode.
    pub pitch: Option<Network>,
    /// Spectral-pair network, or the single joint network.
    pub spect: Network,
}

impl Discriminator {
    fn parts(&self) -> Vec<(&'static str, &Network)> {
        match &self.pitch {
            Some(p) => vec![("pitch/", p), ("spect/", &self.spect)],
            None => vec![("joint/", &self.spect)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcganModel {
    config: ModelConfig,
    pub gen_forward: Generator,
    pub gen_backward: Generator,
    pub disc_forward: Discriminator,
    pub disc_backward: Discriminator,
}

impl VcganModel {
    /// Xavier-initialized model; network seeds are drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = |seeds: &mut ChaCha8Rng| -> Result<Generator> {
            Ok(Generator {
                f0_sampler: Network::build(config.sampler_spec(), seeds.next_u64())?,
                energy_sampler: Network::build(config.sampler_spec(), seeds.next_u64())?,
                f0_kernel: config.f0_kernel,
                energy_kernel: config.energy_kernel,
            })
        };
        let gen_forward = generator(&mut seeds)?;
        let gen_backward = generator(&mut seeds)?;
        let discriminator = |seeds: &mut ChaCha8Rng| -> Result<Discriminator> {
            let pitch = match config.discriminator_mode {
                DiscriminatorMode::Split => Some(Network::build(config.pitch_spec(), seeds.next_u64())?),
                DiscriminatorMode::Joint => None,
            };
            Ok(Discriminator {
                pitch,
                spect: Network::build(config.spect_spec(), seeds.next_u64())?,
            })
        };
        let disc_forward = discriminator(&mut seeds)?;
        let disc_backward = discriminator(&mut seeds)?;
        Ok(VcganModel {
            config,
            gen_forward,
            gen_backward,
            disc_forward,
            disc_backward,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn discriminator_mode(&self) -> DiscriminatorMode {
        self.config.discriminator_mode
    }

    pub fn generator(&self, dir: Direction) -> &Generator {
        match dir {
            Direction::Forward => &self.gen_forward,
            Direction::Backward => &self.gen_backward,
        }
    }

    pub fn generator_mut(&mut self, dir: Direction) -> &mut Generator {
        match dir {
            Direction::Forward => &mut self.gen_forward,
            Direction::Backward => &mut self.gen_backward,
        }
    }

    pub fn discriminator(&self, dir: Direction) -> &Discriminator {
        match dir {
            Direction::Forward => &self.disc_forward,
            Direction::Backward => &self.disc_backward,
        }
    }

    pub fn discriminator_mut(&mut self, dir: Direction) -> &mut Discriminator {
        match dir {
            Direction::Forward => &mut self.disc_forward,
            Direction::Backward => &mut self.disc_backward,
        }
    }

    /// Sets every sampler parameter of both generators to zero.
    pub fn zero_generators(&mut self) {
        self.gen_forward.zero_out();
        self.gen_backward.zero_out();
    }

    fn trees(&self) -> Vec<(String, &Network)> {
        let mut out = Vec::new();
        for dir in [Direction::Forward, Direction::Backward] {
            for (name, net) in self.generator(dir).parts() {
                out.push((format!("{}{name}", dir.gen_prefix()), net));
            }
            for (name, net) in self.discriminator(dir).parts() {
                out.push((format!("{}{name}", dir.disc_prefix()), net));
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (prefix, net) in self.trees() {
            net.params.write_into(&prefix, &mut ck);
        }
        ck.config = Some(serde_json::to_value(&self.config).expect("config serializes"));
        ck
    }

    /// Rebuilds a model from a checkpoint, checking that every network has
    /// exactly the parameters its architecture requires.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_version()?;
        let config: ModelConfig = serde_json::from_value(
            ck.config
                .clone()
                .ok_or_else(|| Error::Parse("checkpoint has no model config".into()))?,
        )
        .map_err(|e| Error::Parse(format!("model config: {e}")))?;
        let mut model = VcganModel::new(config)?;
        let mut expected = 0;
        let mut load = |prefix: String, net: &mut Network| -> Result<()> {
            let tree = ParamTree::read_from(&prefix, ck)?;
            let same = tree.len() == net.params.len()
                && net
                    .params
                    .iter()
                    .all(|(k, v)| tree.get(k).is_some_and(|t| t.shape() == v.shape()));
            if !same {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint parameters under `{prefix}` do not match the architecture"
                )));
            }
            expected += tree.len();
            net.params = tree;
            Ok(())
        };
        for dir in [Direction::Forward, Direction::Backward] {
            let g = model.generator_mut(dir);
            load(format!("{}f0/", dir.gen_prefix()), &mut g.f0_sampler)?;
            load(format!("{}energy/", dir.gen_prefix()), &mut g.energy_sampler)?;
            let d = model.discriminator_mut(dir);
            match &mut d.pitch {
                Some(p) => {
                    load(format!("{}pitch/", dir.disc_prefix()), p)?;
                    load(format!("{}spect/", dir.disc_prefix()), &mut d.spect)?;
                }
                None => load(format!("{}joint/", dir.disc_prefix()), &mut d.spect)?,
            }
        }
        if expected != ck.names.len() {
            return Err(Error::ShapeMismatch("checkpoint has unexpected parameters".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_checkpoint().to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_json(text)?)
    }
}
