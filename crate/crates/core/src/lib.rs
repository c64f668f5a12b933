pub mod contour;
pub mod error;
pub mod io;
pub mod nn;
pub mod synth;
pub mod vcgan;
pub mod verify;
pub mod warp;

pub use contour::{apply_energy, extract_energy, rmse, Contour, ContourKind, Spectrogram};
pub use error::{Error, Result};
pub use synth::{synth_dataset, AffineMap, PairedCorpus, SynthSpec};
pub use warp::{
    kernel_matrix, momenta_objective, register, warp, warp_pullback, FlowTrajectory, KernelSpec, Momenta,
    Registration, RegistrationConfig,
};
pub use vcgan::{
    convert, train, Direction, DiscriminatorMode, LossWeights, ModelConfig, TrainConfig, TrainHistory, VcganModel,
};
pub use verify::{
    check_prop1, equilibrium_gap, evaluate_conversion, gradient_attenuation_experiment, mc_prop2, Report,
};
