//! Latent interaction dynamics for coupled two-agent trajectories.
//!
//! A pair of variational autoencoders embeds each agent's windowed motion
//! into a low-dimensional latent space, and a full-covariance hidden Markov
//! model over the concatenated latents serves as their prior. At test time
//! the HMM is conditioned on the observed agent (Gaussian mixture
//! regression) and the decoded prediction drives the controlled agent,
//! optionally refined with prior-regularised inverse kinematics while the
//! interaction is in a contact segment.
//!
//! Module map:
//!
//! * [`gauss`]: dense Gaussian algebra and SPD repair.
//! * [`hmm`]: forward variables, Baum-Welch, GMR conditioning, contact gating.
//! * [`net`]: MLPs with manual reverse-mode gradients and AdamW.
//! * [`vae`]: encoder/decoder pairs and the training objectives.
//! * [`train`]: the human-human and human-robot training pipelines.
//! * [`kin`]: serial-chain kinematics and IK solvers.
//! * [`infer`]: the reactive test-time loop.
//! * [`data`]: datasets, featurisation, retargeting and synthetic data.
//! * [`eval`]: metrics, significance tests and experiment orchestration.

pub mod data;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod hmm;
pub mod infer;
pub mod kin;
pub mod net;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use gauss::{BlockedGaussian, Gaussian, RegSchedule};
pub use hmm::{AlphaSequence, Block, CondMode, Hmm, TransitionStateModel};
pub use kin::{IkSolution, KinematicChain};
pub use net::{AdamConfig, AdamState, Mlp};
pub use train::{ModelBundle, TrainConfig};
pub use vae::{Vae, Variant};

/// Seeded RNG used across the crate; ChaCha keeps streams reproducible
/// across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
