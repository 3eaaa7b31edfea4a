pub mod activations;
pub mod analysis;
pub mod attention;
pub mod bayes;
pub mod error;
pub mod flow;
pub mod latent;
pub mod linalg;
pub mod rng;
pub mod state;

pub use activations::{ActivationKind, ScoreField};
pub use error::{Error, Result};
pub use latent::{McSampleSet, SequenceBatch, SpikeEnsemble, ThetaDistribution};
pub use state::{OrderGradients, OrderState, Trajectory, TrajectoryRow};
