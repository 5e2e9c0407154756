//! Joint Bayesian learning of tracer fields, parameters and model formulations for
//! plankton dynamics in a 2-D ridge flow, using dynamically orthogonal reduced-order
//! equations and a Gaussian-mixture filter.

pub mod balance;
pub mod banded;
pub mod bgc;
pub mod do_engine;
pub mod error;
pub mod filter;
pub mod flow;
pub mod geometry;
pub mod gmm;
pub mod io;
pub mod model_space;
pub mod transport;
pub mod twin;
pub mod verify;

pub use bgc::{light_g, source, BioParams, ModelId, ParamId, ReactionEval};
pub use error::{Error, Result};
pub use flow::{FaceVelocities, FlowConfig, FlowSolver, FlowState};
pub use geometry::{build_domain, CellKind, Domain, DomainConfig, GridSpec, RidgeMask};
pub use model_space::{GammaPrior, PiecewiseBasis};
pub use transport::{AdvectionScheme, Transport};
pub use balance::{BiomassProfile, EquilibriumProfile, InitReport, JointSample};
pub use do_engine::{DOState, Dynamics, ParamDeviations};
pub use filter::{assimilate, FilterConfig, ObservationBatch, UpdateReport};
pub use gmm::{EmConfig, GaussianMixture};
pub use twin::{run_experiment, ExperimentConfig, ExperimentResult, MetricsReport, RunOptions, RunOutcome};
