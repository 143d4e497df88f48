//! Policies, trainers, replay memory, checkpoints, and the closed
//! control loop.

pub mod checkpoint;
pub mod direct;
pub mod optim;
pub mod policy;
pub mod ppo;
pub mod replay;
pub mod runner;

pub use checkpoint::Checkpoint;
pub use direct::{direct_gradient_update, DirectHyper};
pub use optim::RmsProp;
pub use policy::{FeederPolicy, LstmPolicy, MinMax, Mlp};
pub use ppo::{
    gaussian_logprob, imitate, ppo_update, sigma_schedule, GaussianPolicyOutput, GradMode,
    PpoHyper,
};
pub use replay::{ReplayMemory, RolloutRecord};
pub use runner::{
    building_norms, pretrain_building, run_building, run_feeder, setup_feeder_model,
    sysid_building, BuildingController, BuildingRunOptions, FeederController, FeederRunOptions,
    FeederSetup, StepMetrics,
};
