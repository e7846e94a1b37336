pub mod checkpoint;
pub mod dataset;
pub mod demos;
pub mod dtw;
pub mod env;
pub mod error;
pub mod geom;
pub mod kv;
pub mod locomotion;
pub mod policy;
pub mod qnet;
pub mod replay;
pub mod scripted;
pub mod stats;
pub mod training;

pub use error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use dataset::{AgentTrack, Episode, SplitCounts, SplitSpec, StageSplit};
pub use env::{MotionParams, Role, TerminationCause, WorldConfig};
pub use geom::Vec2;
pub use locomotion::{LocomotionParams, ParameterReport};
pub use policy::PolicySet;
pub use stats::{BootstrapResult, EpisodeMetrics};
pub use training::{DtwReward, Method, RunConfig, TrainLog};
