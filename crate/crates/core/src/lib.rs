//! Desk-scale laboratory for momentum (EMA) teachers in self-supervised
//! learning.
//!
//! The crate is layered: [`autodiff`] records computations on a [`Tape`];
//! [`encoder`] builds the staged network on top of it; [`momentum`] keeps the
//! target parameters and resolves the target forward path; [`objectives`]
//! holds the loss families; [`trainer`] ties them together into a step
//! engine whose signals are captured by [`telemetry`] and scored by [`eval`].

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod momentum;
pub mod objectives;
pub mod optim;
pub mod telemetry;
pub mod tensor;
pub mod trainer;

pub use autodiff::{GradMap, Phase, Tape, Var};
pub use encoder::{build_encoder, EncoderConfig, ParamSet, StageName};
pub use error::{Error, Result};
pub use momentum::{ema_update, init_target, Mode, MomentumPolicy, TargetParams};
pub use tensor::Tensor;
