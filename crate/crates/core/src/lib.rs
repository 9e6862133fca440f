//! Goal-guided neural cellular automata: a differentiable cell-update rule
//! whose behavior is steered by a learned goal encoding.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grid;
mod linalg;
pub mod model;
pub mod steer;
pub mod store;
pub mod tasks;
pub mod trainer;

pub use autodiff::{backward, check_gradients, GradientSet, Tape};
pub use error::{Error, Result};
pub use eval::{alpha_iou, center_of_mass, fire_rate_sweep, goal_pca, Embedding2D, MetricsRow, SweepConfig};
pub use grid::{AliveMask, CellGrid};
pub use model::{nca_step, rollout, EncoderKind, GoalEncoder, NcaParams, StepConfig};
pub use store::{load_checkpoint, preset, save_checkpoint, Checkpoint, RunConfig};
pub use tasks::{direction_to_delta, Direction, EmojiDataset, RgbaImage};
pub use trainer::{TaskKind, Targets, TrainConfig, Trainer};
