pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod landscape;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{auroc, evaluate_task, EvalReport, Reconstructor};
pub use losses::{BaseLoss, LampConfig, LossSpec, Reduction};
pub use data::{ADTask, ImageBatch};
pub use model::{AEConfig, AEModel, Mode, Parameterized};
pub use optim::{OptimizerConfig, OptimizerKind, TrainConfig, TrainHistory};
pub use params::ParamSet;
pub use tensor::{Element, Graph, Precision, Tensor, Var};
