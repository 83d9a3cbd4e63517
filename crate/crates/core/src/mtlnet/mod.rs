//! Multi-task beam classifier on a small hand-written tensor kernel.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, EvalReport, EvalRow};
pub use model::{group_argmax, prepare_input, Grads, ModelDims, MtlModel, SampleCache, TaskLogits};
pub use ops::Mode;
pub use tensor::{Scalar, Tensor, TensorF32};
pub use train::{
    accuracy, predict_selection, train, validate, Accuracy, Adam, BatchRecord, EpochRecord, TrainConfig,
    TrainReport,
};
