//! Sequence model: LSTM cells, the bidirectional seq2seq model, training,
//! checkpoints and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
pub use model::{bilstm_forward, ModelSpec, SeqGrads, SeqModel};
pub use train::{evaluate, fit, predict_video, TrainConfig, TrainLog};
