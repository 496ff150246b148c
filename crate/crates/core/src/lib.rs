//! Audiovisual, contextual emotion recognition at desk scale.
//!
//! The crate covers the whole pipeline around the CNN backbones, which are
//! abstracted as per-frame embedding providers:
//!
//! * [`geometry`]: agent bounding boxes from BODY25 keypoints, context masking, body crops.
//! * [`audio`]: STFT power, HTK mel filterbank, log mel-spectrograms and their file formats.
//! * [`metrics`]: CCC, macro-F1, accuracy and the challenge total scores.
//! * [`losses`]: MSE, CCC loss, cross-entropy, embedding congruity, with analytic gradients.
//! * [`net`]: bidirectional LSTM seq2seq model, backprop through time, training, checkpoints.
//! * [`fusion`]: early stream fusion with zero-fill and weighted-average ensembling.
//! * [`data`]: annotations, pose JSON, embedding files, windowing, synthetic datasets.
//! * [`config`]: the run configuration used by the `avemo` CLI.

pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod net;

pub use error::{Error, Result};

/// Emotion-recognition sub-task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Seven-class categorical expression.
    Expr,
    /// Continuous valence and arousal.
    Va,
}

impl Task {
    /// Width of the per-frame model output.
    pub fn n_out(self) -> usize {
        match self {
            Task::Expr => metrics::N_EXPR_CLASSES,
            Task::Va => 2,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expr" => Ok(Task::Expr),
            "va" => Ok(Task::Va),
            other => Err(Error::config(format!("unknown task `{other}` (expected expr|va)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Expr => "expr",
            Task::Va => "va",
        })
    }
}
