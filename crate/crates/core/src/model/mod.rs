//! The seven model variants: embedder, attention, LSTM encoder and head.

mod config;
mod lstm;
mod network;
mod prepare;
mod train;


pub use config::{ModelConfig, Task, Variant};
pub use lstm::{lstm_step, BoundLstm, LstmParams, LstmState};
pub use network::{sidecar_path, window_loss, Model, ModelFile, Prediction, WindowOutput, MODEL_FORMAT, MODEL_VERSION};
pub use prepare::{prepare_all, prepare_window, PreparedStep, PreparedWindow, Target};
pub use train::{train, EpochLog, TrainConfig, TrainReport};
