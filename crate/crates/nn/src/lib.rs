//! A small CPU neural-network core with the fixed layer set needed for
//! spectrogram CNNs and recurrent sequence classifiers: convolution, pooling,
//! batch normalisation, dense, ELU, dropout, softmax/sigmoid heads and a
//! bidirectional LSTM, trained with Adam and checkpointed in FXT1.

pub mod checkpoint;
mod error;
pub mod fxt1;
pub mod gradcheck;
pub mod graph;
mod layers;
pub mod loss;
pub mod optim;
mod scalar;
mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{NnError, Result};
pub use graph::{Gradients, GraphSpec, HeadSpec, LayerSpec, Mode, ModelGraph, Named, NodeSpec};
pub use loss::LossKind;
pub use optim::{adam_step, AdamState};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
pub use train::{evaluate, train_loop, BatchSource, EpochRecord, History, TrainConfig};
