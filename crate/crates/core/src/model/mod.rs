//! The transformer, its tokenizer, checkpoint I/O and the toy trainer.

pub mod checkpoint;
pub mod config;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save, DType};
pub use config::{FfnKind, ModelConfig, NeuronSite, PositionKind};
pub use tokenizer::{Tokenizer, TokenizerTable, EOS};
pub use train::{train_toy, TrainConfig, TrainReport};
pub use transformer::{ActivationTrace, Overrides, TransformerModel};
