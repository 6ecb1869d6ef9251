//! Hierarchical dialogue-act recognition: an LSTM utterance encoder, a
//! self-attention context layer with a learnable Gaussian locality prior,
//! sliding-window segmentation and the training loop around them, all on a
//! small reverse-mode autodiff engine.

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod model;
pub mod segment;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod vocab;

pub use attention::{AttentionConfig, AttentionParams, BiasField, ClassifierParams, KeyMeanMode};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use corpus::{gen_synthetic, load_corpus, write_corpus, Corpus, Dialogue, LabelMap, Split, SyntheticSpec, Utterance};
pub use encoder::EncoderParams;
pub use error::{Error, Result};
pub use model::{Model, OnlinePredictor, TrainConfig};
pub use segment::{split_dialogue, DialogueWindow, LossDivisor};
pub use tensor::{Stage, Tape, Tensor, Var};
pub use train::{evaluate, fit, train, Metrics, Setting, TrainReport};
pub use vocab::Vocab;
