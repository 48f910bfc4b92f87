//! Reference reading-comprehension model with reverse-mode gradients.

mod checkpoint;
mod network;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use network::{
    candidate_indicator, decode_span, exact_match_features, ClozeHead, DropoutRng, ForwardTrace,
    Fusion, Head, Lexicon, ModelConfig, ModelVocab, Network, Prediction, SpanHead, PROB_FLOOR,
};
pub use params::ParamStore;
pub use tape::{SampleGrads, Tape, Var};
pub use tensor::Mat;
