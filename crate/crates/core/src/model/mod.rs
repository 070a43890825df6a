//! Encoder-decoder model assembled under a sharing policy.

mod baseline;
mod config;
mod container;
mod cost;
mod decode;
mod forward;
mod params;

pub use baseline::baseline_forward;
pub use config::{block_roles, BlockRole, ModelConfig, SharingPolicy, BOS, EOS, FIRST_WORD, PAD};
pub use container::{
    decode_weights, encode_weights, load_weights, load_weights_expecting, save_weights,
    write_atomic, Manifest, TensorRecord, MAGIC,
};
pub use cost::{count_params, estimate_source_flops, estimate_step_flops, mean_step_flops};
pub use decode::{
    argmax, beam_decode, beam_search_batch, decode_step, decode_step_batch, greedy_decode,
    greedy_decode_batch, log_softmax, sequence_log_prob, DecodeSession, Hypothesis,
};
pub use forward::{encode, encode_batch, encode_with_weights, forward_teacher, TeacherForward};
pub use params::{
    sinusoid_table, DecoderLayer, EncoderLayer, FeedForward, Init, ModelParams, Norm, TensorSpec,
    Weights,
};
