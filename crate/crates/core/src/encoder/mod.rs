//! Transformer encoder with layout-aware input embeddings and suppressible
//! positional embeddings, plus its pretraining and tagging loops.

pub mod config;
pub mod dropout;
pub mod input;
pub mod model;
pub mod train;

pub use config::{DropoutVariant, EncoderConfig, LayoutMode, PositionalMode, QScheduleMode};
pub use dropout::{derive_rng, final_q, keep_mask, mlm_mask, positional_dropout, q_schedule};
pub use input::{prepare_document, LayoutContext, PreparedDoc, SeqLayout, Sequence};
pub use model::{add_tagger, compose_graph, compose_inputs, encoder_forward, encoder_stack, init_params, Positional};
pub use train::{
    finetune_tagger, mlm_eval, tag_document, tag_sequence, token_scores, train_mlm, EarlyStopping, FinetuneConfig,
    FinetuneResult, LogRow, MlmConfig, TaggedSequence, TrainResult,
};
