//! Miniature BERT-style encoder with fake-quantization sites.

mod checkpoint;
mod config;
mod forward;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamEntry, CHECKPOINT_VERSION};
pub use config::{BitConfig, ModelConfig, ALLOWED_BITS};
pub use forward::{
    forward, predict, teacher_trace, Batch, Bindings, Encoder, ForwardOptions, ForwardTrace, Mode,
    TraceValues,
};
pub use state::{
    active_sites, param_shapes, quant_sites, ModelState, Site, SiteClass, CLASSIFIER_BIAS,
    CLASSIFIER_WEIGHT, LAYER_ACTIVATION_SITES, LAYER_WEIGHT_SITES, NUM_SEGMENTS,
    POSITION_EMBEDDING, SEGMENT_EMBEDDING, WORD_EMBEDDING,
};
