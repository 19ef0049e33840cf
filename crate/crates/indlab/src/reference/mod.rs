//! Scaled-down standard attention-only transformer: token-level ICL task,
//! manual backprop, AdamW, and the interpretable weight transformation.

mod adamw;
mod interpret;
mod model;
mod task;
mod training;

pub use adamw::AdamW;
pub use interpret::{interpret, DominanceStats, InterpretabilityReport};
pub use model::{
    std_backward, std_backward_into, std_forward, std_loss, std_loss_and_probs, AttnLayer,
    StdCache, StdGradients, StdModel, StdModelConfig,
};
pub use task::{gen_token_batch, TokenTaskBatch};
pub use training::{std_batch_grad, std_train, StdTrainConfig, StdTrainRecord};
