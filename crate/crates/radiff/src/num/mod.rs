//! Dense-tensor arithmetic, reverse-mode autodiff, network building blocks,
//! optimizers and learning-rate schedules. Everything is 64-bit and
//! single-threaded per training context; all tape values are matrices
//! (scalars are 1x1, vectors 1xn).

mod nn;
mod optim;
mod schedule;
mod tape;
mod tensor;

pub use nn::{
    attention, attention_init, attention_weights, embedding_init, embedding_lookup, layer_norm,
    layer_norm_init, linear, linear_init, mlp, mlp_init, AttentionInit, Ctx, Params,
};
pub use optim::{AdamConfig, Optimizer};
pub use schedule::LrSchedule;
pub use tape::{Grads, Tape, Tx};
pub use tensor::Tensor;
