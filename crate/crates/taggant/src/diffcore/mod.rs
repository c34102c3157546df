//! Differentiable computation substrate: a recording tape with reverse-mode
//! gradients that can themselves be differentiated (double backward).

mod func;
mod tape;

pub use func::{bce_with_logits, cosine, cross_entropy, dot, gelu, l2_norm, mean_all, mse, softmax};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
