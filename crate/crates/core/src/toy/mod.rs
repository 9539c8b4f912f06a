//! Small differentiable models and training objectives.

pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod net;

pub use data::{Benchmark, BenchmarkSpec};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use loss::{dpo_loss, l1_penalty, orpo_loss, sft_loss, Example, LossValue, PreferencePair, PROB_EPS};
pub use net::{NetSpec, ToyNet};
