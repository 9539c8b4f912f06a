//! Delta-parameter tooling for fine-tuned checkpoints.
//!
//! * [`tensor`], [`params`], [`rng`], [`checkpoint`]: numeric substrate and
//!   the on-disk checkpoint format.
//! * [`delta`], [`lora`]: delta extraction/application, adapter composition
//!   and the sparsity statistic.
//! * [`sparsify`]: drop-and-rescale, top-k trimming, threshold pruning.
//! * [`merge`]: linear, task arithmetic, TIES, DARE-TIES and SLERP merging.
//! * [`toy`]: a small MLP, SFT/DPO/ORPO objectives and a synthetic benchmark.
//! * [`pipeline`]: sequential vs parallel training and the experiment matrix.

pub mod checkpoint;
pub mod delta;
pub mod error;
pub mod lora;
pub mod merge;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sparsify;
pub mod tensor;
pub mod toy;

pub use delta::{apply_delta, extract_delta, sparsity, DeltaSet, ExtractMode, LayerAveraging, SparsityReport};
pub use error::{Error, ErrorClass, Result};
pub use lora::{compose_lora, LoraAdapter, LoraLayer};
pub use merge::{merge, MergeInput, MergeMethod, MergeOutput, MergeRecipe};
pub use params::ParamSet;
pub use pipeline::{run_experiment, ExperimentConfig, ExperimentReport, Objective, TrainConfig};
pub use rng::SeededRng;
pub use sparsify::{dare, threshold_prune, trim_topk, Granularity, SparsifySpec};
pub use tensor::Tensor;
pub use toy::{Benchmark, BenchmarkSpec, NetSpec, ToyNet};
