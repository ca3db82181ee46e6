// mdbook cannot run listings that depend on a workspace crate, so every
// chapter is included here as a module doc and checked by `cargo test --doc`.
// A failing listing reports the module of its chapter.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/architecture.md")]
pub mod architecture {}
#[doc = include_str!("src/aggregation.md")]
pub mod aggregation {}
#[doc = include_str!("src/local-training.md")]
pub mod local_training {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("src/reproducibility.md")]
pub mod reproducibility {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
