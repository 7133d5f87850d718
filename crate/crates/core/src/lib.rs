//! Temporal point-process models of how statements are added to knowledge
//! items and later refuted or verified.
//!
//! Each item's statement additions follow an intensity made of an intrinsic
//! basis mixture plus the triggered effect of past evaluations; each
//! statement's evaluation delay follows a survival hazard made of the item's
//! intrinsic term plus its source's trustworthiness. The crate simulates such
//! traces, fits the parameters by decomposed convex maximum likelihood and
//! scores prediction tasks built on the fitted model.

pub mod estimator;
pub mod event;
pub mod intensity;
pub mod kernels;
pub mod params;
pub mod prediction;
pub mod quadrature;
pub mod report;
pub mod simulator;
pub mod stats;

pub use event::{
    load_events, load_topics, split_train_test, Dataset, EventError, EventRecord, ItemHistory,
    LoadReport, Polarity, SplitUnit, TopicWeights, TraceSchema,
};
pub use intensity::{total_loglik, IntensityError, LogLikBreakdown, Term};
pub use kernels::{BasisKernel, KernelError, TriggerKernel};
pub use params::{ItemParams, KernelSet, ModelParams, ParamsError, ParamsFile, SourceParams};
