//! Schema, ingestion, item splits, warm-up phases, tasks and synthetic data.

pub mod schema;
pub mod split;
pub mod synth;
pub mod table;
pub mod task;

pub use schema::{FeatureDecl, FeatureKind, FeatureSchema, Owner};
pub use split::{build_phases, split_items, ItemPhases, ItemSplit, PhasePlan};
pub use synth::{synth_generate, LabelRule, PairRegistry, SynthConfig};
pub use table::{FeatureValue, InteractionTable, LoadOptions, RawInteraction};
pub use task::{sample_task, Task};
