//! Dataset ingestion: interaction logs and per-entity feature tables.

mod features;
mod interactions;

pub use features::{
    concat_features, mask_features, normalize_per_feature, EncodedFeatures, FeatureField,
    FeatureKind, FeatureMatrix, FeatureSchema, FeatureTable, ImputePolicy, RawValue,
};
pub use interactions::{load_interactions, DelimiterConfig, Event, IdSpace, InteractionLog};
