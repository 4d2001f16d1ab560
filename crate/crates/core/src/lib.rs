//! Burst-aware VLAD aggregation of local image features.
//!
//! The crate covers the whole offline pipeline around the aggregation layer:
//!
//! - [`featureio`]: VBFF matrix files, row normalization, stratified sampling
//! - [`vocabulary`]: k-means centroids and hard assignment
//! - [`projection`]: PCA / random pre-pool projection and PCA whitening
//! - [`aggregation`]: soft assignment, soft counts, residual pooling
//! - [`training`]: triplet loss, analytic gradients, gradient descent
//! - [`retrieval`]: manifests, exhaustive ranking, Recall@K, synthetic data
//! - [`bench`]: aggregation timing across projection sizes
//! - [`bundle`] and [`config`]: on-disk model bundles and pipeline settings

pub mod aggregation;
pub mod bench;
pub mod bundle;
pub mod config;
pub mod error;
pub mod featureio;
pub mod linalg;
pub mod pipeline;
pub mod projection;
pub mod retrieval;
pub mod rng;
pub mod training;
pub mod vocabulary;

pub use aggregation::{aggregate, AggregationModel, AssignmentParams, BurstParams};
pub use bundle::{load_bundle, save_bundle};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use featureio::{GlobalDescriptor, LocalFeatureSet};
pub use projection::{PcaModel, WhiteningModel};
pub use retrieval::DatasetManifest;
pub use vocabulary::Vocabulary;
