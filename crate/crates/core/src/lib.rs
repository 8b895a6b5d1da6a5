//! Semantic model inspection.
//!
//! Every component of an inspected network (a neuron, channel or head) is
//! represented by the mean foundation-model embedding of its most activating
//! input crops. Over that representation this crate provides:
//!
//! * [`store`]: the immutable on-disk LensDB format;
//! * [`query`]: concept search, labelling, dissection, set comparison and
//!   2-D projection;
//! * [`metrics`]: clarity, similarity, redundancy and polysemanticity;
//! * [`audit`]: valid/spurious alignment audits, labelling faithfulness,
//!   output separability and attribution graphs;
//! * [`fixtures`]: seeded synthetic databases with known ground truth.

pub mod audit;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod probe;
pub mod query;
pub mod report;
pub mod store;
pub mod vector;

pub use audit::{
    audit, build_attribution_graph, label_faithfulness_phi, relevance_filter, separability_auc,
    AuditOptions, AuditReport, Bucket,
};
pub use error::{LensError, Result};
pub use metrics::{clarity, polysemanticity, redundancy, spherical_kmeans};
pub use probe::{Concept, ProbeSet, Validity};
pub use query::{
    cluster_labels, compare_sets, dissect, label_components, project_2d, search, GroupBy,
    LayerFilter, DEFAULT_TAU,
};
pub use store::{load, export, ComponentRecord, LayerData, LayerDecl, LensDb, Manifest};
pub use vector::{
    alignment, cosine_similarity, mean_embedding, ComponentId, ComponentKey, EmbeddingMatrix,
    EmbeddingView, Sign, Vector,
};
