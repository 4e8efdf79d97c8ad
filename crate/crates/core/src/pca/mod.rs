//! PCA node embeddings: the symmetric eigensolver, projection fitting over
//! day profiles, and per-day / averaged / refreshed embedding tables.

pub mod eigen;
pub mod embedding;
pub mod projection;

pub use eigen::{sym_eig, SymEigen};
pub use embedding::{
    average_embeddings, embed_days, refresh_embedding, EmbeddingSource, EmbeddingStrategy,
    EmbeddingTable,
};
pub use projection::{
    day_profiles, fit_projection, fit_projection_on_samples, select_component_count,
    ComponentSpec, PcaProjection,
};
