//! Real-data ingestion: IDX files, PCA and k-means starts.

pub mod idx;
pub mod kmeans;
pub mod pca;

pub use idx::{parse_idx, read_idx_file, write_idx, IdxTensor, IdxType};
pub use kmeans::{kmeans, kmeans_init, KMeansFit};
pub use pca::PcaModel;
