//! Document-level neural machine translation with discourse-path
//! embeddings and hierarchical context attention.

pub mod checkpoint;
pub mod datapipe;
pub mod discourse;
pub mod han;
pub mod metrics;
pub mod model;
pub mod nnet;
pub mod path_encoder;
pub mod tensor;
pub mod training;
