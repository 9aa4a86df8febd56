pub mod autodiff;
pub mod cloud;
pub mod codec;
pub mod error;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod rd;
pub mod seed;
pub mod tensor;
pub mod training;

pub use cloud::PointCloud;
pub use error::{Error, Result};
