pub mod adapt;
pub mod bench;
pub mod error;
pub mod filter;
pub mod network;
pub mod par;
pub mod pca;
pub mod ridge;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
