pub mod dealer;
pub mod engine;
pub mod error;
pub mod ideal;
pub mod kvcache;
pub mod model;
pub mod perm;
pub mod predictor;
pub mod protocols;
pub mod ring;
pub mod scenario;
pub mod sharing;
pub mod sparse;
pub mod transport;

pub use error::{Error, Result};
