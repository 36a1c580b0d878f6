pub mod certificates;
pub mod dynamics;
pub mod error;
pub mod field;
mod fragment;
pub mod growth;
pub mod parallel;
pub mod quad;
pub mod transport;
pub mod vlasov;
pub mod yudovich;

pub use error::{Result, VpyError};
