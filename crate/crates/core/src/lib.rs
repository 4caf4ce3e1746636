pub mod attnmat;
pub mod error;
pub mod evalrep;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod par;
pub mod retrieval;
pub mod tensor;
pub mod textprep;
pub mod trainer;
pub mod xresource;

pub use error::{Error, Result};
