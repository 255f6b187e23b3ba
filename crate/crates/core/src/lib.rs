pub mod assignment;
pub mod backbone;
pub mod bbox;
pub mod cli;
pub mod dataeval;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod head;
mod layers;
pub mod ndgrad;
pub mod params;
pub mod qgn;

pub use bbox::Bbox;
pub use error::{Error, Result};
