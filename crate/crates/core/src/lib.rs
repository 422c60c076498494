//! Semi-supervised semantic segmentation with a structured consistency loss,
//! at desk scale and fully deterministic.

pub mod autodiff;
pub mod checkpoint;
pub mod cutmix;
pub mod ema;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod run;
pub mod synthdata;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};
