pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod gradcheck;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod preprocess;
pub mod rle;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result, TensorError};

/// Organ classes, in output-channel order.
pub const CLASS_NAMES: [&str; 3] = ["large_bowel", "small_bowel", "stomach"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
