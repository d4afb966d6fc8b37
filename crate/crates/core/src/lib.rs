//! Small-scale GAN training lab for studying how Lipschitz regularization
//! confines the discriminator's output domain and, with it, the loss
//! gradients the discriminator actually sees.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod lipschitz;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
