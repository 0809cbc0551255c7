pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use checkpoint::TrainedModel;
pub use error::{Error, Result};
pub use tensor::{concat_rows, grad_check, grad_check_detailed, grad_check_many, GradCheckStats, Gradients, Tape, Tensor, Var};
