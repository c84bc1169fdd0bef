pub mod checkpoint;
pub mod corpus;
pub mod gptq;
pub mod lgp;
pub mod lgr;
pub mod model;
pub mod neighborhood;
pub mod quant;
pub mod smoothness;
pub mod tensor;
pub mod weightspace;

pub use checkpoint::Checkpoint;
pub use model::{Model, ModelConfig, TokenBatch, TrainSchedule};
pub use quant::{QuantSpec, QuantizedLinear, QuantizedModel};
pub use tensor::{Graph, Real, Tensor, Var};
