//! Small f64 neural-network stack: tensors, a tape autodiff graph, the GRU
//! actor-critic policy, Adam and a flat binary checkpoint format.

mod adam;
mod checkpoint;
mod graph;
mod policy;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{leaky_relu, sigmoid, Gradients, Graph, ParamId, ParamStore, Var};
pub use policy::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_graph, gru_cell, gru_graph, squash,
    BatchOutput, BoundPolicy, GruCellParams, GruIds, GruVars, PolicyConfig, PolicyOutput,
    PolicyParams, StepVars, ACTION_EPS, LEAKY_SLOPE,
};
pub use tensor::Tensor2;
