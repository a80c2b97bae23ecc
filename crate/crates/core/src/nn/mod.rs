//! Differentiable building blocks: parameter storage, the recorded graph,
//! fully-connected and GRU layers, Adam, and checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Gradients, Graph, Var};
pub use layers::{fc_forward, gru_step, Activation, FcLayer, FcLayerSpec, GruCell, GruCellSpec};
pub use params::{ParamId, ParamStore};
