use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Prelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcLayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCellSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCellSpec {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self { input_dim, hidden_dim }
    }
}

/// Glorot-uniform bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Initial PReLU slope.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Fully-connected layer `activation(W x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer {
    pub spec: FcLayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
    pub log_slope: Option<ParamId>,
}

impl FcLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: FcLayerSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(argument!("fully-connected layer {name:?} needs positive dimensions"));
        }
        let bound = glorot_bound(spec.input_dim, spec.output_dim);
        let weight = store.add_uniform(&format!("{name}.weight"), &[spec.output_dim, spec.input_dim], bound, rng)?;
        let bias = store.add_zeros(&format!("{name}.bias"), &[spec.output_dim])?;
        let log_slope = match spec.activation {
            Activation::Prelu => Some(store.add(
                &format!("{name}.log_slope"),
                &[1],
                vec![(PRELU_INIT_SLOPE.ln() as f32) as f64],
            )?),
            _ => None,
        };
        Ok(Self {
            spec,
            weight,
            bias,
            log_slope,
        })
    }

    /// Rebinds to an existing store laid out by [`FcLayer::new`].
    pub fn bind(store: &ParamStore, name: &str, spec: FcLayerSpec) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"), &[spec.output_dim, spec.input_dim])?;
        let bias = lookup(store, &format!("{name}.bias"), &[spec.output_dim])?;
        let log_slope = match spec.activation {
            Activation::Prelu => Some(lookup(store, &format!("{name}.log_slope"), &[1])?),
            _ => None,
        };
        Ok(Self {
            spec,
            weight,
            bias,
            log_slope,
        })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let y = g.affine(store, self.weight, Some(self.bias), x);
        match self.spec.activation {
            Activation::Identity => y,
            Activation::Tanh => g.tanh(y),
            Activation::Prelu => g.prelu(y, store, self.log_slope.expect("prelu layer has a slope")),
        }
    }
}

/// Gated recurrent cell with weights `[3H, in]`, `[3H, H]` and two `[3H]` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub spec: GruCellSpec,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: GruCellSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden_dim == 0 {
            return Err(argument!("GRU cell {name:?} needs positive dimensions"));
        }
        let h3 = 3 * spec.hidden_dim;
        let w_ih = store.add_uniform(
            &format!("{name}.w_ih"),
            &[h3, spec.input_dim],
            glorot_bound(spec.input_dim, spec.hidden_dim),
            rng,
        )?;
        let w_hh = store.add_uniform(
            &format!("{name}.w_hh"),
            &[h3, spec.hidden_dim],
            glorot_bound(spec.hidden_dim, spec.hidden_dim),
            rng,
        )?;
        let b_ih = store.add_zeros(&format!("{name}.b_ih"), &[h3])?;
        let b_hh = store.add_zeros(&format!("{name}.b_hh"), &[h3])?;
        Ok(Self {
            spec,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, spec: GruCellSpec) -> Result<Self> {
        let h3 = 3 * spec.hidden_dim;
        Ok(Self {
            spec,
            w_ih: lookup(store, &format!("{name}.w_ih"), &[h3, spec.input_dim])?,
            w_hh: lookup(store, &format!("{name}.w_hh"), &[h3, spec.hidden_dim])?,
            b_ih: lookup(store, &format!("{name}.b_ih"), &[h3])?,
            b_hh: lookup(store, &format!("{name}.b_hh"), &[h3])?,
        })
    }

    pub fn step<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, h: Var) -> Var {
        g.gru(store, self.w_ih, self.w_hh, self.b_ih, self.b_hh, x, h)
    }

    /// Runs the cell over `frames` in order from a zero state; returns the final state.
    pub fn run<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, frames: &[Var]) -> Var {
        let mut h = g.constant(vec![0.0; self.spec.hidden_dim]);
        for &x in frames {
            h = self.step(g, store, x, h);
        }
        h
    }
}

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| structural!("checkpoint lacks parameter {name:?}"))?;
    if store.entry(id).shape != shape {
        return Err(structural!(
            "parameter {name:?} has shape {:?}, expected {shape:?}",
            store.entry(id).shape
        ));
    }
    Ok(id)
}

/// Evaluates one fully-connected layer on a plain vector.
pub fn fc_forward(store: &ParamStore, layer: &FcLayer, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != layer.spec.input_dim {
        return Err(structural!(
            "layer expects input of length {}, got {}",
            layer.spec.input_dim,
            input.len()
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(input.to_vec());
    let y = layer.forward(&mut g, store, x);
    Ok(g.value(y).to_vec())
}

/// Evaluates one GRU step on plain vectors.
pub fn gru_step(store: &ParamStore, cell: &GruCell, input: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
    if input.len() != cell.spec.input_dim || hidden.len() != cell.spec.hidden_dim {
        return Err(structural!(
            "GRU cell expects input {} and hidden {}, got {} and {}",
            cell.spec.input_dim,
            cell.spec.hidden_dim,
            input.len(),
            hidden.len()
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(input.to_vec());
    let h = g.constant(hidden.to_vec());
    let y = cell.step(&mut g, store, x, h);
    Ok(g.value(y).to_vec())
}
