//! Pose-validity prior: a normalizing flow over limb directions built from
//! invertible fully-connected layers `PReLU(Q R v + b)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{argument, structural, Error, Result};
use crate::motion::{Matrix, Skeleton};
use crate::nn::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::graph::{limb_directions_value, reflect, upper_tri_apply, MIN_BONE_LENGTH};
use crate::nn::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Var};
use crate::objectives::{apply_update, epoch_batches, epoch_rng, reduce_gradients};

pub const POSE_PRIOR_ARTIFACT: &str = "pose_prior";
pub const FLOW_LAYERS: usize = 3;

/// Unit parent-to-joint directions, root block zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LimbDirectionPose {
    pub dirs: Vec<f64>,
    /// Set when some bone was shorter than the degeneracy threshold and was
    /// replaced by `(0, 0, 1)`.
    pub degenerate: bool,
}

pub fn limb_directions(pose: &[f64], skeleton: &Skeleton) -> Result<LimbDirectionPose> {
    if pose.len() != skeleton.dim() {
        return Err(structural!("pose has {} values, skeleton needs {}", pose.len(), skeleton.dim()));
    }
    let (dirs, norms) = limb_directions_value(pose, skeleton.parents());
    let degenerate = skeleton
        .parents()
        .iter()
        .zip(&norms)
        .any(|(p, n)| *p >= 0 && *n < MIN_BONE_LENGTH);
    Ok(LimbDirectionPose { dirs, degenerate })
}

/// One `PReLU(Q R v + b)` layer: `Q` a product of Householder reflections,
/// `R` upper triangular with diagonal `exp(log_diag)`, one shared slope.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertibleFcLayer {
    pub dim: usize,
    pub q: ParamId,
    pub r: ParamId,
    pub log_diag: ParamId,
    pub bias: ParamId,
    pub log_slope: ParamId,
}

impl InvertibleFcLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(argument!("flow layer needs a positive dimension"));
        }
        let q = store.add_uniform(&format!("{name}.q"), &[dim, dim], 1.0, rng)?;
        let r = store.add_zeros(&format!("{name}.r"), &[dim * (dim - 1) / 2])?;
        let log_diag = store.add_zeros(&format!("{name}.log_diag"), &[dim])?;
        let bias = store.add_zeros(&format!("{name}.bias"), &[dim])?;
        let log_slope = store.add_zeros(&format!("{name}.log_slope"), &[1])?;
        Ok(Self {
            dim,
            q,
            r,
            log_diag,
            bias,
            log_slope,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        let find = |suffix: &str, len: usize| -> Result<ParamId> {
            let key = format!("{name}.{suffix}");
            let id = store
                .id(&key)
                .ok_or_else(|| structural!("checkpoint lacks parameter {key:?}"))?;
            if store.entry(id).len != len {
                return Err(structural!("parameter {key:?} has the wrong size"));
            }
            Ok(id)
        };
        Ok(Self {
            dim,
            q: find("q", dim * dim)?,
            r: find("r", dim * (dim - 1) / 2)?,
            log_diag: find("log_diag", dim)?,
            bias: find("bias", dim)?,
            log_slope: find("log_slope", 1)?,
        })
    }

    /// Records the layer; returns the output and its log-determinant term.
    pub fn forward_graph<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> (Var, Var) {
        let rx = g.upper_tri(store, self.r, self.log_diag, x);
        let qrx = g.householder(store, self.q, rx);
        let b = g.param(store, self.bias);
        let pre = g.add(qrx, b);
        let negatives = g.count_negative(pre) as f64;
        let out = g.prelu(pre, store, self.log_slope);
        let ld = g.param(store, self.log_diag);
        let diag_sum = g.sum(ld);
        let slope = g.param(store, self.log_slope);
        let slope_term = g.scale(slope, negatives);
        let log_det = g.add(diag_sum, slope_term);
        (out, log_det)
    }

    pub fn slope(&self, store: &ParamStore) -> f64 {
        store.get(self.log_slope)[0].exp()
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, f64) {
        let mut v = upper_tri_apply(store.get(self.r), store.get(self.log_diag), x);
        let u = store.get(self.q);
        for k in (0..self.dim).rev() {
            reflect(&u[k * self.dim..(k + 1) * self.dim], &mut v);
        }
        let slope = self.slope(store);
        let log_slope = store.get(self.log_slope)[0];
        let mut log_det: f64 = store.get(self.log_diag).iter().sum();
        for (vi, bi) in v.iter_mut().zip(store.get(self.bias)) {
            *vi += bi;
            if *vi < 0.0 {
                *vi *= slope;
                log_det += log_slope;
            }
        }
        (v, log_det)
    }

    pub fn inverse(&self, store: &ParamStore, o: &[f64]) -> Vec<f64> {
        let slope = self.slope(store);
        let mut v: Vec<f64> = o
            .iter()
            .zip(store.get(self.bias))
            .map(|(oi, bi)| if *oi < 0.0 { oi / slope } else { *oi } - bi)
            .collect();
        let u = store.get(self.q);
        for k in 0..self.dim {
            reflect(&u[k * self.dim..(k + 1) * self.dim], &mut v);
        }
        // back substitution through R
        let (r, ld) = (store.get(self.r), store.get(self.log_diag));
        let d = self.dim;
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let start = i * (d - 1) - i * (i.saturating_sub(1)) / 2;
            let mut acc = v[i];
            for j in i + 1..d {
                acc -= r[start + (j - i - 1)] * x[j];
            }
            x[i] = acc / ld[i].exp();
        }
        x
    }

    /// Dense `Q` (row-major).
    pub fn q_matrix(&self, store: &ParamStore) -> Vec<f64> {
        let d = self.dim;
        let u = store.get(self.q);
        let mut out = vec![0.0; d * d];
        for c in 0..d {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            for k in (0..d).rev() {
                reflect(&u[k * d..(k + 1) * d], &mut e);
            }
            for r in 0..d {
                out[r * d + c] = e[r];
            }
        }
        out
    }
}

/// Stack of invertible layers over `dim`-vectors with a standard-normal base.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub dim: usize,
    pub store: ParamStore,
    pub layers: Vec<InvertibleFcLayer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FlowShape {
    dim: usize,
    layers: usize,
}

impl FlowModel {
    pub fn new(dim: usize, layers: usize, seed: u64) -> Result<Self> {
        if layers == 0 {
            return Err(argument!("flow needs at least one layer"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|i| InvertibleFcLayer::new(&mut store, &format!("flow{i}"), dim, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { dim, store, layers })
    }

    /// All parameters zero: `Q = R = I`, `b = 0`, slope 1.
    pub fn identity(dim: usize, layers: usize) -> Result<Self> {
        let mut f = Self::new(dim, layers, 0)?;
        f.store.values_mut().fill(0.0);
        Ok(f)
    }

    pub fn from_store(dim: usize, layers: usize, store: ParamStore) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| InvertibleFcLayer::bind(&store, &format!("flow{i}"), dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, store, layers })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_artifact(POSE_PRIOR_ARTIFACT)?;
        let shape: FlowShape = ck.extra_field("flow")?;
        Self::from_store(shape.dim, shape.layers, ck.store.clone())
    }

    pub fn save(&self, dir: &Path, optimizer: Option<&AdamState>, mut extra: Map<String, Value>) -> Result<()> {
        let shape = FlowShape {
            dim: self.dim,
            layers: self.layers.len(),
        };
        extra.insert("flow".into(), serde_json::to_value(shape).expect("shape serializes"));
        save_checkpoint(dir, POSE_PRIOR_ARTIFACT, &self.store, optimizer, extra)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(structural!("flow input has {} values, expected {}", x.len(), self.dim));
        }
        Ok(())
    }

    /// `(f(x), log|det ∂f/∂x|)`.
    pub fn flow_forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(x)?;
        let mut v = x.to_vec();
        let mut log_det = 0.0;
        for l in &self.layers {
            let (o, ld) = l.forward(&self.store, &v);
            v = o;
            log_det += ld;
        }
        Ok((v, log_det))
    }

    pub fn flow_inverse(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.check(o)?;
        let mut v = o.to_vec();
        for l in self.layers.iter().rev() {
            v = l.inverse(&self.store, &v);
        }
        Ok(v)
    }

    /// `(d/2) log 2π + ‖f(x)‖²/2 − log_det`.
    pub fn flow_nll(&self, x: &[f64]) -> Result<f64> {
        let (o, log_det) = self.flow_forward(x)?;
        Ok(nll_from(&o, log_det))
    }

    /// Records the NLL of `x` in `g`.
    pub fn nll_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Var {
        let mut v = x;
        let mut terms = Vec::with_capacity(self.layers.len() + 1);
        for l in &self.layers {
            let (o, ld) = l.forward_graph(g, &self.store, v);
            v = o;
            terms.push(ld);
        }
        let sq = g.sum_sq(v);
        let half_sq = g.scale(sq, 0.5);
        let log_det = g.add_all(&terms);
        let nll = g.sub(half_sq, log_det);
        g.offset(nll, 0.5 * self.dim as f64 * (2.0 * PI).ln())
    }
}

fn nll_from(o: &[f64], log_det: f64) -> f64 {
    0.5 * o.len() as f64 * (2.0 * PI).ln() + 0.5 * o.iter().map(|v| v * v).sum::<f64>() - log_det
}

/// Mean flow NLL over the limb directions of every frame of every sequence.
pub fn validity_objective(flow: &FlowModel, sequences: &[Matrix], skeleton: &Skeleton) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        for row in seq.iter_rows() {
            let dirs = limb_directions(row, skeleton)?;
            total += flow.flow_nll(&dirs.dirs)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(argument!("no poses to score"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Std of Gaussian noise added to each training direction vector per step.
    pub dequantization_std: f64,
    pub seed: u64,
}

/// Limb directions of every `stride`-th frame of the given sequences.
pub fn pose_set<'m>(sequences: impl IntoIterator<Item = &'m Matrix>, skeleton: &Skeleton, stride: usize) -> Result<Vec<Vec<f64>>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for seq in sequences {
        for row in seq.iter_rows().step_by(stride) {
            out.push(limb_directions(row, skeleton)?.dirs);
        }
    }
    Ok(out)
}

/// Mean NLL and gradient over a batch of direction vectors.
pub fn nll_and_gradient(flow: &FlowModel, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(argument!("empty batch"));
    }
    let per: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|x| {
            flow.check(x)?;
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let nll = flow.nll_graph(&mut g, v);
            let grads = g.backward(nll)?;
            Ok((g.scalar(nll), grads.for_store(&g, &flow.store)))
        })
        .collect();
    let (losses, grad) = reduce_gradients(per, flow.store.len())?;
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, grad))
}

/// Fits the flow by maximum likelihood; `on_epoch` receives the 1-based
/// epoch and that epoch's mean training NLL.
pub fn train_flow<F>(
    flow: &mut FlowModel,
    opt: &mut AdamState,
    poses: &[Vec<f64>],
    cfg: &FlowTrainConfig,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &FlowModel, &AdamState) -> Result<()>,
{
    if poses.is_empty() {
        return Err(argument!("no poses to fit"));
    }
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sum = 0.0;
        for idx in epoch_batches(poses.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    poses[i]
                        .iter()
                        .map(|v| v + cfg.dequantization_std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let (nll, grad) = nll_and_gradient(flow, &batch)?;
            if !nll.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite flow loss in epoch {}", epoch + 1)));
            }
            apply_update(&mut flow.store, opt, &grad, &cfg.adam)?;
            sum += nll * idx.len() as f64;
        }
        let mean = sum / poses.len() as f64;
        on_epoch(epoch + 1, mean, flow, opt)?;
        log.push(mean);
    }
    Ok(log)
}
