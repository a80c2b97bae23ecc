//! Reconstruction and KL terms, the combined dual-path objective and the
//! training loop for the model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Error, Result};
use crate::model::{constants, ControlMode, DualPathCvae, GaussianLatent};
use crate::motion::{Matrix, MotionPair};
use crate::nn::graph::kl_diag_value;
use crate::nn::{adam_update, AdamConfig, AdamState, Graph, ParamStore, Var};

/// Squared L2 norm of `x - x_hat` over every entry.
pub fn mse_recon(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.rows() != x_hat.rows() || x.cols() != x_hat.cols() {
        return Err(structural!(
            "reconstruction shapes differ: {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            x_hat.rows(),
            x_hat.cols()
        ));
    }
    Ok(x.as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gauss(q: &GaussianLatent, p: &GaussianLatent) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(structural!("KL operands have sizes {} and {}", q.dim(), p.dim()));
    }
    Ok(kl_diag_value(&q.mean, &q.log_std, &p.mean, &p.log_std))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_top: f64,
    pub rec_bottom: f64,
    pub kl_top: f64,
    pub kl_bottom: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(rec_top: f64, rec_bottom: f64, kl_top: f64, kl_bottom: f64, lambdas: (f64, f64)) -> Self {
        Self {
            rec_top,
            rec_bottom,
            kl_top,
            kl_bottom,
            total: rec_top + rec_bottom + lambdas.0 * kl_top + lambdas.1 * kl_bottom,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec_top, self.rec_bottom, self.kl_top, self.kl_bottom, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, o: &LossBreakdown) {
        self.rec_top += o.rec_top;
        self.rec_bottom += o.rec_bottom;
        self.kl_top += o.kl_top;
        self.kl_bottom += o.kl_bottom;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.rec_top *= s;
        self.rec_bottom *= s;
        self.kl_top *= s;
        self.kl_bottom *= s;
        self.total *= s;
        self
    }

    /// Unweighted mean over a nonempty list.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.accumulate(it);
        }
        acc.scaled(1.0 / items.len() as f64)
    }
}

/// A past/future training pair as plain frame matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub past: Matrix,
    pub future: Matrix,
}

impl From<&MotionPair> for Example {
    fn from(p: &MotionPair) -> Self {
        Self {
            past: p.past.frames.clone(),
            future: p.future.frames.clone(),
        }
    }
}

/// Reparameterization noise for one example: `(eps_t, eps_b)`.
pub type LatentNoise = (Vec<f64>, Vec<f64>);

pub fn draw_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct SampleTerms {
    rec_top: Var,
    rec_bottom: Var,
    kl_top: Var,
    kl_bottom: Var,
    total: Var,
}

fn sq_error(g: &mut Graph<'_>, pred: &[Var], target: &[Var]) -> Var {
    let errs: Vec<Var> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = g.sub(*p, *t);
            g.sum_sq(d)
        })
        .collect();
    g.add_all(&errs)
}

/// Records one example's objective: the bottom path reads the bottom
/// condition and target, both decoders share the posterior sample of `z_b`.
fn record_example<'a>(model: &'a DualPathCvae, g: &mut Graph<'a>, ex: &Example, noise: &LatentNoise) -> Result<SampleTerms> {
    model.check_past(&ex.past)?;
    model.check_future(&ex.future)?;
    let store = &model.store;
    let cfg = &model.config;
    let (c_b, x_b) = (model.bottom_condition(&ex.past), model.bottom_target(&ex.future)?);

    let c = constants(g, &ex.past);
    let x = constants(g, &ex.future);
    let cb = constants(g, &c_b);
    let xb = constants(g, &x_b);

    let reparam = |g: &mut Graph<'a>, m: Var, s: Var, eps: &[f64]| {
        let e = g.constant(eps.to_vec());
        let sd = g.exp(s);
        let t = g.mul(sd, e);
        g.add(m, t)
    };

    let ctx_t = model.top.context_graph(g, store, &c);
    let (pm_t, ps_t) = model.top.prior_graph(g, store, ctx_t);
    let (qm_t, qs_t) = model.top.posterior_graph(g, store, &c, &x);
    let z_t = reparam(g, qm_t, qs_t, &noise.0);

    let ctx_b = model.bottom.context_graph(g, store, &cb);
    let (pm_b, ps_b) = model.bottom.prior_graph(g, store, ctx_b);
    let (qm_b, qs_b) = model.bottom.posterior_graph(g, store, &cb, &xb);
    let z_b = reparam(g, qm_b, qs_b, &noise.1);

    let last_c = *c.last().expect("past frames");
    let x_hat = model.top.decode_graph(g, store, ctx_t, &[z_t, z_b], last_c, cfg.future_frames);
    let last_cb = *cb.last().expect("past frames");
    let xb_hat = model.bottom.decode_graph(g, store, ctx_b, &[z_b], last_cb, cfg.future_frames);

    let rec_top = sq_error(g, &x_hat, &x);
    let rec_bottom = sq_error(g, &xb_hat, &xb);
    let kl_top = g.kl_diag(qm_t, qs_t, pm_t, ps_t);
    let kl_bottom = g.kl_diag(qm_b, qs_b, pm_b, ps_b);
    let wt = g.scale(kl_top, cfg.lambda_kl_top);
    let wb = g.scale(kl_bottom, cfg.lambda_kl_bottom);
    let total = g.add_all(&[rec_top, rec_bottom, wt, wb]);
    Ok(SampleTerms {
        rec_top,
        rec_bottom,
        kl_top,
        kl_bottom,
        total,
    })
}

fn breakdown(g: &Graph<'_>, t: &SampleTerms) -> LossBreakdown {
    LossBreakdown {
        rec_top: g.scalar(t.rec_top),
        rec_bottom: g.scalar(t.rec_bottom),
        kl_top: g.scalar(t.kl_top),
        kl_bottom: g.scalar(t.kl_bottom),
        total: g.scalar(t.total),
    }
}

fn check_batch(model: &DualPathCvae, batch: &[Example], noise: &[LatentNoise], mode: ControlMode) -> Result<()> {
    if batch.is_empty() {
        return Err(argument!("empty batch"));
    }
    if mode != model.config.mode {
        return Err(argument!(
            "loss requested for {mode:?} but the model is configured for {:?}",
            model.config.mode
        ));
    }
    if noise.len() != batch.len() {
        return Err(structural!("{} noise draws for {} examples", noise.len(), batch.len()));
    }
    let dz = model.config.latent_dim;
    if noise.iter().any(|(t, b)| t.len() != dz || b.len() != dz) {
        return Err(structural!("noise draws must have {dz} entries"));
    }
    Ok(())
}

/// Batch-averaged loss with the given reparameterization noise.
pub fn total_loss(model: &DualPathCvae, batch: &[Example], noise: &[LatentNoise], mode: ControlMode) -> Result<LossBreakdown> {
    check_batch(model, batch, noise, mode)?;
    let items = batch
        .iter()
        .zip(noise)
        .map(|(ex, n)| {
            let mut g = Graph::new();
            let t = record_example(model, &mut g, ex, n)?;
            Ok(breakdown(&g, &t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items))
}

/// Batch-averaged loss and its gradient with respect to the model's parameters.
pub fn loss_and_gradient(
    model: &DualPathCvae,
    batch: &[Example],
    noise: &[LatentNoise],
    mode: ControlMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_batch(model, batch, noise, mode)?;
    let per: Vec<Result<(LossBreakdown, Vec<f64>)>> = batch
        .par_iter()
        .zip(noise.par_iter())
        .map(|(ex, n)| {
            let mut g = Graph::new();
            let t = record_example(model, &mut g, ex, n)?;
            let grads = g.backward(t.total)?;
            Ok((breakdown(&g, &t), grads.for_store(&g, &model.store)))
        })
        .collect();
    let (items, grad) = reduce_gradients(per, model.store.len())?;
    Ok((LossBreakdown::mean(&items), grad))
}

/// Sums per-example gradients in index order and averages them.
pub(crate) fn reduce_gradients<L>(per: Vec<Result<(L, Vec<f64>)>>, len: usize) -> Result<(Vec<L>, Vec<f64>)> {
    let n = per.len() as f64;
    let mut grad = vec![0.0; len];
    let mut losses = Vec::with_capacity(per.len());
    for item in per {
        let (l, g) = item?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        losses.push(l);
    }
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((losses, grad))
}

/// Optimizer schedule shared by the training loops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Per-epoch generator, independent of how many epochs ran before it.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Applies averaged gradients with Adam, then rounds parameters and moments to
/// f32 so a saved checkpoint resumes exactly.
pub fn apply_update(store: &mut ParamStore, opt: &mut AdamState, grad: &[f64], adam: &AdamConfig) -> Result<()> {
    store.set_grads(grad)?;
    adam_update(store, opt, adam);
    store.quantize_f32();
    opt.quantize_f32();
    if !store.all_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(())
}

/// Shuffled minibatch index lists for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Trains epochs `start_epoch..schedule.epochs`, calling `on_epoch` after
/// each with the epoch number (1-based) and the epoch's mean loss.
pub fn train_model<F>(
    model: &mut DualPathCvae,
    opt: &mut AdamState,
    data: &[Example],
    schedule: &TrainSchedule,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<LossBreakdown>>
where
    F: FnMut(usize, &LossBreakdown, &DualPathCvae, &AdamState) -> Result<()>,
{
    if data.is_empty() {
        return Err(argument!("no training examples"));
    }
    if opt.m.len() != model.store.len() {
        return Err(structural!("optimizer state does not match the model"));
    }
    let mode = model.config.mode;
    let dz = model.config.latent_dim;
    let mut log = Vec::new();
    for epoch in start_epoch..schedule.epochs {
        let mut rng = epoch_rng(schedule.seed, epoch);
        let mut seen = Vec::with_capacity(data.len());
        for idx in epoch_batches(data.len(), schedule.batch_size, &mut rng) {
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let noise: Vec<LatentNoise> = batch
                .iter()
                .map(|_| (draw_noise(dz, &mut rng), draw_noise(dz, &mut rng)))
                .collect();
            let (loss, grad) = loss_and_gradient(model, &batch, &noise, mode)?;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            apply_update(&mut model.store, opt, &grad, &schedule.adam)?;
            seen.extend(std::iter::repeat_n(loss, idx.len()));
        }
        let mean = LossBreakdown::mean(&seen);
        on_epoch(epoch + 1, &mean, model, opt)?;
        log.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0]]).unwrap();
        assert_eq!(mse_recon(&a, &b).unwrap(), 4.0);
        assert_eq!(mse_recon(&a, &a).unwrap(), 0.0);
        assert!(mse_recon(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn kl_cases() {
        let q = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
        let p = GaussianLatent::standard(1);
        assert_eq!(kl_diag_gauss(&p, &p).unwrap(), 0.0);
        assert!((kl_diag_gauss(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        let wide = GaussianLatent::new(vec![0.0], vec![2f64.ln()]).unwrap();
        let expected = -(2f64.ln()) + 2.0 - 0.5;
        assert!((kl_diag_gauss(&wide, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn breakdown_weights() {
        let b = LossBreakdown::combine(1.0, 2.0, 10.0, 20.0, (0.1, 0.1));
        assert!((b.total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn epoch_rng_is_independent_of_history() {
        let a: u64 = epoch_rng(7, 3).random();
        let b: u64 = epoch_rng(7, 3).random();
        let c: u64 = epoch_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
