//! Post-hoc diversity sampler: a condition encoder emits `K` elementwise
//! affine maps `z^k = A^k ⊙ ε + b^k` applied to one shared noise draw.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{argument, structural, Error, Result};
use crate::flow::FlowModel;
use crate::model::{constants, DualPathCvae, GaussianLatent};
use crate::motion::{Matrix, Skeleton};
use crate::nn::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::graph::kl_diag_value;
use crate::nn::{Activation, AdamState, FcLayer, FcLayerSpec, Graph, GruCell, GruCellSpec, ParamStore, Var};
use crate::objectives::{apply_update, draw_noise, epoch_batches, epoch_rng, reduce_gradients, Example, TrainSchedule};

pub const SAMPLER_ARTIFACT: &str = "sampler";
/// Floor on `|A|` when it is read as a standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub k: usize,
    pub condition_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

/// One `(A^k, b^k)` pair.
pub type AffineHead = (Vec<f64>, Vec<f64>);

#[derive(Clone, Debug)]
pub struct SamplerHeads {
    pub spec: SamplerSpec,
    pub store: ParamStore,
    encoder: GruCell,
    head: FcLayer,
}

impl SamplerHeads {
    /// Fresh sampler; head biases start at `A = 1`, `b = 0`.
    pub fn new(spec: SamplerSpec, seed: u64) -> Result<Self> {
        if spec.k < 2 {
            return Err(argument!("the sampler needs K >= 2 heads"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GruCell::new(
            &mut store,
            "sampler.encoder",
            GruCellSpec::new(spec.condition_dim, spec.hidden_dim),
            &mut rng,
        )?;
        let head = FcLayer::new(&mut store, "sampler.head", Self::head_spec(&spec), &mut rng)?;
        let d = spec.latent_dim;
        let bias = store.get_mut(head.bias);
        for k in 0..spec.k {
            bias[2 * k * d..(2 * k + 1) * d].fill(1.0);
        }
        Ok(Self {
            spec,
            store,
            encoder,
            head,
        })
    }

    fn head_spec(spec: &SamplerSpec) -> FcLayerSpec {
        FcLayerSpec {
            input_dim: spec.hidden_dim,
            output_dim: 2 * spec.k * spec.latent_dim,
            activation: Activation::Identity,
        }
    }

    pub fn from_store(spec: SamplerSpec, store: ParamStore) -> Result<Self> {
        if spec.k < 2 {
            return Err(argument!("the sampler needs K >= 2 heads"));
        }
        let encoder = GruCell::bind(
            &store,
            "sampler.encoder",
            GruCellSpec::new(spec.condition_dim, spec.hidden_dim),
        )?;
        let head = FcLayer::bind(&store, "sampler.head", Self::head_spec(&spec))?;
        Ok(Self {
            spec,
            store,
            encoder,
            head,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_artifact(SAMPLER_ARTIFACT)?;
        Self::from_store(ck.extra_field("sampler")?, ck.store.clone())
    }

    pub fn save(&self, dir: &Path, optimizer: Option<&AdamState>, mut extra: Map<String, Value>) -> Result<()> {
        extra.insert("sampler".into(), serde_json::to_value(self.spec).expect("spec serializes"));
        save_checkpoint(dir, SAMPLER_ARTIFACT, &self.store, optimizer, extra)
    }

    fn check_condition(&self, c: &Matrix) -> Result<()> {
        if c.cols() != self.spec.condition_dim || c.rows() == 0 {
            return Err(structural!(
                "sampler condition is {}x{}, expected {} columns",
                c.rows(),
                c.cols(),
                self.spec.condition_dim
            ));
        }
        Ok(())
    }

    /// Records `(A^k, b^k)` for every head.
    pub fn heads_graph<'a>(&'a self, g: &mut Graph<'a>, c: &[Var]) -> Vec<(Var, Var)> {
        let h = self.encoder.run(g, &self.store, c);
        let out = self.head.forward(g, &self.store, h);
        let d = self.spec.latent_dim;
        (0..self.spec.k)
            .map(|k| (g.slice(out, 2 * k * d, d), g.slice(out, (2 * k + 1) * d, d)))
            .collect()
    }

    pub fn heads(&self, c: &Matrix) -> Result<Vec<AffineHead>> {
        self.check_condition(c)?;
        let mut g = Graph::new();
        let cf = constants(&mut g, c);
        let hs = self.heads_graph(&mut g, &cf);
        Ok(hs.iter().map(|(a, b)| (g.value(*a).to_vec(), g.value(*b).to_vec())).collect())
    }

    /// `z^k = A^k ⊙ eps + b^k` for every head.
    pub fn map_noise(&self, c: &Matrix, eps: &[f64]) -> Result<Vec<Vec<f64>>> {
        if eps.len() != self.spec.latent_dim {
            return Err(structural!("noise has {} entries, latent has {}", eps.len(), self.spec.latent_dim));
        }
        Ok(self.heads(c)?.iter().map(|(a, b)| apply_head(a, b, eps)).collect())
    }
}

pub fn apply_head(a: &[f64], b: &[f64], eps: &[f64]) -> Vec<f64> {
    a.iter().zip(b).zip(eps).map(|((a, b), e)| a * e + b).collect()
}

/// `Σ_k KL(N(b^k, max(|A^k|, floor)²) || prior)`.
pub fn sampler_kl(heads: &[AffineHead], prior: &GaussianLatent) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in heads {
        if a.len() != prior.dim() || b.len() != prior.dim() {
            return Err(structural!("head size differs from the prior's {}", prior.dim()));
        }
        let ls: Vec<f64> = a.iter().map(|v| v.abs().max(STD_FLOOR).ln()).collect();
        total += kl_diag_value(b, &ls, &prior.mean, &prior.log_std);
    }
    Ok(total)
}

fn flat_columns(seq: &Matrix, columns: Option<&[usize]>) -> Vec<f64> {
    match columns {
        Some(c) => seq.select_columns(c).into_vec(),
        None => seq.as_slice().to_vec(),
    }
}

pub(crate) fn check_sequences(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<()> {
    if sequences.len() < 2 {
        return Err(argument!("need at least two sequences, got {}", sequences.len()));
    }
    let (r, c) = (sequences[0].rows(), sequences[0].cols());
    if sequences.iter().any(|s| s.rows() != r || s.cols() != c) {
        return Err(structural!("sequences differ in shape"));
    }
    if let Some(cols) = columns {
        if cols.iter().any(|&i| i >= c) {
            return Err(structural!("column index out of range for width {c}"));
        }
    }
    Ok(())
}

/// Squared distances `‖x^i − x^j‖²` for `i < j` over the selected columns, in
/// lexicographic pair order.
pub fn pairwise_sq_distances(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<Vec<f64>> {
    check_sequences(sequences, columns)?;
    let flat: Vec<Vec<f64>> = sequences.iter().map(|s| flat_columns(s, columns)).collect();
    let mut out = Vec::with_capacity(flat.len() * (flat.len() - 1) / 2);
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            out.push(flat[i].iter().zip(&flat[j]).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(out)
}

/// `min_{i≠j} ‖x^i − x^j‖²` over the selected columns.
pub fn min_pairwise_diversity(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<f64> {
    Ok(pairwise_sq_distances(sequences, columns)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerLossWeights {
    pub lambda_kl: f64,
    pub lambda_div: f64,
    pub lambda_vli: f64,
    pub div_clip: (f64, f64),
}

impl Default for SamplerLossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 1.0,
            lambda_div: 0.7,
            lambda_vli: 0.7,
            div_clip: (0.0, 160.0),
        }
    }
}

impl SamplerLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_div >= 0.0 && self.lambda_vli >= 0.0) {
            return Err(argument!("sampler loss weights must be nonnegative"));
        }
        if !(self.div_clip.0 <= self.div_clip.1) {
            return Err(argument!("diversity clip interval is empty"));
        }
        Ok(())
    }

    pub fn clip(&self, div: f64) -> f64 {
        div.clamp(self.div_clip.0, self.div_clip.1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerLoss {
    pub total: f64,
    pub kl: f64,
    pub div_raw: f64,
    pub div_clipped: f64,
    pub vli: f64,
}

impl SamplerLoss {
    pub fn mean(items: &[SamplerLoss]) -> SamplerLoss {
        let n = items.len() as f64;
        let mut m = SamplerLoss::default();
        for it in items {
            m.total += it.total / n;
            m.kl += it.kl / n;
            m.div_raw += it.div_raw / n;
            m.div_clipped += it.div_clipped / n;
            m.vli += it.vli / n;
        }
        m
    }

    fn is_finite(&self) -> bool {
        [self.total, self.kl, self.div_raw, self.div_clipped, self.vli]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Frozen artifacts the sampler objective decodes and scores through.
#[derive(Clone, Copy)]
pub struct SamplerTarget<'m> {
    pub model: &'m DualPathCvae,
    pub flow: Option<&'m FlowModel>,
    pub skeleton: &'m Skeleton,
}

impl SamplerTarget<'_> {
    fn check(&self, heads: &SamplerHeads, weights: &SamplerLossWeights) -> Result<()> {
        weights.validate()?;
        let cfg = &self.model.config;
        if heads.spec.latent_dim != cfg.latent_dim || heads.spec.condition_dim != cfg.pose_dim() {
            return Err(structural!("sampler does not match the model's latent or pose size"));
        }
        if self.skeleton.dim() != cfg.pose_dim() {
            return Err(structural!("skeleton does not match the model's pose size"));
        }
        match self.flow {
            Some(f) if f.dim != cfg.pose_dim() => Err(structural!("pose prior does not match the pose size")),
            None if weights.lambda_vli > 0.0 => Err(argument!("a validity weight needs a pose prior")),
            _ => Ok(()),
        }
    }
}

struct SamplerTerms {
    total: Var,
    kl: Var,
    div_raw: Var,
    div_clipped: Var,
    vli: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn record_sampler<'a>(
    g: &mut Graph<'a>,
    heads: &'a SamplerHeads,
    target: SamplerTarget<'a>,
    c: &Matrix,
    z_b: &[f64],
    eps: &[f64],
    weights: &SamplerLossWeights,
) -> Result<SamplerTerms> {
    let model = target.model;
    model.check_past(c)?;
    let dz = model.config.latent_dim;
    if z_b.len() != dz || eps.len() != dz {
        return Err(structural!("latent and noise need {dz} entries"));
    }
    g.freeze(&model.store);
    let prior = model.prior_top(c)?;

    let cf = constants(g, c);
    let hs = heads.heads_graph(g, &cf);
    let e = g.constant(eps.to_vec());
    let pm = g.constant(prior.mean.clone());
    let pls = g.constant(prior.log_std.clone());

    let ctx = model.top.context_graph(g, &model.store, &cf);
    let zb = g.constant(z_b.to_vec());
    let first = *cf.last().expect("past frames");
    let cols = model.config.uncontrolled_columns();

    let mut kls = Vec::with_capacity(hs.len());
    let mut flats = Vec::with_capacity(hs.len());
    let mut nlls = Vec::new();
    for &(a, b) in &hs {
        let ae = g.mul(a, e);
        let z = g.add(ae, b);
        let abs = g.abs(a);
        let sd = g.max_const(abs, STD_FLOOR);
        let ls = g.ln(sd);
        kls.push(g.kl_diag(b, ls, pm, pls));

        let frames = model
            .top
            .decode_graph(g, &model.store, ctx, &[z, zb], first, model.config.future_frames);
        let picked: Vec<Var> = match &cols {
            Some(cols) => frames.iter().map(|f| g.gather(*f, cols)).collect(),
            None => frames.clone(),
        };
        flats.push(g.concat(&picked));
        if let Some(flow) = target.flow {
            g.freeze(&flow.store);
            for f in &frames {
                let dirs = g.limb_directions(*f, target.skeleton.parents());
                nlls.push(flow.nll_graph(g, dirs));
            }
        }
    }
    let kl = g.add_all(&kls);
    let mut pairs = Vec::with_capacity(flats.len() * (flats.len() - 1) / 2);
    for i in 0..flats.len() {
        for j in i + 1..flats.len() {
            let d = g.sub(flats[i], flats[j]);
            pairs.push(g.sum_sq(d));
        }
    }
    let all = g.concat(&pairs);
    let div_raw = g.min_of(all);
    let div_clipped = g.clamp(div_raw, weights.div_clip.0, weights.div_clip.1);

    let wkl = g.scale(kl, weights.lambda_kl);
    let wdiv = g.scale(div_clipped, -weights.lambda_div);
    let mut terms = vec![wkl, wdiv];
    let vli = if nlls.is_empty() {
        None
    } else {
        let s = g.add_all(&nlls);
        let v = g.scale(s, 1.0 / nlls.len() as f64);
        terms.push(g.scale(v, weights.lambda_vli));
        Some(v)
    };
    let total = g.add_all(&terms);
    Ok(SamplerTerms {
        total,
        kl,
        div_raw,
        div_clipped,
        vli,
    })
}

fn read_terms(g: &Graph<'_>, t: &SamplerTerms) -> SamplerLoss {
    SamplerLoss {
        total: g.scalar(t.total),
        kl: g.scalar(t.kl),
        div_raw: g.scalar(t.div_raw),
        div_clipped: g.scalar(t.div_clipped),
        vli: t.vli.map_or(0.0, |v| g.scalar(v)),
    }
}

/// Sampler objective for one condition with `z_b` held at `z_b` and shared
/// noise `eps`. Without a pose prior the validity term is reported as 0.
pub fn sampler_loss(
    heads: &SamplerHeads,
    target: SamplerTarget<'_>,
    c: &Matrix,
    z_b: &[f64],
    eps: &[f64],
    weights: &SamplerLossWeights,
) -> Result<SamplerLoss> {
    target.check(heads, weights)?;
    let mut g = Graph::new();
    let t = record_sampler(&mut g, heads, target, c, z_b, eps, weights)?;
    Ok(read_terms(&g, &t))
}

/// Sampler objective and its gradient with respect to the sampler's parameters.
pub fn sampler_loss_and_gradient(
    heads: &SamplerHeads,
    target: SamplerTarget<'_>,
    c: &Matrix,
    z_b: &[f64],
    eps: &[f64],
    weights: &SamplerLossWeights,
) -> Result<(SamplerLoss, Vec<f64>)> {
    target.check(heads, weights)?;
    let mut g = Graph::new();
    let t = record_sampler(&mut g, heads, target, c, z_b, eps, weights)?;
    let grads = g.backward(t.total)?;
    Ok((read_terms(&g, &t), grads.for_store(&g, &heads.store)))
}

/// One `z_b` per condition drawn from the bottom prior, held for the whole run.
pub fn frozen_bottom_latents(model: &DualPathCvae, data: &[Example], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|ex| Ok(model.prior_bottom(&ex.past)?.sample(&mut rng)))
        .collect()
}

/// Trains only the sampler's parameters; model and flow are read-only. Each
/// step draws one noise vector shared by every head and batch member.
/// `on_epoch` receives the 1-based epoch and its mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_sampler<F>(
    heads: &mut SamplerHeads,
    opt: &mut AdamState,
    target: SamplerTarget<'_>,
    data: &[Example],
    weights: &SamplerLossWeights,
    schedule: &TrainSchedule,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<SamplerLoss>>
where
    F: FnMut(usize, &SamplerLoss, &SamplerHeads, &AdamState) -> Result<()>,
{
    if data.is_empty() {
        return Err(argument!("no training conditions"));
    }
    target.check(heads, weights)?;
    let z_b = frozen_bottom_latents(target.model, data, schedule.seed)?;
    let dz = heads.spec.latent_dim;
    let mut log = Vec::new();
    for epoch in start_epoch..schedule.epochs {
        let mut rng = epoch_rng(schedule.seed, epoch);
        let mut seen = Vec::with_capacity(data.len());
        for idx in epoch_batches(data.len(), schedule.batch_size, &mut rng) {
            let eps = draw_noise(dz, &mut rng);
            let h: &SamplerHeads = heads;
            let per: Vec<Result<(SamplerLoss, Vec<f64>)>> = idx
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let t = record_sampler(&mut g, h, target, &data[i].past, &z_b[i], &eps, weights)?;
                    let grads = g.backward(t.total)?;
                    Ok((read_terms(&g, &t), grads.for_store(&g, &h.store)))
                })
                .collect();
            let (losses, grad) = reduce_gradients(per, heads.store.len())?;
            let mean = SamplerLoss::mean(&losses);
            if !mean.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite sampler loss in epoch {}", epoch + 1)));
            }
            apply_update(&mut heads.store, opt, &grad, &schedule.adam)?;
            seen.extend(losses);
        }
        let mean = SamplerLoss::mean(&seen);
        on_epoch(epoch + 1, &mean, heads, opt)?;
        log.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diversity_cases() {
        let a = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(min_pairwise_diversity(&[a.clone(), b.clone()], None).unwrap(), 1.0);
        assert_eq!(min_pairwise_diversity(&[a.clone(), b.clone(), a.clone()], None).unwrap(), 0.0);
        assert_eq!(min_pairwise_diversity(&[a.clone(), b.clone()], Some(&[1])).unwrap(), 0.0);
        assert!(min_pairwise_diversity(&[a], None).is_err());
    }

    #[test]
    fn clip_boundaries() {
        let w = SamplerLossWeights::default();
        assert_eq!(w.clip(300.0), 160.0);
        assert_eq!(w.clip(-1.0), 0.0);
        assert_eq!(w.clip(42.0), 42.0);
        let bad = SamplerLossWeights {
            div_clip: (5.0, 1.0),
            ..w
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kl_of_matching_heads_is_zero() {
        let prior = GaussianLatent::new(vec![0.5, -1.0], vec![0.2f64.ln(), 0.0]).unwrap();
        let head = (vec![0.2, -1.0], prior.mean.clone());
        assert!(sampler_kl(&[head.clone(), head], &prior).unwrap().abs() < 1e-12);
    }

    #[test]
    fn identity_heads_pass_noise() {
        let spec = SamplerSpec {
            k: 3,
            condition_dim: 2,
            latent_dim: 2,
            hidden_dim: 3,
        };
        let mut s = SamplerHeads::new(spec, 0).unwrap();
        let w = s.head.weight;
        s.store.get_mut(w).fill(0.0);
        let c = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4]]).unwrap();
        let z = s.map_noise(&c, &[0.7, -1.5]).unwrap();
        assert!(z.iter().all(|zk| zk == &vec![0.7, -1.5]));
        assert!(SamplerHeads::new(SamplerSpec { k: 1, ..spec }, 0).is_err());
    }
}
