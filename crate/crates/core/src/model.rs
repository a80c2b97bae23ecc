//! The dual-path CVAE: a top path over the full body and a bottom path over
//! one body part (or the interpolated auxiliary sequence), each with a
//! posterior encoder, a learnable prior and an autoregressive decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{argument, structural, Result};
use crate::motion::{aux_frames, BodySplit, Matrix, Part, Skeleton};
use crate::nn::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::{Activation, AdamState, FcLayer, FcLayerSpec, Graph, GruCell, GruCellSpec, ParamStore, Var};

pub const LOG_STD_MIN: f64 = -8.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// Diagonal Gaussian given by its mean and log standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianLatent {
    /// Builds a latent, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(structural!(
                "mean has {} entries but log_std has {}",
                mean.len(),
                log_std.len()
            ));
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        reparameterize(self, &eps).expect("noise matches latent size")
    }
}

/// `mean + exp(log_std) * eps`.
pub fn reparameterize(g: &GaussianLatent, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(structural!("noise has {} entries, latent has {}", eps.len(), g.dim()));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_std)
        .zip(eps)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathRole {
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaePathSpec {
    pub condition_dim: usize,
    pub target_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub role: PathRole,
}

impl CvaePathSpec {
    fn decoder_latents(&self) -> usize {
        match self.role {
            PathRole::Top => 2,
            PathRole::Bottom => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    PartialBodyControl,
    EndPoseControl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottomInput {
    Part1,
    Part2,
    Aux,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub past_frames: usize,
    pub future_frames: usize,
    pub split: BodySplit,
    pub mode: ControlMode,
    pub bottom_input: BottomInput,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lambda_kl_top: f64,
    pub lambda_kl_bottom: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            past_frames: 16,
            future_frames: 32,
            split: BodySplit::lower_upper(&Skeleton::walker()).expect("walker split"),
            mode: ControlMode::PartialBodyControl,
            bottom_input: BottomInput::Part1,
            latent_dim: 128,
            hidden_dim: 128,
            lambda_kl_top: 0.1,
            lambda_kl_bottom: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.past_frames < 1 || self.future_frames < 2 {
            return Err(argument!("need at least 1 past frame and 2 future frames"));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(argument!("latent and hidden sizes must be positive"));
        }
        if !(self.lambda_kl_top >= 0.0 && self.lambda_kl_bottom >= 0.0) {
            return Err(argument!("KL weights must be nonnegative"));
        }
        match (self.mode, self.bottom_input) {
            (ControlMode::EndPoseControl, BottomInput::Aux) => Ok(()),
            (ControlMode::EndPoseControl, _) => Err(argument!("end-pose control requires the aux bottom input")),
            (ControlMode::PartialBodyControl, BottomInput::Aux) => {
                Err(argument!("partial-body control requires a body-part bottom input"))
            }
            _ => Ok(()),
        }
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.split.joint_count()
    }

    /// Body part fed to the bottom path, `None` for the aux sequence.
    pub fn bottom_part(&self) -> Option<Part> {
        match self.bottom_input {
            BottomInput::Part1 => Some(Part::Part1),
            BottomInput::Part2 => Some(Part::Part2),
            BottomInput::Aux => None,
        }
    }

    /// Columns of the bottom-path input, `None` meaning every column.
    pub fn bottom_columns(&self) -> Option<Vec<usize>> {
        self.bottom_part().map(|p| self.split.columns(p))
    }

    /// Columns left to `z_t` when `z_b` is held fixed: the complement of the
    /// bottom part, or every column in end-pose mode.
    pub fn uncontrolled_columns(&self) -> Option<Vec<usize>> {
        self.bottom_part().map(|p| self.split.columns(p.other()))
    }

    pub fn bottom_dim(&self) -> usize {
        match self.bottom_part() {
            Some(p) => 3 * self.split.part(p).len(),
            None => self.pose_dim(),
        }
    }

    pub fn top_spec(&self) -> CvaePathSpec {
        CvaePathSpec {
            condition_dim: self.pose_dim(),
            target_dim: self.pose_dim(),
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            role: PathRole::Top,
        }
    }

    pub fn bottom_spec(&self) -> CvaePathSpec {
        CvaePathSpec {
            condition_dim: self.bottom_dim(),
            target_dim: self.bottom_dim(),
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            role: PathRole::Bottom,
        }
    }
}

enum Builder<'s> {
    Init(&'s mut ParamStore, ChaCha8Rng),
    Bind(&'s ParamStore),
}

impl Builder<'_> {
    fn fc(&mut self, name: &str, input_dim: usize, output_dim: usize, activation: Activation) -> Result<FcLayer> {
        let spec = FcLayerSpec {
            input_dim,
            output_dim,
            activation,
        };
        match self {
            Builder::Init(store, rng) => FcLayer::new(store, name, spec, rng),
            Builder::Bind(store) => FcLayer::bind(store, name, spec),
        }
    }

    fn gru(&mut self, name: &str, input_dim: usize, hidden_dim: usize) -> Result<GruCell> {
        let spec = GruCellSpec::new(input_dim, hidden_dim);
        match self {
            Builder::Init(store, rng) => GruCell::new(store, name, spec, rng),
            Builder::Bind(store) => GruCell::bind(store, name, spec),
        }
    }
}

/// One CVAE path. The condition encoder feeds both the learnable prior and the
/// decoder's initial state.
#[derive(Clone, Debug)]
pub struct CvaePath {
    pub spec: CvaePathSpec,
    condition: GruCell,
    prior_mean: FcLayer,
    prior_log_std: FcLayer,
    posterior: GruCell,
    posterior_mean: FcLayer,
    posterior_log_std: FcLayer,
    decoder_init: FcLayer,
    decoder: GruCell,
    decoder_out: FcLayer,
}

impl CvaePath {
    fn build(b: &mut Builder<'_>, name: &str, spec: CvaePathSpec) -> Result<Self> {
        let (h, dz) = (spec.hidden_dim, spec.latent_dim);
        if spec.condition_dim != spec.target_dim {
            return Err(structural!("condition and target dimensions must agree"));
        }
        Ok(Self {
            spec,
            condition: b.gru(&format!("{name}.condition"), spec.condition_dim, h)?,
            prior_mean: b.fc(&format!("{name}.prior_mean"), h, dz, Activation::Identity)?,
            prior_log_std: b.fc(&format!("{name}.prior_log_std"), h, dz, Activation::Identity)?,
            posterior: b.gru(&format!("{name}.posterior"), spec.target_dim, h)?,
            posterior_mean: b.fc(&format!("{name}.posterior_mean"), h, dz, Activation::Identity)?,
            posterior_log_std: b.fc(&format!("{name}.posterior_log_std"), h, dz, Activation::Identity)?,
            decoder_init: b.fc(
                &format!("{name}.decoder_init"),
                h + spec.decoder_latents() * dz,
                h,
                Activation::Tanh,
            )?,
            decoder: b.gru(&format!("{name}.decoder"), spec.target_dim, h)?,
            decoder_out: b.fc(&format!("{name}.decoder_out"), h, spec.target_dim, Activation::Identity)?,
        })
    }

    fn heads<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, h: Var, mean: &FcLayer, log_std: &FcLayer) -> (Var, Var) {
        let m = mean.forward(g, store, h);
        let s = log_std.forward(g, store, h);
        let s = g.clamp(s, LOG_STD_MIN, LOG_STD_MAX);
        (m, s)
    }

    pub fn context_graph<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, c: &[Var]) -> Var {
        self.condition.run(g, store, c)
    }

    /// Prior `(mean, log_std)` from a condition context.
    pub fn prior_graph<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, ctx: Var) -> (Var, Var) {
        self.heads(g, store, ctx, &self.prior_mean, &self.prior_log_std)
    }

    /// Posterior `(mean, log_std)` from one GRU pass over the past then future frames.
    pub fn posterior_graph<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, c: &[Var], x: &[Var]) -> (Var, Var) {
        let frames: Vec<Var> = c.iter().chain(x).copied().collect();
        let h = self.posterior.run(g, store, &frames);
        self.heads(g, store, h, &self.posterior_mean, &self.posterior_log_std)
    }

    /// Autoregressive decode of `steps` frames, each step fed the previous
    /// output and the first step fed `first`.
    pub fn decode_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        ctx: Var,
        latents: &[Var],
        first: Var,
        steps: usize,
    ) -> Vec<Var> {
        assert_eq!(latents.len(), self.spec.decoder_latents(), "decoder latent count");
        let mut parts = vec![ctx];
        parts.extend_from_slice(latents);
        let init = g.concat(&parts);
        let mut h = self.decoder_init.forward(g, store, init);
        let mut input = first;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            h = self.decoder.step(g, store, input, h);
            let y = self.decoder_out.forward(g, store, h);
            out.push(y);
            input = y;
        }
        out
    }

    fn check_frames(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.cols() != self.spec.condition_dim {
            return Err(structural!(
                "{what} has {} columns, path expects {}",
                m.cols(),
                self.spec.condition_dim
            ));
        }
        if m.rows() == 0 {
            return Err(structural!("{what} has no frames"));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.spec.latent_dim {
            return Err(structural!("latent has {} entries, expected {}", z.len(), self.spec.latent_dim));
        }
        Ok(())
    }

    pub fn encode_condition(&self, store: &ParamStore, c: &Matrix) -> Result<Vec<f64>> {
        self.check_frames(c, "condition")?;
        let mut g = Graph::new();
        let frames = constants(&mut g, c);
        let ctx = self.context_graph(&mut g, store, &frames);
        Ok(g.value(ctx).to_vec())
    }

    pub fn prior(&self, store: &ParamStore, c: &Matrix) -> Result<GaussianLatent> {
        self.check_frames(c, "condition")?;
        let mut g = Graph::new();
        let frames = constants(&mut g, c);
        let ctx = self.context_graph(&mut g, store, &frames);
        let (m, s) = self.prior_graph(&mut g, store, ctx);
        GaussianLatent::new(g.value(m).to_vec(), g.value(s).to_vec())
    }

    pub fn posterior(&self, store: &ParamStore, c: &Matrix, x: &Matrix) -> Result<GaussianLatent> {
        self.check_frames(c, "condition")?;
        self.check_frames(x, "target")?;
        let mut g = Graph::new();
        let cf = constants(&mut g, c);
        let xf = constants(&mut g, x);
        let (m, s) = self.posterior_graph(&mut g, store, &cf, &xf);
        GaussianLatent::new(g.value(m).to_vec(), g.value(s).to_vec())
    }

    /// Decodes `steps` frames from condition `c` and the path's latents
    /// (`[z_t, z_b]` on the top path, `[z_b]` on the bottom path).
    pub fn decode(&self, store: &ParamStore, c: &Matrix, latents: &[&[f64]], steps: usize) -> Result<Matrix> {
        self.check_frames(c, "condition")?;
        if latents.len() != self.spec.decoder_latents() {
            return Err(structural!(
                "decoder takes {} latents, got {}",
                self.spec.decoder_latents(),
                latents.len()
            ));
        }
        for z in latents {
            self.check_latent(z)?;
        }
        let mut g = Graph::new();
        let cf = constants(&mut g, c);
        let ctx = self.context_graph(&mut g, store, &cf);
        let zs: Vec<Var> = latents.iter().map(|z| g.constant(z.to_vec())).collect();
        let last = *cf.last().expect("nonempty condition");
        let frames = self.decode_graph(&mut g, store, ctx, &zs, last, steps);
        Ok(collect_frames(&g, &frames))
    }
}

pub(crate) fn constants(g: &mut Graph<'_>, m: &Matrix) -> Vec<Var> {
    m.iter_rows().map(|r| g.constant(r.to_vec())).collect()
}

pub(crate) fn collect_frames(g: &Graph<'_>, frames: &[Var]) -> Matrix {
    let cols = frames.first().map_or(0, |f| g.dim(*f));
    let mut data = Vec::with_capacity(frames.len() * cols);
    for f in frames {
        data.extend_from_slice(g.value(*f));
    }
    Matrix::from_vec(frames.len(), cols, data).expect("frames share a width")
}

/// Where a latent comes from during controlled generation.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentSource {
    /// The same code for every sample.
    Fixed(Vec<f64>),
    /// A fresh draw from the learnable prior for every sample.
    PriorSample,
}

#[derive(Clone, Debug)]
pub struct DualPathCvae {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub top: CvaePath,
    pub bottom: CvaePath,
}

pub const MODEL_ARTIFACT: &str = "model";

impl DualPathCvae {
    /// Fresh model with Glorot-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::Init(&mut store, ChaCha8Rng::seed_from_u64(seed));
        let top = CvaePath::build(&mut b, "top", config.top_spec())?;
        let bottom = CvaePath::build(&mut b, "bottom", config.bottom_spec())?;
        Ok(Self {
            config,
            store,
            top,
            bottom,
        })
    }

    /// Binds an existing parameter store laid out for `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::Bind(&store);
        let top = CvaePath::build(&mut b, "top", config.top_spec())?;
        let bottom = CvaePath::build(&mut b, "bottom", config.bottom_spec())?;
        let expected: usize = DualPathCvae::new(config.clone(), 0)?.store.len();
        if store.len() != expected {
            return Err(structural!("checkpoint holds {} values, model needs {expected}", store.len()));
        }
        Ok(Self {
            config,
            store,
            top,
            bottom,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_artifact(MODEL_ARTIFACT)?;
        let config: ModelConfig = ck.extra_field("model_config")?;
        Self::from_store(config, ck.store.clone())
    }

    /// Saves parameters, optional optimizer state and `model_config`; `extra`
    /// adds further manifest keys.
    pub fn save(&self, dir: &std::path::Path, optimizer: Option<&AdamState>, mut extra: Map<String, Value>) -> Result<()> {
        extra.insert(
            "model_config".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        save_checkpoint(dir, MODEL_ARTIFACT, &self.store, optimizer, extra)
    }

    pub fn check_past(&self, c: &Matrix) -> Result<()> {
        if c.rows() != self.config.past_frames || c.cols() != self.config.pose_dim() {
            return Err(structural!(
                "past is {}x{}, model expects {}x{}",
                c.rows(),
                c.cols(),
                self.config.past_frames,
                self.config.pose_dim()
            ));
        }
        Ok(())
    }

    pub fn check_future(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.config.future_frames || x.cols() != self.config.pose_dim() {
            return Err(structural!(
                "future is {}x{}, model expects {}x{}",
                x.rows(),
                x.cols(),
                self.config.future_frames,
                self.config.pose_dim()
            ));
        }
        Ok(())
    }

    /// Condition of the bottom path: the bottom part's columns of `c`, or all of `c`.
    pub fn bottom_condition(&self, c: &Matrix) -> Matrix {
        match self.config.bottom_columns() {
            Some(cols) => c.select_columns(&cols),
            None => c.clone(),
        }
    }

    /// Target of the bottom path: the bottom part's columns of `x`, or the aux sequence.
    pub fn bottom_target(&self, x: &Matrix) -> Result<Matrix> {
        match self.config.bottom_columns() {
            Some(cols) => Ok(x.select_columns(&cols)),
            None => aux_frames(x),
        }
    }

    pub fn prior_top(&self, c: &Matrix) -> Result<GaussianLatent> {
        self.check_past(c)?;
        self.top.prior(&self.store, c)
    }

    pub fn prior_bottom(&self, c: &Matrix) -> Result<GaussianLatent> {
        self.check_past(c)?;
        self.bottom.prior(&self.store, &self.bottom_condition(c))
    }

    pub fn posterior_top(&self, c: &Matrix, x: &Matrix) -> Result<GaussianLatent> {
        self.check_past(c)?;
        self.check_future(x)?;
        self.top.posterior(&self.store, c, x)
    }

    pub fn posterior_bottom(&self, c: &Matrix, x: &Matrix) -> Result<GaussianLatent> {
        self.check_past(c)?;
        self.check_future(x)?;
        self.bottom
            .posterior(&self.store, &self.bottom_condition(c), &self.bottom_target(x)?)
    }

    /// Full-body future from the top decoder.
    pub fn decode_full(&self, c: &Matrix, z_t: &[f64], z_b: &[f64]) -> Result<Matrix> {
        self.check_past(c)?;
        self.top.decode(&self.store, c, &[z_t, z_b], self.config.future_frames)
    }

    /// Bottom-path future from the bottom condition `c_bottom` and `z_b`.
    pub fn decode_partial(&self, c_bottom: &Matrix, z_b: &[f64]) -> Result<Matrix> {
        if c_bottom.rows() != self.config.past_frames {
            return Err(structural!(
                "bottom condition has {} frames, model expects {}",
                c_bottom.rows(),
                self.config.past_frames
            ));
        }
        self.bottom.decode(&self.store, c_bottom, &[z_b], self.config.future_frames)
    }

    /// `k` full-body futures with each latent fixed or drawn from its
    /// learnable prior. Draws use a generator seeded by `seed`, `z_t` before
    /// `z_b` within each sample.
    pub fn generate_controlled(
        &self,
        c: &Matrix,
        z_t: &LatentSource,
        z_b: &LatentSource,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Matrix>> {
        self.check_past(c)?;
        for src in [z_t, z_b] {
            if let LatentSource::Fixed(z) = src {
                self.top.check_latent(z)?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior_t = matches!(z_t, LatentSource::PriorSample)
            .then(|| self.prior_top(c))
            .transpose()?;
        let prior_b = matches!(z_b, LatentSource::PriorSample)
            .then(|| self.prior_bottom(c))
            .transpose()?;
        let draw = |src: &LatentSource, prior: &Option<GaussianLatent>, rng: &mut ChaCha8Rng| match src {
            LatentSource::Fixed(z) => z.clone(),
            LatentSource::PriorSample => prior.as_ref().expect("prior computed").sample(rng),
        };
        let latents: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .map(|_| {
                let t = draw(z_t, &prior_t, &mut rng);
                let b = draw(z_b, &prior_b, &mut rng);
                (t, b)
            })
            .collect();
        self.decode_batch(c, &latents)
    }

    /// Decodes several `(z_t, z_b)` pairs from one condition.
    pub fn decode_batch(&self, c: &Matrix, latents: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<Matrix>> {
        self.check_past(c)?;
        let mut g = Graph::new();
        let cf = constants(&mut g, c);
        let ctx = self.top.context_graph(&mut g, &self.store, &cf);
        let ctx_value = g.value(ctx).to_vec();
        let last = c.row(c.rows() - 1).to_vec();
        latents
            .iter()
            .map(|(t, b)| {
                self.top.check_latent(t)?;
                self.top.check_latent(b)?;
                let mut g = Graph::new();
                let ctx = g.constant(ctx_value.clone());
                let zt = g.constant(t.clone());
                let zb = g.constant(b.clone());
                let first = g.constant(last.clone());
                let frames = self
                    .top
                    .decode_graph(&mut g, &self.store, ctx, &[zt, zb], first, self.config.future_frames);
                Ok(collect_frames(&g, &frames))
            })
            .collect()
    }
}
