//! Commands behind the `dualpath` binary. Each reads and writes a run
//! directory laid out as:
//!
//! ```text
//! <out>/data/motion_NNNNN.json, split.json
//! <out>/model/        model checkpoint + training_log.csv
//! <out>/pose_prior/   flow checkpoint + training_log.csv
//! <out>/sampler/      sampler checkpoint + training_log.csv
//! <out>/generated/    sample_NNN.json (+ .svg)
//! <out>/eval/         <protocol>_<control>.{txt,json}
//! <out>/export/       config.json and one JSON dump per checkpoint
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{pose_set, train_flow, FlowModel};
use crate::metrics::{plan_latents, run_control_protocol, Control, EvalArtifacts, EvalReport, LatentPlan, Protocol};
use crate::model::{ControlMode, DualPathCvae};
use crate::motion::{generate_synthetic_dataset, load_motion, save_motion, Matrix, MotionSequence, Skeleton};
use crate::nn::checkpoint::{load_checkpoint, Checkpoint, MANIFEST_FILE};
use crate::nn::AdamState;
use crate::objectives::{train_model, Example};
use crate::plot::sequence_svg;
use crate::sampler::{train_sampler, SamplerHeads, SamplerSpec, SamplerTarget};

pub const SPLIT_FILE: &str = "split.json";
pub const LOG_FILE: &str = "training_log.csv";
const SPLIT_STREAM: u64 = 1 << 40;

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

/// Locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn pose_prior(&self) -> PathBuf {
        self.root.join("pose_prior")
    }
    pub fn sampler(&self) -> PathBuf {
        self.root.join("sampler")
    }
    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn export(&self) -> PathBuf {
        self.root.join("export")
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Train/test assignment of the dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub past_frames: usize,
    pub future_frames: usize,
    pub files: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn motion_file_name(i: usize) -> String {
    format!("motion_{i:05}.json")
}

fn concat_frames(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut v = a.as_slice().to_vec();
    v.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), v)
}

/// Cuts every motion file in `dir` (sorted by name) into non-overlapping
/// windows of `len` frames, up to `count` windows.
fn import_windows(dir: &Path, len: usize, count: usize) -> Result<Vec<MotionSequence>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let seq = load_motion(&path)?;
        let mut start = 0;
        while start + len <= seq.len() && out.len() < count {
            out.push(seq.window(start, len)?);
            start += len;
        }
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("{}: no motion windows of {len} frames", dir.display())));
    }
    Ok(out)
}

/// Writes the dataset's motion files and its split manifest.
pub fn cmd_make_data(cfg: &RunConfig) -> Result<SplitManifest> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output_dir);
    let (h, t) = (cfg.model.past_frames, cfg.model.future_frames);
    let sequences = match &cfg.dataset.import_dir {
        Some(dir) => import_windows(dir, h + t, cfg.dataset.count)?,
        None => generate_synthetic_dataset(&Skeleton::walker(), cfg.dataset.count, h, t, &cfg.dataset.gait, cfg.seed)?
            .into_iter()
            .map(|p| {
                let frames = concat_frames(&p.past.frames, &p.future.frames)?;
                MotionSequence::new(p.past.skeleton, frames, p.past.fps)
            })
            .collect::<Result<_>>()?,
    };
    cfg.model.split.check_skeleton(&sequences[0].skeleton)?;

    let dir = paths.data();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        let stale = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("motion_"));
        if stale {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut files = Vec::with_capacity(sequences.len());
    for (i, seq) in sequences.iter().enumerate() {
        let name = motion_file_name(i);
        save_motion(&dir.join(&name), seq)?;
        files.push(name);
    }

    let n = files.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let mut n_test = (n as f64 * cfg.dataset.test_fraction).round() as usize;
    if cfg.dataset.test_fraction > 0.0 && n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let manifest = SplitManifest {
        seed: cfg.seed,
        past_frames: h,
        future_frames: t,
        files,
        train,
        test,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("split serializes");
    text.push('\n');
    write_file(&dir.join(SPLIT_FILE), text)?;
    Ok(manifest)
}

/// Loaded train and test examples with the skeleton they share.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub fps: f64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = RunPaths::new(&cfg.output_dir).data();
    let split: SplitManifest = read_json(&dir.join(SPLIT_FILE))?;
    let (h, t) = (cfg.model.past_frames, cfg.model.future_frames);
    if split.past_frames != h || split.future_frames != t {
        return Err(usage(format!(
            "dataset windows are {}+{} frames but the config asks for {h}+{t}",
            split.past_frames, split.future_frames
        )));
    }
    let mut skeleton: Option<Skeleton> = None;
    let mut fps = 0.0;
    let mut load = |idx: &[usize]| -> Result<Vec<Example>> {
        idx.iter()
            .map(|&i| {
                let name = split
                    .files
                    .get(i)
                    .ok_or_else(|| Error::Structural(format!("split index {i} has no file")))?;
                let path = dir.join(name);
                let seq = load_motion(&path)?;
                match &skeleton {
                    Some(s) if *s != seq.skeleton => {
                        return Err(Error::Structural(format!("{}: skeleton differs from the dataset", path.display())))
                    }
                    None => {
                        skeleton = Some(seq.skeleton.clone());
                        fps = seq.fps;
                    }
                    _ => {}
                }
                if seq.len() < h + t {
                    return Err(Error::Structural(format!("{}: needs {} frames", path.display(), h + t)));
                }
                Ok(Example {
                    past: seq.frames.slice_rows(0, h),
                    future: seq.frames.slice_rows(h, t),
                })
            })
            .collect()
    };
    let train = load(&split.train)?;
    let test = load(&split.test)?;
    let skeleton = skeleton.ok_or_else(|| usage("the dataset is empty"))?;
    cfg.model.split.check_skeleton(&skeleton).map_err(|e| usage(e.to_string()))?;
    Ok(Dataset {
        skeleton,
        fps,
        train,
        test,
    })
}

/// Keeps the header and the first `epochs` rows of a log, or starts a new one.
fn reset_log(path: &Path, header: &str, epochs: usize) -> Result<()> {
    let mut text = format!("{header}\n");
    if epochs > 0 {
        let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in old.lines().skip(1).take(epochs) {
            text.push_str(line);
            text.push('\n');
        }
    }
    write_file(path, text)
}

fn append_log(path: &Path, row: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

fn epoch_extra(epoch: usize) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("epoch".into(), json!(epoch));
    m
}

/// Loads an existing checkpoint for `--resume`, or `None` when starting fresh.
fn resume_point(dir: &Path, resume: bool) -> Result<Option<(Checkpoint, usize)>> {
    if !resume || !dir.join(MANIFEST_FILE).exists() {
        return Ok(None);
    }
    let ck = load_checkpoint(dir)?;
    let epoch: usize = ck.extra_field("epoch")?;
    Ok(Some((ck, epoch)))
}

fn optimizer_of(ck: &Checkpoint) -> Result<AdamState> {
    ck.optimizer
        .clone()
        .ok_or_else(|| usage("checkpoint has no optimizer state to resume from"))
}

/// Trains the dual-path model, checkpointing after every epoch.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<DualPathCvae> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let dir = RunPaths::new(&cfg.output_dir).model();
    let (mut model, mut opt, start) = match resume_point(&dir, resume)? {
        Some((ck, epoch)) => {
            let model = DualPathCvae::from_checkpoint(&ck)?;
            if model.config != cfg.model {
                return Err(usage("the checkpoint's model config differs from the requested one"));
            }
            let opt = optimizer_of(&ck)?;
            (model, opt, epoch)
        }
        None => {
            let model = DualPathCvae::new(cfg.model.clone(), cfg.seed)?;
            let opt = AdamState::for_store(&model.store);
            (model, opt, 0)
        }
    };
    let log = dir.join(LOG_FILE);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    reset_log(&log, "epoch,rec_top,rec_bottom,kl_top,kl_bottom,total", start)?;
    if start == 0 {
        model.save(&dir, Some(&opt), epoch_extra(0))?;
    }
    train_model(&mut model, &mut opt, &data.train, &cfg.model_schedule(), start, |epoch, l, m, o| {
        m.save(&dir, Some(o), epoch_extra(epoch))?;
        append_log(
            &log,
            &format!("{epoch},{},{},{},{},{}", l.rec_top, l.rec_bottom, l.kl_top, l.kl_bottom, l.total),
        )
    })?;
    Ok(model)
}

/// Fits the pose prior on limb directions of the training sequences.
pub fn cmd_train_pose_prior(cfg: &RunConfig, resume: bool) -> Result<FlowModel> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let dir = RunPaths::new(&cfg.output_dir).pose_prior();
    let seqs: Vec<Matrix> = data
        .train
        .iter()
        .map(|ex| concat_frames(&ex.past, &ex.future))
        .collect::<Result<_>>()?;
    let poses = pose_set(&seqs, &data.skeleton, cfg.flow.pose_stride)?;
    let (mut flow, mut opt, start) = match resume_point(&dir, resume)? {
        Some((ck, epoch)) => {
            let flow = FlowModel::from_checkpoint(&ck)?;
            if flow.dim != data.skeleton.dim() || flow.layers.len() != cfg.flow.layers {
                return Err(usage("the pose prior checkpoint differs from the requested layout"));
            }
            let opt = optimizer_of(&ck)?;
            (flow, opt, epoch)
        }
        None => {
            let flow = FlowModel::new(data.skeleton.dim(), cfg.flow.layers, cfg.seed)?;
            let opt = AdamState::for_store(&flow.store);
            (flow, opt, 0)
        }
    };
    let log = dir.join(LOG_FILE);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    reset_log(&log, "epoch,nll", start)?;
    if start == 0 {
        flow.save(&dir, Some(&opt), epoch_extra(0))?;
    }
    train_flow(&mut flow, &mut opt, &poses, &cfg.flow_schedule(), start, |epoch, nll, f, o| {
        f.save(&dir, Some(o), epoch_extra(epoch))?;
        append_log(&log, &format!("{epoch},{nll}"))
    })?;
    Ok(flow)
}

fn load_model_checked(dir: &Path, cfg: &RunConfig, skeleton: &Skeleton) -> Result<DualPathCvae> {
    let model = DualPathCvae::from_checkpoint(&load_checkpoint(dir)?)?;
    if model.config.split != cfg.model.split {
        return Err(usage("the model checkpoint's body split differs from the requested one"));
    }
    model
        .config
        .split
        .check_skeleton(skeleton)
        .map_err(|e| usage(format!("the model checkpoint does not fit the skeleton: {e}")))?;
    Ok(model)
}

fn load_flow_for(dir: &Path, model: &DualPathCvae) -> Result<FlowModel> {
    let flow = FlowModel::from_checkpoint(&load_checkpoint(dir)?)?;
    if flow.dim != model.config.pose_dim() {
        return Err(usage("the pose prior does not match the model's pose size"));
    }
    Ok(flow)
}

fn load_sampler_for(dir: &Path, model: &DualPathCvae) -> Result<SamplerHeads> {
    let heads = SamplerHeads::from_checkpoint(&load_checkpoint(dir)?)?;
    if heads.spec.latent_dim != model.config.latent_dim || heads.spec.condition_dim != model.config.pose_dim() {
        return Err(usage("the sampler checkpoint does not match the model"));
    }
    Ok(heads)
}

fn require(dir: &Path, what: &str) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} checkpoint missing at {}", dir.display())))
    }
}

/// Trains the diversity sampler against the frozen model and pose prior.
pub fn cmd_train_sampler(cfg: &RunConfig, resume: bool) -> Result<SamplerHeads> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let paths = RunPaths::new(&cfg.output_dir);
    require(&paths.model(), "model")?;
    let model = load_model_checked(&paths.model(), cfg, &data.skeleton)?;
    let flow = if cfg.sampler.weights.lambda_vli > 0.0 {
        require(&paths.pose_prior(), "pose prior")?;
        Some(load_flow_for(&paths.pose_prior(), &model)?)
    } else {
        None
    };
    let spec = SamplerSpec {
        k: cfg.sampler.k,
        condition_dim: model.config.pose_dim(),
        latent_dim: model.config.latent_dim,
        hidden_dim: cfg.sampler.hidden_dim,
    };
    let dir = paths.sampler();
    let (mut heads, mut opt, start) = match resume_point(&dir, resume)? {
        Some((ck, epoch)) => {
            let heads = SamplerHeads::from_checkpoint(&ck)?;
            if heads.spec != spec {
                return Err(usage("the sampler checkpoint differs from the requested layout"));
            }
            let opt = optimizer_of(&ck)?;
            (heads, opt, epoch)
        }
        None => {
            let heads = SamplerHeads::new(spec, cfg.seed)?;
            let opt = AdamState::for_store(&heads.store);
            (heads, opt, 0)
        }
    };
    let log = dir.join(LOG_FILE);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    reset_log(&log, "epoch,kl,div_raw,div_clipped,vli,total", start)?;
    if start == 0 {
        heads.save(&dir, Some(&opt), epoch_extra(0))?;
    }
    let target = SamplerTarget {
        model: &model,
        flow: flow.as_ref(),
        skeleton: &data.skeleton,
    };
    train_sampler(
        &mut heads,
        &mut opt,
        target,
        &data.train,
        &cfg.sampler.weights,
        &cfg.sampler_schedule(),
        start,
        |epoch, l, h, o| {
            h.save(&dir, Some(o), epoch_extra(epoch))?;
            append_log(
                &log,
                &format!("{epoch},{},{},{},{},{}", l.kl, l.div_raw, l.div_clipped, l.vli, l.total),
            )
        },
    )?;
    Ok(heads)
}

/// Control flags of the generate command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenerateFlags {
    pub fix_zb: bool,
    pub fix_zt: bool,
    pub end_pose: bool,
    pub diverse: bool,
}

impl GenerateFlags {
    pub fn plan(&self, mode: ControlMode) -> Result<LatentPlan> {
        if self.end_pose && self.fix_zb {
            return Err(usage("--end-pose already fixes z_b; drop --fix-zb"));
        }
        if self.end_pose && mode != ControlMode::EndPoseControl {
            return Err(usage("--end-pose needs a model trained in end-pose mode"));
        }
        if self.diverse && self.fix_zt {
            return Err(usage("--diverse varies z_t and cannot be combined with --fix-zt"));
        }
        Ok(LatentPlan {
            fix_zt: self.fix_zt,
            fix_zb: self.fix_zb || self.end_pose,
            diverse: self.diverse,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GenerateRequest {
    pub past_file: PathBuf,
    pub flags: GenerateFlags,
    pub k: Option<usize>,
    pub plot: bool,
}

/// Writes `K` futures for the first `H` frames of a motion file.
pub fn cmd_generate(cfg: &RunConfig, req: &GenerateRequest) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output_dir);
    let past = load_motion(&req.past_file)?;
    require(&paths.model(), "model")?;
    let model = load_model_checked(&paths.model(), cfg, &past.skeleton)?;
    let plan = req.flags.plan(model.config.mode)?;
    let sampler = if plan.diverse {
        require(&paths.sampler(), "sampler").map_err(|_| usage("--diverse needs a trained sampler checkpoint"))?;
        Some(load_sampler_for(&paths.sampler(), &model)?)
    } else {
        None
    };
    let h = model.config.past_frames;
    if past.len() < h {
        return Err(usage(format!("the past file has {} frames, the model needs {h}", past.len())));
    }
    let c = past.frames.slice_rows(0, h);
    let k = req.k.unwrap_or(match &sampler {
        Some(s) => s.spec.k,
        None => cfg.eval.k_random,
    });
    if k < 1 {
        return Err(usage("K must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = plan_latents(&model, sampler.as_ref(), &c, plan, k, &mut rng)?;
    let futures = model.decode_batch(&c, &latents)?;

    let dir = paths.generated();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::with_capacity(k);
    for (i, f) in futures.into_iter().enumerate() {
        let path = dir.join(format!("sample_{i:03}.json"));
        let seq = MotionSequence::new(past.skeleton.clone(), f, past.fps)?;
        save_motion(&path, &seq)?;
        if req.plot {
            write_file(&path.with_extension("svg"), sequence_svg(&seq.frames, &seq.skeleton)?)?;
        }
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug)]
pub struct EvaluateRequest {
    pub protocol: Protocol,
    pub control: Control,
    pub k: Option<usize>,
}

/// Runs one control protocol on the test split and writes text and JSON reports.
pub fn cmd_evaluate(cfg: &RunConfig, req: &EvaluateRequest) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let paths = RunPaths::new(&cfg.output_dir);
    require(&paths.model(), "model")?;
    let model = load_model_checked(&paths.model(), cfg, &data.skeleton)?;
    let sampler = if req.protocol == Protocol::DiversitySampling {
        require(&paths.sampler(), "sampler")?;
        Some(load_sampler_for(&paths.sampler(), &model)?)
    } else {
        None
    };
    let flow = if paths.pose_prior().join(MANIFEST_FILE).exists() {
        Some(load_flow_for(&paths.pose_prior(), &model)?)
    } else {
        None
    };
    if req.control == Control::EndPose && model.config.mode != ControlMode::EndPoseControl {
        return Err(usage("end_pose control needs a model trained in end-pose mode"));
    }
    let k = req.k.unwrap_or(match req.protocol {
        Protocol::RandomSampling => cfg.eval.k_random,
        Protocol::DiversitySampling => cfg.eval.k_diversity,
    });
    let mut test = data.test;
    if let Some(m) = cfg.eval.max_conditions {
        test.truncate(m);
    }
    let art = EvalArtifacts {
        model: &model,
        sampler: sampler.as_ref(),
        flow: flow.as_ref(),
        skeleton: &data.skeleton,
    };
    let report = run_control_protocol(&art, &test, req.protocol, req.control, k, cfg.seed)?;
    let stem = paths
        .eval()
        .join(format!("{}_{}", req.protocol.name(), req.control.name()));
    write_file(&stem.with_extension("txt"), report.to_text())?;
    write_file(&stem.with_extension("json"), report.to_json() + "\n")?;
    Ok(report)
}

fn checkpoint_json(ck: &Checkpoint) -> Value {
    let tensors: Vec<Value> = ck
        .store
        .entries()
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "shape": e.shape,
                "values": &ck.store.values()[e.offset..e.offset + e.len],
            })
        })
        .collect();
    json!({ "artifact": ck.artifact, "extra": ck.extra, "tensors": tensors })
}

/// Writes the resolved config and a JSON dump of every trained checkpoint.
pub fn cmd_export(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.output_dir);
    let dir = paths.export();
    let mut written = vec![dir.join("config.json")];
    write_file(&written[0], cfg.emit())?;
    for (name, src) in [("model", paths.model()), ("pose_prior", paths.pose_prior()), ("sampler", paths.sampler())] {
        if !src.join(MANIFEST_FILE).exists() {
            continue;
        }
        let ck = load_checkpoint(&src)?;
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string(&checkpoint_json(&ck)).expect("export serializes");
        text.push('\n');
        write_file(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
