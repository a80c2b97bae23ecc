//! Diversity and control metrics, pose-prior scoring, and the controlled
//! generation protocols.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::flow::{validity_objective, FlowModel};
use crate::model::{ControlMode, DualPathCvae};
use crate::motion::{Matrix, Part, Skeleton};
use crate::objectives::{draw_noise, Example};
use crate::sampler::{pairwise_sq_distances, SamplerHeads};

pub const RANDOM_PROTOCOL_K: usize = 50;
pub const DIVERSITY_PROTOCOL_K: usize = 10;

fn pairwise_l2(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<Vec<f64>> {
    Ok(pairwise_sq_distances(sequences, columns)?.into_iter().map(f64::sqrt).collect())
}

/// Mean pairwise L2 distance between flattened sequences.
pub fn apd(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<f64> {
    let d = pairwise_l2(sequences, columns)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Minimum pairwise L2 distance between flattened sequences.
pub fn mpd(sequences: &[Matrix], columns: Option<&[usize]>) -> Result<f64> {
    Ok(pairwise_l2(sequences, columns)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Mean flow NLL over every frame's limb directions.
pub fn nll_score(flow: &FlowModel, sequences: &[Matrix], skeleton: &Skeleton) -> Result<f64> {
    validity_objective(flow, sequences, skeleton)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    RandomSampling,
    DiversitySampling,
}

impl Protocol {
    pub fn default_k(self) -> usize {
        match self {
            Protocol::RandomSampling => RANDOM_PROTOCOL_K,
            Protocol::DiversitySampling => DIVERSITY_PROTOCOL_K,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::RandomSampling => "random_sampling",
            Protocol::DiversitySampling => "diversity_sampling",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    None,
    FixZb,
    FixZt,
    EndPose,
}

impl Control {
    pub fn name(self) -> &'static str {
        match self {
            Control::None => "none",
            Control::FixZb => "fix_zb",
            Control::FixZt => "fix_zt",
            Control::EndPose => "end_pose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub control: Control,
    #[serde(rename = "K")]
    pub k: usize,
    pub apd_full: f64,
    pub apd_part1: f64,
    pub apd_part2: f64,
    pub mpd: f64,
    pub nll: Option<f64>,
    /// APD of the last frame alone.
    pub apd_final: f64,
    pub conditions: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let nll = self.nll.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "protocol   control   K    APD(full)  APD(part1)  APD(part2)  MPD       APD(final)  NLL");
        let _ = writeln!(
            s,
            "{:<10} {:<9} {:<4} {:<10.4} {:<11.4} {:<11.4} {:<9.4} {:<11.4} {}",
            match self.protocol {
                Protocol::RandomSampling => "random",
                Protocol::DiversitySampling => "diversity",
            },
            self.control.name(),
            self.k,
            self.apd_full,
            self.apd_part1,
            self.apd_part2,
            self.mpd,
            self.apd_final,
            nll
        );
        let _ = writeln!(s, "conditions: {}", self.conditions);
        s
    }
}

/// Artifacts a protocol run may draw on.
#[derive(Clone, Copy)]
pub struct EvalArtifacts<'m> {
    pub model: &'m DualPathCvae,
    pub sampler: Option<&'m SamplerHeads>,
    pub flow: Option<&'m FlowModel>,
    pub skeleton: &'m Skeleton,
}

/// Random stream for test condition `index`.
pub fn condition_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Which latents are held at one draw per condition and where `z_t` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentPlan {
    pub fix_zt: bool,
    pub fix_zb: bool,
    /// `z_t` from the sampler heads instead of the prior.
    pub diverse: bool,
}

impl LatentPlan {
    pub fn new(protocol: Protocol, control: Control) -> Self {
        Self {
            fix_zt: control == Control::FixZt,
            fix_zb: matches!(control, Control::FixZb | Control::EndPose),
            diverse: protocol == Protocol::DiversitySampling,
        }
    }
}

/// The `K` latent pairs for one condition. Fixed latents come from one prior
/// draw; diverse `z_t` come from the sampler heads applied to one noise draw.
pub fn plan_latents(
    model: &DualPathCvae,
    sampler: Option<&SamplerHeads>,
    c: &Matrix,
    plan: LatentPlan,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let pt = model.prior_top(c)?;
    let pb = model.prior_bottom(c)?;
    let fixed_zt = pt.sample(rng);
    let fixed_zb = pb.sample(rng);
    let diverse_zt = if plan.diverse {
        let heads = sampler.ok_or_else(|| argument!("diverse sampling needs a sampler"))?;
        if heads.spec.k != k {
            return Err(argument!("the sampler has {} heads but K = {k}", heads.spec.k));
        }
        let eps = draw_noise(model.config.latent_dim, rng);
        Some(heads.map_noise(c, &eps)?)
    } else {
        None
    };
    Ok((0..k)
        .map(|i| {
            let zt = match (&diverse_zt, plan.fix_zt) {
                (_, true) => fixed_zt.clone(),
                (Some(s), false) => s[i].clone(),
                (None, false) => pt.sample(rng),
            };
            let zb = if plan.fix_zb { fixed_zb.clone() } else { pb.sample(rng) };
            (zt, zb)
        })
        .collect())
}

fn check_protocol(art: &EvalArtifacts<'_>, protocol: Protocol, control: Control, k: usize) -> Result<()> {
    let cfg = &art.model.config;
    if k < 2 {
        return Err(argument!("K must be at least 2"));
    }
    if art.skeleton.dim() != cfg.pose_dim() || cfg.split.check_skeleton(art.skeleton).is_err() {
        return Err(argument!("skeleton does not match the model's configuration"));
    }
    if control == Control::EndPose && cfg.mode != ControlMode::EndPoseControl {
        return Err(argument!("end_pose control needs an end-pose model"));
    }
    if protocol == Protocol::DiversitySampling {
        let heads = art
            .sampler
            .ok_or_else(|| argument!("the diversity protocol needs a sampler checkpoint"))?;
        if heads.spec.k != k {
            return Err(argument!("the sampler has {} heads but K = {k}", heads.spec.k));
        }
        if heads.spec.latent_dim != cfg.latent_dim || heads.spec.condition_dim != cfg.pose_dim() {
            return Err(argument!("sampler does not match the model"));
        }
        if control == Control::FixZt {
            return Err(argument!("the diversity protocol varies z_t and cannot fix it"));
        }
    }
    if let Some(f) = art.flow {
        if f.dim != cfg.pose_dim() {
            return Err(argument!("pose prior does not match the pose size"));
        }
    }
    Ok(())
}

struct ConditionMetrics {
    apd_full: f64,
    apd_part1: f64,
    apd_part2: f64,
    mpd: f64,
    apd_final: f64,
    nll: Option<f64>,
}

/// Generates `K` futures per test condition under `control` and averages
/// the per-condition metrics. NLL is reported when a pose prior is given.
pub fn run_control_protocol(
    art: &EvalArtifacts<'_>,
    test_set: &[Example],
    protocol: Protocol,
    control: Control,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(argument!("empty test set"));
    }
    check_protocol(art, protocol, control, k)?;
    let split = &art.model.config.split;
    let cols1 = split.columns(Part::Part1);
    let cols2 = split.columns(Part::Part2);
    let per: Vec<Result<ConditionMetrics>> = test_set
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = condition_rng(seed, i);
            let latents = plan_latents(art.model, art.sampler, &ex.past, LatentPlan::new(protocol, control), k, &mut rng)?;
            let seqs = art.model.decode_batch(&ex.past, &latents)?;
            let last = seqs[0].rows() - 1;
            let finals: Vec<Matrix> = seqs.iter().map(|s| s.slice_rows(last, 1)).collect();
            Ok(ConditionMetrics {
                apd_full: apd(&seqs, None)?,
                apd_part1: apd(&seqs, Some(&cols1))?,
                apd_part2: apd(&seqs, Some(&cols2))?,
                mpd: mpd(&seqs, None)?,
                apd_final: apd(&finals, None)?,
                nll: art.flow.map(|f| nll_score(f, &seqs, art.skeleton)).transpose()?,
            })
        })
        .collect();
    let n = test_set.len() as f64;
    let mut report = EvalReport {
        protocol,
        control,
        k,
        apd_full: 0.0,
        apd_part1: 0.0,
        apd_part2: 0.0,
        mpd: 0.0,
        nll: art.flow.map(|_| 0.0),
        apd_final: 0.0,
        conditions: test_set.len(),
    };
    for m in per {
        let m = m?;
        report.apd_full += m.apd_full / n;
        report.apd_part1 += m.apd_part1 / n;
        report.apd_part2 += m.apd_part2 / n;
        report.mpd += m.mpd / n;
        report.apd_final += m.apd_final / n;
        if let (Some(total), Some(v)) = (report.nll.as_mut(), m.nll) {
            *total += v / n;
        }
    }
    debug_assert!(report.mpd <= report.apd_full + 1e-12);
    Ok(report)
}
