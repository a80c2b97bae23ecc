//! Skeletal motion data: skeletons, frame matrices, body splits, the synthetic
//! walker generator and the auxiliary interpolated sequence used for end-pose
//! control.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{argument, structural, Error, Result};

/// Parent sentinel used for the root joint.
pub const ROOT_PARENT: i32 = -1;

/// Row-major real matrix. Motion frames are stored one pose per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(structural!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(structural!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact would yield nothing for zero-width matrices
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of the given columns, in the order given.
    pub fn select_columns(&self, columns: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, columns.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = out.row_mut(r);
            for (d, &c) in dst.iter_mut().zip(columns) {
                *d = src[c];
            }
        }
        out
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

/// Joint hierarchy. Parents are joint indices, with [`ROOT_PARENT`] marking the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSkeleton")]
pub struct Skeleton {
    joint_names: Vec<String>,
    parents: Vec<i32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSkeleton {
    joint_names: Vec<String>,
    parents: Vec<i32>,
}

impl TryFrom<RawSkeleton> for Skeleton {
    type Error = Error;

    fn try_from(raw: RawSkeleton) -> Result<Self> {
        Skeleton::new(raw.joint_names, raw.parents)
    }
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parents: Vec<i32>) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(structural!("skeleton must have at least one joint"));
        }
        if joint_names.len() != n {
            return Err(structural!(
                "{} joint names for {n} parent entries",
                joint_names.len()
            ));
        }
        let roots = parents.iter().filter(|&&p| p == ROOT_PARENT).count();
        if roots != 1 {
            return Err(structural!("skeleton must have exactly one root, found {roots}"));
        }
        for (i, &p) in parents.iter().enumerate() {
            if p != ROOT_PARENT && (p < 0 || p as usize >= n || p as usize == i) {
                return Err(structural!("joint {i} has invalid parent {p}"));
            }
        }
        // every chain must reach the root within n hops
        for start in 0..n {
            let mut j = start;
            let mut hops = 0;
            while parents[j] != ROOT_PARENT {
                j = parents[j] as usize;
                hops += 1;
                if hops > n {
                    return Err(structural!("joint hierarchy has a cycle through joint {start}"));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in &joint_names {
            if !seen.insert(name.as_str()) {
                return Err(structural!("duplicate joint name {name:?}"));
            }
        }
        Ok(Self {
            joint_names,
            parents,
        })
    }

    /// The bundled 12-joint walker: pelvis root, head and both arms hanging off
    /// the root, and a two-segment leg on each side.
    pub fn walker() -> Self {
        let names = WALKER_JOINTS.iter().map(|(n, _)| n.to_string()).collect();
        let parents = WALKER_JOINTS.iter().map(|(_, p)| *p).collect();
        Self::new(names, parents).expect("walker skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Pose dimension, three coordinates per joint.
    pub fn dim(&self) -> usize {
        3 * self.parents.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[i32] {
        &self.parents
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        match self.parents[joint] {
            ROOT_PARENT => None,
            p => Some(p as usize),
        }
    }

    pub fn root_index(&self) -> usize {
        self.parents
            .iter()
            .position(|&p| p == ROOT_PARENT)
            .expect("validated skeleton has a root")
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }
}

/// Walker joint table: (name, parent).
pub const WALKER_JOINTS: [(&str, i32); 12] = [
    ("root", -1),
    ("head", 0),
    ("l_shoulder", 0),
    ("l_elbow", 2),
    ("l_wrist", 3),
    ("r_shoulder", 0),
    ("r_elbow", 5),
    ("r_wrist", 6),
    ("l_hip", 0),
    ("l_knee", 8),
    ("r_hip", 0),
    ("r_knee", 10),
];

/// Which side of a [`BodySplit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Part1,
    Part2,
}

impl Part {
    pub fn other(self) -> Part {
        match self {
            Part::Part1 => Part::Part2,
            Part::Part2 => Part::Part1,
        }
    }
}

/// Disjoint partition of the joints into two nonempty sorted sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit")]
pub struct BodySplit {
    part1: Vec<usize>,
    part2: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    part1: Vec<usize>,
    part2: Vec<usize>,
}

impl TryFrom<RawSplit> for BodySplit {
    type Error = Error;

    fn try_from(raw: RawSplit) -> Result<Self> {
        let n = raw.part1.len() + raw.part2.len();
        BodySplit::new(raw.part1, raw.part2, n)
    }
}

impl BodySplit {
    pub fn new(mut part1: Vec<usize>, mut part2: Vec<usize>, joint_count: usize) -> Result<Self> {
        part1.sort_unstable();
        part2.sort_unstable();
        if part1.is_empty() || part2.is_empty() {
            return Err(structural!("both body parts must be nonempty"));
        }
        let mut owner = vec![0u8; joint_count];
        for (tag, part) in [(1u8, &part1), (2u8, &part2)] {
            for &j in part.iter() {
                if j >= joint_count {
                    return Err(structural!("joint {j} out of range for {joint_count} joints"));
                }
                if owner[j] != 0 {
                    return Err(structural!("joint {j} appears in more than one part"));
                }
                owner[j] = tag;
            }
        }
        if let Some(j) = owner.iter().position(|&o| o == 0) {
            return Err(structural!("joint {j} is not assigned to any part"));
        }
        Ok(Self { part1, part2 })
    }

    /// Part 1 as given, part 2 the complement.
    pub fn from_part1(part1: Vec<usize>, joint_count: usize) -> Result<Self> {
        let part2 = (0..joint_count).filter(|j| !part1.contains(j)).collect();
        Self::new(part1, part2, joint_count)
    }

    /// Lower body (root, hips, knees) as part 1 and everything else as part 2.
    pub fn lower_upper(skeleton: &Skeleton) -> Result<Self> {
        let root = skeleton.root_index();
        let lower: Vec<usize> = skeleton
            .joint_names()
            .iter()
            .enumerate()
            .filter(|(i, n)| *i == root || n.contains("hip") || n.contains("knee"))
            .map(|(i, _)| i)
            .collect();
        Self::from_part1(lower, skeleton.joint_count())
    }

    pub fn part(&self, which: Part) -> &[usize] {
        match which {
            Part::Part1 => &self.part1,
            Part::Part2 => &self.part2,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.part1.len() + self.part2.len()
    }

    /// Coordinate columns (three per joint) covered by a part.
    pub fn columns(&self, which: Part) -> Vec<usize> {
        joint_columns(self.part(which))
    }

    pub fn check_skeleton(&self, skeleton: &Skeleton) -> Result<()> {
        if self.joint_count() != skeleton.joint_count() {
            return Err(structural!(
                "body split covers {} joints but skeleton has {}",
                self.joint_count(),
                skeleton.joint_count()
            ));
        }
        Ok(())
    }
}

pub fn joint_columns(joints: &[usize]) -> Vec<usize> {
    joints.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect()
}

/// A pose sequence over one skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub skeleton: Skeleton,
    pub frames: Matrix,
    pub fps: f64,
}

impl MotionSequence {
    pub fn new(skeleton: Skeleton, frames: Matrix, fps: f64) -> Result<Self> {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(argument!("fps must be positive, got {fps}"));
        }
        if frames.rows() == 0 {
            return Err(structural!("motion sequence needs at least one frame"));
        }
        if frames.cols() != skeleton.dim() {
            return Err(structural!(
                "frames have {} columns, skeleton needs {}",
                frames.cols(),
                skeleton.dim()
            ));
        }
        if let Some(i) = frames.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(argument!(
                "non-finite coordinate at frame {}",
                i / frames.cols()
            ));
        }
        Ok(Self {
            skeleton,
            frames,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Frames `start..start + len` as a sequence on the same skeleton.
    pub fn window(&self, start: usize, len: usize) -> Result<MotionSequence> {
        if len == 0 || start + len > self.len() {
            return Err(argument!(
                "window {start}..{} outside sequence of {} frames",
                start + len,
                self.len()
            ));
        }
        Ok(MotionSequence {
            skeleton: self.skeleton.clone(),
            frames: self.frames.slice_rows(start, len),
            fps: self.fps,
        })
    }
}

/// Column-selected copy of one body part.
pub fn split_sequence(seq: &MotionSequence, split: &BodySplit, part: Part) -> Result<Matrix> {
    split.check_skeleton(&seq.skeleton)?;
    Ok(seq.frames.select_columns(&split.columns(part)))
}

/// Inverse of [`split_sequence`]: interleaves the part columns back in joint order.
pub fn merge_parts(part1: &Matrix, part2: &Matrix, split: &BodySplit) -> Result<Matrix> {
    let cols1 = split.columns(Part::Part1);
    let cols2 = split.columns(Part::Part2);
    if part1.cols() != cols1.len() || part2.cols() != cols2.len() || part1.rows() != part2.rows() {
        return Err(structural!("part matrices do not match the body split"));
    }
    let mut out = Matrix::zeros(part1.rows(), cols1.len() + cols2.len());
    for r in 0..out.rows() {
        let (a, b) = (part1.row(r), part2.row(r));
        let dst = out.row_mut(r);
        for (v, &c) in a.iter().zip(&cols1) {
            dst[c] = *v;
        }
        for (v, &c) in b.iter().zip(&cols2) {
            dst[c] = *v;
        }
    }
    Ok(out)
}

/// Subtracts the root joint position from every joint, per frame.
pub fn remove_global_translation(seq: &MotionSequence, root_index: usize) -> Result<MotionSequence> {
    let n = seq.skeleton.joint_count();
    if root_index >= n {
        return Err(argument!("root index {root_index} out of range for {n} joints"));
    }
    let mut frames = seq.frames.clone();
    for r in 0..frames.rows() {
        let row = frames.row_mut(r);
        let origin = [row[3 * root_index], row[3 * root_index + 1], row[3 * root_index + 2]];
        for j in 0..n {
            for k in 0..3 {
                row[3 * j + k] -= origin[k];
            }
        }
    }
    Ok(MotionSequence {
        skeleton: seq.skeleton.clone(),
        frames,
        fps: seq.fps,
    })
}

/// Same-length sequence sharing the first and last frame of `future`, with the
/// interior linearly interpolated per coordinate.
pub fn build_aux_sequence(future: &MotionSequence) -> Result<MotionSequence> {
    let frames = aux_frames(&future.frames)?;
    Ok(MotionSequence {
        skeleton: future.skeleton.clone(),
        frames,
        fps: future.fps,
    })
}

pub(crate) fn aux_frames(future: &Matrix) -> Result<Matrix> {
    let t = future.rows();
    if t < 2 {
        return Err(argument!("auxiliary sequence needs at least 2 frames, got {t}"));
    }
    let mut out = future.clone();
    let first = future.row(0);
    let last = future.row(t - 1);
    let denom = (t - 1) as f64;
    for k in 1..t - 1 {
        let w = k as f64 / denom;
        let row = out.row_mut(k);
        for c in 0..row.len() {
            row[c] = first[c] + w * (last[c] - first[c]);
        }
    }
    Ok(out)
}

/// Gesture performed by the arms once the future window starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureMode {
    None,
    Wave,
    Reach,
    Clap,
}

impl GestureMode {
    pub const ALL: [GestureMode; 4] = [
        GestureMode::None,
        GestureMode::Wave,
        GestureMode::Reach,
        GestureMode::Clap,
    ];
}

/// Parameters of one synthetic walker clip.
///
/// Lower-body joints depend only on `stride_frequency`, `stride_amplitude`,
/// `turn_rate` and `phase`; upper-body joints only on `arm_swing_amplitude`
/// and `gesture_mode`. Turning and gestures start at the first future frame,
/// so the observed past does not reveal them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGaitConfig {
    /// Hz.
    pub stride_frequency: f64,
    /// Knee arc length of the leg swing, model units.
    pub stride_amplitude: f64,
    /// Elbow arc length of the arm swing, model units.
    pub arm_swing_amplitude: f64,
    /// Lower-body yaw per frame after onset, radians.
    pub turn_rate: f64,
    pub gesture_mode: GestureMode,
    /// Gait phase, radians.
    pub phase: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticGaitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride_frequency > 0.0) {
            return Err(argument!("stride frequency must be positive"));
        }
        if self.stride_amplitude < 0.0 || self.arm_swing_amplitude < 0.0 {
            return Err(argument!("amplitudes must be nonnegative"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(argument!("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

impl Default for SyntheticGaitConfig {
    fn default() -> Self {
        Self {
            stride_frequency: 1.1,
            stride_amplitude: 0.14,
            arm_swing_amplitude: 0.06,
            turn_rate: 0.0,
            gesture_mode: GestureMode::None,
            phase: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Independent uniform ranges for the lower- and upper-body parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfigSampler {
    pub stride_frequency: (f64, f64),
    pub stride_amplitude: (f64, f64),
    pub turn_rate: (f64, f64),
    pub arm_swing_amplitude: (f64, f64),
    pub gestures: Vec<GestureMode>,
    pub noise_std: f64,
    pub fps: f64,
}

impl Default for GaitConfigSampler {
    fn default() -> Self {
        Self {
            stride_frequency: (0.8, 1.4),
            stride_amplitude: (0.08, 0.2),
            turn_rate: (-0.08, 0.08),
            arm_swing_amplitude: (0.02, 0.1),
            gestures: GestureMode::ALL.to_vec(),
            noise_std: 0.002,
            fps: 25.0,
        }
    }
}

impl GaitConfigSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticGaitConfig {
        fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
            lo + (hi - lo) * rng.random::<f64>()
        }
        // lower-body group
        let stride_frequency = uniform(rng, self.stride_frequency);
        let stride_amplitude = uniform(rng, self.stride_amplitude);
        let turn_rate = uniform(rng, self.turn_rate);
        let phase = uniform(rng, (0.0, 2.0 * PI));
        // upper-body group
        let arm_swing_amplitude = uniform(rng, self.arm_swing_amplitude);
        let gesture_mode = if self.gestures.is_empty() {
            GestureMode::None
        } else {
            self.gestures[rng.random_range(0..self.gestures.len())]
        };
        SyntheticGaitConfig {
            stride_frequency,
            stride_amplitude,
            arm_swing_amplitude,
            turn_rate,
            gesture_mode,
            phase,
            noise_std: self.noise_std,
            seed: rng.random(),
        }
    }
}

/// Observed past and ground-truth future of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPair {
    pub past: MotionSequence,
    pub future: MotionSequence,
}

const HIP_HALF_WIDTH: f64 = 0.12;
const THIGH: f64 = 0.45;
const HEAD_HEIGHT: f64 = 0.62;
const SHOULDER_HALF_WIDTH: f64 = 0.17;
const SHOULDER_HEIGHT: f64 = 0.48;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.25;
const ARM_SWING_HZ: f64 = 1.0;
const GESTURE_HZ: f64 = 2.0;
const GESTURE_RAMP_FRAMES: f64 = 6.0;
const ELBOW_BEND: f64 = 0.3;

fn yaw(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [v[0] * c + v[2] * s, v[1], -v[0] * s + v[2] * c]
}

fn add(a: [f64; 3], b: [f64; 3], scale: f64) -> [f64; 3] {
    [a[0] + scale * b[0], a[1] + scale * b[1], a[2] + scale * b[2]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn blend(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    normalize([
        (1.0 - w) * a[0] + w * b[0],
        (1.0 - w) * a[1] + w * b[1],
        (1.0 - w) * a[2] + w * b[2],
    ])
}

/// Arm segment directions (upper arm, forearm) for one side; `side` is +1 for
/// left and -1 for right.
fn arm_directions(
    config: &SyntheticGaitConfig,
    side: f64,
    time: f64,
    since_onset: f64,
    envelope: f64,
) -> ([f64; 3], [f64; 3]) {
    let swing = config.arm_swing_amplitude / UPPER_ARM
        * (2.0 * PI * ARM_SWING_HZ * time).sin()
        * side;
    let base_upper = [0.0, -swing.cos(), swing.sin()];
    let base_fore = [0.0, -(swing + ELBOW_BEND).cos(), (swing + ELBOW_BEND).sin()];
    let osc = (2.0 * PI * GESTURE_HZ * since_onset).sin();
    let target = match config.gesture_mode {
        GestureMode::None => None,
        GestureMode::Wave if side < 0.0 => {
            let a = 0.6 * osc;
            Some((normalize([-0.6, 0.8, 0.0]), [-a.sin(), a.cos(), 0.0]))
        }
        GestureMode::Wave => None,
        GestureMode::Reach => Some((normalize([0.0, 0.3, 1.0]), normalize([0.0, 0.35, 1.0]))),
        GestureMode::Clap => {
            let inward = 0.3 + 0.35 * (1.0 + osc);
            Some((
                normalize([-0.2 * side, -0.2, 1.0]),
                normalize([-inward * side, 0.0, 1.0]),
            ))
        }
    };
    match target {
        Some((u, f)) if envelope > 0.0 => (blend(base_upper, u, envelope), blend(base_fore, f, envelope)),
        _ => (base_upper, base_fore),
    }
}

/// Renders `past_frames + future_frames` frames of the walker for one config.
pub fn synthesize_walker_motion(
    skeleton: &Skeleton,
    config: &SyntheticGaitConfig,
    past_frames: usize,
    future_frames: usize,
    fps: f64,
) -> Result<MotionSequence> {
    if *skeleton != Skeleton::walker() {
        return Err(structural!("the synthetic generator drives the bundled walker skeleton only"));
    }
    config.validate()?;
    let total = past_frames + future_frames;
    let onset = past_frames as f64 - 1.0;
    let mut frames = Matrix::zeros(total, skeleton.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for f in 0..total {
        let time = f as f64 / fps;
        let after = (f as f64 - onset).max(0.0);
        let heading = config.turn_rate * after;
        let x = (after / GESTURE_RAMP_FRAMES).min(1.0);
        let envelope = x * x * (3.0 - 2.0 * x);
        let since_onset = after / fps;

        let mut joints = [[0.0; 3]; 12];
        // lower body
        let swing = config.stride_amplitude / THIGH
            * (2.0 * PI * config.stride_frequency * time + config.phase).sin();
        for (hip, knee, side) in [(8usize, 9usize, 1.0), (10, 11, -1.0)] {
            let s = swing * side;
            joints[hip] = yaw([HIP_HALF_WIDTH * side, 0.0, 0.0], heading);
            joints[knee] = add(joints[hip], yaw([0.0, -s.cos(), s.sin()], heading), THIGH);
        }
        // upper body
        joints[1] = [0.0, HEAD_HEIGHT, 0.0];
        for (shoulder, elbow, wrist, side) in [(2usize, 3usize, 4usize, 1.0), (5, 6, 7, -1.0)] {
            joints[shoulder] = [SHOULDER_HALF_WIDTH * side, SHOULDER_HEIGHT, 0.0];
            let (u, fo) = arm_directions(config, side, time, since_onset, envelope);
            joints[elbow] = add(joints[shoulder], u, UPPER_ARM);
            joints[wrist] = add(joints[elbow], fo, FOREARM);
        }

        let row = frames.row_mut(f);
        for (j, p) in joints.iter().enumerate() {
            row[3 * j..3 * j + 3].copy_from_slice(p);
        }
        // same draw order for every config, root excluded
        for v in row[3..].iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += config.noise_std * e;
        }
    }
    MotionSequence::new(skeleton.clone(), frames, fps)
}

/// Deterministic synthetic dataset of `count` (past, future) pairs.
pub fn generate_synthetic_dataset(
    skeleton: &Skeleton,
    count: usize,
    past_frames: usize,
    future_frames: usize,
    sampler: &GaitConfigSampler,
    seed: u64,
) -> Result<Vec<MotionPair>> {
    if past_frames < 2 || future_frames < 2 {
        return Err(argument!("past and future windows need at least 2 frames each"));
    }
    if *skeleton != Skeleton::walker() {
        return Err(structural!("the synthetic generator drives the bundled walker skeleton only"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let config = sampler.sample(&mut rng);
            let seq = synthesize_walker_motion(skeleton, &config, past_frames, future_frames, sampler.fps)?;
            Ok(MotionPair {
                past: seq.window(0, past_frames)?,
                future: seq.window(past_frames, future_frames)?,
            })
        })
        .collect()
}

/// On-disk motion document. Field order is part of the format.
#[derive(Serialize, Deserialize)]
struct MotionFile {
    fps: f64,
    joints: Vec<String>,
    parents: Vec<i32>,
    frames: Vec<Vec<f64>>,
}

pub fn motion_to_json(seq: &MotionSequence) -> String {
    let doc = MotionFile {
        fps: seq.fps,
        joints: seq.skeleton.joint_names().to_vec(),
        parents: seq.skeleton.parents().to_vec(),
        frames: seq.frames.iter_rows().map(|r| r.to_vec()).collect(),
    };
    let mut s = serde_json::to_string(&doc).expect("motion document serializes");
    s.push('\n');
    s
}

pub fn motion_from_json(text: &str) -> std::result::Result<MotionSequence, MotionParseError> {
    let doc: MotionFile = serde_json::from_str(text).map_err(MotionParseError::Json)?;
    let skeleton = Skeleton::new(doc.joints, doc.parents).map_err(MotionParseError::Invalid)?;
    let frames = Matrix::from_rows(&doc.frames).map_err(MotionParseError::Invalid)?;
    MotionSequence::new(skeleton, frames, doc.fps).map_err(MotionParseError::Invalid)
}

#[derive(Debug)]
pub enum MotionParseError {
    Json(serde_json::Error),
    Invalid(Error),
}

pub fn save_motion(path: &Path, seq: &MotionSequence) -> Result<()> {
    std::fs::write(path, motion_to_json(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    motion_from_json(&text).map_err(|e| match e {
        MotionParseError::Json(e) => Error::json(path, e),
        MotionParseError::Invalid(Error::Structural(m)) => {
            Error::Structural(format!("{}: {m}", path.display()))
        }
        MotionParseError::Invalid(e) => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_joint() -> Skeleton {
        Skeleton::new(vec!["a".into(), "b".into()], vec![-1, 0]).unwrap()
    }

    #[test]
    fn skeleton_rejects_bad_hierarchies() {
        let names = |n: usize| (0..n).map(|i| format!("j{i}")).collect::<Vec<_>>();
        assert!(Skeleton::new(names(2), vec![-1, -1]).is_err());
        assert!(Skeleton::new(names(3), vec![-1, 2, 1]).is_err());
        assert!(Skeleton::new(names(2), vec![-1, 5]).is_err());
        assert!(Skeleton::new(names(2), vec![0, 1]).is_err());
        assert!(Skeleton::new(vec!["x".into(), "x".into()], vec![-1, 0]).is_err());
        // parents need not precede children
        assert!(Skeleton::new(names(3), vec![2, 0, -1]).is_ok());
    }

    #[test]
    fn walker_shape_and_default_split() {
        let s = Skeleton::walker();
        assert_eq!(s.joint_count(), 12);
        assert_eq!(s.dim(), 36);
        let split = BodySplit::lower_upper(&s).unwrap();
        assert_eq!(split.part(Part::Part1), &[0, 8, 9, 10, 11]);
        assert_eq!(split.part(Part::Part2), &[1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn body_split_validation() {
        assert!(BodySplit::new(vec![0], vec![], 1).is_err());
        assert!(BodySplit::new(vec![0, 1], vec![1, 2], 3).is_err());
        assert!(BodySplit::new(vec![0], vec![2], 3).is_err());
        assert!(BodySplit::new(vec![1], vec![0, 2], 3).is_ok());
    }

    #[test]
    fn split_first_part_selects_columns() {
        let seq = MotionSequence::new(
            two_joint(),
            Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap(),
            25.0,
        )
        .unwrap();
        let split = BodySplit::new(vec![0], vec![1], 2).unwrap();
        let p1 = split_sequence(&seq, &split, Part::Part1).unwrap();
        assert_eq!(p1.as_slice(), &[1.0, 2.0, 3.0]);
        let bad = BodySplit::new(vec![0], vec![1, 2], 3).unwrap();
        assert!(matches!(
            split_sequence(&seq, &bad, Part::Part1),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn remove_translation_cases() {
        let s = two_joint();
        let zero = MotionSequence::new(s.clone(), Matrix::zeros(3, 6), 25.0).unwrap();
        assert_eq!(remove_global_translation(&zero, 0).unwrap(), zero);

        let base = Matrix::from_rows(&[[0.0, 0.0, 0.0, 1.0, 0.5, -2.0], [0.0, 0.0, 0.0, 0.3, 0.1, 0.2]]).unwrap();
        let shifted = Matrix::from_rows(&[[1.0, 2.0, 3.0, 2.0, 2.5, 1.0], [1.0, 2.0, 3.0, 1.3, 2.1, 3.2]]).unwrap();
        let out = remove_global_translation(&MotionSequence::new(s.clone(), shifted, 25.0).unwrap(), 0).unwrap();
        for (a, b) in out.frames.as_slice().iter().zip(base.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(remove_global_translation(&zero, 2).is_err());
    }

    #[test]
    fn aux_sequence_midpoint_and_errors() {
        let s = Skeleton::new(vec!["r".into()], vec![-1]).unwrap();
        let fut = MotionSequence::new(
            s.clone(),
            Matrix::from_rows(&[[0.0; 3], [7.0, -3.0, 2.0], [1.0; 3]]).unwrap(),
            25.0,
        )
        .unwrap();
        let aux = build_aux_sequence(&fut).unwrap();
        assert_eq!(aux.frames.row(1), &[0.5, 0.5, 0.5]);
        assert_eq!(aux.len(), 3);

        let one = MotionSequence::new(s.clone(), Matrix::zeros(1, 3), 25.0).unwrap();
        assert!(matches!(build_aux_sequence(&one), Err(Error::Argument(_))));

        let two = MotionSequence::new(s, Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap(), 25.0).unwrap();
        assert_eq!(build_aux_sequence(&two).unwrap(), two);
    }

    #[test]
    fn aux_of_linear_sequence_is_identity() {
        let s = Skeleton::new(vec!["r".into()], vec![-1]).unwrap();
        let rows: Vec<[f64; 3]> = (0..9).map(|k| [k as f64 * 0.25, 1.0 - k as f64 * 0.5, 2.0]).collect();
        let fut = MotionSequence::new(s, Matrix::from_rows(&rows).unwrap(), 25.0).unwrap();
        let aux = build_aux_sequence(&fut).unwrap();
        for (a, b) in aux.frames.as_slice().iter().zip(fut.frames.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let s = Skeleton::walker();
        let sampler = GaitConfigSampler::default();
        let a = generate_synthetic_dataset(&s, 1, 16, 32, &sampler, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].past.frames.rows(), a[0].past.frames.cols()), (16, 36));
        assert_eq!((a[0].future.frames.rows(), a[0].future.frames.cols()), (32, 36));
        let b = generate_synthetic_dataset(&s, 1, 16, 32, &sampler, 7).unwrap();
        let bits = |p: &MotionPair| {
            p.past.frames.as_slice().iter().chain(p.future.frames.as_slice()).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a[0]), bits(&b[0]));
        assert!(generate_synthetic_dataset(&s, 0, 16, 32, &sampler, 7).unwrap().is_empty());
        assert!(generate_synthetic_dataset(&s, 1, 1, 32, &sampler, 7).is_err());
        assert!(matches!(
            generate_synthetic_dataset(&two_joint(), 1, 16, 32, &sampler, 7),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn root_is_pinned_in_synthetic_data() {
        let s = Skeleton::walker();
        let data = generate_synthetic_dataset(&s, 3, 8, 8, &GaitConfigSampler::default(), 1).unwrap();
        for p in &data {
            for row in p.past.frames.iter_rows().chain(p.future.frames.iter_rows()) {
                assert_eq!(&row[..3], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn gesture_only_changes_upper_body() {
        let s = Skeleton::walker();
        let split = BodySplit::lower_upper(&s).unwrap();
        let base = SyntheticGaitConfig {
            turn_rate: 0.03,
            noise_std: 0.01,
            seed: 11,
            ..Default::default()
        };
        let waving = SyntheticGaitConfig {
            gesture_mode: GestureMode::Wave,
            ..base.clone()
        };
        let a = synthesize_walker_motion(&s, &base, 16, 32, 25.0).unwrap();
        let b = synthesize_walker_motion(&s, &waving, 16, 32, 25.0).unwrap();
        let lower_a = split_sequence(&a, &split, Part::Part1).unwrap();
        let lower_b = split_sequence(&b, &split, Part::Part1).unwrap();
        assert_eq!(lower_a, lower_b);
        let upper_a = split_sequence(&a, &split, Part::Part2).unwrap();
        let upper_b = split_sequence(&b, &split, Part::Part2).unwrap();
        assert_ne!(upper_a, upper_b);
        // the past does not reveal the gesture
        assert_eq!(upper_a.slice_rows(0, 16), upper_b.slice_rows(0, 16));
    }

    #[test]
    fn turning_only_changes_lower_body() {
        let s = Skeleton::walker();
        let split = BodySplit::lower_upper(&s).unwrap();
        let base = SyntheticGaitConfig {
            gesture_mode: GestureMode::Clap,
            noise_std: 0.01,
            seed: 3,
            ..Default::default()
        };
        let turning = SyntheticGaitConfig {
            turn_rate: -0.04,
            stride_amplitude: 0.2,
            ..base.clone()
        };
        let a = synthesize_walker_motion(&s, &base, 16, 32, 25.0).unwrap();
        let b = synthesize_walker_motion(&s, &turning, 16, 32, 25.0).unwrap();
        assert_eq!(
            split_sequence(&a, &split, Part::Part2).unwrap(),
            split_sequence(&b, &split, Part::Part2).unwrap()
        );
        assert_ne!(
            split_sequence(&a, &split, Part::Part1).unwrap(),
            split_sequence(&b, &split, Part::Part1).unwrap()
        );
    }

    #[test]
    fn motion_file_round_trip() {
        let s = Skeleton::walker();
        let data = generate_synthetic_dataset(&s, 1, 4, 4, &GaitConfigSampler::default(), 5).unwrap();
        let text = motion_to_json(&data[0].past);
        assert!(text.starts_with("{\"fps\":25.0,\"joints\":[\"root\""));
        let back = motion_from_json(&text).unwrap();
        assert_eq!(back, data[0].past);
    }
}
