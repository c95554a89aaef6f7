//! Trajectory datasets: on-disk layout, windowed features, resampling,
//! skeleton retargeting, stratified splits and a synthetic generator.
//!
//! A dataset directory holds `manifest.json` plus one CSV per agent per
//! trajectory. Every CSV starts with a header row naming its columns; rows
//! are frames in time order.
//!
//! ```json
//! {
//!   "window": 5,
//!   "h_kind": "positions",
//!   "r_kind": "joints",
//!   "h_columns": ["shoulder_x", "shoulder_y", "..."],
//!   "r_columns": ["shoulder_pitch", "..."],
//!   "trajectories": [
//!     {"label": "reach", "h_file": "t0000_h.csv", "r_file": "t0000_r.csv",
//!      "rate": 20.0, "split": "train", "phase_file": "t0000_phase.csv"}
//!   ]
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kin::KinematicChain;
use crate::{rng_from_seed, Rng};

/// Number of tracked human joints (shoulder, elbow, wrist).
pub const HUMAN_JOINTS: usize = 3;

pub const HUMAN_COLUMNS: [&str; 9] = [
    "shoulder_x", "shoulder_y", "shoulder_z", "elbow_x", "elbow_y", "elbow_z", "wrist_x", "wrist_y", "wrist_z",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// xyz per tracked joint; windows add per-frame deltas.
    Positions,
    /// One angle per robot joint.
    Joints,
}

impl FeatureKind {
    /// Width of one frame's contribution to a window.
    pub fn frame_width(self, columns: usize) -> usize {
        match self {
            FeatureKind::Positions => 2 * columns,
            FeatureKind::Joints => columns,
        }
    }

    fn min_frames(self, w: usize) -> usize {
        match self {
            FeatureKind::Positions => w + 1,
            FeatureKind::Joints => w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One recorded interaction. Frames are rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub label: String,
    /// T × 9 shoulder, elbow and wrist positions in metres, shoulder-origin.
    pub h_frames: DMatrix<f64>,
    /// T × m partner frames: joint angles in radians or tracked positions.
    pub r_frames: DMatrix<f64>,
    pub rate: f64,
    /// Ground-truth phase in [0, 1] per frame, known for synthetic data.
    pub phase: Option<Vec<f64>>,
}

impl TrajectoryPair {
    pub fn new(label: impl Into<String>, h_frames: DMatrix<f64>, r_frames: DMatrix<f64>, rate: f64) -> Result<Self> {
        let pair = TrajectoryPair {
            label: label.into(),
            h_frames,
            r_frames,
            rate,
            phase: None,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.h_frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_frames.nrows() != self.r_frames.nrows() {
            return Err(Error::Data(format!(
                "trajectory '{}': agents have {} and {} frames",
                self.label,
                self.h_frames.nrows(),
                self.r_frames.nrows()
            )));
        }
        if let Some(p) = &self.phase {
            if p.len() != self.len() {
                return Err(Error::Data(format!("trajectory '{}': phase length mismatch", self.label)));
            }
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Data(format!("trajectory '{}': invalid rate {}", self.label, self.rate)));
        }
        if self.h_frames.iter().chain(self.r_frames.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("trajectory '{}' contains non-finite values", self.label)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<TrajectoryPair>,
    /// Assignment per pair, parallel to `pairs`.
    pub split: Vec<Split>,
    pub window: usize,
    pub h_kind: FeatureKind,
    pub r_kind: FeatureKind,
    pub h_columns: Vec<String>,
    pub r_columns: Vec<String>,
}

impl Dataset {
    /// Wrap pairs with every trajectory assigned to training.
    pub fn new(
        pairs: Vec<TrajectoryPair>,
        window: usize,
        r_kind: FeatureKind,
        r_columns: Vec<String>,
    ) -> Result<Self> {
        let n = pairs.len();
        let ds = Dataset {
            pairs,
            split: vec![Split::Train; n],
            window,
            h_kind: FeatureKind::Positions,
            r_kind,
            h_columns: HUMAN_COLUMNS.iter().map(|s| s.to_string()).collect(),
            r_columns,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.split.len() != self.pairs.len() {
            return Err(Error::Data("split assignment does not cover every trajectory".into()));
        }
        for p in &self.pairs {
            p.validate()?;
            if p.h_frames.ncols() != self.h_columns.len() || p.r_frames.ncols() != self.r_columns.len() {
                return Err(Error::Data(format!(
                    "trajectory '{}' has {}/{} columns, manifest declares {}/{}",
                    p.label,
                    p.h_frames.ncols(),
                    p.r_frames.ncols(),
                    self.h_columns.len(),
                    self.r_columns.len()
                )));
            }
        }
        Ok(())
    }

    pub fn h_width(&self) -> usize {
        self.window * self.h_kind.frame_width(self.h_columns.len())
    }

    pub fn r_width(&self) -> usize {
        self.window * self.r_kind.frame_width(self.r_columns.len())
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.pairs.iter().map(|p| p.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.split[i] == which).collect()
    }

    /// Windowed features of both agents, each `width × (T − w + 1)`.
    pub fn features(&self, pair: &TrajectoryPair) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((
            window_features(&pair.h_frames, self.window, self.h_kind)?,
            window_features(&pair.r_frames, self.window, self.r_kind)?,
        ))
    }

    pub fn all_features(&self) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        self.pairs.par_iter().map(|p| self.features(p)).collect()
    }
}

/// Slide a `w`-frame window with stride 1 and stack each window into one
/// column. Positions frames contribute `[p_j, Δp_j]` per joint with
/// `Δp_t = p_t − p_{t−1}` and a zero delta on the first frame.
pub fn window_features(frames: &DMatrix<f64>, w: usize, kind: FeatureKind) -> Result<DMatrix<f64>> {
    let t = frames.nrows();
    if w == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    if t < kind.min_frames(w) {
        return Err(Error::Data(format!(
            "trajectory has {t} frames, {:?} windows of {w} need at least {}",
            kind,
            kind.min_frames(w)
        )));
    }
    let cols = frames.ncols();
    if kind == FeatureKind::Positions && !cols.is_multiple_of(3) {
        return Err(Error::Data(format!("position frames need xyz triples, got {cols} columns")));
    }
    let fw = kind.frame_width(cols);
    let per_frame: Vec<Vec<f64>> = (0..t)
        .map(|i| match kind {
            FeatureKind::Joints => frames.row(i).iter().copied().collect(),
            FeatureKind::Positions => {
                let mut out = Vec::with_capacity(fw);
                for j in 0..cols / 3 {
                    for k in 0..3 {
                        out.push(frames[(i, 3 * j + k)]);
                    }
                    for k in 0..3 {
                        let c = 3 * j + k;
                        out.push(if i == 0 { 0.0 } else { frames[(i, c)] - frames[(i - 1, c)] });
                    }
                }
                out
            }
        })
        .collect();
    let n = t - w + 1;
    let mut out = DMatrix::zeros(w * fw, n);
    for s in 0..n {
        for f in 0..w {
            for (k, v) in per_frame[s + f].iter().enumerate() {
                out[(f * fw + k, s)] = *v;
            }
        }
    }
    Ok(out)
}

/// Frame indices kept when resampling `t` frames from `source` to `target`
/// Hz: frame `⌊k·source/target⌋` for k = 0, 1, ...
pub fn downsample_indices(t: usize, source: f64, target: f64) -> Result<Vec<usize>> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument(format!("target rate must be positive, got {target}")));
    }
    if target > source * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample from {source} Hz to {target} Hz"
        )));
    }
    let ratio = source / target;
    let mut idx = Vec::new();
    for k in 0.. {
        // The small offset keeps exact ratios such as 1.5 from flooring
        // one below after rounding.
        let i = (k as f64 * ratio + 1e-9).floor() as usize;
        if i >= t {
            break;
        }
        idx.push(i);
    }
    Ok(idx)
}

pub fn downsample(pair: &TrajectoryPair, target_hz: f64) -> Result<TrajectoryPair> {
    let idx = downsample_indices(pair.len(), pair.rate, target_hz)?;
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)]);
    Ok(TrajectoryPair {
        label: pair.label.clone(),
        h_frames: pick(&pair.h_frames),
        r_frames: pick(&pair.r_frames),
        rate: target_hz,
        phase: pair.phase.as_ref().map(|p| idx.iter().map(|&i| p[i]).collect()),
    })
}

/// Shoulder, elbow and wrist positions for one frame of a 9-column matrix.
fn skeleton_row(frames: &DMatrix<f64>, i: usize) -> [Vector3<f64>; 3] {
    let p = |j: usize| Vector3::new(frames[(i, 3 * j)], frames[(i, 3 * j + 1)], frames[(i, 3 * j + 2)]);
    [p(0), p(1), p(2)]
}

/// Joint angles of a humanoid arm (`KinematicChain::humanoid_arm` layout)
/// that point its upper arm and forearm along the tracked segments.
///
/// With upper-arm direction `u` and forearm direction `f` (x forward, y to
/// the left, z up): roll = asin(u_y), pitch = atan2(−u_z, u_x), the elbow
/// bend is the angle between `u` and `f` (0 when straight), and the elbow
/// yaw is the azimuth of `f` about `u` measured in the upper-arm frame,
/// taken as 0 for a straight arm. Angles are clamped to the chain limits.
pub fn retarget_frame(shoulder: &Vector3<f64>, elbow: &Vector3<f64>, wrist: &Vector3<f64>, chain: &KinematicChain) -> Result<DVector<f64>> {
    if chain.dof() != 4 {
        return Err(Error::DimensionMismatch {
            what: "retargeting chain joints",
            expected: 4,
            got: chain.dof(),
        });
    }
    let upper = elbow - shoulder;
    let fore = wrist - elbow;
    let (lu, lf) = (upper.norm(), fore.norm());
    if !(lu > 1e-9) || !(lf > 1e-9) {
        return Err(Error::Data("zero-length limb segment in skeleton frame".into()));
    }
    let u = upper / lu;
    let f = fore / lf;
    let roll = u.y.clamp(-1.0, 1.0).asin();
    let pitch = (-u.z).atan2(u.x);
    let r_upper = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch) * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    let local = r_upper.inverse() * f;
    let bend = local.x.clamp(-1.0, 1.0).acos();
    let yaw = if local.y.hypot(local.z) < 1e-9 { 0.0 } else { local.z.atan2(local.y) };
    Ok(chain.clamp(&DVector::from_vec(vec![pitch, roll, yaw, bend])))
}

/// Retarget every frame of a `T × 9` skeleton stream to `T × 4` joints.
pub fn retarget_skeleton(h_frames: &DMatrix<f64>, chain: &KinematicChain) -> Result<DMatrix<f64>> {
    if h_frames.ncols() != 3 * HUMAN_JOINTS {
        return Err(Error::DimensionMismatch {
            what: "skeleton columns",
            expected: 3 * HUMAN_JOINTS,
            got: h_frames.ncols(),
        });
    }
    let mut out = DMatrix::zeros(h_frames.nrows(), 4);
    for i in 0..h_frames.nrows() {
        let [s, e, w] = skeleton_row(h_frames, i);
        let q = retarget_frame(&s, &e, &w, chain).map_err(|err| match err {
            Error::Data(m) => Error::Data(format!("frame {i}: {m}")),
            other => other,
        })?;
        out.set_row(i, &q.transpose());
    }
    Ok(out)
}

/// Shoulder, elbow and wrist positions of a humanoid-arm configuration.
pub fn arm_skeleton(q: &DVector<f64>, upper: f64, fore: f64) -> [Vector3<f64>; 3] {
    let r_upper = Rotation3::from_axis_angle(&Vector3::y_axis(), q[0]) * Rotation3::from_axis_angle(&Vector3::z_axis(), q[1]);
    let r_fore = r_upper
        * Rotation3::from_axis_angle(&Vector3::x_axis(), q[2])
        * Rotation3::from_axis_angle(&Vector3::z_axis(), q[3]);
    let elbow = r_upper * Vector3::new(upper, 0.0, 0.0);
    let wrist = elbow + r_fore * Vector3::new(fore, 0.0, 0.0);
    [Vector3::zeros(), elbow, wrist]
}

// ---------------------------------------------------------------------------
// Synthetic interactions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Both agents are tracked skeletons.
    Hhi,
    /// The partner is recorded as humanoid-arm joint angles.
    Hri,
}

/// One interaction type: both arms move from rest to a reach pose, hold,
/// and return. Poses are humanoid-arm joint vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub label: String,
    pub count: usize,
    #[serde(default = "default_h_rest")]
    pub h_rest: [f64; 4],
    #[serde(default = "default_h_reach")]
    pub h_reach: [f64; 4],
    #[serde(default = "default_r_rest")]
    pub r_rest: [f64; 4],
    #[serde(default = "default_r_reach")]
    pub r_reach: [f64; 4],
    /// Phase delay of the partner behind the leading agent.
    #[serde(default = "default_lag")]
    pub lag: f64,
}

fn default_lag() -> f64 {
    0.05
}
fn default_h_rest() -> [f64; 4] {
    [1.3, -0.15, 0.0, 0.3]
}
fn default_h_reach() -> [f64; 4] {
    [0.2, -0.4, 0.8, 1.0]
}
fn default_r_rest() -> [f64; 4] {
    [1.25, -0.2, 0.1, 0.35]
}
fn default_r_reach() -> [f64; 4] {
    [0.3, -0.5, 0.5, 0.9]
}

impl InteractionSpec {
    pub fn reach(label: impl Into<String>, count: usize) -> Self {
        InteractionSpec {
            label: label.into(),
            count,
            h_rest: default_h_rest(),
            h_reach: default_h_reach(),
            r_rest: default_r_rest(),
            r_reach: default_r_reach(),
            lag: default_lag(),
        }
    }

    /// Noise-free partner joints at the leading agent's phase.
    pub fn partner_pose(&self, phase: f64) -> DVector<f64> {
        blend(&self.r_rest, &self.r_reach, profile(phase - self.lag), 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub interactions: Vec<InteractionSpec>,
    pub mode: SynthMode,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_length")]
    pub length: usize,
    /// Standard deviation of per-frame joint noise, radians.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Relative spread of the leading agent's amplitude.
    #[serde(default = "default_amplitude_jitter")]
    pub amplitude_jitter: f64,
    /// Phase-warp exponents are drawn from [1/(1+j), 1+j].
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f64,
    #[serde(default = "default_upper")]
    pub upper_arm: f64,
    #[serde(default = "default_fore")]
    pub forearm: f64,
}

fn default_rate() -> f64 {
    20.0
}
fn default_length() -> usize {
    100
}
fn default_noise() -> f64 {
    0.01
}
fn default_window() -> usize {
    5
}
fn default_amplitude_jitter() -> f64 {
    0.15
}
fn default_phase_jitter() -> f64 {
    0.1
}
fn default_upper() -> f64 {
    0.3
}
fn default_fore() -> f64 {
    0.25
}

impl SynthSpec {
    pub fn single(label: &str, count: usize, mode: SynthMode) -> Self {
        SynthSpec {
            interactions: vec![InteractionSpec::reach(label, count)],
            mode,
            rate: default_rate(),
            length: default_length(),
            noise: default_noise(),
            window: default_window(),
            amplitude_jitter: default_amplitude_jitter(),
            phase_jitter: default_phase_jitter(),
            upper_arm: default_upper(),
            forearm: default_fore(),
        }
    }
}

/// Reach (0 → 1 over [0, 0.35]), hold, retract (1 → 0 over [0.65, 1]),
/// with smoothstep ramps.
fn profile(phase: f64) -> f64 {
    let smooth = |x: f64| {
        let x = x.clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    };
    if phase < 0.35 {
        smooth(phase / 0.35)
    } else if phase <= 0.65 {
        1.0
    } else {
        smooth((1.0 - phase) / 0.35)
    }
}

fn blend(rest: &[f64; 4], reach: &[f64; 4], s: f64, amplitude: f64) -> DVector<f64> {
    DVector::from_iterator(4, rest.iter().zip(reach).map(|(a, b)| a + amplitude * s * (b - a)))
}

/// Generate the trajectories listed in `spec`. The partner follows the
/// leading agent's phase through a fixed map, so its motion is a
/// deterministic function of that phase plus joint noise.
pub fn synth_generate(spec: &SynthSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.interactions.is_empty() || spec.interactions.iter().all(|i| i.count == 0) {
        return Err(Error::Config("synthetic spec lists no trajectories".into()));
    }
    if spec.length < spec.window + 1 {
        return Err(Error::Config(format!(
            "synthetic length {} too short for window {}",
            spec.length, spec.window
        )));
    }
    if !(spec.noise >= 0.0) || !(spec.rate > 0.0) {
        return Err(Error::Config("synthetic noise must be ≥ 0 and rate > 0".into()));
    }
    let chain = KinematicChain::humanoid_arm(spec.upper_arm, spec.forearm);
    let mut pairs = Vec::new();
    for inter in &spec.interactions {
        for _ in 0..inter.count {
            let amplitude = 1.0 + spec.amplitude_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let j = spec.phase_jitter;
            let warp = (1.0 + j).powf(2.0 * rng.random::<f64>() - 1.0);
            let t_len = spec.length;
            let mut phase = Vec::with_capacity(t_len);
            let mut h = DMatrix::zeros(t_len, 9);
            let mut r = DMatrix::zeros(t_len, if spec.mode == SynthMode::Hri { 4 } else { 9 });
            for t in 0..t_len {
                let ph = (t as f64 / (t_len - 1) as f64).powf(warp);
                phase.push(ph);
                let mut noise = || DVector::from_fn(4, |_, _| spec.noise * rng.sample::<f64, _>(StandardNormal));
                let qh = chain.clamp(&(blend(&inter.h_rest, &inter.h_reach, profile(ph), amplitude) + noise()));
                let qr = chain.clamp(&(inter.partner_pose(ph) + noise()));
                for (j, p) in arm_skeleton(&qh, spec.upper_arm, spec.forearm).iter().enumerate() {
                    for k in 0..3 {
                        h[(t, 3 * j + k)] = p[k];
                    }
                }
                match spec.mode {
                    SynthMode::Hri => r.set_row(t, &qr.transpose()),
                    SynthMode::Hhi => {
                        for (j, p) in arm_skeleton(&qr, spec.upper_arm, spec.forearm).iter().enumerate() {
                            for k in 0..3 {
                                r[(t, 3 * j + k)] = p[k];
                            }
                        }
                    }
                }
            }
            pairs.push(TrajectoryPair {
                label: inter.label.clone(),
                h_frames: h,
                r_frames: r,
                rate: spec.rate,
                phase: Some(phase),
            });
        }
    }
    let (r_kind, r_columns) = match spec.mode {
        SynthMode::Hri => (FeatureKind::Joints, chain.joints.iter().map(|j| j.name.clone()).collect()),
        SynthMode::Hhi => (FeatureKind::Positions, HUMAN_COLUMNS.iter().map(|s| s.to_string()).collect()),
    };
    Dataset::new(pairs, spec.window, r_kind, r_columns)
}

// ---------------------------------------------------------------------------
// Splits

/// Shuffle each label's trajectories with `seed` and send
/// `round(fraction · n_label)` of them to training.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in dataset.pairs.iter().enumerate() {
        by_label.entry(&p.label).or_default().push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut assignment = vec![Split::Test; dataset.pairs.len()];
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            assignment[i] = Split::Train;
        }
    }
    let mut out = dataset.clone();
    out.split = assignment;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Disk format

#[derive(Serialize, Deserialize)]
struct Manifest {
    window: usize,
    h_kind: FeatureKind,
    r_kind: FeatureKind,
    h_columns: Vec<String>,
    r_columns: Vec<String>,
    trajectories: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    label: String,
    h_file: String,
    r_file: String,
    rate: f64,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_file: Option<String>,
}

fn default_split() -> Split {
    Split::Train
}

/// Read a numeric CSV whose header must equal `expect`; rows become matrix rows.
pub fn read_csv_matrix(path: &Path, expect: &[String]) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != expect {
        return Err(Error::Data(format!(
            "{}: header {:?} does not match manifest columns {:?}",
            path.display(),
            header,
            expect
        )));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != expect.len() {
            return Err(Error::Data(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}: row {}: cannot parse '{field}'", path.display(), i + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, expect.len(), &values))
}

fn write_matrix(path: &Path, columns: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let loaded: Vec<(TrajectoryPair, Split)> = manifest
        .trajectories
        .par_iter()
        .map(|entry| {
            let h = read_csv_matrix(&dir.join(&entry.h_file), &manifest.h_columns)?;
            let r = read_csv_matrix(&dir.join(&entry.r_file), &manifest.r_columns)?;
            let phase = match &entry.phase_file {
                Some(f) => Some(read_csv_matrix(&dir.join(f), &["phase".to_string()])?.as_slice().to_vec()),
                None => None,
            };
            let pair = TrajectoryPair {
                label: entry.label.clone(),
                h_frames: h,
                r_frames: r,
                rate: entry.rate,
                phase,
            };
            pair.validate()?;
            Ok((pair, entry.split))
        })
        .collect::<Result<_>>()?;
    let (pairs, split) = loaded.into_iter().unzip();
    let ds = Dataset {
        pairs,
        split,
        window: manifest.window,
        h_kind: manifest.h_kind,
        r_kind: manifest.r_kind,
        h_columns: manifest.h_columns,
        r_columns: manifest.r_columns,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.pairs.len());
    for (i, (pair, s)) in dataset.pairs.iter().zip(&dataset.split).enumerate() {
        let h_file = format!("t{i:04}_h.csv");
        let r_file = format!("t{i:04}_r.csv");
        write_matrix(&dir.join(&h_file), &dataset.h_columns, &pair.h_frames)?;
        write_matrix(&dir.join(&r_file), &dataset.r_columns, &pair.r_frames)?;
        let phase_file = match &pair.phase {
            Some(p) => {
                let f = format!("t{i:04}_phase.csv");
                write_matrix(&dir.join(&f), &["phase".to_string()], &DMatrix::from_column_slice(p.len(), 1, p))?;
                Some(f)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            label: pair.label.clone(),
            h_file,
            r_file,
            rate: pair.rate,
            split: *s,
            phase_file,
        });
    }
    let manifest = Manifest {
        window: dataset.window,
        h_kind: dataset.h_kind,
        r_kind: dataset.r_kind,
        h_columns: dataset.h_columns.clone(),
        r_columns: dataset.r_columns.clone(),
        trajectories: entries,
    };
    let path: PathBuf = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Convert a long-format CSV (`trajectory,label,<h columns...>,<r columns...>`,
/// one row per frame, recorded at `source_hz`) into a dataset, resampled to
/// `target_hz`.
pub fn convert_long_csv(
    path: impl AsRef<Path>,
    h_columns: usize,
    r_kind: FeatureKind,
    source_hz: f64,
    target_hz: f64,
    window: usize,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 + h_columns + 1 || header[0] != "trajectory" || header[1] != "label" {
        return Err(Error::Data(format!(
            "{}: expected header 'trajectory,label,' followed by {h_columns} human columns and at least one partner column",
            path.display()
        )));
    }
    let r_columns: Vec<String> = header[2 + h_columns..].to_vec();
    let mut groups: BTreeMap<String, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len())));
        }
        let id = rec[0].to_string();
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (rec[1].to_string(), Vec::new(), Vec::new())
        });
        for (k, field) in rec.iter().enumerate().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}: row {}: cannot parse '{field}'", path.display(), i + 1)))?;
            if k < 2 + h_columns {
                entry.1.push(v);
            } else {
                entry.2.push(v);
            }
        }
    }
    let mut pairs = Vec::new();
    for id in order {
        let (label, h, r) = groups.remove(&id).expect("grouped id");
        let t = h.len() / h_columns;
        let pair = TrajectoryPair::new(
            label,
            DMatrix::from_row_slice(t, h_columns, &h),
            DMatrix::from_row_slice(t, r_columns.len(), &r),
            source_hz,
        )?;
        pairs.push(downsample(&pair, target_hz)?);
    }
    let mut ds = Dataset::new(pairs, window, r_kind, r_columns)?;
    if h_columns != HUMAN_COLUMNS.len() {
        ds.h_columns = header[2..2 + h_columns].to_vec();
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn paper_feature_widths() {
        let h = DMatrix::from_fn(12, 9, |r, c| (r * 9 + c) as f64 * 0.01);
        let r = DMatrix::from_fn(12, 4, |r, c| (r + c) as f64 * 0.1);
        let fh = window_features(&h, 5, FeatureKind::Positions).unwrap();
        let fr = window_features(&r, 5, FeatureKind::Joints).unwrap();
        assert_eq!(fh.shape(), (90, 8));
        assert_eq!(fr.shape(), (20, 8));
    }

    #[test]
    fn constant_positions_have_zero_deltas() {
        let h = DMatrix::from_fn(8, 9, |_, c| c as f64 + 0.5);
        let f = window_features(&h, 5, FeatureKind::Positions).unwrap();
        for s in 0..f.ncols() {
            for frame in 0..5 {
                for j in 0..3 {
                    for k in 0..3 {
                        assert_eq!(f[(frame * 18 + j * 6 + 3 + k, s)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn window_layout_matches_manual_stacking() {
        let h = DMatrix::from_fn(7, 3, |r, c| (r * r) as f64 + c as f64 * 10.0);
        let f = window_features(&h, 2, FeatureKind::Positions).unwrap();
        // Window starting at frame 3: [p3, p3 - p2, p4, p4 - p3].
        let col = f.column(3);
        let p = |t: usize| (t * t) as f64;
        assert_eq!(col[0], p(3));
        assert_eq!(col[3], p(3) - p(2));
        assert_eq!(col[6], p(4));
        assert_eq!(col[9], p(4) - p(3));
        assert_eq!(col[7], p(4) + 10.0);
        // First window: zero delta on frame 0.
        assert_eq!(f[(3, 0)], 0.0);
    }

    #[test]
    fn too_short_trajectories_rejected() {
        let h = DMatrix::zeros(5, 9);
        assert!(matches!(window_features(&h, 5, FeatureKind::Positions), Err(Error::Data(_))));
        assert!(window_features(&DMatrix::zeros(5, 4), 5, FeatureKind::Joints).is_ok());
        assert!(window_features(&DMatrix::zeros(4, 4), 5, FeatureKind::Joints).is_err());
    }

    #[test]
    fn downsample_thirty_to_twenty_keeps_two_of_three() {
        for t in 1..40usize {
            let idx = downsample_indices(t, 30.0, 20.0).unwrap();
            // Oracle: frame i survives unless i ≡ 2 (mod 3).
            let expect: Vec<usize> = (0..t).filter(|i| i % 3 != 2).collect();
            assert_eq!(idx, expect);
            assert_eq!(idx.len(), (2 * t).div_ceil(3));
        }
    }

    #[test]
    fn downsample_integer_stride_and_identity() {
        let idx = downsample_indices(10, 60.0, 20.0).unwrap();
        assert_eq!(idx, vec![0, 3, 6, 9]);
        assert_eq!(downsample_indices(7, 20.0, 20.0).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(downsample_indices(7, 20.0, 0.0).is_err());
        assert!(downsample_indices(7, 20.0, -5.0).is_err());
        let pair = TrajectoryPair::new("x", DMatrix::from_fn(9, 9, |r, _| r as f64), DMatrix::from_fn(9, 4, |r, _| r as f64), 60.0).unwrap();
        let d = downsample(&pair, 20.0).unwrap();
        assert_eq!(d.rate, 20.0);
        assert_eq!(d.h_frames.column(0).as_slice(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn retarget_canonical_poses() {
        let chain = KinematicChain::humanoid_arm(0.3, 0.25);
        let s = Vector3::zeros();
        // Hanging straight down: pitch π/2, straight elbow. Roll sits at the
        // limit closest to zero.
        let q = retarget_frame(&s, &Vector3::new(0.0, 0.0, -0.3), &Vector3::new(0.0, 0.0, -0.55), &chain).unwrap();
        assert_abs_diff_eq!(q[0], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], -0.0087, epsilon = 1e-12);
        assert_abs_diff_eq!(q[3], 0.0087, epsilon = 1e-12);
        // Forearm perpendicular to the upper arm.
        let q = retarget_frame(&s, &Vector3::new(0.3, 0.0, 0.0), &Vector3::new(0.3, 0.0, -0.25), &chain).unwrap();
        assert_abs_diff_eq!(q[3], std::f64::consts::FRAC_PI_2.min(1.5620), epsilon = 1e-12);
        let wide = KinematicChain {
            joints: chain
                .joints
                .iter()
                .cloned()
                .map(|mut j| {
                    j.limits = [-4.0, 4.0];
                    j
                })
                .collect(),
            ..chain.clone()
        };
        let q = retarget_frame(&s, &Vector3::new(0.3, 0.0, 0.0), &Vector3::new(0.3, 0.0, -0.25), &wide).unwrap();
        assert_abs_diff_eq!(q[3], std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn retarget_rejects_degenerate_limbs() {
        let chain = KinematicChain::humanoid_arm(0.3, 0.25);
        let z = Vector3::zeros();
        assert!(retarget_frame(&z, &z, &Vector3::x(), &chain).is_err());
        assert!(retarget_frame(&z, &Vector3::x(), &Vector3::x(), &chain).is_err());
    }

    #[test]
    fn retarget_round_trip_through_fk() {
        let chain = KinematicChain::humanoid_arm(0.3, 0.25);
        let mut rng = rng_from_seed(11);
        let (lo, hi) = (chain.lower(), chain.upper());
        for _ in 0..500 {
            let q = DVector::from_fn(4, |i, _| rng.random_range(lo[i]..hi[i]));
            let [s, e, w] = arm_skeleton(&q, 0.3, 0.25);
            // The skeleton helper and the chain agree on the wrist.
            assert!((chain.fk(&q).unwrap() - w).norm() < 1e-12);
            let back = retarget_frame(&s, &e, &w, &chain).unwrap();
            let wrist = chain.fk(&back).unwrap();
            assert!((wrist - w).norm() < 5e-3, "wrist error {}", (wrist - w).norm());
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let spec = SynthSpec::single("reach", 4, SynthMode::Hri);
        let a = synth_generate(&spec, &mut rng_from_seed(3)).unwrap();
        let b = synth_generate(&spec, &mut rng_from_seed(3)).unwrap();
        let c = synth_generate(&spec, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.pairs.len(), 4);
        assert_eq!(a.h_width(), 90);
        assert_eq!(a.r_width(), 20);
    }

    #[test]
    fn synth_rejects_empty_spec() {
        let mut spec = SynthSpec::single("reach", 0, SynthMode::Hhi);
        assert!(synth_generate(&spec, &mut rng_from_seed(0)).is_err());
        spec.interactions.clear();
        assert!(synth_generate(&spec, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn noiseless_partner_is_a_function_of_phase() {
        let mut spec = SynthSpec::single("reach", 5, SynthMode::Hri);
        spec.noise = 0.0;
        let ds = synth_generate(&spec, &mut rng_from_seed(9)).unwrap();
        let inter = &spec.interactions[0];
        for p in &ds.pairs {
            for (t, ph) in p.phase.as_ref().unwrap().iter().enumerate() {
                let g = inter.partner_pose(*ph);
                for j in 0..4 {
                    assert_abs_diff_eq!(p.r_frames[(t, j)], g[j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn noisy_partner_bayes_floor_is_noise_variance() {
        // Oracle: bin partner joints by true phase over many trajectories and
        // regress on the bin means; the residual should approach σ².
        let sigma = 0.02;
        let mut spec = SynthSpec::single("reach", 200, SynthMode::Hri);
        spec.noise = sigma;
        let ds = synth_generate(&spec, &mut rng_from_seed(21)).unwrap();
        let bins = 200;
        let mut sum = vec![[0.0; 4]; bins];
        let mut count = vec![0usize; bins];
        let bin = |ph: f64| ((ph * bins as f64) as usize).min(bins - 1);
        for p in &ds.pairs {
            for (t, ph) in p.phase.as_ref().unwrap().iter().enumerate() {
                let b = bin(*ph);
                count[b] += 1;
                for j in 0..4 {
                    sum[b][j] += p.r_frames[(t, j)];
                }
            }
        }
        let (mut sse, mut n) = (0.0, 0usize);
        for p in &ds.pairs {
            for (t, ph) in p.phase.as_ref().unwrap().iter().enumerate() {
                let b = bin(*ph);
                if count[b] < 20 {
                    continue;
                }
                for j in 0..4 {
                    let mean = sum[b][j] / count[b] as f64;
                    sse += (p.r_frames[(t, j)] - mean).powi(2);
                    n += 1;
                }
            }
        }
        let mse = sse / n as f64;
        let floor = sigma * sigma;
        assert!((mse / floor - 1.0).abs() < 0.15, "binned mse {mse} vs σ² {floor}");
    }

    fn labelled(counts: &[(&str, usize)]) -> Dataset {
        let pairs = counts
            .iter()
            .flat_map(|(l, n)| {
                (0..*n).map(move |i| {
                    TrajectoryPair::new(*l, DMatrix::from_element(6, 9, i as f64), DMatrix::from_element(6, 4, 0.0), 20.0).unwrap()
                })
            })
            .collect();
        Dataset::new(pairs, 5, FeatureKind::Joints, (0..4).map(|i| format!("q{i}")).collect()).unwrap()
    }

    #[test]
    fn stratified_split_counts() {
        // Per-label rounding of 0.8 × (32, 38, 70, 49) gives 26 + 30 + 56 + 39
        // training trajectories out of 189.
        let ds = labelled(&[("waving", 32), ("handshake", 38), ("rocket", 70), ("parachute", 49)]);
        let s = split(&ds, 0.8, 1).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 151);
        assert_eq!(s.indices(Split::Test).len(), 38);
        assert_eq!(s, split(&ds, 0.8, 1).unwrap());
        assert_ne!(s.split, split(&ds, 0.8, 2).unwrap().split);
        assert!(split(&ds, 1.0, 1).is_err());
        assert!(split(&ds, 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn window_deltas_telescope(t in 7usize..20, w in 2usize..6, seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let h = DMatrix::from_fn(t, 9, |_, _| rng.random_range(-1.0..1.0));
            let f = window_features(&h, w, FeatureKind::Positions).unwrap();
            prop_assert_eq!(f.nrows(), w * 18);
            for s in 0..f.ncols() {
                for j in 0..3 {
                    for k in 0..3 {
                        let pos = |frame: usize| f[(frame * 18 + j * 6 + k, s)];
                        let delta = |frame: usize| f[(frame * 18 + j * 6 + 3 + k, s)];
                        let sum: f64 = (1..w).map(delta).sum();
                        prop_assert!((sum - (pos(w - 1) - pos(0))).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn split_is_disjoint_exhaustive_and_stratified(
            a in 1usize..30, b in 1usize..30, frac in 0.05f64..0.95, seed in 0u64..500
        ) {
            let ds = labelled(&[("a", a), ("b", b)]);
            let s = split(&ds, frac, seed).unwrap();
            prop_assert_eq!(s.indices(Split::Train).len() + s.indices(Split::Test).len(), a + b);
            for (label, n) in [("a", a), ("b", b)] {
                let n_train = s.indices(Split::Train).iter().filter(|&&i| s.pairs[i].label == label).count();
                prop_assert!((n_train as f64 - frac * n as f64).abs() <= 1.0);
            }
        }

        #[test]
        fn window_width_is_w_times_frame_width(t in 6usize..15, w in 1usize..6, m in 1usize..7) {
            let r = DMatrix::from_element(t, m, 0.5);
            let f = window_features(&r, w, FeatureKind::Joints).unwrap();
            prop_assert_eq!(f.nrows(), w * m);
            prop_assert_eq!(f.ncols(), t - w + 1);
        }
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let spec = SynthSpec::single("reach", 3, SynthMode::Hri);
        let ds = split(&synth_generate(&spec, &mut rng_from_seed(5)).unwrap(), 0.5, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn load_reports_missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path().join("nope")).unwrap_err();
        assert!(err.to_string().contains("nope"));
        let spec = SynthSpec::single("reach", 1, SynthMode::Hri);
        let ds = synth_generate(&spec, &mut rng_from_seed(5)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join("t0000_r.csv");
        let mut text = fs::read_to_string(&f).unwrap();
        text.push_str("1,2,x,4\n");
        fs::write(&f, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("cannot parse"));
    }
}
