//! Metrics, significance testing and the experiment driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, split, synth_generate, Dataset, Split, SynthMode, SynthSpec};
use crate::error::{Error, Result};
use crate::infer::predict_windows;
use crate::hmm::{forward, most_likely, Block};
use crate::train::{joint_latents, train_hhi, train_hri, write_trace, ModelBundle, TrainConfig, Trained};
use crate::vae::Variant;
use crate::rng_from_seed;

/// Mean squared error over every entry of two aligned window matrices.
pub fn mse(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Data(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Data("empty prediction".into()));
    }
    Ok((pred - gt).norm_squared() / gt.len() as f64)
}

/// MSE restricted to the newest frame of each window (`frame_width` rows
/// at the bottom of every column).
pub fn mse_last_frame(pred: &DMatrix<f64>, gt: &DMatrix<f64>, frame_width: usize) -> Result<f64> {
    if frame_width == 0 || frame_width > gt.nrows() {
        return Err(Error::InvalidArgument(format!("frame width {frame_width} out of range")));
    }
    let r = gt.nrows() - frame_width;
    if pred.shape() != gt.shape() {
        return mse(pred, gt);
    }
    mse(&pred.rows(r, frame_width).into_owned(), &gt.rows(r, frame_width).into_owned())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the pooled samples, with the tie-group sizes.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Standard normal upper tail via the complementary error function
/// (Numerical Recipes erfc approximation, relative error < 1.2e-7).
fn normal_sf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * x.abs());
    let poly = -x * x - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let erfc = t * poly.exp();
    0.5 * if x >= 0.0 { erfc } else { 2.0 - erfc }
}

/// Two-sided Mann-Whitney U test. Samples smaller than 8 on both sides
/// use exact enumeration over all rank assignments; larger ones use the
/// normal approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (na, nb) = (a.len(), b.len());
    if na < 3 || nb < 3 {
        return Err(Error::InvalidArgument(format!("Mann-Whitney needs at least 3 values per sample, got {na} and {nb}")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Mann-Whitney samples must be finite".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = mid_ranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let mean = (na * nb) as f64 / 2.0;
    if ties.len() == 1 {
        return Ok(MannWhitney { u, p: 1.0, exact: na < 8 && nb < 8 });
    }
    if na < 8 && nb < 8 {
        let n = na + nb;
        let dev = (u - mean).abs();
        let (mut hits, mut total) = (0u64, 0u64);
        // Every subset of size na as a bitmask.
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            let r: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            let uu = r - (na * (na + 1)) as f64 / 2.0;
            total += 1;
            if (uu - mean).abs() >= dev - 1e-9 {
                hits += 1;
            }
        }
        return Ok(MannWhitney {
            u,
            p: hits as f64 / total as f64,
            exact: true,
        });
    }
    let n = (na + nb) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(MannWhitney {
        u,
        p: (2.0 * normal_sf(z)).min(1.0),
        exact: false,
    })
}

/// Everything an experiment run needs. Paths are relative to the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Human-human dataset directory. Generated from `synth` when absent.
    #[serde(default)]
    pub hhi_dataset: Option<PathBuf>,
    /// Human-robot dataset directory. Generated from `synth` when absent.
    #[serde(default)]
    pub hri_dataset: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub synth_seed: u64,
    #[serde(default = "default_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Kinematic chain JSON for rollouts and IK; the 4-DoF humanoid arm
    /// when absent.
    #[serde(default)]
    pub chain: Option<PathBuf>,
    /// Published reference MSE per interaction label and variant name.
    #[serde(default)]
    pub reference: BTreeMap<String, BTreeMap<String, f64>>,
    /// Write per-trajectory latent and mixing-weight dumps.
    #[serde(default = "default_true")]
    pub dumps: bool,
}

fn default_fraction() -> f64 {
    0.8
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("no variants to evaluate".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.synth.is_none() && (self.hhi_dataset.is_none() || self.hri_dataset.is_none()) {
            return Err(Error::Config("give both dataset paths or a synthetic spec".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON of the config, plus the
    /// seed when given; first 16 hex digits. The output directory and dump
    /// switch do not affect results and are left out.
    pub fn fingerprint(&self, seed: Option<u64>) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
            map.remove("dumps");
        }
        let mut h = Sha256::new();
        h.update(value.to_string().as_bytes());
        if let Some(s) = seed {
            h.update(format!("|seed={s}").as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryResult {
    pub seed: u64,
    pub variant: Variant,
    pub label: String,
    pub trajectory: usize,
    pub mse: f64,
    pub mse_last: f64,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub variant: Variant,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_last: f64,
    pub std_last: f64,
    pub reference: Option<f64>,
    /// Within ±50% of the reference.
    pub agrees: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PValueRow {
    pub label: String,
    pub a: Variant,
    pub b: Variant,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fingerprint: String,
    pub summary: Vec<SummaryRow>,
    pub p_values: Vec<PValueRow>,
    pub trajectories: Vec<TrajectoryResult>,
}

impl EvalReport {
    pub fn row(&self, label: &str, variant: Variant) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.label == label && r.variant == variant)
    }

    pub fn p_value(&self, label: &str, a: Variant, b: Variant) -> Option<f64> {
        self.p_values
            .iter()
            .find(|r| r.label == label && ((r.a == a && r.b == b) || (r.a == b && r.b == a)))
            .map(|r| r.p)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,label,variant,other,n,mean,std,mean_last,std_last,p_value,reference,agrees,fingerprint\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.summary {
            let _ = writeln!(
                s,
                "summary,{},{},,{},{},{},{},{},,{},{},{}",
                r.label,
                r.variant,
                r.n,
                r.mean,
                r.std,
                r.mean_last,
                r.std_last,
                opt(r.reference),
                r.agrees.map(|a| a.to_string()).unwrap_or_default(),
                self.fingerprint
            );
        }
        for r in &self.p_values {
            let _ = writeln!(s, "p_value,{},{},{},,,,,,{},,,{}", r.label, r.a, r.b, r.p, self.fingerprint);
        }
        s
    }

    pub fn trajectories_csv(&self) -> String {
        let mut s = String::from("seed,variant,label,trajectory,mse,mse_last,fingerprint\n");
        for r in &self.trajectories {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.seed, r.variant, r.label, r.trajectory, r.mse, r.mse_last, r.fingerprint
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Conditional prediction error\n\n");
        let _ = writeln!(s, "Config fingerprint `{}`.\n", self.fingerprint);
        s.push_str("| interaction | variant | n | window MSE | last-frame MSE | reference |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.summary {
            let reference = match (r.reference, r.agrees) {
                (Some(v), Some(true)) => format!("{v} (within 50%)"),
                (Some(v), _) => format!("{v} (outside 50%)"),
                _ => String::new(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.5} ± {:.5} | {:.5} ± {:.5} | {} |",
                r.label, r.variant, r.n, r.mean, r.std, r.mean_last, r.std_last, reference
            );
        }
        if !self.p_values.is_empty() {
            s.push_str("\n## Mann-Whitney U (per-trajectory MSE)\n\n| interaction | a | b | p |\n|---|---|---|---|\n");
            for r in &self.p_values {
                let _ = writeln!(s, "| {} | {} | {} | {:.4} |", r.label, r.a, r.b, r.p);
            }
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn stage<T>(name: &str, fingerprint: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        fingerprint: fingerprint.to_string(),
        source: Box::new(e),
    })
}

/// Human-human and human-robot datasets with a shared split.
pub fn experiment_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (hhi, hri) = match (&cfg.hhi_dataset, &cfg.hri_dataset, &cfg.synth) {
        (Some(h), Some(r), _) => (load_dataset(h)?, load_dataset(r)?),
        (_, _, Some(spec)) => {
            // Both modes consume the generator's stream identically, so the
            // two datasets describe the same motions.
            let mut s = spec.clone();
            s.mode = SynthMode::Hhi;
            let hhi = synth_generate(&s, &mut rng_from_seed(cfg.synth_seed))?;
            s.mode = SynthMode::Hri;
            let hri = synth_generate(&s, &mut rng_from_seed(cfg.synth_seed))?;
            (hhi, hri)
        }
        _ => return Err(Error::Config("give both dataset paths or a synthetic spec".into())),
    };
    let presplit = |d: &Dataset| d.split.contains(&Split::Test);
    let hhi = if presplit(&hhi) { hhi } else { split(&hhi, cfg.split_fraction, cfg.split_seed)? };
    let hri = if presplit(&hri) { hri } else { split(&hri, cfg.split_fraction, cfg.split_seed)? };
    Ok((hhi, hri))
}

/// Per-trajectory conditional prediction errors on the test split.
pub fn evaluate_bundle(bundle: &ModelBundle, ds: &Dataset, fingerprint: &str) -> Result<Vec<TrajectoryResult>> {
    let fw = bundle.features.r_frame_width();
    ds.indices(Split::Test)
        .into_iter()
        .map(|i| {
            let pair = &ds.pairs[i];
            let (x_h, x_r) = ds.features(pair)?;
            let pred = predict_windows(bundle, &pair.label, &x_h)?;
            Ok(TrajectoryResult {
                seed: bundle.seed,
                variant: bundle.variant,
                label: pair.label.clone(),
                trajectory: i,
                mse: mse(&pred.r_windows, &x_r)?,
                mse_last: mse_last_frame(&pred.r_windows, &x_r, fw)?,
                fingerprint: fingerprint.to_string(),
            })
        })
        .collect()
}

fn write_dumps(bundle: &ModelBundle, ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in ds.indices(Split::Test) {
        let pair = &ds.pairs[i];
        let (x_h, _) = ds.features(pair)?;
        let pred = predict_windows(bundle, &pair.label, &x_h)?;
        let mut s = String::from("t");
        let (dh, dr, n) = (pred.latent_h.nrows(), pred.latent_r.nrows(), pred.alpha.values.ncols());
        for k in 0..dh {
            let _ = write!(s, ",z_h{}", k + 1);
        }
        for k in 0..dr {
            let _ = write!(s, ",z_r{}", k + 1);
        }
        for k in 0..n {
            let _ = write!(s, ",alpha_{}", k + 1);
        }
        s.push('\n');
        for t in 0..pred.latent_h.ncols() {
            let _ = write!(s, "{t}");
            for v in pred.latent_h.column(t).iter().chain(pred.latent_r.column(t).iter()) {
                let _ = write!(s, ",{v}");
            }
            for v in pred.alpha.values.row(t).iter() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        let path = dir.join(format!("t{i:04}.csv"));
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Train every seed and variant, evaluate on the test split and write
/// `report.csv`, `report.md`, `trajectories.csv`, checkpoints, loss traces
/// and (optionally) latent dumps under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let fp = cfg.fingerprint(None);
    stage("config", &fp, cfg.validate())?;
    let (hhi, hri) = stage("data", &fp, experiment_datasets(cfg))?;
    let out = &cfg.out_dir;
    stage("output", &fp, fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;

    let per_seed: Vec<Vec<TrajectoryResult>> = cfg
        .train
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<TrajectoryResult>> {
            let sfp = cfg.fingerprint(Some(seed));
            let dir = out.join(format!("seed_{seed}"));
            stage("output", &sfp, fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)))?;
            let base = stage("train-hhi", &sfp, train_hhi(&hhi, &cfg.train, seed, None))?;
            stage("checkpoint", &sfp, base.bundle.save(dir.join("hhi.json")))?;
            stage("checkpoint", &sfp, write_trace(dir.join("hhi_trace.csv"), &base.trace))?;
            let mut results = Vec::new();
            for &variant in &cfg.variants {
                let tc = TrainConfig { variant, ..cfg.train.clone() };
                let trained = stage(&format!("train-hri {variant}"), &sfp, train_hri(&hri, &base.bundle, &tc, seed))?;
                let name = format!("hri_{}", variant.as_str().replace('.', "_"));
                stage("checkpoint", &sfp, trained.bundle.save(dir.join(format!("{name}.json"))))?;
                stage("checkpoint", &sfp, write_trace(dir.join(format!("{name}_trace.csv")), &trained.trace))?;
                results.extend(stage("evaluate", &sfp, evaluate_bundle(&trained.bundle, &hri, &sfp))?);
                if cfg.dumps {
                    stage("dump", &sfp, write_dumps(&trained.bundle, &hri, &dir.join("dumps").join(&name)))?;
                }
            }
            Ok(results)
        })
        .collect::<Result<_>>()?;
    let trajectories: Vec<TrajectoryResult> = per_seed.into_iter().flatten().collect();

    let mut groups: BTreeMap<(String, usize), Vec<&TrajectoryResult>> = BTreeMap::new();
    for r in &trajectories {
        let vi = Variant::ALL.iter().position(|v| *v == r.variant).expect("known variant");
        groups.entry((r.label.clone(), vi)).or_default().push(r);
    }
    let mut summary = Vec::new();
    for ((label, vi), rows) in &groups {
        let variant = Variant::ALL[*vi];
        let (mean, std) = mean_std(&rows.iter().map(|r| r.mse).collect::<Vec<_>>());
        let (mean_last, std_last) = mean_std(&rows.iter().map(|r| r.mse_last).collect::<Vec<_>>());
        let reference = cfg.reference.get(label).and_then(|m| m.get(variant.as_str())).copied();
        summary.push(SummaryRow {
            label: label.clone(),
            variant,
            n: rows.len(),
            mean,
            std,
            mean_last,
            std_last,
            reference,
            agrees: reference.map(|r| ((mean - r) / r).abs() <= 0.5),
        });
    }
    let mut p_values = Vec::new();
    for ((la, va), ra) in &groups {
        for ((lb, vb), rb) in &groups {
            if la != lb || vb <= va {
                continue;
            }
            let a: Vec<f64> = ra.iter().map(|r| r.mse).collect();
            let b: Vec<f64> = rb.iter().map(|r| r.mse).collect();
            if let Ok(t) = mann_whitney_u(&a, &b) {
                p_values.push(PValueRow {
                    label: la.clone(),
                    a: Variant::ALL[*va],
                    b: Variant::ALL[*vb],
                    p: t.p,
                });
            }
        }
    }
    let report = EvalReport {
        fingerprint: fp.clone(),
        summary,
        p_values,
        trajectories,
    };
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    stage("report", &fp, write("report.csv", report.to_csv()))?;
    stage("report", &fp, write("report.md", report.to_markdown()))?;
    stage("report", &fp, write("trajectories.csv", report.trajectories_csv()))?;
    Ok(report)
}

/// Index of the run with the lowest final validation MSE, falling back
/// to the lowest final training loss when no run has a validation set.
pub fn select_best(runs: &[Trained]) -> Option<usize> {
    let last = |r: &Trained| r.trace.last().copied();
    let key = |r: &Trained| -> f64 {
        match last(r) {
            Some(e) if e.val_mse.is_finite() => e.val_mse,
            Some(e) if runs.iter().all(|r| last(r).is_none_or(|e| !e.val_mse.is_finite())) => e.total,
            _ => f64::INFINITY,
        }
    };
    (0..runs.len()).min_by(|&a, &b| key(&runs[a]).total_cmp(&key(&runs[b])))
}

/// Per-state description of an interaction HMM, to support labelling
/// contact and reach states by hand.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSummary {
    pub state: usize,
    pub initial: f64,
    pub self_transition: f64,
    /// Expected dwell time in steps, `1 / (1 − T_ii)`.
    pub expected_duration: f64,
    pub human_mean_norm: f64,
    pub robot_mean_norm: f64,
    /// Fraction of timesteps where this state is the most likely one
    /// under the joint forward variable (zero without data).
    pub occupancy: f64,
    /// Mean normalised time (0 = start, 1 = end) of those timesteps.
    pub mean_phase: Option<f64>,
    pub role: &'static str,
}

pub fn state_summaries(bundle: &ModelBundle, label: &str, ds: Option<&Dataset>) -> Result<Vec<StateSummary>> {
    let model = bundle.interaction(label)?;
    let hmm = &model.hmm;
    let n = hmm.n_states();
    let mut counts = vec![0usize; n];
    let mut phase_sum = vec![0.0; n];
    let mut total = 0usize;
    if let Some(ds) = ds {
        for pair in ds.pairs.iter().filter(|p| p.label == label) {
            let (x_h, x_r) = ds.features(pair)?;
            let seq = joint_latents(&bundle.human_vae, &bundle.robot_vae, &x_h, &x_r)?;
            let alpha = forward(hmm, &seq, Block::Full)?;
            let len = seq.len();
            for t in 0..len {
                let s = most_likely(&alpha.row(t));
                counts[s] += 1;
                phase_sum[s] += if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
                total += 1;
            }
        }
    }
    let tsm = &model.transitions;
    Ok((0..n)
        .map(|i| {
            let stay = hmm.trans[(i, i)];
            StateSummary {
                state: i,
                initial: hmm.pi[i],
                self_transition: stay,
                expected_duration: if stay < 1.0 { 1.0 / (1.0 - stay) } else { f64::INFINITY },
                human_mean_norm: hmm.marginal(i, Block::Human).mean.norm(),
                robot_mean_norm: hmm.marginal(i, Block::Robot).mean.norm(),
                occupancy: if total > 0 { counts[i] as f64 / total as f64 } else { 0.0 },
                mean_phase: (counts[i] > 0).then(|| phase_sum[i] / counts[i] as f64),
                role: if tsm.contact_states.contains(&i) {
                    "contact"
                } else if tsm.reach_states.contains(&i) {
                    "reach"
                } else {
                    "-"
                },
            }
        })
        .collect())
}
