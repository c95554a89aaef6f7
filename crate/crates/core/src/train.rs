//! Training pipelines.
//!
//! Human-human training alternates VAE epochs, run against per-timestep
//! HMM priors, with Baum-Welch refits of every interaction's HMM on the
//! encoded latents. Human-robot training freezes the human VAE and the
//! HMMs and fits a robot VAE against the robot block of those HMMs,
//! optionally adding a conditional reconstruction term.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureKind, Split};
use crate::error::{Error, Result};
use crate::hmm::{self, forward_unobserved, most_likely, Block, CondMode, Hmm, TransitionStateModel};
use crate::infer::predict_windows;
use crate::net::AdamConfig;
use crate::vae::{draw_noise, elbo_hhi, elbo_hri, ConditionalSampler, KlPrior, Vae, VaeOptimizer, Variant};
use crate::{rng_from_seed, Rng};

/// State sets of one interaction's HMM, labelled by inspection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub contact: Vec<usize>,
    #[serde(default)]
    pub reach: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub mc_samples: usize,
    pub n_states: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Epochs between HMM refits.
    pub hmm_refit_every: usize,
    pub em_iters: usize,
    pub em_tol: f64,
    /// Weight of the conditional reconstruction term.
    pub cond_weight: f64,
    /// Share of the training trajectories held out for validation.
    pub val_fraction: f64,
    /// Contact and reach states per interaction label. Labels without an
    /// entry use the middle third of the states as contact and the first
    /// third as reach.
    pub segments: BTreeMap<String, SegmentLabels>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            beta: 5e-3,
            lr: 5e-4,
            weight_decay: AdamConfig::default().weight_decay,
            mc_samples: 10,
            n_states: 6,
            d_z: 5,
            hidden: vec![40, 20],
            variant: Variant::V32,
            seeds: vec![0, 1, 2, 3],
            hmm_refit_every: 1,
            em_iters: 20,
            em_tol: 1e-4,
            cond_weight: 1.0,
            val_fraction: 0.1,
            segments: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("mc_samples", self.mc_samples),
            ("n_states", self.n_states),
            ("d_z", self.d_z),
            ("hmm_refit_every", self.hmm_refit_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [("beta", self.beta), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.em_tol >= 0.0) || !(self.cond_weight >= 0.0) {
            return Err(Error::Config("weight_decay, em_tol and cond_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        for (label, s) in &self.segments {
            TransitionStateModel::new(s.contact.clone(), s.reach.clone())
                .and_then(|t| t.validate(self.n_states))
                .map_err(|e| Error::Config(format!("segments for '{label}': {e}")))?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn segment_labels(&self, label: &str) -> SegmentLabels {
        self.segments.get(label).cloned().unwrap_or_else(|| {
            let n = self.n_states;
            let third = (n / 3).max(1);
            SegmentLabels {
                contact: (third..(2 * n / 3).max(third + 1).min(n)).collect(),
                reach: (0..third.min(n.saturating_sub(1))).collect(),
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Hhi,
    Hri,
}

/// Window length, feature kinds and column names the VAEs were trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub window: usize,
    pub h_kind: FeatureKind,
    pub r_kind: FeatureKind,
    pub h_columns: Vec<String>,
    pub r_columns: Vec<String>,
}

impl FeatureMeta {
    pub fn of(ds: &Dataset) -> Self {
        FeatureMeta {
            window: ds.window,
            h_kind: ds.h_kind,
            r_kind: ds.r_kind,
            h_columns: ds.h_columns.clone(),
            r_columns: ds.r_columns.clone(),
        }
    }

    /// Width of one partner frame inside a decoded window.
    pub fn r_frame_width(&self) -> usize {
        self.r_kind.frame_width(self.r_columns.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionModel {
    pub hmm: Hmm,
    pub transitions: TransitionStateModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub stage: Stage,
    pub variant: Variant,
    pub human_vae: Vae,
    pub robot_vae: Vae,
    /// Whether both agents used one network during training.
    pub shared: bool,
    pub features: FeatureMeta,
    pub interactions: BTreeMap<String, InteractionModel>,
    pub config: TrainConfig,
    pub seed: u64,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        self.human_vae.validate()?;
        self.robot_vae.validate()?;
        for (label, m) in &self.interactions {
            let expect = self.human_vae.d_z + self.robot_vae.d_z;
            if m.hmm.dim() != expect || m.hmm.dim_h() != self.human_vae.d_z {
                return Err(Error::Config(format!(
                    "HMM for '{label}' has dimension {} (split {}), the VAEs need {expect} (split {})",
                    m.hmm.dim(),
                    m.hmm.dim_h(),
                    self.human_vae.d_z
                )));
            }
            m.transitions.validate(m.hmm.n_states())?;
        }
        Ok(())
    }

    pub fn interaction(&self, label: &str) -> Result<&InteractionModel> {
        self.interactions
            .get(label)
            .ok_or_else(|| Error::Config(format!("unknown interaction '{label}'")))
    }

    /// How the observed posterior enters test-time conditioning.
    pub fn inference_mode(&self) -> CondMode {
        match self.stage {
            Stage::Hhi => CondMode::Point,
            Stage::Hri => self.variant.inference_mode(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: ModelBundle = serde_json::from_str(&text)?;
        b.validate()?;
        Ok(b)
    }
}

/// One row of the loss trace. Losses are averaged over the trajectories
/// of the epoch; `val_mse` is NaN without a validation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon_h: f64,
    pub recon_r: f64,
    pub kl: f64,
    pub cond: f64,
    pub total: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub trace: Vec<EpochRecord>,
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,recon_h,recon_r,kl,cond,total,val_mse\n");
    for r in trace {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.recon_h, r.recon_r, r.kl, r.cond, r.total, r.val_mse
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Training trajectories split into fitting and validation indices.
fn carve_validation(ds: &Dataset, fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = ds.indices(Split::Train);
    train.shuffle(rng);
    let n_val = (fraction * train.len() as f64).round() as usize;
    let val = train.split_off(train.len() - n_val);
    train.sort_unstable();
    (train, val)
}

fn check_labels(ds: &Dataset, fit: &[usize]) -> Result<Vec<String>> {
    let labels = ds.labels();
    if labels.is_empty() {
        return Err(Error::Data("dataset has no trajectories".into()));
    }
    for l in &labels {
        if !fit.iter().any(|&i| ds.pairs[i].label == *l) {
            return Err(Error::Data(format!("interaction '{l}' has no training trajectories")));
        }
    }
    Ok(labels)
}

/// KL targets of every state's two marginals, and the state index each
/// timestep's prior uses (most likely state of the observation-free
/// forward variable).
struct PriorTable {
    human: Vec<KlPrior>,
    robot: Vec<KlPrior>,
    schedule: Vec<usize>,
}

impl PriorTable {
    fn new(hmm: &Hmm, horizon: usize) -> Result<Self> {
        let alpha = forward_unobserved(hmm, horizon)?;
        Ok(PriorTable {
            human: (0..hmm.n_states())
                .map(|i| KlPrior::new(&hmm.marginal(i, Block::Human)))
                .collect::<Result<_>>()?,
            robot: (0..hmm.n_states())
                .map(|i| KlPrior::new(&hmm.marginal(i, Block::Robot)))
                .collect::<Result<_>>()?,
            schedule: (0..horizon).map(|t| most_likely(&alpha.row(t))).collect(),
        })
    }

    fn human(&self, len: usize) -> Vec<&KlPrior> {
        self.schedule[..len].iter().map(|&i| &self.human[i]).collect()
    }

    fn robot(&self, len: usize) -> Vec<&KlPrior> {
        self.schedule[..len].iter().map(|&i| &self.robot[i]).collect()
    }
}

fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

fn stack_latents(zh: &DMatrix<f64>, zr: &DMatrix<f64>) -> Vec<DVector<f64>> {
    columns(&DMatrix::from_fn(zh.nrows() + zr.nrows(), zh.ncols(), |i, t| {
        if i < zh.nrows() {
            zh[(i, t)]
        } else {
            zr[(i - zh.nrows(), t)]
        }
    }))
}

/// Posterior means of both agents, stacked per timestep.
pub(crate) fn joint_latents(v_h: &Vae, v_r: &Vae, x_h: &DMatrix<f64>, x_r: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    Ok(stack_latents(&v_h.encode_batch(x_h)?.mean, &v_r.encode_batch(x_r)?.mean))
}

/// One posterior sample per agent and timestep, stacked.
fn joint_samples(v_h: &Vae, v_r: &Vae, x_h: &DMatrix<f64>, x_r: &DMatrix<f64>, rng: &mut Rng) -> Result<Vec<DVector<f64>>> {
    let draw = |v: &Vae, x: &DMatrix<f64>, rng: &mut Rng| -> Result<DMatrix<f64>> {
        let post = v.encode_batch(x)?;
        let eps = &draw_noise(1, v.d_z, x.ncols(), rng)[0];
        Ok(&post.mean + post.var.map(f64::sqrt).component_mul(eps))
    };
    let zh = draw(v_h, x_h, rng)?;
    let zr = draw(v_r, x_r, rng)?;
    Ok(stack_latents(&zh, &zr))
}

/// Baum-Welch from an equal-time segmentation of the latents. Falls back
/// to the segmentation itself when a state ends up with less than
/// 1/(10N) of the occupancy.
pub fn refit_hmm(seqs: &[Vec<DVector<f64>>], n_states: usize, split: usize, iters: usize, tol: f64) -> Result<Hmm> {
    let init = hmm::init_segments(seqs, n_states, split)?;
    let fit = hmm::em_fit(&init, seqs, iters, tol)?;
    let total: f64 = fit.occupancy.iter().sum();
    if let Some(i) = fit.occupancy.iter().position(|o| *o < total / (10.0 * n_states as f64)) {
        log::warn!(
            "HMM state {i} collapsed after refit ({:.3} of {:.1} occupancy); reinitialising from equal-time segments",
            fit.occupancy[i],
            total
        );
        return Ok(init);
    }
    Ok(fit.hmm)
}

/// Mean squared error of the conditional partner prediction over the
/// given trajectories.
pub fn conditional_mse(bundle: &ModelBundle, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let (mut sse, mut n) = (0.0, 0usize);
    for &i in indices {
        let pair = &ds.pairs[i];
        let (x_h, x_r) = ds.features(pair)?;
        let pred = predict_windows(bundle, &pair.label, &x_h)?;
        sse += (pred.r_windows - &x_r).norm_squared();
        n += x_r.len();
    }
    Ok(if n == 0 { f64::NAN } else { sse / n as f64 })
}

fn check_finite(epoch: usize, total: f64) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")))
    }
}

/// Fit the contact-boundary density of every interaction from the
/// training trajectories' latents.
pub fn fit_transition_states(bundle: &mut ModelBundle, ds: &Dataset) -> Result<()> {
    let fit = ds.indices(Split::Train);
    for (label, model) in bundle.interactions.iter_mut() {
        let mut seqs = Vec::new();
        for &i in fit.iter().filter(|&&i| ds.pairs[i].label == *label) {
            let (x_h, x_r) = ds.features(&ds.pairs[i])?;
            seqs.push(joint_latents(&bundle.human_vae, &bundle.robot_vae, &x_h, &x_r)?);
        }
        let tsm = &mut model.transitions;
        tsm.gate = hmm::fit_gate(&model.hmm, &seqs, &tsm.contact_states, &tsm.reach_states)?;
        if tsm.gate.is_none() {
            log::warn!("'{label}': human-only and joint segmentations agree; transition-state gate disabled");
        }
    }
    Ok(())
}

/// Joint training on human-human demonstrations. Both agents share one
/// network when their features have the same layout. `warm` continues
/// from an existing bundle (fine-tuning).
pub fn train_hhi(ds: &Dataset, config: &TrainConfig, seed: u64, warm: Option<&ModelBundle>) -> Result<Trained> {
    config.validate()?;
    ds.validate()?;
    let mut rng = rng_from_seed(seed);
    let (fit, val) = carve_validation(ds, config.val_fraction, &mut rng);
    let labels = check_labels(ds, &fit)?;
    let shared = ds.h_kind == ds.r_kind && ds.h_width() == ds.r_width();

    let (mut v_h, mut v_r) = match warm {
        Some(b) => {
            if b.human_vae.input_dim != ds.h_width() || b.robot_vae.input_dim != ds.r_width() {
                return Err(Error::Config("warm-start bundle does not match the dataset feature widths".into()));
            }
            (b.human_vae.clone(), b.robot_vae.clone())
        }
        None => {
            let h = Vae::new(ds.h_width(), config.d_z, &config.hidden, &mut rng)?;
            let r = if shared {
                h.clone()
            } else {
                Vae::new(ds.r_width(), config.d_z, &config.hidden, &mut rng)?
            };
            (h, r)
        }
    };
    let mut opt_h = VaeOptimizer::new(config.adam(), &v_h);
    let mut opt_r = VaeOptimizer::new(config.adam(), &v_r);

    let mut interactions = BTreeMap::new();
    for l in &labels {
        let seg = config.segment_labels(l);
        let hmm = match warm.and_then(|b| b.interactions.get(l)) {
            Some(m) => m.hmm.clone(),
            None => Hmm::standard(config.n_states, 2 * config.d_z, config.d_z)?,
        };
        interactions.insert(
            l.clone(),
            InteractionModel {
                hmm,
                transitions: TransitionStateModel::new(seg.contact, seg.reach)?,
            },
        );
    }

    let feats: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)> =
        fit.iter().chain(&val).map(|&i| Ok((i, ds.features(&ds.pairs[i])?))).collect::<Result<_>>()?;
    let horizon = fit.iter().map(|i| feats[i].0.ncols()).max().unwrap_or(1);

    let bundle_of = |v_h: &Vae, v_r: &Vae, interactions: &BTreeMap<String, InteractionModel>| ModelBundle {
        stage: Stage::Hhi,
        variant: config.variant,
        human_vae: v_h.clone(),
        robot_vae: v_r.clone(),
        shared,
        features: FeatureMeta::of(ds),
        interactions: interactions.clone(),
        config: config.clone(),
        seed,
    };

    let mut trace = Vec::with_capacity(config.epochs);
    let mut order = fit.clone();
    for epoch in 1..=config.epochs {
        let priors: BTreeMap<&str, PriorTable> = interactions
            .iter()
            .map(|(l, m)| Ok((l.as_str(), PriorTable::new(&m.hmm, horizon)?)))
            .collect::<Result<_>>()?;
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            recon_h: 0.0,
            recon_r: 0.0,
            kl: 0.0,
            cond: 0.0,
            total: 0.0,
            val_mse: f64::NAN,
        };
        for &i in &order {
            let (x_h, x_r) = &feats[&i];
            let table = &priors[ds.pairs[i].label.as_str()];
            let b = x_h.ncols();
            let noise_h = draw_noise(config.mc_samples, config.d_z, b, &mut rng);
            let noise_r = draw_noise(config.mc_samples, config.d_z, b, &mut rng);
            let v_r_ref = if shared { &v_h } else { &v_r };
            let loss = elbo_hhi(
                &v_h,
                v_r_ref,
                x_h,
                x_r,
                &table.human(b),
                &table.robot(b),
                config.beta,
                &noise_h,
                &noise_r,
            )?;
            check_finite(epoch, loss.total)?;
            if shared {
                let mut g = loss.human.grads;
                g.add_assign(&loss.robot.grads);
                opt_h.step(&mut v_h, &g)?;
            } else {
                opt_h.step(&mut v_h, &loss.human.grads)?;
                opt_r.step(&mut v_r, &loss.robot.grads)?;
            }
            rec.recon_h += loss.human.recon;
            rec.recon_r += loss.robot.recon;
            rec.kl += loss.human.kl + loss.robot.kl;
            rec.total += loss.total;
        }
        if shared {
            v_r = v_h.clone();
        }
        let n = order.len() as f64;
        rec.recon_h /= n;
        rec.recon_r /= n;
        rec.kl /= n;
        rec.total /= n;

        if epoch % config.hmm_refit_every == 0 || epoch == config.epochs {
            for (label, model) in interactions.iter_mut() {
                let seqs = fit
                    .iter()
                    .filter(|&&i| ds.pairs[i].label == *label)
                    .map(|i| joint_samples(&v_h, &v_r, &feats[i].0, &feats[i].1, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                model.hmm = refit_hmm(&seqs, config.n_states, config.d_z, config.em_iters, config.em_tol)
                    .map_err(|e| Error::Numerical(format!("HMM refit for '{label}' at epoch {epoch}: {e}")))?;
            }
        }
        if !val.is_empty() {
            rec.val_mse = conditional_mse(&bundle_of(&v_h, &v_r, &interactions), ds, &val)?;
        }
        log::debug!("hhi epoch {epoch}: total {:.6} val {:.6}", rec.total, rec.val_mse);
        trace.push(rec);
    }

    let mut bundle = bundle_of(&v_h, &v_r, &interactions);
    let mut fit_only = ds.clone();
    for (i, s) in fit_only.split.iter_mut().enumerate() {
        if !fit.contains(&i) {
            *s = Split::Test;
        }
    }
    fit_transition_states(&mut bundle, &fit_only)?;
    Ok(Trained { bundle, trace })
}

/// Robot-side training against a frozen human-human bundle.
pub fn train_hri(ds: &Dataset, hhi: &ModelBundle, config: &TrainConfig, seed: u64) -> Result<Trained> {
    config.validate()?;
    ds.validate()?;
    if hhi.stage != Stage::Hhi {
        return Err(Error::Config("robot training needs a bundle from human-human training".into()));
    }
    hhi.validate()?;
    if hhi.human_vae.input_dim != ds.h_width() {
        return Err(Error::DimensionMismatch {
            what: "human feature width of the bundle",
            expected: hhi.human_vae.input_dim,
            got: ds.h_width(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let (fit, val) = carve_validation(ds, config.val_fraction, &mut rng);
    let labels = check_labels(ds, &fit)?;
    for l in &labels {
        hhi.interaction(l)?;
    }
    let d_r = hhi.robot_vae.d_z;
    let mut v_r = Vae::new(ds.r_width(), d_r, &config.hidden, &mut rng)?;
    let mut opt = VaeOptimizer::new(config.adam(), &v_r);
    let variant = config.variant;

    struct Item {
        x_r: DMatrix<f64>,
        priors: Vec<KlPrior>,
        sampler: Option<ConditionalSampler>,
    }
    let mut items = BTreeMap::new();
    for &i in &fit {
        let pair = &ds.pairs[i];
        let (x_h, x_r) = ds.features(pair)?;
        let hmm = &hhi.interaction(&pair.label)?.hmm;
        let b = x_h.ncols();
        let alpha = forward_unobserved(hmm, b)?;
        let post_h = hhi.human_vae.encode_batch(&x_h)?;
        let priors = (0..b)
            .map(|t| KlPrior::new(&hmm.marginal(most_likely(&alpha.row(t)), Block::Robot)))
            .collect::<Result<Vec<_>>>()?;
        let sampler = ConditionalSampler::new(hmm, &post_h, &alpha, variant)?;
        items.insert(i, Item { x_r, priors, sampler });
    }

    let bundle_of = |v_r: &Vae| ModelBundle {
        stage: Stage::Hri,
        variant,
        human_vae: hhi.human_vae.clone(),
        robot_vae: v_r.clone(),
        shared: false,
        features: FeatureMeta::of(ds),
        interactions: hhi.interactions.clone(),
        config: config.clone(),
        seed,
    };

    let mut trace = Vec::with_capacity(config.epochs);
    let mut order = fit.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            recon_h: 0.0,
            recon_r: 0.0,
            kl: 0.0,
            cond: 0.0,
            total: 0.0,
            val_mse: f64::NAN,
        };
        for i in &order {
            let item = &items[i];
            let b = item.x_r.ncols();
            let noise = draw_noise(config.mc_samples, d_r, b, &mut rng);
            let cond_latents = item
                .sampler
                .as_ref()
                .map(|s| s.sample(&draw_noise(config.mc_samples, d_r, b, &mut rng)));
            let priors: Vec<&KlPrior> = item.priors.iter().collect();
            let loss = elbo_hri(
                &v_r,
                &item.x_r,
                &priors,
                config.beta,
                &noise,
                cond_latents.as_ref().map(|z| (z, config.cond_weight)),
            )?;
            check_finite(epoch, loss.total)?;
            opt.step(&mut v_r, &loss.grads)?;
            rec.recon_r += loss.recon;
            rec.kl += loss.kl;
            rec.cond += loss.cond;
            rec.total += loss.total;
        }
        let n = order.len() as f64;
        rec.recon_r /= n;
        rec.kl /= n;
        rec.cond /= n;
        rec.total /= n;
        if !val.is_empty() {
            rec.val_mse = conditional_mse(&bundle_of(&v_r), ds, &val)?;
        }
        log::debug!("hri {variant} epoch {epoch}: total {:.6} val {:.6}", rec.total, rec.val_mse);
        trace.push(rec);
    }
    Ok(Trained {
        bundle: bundle_of(&v_r),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_generate, SynthMode, SynthSpec};
    use crate::gauss::Gaussian;

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            mc_samples: 2,
            n_states: 3,
            d_z: 2,
            hidden: vec![12, 8],
            lr: 5e-3,
            val_fraction: 0.0,
            ..TrainConfig::default()
        }
    }

    fn synth(mode: SynthMode, count: usize, length: usize, seed: u64) -> Dataset {
        let mut spec = SynthSpec::single("reach", count, mode);
        spec.length = length;
        spec.noise = 0.02;
        synth_generate(&spec, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.n_states, c.d_z, c.mc_samples), (400, 6, 5, 10));
        assert_eq!(c.beta, 5e-3);
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.hidden, vec![40, 20]);
        c.validate().unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..c.clone() },
            TrainConfig { beta: -1.0, ..c.clone() },
            TrainConfig { val_fraction: 1.0, ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "variant": "v2.1"}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.variant, Variant::V21);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn default_segments_split_states_in_thirds() {
        let c = TrainConfig::default();
        let s = c.segment_labels("anything");
        assert_eq!(s.reach, vec![0, 1]);
        assert_eq!(s.contact, vec![2, 3]);
    }

    #[test]
    fn hhi_loss_drops_and_is_deterministic() {
        let ds = synth(SynthMode::Hhi, 6, 30, 1);
        let cfg = small_config(60);
        let a = train_hhi(&ds, &cfg, 7, None).unwrap();
        let b = train_hhi(&ds, &cfg, 7, None).unwrap();
        assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        assert_eq!(a.bundle, b.bundle);
        let first = a.trace[0].total;
        let last = a.trace.last().unwrap().total;
        assert!(last < 0.25 * first, "loss {first} -> {last}");
        assert!(a.bundle.shared);
        a.bundle.validate().unwrap();
    }

    #[test]
    fn first_epoch_priors_are_standard_normal() {
        // Every component starts at N(0, I), so the first epoch's KL terms
        // are the plain VAE KL against a standard normal.
        let ds = synth(SynthMode::Hhi, 2, 20, 2);
        let cfg = small_config(1);
        let v = Vae::new(ds.h_width(), cfg.d_z, &cfg.hidden, &mut rng_from_seed(3)).unwrap();
        let (x_h, x_r) = ds.features(&ds.pairs[0]).unwrap();
        let b = x_h.ncols();
        let std = Gaussian::standard(cfg.d_z);
        let mut expect = 0.0;
        for x in [&x_h, &x_r] {
            let post = v.encode_batch(x).unwrap();
            for t in 0..b {
                expect += crate::gauss::kl_divergence(&post.column(t), &std).unwrap() / b as f64;
            }
        }
        let h = Hmm::standard(cfg.n_states, 2 * cfg.d_z, cfg.d_z).unwrap();
        let table = PriorTable::new(&h, b).unwrap();
        let noise = draw_noise(cfg.mc_samples, cfg.d_z, b, &mut rng_from_seed(0));
        let loss = elbo_hhi(&v, &v, &x_h, &x_r, &table.human(b), &table.robot(b), cfg.beta, &noise, &noise).unwrap();
        assert!((loss.human.kl + loss.robot.kl - expect).abs() < 1e-9);
        assert!(train_hhi(&ds, &cfg, 3, None).unwrap().trace[0].kl.is_finite());
    }

    #[test]
    fn hri_freezes_the_human_side() {
        let hhi_ds = synth(SynthMode::Hhi, 5, 30, 4);
        let hri_ds = synth(SynthMode::Hri, 5, 30, 4);
        let cfg = small_config(3);
        let hhi = train_hhi(&hhi_ds, &cfg, 1, None).unwrap().bundle;
        let before = hhi.human_vae.params_flat();
        for v in Variant::ALL {
            let c = TrainConfig { variant: v, ..cfg.clone() };
            let out = train_hri(&hri_ds, &hhi, &c, 1).unwrap();
            assert_eq!(out.bundle.human_vae.params_flat(), before);
            assert_eq!(out.bundle.interactions, hhi.interactions);
            assert_eq!(out.bundle.robot_vae.input_dim, 20);
            assert_eq!(out.bundle.stage, Stage::Hri);
            if v == Variant::V1 {
                assert!(out.trace.iter().all(|r| r.cond == 0.0));
            } else {
                assert!(out.trace.iter().all(|r| r.cond > 0.0));
            }
            // An HRI bundle cannot seed another HRI run.
            assert!(train_hri(&hri_ds, &out.bundle, &c, 1).is_err());
        }
    }

    #[test]
    fn missing_class_rejected() {
        let mut ds = synth(SynthMode::Hhi, 2, 20, 5);
        ds.split = vec![Split::Test; 2];
        assert!(matches!(train_hhi(&ds, &small_config(1), 0, None), Err(Error::Data(_))));
    }

    #[test]
    fn divergent_loss_reports_epoch() {
        let ds = synth(SynthMode::Hhi, 2, 20, 6);
        let cfg = TrainConfig { lr: 1e300, ..small_config(5) };
        match train_hhi(&ds, &cfg, 0, None) {
            Err(Error::Numerical(m)) => assert!(m.contains("epoch"), "{m}"),
            other => panic!("expected a numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn bundle_round_trip_preserves_validation_mse() {
        let ds = split(&synth(SynthMode::Hhi, 6, 25, 8), 0.5, 0).unwrap();
        let out = train_hhi(&ds, &small_config(4), 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        out.bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back, out.bundle);
        let test = ds.indices(Split::Test);
        let a = conditional_mse(&out.bundle, &ds, &test).unwrap();
        let b = conditional_mse(&back, &ds, &test).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn warm_start_continues_from_bundle() {
        let ds = synth(SynthMode::Hhi, 4, 25, 9);
        let cfg = small_config(5);
        let first = train_hhi(&ds, &cfg, 1, None).unwrap();
        let tuned = train_hhi(&ds, &cfg, 1, Some(&first.bundle)).unwrap();
        assert!(tuned.trace[0].total < first.trace[0].total);
    }

    #[test]
    fn transition_gate_single_point_fit() {
        // Two states in a 1+1 latent. The human block cannot tell them
        // apart at z_h = 0.2, the joint block can.
        let comps = vec![
            Gaussian::new(DVector::from_vec(vec![0.0, 0.0]), DMatrix::identity(2, 2)).unwrap(),
            Gaussian::new(DVector::from_vec(vec![1.0, 5.0]), DMatrix::identity(2, 2)).unwrap(),
        ];
        let (pi, trans) = hmm::left_to_right(2);
        let h = Hmm::new(pi, trans, comps, 1).unwrap();
        let seq: Vec<DVector<f64>> = [[0.0, 0.0], [0.2, 5.0], [3.0, 5.0]]
            .iter()
            .map(|v| DVector::from_row_slice(v))
            .collect();
        let gate = hmm::fit_gate(&h, &[seq], &[1], &[0]).unwrap().unwrap();
        assert!((gate.mean[0] - 0.2).abs() < 1e-12);
        assert!(gate.cholesky().is_ok());
    }
}
