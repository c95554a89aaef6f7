//! Test-time reactive loop: encode the observed human window, advance the
//! human-marginal forward variable, condition the HMM on the human latent,
//! decode the partner prediction and, inside a contact segment, refine the
//! joint command with prior-regularised IK.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::data::{window_features, FeatureKind};
use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::hmm::{contact_gate, forward, gmr_condition, AlphaSequence, Block, GateState};
use crate::kin::KinematicChain;
use crate::train::ModelBundle;

/// Weights of the default causal smoothing filter, oldest first.
pub const DEFAULT_SMOOTHING: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

pub const LAMBDA_X: f64 = 1.0;
pub const LAMBDA_Q: f64 = 0.01;

/// Per-episode state of the reactive loop. Start every episode from
/// `ReactiveState::default()`.
#[derive(Clone, Debug, Default)]
pub struct ReactiveState {
    alpha_prev: Option<DVector<f64>>,
    gate: GateState,
    /// Commands so far, most recent last; trimmed to the filter length.
    history: Vec<DVector<f64>>,
}

impl ReactiveState {
    pub fn alpha(&self) -> Option<&DVector<f64>> {
        self.alpha_prev.as_ref()
    }

    pub fn latched(&self) -> bool {
        self.gate.latched
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Joint command sent to the controller (last frame of the decoded
    /// window, IK-refined when in contact).
    pub q_cmd: DVector<f64>,
    /// `q_cmd` after the causal moving-average filter.
    pub q_smooth: DVector<f64>,
    /// Decoded prediction before IK.
    pub q_pred: DVector<f64>,
    pub stiffness_low: bool,
    pub in_contact: bool,
    /// Set when the gate fired but no hand position was available.
    pub ik_skipped: bool,
    pub alpha: DVector<f64>,
    pub latent_h: Gaussian,
    pub latent_r: Gaussian,
}

#[derive(Clone, Debug)]
pub struct StepOptions {
    pub lambda_x: f64,
    pub lambda_q: f64,
    pub smoothing: Vec<f64>,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            lambda_x: LAMBDA_X,
            lambda_q: LAMBDA_Q,
            smoothing: DEFAULT_SMOOTHING.to_vec(),
        }
    }
}

fn last_frame(window: &DVector<f64>, frame_width: usize) -> DVector<f64> {
    window.rows(window.len() - frame_width, frame_width).into_owned()
}

/// One step of the reactive loop on the human feature window `x_h`.
#[allow(clippy::too_many_arguments)]
pub fn reactive_step(
    bundle: &ModelBundle,
    interaction: &str,
    x_h: &DVector<f64>,
    hand_pos: Option<&Vector3<f64>>,
    chain: &KinematicChain,
    options: &StepOptions,
    state: &mut ReactiveState,
) -> Result<StepOutput> {
    let model = bundle.interaction(interaction)?;
    let post = bundle.human_vae.encode(x_h)?;
    let em = model.hmm.emissions(Block::Human)?;
    let alpha = model.hmm.forward_step(&em, state.alpha_prev.as_ref(), &post.mean)?;
    let latent_r = gmr_condition(&model.hmm, &post, &alpha, bundle.inference_mode())?;
    let window = bundle.robot_vae.decode(&latent_r.mean)?;
    let q_pred = last_frame(&window, bundle.features.r_frame_width());
    let gate = contact_gate(&model.hmm, &alpha, &model.transitions, &post.mean, &mut state.gate)?;

    let joints = bundle.features.r_kind == FeatureKind::Joints && q_pred.len() == chain.dof();
    let (q_cmd, ik_skipped) = match (gate.in_contact, hand_pos) {
        (true, Some(target)) if joints => {
            let sol = chain.ik_with_prior(target, &q_pred, options.lambda_x, options.lambda_q)?;
            (sol.q, false)
        }
        (true, _) => (q_pred.clone(), true),
        (false, _) => (q_pred.clone(), false),
    };
    state.history.push(q_cmd.clone());
    let keep = options.smoothing.len().max(1);
    if state.history.len() > keep {
        state.history.drain(..state.history.len() - keep);
    }
    let q_smooth = smooth_last(&state.history, &options.smoothing)?;
    state.alpha_prev = Some(alpha.clone());
    Ok(StepOutput {
        q_cmd,
        q_smooth,
        q_pred,
        stiffness_low: gate.stiffness_low,
        in_contact: gate.in_contact,
        ik_skipped,
        alpha,
        latent_h: post,
        latent_r,
    })
}

/// Batch conditional prediction over a whole trajectory.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Decoded partner windows, one column per timestep.
    pub r_windows: DMatrix<f64>,
    pub alpha: AlphaSequence,
    pub latent_h: DMatrix<f64>,
    pub latent_r: DMatrix<f64>,
}

/// Conditional partner prediction for every window of `x_h` (columns),
/// without gating or IK.
pub fn predict_windows(bundle: &ModelBundle, interaction: &str, x_h: &DMatrix<f64>) -> Result<Prediction> {
    let model = bundle.interaction(interaction)?;
    let post = bundle.human_vae.encode_batch(x_h)?;
    let obs: Vec<DVector<f64>> = post.mean.column_iter().map(|c| c.into_owned()).collect();
    let alpha = forward(&model.hmm, &obs, Block::Human)?;
    let mode = bundle.inference_mode();
    let mut latent_r = DMatrix::zeros(model.hmm.dim_r(), obs.len());
    for t in 0..obs.len() {
        let g = gmr_condition(&model.hmm, &post.column(t), &alpha.row(t), mode)?;
        latent_r.set_column(t, &g.mean);
    }
    Ok(Prediction {
        r_windows: bundle.robot_vae.decode_batch(&latent_r)?,
        alpha,
        latent_h: post.mean,
        latent_r,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    pub step: StepOptions,
    /// Hand position per output step; IK is skipped when absent.
    pub hand_positions: Option<Vec<Vector3<f64>>>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Commands, one row per window.
    pub q: DMatrix<f64>,
    pub q_smooth: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub gate: Vec<bool>,
    pub stiffness_low: Vec<bool>,
    pub ik_skipped: Vec<bool>,
    pub latent_h: DMatrix<f64>,
    pub latent_r: DMatrix<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    /// CSV with columns `t, q_1..q_n, stiffness_low, alpha_1..alpha_N, gate`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.q.ncols()).map(|i| format!("q_{i}")));
        header.push("stiffness_low".into());
        header.extend((1..=self.alpha.ncols()).map(|i| format!("alpha_{i}")));
        header.push("gate".into());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.q.row(t).iter().map(|v| v.to_string()));
            row.push(u8::from(self.stiffness_low[t]).to_string());
            row.extend(self.alpha.row(t).iter().map(|v| v.to_string()));
            row.push(u8::from(self.gate[t]).to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Run the reactive loop over a recorded human trajectory (`T × 9`
/// frames). Output length is `T − w + 1`.
pub fn rollout(
    bundle: &ModelBundle,
    interaction: &str,
    h_frames: &DMatrix<f64>,
    chain: &KinematicChain,
    options: &RolloutOptions,
) -> Result<Rollout> {
    let x = window_features(h_frames, bundle.features.window, bundle.features.h_kind)?;
    let n = x.ncols();
    if let Some(h) = &options.hand_positions {
        if h.len() != n {
            return Err(Error::DimensionMismatch {
                what: "hand positions",
                expected: n,
                got: h.len(),
            });
        }
    }
    let mut state = ReactiveState::default();
    let mut outs = Vec::with_capacity(n);
    for t in 0..n {
        let hand = options.hand_positions.as_ref().map(|h| &h[t]);
        outs.push(reactive_step(bundle, interaction, &x.column(t).into_owned(), hand, chain, &options.step, &mut state)?);
    }
    let stack = |f: &dyn Fn(&StepOutput) -> DVector<f64>| {
        let rows: Vec<_> = outs.iter().map(|o| f(o).transpose()).collect();
        DMatrix::from_rows(&rows)
    };
    Ok(Rollout {
        q: stack(&|o| o.q_cmd.clone()),
        q_smooth: stack(&|o| o.q_smooth.clone()),
        alpha: stack(&|o| o.alpha.clone()),
        gate: outs.iter().map(|o| o.in_contact).collect(),
        stiffness_low: outs.iter().map(|o| o.stiffness_low).collect(),
        ik_skipped: outs.iter().map(|o| o.ik_skipped).collect(),
        latent_h: stack(&|o| o.latent_h.mean.clone()),
        latent_r: stack(&|o| o.latent_r.mean.clone()),
    })
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("smoothing weights are empty".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("smoothing weights must be non-negative with a positive sum".into()));
    }
    Ok(())
}

/// Weighted average of the most recent `history` entries. `weights` are
/// oldest first; with fewer entries than weights, the newest weights are
/// used and renormalised.
fn smooth_last(history: &[DVector<f64>], weights: &[f64]) -> Result<DVector<f64>> {
    check_weights(weights)?;
    let k = weights.len().min(history.len());
    let ws = &weights[weights.len() - k..];
    let hs = &history[history.len() - k..];
    let total: f64 = ws.iter().sum();
    let mut out = DVector::zeros(hs[0].len());
    if total > 0.0 {
        for (w, h) in ws.iter().zip(hs) {
            out += h * (*w / total);
        }
    } else {
        out.copy_from(&hs[k - 1]);
    }
    Ok(out)
}

/// Causal weighted moving average over the rows of `traj`.
pub fn smooth(traj: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    check_weights(weights)?;
    let rows: Vec<DVector<f64>> = traj.row_iter().map(|r| r.transpose()).collect();
    let mut out = DMatrix::zeros(traj.nrows(), traj.ncols());
    for t in 0..rows.len() {
        out.set_row(t, &smooth_last(&rows[..=t], weights)?.transpose());
    }
    Ok(out)
}
