//! Variational autoencoders with diagonal-Gaussian posteriors and the
//! training objectives built on top of them.
//!
//! All losses are averaged per timestep: reconstruction is the mean squared
//! error over feature dimensions, Monte Carlo samples and batch columns, and
//! KL terms are averaged over batch columns. Sampling noise is always passed
//! in explicitly so that a loss is a deterministic function of the
//! parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{regularize_spd, Gaussian, RegSchedule};
use crate::hmm::{gmr_affine_mean, gmr_condition, AffineMean, AlphaSequence, CondMode, Conditioner, Hmm};
use crate::net::{adam_step, AdamConfig, AdamState, Mlp, MlpGrads};

const VAR_MIN: f64 = 1e-8;
const VAR_MAX: f64 = 1e4;

/// How the robot decoder is additionally trained on conditional latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// No conditional term.
    #[serde(rename = "v1")]
    V1,
    /// Posterior samples pushed through the conditional mean.
    #[serde(rename = "v2.1")]
    V21,
    /// As `V21`, with the posterior covariance in the gain.
    #[serde(rename = "v2.2")]
    V22,
    /// Samples of the conditional distribution at the posterior mean.
    #[serde(rename = "v3.1")]
    V31,
    /// As `V31`, with the posterior covariance in the gain.
    #[serde(rename = "v3.2")]
    V32,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::V1, Variant::V21, Variant::V22, Variant::V31, Variant::V32];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V21 => "v2.1",
            Variant::V22 => "v2.2",
            Variant::V31 => "v3.1",
            Variant::V32 => "v3.2",
        }
    }

    /// Whether the posterior covariance enters the conditioning gain.
    pub fn uses_posterior_cov(self) -> bool {
        matches!(self, Variant::V22 | Variant::V32)
    }

    /// Conditioning mode used at test time.
    pub fn inference_mode(self) -> CondMode {
        if self.uses_posterior_cov() {
            CondMode::WithCov
        } else {
            CondMode::Point
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected v1, v2.1, v2.2, v3.1 or v3.2)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub input_dim: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Batched posterior: one column per sample.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

impl Posterior {
    pub fn column(&self, t: usize) -> Gaussian {
        Gaussian::diagonal(self.mean.column(t).into_owned(), &self.var.column(t).into_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

impl VaeGrads {
    pub fn zeros_like(v: &Vae) -> Self {
        VaeGrads {
            encoder: MlpGrads::zeros_like(&v.encoder),
            decoder: MlpGrads::zeros_like(&v.decoder),
        }
    }

    pub fn add_assign(&mut self, other: &VaeGrads) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.encoder.flat();
        out.extend(self.decoder.flat());
        out
    }
}

/// Optimiser state for both halves of a VAE.
#[derive(Clone, Debug)]
pub struct VaeOptimizer {
    encoder: AdamState,
    decoder: AdamState,
}

impl VaeOptimizer {
    pub fn new(config: AdamConfig, vae: &Vae) -> Self {
        VaeOptimizer {
            encoder: AdamState::for_mlp(config, &vae.encoder),
            decoder: AdamState::for_mlp(config, &vae.decoder),
        }
    }

    pub fn step(&mut self, vae: &mut Vae, grads: &VaeGrads) -> Result<()> {
        adam_step(&mut vae.encoder, &grads.encoder, &mut self.encoder)?;
        adam_step(&mut vae.decoder, &grads.decoder, &mut self.decoder)
    }
}

impl Vae {
    /// Encoder `input → hidden… → 2·d_z`, decoder `d_z → …hidden → input`,
    /// Xavier-initialised.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, d_z: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * d_z);
        let mut dec = vec![d_z];
        dec.extend(hidden.iter().rev());
        dec.push(input_dim);
        Ok(Vae {
            input_dim,
            d_z,
            hidden: hidden.to_vec(),
            encoder: Mlp::xavier(&enc, rng)?,
            decoder: Mlp::xavier(&dec, rng)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.encoder.input_dim() == self.input_dim
            && self.encoder.output_dim() == 2 * self.d_z
            && self.decoder.input_dim() == self.d_z
            && self.decoder.output_dim() == self.input_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Data("vae metadata does not match network shapes".into()))
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        let n = self.encoder.param_count();
        if p.len() < n {
            return Err(Error::DimensionMismatch {
                what: "vae parameters",
                expected: n + self.decoder.param_count(),
                got: p.len(),
            });
        }
        self.encoder.set_params_flat(&p[..n])?;
        self.decoder.set_params_flat(&p[n..])
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "vae input",
                expected: self.input_dim,
                got: rows,
            });
        }
        Ok(())
    }

    fn split_encoder_output(&self, out: &DMatrix<f64>) -> Posterior {
        let d = self.d_z;
        let mean = out.rows(0, d).into_owned();
        let var = out.rows(d, d).map(|lv| lv.exp().clamp(VAR_MIN, VAR_MAX));
        Posterior { mean, var }
    }

    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<Posterior> {
        self.check_input(x.nrows())?;
        Ok(self.split_encoder_output(&self.encoder.apply(x)?))
    }

    /// Diagonal-Gaussian posterior of one feature vector.
    pub fn encode(&self, x: &DVector<f64>) -> Result<Gaussian> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.encode_batch(&m)?.column(0))
    }

    pub fn decode_batch(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.d_z {
            return Err(Error::DimensionMismatch {
                what: "latent",
                expected: self.d_z,
                got: z.nrows(),
            });
        }
        self.decoder.apply(z)
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        Ok(self.decode_batch(&m)?.column(0).into_owned())
    }
}

/// A KL target with its precision and log-determinant precomputed.
#[derive(Clone, Debug)]
pub struct KlPrior {
    mean: DVector<f64>,
    prec: DMatrix<f64>,
    log_det: f64,
}

impl KlPrior {
    pub fn new(p: &Gaussian) -> Result<Self> {
        let chol = Cholesky::new(p.cov.clone()).ok_or_else(|| Error::not_pd("KL prior"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(KlPrior {
            mean: p.mean.clone(),
            prec: chol.inverse(),
            log_det,
        })
    }

    /// KL(N(mu, diag(var)) || self) and its gradients w.r.t. `mu` and `var`.
    fn kl_with_grad(&self, mu: &[f64], var: &[f64], g_mu: &mut [f64], g_var: &mut [f64]) -> f64 {
        let d = mu.len();
        let mut trace = 0.0;
        let mut log_det_q = 0.0;
        for j in 0..d {
            trace += self.prec[(j, j)] * var[j];
            log_det_q += var[j].ln();
            g_var[j] = 0.5 * (self.prec[(j, j)] - 1.0 / var[j]);
        }
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.prec[(i, j)] * (mu[j] - self.mean[j]);
            }
            g_mu[i] = s;
            maha += (mu[i] - self.mean[i]) * s;
        }
        0.5 * (trace + maha - d as f64 + self.log_det - log_det_q)
    }
}

/// Standard-normal noise: `k` matrices of shape `d_z × batch`.
pub fn draw_noise<R: Rng + ?Sized>(k: usize, d_z: usize, batch: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    (0..k)
        .map(|_| DMatrix::from_fn(d_z, batch, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Reconstruction and KL for one agent, with gradients.
#[derive(Clone, Debug)]
pub struct AgentLoss {
    pub recon: f64,
    pub kl: f64,
    pub grads: VaeGrads,
}

fn tile(x: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let b = x.ncols();
    DMatrix::from_fn(x.nrows(), b * k, |i, j| x[(i, j % b)])
}

/// Decoder MSE against `target` tiled over the sample blocks of `z`, with
/// gradients w.r.t. the decoder and `z`.
fn decoder_mse(vae: &Vae, z: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, MlpGrads, DMatrix<f64>)> {
    let k = z.ncols() / target.ncols();
    let (xhat, tape) = vae.decoder.forward(z)?;
    let diff = xhat - tile(target, k);
    let n = diff.len() as f64;
    let loss = diff.norm_squared() / n;
    let (g, gz) = vae.decoder.backward(&tape, &(diff * (2.0 / n)))?;
    Ok((loss, g, gz))
}

/// Posterior reconstruction plus `beta`·KL for one agent's batch.
///
/// `priors[t]` is the KL target of column `t`; `noise` holds one `d_z ×
/// batch` matrix per Monte Carlo sample.
pub fn agent_terms(
    vae: &Vae,
    x: &DMatrix<f64>,
    priors: &[&KlPrior],
    noise: &[DMatrix<f64>],
    beta: f64,
) -> Result<AgentLoss> {
    vae.check_input(x.nrows())?;
    let (b, d) = (x.ncols(), vae.d_z);
    if priors.len() != b {
        return Err(Error::DimensionMismatch {
            what: "per-timestep priors",
            expected: b,
            got: priors.len(),
        });
    }
    if noise.is_empty() || noise.iter().any(|e| e.shape() != (d, b)) {
        return Err(Error::InvalidArgument("noise must be k ≥ 1 matrices of shape d_z × batch".into()));
    }
    let k = noise.len();
    let (enc_out, enc_tape) = vae.encoder.forward(x)?;
    let post = vae.split_encoder_output(&enc_out);
    let sd = post.var.map(f64::sqrt);

    let mut z = DMatrix::zeros(d, b * k);
    for (s, eps) in noise.iter().enumerate() {
        z.columns_mut(s * b, b).copy_from(&(&post.mean + sd.component_mul(eps)));
    }
    let (recon, dec_grads, gz) = decoder_mse(vae, &z, x)?;

    let mut g_mean = DMatrix::zeros(d, b);
    let mut g_var = DMatrix::zeros(d, b);
    for (s, eps) in noise.iter().enumerate() {
        let gzs = gz.columns(s * b, b);
        g_mean += gzs;
        g_var += gzs.component_mul(eps).component_div(&(&sd * 2.0));
    }

    let mut kl = 0.0;
    let (mut gm, mut gv) = (vec![0.0; d], vec![0.0; d]);
    for t in 0..b {
        let mu: Vec<f64> = post.mean.column(t).iter().copied().collect();
        let var: Vec<f64> = post.var.column(t).iter().copied().collect();
        kl += priors[t].kl_with_grad(&mu, &var, &mut gm, &mut gv);
        for j in 0..d {
            g_mean[(j, t)] += beta * gm[j] / b as f64;
            g_var[(j, t)] += beta * gv[j] / b as f64;
        }
    }
    kl /= b as f64;

    // d var / d logvar = var inside the clamp, zero outside
    let mut g_out = DMatrix::zeros(2 * d, b);
    g_out.rows_mut(0, d).copy_from(&g_mean);
    for t in 0..b {
        for j in 0..d {
            let raw = enc_out[(d + j, t)].exp();
            g_out[(d + j, t)] = if (VAR_MIN..=VAR_MAX).contains(&raw) {
                g_var[(j, t)] * post.var[(j, t)]
            } else {
                0.0
            };
        }
    }
    let (enc_grads, _) = vae.encoder.backward(&enc_tape, &g_out)?;
    Ok(AgentLoss {
        recon,
        kl,
        grads: VaeGrads {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    })
}

#[derive(Clone, Debug)]
pub struct HhiLoss {
    pub human: AgentLoss,
    pub robot: AgentLoss,
    pub total: f64,
}

/// Two-agent objective: both reconstructions plus `beta`·(KL_h + KL_r).
/// When the two agents share one network, add the two gradient sets.
#[allow(clippy::too_many_arguments)]
pub fn elbo_hhi(
    v_h: &Vae,
    v_r: &Vae,
    x_h: &DMatrix<f64>,
    x_r: &DMatrix<f64>,
    priors_h: &[&KlPrior],
    priors_r: &[&KlPrior],
    beta: f64,
    noise_h: &[DMatrix<f64>],
    noise_r: &[DMatrix<f64>],
) -> Result<HhiLoss> {
    let human = agent_terms(v_h, x_h, priors_h, noise_h, beta)?;
    let robot = agent_terms(v_r, x_r, priors_r, noise_r, beta)?;
    let total = human.recon + robot.recon + beta * (human.kl + robot.kl);
    Ok(HhiLoss { human, robot, total })
}

#[derive(Clone, Debug)]
pub struct HriLoss {
    pub recon: f64,
    pub kl: f64,
    pub cond: f64,
    pub total: f64,
    pub grads: VaeGrads,
}

/// Robot objective: posterior reconstruction, `beta`·KL and, when
/// `conditional` is given, `weight`·MSE of decoded conditional latents.
/// The conditional latents are treated as constants; only the decoder
/// receives gradient from that term.
pub fn elbo_hri(
    v_r: &Vae,
    x_r: &DMatrix<f64>,
    priors_r: &[&KlPrior],
    beta: f64,
    noise: &[DMatrix<f64>],
    conditional: Option<(&DMatrix<f64>, f64)>,
) -> Result<HriLoss> {
    let base = agent_terms(v_r, x_r, priors_r, noise, beta)?;
    let mut grads = base.grads;
    let mut cond = 0.0;
    let mut total = base.recon + beta * base.kl;
    if let Some((z, weight)) = conditional {
        if z.nrows() != v_r.d_z || z.ncols() % x_r.ncols() != 0 {
            return Err(Error::DimensionMismatch {
                what: "conditional latents",
                expected: v_r.d_z,
                got: z.nrows(),
            });
        }
        let (loss, mut g, _) = decoder_mse(v_r, z, x_r)?;
        g.scale(weight);
        grads.decoder.add_assign(&g);
        cond = loss;
        total += weight * loss;
    }
    Ok(HriLoss {
        recon: base.recon,
        kl: base.kl,
        cond,
        total,
        grads,
    })
}

enum CondStep {
    /// Conditional mean as an affine map of a posterior sample.
    Affine { mean: DVector<f64>, sd: DVector<f64>, map: AffineMean },
    /// Fixed conditional distribution, sampled as `mean + L·eps`.
    Dist { mean: DVector<f64>, l: DMatrix<f64> },
}

/// Conditional latents for one trajectory, precomputed from frozen inputs
/// (human posterior, HMM and mixing weights). Drawing a batch only needs
/// fresh noise.
pub struct ConditionalSampler {
    steps: Vec<CondStep>,
    d_r: usize,
}

impl ConditionalSampler {
    /// `alpha` supplies one row of mixing weights per column of `posterior`.
    pub fn new(hmm: &Hmm, posterior: &Posterior, alpha: &AlphaSequence, variant: Variant) -> Result<Option<Self>> {
        if variant == Variant::V1 {
            return Ok(None);
        }
        let b = posterior.mean.ncols();
        if alpha.len() < b {
            return Err(Error::DimensionMismatch {
                what: "mixing weights",
                expected: b,
                got: alpha.len(),
            });
        }
        let point = if variant.uses_posterior_cov() {
            None
        } else {
            Some(hmm.conditioners(None)?)
        };
        let mut steps = Vec::with_capacity(b);
        for t in 0..b {
            let post = posterior.column(t);
            let a = alpha.row(t);
            let step = match variant {
                Variant::V21 | Variant::V22 => {
                    let conds: Vec<Conditioner> = match &point {
                        Some(c) => c.clone(),
                        None => hmm.conditioners(Some(&post.cov))?,
                    };
                    CondStep::Affine {
                        sd: post.cov.diagonal().map(f64::sqrt),
                        mean: post.mean,
                        map: gmr_affine_mean(&conds, &a),
                    }
                }
                _ => {
                    let g = gmr_condition(hmm, &post, &a, variant.inference_mode())?;
                    CondStep::Dist {
                        l: sampling_factor(&g.cov)?,
                        mean: g.mean,
                    }
                }
            };
            steps.push(step);
        }
        Ok(Some(ConditionalSampler { steps, d_r: hmm.dim_r() }))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Latent batch of shape `d_r × (k·batch)` in the same sample-major
    /// layout as the posterior reconstruction.
    pub fn sample(&self, noise: &[DMatrix<f64>]) -> DMatrix<f64> {
        let b = self.steps.len();
        let mut out = DMatrix::zeros(self.d_r, b * noise.len());
        for (s, eps) in noise.iter().enumerate() {
            for (t, step) in self.steps.iter().enumerate() {
                let e = eps.column(t);
                let z = match step {
                    CondStep::Affine { mean, sd, map } => map.apply(&(mean + sd.component_mul(&e))),
                    CondStep::Dist { mean, l } => mean + l * e,
                };
                out.set_column(s * b + t, &z);
            }
        }
        out
    }
}

/// Cholesky factor for sampling, after a small linearly spaced jitter.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let jittered = regularize_spd(cov, RegSchedule::linear())?;
    match Cholesky::new(jittered) {
        Some(c) => Ok(c.l()),
        None => {
            let repaired = regularize_spd(cov, RegSchedule::eigen())?;
            Cholesky::new(regularize_spd(&repaired, RegSchedule::linear())?)
                .map(|c| c.l())
                .ok_or_else(|| Error::not_pd("conditional covariance"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::kl_divergence;
    use crate::hmm::forward_unobserved;
    use crate::net::grad_check;
    use crate::rng_from_seed;
    use approx::assert_abs_diff_eq;

    fn small_vae(seed: u64, input: usize) -> Vae {
        Vae::new(input, 3, &[8, 6], &mut rng_from_seed(seed)).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_prior(d: usize, seed: u64) -> Gaussian {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        Gaussian::new(
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            &a * a.transpose() + DMatrix::identity(d, d) * 0.5,
        )
        .unwrap()
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
        assert!("v4".parse::<Variant>().is_err());
        assert_eq!(Variant::V32.inference_mode(), CondMode::WithCov);
        assert_eq!(Variant::V31.inference_mode(), CondMode::Point);
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let mut v = small_vae(1, 4);
        let zeros = vec![0.0; v.encoder.param_count()];
        v.encoder.set_params_flat(&zeros).unwrap();
        let g = v.encode(&DVector::from_vec(vec![0.3, 1.0, -2.0, 0.5])).unwrap();
        assert_eq!(g.mean, DVector::zeros(3));
        assert_eq!(g.cov, DMatrix::identity(3, 3));
    }

    #[test]
    fn posterior_is_positive_diagonal_even_when_clamped() {
        let mut v = small_vae(2, 4);
        let mut p = v.encoder.params_flat();
        for x in p.iter_mut() {
            *x *= 400.0;
        }
        v.encoder.set_params_flat(&p).unwrap();
        for seed in 0..10 {
            let x = random_batch(4, 1, seed).column(0).into_owned();
            let g = v.encode(&x).unwrap();
            for i in 0..3 {
                assert!(g.cov[(i, i)] >= 1e-8 && g.cov[(i, i)] <= 1e4);
                for j in 0..3 {
                    if i != j {
                        assert_eq!(g.cov[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_encoder_reproduces_input() {
        // single-layer encoder with hand-set weights: mean = x, log-var = 0
        let d = 3;
        let mut enc = Mlp::zeros(&[d, 2 * d]).unwrap();
        for i in 0..d {
            enc.layer_mut(0).weight[(i, i)] = 1.0;
        }
        let v = Vae {
            input_dim: d,
            d_z: d,
            hidden: vec![],
            encoder: enc,
            decoder: Mlp::zeros(&[d, d]).unwrap(),
        };
        let x = DVector::from_vec(vec![0.25, -1.5, 3.0]);
        assert_abs_diff_eq!(v.encode(&x).unwrap().mean, x, epsilon = 1e-9);
        assert_eq!(v.decode(&x).unwrap(), DVector::zeros(d));
    }

    #[test]
    fn decode_is_deterministic_and_checks_shape() {
        let v = small_vae(3, 5);
        let z = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        assert_eq!(v.decode(&z).unwrap(), v.decode(&z).unwrap());
        assert!(v.decode(&DVector::zeros(4)).is_err());
        assert!(v.encode(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn kl_term_matches_closed_form() {
        let p = random_prior(3, 9);
        let kp = KlPrior::new(&p).unwrap();
        let mu = [0.3, -0.2, 0.8];
        let var = [0.5, 1.3, 0.2];
        let (mut gm, mut gv) = ([0.0; 3], [0.0; 3]);
        let got = kp.kl_with_grad(&mu, &var, &mut gm, &mut gv);
        let q = Gaussian::diagonal(DVector::from_row_slice(&mu), &DVector::from_row_slice(&var));
        assert_abs_diff_eq!(got, kl_divergence(&q, &p).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn pure_reconstruction_limit() {
        // Linear autoencoder that copies its input, posterior variance pinned
        // at the clamp floor: the loss is reconstruction only and vanishes.
        let d = 3;
        let mut enc = Mlp::zeros(&[d, 2 * d]).unwrap();
        let mut dec = Mlp::zeros(&[d, d]).unwrap();
        for i in 0..d {
            enc.layer_mut(0).weight[(i, i)] = 1.0;
            enc.layer_mut(0).bias[d + i] = -40.0;
            dec.layer_mut(0).weight[(i, i)] = 1.0;
        }
        let v = Vae {
            input_dim: d,
            d_z: d,
            hidden: vec![],
            encoder: enc,
            decoder: dec,
        };
        let x = random_batch(d, 4, 10);
        let prior = KlPrior::new(&Gaussian::standard(d)).unwrap();
        let priors = vec![&prior; 4];
        let noise = draw_noise(10, d, 4, &mut rng_from_seed(11));
        let l = elbo_hhi(&v, &v, &x, &x, &priors, &priors, 0.0, &noise, &noise).unwrap();
        assert!(l.total.abs() < 1e-6, "loss {}", l.total);
    }

    fn hhi_loss_and_grad(v: &mut Vae, p: &[f64], x_h: &DMatrix<f64>, x_r: &DMatrix<f64>, priors: &[&KlPrior], noise: &[DMatrix<f64>]) -> (f64, Vec<f64>) {
        v.set_params_flat(p).unwrap();
        let l = elbo_hhi(v, v, x_h, x_r, priors, priors, 0.3, noise, noise).unwrap();
        let mut g = l.human.grads.clone();
        g.add_assign(&l.robot.grads);
        (l.total, g.flat())
    }

    #[test]
    fn hhi_gradients_match_finite_differences() {
        let mut v = small_vae(12, 4);
        let x_h = random_batch(4, 3, 13);
        let x_r = random_batch(4, 3, 14);
        let p1 = KlPrior::new(&random_prior(3, 15)).unwrap();
        let p2 = KlPrior::new(&random_prior(3, 16)).unwrap();
        let priors = vec![&p1, &p2, &p1];
        let noise = draw_noise(4, 3, 3, &mut rng_from_seed(17));
        let p0 = v.params_flat();
        let err = grad_check(|p| hhi_loss_and_grad(&mut v, p, &x_h, &x_r, &priors, &noise), &p0, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn toy_hmm(d_z: usize) -> Hmm {
        let mut rng = rng_from_seed(40);
        let comps = (0..3)
            .map(|_| {
                let a = DMatrix::from_fn(2 * d_z, 2 * d_z, |_, _| rng.random_range(-0.4..0.4));
                Gaussian::new(
                    DVector::from_fn(2 * d_z, |_, _| rng.random_range(-1.0..1.0)),
                    &a * a.transpose() + DMatrix::identity(2 * d_z, 2 * d_z) * 0.3,
                )
                .unwrap()
            })
            .collect();
        let (pi, trans) = crate::hmm::left_to_right(3);
        Hmm::new(pi, trans, comps, d_z).unwrap()
    }

    #[test]
    fn v1_equals_robot_half_of_two_agent_loss() {
        let v_h = small_vae(20, 4);
        let v_r = small_vae(21, 5);
        let x_h = random_batch(4, 3, 22);
        let x_r = random_batch(5, 3, 23);
        let p = KlPrior::new(&random_prior(3, 24)).unwrap();
        let priors = vec![&p; 3];
        let nh = draw_noise(3, 3, 3, &mut rng_from_seed(25));
        let nr = draw_noise(3, 3, 3, &mut rng_from_seed(26));
        let hhi = elbo_hhi(&v_h, &v_r, &x_h, &x_r, &priors, &priors, 5e-3, &nh, &nr).unwrap();
        let hri = elbo_hri(&v_r, &x_r, &priors, 5e-3, &nr, None).unwrap();
        assert_abs_diff_eq!(hri.total, hhi.robot.recon + 5e-3 * hhi.robot.kl, epsilon = 1e-12);
        assert_eq!(hri.grads, hhi.robot.grads);
    }

    #[test]
    fn hri_gradients_for_every_variant() {
        let d_z = 3;
        let hmm = toy_hmm(d_z);
        let v_h = small_vae(30, 4);
        let mut v_r = small_vae(31, 5);
        let x_h = random_batch(4, 3, 32);
        let x_r = random_batch(5, 3, 33);
        let post = v_h.encode_batch(&x_h).unwrap();
        let alpha = forward_unobserved(&hmm, 3).unwrap();
        let marg: Vec<KlPrior> = (0..3).map(|i| KlPrior::new(&hmm.marginal(i, crate::hmm::Block::Robot)).unwrap()).collect();
        let priors: Vec<&KlPrior> = (0..3).map(|t| &marg[crate::hmm::most_likely(&alpha.row(t))]).collect();
        let noise = draw_noise(4, d_z, 3, &mut rng_from_seed(34));
        let cnoise = draw_noise(4, d_z, 3, &mut rng_from_seed(35));
        let p0 = v_r.params_flat();
        for variant in Variant::ALL {
            let sampler = ConditionalSampler::new(&hmm, &post, &alpha, variant).unwrap();
            let zc = sampler.map(|s| s.sample(&cnoise));
            let err = grad_check(
                |p| {
                    v_r.set_params_flat(p).unwrap();
                    let l = elbo_hri(&v_r, &x_r, &priors, 0.2, &noise, zc.as_ref().map(|z| (z, 1.0))).unwrap();
                    (l.total, l.grads.flat())
                },
                &p0,
                1e-5,
            );
            assert!(err < 1e-4, "{variant}: relative error {err}");
            v_r.set_params_flat(&p0).unwrap();
            let l = elbo_hri(&v_r, &x_r, &priors, 0.2, &noise, zc.as_ref().map(|z| (z, 1.0))).unwrap();
            assert!(l.cond >= 0.0);
        }
    }

    #[test]
    fn v32_approaches_v31_for_tiny_posterior_covariance() {
        let d_z = 3;
        let hmm = toy_hmm(d_z);
        let v_r = small_vae(50, 5);
        let x_r = random_batch(5, 4, 51);
        let post = Posterior {
            mean: random_batch(d_z, 4, 52),
            var: DMatrix::from_element(d_z, 4, 1e-8),
        };
        let alpha = forward_unobserved(&hmm, 4).unwrap();
        let noise = draw_noise(10, d_z, 4, &mut rng_from_seed(53));
        let cond = |variant| {
            let z = ConditionalSampler::new(&hmm, &post, &alpha, variant).unwrap().unwrap().sample(&noise);
            let p = KlPrior::new(&Gaussian::standard(d_z)).unwrap();
            elbo_hri(&v_r, &x_r, &vec![&p; 4], 0.0, &noise, Some((&z, 1.0))).unwrap().cond
        };
        assert!((cond(Variant::V32) - cond(Variant::V31)).abs() < 1e-5);
    }

    #[test]
    fn shared_weights_receive_both_agents_gradients() {
        let v = small_vae(60, 4);
        let x_h = random_batch(4, 2, 61);
        let x_r = random_batch(4, 2, 62);
        let p = KlPrior::new(&Gaussian::standard(3)).unwrap();
        let priors = vec![&p; 2];
        let n = draw_noise(2, 3, 2, &mut rng_from_seed(63));
        let l = elbo_hhi(&v, &v, &x_h, &x_r, &priors, &priors, 5e-3, &n, &n).unwrap();
        // step on the human half only; the robot encoding moves because
        // both agents are the same network
        let mut updated = v.clone();
        let mut opt = VaeOptimizer::new(AdamConfig::default(), &v);
        opt.step(&mut updated, &l.human.grads).unwrap();
        let before = v.encode_batch(&x_r).unwrap().mean;
        let after = updated.encode_batch(&x_r).unwrap().mean;
        assert_ne!(before, after);
        let again = elbo_hhi(&updated, &updated, &x_h, &x_r, &priors, &priors, 5e-3, &n, &n).unwrap();
        assert_ne!(again.robot.recon, l.robot.recon);
    }

    #[test]
    fn json_has_metadata() {
        let v = small_vae(70, 4);
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.contains("\"d_z\":3") && s.contains("\"input_dim\":4"));
        let back: Vae = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        back.validate().unwrap();
    }
}
