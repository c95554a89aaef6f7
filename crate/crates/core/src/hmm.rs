//! Full-covariance hidden Markov models over the joint latent space of two
//! agents.
//!
//! Emission components live in the concatenated `(z_h; z_r)` space; the
//! first `split` dimensions belong to the observed agent. The forward
//! recursion can run against the full joint, either marginal, or with the
//! likelihood switched off entirely (the transition-only progression used
//! as a training prior).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{
    matrix_to_rows, regularize_spd, rows_to_matrix, symmetrize, BlockedGaussian, CachedDensity, Gaussian,
    RegSchedule,
};

const PROB_TOL: f64 = 1e-9;
const STARVATION_MASS: f64 = 1e-8;

/// Which slice of the joint latent an observation sequence covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Full,
    Human,
    Robot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "HmmRepr", try_from = "HmmRepr")]
pub struct Hmm {
    pub pi: DVector<f64>,
    pub trans: DMatrix<f64>,
    pub components: Vec<Gaussian>,
    /// Number of leading dimensions belonging to the observed agent.
    pub split: usize,
}

#[derive(Serialize, Deserialize)]
struct HmmRepr {
    pi: Vec<f64>,
    trans: Vec<Vec<f64>>,
    components: Vec<Gaussian>,
    #[serde(default)]
    split: Option<usize>,
}

impl From<Hmm> for HmmRepr {
    fn from(h: Hmm) -> Self {
        HmmRepr {
            pi: h.pi.iter().copied().collect(),
            trans: matrix_to_rows(&h.trans),
            components: h.components,
            split: Some(h.split),
        }
    }
}

impl TryFrom<HmmRepr> for Hmm {
    type Error = Error;

    fn try_from(r: HmmRepr) -> Result<Self> {
        let dim = r.components.first().map_or(0, Gaussian::dim);
        let split = r.split.unwrap_or(dim / 2);
        Hmm::new(DVector::from_vec(r.pi), rows_to_matrix(&r.trans)?, r.components, split)
    }
}

impl Hmm {
    pub fn new(pi: DVector<f64>, trans: DMatrix<f64>, components: Vec<Gaussian>, split: usize) -> Result<Self> {
        let n = pi.len();
        if n == 0 {
            return Err(Error::InvalidArgument("hmm needs at least one state".into()));
        }
        if trans.nrows() != n || trans.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "transition matrix",
                expected: n,
                got: trans.nrows(),
            });
        }
        if components.len() != n {
            return Err(Error::DimensionMismatch {
                what: "hmm components",
                expected: n,
                got: components.len(),
            });
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidArgument("hmm components differ in dimension".into()));
        }
        if split > dim {
            return Err(Error::InvalidArgument(format!("split {split} exceeds dimension {dim}")));
        }
        if pi.iter().any(|p| *p < 0.0) || (pi.sum() - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument("initial distribution is not a probability vector".into()));
        }
        for (i, row) in trans.row_iter().enumerate() {
            if row.iter().any(|p| *p < 0.0) || (row.sum() - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidArgument(format!("transition row {i} is not stochastic")));
            }
        }
        Ok(Hmm {
            pi,
            trans,
            components,
            split,
        })
    }

    /// Left-to-right chain with every component at `N(0, I)`.
    pub fn standard(n_states: usize, dim: usize, split: usize) -> Result<Self> {
        let (pi, trans) = left_to_right(n_states);
        Hmm::new(pi, trans, vec![Gaussian::standard(dim); n_states], split)
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn dim_h(&self) -> usize {
        self.split
    }

    pub fn dim_r(&self) -> usize {
        self.dim() - self.split
    }

    pub fn blocked(&self, i: usize) -> Result<BlockedGaussian> {
        BlockedGaussian::new(self.components[i].clone(), self.split)
    }

    pub fn marginal(&self, i: usize, block: Block) -> Gaussian {
        let c = &self.components[i];
        match block {
            Block::Full => c.clone(),
            Block::Human => c.marginal(0, self.split),
            Block::Robot => c.marginal(self.split, self.dim_r()),
        }
    }

    fn block_dim(&self, block: Block) -> usize {
        match block {
            Block::Full => self.dim(),
            Block::Human => self.dim_h(),
            Block::Robot => self.dim_r(),
        }
    }

    /// Precomputed emission densities for one block.
    pub fn emissions(&self, block: Block) -> Result<EmissionModel> {
        let dens = (0..self.n_states())
            .map(|i| CachedDensity::new(&self.marginal(i, block)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmissionModel {
            dens,
            dim: self.block_dim(block),
        })
    }

    /// One step of the normalised forward recursion. `prev = None` starts
    /// from the initial distribution.
    pub fn forward_step(&self, em: &EmissionModel, prev: Option<&DVector<f64>>, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != em.dim {
            return Err(Error::DimensionMismatch {
                what: "forward observation",
                expected: em.dim,
                got: x.len(),
            });
        }
        let pred = self.predict(prev);
        let lb = em.log_likelihoods(x.as_slice());
        normalise_log(&pred, &lb).map(|(a, _)| a).ok_or_else(|| collapse(0))
    }

    fn predict(&self, prev: Option<&DVector<f64>>) -> DVector<f64> {
        match prev {
            None => self.pi.clone(),
            Some(a) => self.trans.tr_mul(a),
        }
    }

    fn forward_pass(&self, em: &EmissionModel, obs: &[DVector<f64>]) -> Result<ForwardPass> {
        let n = self.n_states();
        let t_len = obs.len();
        let mut alpha = DMatrix::zeros(t_len, n);
        let mut log_b = Vec::with_capacity(t_len);
        let mut log_c = Vec::with_capacity(t_len);
        let mut prev: Option<DVector<f64>> = None;
        for (t, x) in obs.iter().enumerate() {
            if x.len() != em.dim {
                return Err(Error::DimensionMismatch {
                    what: "forward observation",
                    expected: em.dim,
                    got: x.len(),
                });
            }
            let pred = self.predict(prev.as_ref());
            let lb = em.log_likelihoods(x.as_slice());
            let (a, lc) = normalise_log(&pred, &lb).ok_or_else(|| collapse(t))?;
            alpha.set_row(t, &a.transpose());
            log_b.push(lb);
            log_c.push(lc);
            prev = Some(a);
        }
        Ok(ForwardPass { alpha, log_b, log_c })
    }

    pub fn log_likelihood(&self, seqs: &[Vec<DVector<f64>>], block: Block) -> Result<f64> {
        let em = self.emissions(block)?;
        let mut total = 0.0;
        for s in seqs {
            total += self.forward_pass(&em, s)?.log_c.iter().sum::<f64>();
        }
        Ok(total)
    }

    /// Per-component conditioning terms for a given posterior covariance
    /// (`None` means conditioning on a point).
    pub fn conditioners(&self, post_cov: Option<&DMatrix<f64>>) -> Result<Vec<Conditioner>> {
        (0..self.n_states())
            .map(|i| Conditioner::new(&self.blocked(i)?, post_cov))
            .collect()
    }
}

fn collapse(t: usize) -> Error {
    Error::Numerical(format!("forward variable collapsed at timestep {t}: all state likelihoods are zero"))
}

/// `α ∝ pred ⊙ exp(lb)` computed in log space. Returns the normalised vector
/// and the log normaliser.
fn normalise_log(pred: &DVector<f64>, lb: &[f64]) -> Option<(DVector<f64>, f64)> {
    let la: Vec<f64> = pred
        .iter()
        .zip(lb)
        .map(|(p, l)| if *p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let m = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut a = DVector::from_iterator(la.len(), la.iter().map(|v| (v - m).exp()));
    let s = a.sum();
    a /= s;
    Some((a, m + s.ln()))
}

struct ForwardPass {
    alpha: DMatrix<f64>,
    log_b: Vec<Vec<f64>>,
    log_c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EmissionModel {
    dens: Vec<CachedDensity>,
    dim: usize,
}

impl EmissionModel {
    pub fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        self.dens.iter().map(|d| d.log_pdf_slice(x)).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Rows of per-timestep state probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSequence {
    pub values: DMatrix<f64>,
}

impl AlphaSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.values.row(t).transpose()
    }
}

/// Normalised forward variable of `obs` under the selected block.
pub fn forward(hmm: &Hmm, obs: &[DVector<f64>], block: Block) -> Result<AlphaSequence> {
    let em = hmm.emissions(block)?;
    Ok(AlphaSequence {
        values: hmm.forward_pass(&em, obs)?.alpha,
    })
}

/// Forward variable with every likelihood set to one: pure transition
/// progression from the initial distribution.
pub fn forward_unobserved(hmm: &Hmm, horizon: usize) -> Result<AlphaSequence> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let n = hmm.n_states();
    let mut values = DMatrix::zeros(horizon, n);
    let mut a = hmm.pi.clone() / hmm.pi.sum();
    values.set_row(0, &a.transpose());
    for t in 1..horizon {
        a = hmm.trans.tr_mul(&a);
        a /= a.sum();
        values.set_row(t, &a.transpose());
    }
    Ok(AlphaSequence { values })
}

/// Most likely state; ties go to the lowest index.
pub fn most_likely(alpha: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, v) in alpha.iter().enumerate() {
        if *v > alpha[best] {
            best = i;
        }
    }
    best
}

pub fn left_to_right(n: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut pi = DVector::zeros(n);
    pi[0] = 1.0;
    let mut trans = DMatrix::zeros(n, n);
    for i in 0..n {
        if i + 1 < n {
            trans[(i, i)] = 0.9;
            trans[(i, i + 1)] = 0.1;
        } else {
            trans[(i, i)] = 1.0;
        }
    }
    (pi, trans)
}

fn segment_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

fn fit_gaussian<'a, I>(points: I, dim: usize) -> Option<Gaussian>
where
    I: Iterator<Item = &'a DVector<f64>> + Clone,
{
    let count = points.clone().count();
    if count == 0 {
        return None;
    }
    let mean = points.clone().fold(DVector::zeros(dim), |acc, p| acc + p) / count as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in points {
        let d = p - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= count as f64;
    Some(Gaussian { mean, cov })
}

fn segment_gaussians(seqs: &[Vec<DVector<f64>>], n: usize) -> Result<Vec<Gaussian>> {
    let dim = seqs
        .first()
        .and_then(|s| s.first())
        .map(DVector::len)
        .ok_or_else(|| Error::InvalidArgument("no latent sequences".into()))?;
    (0..n)
        .map(|i| {
            let pts: Vec<&DVector<f64>> = seqs
                .iter()
                .flat_map(|s| {
                    let (a, b) = segment_bounds(s.len(), n, i);
                    s[a..b].iter()
                })
                .collect();
            let g = fit_gaussian(pts.iter().copied(), dim).expect("non-empty segment");
            Ok(Gaussian {
                cov: regularize_spd(&g.cov, RegSchedule::flat())?,
                mean: g.mean,
            })
        })
        .collect()
}

/// Initialise from equal time slices of every sequence, with a
/// left-to-right transition structure.
pub fn init_segments(seqs: &[Vec<DVector<f64>>], n_states: usize, split: usize) -> Result<Hmm> {
    if n_states == 0 {
        return Err(Error::InvalidArgument("n_states must be positive".into()));
    }
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no latent sequences".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() < n_states) {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} is shorter than {n_states} states",
            s.len()
        )));
    }
    let comps = segment_gaussians(seqs, n_states)?;
    let (pi, trans) = left_to_right(n_states);
    Hmm::new(pi, trans, comps, split)
}

/// Result of a Baum-Welch run.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub hmm: Hmm,
    /// Log-likelihood of the parameters entering each iteration, ending
    /// with the returned parameters.
    pub trace: Vec<f64>,
    /// Posterior occupancy mass of each state under the returned model.
    pub occupancy: Vec<f64>,
}

struct Stats {
    gamma: Vec<DMatrix<f64>>,
    xi_sum: DMatrix<f64>,
    loglik: f64,
}

fn e_step(hmm: &Hmm, seqs: &[Vec<DVector<f64>>]) -> Result<Stats> {
    let n = hmm.n_states();
    let em = hmm.emissions(Block::Full)?;
    let mut gamma = Vec::with_capacity(seqs.len());
    let mut xi_sum: DMatrix<f64> = DMatrix::zeros(n, n);
    let mut loglik = 0.0;
    for seq in seqs {
        let fp = hmm.forward_pass(&em, seq)?;
        loglik += fp.log_c.iter().sum::<f64>();
        let t_len = seq.len();
        let mut beta = DMatrix::from_element(t_len, n, 1.0);
        for t in (0..t_len.saturating_sub(1)).rev() {
            let w: Vec<f64> = fp.log_b[t + 1].iter().map(|lb| (lb - fp.log_c[t + 1]).min(700.0).exp()).collect();
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    let tij = hmm.trans[(i, j)];
                    if tij > 0.0 {
                        s += tij * w[j] * beta[(t + 1, j)];
                    }
                }
                beta[(t, i)] = s;
            }
            for i in 0..n {
                let a = fp.alpha[(t, i)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let tij = hmm.trans[(i, j)];
                    if tij > 0.0 {
                        xi_sum[(i, j)] += a * tij * w[j] * beta[(t + 1, j)];
                    }
                }
            }
        }
        let mut g = DMatrix::zeros(t_len, n);
        for t in 0..t_len {
            let mut s = 0.0;
            for i in 0..n {
                let a = fp.alpha[(t, i)];
                let v = if a == 0.0 { 0.0 } else { a * beta[(t, i)] };
                g[(t, i)] = v;
                s += v;
            }
            if s > 0.0 && s.is_finite() {
                for i in 0..n {
                    g[(t, i)] /= s;
                }
            }
        }
        gamma.push(g);
    }
    if !loglik.is_finite() || xi_sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite statistics in E-step".into()));
    }
    Ok(Stats { gamma, xi_sum, loglik })
}

fn m_step(hmm: &Hmm, seqs: &[Vec<DVector<f64>>], stats: &Stats) -> Result<Hmm> {
    let n = hmm.n_states();
    let dim = hmm.dim();

    let mut pi = DVector::zeros(n);
    for g in &stats.gamma {
        pi += g.row(0).transpose();
    }
    pi /= pi.sum();

    let mut trans = hmm.trans.clone();
    for i in 0..n {
        let row_sum: f64 = stats.xi_sum.row(i).sum();
        if row_sum > 0.0 {
            for j in 0..n {
                trans[(i, j)] = stats.xi_sum[(i, j)] / row_sum;
            }
        }
    }

    let mut comps = Vec::with_capacity(n);
    let mut fallback: Option<Gaussian> = None;
    for i in 0..n {
        let mass: f64 = stats.gamma.iter().map(|g| g.column(i).sum()).sum();
        if mass < STARVATION_MASS {
            let g = match &fallback {
                Some(g) => g.clone(),
                None => {
                    let g = highest_variance_segment(seqs, n)?;
                    fallback = Some(g.clone());
                    g
                }
            };
            log::warn!("hmm state {i} starved (mass {mass:.3e}); reinitialised from highest-variance segment");
            comps.push(g);
            continue;
        }
        let mut mean = DVector::zeros(dim);
        for (seq, g) in seqs.iter().zip(&stats.gamma) {
            for (t, z) in seq.iter().enumerate() {
                mean.axpy(g[(t, i)], z, 1.0);
            }
        }
        mean /= mass;
        let mut cov = DMatrix::zeros(dim, dim);
        for (seq, g) in seqs.iter().zip(&stats.gamma) {
            for (t, z) in seq.iter().enumerate() {
                let w = g[(t, i)];
                if w > 0.0 {
                    let d = z - &mean;
                    cov.ger(w, &d, &d, 1.0);
                }
            }
        }
        cov /= mass;
        comps.push(Gaussian {
            mean,
            cov: regularize_spd(&cov, RegSchedule::flat())?,
        });
    }
    Ok(Hmm {
        pi,
        trans,
        components: comps,
        split: hmm.split,
    })
}

fn highest_variance_segment(seqs: &[Vec<DVector<f64>>], n: usize) -> Result<Gaussian> {
    let segs = segment_gaussians(seqs, n)?;
    Ok(segs
        .into_iter()
        .max_by(|a, b| a.cov.trace().total_cmp(&b.cov.trace()))
        .expect("at least one segment"))
}

/// Baum-Welch over the full joint latent. Stops once the relative
/// improvement drops below `tol` or after `max_iters` M-steps.
pub fn em_fit(init: &Hmm, seqs: &[Vec<DVector<f64>>], max_iters: usize, tol: f64) -> Result<EmFit> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("em_fit needs at least one sequence".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(format!("sequence of length {} is too short for EM", s.len())));
    }
    let mut hmm = init.clone();
    let mut trace = Vec::new();
    let mut stats = e_step(&hmm, seqs)?;
    trace.push(stats.loglik);
    for _ in 0..max_iters {
        let next = m_step(&hmm, seqs, &stats)?;
        let next_stats = e_step(&next, seqs)?;
        let prev_ll = stats.loglik;
        hmm = next;
        stats = next_stats;
        trace.push(stats.loglik);
        if stats.loglik - prev_ll < tol * prev_ll.abs() {
            break;
        }
    }
    let occupancy = (0..hmm.n_states())
        .map(|i| stats.gamma.iter().map(|g| g.column(i).sum()).sum())
        .collect();
    Ok(EmFit { hmm, trace, occupancy })
}

/// How the observed agent's posterior enters the conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Condition on the posterior mean only.
    Point,
    /// Add the posterior covariance to the h-block before inverting.
    WithCov,
}

/// Conditioning terms of one joint component for a fixed posterior
/// covariance: `mu_r + K (z - mu_h)` and `Σrr - K Σhr`.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub mean_h: DVector<f64>,
    pub mean_r: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

impl Conditioner {
    pub fn new(j: &BlockedGaussian, post_cov: Option<&DMatrix<f64>>) -> Result<Self> {
        let mut hh = j.cov_hh();
        if let Some(s) = post_cov {
            if s.nrows() != hh.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "posterior covariance",
                    expected: hh.nrows(),
                    got: s.nrows(),
                });
            }
            hh += s;
        }
        let chol = Cholesky::new(hh).ok_or_else(|| Error::not_pd("singular conditioning matrix"))?;
        let cov_hr = j.cov_hr();
        let gain = chol.solve(&cov_hr).transpose();
        let cov = j.cov_rr() - &gain * cov_hr;
        Ok(Conditioner {
            mean_h: j.mean_h(),
            mean_r: j.mean_r(),
            gain,
            cov,
        })
    }

    pub fn mean(&self, z_h: &DVector<f64>) -> DVector<f64> {
        &self.mean_r + &self.gain * (z_h - &self.mean_h)
    }
}

/// Affine form `a + B z` of the mixture conditional mean.
#[derive(Clone, Debug)]
pub struct AffineMean {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl AffineMean {
    pub fn apply(&self, z_h: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * z_h
    }
}

pub fn gmr_affine_mean(conds: &[Conditioner], alpha: &DVector<f64>) -> AffineMean {
    let (dr, dh) = conds[0].gain.shape();
    let mut offset = DVector::zeros(dr);
    let mut gain = DMatrix::zeros(dr, dh);
    for (c, a) in conds.iter().zip(alpha.iter()) {
        if *a == 0.0 {
            continue;
        }
        offset += (&c.mean_r - &c.gain * &c.mean_h) * *a;
        gain += &c.gain * *a;
    }
    AffineMean { offset, gain }
}

/// Moment-matched mixture conditional from precomputed per-component terms.
pub fn gmr_mix(conds: &[Conditioner], z_h: &DVector<f64>, alpha: &DVector<f64>) -> Result<Gaussian> {
    if conds.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            what: "mixture weights",
            expected: conds.len(),
            got: alpha.len(),
        });
    }
    let dr = conds[0].mean_r.len();
    let mut mean = DVector::zeros(dr);
    let mut second = DMatrix::zeros(dr, dr);
    for (c, a) in conds.iter().zip(alpha.iter()) {
        if *a == 0.0 {
            continue;
        }
        let mu = c.mean(z_h);
        second += (&c.cov + &mu * mu.transpose()) * *a;
        mean.axpy(*a, &mu, 1.0);
    }
    let cov = second - &mean * mean.transpose();
    Ok(Gaussian {
        cov: regularize_spd(&symmetrize(&cov), RegSchedule::eigen())?,
        mean,
    })
}

/// Condition the HMM's robot block on a posterior over the human block.
pub fn gmr_condition(hmm: &Hmm, posterior: &Gaussian, alpha: &DVector<f64>, mode: CondMode) -> Result<Gaussian> {
    if posterior.dim() != hmm.dim_h() {
        return Err(Error::DimensionMismatch {
            what: "posterior",
            expected: hmm.dim_h(),
            got: posterior.dim(),
        });
    }
    if (alpha.sum() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument("mixture weights do not sum to one".into()));
    }
    let post_cov = match mode {
        CondMode::Point => None,
        CondMode::WithCov => Some(&posterior.cov),
    };
    let conds: Vec<Conditioner> = hmm
        .components
        .iter()
        .zip(alpha.iter())
        .map(|(c, a)| {
            let j = BlockedGaussian::new(c.clone(), hmm.split)?;
            if *a == 0.0 {
                // weight zero: never evaluated by the mixture
                Ok(Conditioner {
                    mean_h: j.mean_h(),
                    mean_r: j.mean_r(),
                    gain: DMatrix::zeros(j.dim_r(), j.dim_h()),
                    cov: j.cov_rr(),
                })
            } else {
                Conditioner::new(&j, post_cov)
            }
        })
        .collect::<Result<_>>()?;
    gmr_mix(&conds, &posterior.mean, alpha)
}

/// Auxiliary density over observed-agent latents that the human-only
/// forward variable misplaces at the reach→contact boundary, plus the
/// manually labelled state sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionStateModel {
    #[serde(default)]
    pub gate: Option<Gaussian>,
    #[serde(default)]
    pub contact_states: Vec<usize>,
    #[serde(default)]
    pub reach_states: Vec<usize>,
}

impl TransitionStateModel {
    pub fn new(contact_states: Vec<usize>, reach_states: Vec<usize>) -> Result<Self> {
        if contact_states.iter().any(|c| reach_states.contains(c)) {
            return Err(Error::Config("contact and reach state sets overlap".into()));
        }
        if contact_states.is_empty() {
            log::warn!("no contact states configured; the contact gate will never fire");
        }
        Ok(TransitionStateModel {
            gate: None,
            contact_states,
            reach_states,
        })
    }

    fn reach_set(&self, n: usize) -> Vec<usize> {
        if self.reach_states.is_empty() {
            (0..n).filter(|i| !self.contact_states.contains(i)).collect()
        } else {
            self.reach_states.clone()
        }
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        if let Some(s) = self.contact_states.iter().chain(&self.reach_states).find(|s| **s >= n_states) {
            return Err(Error::Config(format!("state index {s} out of range for {n_states} states")));
        }
        Ok(())
    }
}

/// Latching contact detector state for one trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateState {
    pub latched: bool,
    warned: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateDecision {
    pub in_contact: bool,
    pub stiffness_low: bool,
}

/// Contact detection from the human-only forward variable. Fires when the
/// most probable contact state beats every reach state, or when the
/// transition-state density at `z_h` beats the α-weighted reach-state
/// marginals. Once fired it stays fired.
pub fn contact_gate(
    hmm: &Hmm,
    alpha: &DVector<f64>,
    tsm: &TransitionStateModel,
    z_h: &DVector<f64>,
    state: &mut GateState,
) -> Result<GateDecision> {
    if tsm.contact_states.is_empty() {
        if !state.warned {
            log::warn!("contact gate has no contact states; gate disabled");
            state.warned = true;
        }
        return Ok(GateDecision {
            in_contact: false,
            stiffness_low: false,
        });
    }
    if !state.latched {
        let n = hmm.n_states();
        tsm.validate(n)?;
        let reach = tsm.reach_set(n);
        let best = |set: &[usize]| set.iter().map(|i| alpha[*i]).fold(0.0, f64::max);
        let mut fire = best(&tsm.contact_states) > best(&reach);
        if !fire {
            if let Some(g) = &tsm.gate {
                let lg = g.log_pdf(z_h)?;
                let mass: f64 = reach.iter().map(|i| alpha[*i]).sum();
                let mut terms = Vec::with_capacity(reach.len());
                for &i in &reach {
                    let w = if mass > 0.0 { alpha[i] / mass } else { 1.0 / reach.len() as f64 };
                    if w > 0.0 {
                        terms.push(w.ln() + hmm.marginal(i, Block::Human).log_pdf(z_h)?);
                    }
                }
                let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lr = if m.is_finite() {
                    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                } else {
                    f64::NEG_INFINITY
                };
                fire = lg > lr;
            }
        }
        state.latched = fire;
    }
    Ok(GateDecision {
        in_contact: state.latched,
        stiffness_low: state.latched,
    })
}

/// Fit the transition-state density to human latents whose human-only
/// segmentation says "reach" while the joint segmentation says "contact".
/// Returns `None` when no timestep is misclassified.
pub fn fit_gate(
    hmm: &Hmm,
    joint_seqs: &[Vec<DVector<f64>>],
    contact: &[usize],
    reach: &[usize],
) -> Result<Option<Gaussian>> {
    let em_h = hmm.emissions(Block::Human)?;
    let em_f = hmm.emissions(Block::Full)?;
    let dh = hmm.dim_h();
    let mut points = Vec::new();
    for seq in joint_seqs {
        let hs: Vec<DVector<f64>> = seq.iter().map(|z| z.rows(0, dh).into_owned()).collect();
        let ah = hmm.forward_pass(&em_h, &hs)?.alpha;
        let af = hmm.forward_pass(&em_f, seq)?.alpha;
        for (t, zh) in hs.into_iter().enumerate() {
            let sh = most_likely(&ah.row(t).transpose());
            let sf = most_likely(&af.row(t).transpose());
            if reach.contains(&sh) && contact.contains(&sf) {
                points.push(zh);
            }
        }
    }
    match fit_gaussian(points.iter(), dh) {
        None => Ok(None),
        Some(g) => Ok(Some(Gaussian {
            cov: regularize_spd(&g.cov, RegSchedule::flat())?,
            mean: g.mean,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::condition_exact;
    use crate::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_hmm<R: Rng>(n: usize, dim: usize, split: usize, rng: &mut R) -> Hmm {
        let mut pi = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        pi /= pi.sum();
        let mut trans = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.05..1.0));
        for mut r in trans.row_iter_mut() {
            let s = r.sum();
            r /= s;
        }
        let comps = (0..n)
            .map(|_| {
                let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                Gaussian {
                    mean: DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)),
                    cov: &a * a.transpose() + DMatrix::identity(dim, dim) * 0.3,
                }
            })
            .collect();
        Hmm::new(pi, trans, comps, split).unwrap()
    }

    fn enumerate_alpha(hmm: &Hmm, obs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = hmm.n_states();
        let lik = |i: usize, x: &DVector<f64>| hmm.components[i].log_pdf(x).unwrap().exp();
        (1..=obs.len())
            .map(|len| {
                let mut acc: DVector<f64> = DVector::zeros(n);
                let total = n.pow(len as u32);
                for code in 0..total {
                    let mut path = Vec::with_capacity(len);
                    let mut c = code;
                    for _ in 0..len {
                        path.push(c % n);
                        c /= n;
                    }
                    let mut p: f64 = hmm.pi[path[0]] * lik(path[0], &obs[0]);
                    for t in 1..len {
                        p *= hmm.trans[(path[t - 1], path[t])] * lik(path[t], &obs[t]);
                    }
                    acc[path[len - 1]] += p;
                }
                let s = acc.sum();
                acc / s
            })
            .collect()
    }

    #[test]
    fn symmetric_start() {
        let hmm = Hmm::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_element(2, 2, 0.5),
            vec![Gaussian::standard(2); 2],
            1,
        )
        .unwrap();
        let a = forward(&hmm, &[DVector::from_vec(vec![0.3, -0.1])], Block::Full).unwrap();
        assert_abs_diff_eq!(a.row(0), DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-15);
    }

    #[test]
    fn forward_matches_path_enumeration() {
        let mut rng = rng_from_seed(21);
        let hmm = random_hmm(2, 2, 1, &mut rng);
        let obs: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0))).collect();
        let got = forward(&hmm, &obs, Block::Full).unwrap();
        for (t, e) in enumerate_alpha(&hmm, &obs).iter().enumerate() {
            assert_abs_diff_eq!(got.row(t), *e, epsilon = 1e-10);
            assert_abs_diff_eq!(got.row(t).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_marginal_blocks_use_marginals() {
        let mut rng = rng_from_seed(22);
        let hmm = random_hmm(3, 4, 2, &mut rng);
        let obs: Vec<DVector<f64>> = (0..4).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0))).collect();
        let a = forward(&hmm, &obs, Block::Human).unwrap();
        let marg = Hmm::new(
            hmm.pi.clone(),
            hmm.trans.clone(),
            (0..3).map(|i| hmm.marginal(i, Block::Human)).collect(),
            1,
        )
        .unwrap();
        let b = forward(&marg, &obs, Block::Full).unwrap();
        assert_abs_diff_eq!(a.values, b.values, epsilon = 1e-14);
        assert!(forward(&hmm, &obs, Block::Full).is_err());
    }

    #[test]
    fn forward_reports_collapse_timestep() {
        let hmm = Hmm::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::identity(2, 2),
            vec![Gaussian::standard(1), Gaussian::standard(1)],
            0,
        )
        .unwrap();
        let obs = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1e200)];
        let err = forward(&hmm, &obs, Block::Full).unwrap_err();
        assert!(err.to_string().contains("timestep 1"), "{err}");
    }

    #[test]
    fn unobserved_forward_contracts() {
        let mut rng = rng_from_seed(23);
        let hmm = random_hmm(4, 2, 1, &mut rng);
        let a = forward_unobserved(&hmm, 5).unwrap();
        assert_abs_diff_eq!(a.row(0), hmm.pi, epsilon = 1e-15);
        let direct = hmm.trans.transpose() * &hmm.pi;
        assert_abs_diff_eq!(a.row(1), direct, epsilon = 1e-14);

        let mut frozen = hmm.clone();
        frozen.trans = DMatrix::identity(4, 4);
        let a = forward_unobserved(&frozen, 10).unwrap();
        for t in 0..10 {
            assert_abs_diff_eq!(a.row(t), hmm.pi, epsilon = 1e-14);
        }
        assert!(forward_unobserved(&hmm, 0).is_err());
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(most_likely(&DVector::from_vec(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(most_likely(&DVector::from_vec(vec![0.5, 0.5])), 0);
        let v = DVector::from_vec(vec![0.2, 0.3, 0.3, 0.2]);
        assert_eq!(most_likely(&v), most_likely(&(v.clone() * 17.0)));
    }

    fn ramp_sequences(count: usize, len: usize) -> Vec<Vec<DVector<f64>>> {
        (0..count)
            .map(|k| {
                (0..len)
                    .map(|t| DVector::from_vec(vec![t as f64 + 0.01 * k as f64, -(t as f64)]))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn segment_initialisation() {
        let seqs = ramp_sequences(3, 60);
        let hmm = init_segments(&seqs, 6, 1).unwrap();
        // first state covers steps 0..=9 of every sequence
        let expected = (0..3).map(|k| (0..10).map(|t| t as f64 + 0.01 * k as f64).sum::<f64>()).sum::<f64>() / 30.0;
        assert_abs_diff_eq!(hmm.components[0].mean[0], expected, epsilon = 1e-12);
        for i in 1..6 {
            assert!(hmm.components[i].mean[0] > hmm.components[i - 1].mean[0]);
        }
        assert_eq!(hmm.pi[0], 1.0);
        assert_eq!(hmm.trans[(0, 0)], 0.9);
        assert_eq!(hmm.trans[(5, 5)], 1.0);

        let single = init_segments(&seqs, 1, 1).unwrap();
        let all: Vec<&DVector<f64>> = seqs.iter().flatten().collect();
        let mean = all.iter().fold(DVector::zeros(2), |a, p| a + *p) / all.len() as f64;
        assert_abs_diff_eq!(single.components[0].mean, mean, epsilon = 1e-12);

        assert!(init_segments(&ramp_sequences(1, 4), 6, 1).is_err());
    }

    #[test]
    fn em_single_state_is_pooled_mle() {
        let mut rng = rng_from_seed(31);
        let seqs: Vec<Vec<DVector<f64>>> = (0..5)
            .map(|_| (0..20).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..3.0))).collect())
            .collect();
        let init = Hmm::standard(1, 2, 1).unwrap();
        let fit = em_fit(&init, &seqs, 10, 1e-10).unwrap();
        let all: Vec<&DVector<f64>> = seqs.iter().flatten().collect();
        let mean = all.iter().fold(DVector::zeros(2), |a, p| a + *p) / all.len() as f64;
        assert_abs_diff_eq!(fit.hmm.components[0].mean, mean, epsilon = 1e-9);
    }

    #[test]
    fn em_monotone_on_random_data() {
        let mut rng = rng_from_seed(32);
        for _ in 0..5 {
            let truth = random_hmm(3, 2, 1, &mut rng);
            let seqs: Vec<Vec<DVector<f64>>> = (0..10)
                .map(|_| (0..30).map(|_| DVector::from_fn(2, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng))).collect())
                .collect();
            let fit = em_fit(&truth, &seqs, 30, 0.0).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-6, "trace decreased {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_reinitialises_starved_component() {
        let seqs = ramp_sequences(2, 20);
        let mut init = init_segments(&seqs, 2, 1).unwrap();
        init.components[1].mean = DVector::from_vec(vec![1e4, 1e4]);
        init.pi = DVector::from_vec(vec![1.0, 0.0]);
        init.trans = DMatrix::identity(2, 2);
        let fit = em_fit(&init, &seqs, 1, 0.0).unwrap();
        assert!(fit.hmm.components[1].mean[0] < 100.0);
    }

    #[test]
    fn gmr_single_component_is_exact_conditioning() {
        let mut rng = rng_from_seed(41);
        for _ in 0..20 {
            let hmm = random_hmm(1, 4, 2, &mut rng);
            let z = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let post = Gaussian::diagonal(z.clone(), &DVector::from_element(2, 0.3));
            let got = gmr_condition(&hmm, &post, &DVector::from_element(1, 1.0), CondMode::Point).unwrap();
            let exact = condition_exact(&hmm.blocked(0).unwrap(), &z).unwrap();
            assert_abs_diff_eq!(got.mean, exact.mean, epsilon = 1e-9);
            assert_abs_diff_eq!(got.cov, exact.cov, epsilon = 1e-9);
        }
    }

    #[test]
    fn gmr_concentrated_weight() {
        let mut rng = rng_from_seed(42);
        let hmm = random_hmm(3, 4, 2, &mut rng);
        let z = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let post = Gaussian::diagonal(z.clone(), &DVector::from_element(2, 0.2));
        let alpha = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let got = gmr_condition(&hmm, &post, &alpha, CondMode::Point).unwrap();
        let exact = condition_exact(&hmm.blocked(1).unwrap(), &z).unwrap();
        assert_abs_diff_eq!(got.mean, exact.mean, epsilon = 1e-9);
        assert_abs_diff_eq!(got.cov, exact.cov, epsilon = 1e-9);
    }

    #[test]
    fn gmr_with_cov_continuity_and_mixture_mean() {
        let mut rng = rng_from_seed(43);
        let hmm = random_hmm(4, 6, 3, &mut rng);
        let z = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let mut alpha = DVector::from_fn(4, |_, _| rng.random_range(0.1..1.0));
        alpha /= alpha.sum();
        let tiny = Gaussian::diagonal(z.clone(), &DVector::from_element(3, 1e-8));
        let a = gmr_condition(&hmm, &tiny, &alpha, CondMode::Point).unwrap();
        let b = gmr_condition(&hmm, &tiny, &alpha, CondMode::WithCov).unwrap();
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-6);
        assert_abs_diff_eq!(a.cov, b.cov, epsilon = 1e-6);

        // mixture mean equals Σ α_i (exact per-component conditional mean)
        let mut mix = DVector::zeros(3);
        for i in 0..4 {
            mix += condition_exact(&hmm.blocked(i).unwrap(), &z).unwrap().mean * alpha[i];
        }
        assert_abs_diff_eq!(a.mean, mix, epsilon = 1e-12);
        // affine form agrees too
        let conds = hmm.conditioners(None).unwrap();
        assert_abs_diff_eq!(gmr_affine_mean(&conds, &alpha).apply(&z), a.mean, epsilon = 1e-12);
        assert!(Cholesky::new(b.cov).is_some());
    }

    fn gate_hmm() -> Hmm {
        let comp = |h: f64, r: f64| Gaussian {
            mean: DVector::from_vec(vec![h, r]),
            cov: DMatrix::identity(2, 2) * 0.1,
        };
        Hmm::new(
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 1.0]),
            vec![comp(0.0, 0.0), comp(2.0, 2.0), comp(4.0, 0.0)],
            1,
        )
        .unwrap()
    }

    #[test]
    fn gate_decisions_and_latch() {
        let hmm = gate_hmm();
        let mut tsm = TransitionStateModel::new(vec![1], vec![0]).unwrap();
        tsm.gate = Some(Gaussian::new(DVector::from_element(1, 1.0), DMatrix::identity(1, 1) * 0.01).unwrap());
        let reach = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let contact = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let far = DVector::from_element(1, 0.0);

        let mut st = GateState::default();
        let d = contact_gate(&hmm, &reach, &tsm, &far, &mut st).unwrap();
        assert_eq!((d.in_contact, d.stiffness_low), (false, false));
        let d = contact_gate(&hmm, &contact, &tsm, &far, &mut st).unwrap();
        assert_eq!((d.in_contact, d.stiffness_low), (true, true));
        let d = contact_gate(&hmm, &reach, &tsm, &far, &mut st).unwrap();
        assert_eq!((d.in_contact, d.stiffness_low), (true, true));

        // transition-state density alone can fire the gate
        let mut st = GateState::default();
        let d = contact_gate(&hmm, &reach, &tsm, &DVector::from_element(1, 1.0), &mut st).unwrap();
        assert!(d.in_contact);

        let empty = TransitionStateModel::new(vec![], vec![0]).unwrap();
        let mut st = GateState::default();
        assert!(!contact_gate(&hmm, &contact, &empty, &far, &mut st).unwrap().in_contact);
        assert!(TransitionStateModel::new(vec![1], vec![1]).is_err());
    }

    #[test]
    fn gate_fit_on_single_flip() {
        let hmm = gate_hmm();
        // human coordinate sits at the reach mean while the robot coordinate
        // is squarely in the contact state for exactly one step.
        let mut seq: Vec<DVector<f64>> = vec![DVector::from_vec(vec![0.0, 0.0]); 4];
        seq.push(DVector::from_vec(vec![0.6, 2.0]));
        seq.extend(vec![DVector::from_vec(vec![2.0, 2.0]); 4]);
        let g = fit_gate(&hmm, &[seq], &[1], &[0]).unwrap().unwrap();
        assert_abs_diff_eq!(g.mean[0], 0.6, epsilon = 1e-12);
        assert!(Cholesky::new(g.cov.clone()).is_some());

        let clean = vec![vec![DVector::from_vec(vec![0.0, 0.0]); 4]];
        assert!(fit_gate(&hmm, &clean, &[1], &[0]).unwrap().is_none());
    }

    #[test]
    fn json_roundtrip_keeps_split() {
        let mut rng = rng_from_seed(50);
        let hmm = random_hmm(2, 4, 2, &mut rng);
        let s = serde_json::to_string(&hmm).unwrap();
        assert!(s.contains("\"pi\"") && s.contains("\"trans\"") && s.contains("\"components\""));
        let back: Hmm = serde_json::from_str(&s).unwrap();
        assert_eq!(back, hmm);
    }
}
