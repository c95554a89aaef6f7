//! Dense Gaussian algebra.
//!
//! Everything downstream (HMM emissions, VAE posteriors, GMR conditionals)
//! trades in [`Gaussian`] values: a mean vector and a full covariance
//! matrix. Densities are evaluated in log space through a Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal with dense covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GaussianRepr", try_from = "GaussianRepr")]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov: matrix_to_rows(&g.cov),
        }
    }
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let cov = rows_to_matrix(&r.cov)?;
        Gaussian::new(DVector::from_vec(r.mean), cov)
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "gaussian covariance",
                expected: d,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        Ok(Gaussian { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        Gaussian {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    /// Diagonal Gaussian from a mean and per-dimension variances.
    pub fn diagonal(mean: DVector<f64>, var: &DVector<f64>) -> Self {
        let cov = DMatrix::from_diagonal(var);
        Gaussian { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.cov.clone()).ok_or_else(|| Error::not_pd("cholesky failed"))
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("log_pdf input", self.dim(), x.len())?;
        Ok(CachedDensity::new(self)?.log_pdf(x))
    }

    /// Draw `count` samples as `mean + L·eps`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let l = self.cholesky()?.l();
        let d = self.dim();
        Ok((0..count)
            .map(|_| {
                let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.mean + &l * eps
            })
            .collect())
    }

    /// Marginal over the index range `start..start + len`.
    pub fn marginal(&self, start: usize, len: usize) -> Gaussian {
        Gaussian {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// A Gaussian with its Cholesky factor and log-determinant precomputed,
/// for repeated density evaluations.
#[derive(Clone, Debug)]
pub struct CachedDensity {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

impl CachedDensity {
    pub fn new(g: &Gaussian) -> Result<Self> {
        let l = g.cholesky()?.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (log_det + g.dim() as f64 * LN_2PI);
        Ok(CachedDensity {
            mean: g.mean.clone(),
            l,
            log_norm,
        })
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.log_pdf_slice(x.as_slice())
    }

    /// Log-density without allocating: forward substitution on `L y = x - mu`.
    pub fn log_pdf_slice(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut y = [0.0f64; 32];
        let mut heap;
        let y: &mut [f64] = if d <= 32 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.l[(i, j)] * y[j];
            }
            let v = s / self.l[(i, i)];
            y[i] = v;
            maha += v * v;
        }
        self.log_norm - 0.5 * maha
    }
}

/// KL(q || p) in closed form.
pub fn kl_divergence(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    check_dim("kl_divergence", p.dim(), q.dim())?;
    let d = q.dim();
    let lp = p.cholesky()?;
    let lq = q.cholesky()?;
    let log_det_p: f64 = 2.0 * lp.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_q: f64 = 2.0 * lq.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = lp.solve(&q.cov).trace();
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&lp.solve(&diff));
    Ok(0.5 * (trace + maha - d as f64 + log_det_p - log_det_q))
}

/// A Gaussian whose dimensions are split into a leading `h` block and a
/// trailing `r` block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockedGaussian {
    pub base: Gaussian,
    pub split: usize,
}

impl BlockedGaussian {
    pub fn new(base: Gaussian, split: usize) -> Result<Self> {
        if split == 0 || split >= base.dim() {
            return Err(Error::InvalidArgument(format!(
                "block split {split} outside 1..{}",
                base.dim()
            )));
        }
        Ok(BlockedGaussian { base, split })
    }

    pub fn dim_h(&self) -> usize {
        self.split
    }

    pub fn dim_r(&self) -> usize {
        self.base.dim() - self.split
    }

    pub fn mean_h(&self) -> DVector<f64> {
        self.base.mean.rows(0, self.split).into_owned()
    }

    pub fn mean_r(&self) -> DVector<f64> {
        self.base.mean.rows(self.split, self.dim_r()).into_owned()
    }

    pub fn cov_hh(&self) -> DMatrix<f64> {
        self.base.cov.view((0, 0), (self.split, self.split)).into_owned()
    }

    pub fn cov_hr(&self) -> DMatrix<f64> {
        self.base.cov.view((0, self.split), (self.split, self.dim_r())).into_owned()
    }

    pub fn cov_rh(&self) -> DMatrix<f64> {
        self.base.cov.view((self.split, 0), (self.dim_r(), self.split)).into_owned()
    }

    pub fn cov_rr(&self) -> DMatrix<f64> {
        let r = self.dim_r();
        self.base.cov.view((self.split, self.split), (r, r)).into_owned()
    }

    pub fn marginal_h(&self) -> Gaussian {
        self.base.marginal(0, self.split)
    }

    pub fn marginal_r(&self) -> Gaussian {
        self.base.marginal(self.split, self.dim_r())
    }
}

/// Exact Gaussian conditioning of the `r` block on an observed `h` block.
pub fn condition_exact(j: &BlockedGaussian, z_h: &DVector<f64>) -> Result<Gaussian> {
    check_dim("condition_exact observation", j.dim_h(), z_h.len())?;
    let chol = Cholesky::new(j.cov_hh()).ok_or_else(|| Error::not_pd("singular h-block"))?;
    let cov_hr = j.cov_hr();
    let gain_t = chol.solve(&cov_hr); // (Σhh)^-1 Σhr = Kᵀ
    let innov = z_h - j.mean_h();
    let mean = j.mean_r() + gain_t.transpose() * innov;
    let cov = j.cov_rr() - gain_t.transpose() * cov_hr;
    Ok(Gaussian {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Diagonal-loading schedule used to repair covariance matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RegSchedule {
    /// Add a constant to every diagonal entry.
    Flat { value: f64 },
    /// Add increments linearly spaced from `first` to `last` along the diagonal.
    Linear { first: f64, last: f64 },
    /// Repeatedly add `c·|λ_min|` (growing quadratically with the attempt
    /// count) until a Cholesky factorisation succeeds.
    Eigen { c: f64, max_iters: usize },
}

impl RegSchedule {
    pub const fn flat() -> Self {
        RegSchedule::Flat { value: 1e-4 }
    }

    pub const fn linear() -> Self {
        RegSchedule::Linear {
            first: 9.1e-5,
            last: 1e-4,
        }
    }

    pub const fn eigen() -> Self {
        RegSchedule::Eigen {
            c: 1e-2,
            max_iters: 50,
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    Cholesky::new(m.clone()).is_some()
}

/// Symmetrise `m` and load its diagonal according to `schedule`.
pub fn regularize_spd(m: &DMatrix<f64>, schedule: RegSchedule) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("regularize_spd needs a square matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entries in covariance".into()));
    }
    let d = m.nrows();
    let mut out = symmetrize(m);
    match schedule {
        RegSchedule::Flat { value } => {
            for i in 0..d {
                out[(i, i)] += value;
            }
        }
        RegSchedule::Linear { first, last } => {
            for i in 0..d {
                let frac = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
                out[(i, i)] += first + (last - first) * frac;
            }
        }
        RegSchedule::Eigen { c, max_iters } => {
            let spacing = f64::EPSILON * out.norm().max(1.0);
            for k in 1..=max_iters {
                let lambda_min = SymmetricEigen::new(out.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                if lambda_min > 0.0 && is_spd(&out) {
                    return Ok(out);
                }
                let shift = (c * lambda_min.abs() + spacing) * (k * k) as f64;
                for i in 0..d {
                    out[(i, i)] += shift;
                }
            }
            if !is_spd(&out) {
                return Err(Error::not_pd(format!("eigen repair exhausted {max_iters} iterations")));
            }
        }
    }
    Ok(out)
}
