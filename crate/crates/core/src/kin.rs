//! Serial revolute chains: forward kinematics and two position-only IK
//! solvers sharing one Levenberg-Marquardt core.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform stored as translation plus axis-angle rotation vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl Pose {
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose {
            translation: [x, y, z],
            rotation: [0.0; 3],
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(Vector3::from(self.translation)),
            UnitQuaternion::from_scaled_axis(Vector3::from(self.rotation)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    #[serde(default)]
    pub name: String,
    /// Fixed transform from the previous frame to this joint's frame.
    #[serde(default)]
    pub offset: Pose,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    #[serde(default)]
    pub base: Pose,
    pub joints: Vec<Joint>,
    /// Fixed transform from the last joint frame to the end effector.
    #[serde(default)]
    pub tool: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: DVector<f64>,
    /// Distance between the reached and the target position, in metres.
    pub residual: f64,
    /// Final value of the minimised objective.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_ITERS: usize = 200;
const FD_STEP: f64 = 1e-6;
const POSITION_TOL: f64 = 1e-4;
const GRADIENT_TOL: f64 = 1e-6;
/// Largest joint change per iteration, in radians.
const MAX_STEP: f64 = 0.5;
const STALL_WINDOW: usize = 10;

impl KinematicChain {
    pub fn new(base: Pose, joints: Vec<Joint>, tool: Pose) -> Result<Self> {
        let chain = KinematicChain { base, joints, tool };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Config("kinematic chain has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let n = Vector3::from(j.axis).norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("joint {i} axis is not a unit vector (norm {n})")));
            }
            if j.limits[0] >= j.limits[1] {
                return Err(Error::Config(format!("joint {i} has empty limit interval")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let chain: KinematicChain = serde_json::from_str(&text)?;
        chain.validate()?;
        Ok(chain)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Two revolute joints about z with links of length `l1`, `l2` along x.
    /// Limits span two full turns so that no target needs to cross one.
    pub fn planar_two_link(l1: f64, l2: f64) -> Self {
        let tau = std::f64::consts::TAU;
        let joint = |name: &str, x: f64| Joint {
            name: name.into(),
            offset: Pose::translation(x, 0.0, 0.0),
            axis: [0.0, 0.0, 1.0],
            limits: [-tau, tau],
        };
        KinematicChain {
            base: Pose::default(),
            joints: vec![joint("shoulder", 0.0), joint("elbow", l1)],
            tool: Pose::translation(l2, 0.0, 0.0),
        }
    }

    /// Shoulder pitch (y), shoulder roll (z), elbow yaw (about the upper
    /// arm) and elbow roll (z), arm pointing along +x at zero. Limits follow
    /// a small humanoid's right arm.
    pub fn humanoid_arm(upper: f64, fore: f64) -> Self {
        let joint = |name: &str, offset: Pose, axis: [f64; 3], limits: [f64; 2]| Joint {
            name: name.into(),
            offset,
            axis,
            limits,
        };
        KinematicChain {
            base: Pose::default(),
            joints: vec![
                joint("shoulder_pitch", Pose::default(), [0.0, 1.0, 0.0], [-2.0857, 2.0857]),
                joint("shoulder_roll", Pose::default(), [0.0, 0.0, 1.0], [-1.5620, -0.0087]),
                joint("elbow_yaw", Pose::translation(upper, 0.0, 0.0), [1.0, 0.0, 0.0], [-2.0857, 2.0857]),
                joint("elbow_roll", Pose::default(), [0.0, 0.0, 1.0], [0.0087, 1.5620]),
            ],
            tool: Pose::translation(fore, 0.0, 0.0),
        }
    }

    pub fn lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.limits[0]))
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.limits[1]))
    }

    /// Joint vector drawn uniformly inside the limits.
    pub fn random_configuration<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| rng.random_range(j.limits[0]..j.limits[1])))
    }

    pub fn clamp(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            q.len(),
            q.iter().zip(&self.joints).map(|(v, j)| v.clamp(j.limits[0], j.limits[1])),
        )
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                what: "joint vector",
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Full end-effector pose without limit handling.
    pub fn pose_unclamped(&self, q: &DVector<f64>) -> Isometry3<f64> {
        let mut t = self.base.isometry();
        for (j, v) in self.joints.iter().zip(q.iter()) {
            let rot = UnitQuaternion::from_scaled_axis(Vector3::from(j.axis) * *v);
            t = t * j.offset.isometry() * rot;
        }
        t * self.tool.isometry()
    }

    fn position_unclamped(&self, q: &DVector<f64>) -> Vector3<f64> {
        self.pose_unclamped(q).translation.vector
    }

    /// End-effector position; joint values outside their limits are
    /// clamped with a warning.
    pub fn fk(&self, q: &DVector<f64>) -> Result<Vector3<f64>> {
        self.check_q(q)?;
        let qc = self.clamp(q);
        if qc != *q {
            log::warn!("fk: joint values outside limits were clamped");
        }
        Ok(self.position_unclamped(&qc))
    }

    /// Central-difference Jacobian of the position.
    pub fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(3, self.dof());
        let mut qp = q.clone();
        for k in 0..self.dof() {
            let orig = qp[k];
            qp[k] = orig + FD_STEP;
            let up = self.position_unclamped(&qp);
            qp[k] = orig - FD_STEP;
            let down = self.position_unclamped(&qp);
            qp[k] = orig;
            jac.set_column(k, &((up - down) / (2.0 * FD_STEP)));
        }
        jac
    }

    /// Plain position IK: minimise ‖f(q) − x‖² from `q_init`.
    pub fn ik_baseline(&self, target: &Vector3<f64>, q_init: &DVector<f64>) -> Result<IkSolution> {
        self.check_q(q_init)?;
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite IK target".into()));
        }
        let problem = IkProblem {
            chain: self,
            target,
            lambda_x: 1.0,
            prior: None,
        };
        // A projected local solver can stall against a joint limit; spend
        // the remaining iteration budget on deterministic restarts.
        let mut rng = crate::rng_from_seed(0x1c0de);
        let mut best = problem.solve(self.clamp(q_init), Stop::Residual, MAX_ITERS);
        let mut used = best.iterations;
        while !best.converged && used < MAX_ITERS {
            let start = DVector::from_iterator(
                self.dof(),
                self.joints.iter().map(|j| rng.random_range(j.limits[0]..=j.limits[1])),
            );
            let sol = problem.solve(start, Stop::Residual, MAX_ITERS - used);
            used += sol.iterations.max(1);
            if sol.residual < best.residual {
                best = sol;
            }
        }
        best.iterations = used.min(MAX_ITERS);
        Ok(best)
    }

    /// Position IK regularised towards a joint-space prior `mu_q`:
    /// minimise `λx‖x − f(q)‖² + λq‖μq − q‖²`, warm-started at `mu_q`.
    pub fn ik_with_prior(
        &self,
        target: &Vector3<f64>,
        mu_q: &DVector<f64>,
        lambda_x: f64,
        lambda_q: f64,
    ) -> Result<IkSolution> {
        self.check_q(mu_q)?;
        if lambda_x < 0.0 || lambda_q < 0.0 || !lambda_x.is_finite() || !lambda_q.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "IK weights must be non-negative (got λx = {lambda_x}, λq = {lambda_q})"
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite IK target".into()));
        }
        let problem = IkProblem {
            chain: self,
            target,
            lambda_x,
            prior: Some((mu_q, lambda_q)),
        };
        Ok(problem.solve(self.clamp(mu_q), Stop::Gradient, MAX_ITERS))
    }

    /// Objective of [`KinematicChain::ik_with_prior`] at `q`.
    pub fn prior_objective(&self, q: &DVector<f64>, target: &Vector3<f64>, mu_q: &DVector<f64>, lambda_x: f64, lambda_q: f64) -> f64 {
        lambda_x * (target - self.position_unclamped(q)).norm_squared() + lambda_q * (mu_q - q).norm_squared()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stop {
    Residual,
    Gradient,
}

struct IkProblem<'a> {
    chain: &'a KinematicChain,
    target: &'a Vector3<f64>,
    lambda_x: f64,
    prior: Option<(&'a DVector<f64>, f64)>,
}

impl IkProblem<'_> {
    fn residuals(&self, q: &DVector<f64>) -> DVector<f64> {
        let n = q.len();
        let pos = (self.chain.position_unclamped(q) - self.target) * self.lambda_x.sqrt();
        match self.prior {
            None => DVector::from_column_slice(pos.as_slice()),
            Some((mu, lq)) => {
                let mut r = DVector::zeros(3 + n);
                r.rows_mut(0, 3).copy_from(&pos);
                r.rows_mut(3, n).copy_from(&((q - mu) * lq.sqrt()));
                r
            }
        }
    }

    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = q.len();
        let jp = self.chain.jacobian(q) * self.lambda_x.sqrt();
        match self.prior {
            None => jp,
            Some((_, lq)) => {
                let mut j = DMatrix::zeros(3 + n, n);
                j.rows_mut(0, 3).copy_from(&jp);
                j.view_mut((3, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * lq.sqrt()));
                j
            }
        }
    }

    fn solution(&self, q: DVector<f64>, iterations: usize, stop: Stop, grad_norm: f64) -> IkSolution {
        let residual = (self.chain.position_unclamped(&q) - self.target).norm();
        let objective = self.residuals(&q).norm_squared();
        let converged = match stop {
            Stop::Residual => residual < POSITION_TOL,
            Stop::Gradient => grad_norm < GRADIENT_TOL,
        };
        IkSolution {
            q,
            residual,
            objective,
            iterations,
            converged,
        }
    }

    /// Projected Levenberg-Marquardt. Only cost-decreasing steps are
    /// accepted, so the objective never increases.
    fn solve(&self, mut q: DVector<f64>, stop: Stop, max_iters: usize) -> IkSolution {
        let n = q.len();
        let mut damping = 1e-3;
        let mut r = self.residuals(&q);
        let mut cost = r.norm_squared();
        let mut history = Vec::with_capacity(max_iters);
        for it in 0..max_iters {
            // slow crawl along a limit face: give up and let the caller restart
            history.push(cost);
            if stop == Stop::Residual && it >= STALL_WINDOW && history[it - STALL_WINDOW] - cost < 1e-6 * cost {
                let jac = self.jacobian(&q);
                let grad_norm = 2.0 * jac.tr_mul(&r).norm();
                return self.solution(q, it, stop, grad_norm);
            }
            let jac = self.jacobian(&q);
            let g = jac.tr_mul(&r);
            let grad_norm = 2.0 * g.norm();
            let done = match stop {
                Stop::Residual => (self.chain.position_unclamped(&q) - self.target).norm() < POSITION_TOL,
                Stop::Gradient => grad_norm < GRADIENT_TOL,
            };
            if done || cost == 0.0 {
                return self.solution(q, it, stop, grad_norm);
            }
            // joints pinned at a limit with the descent direction pointing
            // outward are frozen for this step
            let (lo, hi) = (self.chain.lower(), self.chain.upper());
            let pinned: Vec<bool> = (0..n)
                .map(|k| (q[k] <= lo[k] && g[k] > 0.0) || (q[k] >= hi[k] && g[k] < 0.0))
                .collect();
            let mut jtj = jac.tr_mul(&jac);
            let mut g = g;
            for k in (0..n).filter(|k| pinned[*k]) {
                jtj.row_mut(k).fill(0.0);
                jtj.column_mut(k).fill(0.0);
                g[k] = 0.0;
            }
            let mut accepted = false;
            while damping < 1e12 {
                let mut a = jtj.clone();
                for k in 0..n {
                    a[(k, k)] += damping * (1.0 + jtj[(k, k)]);
                }
                let step = match a.cholesky() {
                    Some(c) => c.solve(&(-&g)),
                    None => {
                        damping *= 10.0;
                        continue;
                    }
                };
                let longest = step.amax();
                let step = if longest > MAX_STEP { step * (MAX_STEP / longest) } else { step };
                let candidate = self.chain.clamp(&(&q + step));
                let rc = self.residuals(&candidate);
                let cc = rc.norm_squared();
                if cc < cost {
                    let stalled = cost - cc <= 1e-12 * cost;
                    q = candidate;
                    r = rc;
                    cost = cc;
                    damping = (damping / 10.0).max(1e-12);
                    accepted = !stalled;
                    break;
                }
                damping *= 10.0;
            }
            if !accepted {
                return self.solution(q, it + 1, stop, grad_norm);
            }
        }
        let jac = self.jacobian(&q);
        let grad_norm = 2.0 * jac.tr_mul(&r).norm();
        self.solution(q, max_iters, stop, grad_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;

    fn random_q<R: Rng>(chain: &KinematicChain, rng: &mut R) -> DVector<f64> {
        chain.random_configuration(rng)
    }

    fn homogeneous(p: &Pose) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rodrigues(&Vector3::from(p.rotation)));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(p.translation));
        m
    }

    fn rodrigues(w: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
        let theta = w.norm();
        if theta == 0.0 {
            return nalgebra::Matrix3::identity();
        }
        let k = w / theta;
        let kx = nalgebra::Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        nalgebra::Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
    }

    fn matrix_fk(chain: &KinematicChain, q: &DVector<f64>) -> Vector3<f64> {
        let mut t = homogeneous(&chain.base);
        for (j, v) in chain.joints.iter().zip(q.iter()) {
            let rot = Pose {
                translation: [0.0; 3],
                rotation: (Vector3::from(j.axis) * *v).into(),
            };
            t = t * homogeneous(&j.offset) * homogeneous(&rot);
        }
        t = t * homogeneous(&chain.tool);
        Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
    }

    #[test]
    fn planar_closed_forms() {
        let c = KinematicChain::planar_two_link(1.0, 1.0);
        assert_abs_diff_eq!(c.fk(&DVector::zeros(2)).unwrap(), Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        let q = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 0.0]);
        assert_abs_diff_eq!(c.fk(&q).unwrap(), Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fk_matches_homogeneous_products() {
        let mut rng = rng_from_seed(1);
        let arm = KinematicChain::humanoid_arm(0.181, 0.15);
        for _ in 0..50 {
            let q = random_q(&arm, &mut rng);
            assert_abs_diff_eq!(arm.fk(&q).unwrap(), matrix_fk(&arm, &q), epsilon = 1e-12);
        }
        // random chains with rotated offsets and base/tool transforms
        for _ in 0..20 {
            let rand3 = |rng: &mut crate::Rng, s: f64| [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)];
            let joints = (0..5)
                .map(|_| {
                    let a = Vector3::from(rand3(&mut rng, 1.0)).normalize();
                    Joint {
                        name: String::new(),
                        offset: Pose {
                            translation: rand3(&mut rng, 0.5),
                            rotation: rand3(&mut rng, 1.5),
                        },
                        axis: a.into(),
                        limits: [-3.0, 3.0],
                    }
                })
                .collect();
            let chain = KinematicChain::new(
                Pose {
                    translation: rand3(&mut rng, 1.0),
                    rotation: rand3(&mut rng, 1.0),
                },
                joints,
                Pose::translation(0.2, 0.1, 0.0),
            )
            .unwrap();
            let q = random_q(&chain, &mut rng);
            assert_abs_diff_eq!(chain.fk(&q).unwrap(), matrix_fk(&chain, &q), epsilon = 1e-12);
        }
    }

    #[test]
    fn arm_direction_formula() {
        let arm = KinematicChain::humanoid_arm(1.0, 1e-9);
        let (p, r) = (0.4f64, -0.7f64);
        let q = DVector::from_vec(vec![p, r, 0.3, 0.0087]);
        let u = Vector3::new(p.cos() * r.cos(), r.sin(), -p.sin() * r.cos());
        assert_abs_diff_eq!(arm.fk(&q).unwrap(), u, epsilon = 1e-8);
    }

    #[test]
    fn fk_clamps_out_of_range() {
        let arm = KinematicChain::humanoid_arm(0.181, 0.15);
        let q = DVector::from_vec(vec![5.0, 0.0, 0.0, 0.0]);
        let clamped = DVector::from_vec(vec![2.0857, -0.0087, 0.0, 0.0087]);
        assert_eq!(arm.fk(&q).unwrap(), arm.fk(&clamped).unwrap());
    }

    #[test]
    fn validation_rejects_bad_chains() {
        let mut c = KinematicChain::planar_two_link(1.0, 1.0);
        c.joints[0].axis = [0.0, 0.0, 2.0];
        assert!(c.validate().is_err());
        let mut c = KinematicChain::planar_two_link(1.0, 1.0);
        c.joints[1].limits = [1.0, 1.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn baseline_already_solved() {
        let arm = KinematicChain::humanoid_arm(0.181, 0.15);
        let q = DVector::from_vec(vec![0.3, -0.5, 0.2, 0.7]);
        let sol = arm.ik_baseline(&arm.fk(&q).unwrap(), &q).unwrap();
        assert_eq!(sol.q, q);
        assert!(sol.residual < 1e-10);
        assert!(sol.iterations <= 1);
    }

    #[test]
    fn baseline_reachable_and_unreachable() {
        let mut rng = rng_from_seed(3);
        let c = KinematicChain::planar_two_link(1.0, 1.0);
        for _ in 0..50 {
            let target = c.fk(&random_q(&c, &mut rng)).unwrap();
            let sol = c.ik_baseline(&target, &random_q(&c, &mut rng)).unwrap();
            assert!(sol.converged, "residual {}", sol.residual);
            assert!((c.fk(&sol.q).unwrap() - target).norm() < 1e-4);
        }
        let far = Vector3::new(3.0, 1.0, 0.0);
        let sol = c.ik_baseline(&far, &DVector::from_vec(vec![0.1, 0.2])).unwrap();
        assert!(!sol.converged);
        assert_abs_diff_eq!(sol.residual, far.norm() - 2.0, epsilon = 1e-3);
    }

    #[test]
    fn baseline_on_humanoid_arm() {
        let mut rng = rng_from_seed(4);
        let arm = KinematicChain::humanoid_arm(0.181, 0.15);
        let mid = (arm.lower() + arm.upper()) * 0.5;
        for _ in 0..100 {
            let target = arm.fk(&random_q(&arm, &mut rng)).unwrap();
            let sol = arm.ik_baseline(&target, &mid).unwrap();
            assert!(sol.residual < 1e-4, "residual {}", sol.residual);
            assert!(sol.q.iter().zip(&arm.joints).all(|(v, j)| *v >= j.limits[0] && *v <= j.limits[1]));
        }
    }

    #[test]
    fn prior_ik_consistent_prior_is_fixed_point() {
        let arm = KinematicChain::humanoid_arm(0.181, 0.15);
        let mu = DVector::from_vec(vec![0.3, -0.5, 0.2, 0.7]);
        let sol = arm.ik_with_prior(&arm.fk(&mu).unwrap(), &mu, 1.0, 0.01).unwrap();
        assert_eq!(sol.q, mu);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn prior_ik_heavy_prior_stays_put() {
        let c = KinematicChain::planar_two_link(1.0, 1.0);
        let mu = DVector::from_vec(vec![0.4, 0.9]);
        let sol = c.ik_with_prior(&Vector3::new(0.5, 1.2, 0.0), &mu, 1.0, 1e9).unwrap();
        assert!((&sol.q - &mu).amax() < 1e-4);
        assert!(c.ik_with_prior(&Vector3::zeros(), &mu, -1.0, 0.01).is_err());
    }

    #[test]
    fn prior_ik_without_prior_matches_baseline() {
        let mut rng = rng_from_seed(5);
        let c = KinematicChain::planar_two_link(1.0, 1.0);
        let pi = std::f64::consts::PI;
        for _ in 0..20 {
            // priors well inside the limits so neither solver meets a bound
            let mu = DVector::from_fn(2, |_, _| rng.random_range(-pi..pi));
            let target = c.fk(&random_q(&c, &mut rng)).unwrap() * 0.9;
            let a = c.ik_with_prior(&target, &mu, 1.0, 0.0).unwrap();
            let b = c.ik_baseline(&target, &mu).unwrap();
            assert!((a.residual - b.residual).abs() < 1e-4, "{} vs {}", a.residual, b.residual);
        }
    }
}
