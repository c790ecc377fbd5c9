//! Collapsed variational lower bound of the sparse GP and its gradient.
//!
//! With `Kmm = Lk Lk^T`, `V = Lk^-1 Kmn`, `H = V V^T` and `B = I + H / s2`:
//!
//! ```text
//! F = -N/2 log 2pi - 1/2 (N log s2 + log|B|) - 1/2 y^T C^-1 y - (N sf2 - tr H) / (2 s2)
//! C = s2 I + V^T V
//! ```
//!
//! Everything is O(N M^2) time and O(N M) memory.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{InducingSet, TrainingSet};
use crate::error::{Error, Result};
use crate::geometry::Direction;
use crate::kernel::{RqHyperparams, RqKernel, PARAM_COUNT};
use crate::linalg;

/// Largest training set accepted by [`exact_log_marginal`].
pub const EXACT_MAX_POINTS: usize = 4096;

/// Exact GP log marginal likelihood `log N(y | 0, Knn + s2 I)`.
pub fn exact_log_marginal(data: &TrainingSet, hp: &RqHyperparams) -> Result<f64> {
    exact_log_marginal_with(data, &RqKernel::new(*hp))
}

pub(crate) fn exact_log_marginal_with(data: &TrainingSet, kernel: &RqKernel) -> Result<f64> {
    let n = data.len();
    if n > EXACT_MAX_POINTS {
        return Err(Error::InvalidInput(format!(
            "exact marginal limited to {EXACT_MAX_POINTS} points, got {n}"
        )));
    }
    let hp = kernel.hp;
    let mut c = kernel.gram(data.inputs());
    for i in 0..n {
        c[(i, i)] += hp.noise_variance;
    }
    let (l, _) = linalg::noisy_cholesky(&c, hp.signal_variance)?;
    let y = DVector::from_column_slice(data.targets());
    let alpha = linalg::solve_lower(&l, &y);
    Ok(-0.5 * n as f64 * (2.0 * PI).ln()
        - 0.5 * linalg::log_det_from_factor(&l)
        - 0.5 * alpha.norm_squared())
}

/// Variational lower bound for the given inducing set.
pub fn variational_bound(data: &TrainingSet, inducing: &InducingSet, hp: &RqHyperparams) -> Result<f64> {
    Ok(Factors::new(data, inducing.locations(), &RqKernel::new(*hp))?.value())
}

/// Gradient of [`variational_bound`] with respect to the log hyperparameters.
pub fn bound_grad_hyperparams(
    data: &TrainingSet,
    inducing: &InducingSet,
    hp: &RqHyperparams,
) -> Result<[f64; PARAM_COUNT]> {
    let f = Factors::new(data, inducing.locations(), &RqKernel::new(*hp))?;
    Ok(f.gradient(data, inducing.locations()))
}

/// Bound and gradient in one pass.
pub(crate) fn bound_and_grad(
    data: &TrainingSet,
    locs: &[Direction],
    kernel: &RqKernel,
) -> Result<(f64, [f64; PARAM_COUNT])> {
    let f = Factors::new(data, locs, kernel)?;
    Ok((f.value(), f.gradient(data, locs)))
}

pub(crate) fn bound_with(data: &TrainingSet, locs: &[Direction], kernel: &RqKernel) -> Result<f64> {
    Ok(Factors::new(data, locs, kernel)?.value())
}

/// Factorized state of the bound for one inducing set.
pub(crate) struct Factors {
    pub kernel: RqKernel,
    pub jitter: f64,
    pub lk: DMatrix<f64>,
    pub linv: DMatrix<f64>,
    /// `V^T`, N x M.
    pub vt: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub binv: DMatrix<f64>,
    pub logdet_b: f64,
    pub vy: DVector<f64>,
    pub y: DVector<f64>,
    pub n: usize,
}

impl Factors {
    pub fn new(data: &TrainingSet, locs: &[Direction], kernel: &RqKernel) -> Result<Self> {
        if locs.is_empty() {
            return Err(Error::InvalidInput("inducing set is empty".into()));
        }
        let hp = kernel.hp;
        let s2 = hp.noise_variance;
        let kmm = kernel.gram(locs);
        let (lk, jitter) = linalg::jittered_cholesky(&kmm, hp.signal_variance)?;
        Self::from_factor(data, locs, kernel, lk, jitter, s2)
    }

    /// Builds the state on a Cholesky factor computed with a known jitter.
    pub fn from_factor(
        data: &TrainingSet,
        locs: &[Direction],
        kernel: &RqKernel,
        lk: DMatrix<f64>,
        jitter: f64,
        s2: f64,
    ) -> Result<Self> {
        let m = locs.len();
        let linv = linalg::lower_inverse(&lk);
        let knm = kernel.matrix(data.inputs(), locs);
        let vt = knm * linv.transpose();
        let h = vt.transpose() * &vt;
        let mut b = &h / s2;
        for i in 0..m {
            b[(i, i)] += 1.0;
        }
        let lb = b
            .cholesky()
            .ok_or_else(|| Error::Numerical("I + H / s2 is not positive definite".into()))?
            .unpack();
        let logdet_b = linalg::log_det_from_factor(&lb);
        let binv = linalg::inverse_from_factor(&lb);
        let y = DVector::from_column_slice(data.targets());
        let vy = vt.tr_mul(&y);
        Ok(Self {
            kernel: *kernel,
            jitter,
            lk,
            linv,
            vt,
            h,
            binv,
            logdet_b,
            vy,
            y,
            n: data.len(),
        })
    }

    pub fn value(&self) -> f64 {
        assemble(
            self.n,
            &self.kernel.hp,
            self.logdet_b,
            self.quad(),
            self.h.trace(),
        )
    }

    /// `y^T C^-1 y`, as the minimum of the ridge objective `(|y - V^T a|^2 + s2 |a|^2) / s2`.
    /// Both terms are non-negative, so nothing cancels when `B` is ill-conditioned.
    fn quad(&self) -> f64 {
        let s2 = self.kernel.hp.noise_variance;
        let a = &self.binv * &self.vy / s2;
        let r = &self.y - &self.vt * &a;
        (r.norm_squared() + s2 * a.norm_squared()) / s2
    }

    /// `C^-1 y`.
    pub fn residual(&self, y: &[f64]) -> DVector<f64> {
        let s2 = self.kernel.hp.noise_variance;
        let bvy = &self.binv * &self.vy / s2;
        (DVector::from_column_slice(y) - &self.vt * bvy) / s2
    }

    pub fn gradient(&self, data: &TrainingSet, locs: &[Direction]) -> [f64; PARAM_COUNT] {
        let hp = self.kernel.hp;
        let s2 = hp.noise_variance;
        let n = self.n as f64;
        let m = locs.len();
        let t = self.residual(data.targets());
        let bvy = &self.binv * &self.vy;
        let beta = self.linv.tr_mul(&bvy) / s2;

        // W^T = V^T (I - B^-1) Lk^-1 / s2 + t beta^T, paired with dKnm.
        let mut i_minus_binv = -self.binv.clone();
        for i in 0..m {
            i_minus_binv[(i, i)] += 1.0;
        }
        let mut wt = &self.vt * (&i_minus_binv * &self.linv / s2);
        wt.ger(1.0, &t, &beta, 1.0);

        // U = 1/2 Lk^-T (I - B^-1 - H / s2) Lk^-1 - 1/2 beta beta^T, paired with dKmm.
        let inner = i_minus_binv - &self.h / s2;
        let mut u = self.linv.transpose() * (inner * &self.linv) * 0.5;
        u.ger(-0.5, &beta, &beta, 1.0);

        let mut g = [0.0; PARAM_COUNT];
        for (j, zj) in locs.iter().enumerate() {
            let wcol = wt.column(j);
            for (i, xi) in data.inputs().iter().enumerate() {
                let d = self.kernel.terms(xi, zj).log_grad(hp.rq_alpha);
                let w = wcol[i];
                for p in 0..4 {
                    g[p] += w * d[p];
                }
            }
            for (i, zi) in locs.iter().enumerate() {
                let d = self.kernel.terms(zi, zj).log_grad(hp.rq_alpha);
                let w = u[(i, j)];
                for p in 0..4 {
                    g[p] += w * d[p];
                }
            }
        }
        // The jitter scales with the signal variance.
        g[0] += u.trace() * self.jitter;
        g[0] -= n * hp.signal_variance / (2.0 * s2);

        let tr_binv = self.binv.trace();
        g[4] = -0.5 * (n - m as f64 + tr_binv)
            + 0.5 * s2 * t.norm_squared()
            + (n * hp.signal_variance - self.h.trace()) / (2.0 * s2);
        g
    }
}

/// Combines the scalar pieces of the bound.
pub(crate) fn assemble(n: usize, hp: &RqHyperparams, logdet_b: f64, quad: f64, trace_q: f64) -> f64 {
    let n = n as f64;
    let s2 = hp.noise_variance;
    -0.5 * n * (2.0 * PI).ln()
        - 0.5 * (n * s2.ln() + logdet_b)
        - 0.5 * quad
        - (n * hp.signal_variance - trace_q) / (2.0 * s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::JITTER;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, n: usize) -> TrainingSet {
        let inputs = (0..n)
            .map(|_| Direction::new(rng.random_range(-3.0..3.0), rng.random_range(1.3..1.85)))
            .collect();
        let targets = (0..n).map(|_| rng.random_range(0.5..9.0)).collect();
        TrainingSet::new(inputs, targets).unwrap()
    }

    fn random_hp(rng: &mut ChaCha8Rng) -> RqHyperparams {
        RqHyperparams::new(
            rng.random_range(0.5..20.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.03..0.5),
            rng.random_range(0.3..3.0),
            rng.random_range(0.05..2.0),
        )
        .unwrap()
    }

    /// Dense multivariate normal log density, independent of the GP code.
    fn mvn_log_density(cov: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let n = y.len() as f64;
        let chol = cov.clone().cholesky().unwrap();
        let det = cov.determinant();
        let quad = y.dot(&chol.solve(y));
        -0.5 * (n * (2.0 * PI).ln() + det.ln() + quad)
    }

    /// Bound with the N x N matrix Q materialized.
    fn dense_bound(data: &TrainingSet, inducing: &InducingSet, hp: &RqHyperparams) -> f64 {
        let k = RqKernel::new(*hp);
        let knn = k.gram(data.inputs());
        let knm = k.matrix(data.inputs(), inducing.locations());
        let kmm = k.gram(inducing.locations());
        let m = kmm.nrows();
        let kmm_j = kmm + DMatrix::identity(m, m) * (JITTER * hp.signal_variance);
        let q = &knm * kmm_j.clone().cholesky().unwrap().solve(&knm.transpose());
        let n = data.len();
        let cov = &q + DMatrix::identity(n, n) * hp.noise_variance;
        let y = DVector::from_column_slice(data.targets());
        mvn_log_density(&cov, &y) - (knn.trace() - q.trace()) / (2.0 * hp.noise_variance)
    }

    #[test]
    fn single_point_marginal() {
        let data = TrainingSet::new(vec![Direction::new(0.2, 1.5)], vec![3.0]).unwrap();
        let hp = RqHyperparams::new(2.0, 1.0, 1.0, 1.0, 0.5).unwrap();
        let var: f64 = 2.5;
        let expect = -0.5 * (2.0 * PI * var).ln() - 9.0 / (2.0 * var);
        assert!((exact_log_marginal(&data, &hp).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_dense_density_and_is_exchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let data = random_data(&mut rng, 5);
            let hp = random_hp(&mut rng);
            let k = RqKernel::new(hp);
            let cov = k.gram(data.inputs()) + DMatrix::identity(5, 5) * hp.noise_variance;
            let y = DVector::from_column_slice(data.targets());
            let exact = exact_log_marginal(&data, &hp).unwrap();
            assert!((exact - mvn_log_density(&cov, &y)).abs() < 1e-10);

            let mut order: Vec<usize> = (0..5).collect();
            order.reverse();
            order.swap(0, 2);
            let permuted = TrainingSet::new(
                order.iter().map(|&i| data.inputs()[i]).collect(),
                order.iter().map(|&i| data.targets()[i]).collect(),
            )
            .unwrap();
            assert!((exact_log_marginal(&permuted, &hp).unwrap() - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn full_inducing_set_recovers_exact_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let data = random_data(&mut rng, n);
            let hp = random_hp(&mut rng);
            let all = InducingSet::new(&data, (0..n).collect()).unwrap();
            let fv = variational_bound(&data, &all, &hp).unwrap();
            let exact = exact_log_marginal(&data, &hp).unwrap();
            assert!((fv - exact).abs() <= 1e-6, "{fv} vs {exact}");
        }
    }

    #[test]
    fn bound_is_below_marginal_and_matches_dense_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.random_range(2..=32);
            let m = rng.random_range(1..n);
            let data = random_data(&mut rng, n);
            let hp = random_hp(&mut rng);
            let idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            let inducing = InducingSet::new(&data, idx).unwrap();
            let fv = variational_bound(&data, &inducing, &hp).unwrap();
            let exact = exact_log_marginal(&data, &hp).unwrap();
            assert!(fv <= exact + 1e-9, "{fv} > {exact}");
            let dense = dense_bound(&data, &inducing, &hp);
            assert!((fv - dense).abs() <= 1e-7 * (1.0 + dense.abs()), "{fv} vs {dense}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let step = 1e-5;
        let mut checked = 0;
        while checked < 15 {
            let n = rng.random_range(8..=64);
            let m = rng.random_range(1..=16.min(n));
            let data = random_data(&mut rng, n);
            let hp = random_hp(&mut rng);
            let idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            let inducing = InducingSet::new(&data, idx).unwrap();
            // Poorly conditioned K_mm makes finite differences meaningless.
            let kmm = RqKernel::new(hp).gram(inducing.locations());
            let eig = kmm.symmetric_eigenvalues();
            if eig.min() < 1e-4 * eig.max() {
                continue;
            }
            checked += 1;
            let g = bound_grad_hyperparams(&data, &inducing, &hp).unwrap();
            let lp = hp.log_params();
            for p in 0..PARAM_COUNT {
                let (mut up, mut down) = (lp, lp);
                up.0[p] += step;
                down.0[p] -= step;
                let fu = variational_bound(&data, &inducing, &up.to_hyperparams().unwrap()).unwrap();
                let fd = variational_bound(&data, &inducing, &down.to_hyperparams().unwrap()).unwrap();
                let num = (fu - fd) / (2.0 * step);
                let scale = g[p].abs().max(num.abs()).max(1e-3);
                assert!((g[p] - num).abs() <= 1e-4 * scale, "param {p}: {} vs {num}", g[p]);
            }
        }
    }

    #[test]
    fn gradient_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_data(&mut rng, 40);
        let hp = random_hp(&mut rng);
        let inducing = InducingSet::new(&data, (0..40).step_by(4).collect()).unwrap();
        let a = bound_grad_hyperparams(&data, &inducing, &hp).unwrap();
        let b = bound_grad_hyperparams(&data, &inducing, &hp).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn azimuth_shift_leaves_bound_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data = random_data(&mut rng, 30);
        let hp = random_hp(&mut rng);
        let idx: Vec<usize> = (0..30).step_by(3).collect();
        let base = variational_bound(&data, &InducingSet::new(&data, idx.clone()).unwrap(), &hp).unwrap();
        let shifted = TrainingSet::new(
            data.inputs().iter().map(|d| Direction::new(d.azimuth + 0.1, d.inclination)).collect(),
            data.targets().to_vec(),
        )
        .unwrap();
        let moved = variational_bound(&shifted, &InducingSet::new(&shifted, idx).unwrap(), &hp).unwrap();
        assert!((base - moved).abs() <= 1e-8 * (1.0 + base.abs()));
    }
}
