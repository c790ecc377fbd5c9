//! Rational-quadratic covariance over (azimuth, inclination) with one
//! length-scale per axis.
//!
//! ```text
//! k(a, b) = sf2 * (1 + dt^2 / (2 alpha lt^2) + di^2 / (2 alpha li^2))^(-alpha)
//! ```
//!
//! Gradients are taken with respect to the natural logs of the parameters,
//! which is the coordinate system the hyperparameter optimizer works in.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::geometry::Direction;

/// Number of hyperparameters, noise included.
pub const PARAM_COUNT: usize = 5;

/// Kernel and likelihood parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqHyperparams {
    pub signal_variance: f64,
    pub lengthscale_azimuth: f64,
    pub lengthscale_inclination: f64,
    pub rq_alpha: f64,
    pub noise_variance: f64,
}

impl RqHyperparams {
    pub fn new(
        signal_variance: f64,
        lengthscale_azimuth: f64,
        lengthscale_inclination: f64,
        rq_alpha: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let hp = Self {
            signal_variance,
            lengthscale_azimuth,
            lengthscale_inclination,
            rq_alpha,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(invalid(format!("hyperparameters must be positive and finite: {self:?}")))
        }
    }

    /// Fixed order: signal variance, azimuth scale, inclination scale, alpha, noise.
    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [
            self.signal_variance,
            self.lengthscale_azimuth,
            self.lengthscale_inclination,
            self.rq_alpha,
            self.noise_variance,
        ]
    }

    pub fn from_array(v: [f64; PARAM_COUNT]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn log_params(&self) -> LogParams {
        LogParams(self.to_array().map(f64::ln))
    }
}

/// Natural logs of the hyperparameters, in [`RqHyperparams::to_array`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogParams(pub [f64; PARAM_COUNT]);

impl LogParams {
    pub fn to_hyperparams(&self) -> Result<RqHyperparams> {
        RqHyperparams::from_array(self.0.map(f64::exp))
    }
}

/// How the azimuth difference is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AzimuthMetric {
    /// Plain difference of the angles; discontinuous across the +-pi seam.
    #[default]
    Raw,
    /// Shortest angular distance. Experimental: the resulting matrix is not
    /// guaranteed positive semi-definite.
    Wrapped,
}

impl AzimuthMetric {
    fn delta(self, a: f64, b: f64) -> f64 {
        let d = a - b;
        match self {
            AzimuthMetric::Raw => d,
            AzimuthMetric::Wrapped => (d + PI).rem_euclid(2.0 * PI) - PI,
        }
    }
}

/// Pieces of one kernel evaluation reused by the gradient code.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Terms {
    pub value: f64,
    /// `u - 1`, the scaled squared distance divided by `2 alpha`.
    pub excess: f64,
    /// `dt^2 / lt^2`
    pub scaled_az: f64,
    /// `di^2 / li^2`
    pub scaled_inc: f64,
}

impl Terms {
    /// Partial derivatives of the kernel value with respect to the log parameters.
    pub fn log_grad(&self, rq_alpha: f64) -> [f64; PARAM_COUNT] {
        let u = 1.0 + self.excess;
        let k = self.value;
        [
            k,
            k * self.scaled_az / u,
            k * self.scaled_inc / u,
            rq_alpha * k * (self.excess / u - self.excess.ln_1p()),
            0.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqKernel {
    pub hp: RqHyperparams,
    pub metric: AzimuthMetric,
}

impl RqKernel {
    pub fn new(hp: RqHyperparams) -> Self {
        Self {
            hp,
            metric: AzimuthMetric::Raw,
        }
    }

    pub fn with_metric(hp: RqHyperparams, metric: AzimuthMetric) -> Self {
        Self { hp, metric }
    }

    #[inline]
    pub(crate) fn terms(&self, a: &Direction, b: &Direction) -> Terms {
        let dt = self.metric.delta(a.azimuth, b.azimuth) / self.hp.lengthscale_azimuth;
        let di = (a.inclination - b.inclination) / self.hp.lengthscale_inclination;
        let scaled_az = dt * dt;
        let scaled_inc = di * di;
        let excess = (scaled_az + scaled_inc) / (2.0 * self.hp.rq_alpha);
        let value = self.hp.signal_variance * (-self.hp.rq_alpha * excess.ln_1p()).exp();
        Terms {
            value,
            excess,
            scaled_az,
            scaled_inc,
        }
    }

    #[inline]
    pub fn eval(&self, a: &Direction, b: &Direction) -> f64 {
        self.terms(a, b).value
    }

    /// Kernel value and its gradient with respect to the log parameters.
    pub fn eval_grad(&self, a: &Direction, b: &Direction) -> (f64, [f64; PARAM_COUNT]) {
        let t = self.terms(a, b);
        (t.value, t.log_grad(self.hp.rq_alpha))
    }

    pub fn matrix(&self, rows: &[Direction], cols: &[Direction]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.eval(&rows[i], &cols[j]))
    }

    /// Square covariance of one input set; exactly symmetric.
    pub fn gram(&self, x: &[Direction]) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.hp.signal_variance;
            for i in j + 1..n {
                let v = self.eval(&x[i], &x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Column of covariances between `x` and a single input.
    pub fn column(&self, x: &[Direction], b: &Direction) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(x.len(), x.iter().map(|a| self.eval(a, b)))
    }

    pub fn matrix_grads(&self, rows: &[Direction], cols: &[Direction]) -> [DMatrix<f64>; PARAM_COUNT] {
        let mut out: [DMatrix<f64>; PARAM_COUNT] =
            std::array::from_fn(|_| DMatrix::zeros(rows.len(), cols.len()));
        for (j, b) in cols.iter().enumerate() {
            for (i, a) in rows.iter().enumerate() {
                let g = self.terms(a, b).log_grad(self.hp.rq_alpha);
                for (m, gm) in out.iter_mut().zip(g) {
                    m[(i, j)] = gm;
                }
            }
        }
        out
    }
}

/// Raw-azimuth kernel between two inputs.
pub fn rq_kernel(a: &Direction, b: &Direction, hp: &RqHyperparams) -> f64 {
    RqKernel::new(*hp).eval(a, b)
}

pub fn kernel_matrix(a: &[Direction], b: &[Direction], hp: &RqHyperparams) -> DMatrix<f64> {
    RqKernel::new(*hp).matrix(a, b)
}

/// `dK / d log(param)` for every parameter; the noise entry is identically zero.
pub fn kernel_matrix_grads(
    a: &[Direction],
    b: &[Direction],
    hp: &RqHyperparams,
) -> [DMatrix<f64>; PARAM_COUNT] {
    RqKernel::new(*hp).matrix_grads(a, b)
}
