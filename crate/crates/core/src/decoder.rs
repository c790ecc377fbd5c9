//! Receiver-side reconstruction from a compressed observation.
//!
//! An exact GP is fitted on the inducing triples, evaluated on the sensor's
//! query grid, and cells whose predictive variance stays below a threshold
//! derived from the variance statistics are restored as points.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::encoder::CompressedObservation;
use crate::error::{invalid, Error, Result};
use crate::geometry::{apply_pose, make_query_grid, spherical_to_cartesian, Direction, PointCloud, SensorModel, SphericalPoint};
use crate::kernel::{RqHyperparams, RqKernel};
use crate::linalg;

/// Grid cells predicted per batch; bounds the size of the cross-covariance block.
const BATCH: usize = 4096;

/// Threshold weights written by `sgpc calibrate`.
const CALIBRATED: &str = include_str!("../config/thresholds.conf");

/// Exact GP posterior over the inducing triples.
#[derive(Debug, Clone)]
pub struct BaseModel {
    kernel: RqKernel,
    r_oc: f64,
    locations: Vec<Direction>,
    /// Inverse of the lower Cholesky factor of `Kmm + sn2 I`.
    factor_inv: DMatrix<f64>,
    /// `(Kmm + sn2 I)^-1 y`.
    weights: DVector<f64>,
}

impl BaseModel {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn hyperparams(&self) -> &RqHyperparams {
        &self.kernel.hp
    }

    pub fn r_oc(&self) -> f64 {
        self.r_oc
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
}

/// Posterior mean and predictive variance on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePrediction {
    pub grid: Vec<Direction>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl SurfacePrediction {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub k_m: f64,
    pub k_std: f64,
    pub upsample: usize,
    pub sensor: SensorModel,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            k_m: 1.0,
            k_std: 0.5,
            upsample: 1,
            sensor: SensorModel::desk(),
        }
    }
}

impl DecoderConfig {
    /// Desk sensor with the checked-in weights for `m` inducing points.
    pub fn calibrated_for(m: usize) -> Self {
        let (k_m, k_std) = ThresholdTable::calibrated().weights_for(m);
        Self {
            k_m,
            k_std,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_m.is_finite() && self.k_std.is_finite()) {
            return Err(invalid("threshold weights must be finite"));
        }
        if self.upsample == 0 {
            return Err(invalid("upsample must be at least 1"));
        }
        self.sensor.validate()
    }
}

/// Threshold weights fitted per inducing count.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    /// `(m, k_m, k_std)` rows, sorted by `m` with distinct counts.
    rows: Vec<(usize, f64, f64)>,
}

impl ThresholdTable {
    pub fn new(mut rows: Vec<(usize, f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("threshold table is empty"));
        }
        if rows.iter().any(|r| !(r.1.is_finite() && r.2.is_finite())) {
            return Err(invalid("threshold weights must be finite"));
        }
        rows.sort_by_key(|r| r.0);
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("duplicate inducing count in threshold table"));
        }
        Ok(Self { rows })
    }

    /// One pair used for every inducing count.
    pub fn uniform(k_m: f64, k_std: f64) -> Result<Self> {
        Self::new(vec![(0, k_m, k_std)])
    }

    /// The table checked in under `config/thresholds.conf`.
    pub fn calibrated() -> Self {
        Self::parse(CALIBRATED).expect("checked-in thresholds parse")
    }

    pub fn rows(&self) -> &[(usize, f64, f64)] {
        &self.rows
    }

    /// Weights of the row with the nearest inducing count; ties go to the smaller count.
    pub fn weights_for(&self, m: usize) -> (f64, f64) {
        let row = self
            .rows
            .iter()
            .min_by_key(|r| (r.0.abs_diff(m), r.0))
            .expect("table is non-empty");
        (row.1, row.2)
    }

    /// Whitespace-separated `m k_m k_std` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("line {}: expected `m k_m k_std`, got {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [m, k_m, k_std] = fields[..] else {
                return Err(bad());
            };
            rows.push((
                m.parse().map_err(|_| bad())?,
                k_m.parse().map_err(|_| bad())?,
                k_std.parse().map_err(|_| bad())?,
            ));
        }
        Self::new(rows).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# Written by `sgpc calibrate`: m k_m k_std\n");
        for (m, k_m, k_std) in &self.rows {
            out.push_str(&format!("{m} {k_m} {k_std}\n"));
        }
        out
    }
}

/// Factors the inducing-point GP once.
pub fn fit_base_gp(obs: &CompressedObservation) -> Result<BaseModel> {
    obs.validate()?;
    let kernel = RqKernel::with_metric(obs.hyperparams, obs.metric);
    let locations: Vec<Direction> = obs.inducing.iter().map(|s| s.direction()).collect();
    let m = locations.len();
    if m == 0 {
        return Ok(BaseModel {
            kernel,
            r_oc: obs.r_oc,
            locations,
            factor_inv: DMatrix::zeros(0, 0),
            weights: DVector::zeros(0),
        });
    }
    let mut k = kernel.gram(&locations);
    for i in 0..m {
        k[(i, i)] += obs.hyperparams.noise_variance;
    }
    let (l, _) = linalg::noisy_cholesky(&k, obs.hyperparams.signal_variance)?;
    let factor_inv = linalg::lower_inverse(&l);
    let y = DVector::from_iterator(m, obs.inducing.iter().map(|s| s.occupancy));
    let weights = factor_inv.tr_mul(&(&factor_inv * y));
    Ok(BaseModel {
        kernel,
        r_oc: obs.r_oc,
        locations,
        factor_inv,
        weights,
    })
}

pub fn predict_surface(model: &BaseModel, grid: &[Direction]) -> Result<SurfacePrediction> {
    if grid.is_empty() {
        return Err(invalid("query grid is empty"));
    }
    let hp = model.kernel.hp;
    let prior = hp.signal_variance;
    let mut mean = Vec::with_capacity(grid.len());
    let mut variance = Vec::with_capacity(grid.len());
    if model.is_empty() {
        mean.resize(grid.len(), 0.0);
        variance.resize(grid.len(), prior + hp.noise_variance);
    } else {
        for chunk in grid.chunks(BATCH) {
            let k_mc = model.kernel.matrix(&model.locations, chunk);
            let mu = k_mc.tr_mul(&model.weights);
            let v = &model.factor_inv * &k_mc;
            for (c, &mu_c) in mu.iter().enumerate() {
                let explained = v.column(c).norm_squared();
                let latent = (prior - explained).clamp(0.0, prior);
                mean.push(mu_c);
                variance.push(latent + hp.noise_variance);
            }
        }
    }
    Ok(SurfacePrediction {
        grid: grid.to_vec(),
        mean,
        variance,
    })
}

/// `k_m * mean + k_std * std` of the cell variances (population statistics).
pub fn variance_threshold(pred: &SurfacePrediction, k_m: f64, k_std: f64) -> Result<f64> {
    if pred.variance.is_empty() {
        return Err(invalid("prediction has no cells"));
    }
    let n = pred.variance.len() as f64;
    let mean = pred.variance.iter().sum::<f64>() / n;
    let var = pred.variance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(k_m * mean + k_std * var.sqrt())
}

/// Occupied flag per cell: variance at or below the threshold.
pub fn classify(pred: &SurfacePrediction, v_th: f64) -> Vec<bool> {
    pred.variance.iter().map(|&v| v <= v_th).collect()
}

/// Occupied cells as points at radius `clamp(r_oc - mean, r_min, r_oc)`.
pub fn sample_occupied(pred: &SurfacePrediction, v_th: f64, r_oc: f64, r_min: f64) -> Vec<SphericalPoint> {
    pred.grid
        .iter()
        .zip(&pred.mean)
        .zip(&pred.variance)
        .filter(|(_, &v)| v <= v_th)
        .map(|((d, &mu), _)| SphericalPoint::new(d.azimuth, d.inclination, (r_oc - mu).clamp(r_min, r_oc)))
        .collect()
}

/// Full reconstruction in the global frame.
pub fn decode(obs: &CompressedObservation, cfg: &DecoderConfig) -> Result<PointCloud> {
    cfg.validate()?;
    obs.validate()?;
    if obs.is_empty() {
        return Ok(PointCloud::default());
    }
    let model = fit_base_gp(obs)?;
    let grid = make_query_grid(&cfg.sensor, cfg.upsample)?;
    let pred = predict_surface(&model, &grid)?;
    let v_th = variance_threshold(&pred, cfg.k_m, cfg.k_std)?;
    let body: PointCloud = sample_occupied(&pred, v_th, obs.r_oc, cfg.sensor.r_min)
        .iter()
        .map(spherical_to_cartesian)
        .collect::<Result<_>>()?;
    apply_pose(&body, &obs.pose)
}

/// A prediction paired with the true occupied flag of each of its cells.
#[derive(Debug, Clone)]
pub struct LabeledPrediction {
    pub prediction: SurfacePrediction,
    pub truth_occupied: Vec<bool>,
}

/// F1 score of occupied-cell classification; 1 when there is nothing to find and nothing found.
pub fn f1_score(predicted: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    }
}

/// Picks the `(k_m, k_std)` pair with the best mean F1 over the scenes.
/// Ties go to the larger `k_m`, then the smaller `k_std`.
pub fn calibrate_threshold(scenes: &[LabeledPrediction], sweep: &[(f64, f64)]) -> Result<(f64, f64)> {
    if sweep.is_empty() {
        return Err(invalid("threshold sweep is empty"));
    }
    if scenes.is_empty() {
        return Err(invalid("no labeled scenes"));
    }
    for s in scenes {
        if s.truth_occupied.len() != s.prediction.len() {
            return Err(invalid("labels do not match the prediction grid"));
        }
    }
    let mut best: Option<((f64, f64), f64)> = None;
    for &(k_m, k_std) in sweep {
        let mut total = 0.0;
        for s in scenes {
            let v_th = variance_threshold(&s.prediction, k_m, k_std)?;
            total += f1_score(&classify(&s.prediction, v_th), &s.truth_occupied);
        }
        let score = total / scenes.len() as f64;
        let better = match best {
            None => true,
            Some(((bm, bs), bf)) => {
                score > bf || (score == bf && (k_m > bm || (k_m == bm && k_std < bs)))
            }
        };
        if better {
            best = Some(((k_m, k_std), score));
        }
    }
    let ((k_m, k_std), score) = best.expect("sweep is non-empty");
    log::info!("calibrated k_m={k_m} k_std={k_std} mean F1 {score:.4}");
    Ok((k_m, k_std))
}

/// CSV of the diagnostic surfaces: observed occupancy (blank when free), mean and variance.
pub fn write_surface_csv<W: Write>(out: &mut W, pred: &SurfacePrediction, observed: Option<&[Option<f64>]>) -> Result<()> {
    writeln!(out, "azimuth,inclination,observed,mean,variance")?;
    for (i, d) in pred.grid.iter().enumerate() {
        let obs = observed
            .and_then(|o| o.get(i).copied().flatten())
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", d.azimuth, d.inclination, obs, pred.mean[i], pred.variance[i])?;
    }
    Ok(())
}
