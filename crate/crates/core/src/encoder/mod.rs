//! Scan-side training of the sparse variational GP and packaging of the
//! compressed observation.

mod bound;
mod mstep;
mod swap;

pub use bound::{bound_grad_hyperparams, exact_log_marginal, variational_bound, EXACT_MAX_POINTS};
pub use mstep::{optimize_hyperparams, MStepConfig, MStepOutcome};
pub use swap::{refine_inducing_swap, SwapConfig, SwapOutcome};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{project_to_surface, Direction, OccupancySurface, PointCloud, Pose, SensorModel, SurfaceSample};
use crate::kernel::{AzimuthMetric, RqHyperparams, RqKernel};

/// Occupied samples used to train the surface model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<Direction>,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Direction>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(invalid("training set is empty"));
        }
        if inputs.len() != targets.len() {
            return Err(invalid(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let finite = inputs
            .iter()
            .all(|d| d.azimuth.is_finite() && d.inclination.is_finite())
            && targets.iter().all(|t| t.is_finite());
        if !finite {
            return Err(invalid("training set contains non-finite values"));
        }
        Ok(Self { inputs, targets })
    }

    /// Training data of a projected scan; targets are the occupancies.
    pub fn from_surface(surface: &OccupancySurface) -> Result<Self> {
        let limit = surface.r_oc - surface.r_min;
        if let Some(s) = surface
            .samples
            .iter()
            .find(|s| !(s.occupancy > 0.0 && s.occupancy <= limit))
        {
            return Err(Error::OutOfRange(format!(
                "occupancy {} outside (0, {limit}]",
                s.occupancy
            )));
        }
        Self::new(
            surface.samples.iter().map(SurfaceSample::direction).collect(),
            surface.samples.iter().map(|s| s.occupancy).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Direction] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// A subset of the training samples, addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    indices: Vec<usize>,
    locations: Vec<Direction>,
    values: Vec<f64>,
}

impl InducingSet {
    /// Fails on out-of-range or repeated indices.
    pub fn new(data: &TrainingSet, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; data.len()];
        for &i in &indices {
            if i >= data.len() {
                return Err(invalid(format!("inducing index {i} out of range for {} samples", data.len())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("inducing index {i} repeated")));
            }
        }
        let locations = indices.iter().map(|&i| data.inputs[i]).collect();
        let values = indices.iter().map(|&i| data.targets[i]).collect();
        Ok(Self {
            indices,
            locations,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn locations(&self) -> &[Direction] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Bound before and after one accepted optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub before: f64,
    pub after: f64,
}

/// Evenly spread starting set: every `N / M`-th sample in (azimuth, inclination) order.
///
/// Runs of identical locations are shuffled with `seed` before picking. An `m`
/// above the number of samples is capped.
pub fn init_inducing_even(data: &TrainingSet, m: usize, seed: u64) -> Result<InducingSet> {
    if m == 0 {
        return Err(invalid("need at least one inducing point"));
    }
    let n = data.len();
    let m = if m > n {
        log::warn!("requested {m} inducing points but only {n} samples; using {n}");
        n
    } else {
        m
    };
    let key = |i: usize| (data.inputs[i].azimuth, data.inputs[i].inclination);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && key(order[end]) == key(order[start]) {
            end += 1;
        }
        if end - start > 1 {
            order[start..end].shuffle(&mut rng);
        }
        start = end;
    }
    let picks = (0..m).map(|i| order[i * n / m]).collect();
    InducingSet::new(data, picks)
}

/// Encoder settings. Counts may be zero; `m` and the step size may not.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub m: usize,
    pub em_rounds: usize,
    pub swap_proposals_per_round: usize,
    pub candidate_pool_size: usize,
    pub mstep_iterations: usize,
    pub mstep_step_size: f64,
    pub rng_seed: u64,
    pub r_oc: f64,
    pub r_min: f64,
    /// Azimuth step of the sensor, used to seed the azimuth length-scale.
    pub azimuth_resolution: f64,
    /// Spacing between channels, used to seed the inclination length-scale.
    pub channel_spacing: f64,
    /// Replaces the resolution-based starting point when set.
    pub initial_hyperparams: Option<RqHyperparams>,
    pub metric: AzimuthMetric,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::for_sensor(&SensorModel::desk(), 500)
    }
}

impl EncoderConfig {
    /// Defaults for a sensor: two proposals per inducing point, three rounds.
    pub fn for_sensor(sensor: &SensorModel, m: usize) -> Self {
        Self {
            m,
            em_rounds: 3,
            swap_proposals_per_round: 2 * m,
            candidate_pool_size: 256,
            mstep_iterations: 10,
            mstep_step_size: 0.25,
            rng_seed: 0,
            r_oc: sensor.r_max,
            r_min: sensor.r_min,
            azimuth_resolution: sensor.azimuth_resolution,
            channel_spacing: sensor.channel_spacing(),
            initial_hyperparams: None,
            metric: AzimuthMetric::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("m must be at least 1"));
        }
        if !(self.mstep_step_size.is_finite() && self.mstep_step_size > 0.0) {
            return Err(invalid("m-step step size must be positive"));
        }
        if !(self.r_min >= 0.0 && self.r_min < self.r_oc && self.r_oc.is_finite()) {
            return Err(invalid("need 0 <= r_min < r_oc"));
        }
        if !(self.azimuth_resolution > 0.0 && self.channel_spacing > 0.0) {
            return Err(invalid("sensor resolutions must be positive"));
        }
        if let Some(hp) = &self.initial_hyperparams {
            hp.validate()?;
        }
        Ok(())
    }

    /// Starting hyperparameters for the given targets.
    pub fn initial_hyperparams_for(&self, targets: &[f64]) -> Result<RqHyperparams> {
        if let Some(hp) = self.initial_hyperparams {
            return Ok(hp);
        }
        // Zero-mean model: the prior variance has to cover the offset too.
        let second_moment = if targets.is_empty() {
            1.0
        } else {
            targets.iter().map(|y| y * y).sum::<f64>() / targets.len() as f64
        };
        RqHyperparams::new(
            second_moment.max(1e-6),
            50.0 * self.azimuth_resolution,
            2.0 * self.channel_spacing,
            1.0,
            1e-2,
        )
    }
}

/// The transmitted model of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedObservation {
    pub pose: Pose,
    pub r_oc: f64,
    pub hyperparams: RqHyperparams,
    pub metric: AzimuthMetric,
    pub inducing: Vec<SurfaceSample>,
}

impl CompressedObservation {
    /// Floats on the wire: three per inducing point plus pose, radius and hyperparameters.
    pub fn float_count(&self) -> usize {
        3 * self.inducing.len() + 12
    }

    pub fn len(&self) -> usize {
        self.inducing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inducing.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Validation(msg));
        if !self.pose.is_finite() {
            return err("pose is not finite".into());
        }
        if !(self.r_oc.is_finite() && self.r_oc > 0.0) {
            return err(format!("r_oc {} must be positive", self.r_oc));
        }
        if self.hyperparams.validate().is_err() {
            return err(format!("invalid hyperparameters {:?}", self.hyperparams));
        }
        for s in &self.inducing {
            if !(s.azimuth.is_finite() && s.inclination.is_finite()) {
                return err("non-finite inducing location".into());
            }
            if !(s.occupancy > 0.0 && s.occupancy <= self.r_oc) {
                return err(format!("occupancy {} outside (0, {}]", s.occupancy, self.r_oc));
            }
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, as transmitted.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        let hp = self.hyperparams.to_array().map(q);
        Self {
            pose: Pose::from_array(self.pose.to_array().map(q)),
            r_oc: q(self.r_oc),
            hyperparams: RqHyperparams {
                signal_variance: hp[0],
                lengthscale_azimuth: hp[1],
                lengthscale_inclination: hp[2],
                rq_alpha: hp[3],
                noise_variance: hp[4],
            },
            metric: self.metric,
            inducing: self
                .inducing
                .iter()
                .map(|s| SurfaceSample::new(q(s.azimuth), q(s.inclination), q(s.occupancy)))
                .collect(),
        }
    }
}

/// Which half of an EM round produced a trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Swap,
    Hyperparams,
}

/// Optimization history of one [`encode_with_report`] call.
#[derive(Debug, Clone, Default)]
pub struct EncodeReport {
    pub trace: Vec<(usize, Phase, TraceEvent)>,
    /// Bound at the packaged model, before quantization.
    pub bound: Option<f64>,
    pub warnings: Vec<String>,
    pub training_points: usize,
}

pub fn encode(cloud: &PointCloud, pose: &Pose, cfg: &EncoderConfig) -> Result<CompressedObservation> {
    encode_with_report(cloud, pose, cfg).map(|(obs, _)| obs)
}

/// Projects, fits and packages one scan, returning the optimization history too.
pub fn encode_with_report(
    cloud: &PointCloud,
    pose: &Pose,
    cfg: &EncoderConfig,
) -> Result<(CompressedObservation, EncodeReport)> {
    cfg.validate()?;
    if !pose.is_finite() {
        return Err(invalid("pose must be finite"));
    }
    let surface = project_to_surface(cloud, cfg.r_oc, cfg.r_min)?;
    let mut report = EncodeReport {
        training_points: surface.len(),
        ..Default::default()
    };
    if surface.is_empty() {
        let obs = CompressedObservation {
            pose: *pose,
            r_oc: cfg.r_oc,
            hyperparams: cfg.initial_hyperparams_for(&[])?,
            metric: cfg.metric,
            inducing: Vec::new(),
        };
        return Ok((obs.quantized(), report));
    }

    let data = TrainingSet::from_surface(&surface)?;
    let mut hp = cfg.initial_hyperparams_for(data.targets())?;
    if cfg.m > data.len() {
        report
            .warnings
            .push(format!("m capped from {} to {}", cfg.m, data.len()));
    }
    let mut inducing = init_inducing_even(&data, cfg.m, cfg.rng_seed)?;

    for round in 0..cfg.em_rounds {
        let swap_cfg = SwapConfig {
            proposals: cfg.swap_proposals_per_round,
            candidate_pool_size: cfg.candidate_pool_size,
            seed: round_seed(cfg.rng_seed, round),
        };
        let swapped = swap::refine_with(&data, &inducing, &RqKernel::with_metric(hp, cfg.metric), &swap_cfg)?;
        report
            .trace
            .extend(swapped.trace.iter().map(|e| (round, Phase::Swap, *e)));
        inducing = swapped.inducing;

        let mstep_cfg = MStepConfig {
            iterations: cfg.mstep_iterations,
            step_size: cfg.mstep_step_size,
        };
        let updated = mstep::optimize_with(&data, &inducing, &hp, cfg.metric, &mstep_cfg)?;
        report
            .trace
            .extend(updated.trace.iter().map(|e| (round, Phase::Hyperparams, *e)));
        if let Some(w) = updated.warning {
            report.warnings.push(format!("round {round}: {w}"));
        }
        hp = updated.hyperparams;
        log::info!(
            "round {round}: {} swaps, {} m-steps, hyperparams {:?}",
            swapped.trace.len(),
            updated.trace.len(),
            hp
        );
    }
    report.bound = bound::bound_with(&data, inducing.locations(), &RqKernel::with_metric(hp, cfg.metric)).ok();

    let mut triples: Vec<SurfaceSample> = inducing
        .locations()
        .iter()
        .zip(inducing.values())
        .map(|(d, &y)| SurfaceSample::new(d.azimuth, d.inclination, y))
        .collect();
    triples.sort_by(|a, b| {
        a.azimuth
            .total_cmp(&b.azimuth)
            .then(a.inclination.total_cmp(&b.inclination))
    });
    let obs = CompressedObservation {
        pose: *pose,
        r_oc: cfg.r_oc,
        hyperparams: hp,
        metric: cfg.metric,
        inducing: triples,
    }
    .quantized();
    obs.validate()?;
    Ok((obs, report))
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add((round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
