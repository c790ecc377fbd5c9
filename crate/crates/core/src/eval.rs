//! Reconstruction metrics and the benchmark sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::decoder::{
    calibrate_threshold, classify, f1_score, fit_base_gp, predict_surface, variance_threshold, DecoderConfig,
    LabeledPrediction, SurfacePrediction, ThresholdTable,
};
use crate::encoder::{encode, encode_with_report, EncodeReport, EncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{make_query_grid, PointCloud, Pose};
use crate::synth::{generate_scan, GroundTruthScan, SceneConfig};
use crate::wire;

/// Root mean square range error and the population std of `|error|`, over
/// cells where the truth has a return. The predicted range is `r_oc - mean`.
pub fn rmsd(truth: &GroundTruthScan, pred: &SurfacePrediction, r_oc: f64) -> Result<(f64, f64)> {
    if truth.true_radius.len() != pred.len() {
        return Err(invalid(format!(
            "truth has {} cells, prediction {}",
            truth.true_radius.len(),
            pred.len()
        )));
    }
    let errors: Vec<f64> = truth
        .true_radius
        .iter()
        .zip(&pred.mean)
        .filter_map(|(r, mu)| r.map(|r| r - (r_oc - mu)))
        .collect();
    residual_stats(&errors)
}

/// `(sqrt(mean e^2), population std of |e|)`.
pub fn residual_stats(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(invalid("no cells with a true return"));
    }
    let n = errors.len() as f64;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean_abs = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e.abs() - mean_abs).powi(2)).sum::<f64>() / n;
    Ok((rms, var.sqrt()))
}

/// Precision, recall and F1 of the occupied flags against cells with a true return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn occupancy_confusion(truth: &GroundTruthScan, occupied: &[bool]) -> Result<Confusion> {
    if truth.true_radius.len() != occupied.len() {
        return Err(invalid("occupancy flags do not match the truth grid"));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (r, &p) in truth.true_radius.iter().zip(occupied) {
        match (p, r.is_some()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fnn == 0 {
        return Err(invalid("truth has no occupied cells; recall is undefined"));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fnn) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Confusion { precision, recall, f1 })
}

/// Raw size (12 bytes per point) over the encoded size.
pub fn compression_ratio(raw: &PointCloud, wire_bytes: usize) -> Result<f64> {
    if wire_bytes == 0 {
        return Err(invalid("encoded size must be positive"));
    }
    Ok(raw.raw_bytes() as f64 / wire_bytes as f64)
}

/// Everything one benchmark cell needs.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub scenes: Vec<(String, SceneConfig)>,
    pub m_values: Vec<usize>,
    pub seed: u64,
    /// Template; `m`, the proposal count and the sensor fields are set per cell.
    pub encoder: EncoderConfig,
    /// Swap proposals per round as a multiple of `m`.
    pub proposals_per_point: usize,
    /// Classification weights, looked up by `m`.
    pub thresholds: ThresholdTable,
    /// Adds wall-clock columns; these vary between runs.
    pub timings: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenes: vec![("tunnel".into(), SceneConfig::builtin("tunnel").expect("builtin"))],
            m_values: vec![100, 200, 300, 500],
            seed: 0,
            encoder: EncoderConfig::default(),
            proposals_per_point: 2,
            thresholds: ThresholdTable::calibrated(),
            timings: false,
        }
    }
}

impl BenchConfig {
    /// `key = value` lines: `scenes` (built-in names or scene files, comma separated),
    /// `m`, `seed`, `em_rounds`, `proposals_per_point`, `pool`, `mstep_iterations`,
    /// `step_size`, `thresholds` (a table file), `km` and `kstd` (one pair for every `m`),
    /// `timings`. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut k_m, mut k_std) = (None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Format(format!("line {}: bad {what} {value:?}", lineno + 1));
            let list = || value.split(',').map(str::trim).filter(|s| !s.is_empty());
            match key {
                "scenes" => {
                    cfg.scenes = list()
                        .map(|name| load_scene(name, base).map(|s| (name.to_string(), s)))
                        .collect::<Result<_>>()?
                }
                "m" => {
                    cfg.m_values = list()
                        .map(|v| v.parse().map_err(|_| bad("m")))
                        .collect::<Result<_>>()?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "em_rounds" => cfg.encoder.em_rounds = value.parse().map_err(|_| bad("em_rounds"))?,
                "proposals_per_point" => cfg.proposals_per_point = value.parse().map_err(|_| bad("proposals"))?,
                "pool" => cfg.encoder.candidate_pool_size = value.parse().map_err(|_| bad("pool"))?,
                "mstep_iterations" => cfg.encoder.mstep_iterations = value.parse().map_err(|_| bad("iterations"))?,
                "step_size" => cfg.encoder.mstep_step_size = value.parse().map_err(|_| bad("step size"))?,
                "thresholds" => {
                    let path = base.join(value);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::InvalidInput(format!("thresholds {}: {e}", path.display())))?;
                    cfg.thresholds = ThresholdTable::parse(&text)?;
                }
                "km" => k_m = Some(value.parse().map_err(|_| bad("km"))?),
                "kstd" => k_std = Some(value.parse().map_err(|_| bad("kstd"))?),
                "timings" => cfg.timings = value.parse().map_err(|_| bad("timings"))?,
                other => return Err(Error::Format(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        if k_m.is_some() || k_std.is_some() {
            let fallback = DecoderConfig::default();
            cfg.thresholds = ThresholdTable::uniform(k_m.unwrap_or(fallback.k_m), k_std.unwrap_or(fallback.k_std))?;
        }
        Ok(cfg)
    }
}

fn load_scene(name: &str, base: &Path) -> Result<SceneConfig> {
    if let Some(s) = SceneConfig::builtin(name) {
        return Ok(s);
    }
    let path = base.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::InvalidInput(format!("scene {}: {e}", path.display())))?;
    SceneConfig::parse(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scene: String,
    pub m: usize,
    /// Points in the raw scan.
    pub n: usize,
    pub rmsd_mean: f64,
    pub rmsd_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub encoded_bytes: usize,
    pub raw_bytes: usize,
    pub ratio: f64,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub timings: bool,
}

const HEADER: &str = "scene,m,n,rmsd_mean,rmsd_std,precision,recall,encoded_bytes,raw_bytes,ratio";

impl BenchReport {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        if self.timings {
            writeln!(out, "{HEADER},encode_seconds,decode_seconds")?;
        } else {
            writeln!(out, "{HEADER}")?;
        }
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.scene, r.m, r.n, r.rmsd_mean, r.rmsd_std, r.precision, r.recall, r.encoded_bytes, r.raw_bytes, r.ratio
            )?;
            if self.timings {
                write!(out, ",{},{}", r.encode_seconds, r.decode_seconds)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    /// Violations of the accuracy trend and of the ratio bookkeeping.
    ///
    /// Per scene, RMSD must not grow with `m` except for at most one step that
    /// grows by no more than 5%.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for r in &self.rows {
            let expect = r.raw_bytes as f64 / r.encoded_bytes as f64;
            if r.ratio != expect {
                problems.push(format!("{} m={}: ratio {} != {expect}", r.scene, r.m, r.ratio));
            }
        }
        let mut scenes: Vec<&str> = self.rows.iter().map(|r| r.scene.as_str()).collect();
        scenes.dedup();
        for scene in scenes {
            let mut rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.scene == scene).collect();
            rows.sort_by_key(|r| r.m);
            problems.extend(trend_violations(
                scene,
                &rows.iter().map(|r| (r.m, r.rmsd_mean)).collect::<Vec<_>>(),
            ));
        }
        problems
    }
}

/// Checks that the values are non-increasing with one inversion of at most 5% allowed.
pub fn trend_violations(label: &str, series: &[(usize, f64)]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut inversions = 0;
    for w in series.windows(2) {
        let ((m0, a), (m1, b)) = (w[0], w[1]);
        if b > a {
            inversions += 1;
            let rel = (b - a) / a.max(f64::MIN_POSITIVE);
            if rel > 0.05 {
                problems.push(format!("{label}: rmsd rises {:.1}% from m={m0} to m={m1}", 100.0 * rel));
            } else if inversions > 1 {
                problems.push(format!("{label}: second inversion from m={m0} to m={m1}"));
            }
        }
    }
    problems
}

/// Synthesizes, encodes, round-trips through the wire format and scores every (scene, m) cell.
pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.scenes.is_empty() || cfg.m_values.is_empty() {
        return Err(invalid("benchmark needs at least one scene and one m"));
    }
    let mut rows = Vec::new();
    for (name, spec) in &cfg.scenes {
        let truth = generate_scan(&spec.scene, &spec.pose, &spec.sensor, cfg.seed)?;
        let grid = make_query_grid(&spec.sensor, 1)?;
        for &m in &cfg.m_values {
            let mut enc = EncoderConfig {
                m,
                swap_proposals_per_round: cfg.proposals_per_point * m,
                rng_seed: cfg.seed,
                ..EncoderConfig::for_sensor(&spec.sensor, m)
            };
            enc.em_rounds = cfg.encoder.em_rounds;
            enc.candidate_pool_size = cfg.encoder.candidate_pool_size;
            enc.mstep_iterations = cfg.encoder.mstep_iterations;
            enc.mstep_step_size = cfg.encoder.mstep_step_size;

            let started = Instant::now();
            let obs = encode(&truth.cloud, &truth.pose, &enc)?;
            let bytes = wire::serialize(&obs);
            let encode_seconds = started.elapsed().as_secs_f64();

            let started = Instant::now();
            let received = wire::deserialize(&bytes)?;
            let model = fit_base_gp(&received)?;
            let pred = predict_surface(&model, &grid)?;
            let (k_m, k_std) = cfg.thresholds.weights_for(m);
            let v_th = variance_threshold(&pred, k_m, k_std)?;
            let occupied = classify(&pred, v_th);
            let decode_seconds = started.elapsed().as_secs_f64();

            let (rmsd_mean, rmsd_std) = rmsd(&truth, &pred, received.r_oc)?;
            let confusion = occupancy_confusion(&truth, &occupied)?;
            let raw_bytes = truth.cloud.raw_bytes();
            let row = BenchRow {
                scene: name.clone(),
                m,
                n: truth.cloud.len(),
                rmsd_mean,
                rmsd_std,
                precision: confusion.precision,
                recall: confusion.recall,
                encoded_bytes: bytes.len(),
                raw_bytes,
                ratio: compression_ratio(&truth.cloud, bytes.len())?,
                encode_seconds,
                decode_seconds,
            };
            log::info!("{name} m={m}: rmsd {rmsd_mean:.4} precision {:.3} recall {:.3}", row.precision, row.recall);
            rows.push(row);
        }
    }
    Ok(BenchReport {
        rows,
        timings: cfg.timings,
    })
}

/// Inducing counts the threshold weights are fitted at.
pub const CALIBRATION_M: [usize; 4] = [100, 200, 300, 500];

/// Tunnel scans from two off-axis poses, disjoint from the on-axis benchmark scan.
pub fn calibration_suite() -> Vec<SceneConfig> {
    [
        [0.0, 0.4, 0.2, 0.0, 0.0, 0.3],
        [0.0, -0.8, 0.0, 0.0, 0.1, 0.0],
    ]
    .into_iter()
    .map(|pose| SceneConfig {
        pose: Pose::from_array(pose),
        ..SceneConfig::builtin("tunnel").expect("builtin")
    })
    .collect()
}

/// `k_m` from 0.005 to 1, finer below 0.05, crossed with a few `k_std` values.
pub fn default_sweep() -> Vec<(f64, f64)> {
    (1..=8)
        .map(|i| i as f64 / 200.0)
        .chain((2..=40).map(|i| i as f64 / 40.0))
        .flat_map(|k_m| [0.0, 0.025, 0.05, 0.1, 0.25, 0.5].map(|k_std| (k_m, k_std)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub table: ThresholdTable,
    /// Mean F1 over the suite at the chosen weights, per `m`.
    pub mean_f1: Vec<(usize, f64)>,
    /// Encoder reports, by `m` then scene.
    pub reports: Vec<EncodeReport>,
}

/// For each `m`, encodes every suite scene, decodes on the sensor grid and picks the
/// weights with the best mean F1.
pub fn calibrate(suite: &[SceneConfig], m_values: &[usize], sweep: &[(f64, f64)], seed: u64) -> Result<CalibrationRun> {
    if suite.is_empty() || m_values.is_empty() {
        return Err(invalid("calibration needs at least one scene and one m"));
    }
    let truths = suite
        .iter()
        .map(|spec| generate_scan(&spec.scene, &spec.pose, &spec.sensor, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut mean_f1 = Vec::new();
    let mut reports = Vec::new();
    for &m in m_values {
        let mut labeled = Vec::new();
        for (spec, truth) in suite.iter().zip(&truths) {
            let cfg = EncoderConfig {
                rng_seed: seed,
                ..EncoderConfig::for_sensor(&spec.sensor, m)
            };
            let (obs, report) = encode_with_report(&truth.cloud, &truth.pose, &cfg)?;
            let received = wire::deserialize(&wire::serialize(&obs))?;
            let grid = make_query_grid(&spec.sensor, 1)?;
            labeled.push(LabeledPrediction {
                prediction: predict_surface(&fit_base_gp(&received)?, &grid)?,
                truth_occupied: truth.occupied(),
            });
            reports.push(report);
        }
        let (k_m, k_std) = calibrate_threshold(&labeled, sweep)?;
        let mut total = 0.0;
        for s in &labeled {
            let v_th = variance_threshold(&s.prediction, k_m, k_std)?;
            total += f1_score(&classify(&s.prediction, v_th), &s.truth_occupied);
        }
        log::info!("m={m}: k_m={k_m} k_std={k_std}");
        rows.push((m, k_m, k_std));
        mean_f1.push((m, total / labeled.len() as f64));
    }
    Ok(CalibrationRun {
        table: ThresholdTable::new(rows)?,
        mean_f1,
        reports,
    })
}
