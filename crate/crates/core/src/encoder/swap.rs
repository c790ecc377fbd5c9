//! Inducing-set search by single-point swaps.
//!
//! A swap removes slot `i` and appends data point `j`. Its effect on the bound
//! is scored from the current factors in O(N M): removing `i` and adding `j`
//! change `Q = V^T V` by `b b^T - a a^T`, where `a` and `b` are the directions
//! lost and gained in the whitened feature space. Accepted swaps update the
//! factors in place with Givens rotations and a bordered append.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bound::{assemble, Factors};
use super::{InducingSet, TraceEvent, TrainingSet};
use crate::error::{Error, Result};
use crate::geometry::Direction;
use crate::kernel::{RqHyperparams, RqKernel};
use crate::linalg;

/// Smallest admissible Schur pivot for an incoming point, relative to the signal variance.
/// Nearly dependent candidates make the rank-two update cancel catastrophically.
pub(crate) const MIN_PIVOT: f64 = 1e-6;

/// Settings of one E-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapConfig {
    pub proposals: usize,
    pub candidate_pool_size: usize,
    pub seed: u64,
}

/// Result of [`refine_inducing_swap`].
#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub inducing: InducingSet,
    /// One event per accepted swap.
    pub trace: Vec<TraceEvent>,
    pub proposals_evaluated: usize,
}

/// Runs one round of swap proposals and keeps only improving swaps.
pub fn refine_inducing_swap(
    data: &TrainingSet,
    inducing: &InducingSet,
    hp: &RqHyperparams,
    cfg: &SwapConfig,
) -> Result<SwapOutcome> {
    refine_with(data, inducing, &RqKernel::new(*hp), cfg)
}

pub(crate) fn refine_with(
    data: &TrainingSet,
    inducing: &InducingSet,
    kernel: &RqKernel,
    cfg: &SwapConfig,
) -> Result<SwapOutcome> {
    let unchanged = |trace| SwapOutcome {
        inducing: inducing.clone(),
        trace,
        proposals_evaluated: 0,
    };
    let n = data.len();
    let m = inducing.len();
    if cfg.proposals == 0 || cfg.candidate_pool_size == 0 || m == 0 || m >= n {
        return Ok(unchanged(Vec::new()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut in_set = vec![false; n];
    for &i in inducing.indices() {
        in_set[i] = true;
    }
    let outside: Vec<usize> = (0..n).filter(|&i| !in_set[i]).collect();
    let pool_size = cfg.candidate_pool_size.min(outside.len());
    let mut pool: Vec<usize> = index::sample(&mut rng, outside.len(), pool_size)
        .into_iter()
        .map(|k| outside[k])
        .collect();

    let mut state = SwapState::new(data, inducing.indices().to_vec(), kernel)?;
    let start = state.value();
    let mut current = start;
    let mut trace = Vec::new();
    for _ in 0..cfg.proposals {
        let slot = rng.random_range(0..m);
        let pick = rng.random_range(0..pool.len());
        let Some(proposal) = state.propose(slot, pool[pick]) else {
            continue;
        };
        if proposal.delta > 0.0 {
            let removed = state.indices[slot];
            let after = current + proposal.delta;
            state.commit(proposal)?;
            pool[pick] = removed;
            trace.push(TraceEvent {
                before: current,
                after,
            });
            current = after;
        }
    }
    if trace.is_empty() {
        let mut out = unchanged(trace);
        out.proposals_evaluated = cfg.proposals;
        return Ok(out);
    }

    // Incremental updates drift; settle the outcome on a fresh evaluation.
    let result = InducingSet::new(data, state.indices.clone())?;
    let end = Factors::new(data, result.locations(), kernel)?.value();
    log::debug!(
        "swap round: {} accepted, bound {start:.6} -> {end:.6} (tracked {current:.6})",
        trace.len()
    );
    if end < start - 1e-9 {
        log::warn!("swap round lowered the bound ({start} -> {end}); keeping the input set");
        let mut out = unchanged(Vec::new());
        out.proposals_evaluated = cfg.proposals;
        return Ok(out);
    }
    Ok(SwapOutcome {
        inducing: result,
        trace,
        proposals_evaluated: cfg.proposals,
    })
}

/// Scored swap, carrying what [`SwapState::commit`] needs.
pub(crate) struct Proposal {
    slot: usize,
    candidate: usize,
    pub delta: f64,
    /// `k(X_m, x_j)` against the current slots.
    k_mj: DVector<f64>,
    /// `k(X, x_j)`.
    k_nj: DVector<f64>,
}

/// Factors of the bound, kept current under swaps.
pub(crate) struct SwapState<'a> {
    data: &'a TrainingSet,
    kernel: RqKernel,
    jitter: f64,
    pub indices: Vec<usize>,
    locs: Vec<Direction>,
    lk: DMatrix<f64>,
    vt: DMatrix<f64>,
    h: DMatrix<f64>,
    binv: DMatrix<f64>,
    logdet_b: f64,
    vy: DVector<f64>,
    y: DVector<f64>,
    /// `C^-1 y`.
    t: DVector<f64>,
    /// `V t`.
    vt_t: DVector<f64>,
}

impl<'a> SwapState<'a> {
    pub fn new(data: &'a TrainingSet, indices: Vec<usize>, kernel: &RqKernel) -> Result<Self> {
        let locs: Vec<Direction> = indices.iter().map(|&i| data.inputs()[i]).collect();
        let f = Factors::new(data, &locs, kernel)?;
        let y = DVector::from_column_slice(data.targets());
        let mut state = Self {
            data,
            kernel: *kernel,
            jitter: f.jitter,
            indices,
            locs,
            lk: f.lk,
            vt: f.vt,
            h: f.h,
            binv: f.binv,
            logdet_b: f.logdet_b,
            vy: f.vy,
            y,
            t: DVector::zeros(0),
            vt_t: DVector::zeros(0),
        };
        state.refresh_residual();
        Ok(state)
    }

    fn s2(&self) -> f64 {
        self.kernel.hp.noise_variance
    }

    pub fn value(&self) -> f64 {
        let s2 = self.s2();
        let a = &self.binv * &self.vy / s2;
        let quad = s2 * self.t.norm_squared() + a.norm_squared();
        assemble(self.data.len(), &self.kernel.hp, self.logdet_b, quad, self.h.trace())
    }

    fn refresh_residual(&mut self) {
        let s2 = self.s2();
        let bvy = &self.binv * &self.vy / s2;
        self.t = (&self.y - &self.vt * bvy) / s2;
        self.vt_t = self.vt.tr_mul(&self.t);
    }

    /// Change in the bound from replacing slot `slot` with data point `candidate`.
    /// `None` when the swap is numerically degenerate.
    pub fn propose(&self, slot: usize, candidate: usize) -> Option<Proposal> {
        let m = self.locs.len();
        let s2 = self.s2();
        let sf2 = self.kernel.hp.signal_variance;
        let xj = self.data.inputs()[candidate];

        // w = Lk^-1 e_slot is zero above the slot.
        let mut w = DVector::zeros(m);
        w[slot] = 1.0 / self.lk[(slot, slot)];
        for r in slot + 1..m {
            let mut acc = 0.0;
            for c in slot..r {
                acc += self.lk[(r, c)] * w[c];
            }
            w[r] = -acc / self.lk[(r, r)];
        }
        let w_hat = w.normalize();

        let k_mj = self.kernel.column(&self.locs, &xj);
        let l = linalg::solve_lower(&self.lk, &k_mj);
        let g = &l - &w_hat * l.dot(&w_hat);
        let d = sf2 + self.jitter - g.norm_squared();
        if !(d > MIN_PIVOT * sf2) {
            return None;
        }

        // The swap removes direction a = V^T w_hat from C = s2 I + V^T V and adds b.
        let k_nj = self.kernel.column(self.data.inputs(), &xj);
        let sd = d.sqrt();
        let b = (&k_nj - &self.vt * &g) / sd;
        let vb = self.vt.tr_mul(&b);
        // Ridge solution for b against the current directions; keeps b^T C^-1 b free of cancellation.
        let c = &self.binv * &vb / s2;
        let fit = &b - &self.vt * &c;
        let b_cb = (fit.norm_squared() + s2 * c.norm_squared()) / s2;
        let b_w = &self.binv * &w_hat;

        let aa = w_hat.dot(&(&self.h * &w_hat));
        let bb = b.norm_squared();
        let a_cb = w_hat.dot(&c);
        let at = w_hat.dot(&self.vt_t);
        let bt = b.dot(&self.t);

        // Determinant lemma and Woodbury for C - a a^T + b b^T.
        let s00 = -w_hat.dot(&b_w);
        let s11 = 1.0 + b_cb;
        let neg_det = -s00 * s11 + a_cb * a_cb;
        if !(neg_det > 0.0) {
            return None;
        }
        let det = -neg_det;
        let d_logdet = neg_det.ln();
        let d_quad = -(s11 * at * at - 2.0 * a_cb * at * bt + s00 * bt * bt) / det;
        let delta = -0.5 * d_logdet - 0.5 * d_quad + (bb - aa) / (2.0 * s2);
        if !delta.is_finite() {
            return None;
        }
        Some(Proposal {
            slot,
            candidate,
            delta,
            k_mj,
            k_nj,
        })
    }

    pub fn commit(&mut self, p: Proposal) -> Result<()> {
        self.remove_slot(p.slot);
        let mut k_mj = p.k_mj;
        k_mj = k_mj.remove_row(p.slot);
        self.append(p.candidate, &k_mj, &p.k_nj)?;
        self.refresh_residual();
        Ok(())
    }

    fn remove_slot(&mut self, i: usize) {
        let m = self.locs.len();
        let e = m - 1;
        // Move slot i last in H and B^-1 so the rotations act on (r - 1, e).
        let order: Vec<usize> = (0..m).filter(|&k| k != i).chain([i]).collect();
        let mut h = self.h.select_rows(&order).select_columns(&order);
        let mut binv = self.binv.select_rows(&order).select_columns(&order);

        let mut x: Vec<f64> = (0..m).map(|r| if r > i { self.lk[(r, i)] } else { 0.0 }).collect();
        let mut v_extra = self.vt.column(i).clone_owned();
        let mut vy_extra = self.vy[i];
        let mut vtt_extra = self.vt_t[i];
        for r in i + 1..m {
            let lrr = self.lk[(r, r)];
            let rr = lrr.hypot(x[r]);
            let (c, s) = (lrr / rr, x[r] / rr);
            self.lk[(r, r)] = rr;
            for q in r + 1..m {
                let (a, b) = (self.lk[(q, r)], x[q]);
                self.lk[(q, r)] = c * a + s * b;
                x[q] = -s * a + c * b;
            }
            {
                let mut col = self.vt.column_mut(r);
                for (a, b) in col.iter_mut().zip(v_extra.iter_mut()) {
                    let (va, vb) = (*a, *b);
                    *a = c * va + s * vb;
                    *b = -s * va + c * vb;
                }
            }
            rotate(&mut self.vy[r], &mut vy_extra, c, s);
            rotate(&mut self.vt_t[r], &mut vtt_extra, c, s);
            rotate_sym(&mut h, r - 1, e, c, s);
            rotate_sym(&mut binv, r - 1, e, c, s);
        }

        let lk = std::mem::replace(&mut self.lk, DMatrix::zeros(0, 0));
        self.lk = lk.remove_row(i).remove_column(i);
        let vt = std::mem::replace(&mut self.vt, DMatrix::zeros(0, 0));
        self.vt = vt.remove_column(i);
        let vy = std::mem::replace(&mut self.vy, DVector::zeros(0));
        self.vy = vy.remove_row(i);
        let vt_t = std::mem::replace(&mut self.vt_t, DVector::zeros(0));
        self.vt_t = vt_t.remove_row(i);

        // Schur complement of the trailing entry of B^-1 gives the inverse of the kept block.
        let bee = binv[(e, e)];
        let col = binv.view((0, e), (e, 1)).clone_owned();
        let mut kept = binv.view((0, 0), (e, e)).clone_owned();
        kept.ger(-1.0 / bee, &col.column(0), &col.column(0), 1.0);
        self.binv = kept;
        self.logdet_b += bee.ln();
        self.h = h.view((0, 0), (e, e)).clone_owned();

        self.indices.remove(i);
        self.locs.remove(i);
    }

    fn append(&mut self, j: usize, k_mj: &DVector<f64>, k_nj: &DVector<f64>) -> Result<()> {
        let m = self.locs.len();
        let s2 = self.s2();
        let l = linalg::solve_lower(&self.lk, k_mj);
        let d = self.kernel.hp.signal_variance + self.jitter - l.norm_squared();
        if !(d > 0.0) {
            return Err(Error::Numerical("swap made K_mm singular".into()));
        }
        let sd = d.sqrt();

        let mut lk = DMatrix::zeros(m + 1, m + 1);
        lk.view_mut((0, 0), (m, m)).copy_from(&self.lk);
        for c in 0..m {
            lk[(m, c)] = l[c];
        }
        lk[(m, m)] = sd;
        self.lk = lk;

        let v_new = (k_nj - &self.vt * &l) / sd;
        let h_col = self.vt.tr_mul(&v_new);
        let h_nn = v_new.norm_squared();
        let vt = std::mem::replace(&mut self.vt, DMatrix::zeros(0, 0));
        let mut vt = vt.insert_column(m, 0.0);
        vt.column_mut(m).copy_from(&v_new);
        self.vt = vt;

        let mut h = self.h.clone().insert_row(m, 0.0).insert_column(m, 0.0);
        for c in 0..m {
            h[(m, c)] = h_col[c];
            h[(c, m)] = h_col[c];
        }
        h[(m, m)] = h_nn;
        self.h = h;

        // Bordered inverse of B.
        let c = &h_col / s2;
        let u = &self.binv * &c;
        let fit = &v_new - &self.vt.columns(0, m) * &u;
        let schur = 1.0 + (fit.norm_squared() + s2 * u.norm_squared()) / s2;
        if !(schur > 0.0) {
            return Err(Error::Numerical("swap made I + H / s2 indefinite".into()));
        }
        let mut binv = DMatrix::zeros(m + 1, m + 1);
        let mut top = self.binv.clone();
        top.ger(1.0 / schur, &u, &u, 1.0);
        binv.view_mut((0, 0), (m, m)).copy_from(&top);
        for r in 0..m {
            binv[(r, m)] = -u[r] / schur;
            binv[(m, r)] = -u[r] / schur;
        }
        binv[(m, m)] = 1.0 / schur;
        self.binv = binv;
        self.logdet_b += schur.ln();

        let vy_new = v_new.dot(&self.y);
        self.vy = std::mem::replace(&mut self.vy, DVector::zeros(0)).push(vy_new);
        self.indices.push(j);
        self.locs.push(self.data.inputs()[j]);
        Ok(())
    }
}

fn rotate(a: &mut f64, b: &mut f64, c: f64, s: f64) {
    let (x, y) = (*a, *b);
    *a = c * x + s * y;
    *b = -s * x + c * y;
}

/// Applies the rotation on rows and columns `p`, `q` of a symmetric matrix.
fn rotate_sym(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = m.nrows();
    for k in 0..n {
        let (x, y) = (m[(p, k)], m[(q, k)]);
        m[(p, k)] = c * x + s * y;
        m[(q, k)] = -s * x + c * y;
    }
    for k in 0..n {
        let (x, y) = (m[(k, p)], m[(k, q)]);
        m[(k, p)] = c * x + s * y;
        m[(k, q)] = -s * x + c * y;
    }
}
