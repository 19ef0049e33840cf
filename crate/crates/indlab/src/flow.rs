//! Closed-form three-parameter dynamics of the induction head.
//!
//! On orthonormal inputs with the query at the last pair and self-exclusive
//! causal masking, the population loss depends only on (alpha, beta, gamma)
//! and N. With the auxiliary quantities
//!
//! ```text
//! G = e^alpha + 2N - 2      F = 2N - 1
//! s = exp(beta e^alpha / G) r = s + F
//! ```
//!
//! the loss is `gamma^2 (s^2 + F) / r^2 - 2 gamma s / r + 1` and the three
//! partial derivatives have closed forms. This module evaluates them,
//! integrates the gradient flow `d theta / dt = -grad L` from zero
//! initialization, detects threshold crossings (emergence times), fits the
//! emergence-time scaling in N, and compares discrete SGD in the ablated
//! weight space against the flow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BasisMode, DataMode};
use crate::error::{Error, Result};
use crate::matrix::MaskMode;
use crate::model::{batch_grad, batch_losses, WeightSet};
use crate::pseudo::{extract_coeffs, AblationMask, PseudoIndex};
use crate::seeding::stream_seed;

/// Auxiliary quantities shared by the loss and its gradient.
#[derive(Debug, Clone, Copy)]
pub struct ClosedFormAux {
    pub s: f64,
    pub g: f64,
    pub f: f64,
    pub r: f64,
}

pub fn aux(alpha: f64, beta: f64, n: usize) -> ClosedFormAux {
    let nf = n as f64;
    let ea = alpha.exp();
    let g = ea + 2.0 * nf - 2.0;
    let f = 2.0 * nf - 1.0;
    let s = (beta * ea / g).exp();
    ClosedFormAux { s, g, f, r: s + f }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "closed-form dynamics need n >= 2 (the 2N-2 terms degenerate at N=1), got {n}"
        )));
    }
    Ok(())
}

/// Population loss restricted to the three-parameter subspace.
pub fn closed_loss(alpha: f64, beta: f64, gamma: f64, n: usize) -> Result<f64> {
    check_n(n)?;
    let ClosedFormAux { s, f, r, .. } = aux(alpha, beta, n);
    Ok(gamma * gamma * (s * s + f) / (r * r) - 2.0 * gamma * s / r + 1.0)
}

/// Partial derivatives (dL/dalpha, dL/dbeta, dL/dgamma).
pub fn closed_grad(alpha: f64, beta: f64, gamma: f64, n: usize) -> Result<(f64, f64, f64)> {
    check_n(n)?;
    Ok(closed_grad_unchecked(alpha, beta, gamma, n as f64))
}

fn closed_grad_unchecked(alpha: f64, beta: f64, gamma: f64, nf: f64) -> (f64, f64, f64) {
    let ea = alpha.exp();
    let g = ea + 2.0 * nf - 2.0;
    let f = 2.0 * nf - 1.0;
    let s = (beta * ea / g).exp();
    let r = s + f;
    let core = gamma * gamma * (s - 1.0) / (r * r * r) - gamma / (r * r);
    let d_alpha = 4.0 * beta * (nf - 1.0) * f * s * ea / (g * g) * core;
    let d_beta = 2.0 * f * s * ea / g * core;
    let d_gamma = 2.0 * gamma * (s * s + f) / (r * r) - 2.0 * s / r;
    (d_alpha, d_beta, d_gamma)
}

/// Point on the flow.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowState {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FlowSample {
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub n_pairs: usize,
    pub samples: Vec<FlowSample>,
}

impl FlowTrajectory {
    /// Linear interpolation of the flow state at time `t`.
    pub fn value_at(&self, t: f64) -> Option<FlowState> {
        let samples = &self.samples;
        if samples.is_empty() || t < samples[0].t || t > samples[samples.len() - 1].t {
            return None;
        }
        let idx = samples.partition_point(|s| s.t <= t);
        let at = |s: &FlowSample| FlowState { alpha: s.alpha, beta: s.beta, gamma: s.gamma, t };
        if idx == 0 {
            return Some(at(&samples[0]));
        }
        if idx >= samples.len() {
            return Some(at(&samples[samples.len() - 1]));
        }
        let (lo, hi) = (&samples[idx - 1], &samples[idx]);
        let w = if hi.t > lo.t {
            (t - lo.t) / (hi.t - lo.t)
        } else {
            0.0
        };
        Some(FlowState {
            alpha: lo.alpha + w * (hi.alpha - lo.alpha),
            beta: lo.beta + w * (hi.beta - lo.beta),
            gamma: lo.gamma + w * (hi.gamma - lo.gamma),
            t,
        })
    }
}

/// First-crossing times for one N and threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergenceRecord {
    #[serde(rename = "N")]
    pub n_pairs: usize,
    pub threshold: f64,
    #[serde(rename = "T_alpha")]
    pub t_alpha: f64,
    #[serde(rename = "T_beta")]
    pub t_beta: f64,
    #[serde(rename = "T_gamma")]
    pub t_gamma: f64,
    pub t_icl: f64,
    pub ordering_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorKind {
    RungeKutta4,
    Heun,
}

/// Step-size policy: each step is sized so that no parameter moves by more
/// than `max_param_step`. Gradients scale like 1/N^2, so steps grow with N
/// and the step count per trajectory stays roughly constant.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepControl {
    pub max_param_step: f64,
    pub max_dt: f64,
    pub integrator: IntegratorKind,
}

impl StepControl {
    pub fn default_for(n: usize) -> Self {
        StepControl {
            max_param_step: 1e-3,
            max_dt: 0.1 * (n * n) as f64,
            integrator: IntegratorKind::RungeKutta4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_param_step.is_finite() && self.max_param_step > 0.0) {
            return Err(Error::Invalid("max_param_step must be positive".into()));
        }
        if !(self.max_dt.is_finite() && self.max_dt > 0.0) {
            return Err(Error::Invalid("max_dt must be positive".into()));
        }
        Ok(())
    }
}

/// Default integration horizon. Emergence is Theta(N^2), so 100 N^2 leaves
/// a wide margin.
pub fn default_t_max(n: usize) -> f64 {
    100.0 * (n * n) as f64
}

fn rhs(y: [f64; 3], nf: f64) -> [f64; 3] {
    let (da, db, dg) = closed_grad_unchecked(y[0], y[1], y[2], nf);
    [-da, -db, -dg]
}

fn advance(y: [f64; 3], h: f64, nf: f64, kind: IntegratorKind) -> [f64; 3] {
    let add =
        |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
    match kind {
        IntegratorKind::RungeKutta4 => {
            let k1 = rhs(y, nf);
            let k2 = rhs(add(y, k1, h / 2.0), nf);
            let k3 = rhs(add(y, k2, h / 2.0), nf);
            let k4 = rhs(add(y, k3, h), nf);
            [
                y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                y[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            ]
        }
        IntegratorKind::Heun => {
            let k1 = rhs(y, nf);
            let k2 = rhs(add(y, k1, h), nf);
            [
                y[0] + h / 2.0 * (k1[0] + k2[0]),
                y[1] + h / 2.0 * (k1[1] + k2[1]),
                y[2] + h / 2.0 * (k1[2] + k2[2]),
            ]
        }
    }
}

/// Integrate the gradient flow from (0, 0, 0) until all three parameters
/// have crossed `threshold`. Crossing times are resolved by linear
/// interpolation inside the crossing step. Fails if `t_max` is reached
/// before the last crossing or the state stops being finite.
pub fn integrate_flow(
    n: usize,
    threshold: f64,
    ctrl: &StepControl,
    t_max: f64,
) -> Result<(FlowTrajectory, EmergenceRecord)> {
    check_n(n)?;
    ctrl.validate()?;
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Invalid("threshold must be positive".into()));
    }
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::Invalid("t_max must be positive".into()));
    }
    let nf = n as f64;
    let mut y = [0.0f64; 3];
    let mut t = 0.0;
    let mut crossings: [Option<f64>; 3] = [None; 3];
    let mut samples = vec![FlowSample {
        t,
        alpha: y[0],
        beta: y[1],
        gamma: y[2],
        loss: closed_loss(0.0, 0.0, 0.0, n)?,
    }];

    while crossings.iter().any(|c| c.is_none()) {
        if t >= t_max {
            return Err(Error::Numerical(format!(
                "flow horizon exhausted at t_max={t_max} before all parameters crossed {threshold} (N={n})"
            )));
        }
        let grad = rhs(y, nf);
        let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut h = if gmax > 0.0 {
            (ctrl.max_param_step / gmax).min(ctrl.max_dt)
        } else {
            ctrl.max_dt
        };
        h = h.min(t_max - t);
        let next = advance(y, h, nf, ctrl.integrator);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite flow state near t={t} (N={n})"
            )));
        }
        for k in 0..3 {
            if crossings[k].is_none() && y[k] < threshold && next[k] >= threshold {
                let frac = (threshold - y[k]) / (next[k] - y[k]);
                crossings[k] = Some(t + frac * h);
            }
        }
        t += h;
        y = next;
        samples.push(FlowSample {
            t,
            alpha: y[0],
            beta: y[1],
            gamma: y[2],
            loss: closed_loss(y[0], y[1], y[2], n)?,
        });
    }

    let t_alpha = crossings[0].unwrap();
    let t_beta = crossings[1].unwrap();
    let t_gamma = crossings[2].unwrap();
    let record = EmergenceRecord {
        n_pairs: n,
        threshold,
        t_alpha,
        t_beta,
        t_gamma,
        t_icl: t_alpha.max(t_beta).max(t_gamma),
        ordering_ok: t_gamma < t_beta && t_beta < t_alpha,
    };
    Ok((
        FlowTrajectory {
            n_pairs: n,
            samples,
        },
        record,
    ))
}

/// Least-squares slope of y against x.
pub fn lsq_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

/// Emergence-time scaling over a list of context lengths, with log-log
/// least-squares slopes for each emergence time.
#[derive(Debug, Clone, Serialize)]
pub struct ScanSummary {
    pub threshold: f64,
    pub n_values: Vec<usize>,
    pub slope_t_gamma: f64,
    pub slope_t_beta: f64,
    pub slope_t_alpha: f64,
    pub slope_t_icl: f64,
    pub records: Vec<EmergenceRecord>,
}

pub fn scaling_scan(n_list: &[usize], threshold: f64, ctrl: &StepControl) -> Result<ScanSummary> {
    if n_list.len() < 4 {
        return Err(Error::Invalid(
            "scaling scan needs at least 4 context lengths".into(),
        ));
    }
    if !n_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Invalid(
            "context lengths must be strictly increasing".into(),
        ));
    }
    if *n_list.last().unwrap() < 16 {
        return Err(Error::Invalid(
            "largest context length must be >= 16".into(),
        ));
    }
    let records: Vec<Result<EmergenceRecord>> = n_list
        .par_iter()
        .map(|&n| integrate_flow(n, threshold, ctrl, default_t_max(n)).map(|(_, rec)| rec))
        .collect();
    let records: Result<Vec<EmergenceRecord>> = records.into_iter().collect();
    let records = records?;
    let log_n: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let slope_of = |get: fn(&EmergenceRecord) -> f64| -> f64 {
        let log_t: Vec<f64> = records.iter().map(|r| get(r).ln()).collect();
        lsq_slope(&log_n, &log_t)
    };
    Ok(ScanSummary {
        threshold,
        n_values: n_list.to_vec(),
        slope_t_gamma: slope_of(|r| r.t_gamma),
        slope_t_beta: slope_of(|r| r.t_beta),
        slope_t_alpha: slope_of(|r| r.t_alpha),
        slope_t_icl: slope_of(|r| r.t_icl),
        records,
    })
}

/// Configuration for the discrete-vs-continuous comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdVsFlowConfig {
    pub n_pairs: usize,
    pub dim: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Safety bound on the number of SGD steps.
    pub max_steps: usize,
    pub step_control: StepControl,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonPoint {
    pub t: f64,
    pub sgd: [f64; 3],
    pub flow: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct SgdVsFlowReport {
    pub n_pairs: usize,
    pub dim: usize,
    pub learning_rate: f64,
    /// Flow time advanced per SGD step: lr / D^2. One factor of D comes from
    /// the trainer's per-dimension loss normalization, the other from the
    /// projection: the pseudo-coefficient of a weight-space gradient is the
    /// directional derivative divided by D (each basis matrix has squared
    /// Frobenius norm D).
    pub flow_time_per_step: f64,
    pub threshold: f64,
    pub flow: EmergenceRecord,
    pub sgd_t_alpha: f64,
    pub sgd_t_beta: f64,
    pub sgd_t_gamma: f64,
    /// sgd time / flow time, per parameter.
    pub ratio_alpha: f64,
    pub ratio_beta: f64,
    pub ratio_gamma: f64,
    pub ordering_match: bool,
    /// Largest single-step change of any of the three coefficients.
    pub max_param_step_change: f64,
    /// Max over sampled points and parameters of
    /// |sgd - flow| / max(|flow|, 0.05).
    pub max_rel_deviation: f64,
    /// Variance of per-sample losses in the first batch (must vanish on
    /// orthonormal inputs).
    pub batch_loss_variance: f64,
    pub table: Vec<ComparisonPoint>,
}

/// Train the ablated three-parameter model by SGD on orthonormal data
/// (q = N, exclusive mask) and compare the discrete trajectory against the
/// gradient flow.
pub fn sgd_vs_flow(cfg: &SgdVsFlowConfig) -> Result<SgdVsFlowReport> {
    check_n(cfg.n_pairs)?;
    if cfg.dim < 2 * cfg.n_pairs {
        return Err(Error::Invalid(format!(
            "orthonormal data needs dim >= 2 n_pairs, got dim={} n={}",
            cfg.dim, cfg.n_pairs
        )));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::Invalid("learning rate must be positive".into()));
    }
    let (flow_traj, flow_rec) = integrate_flow(
        cfg.n_pairs,
        cfg.threshold,
        &cfg.step_control,
        default_t_max(cfg.n_pairs),
    )?;

    let dt = cfg.learning_rate / (cfg.dim * cfg.dim) as f64;
    let mode = MaskMode::CausalExclusiveSelf;
    let data = DataMode::Orthonormal {
        basis: BasisMode::Canonical,
    };
    let mask = AblationMask::new(&PseudoIndex::induction_head())?;

    let mut w = WeightSet::zeros(cfg.dim)?;
    let mut series: Vec<[f64; 3]> = Vec::new();
    let mut batch_loss_variance = 0.0;
    let mut crossed: [Option<f64>; 3] = [None; 3];
    let mut prev = [0.0f64; 3];
    series.push(prev);
    let mut step = 0usize;
    let mut max_param_step_change = 0.0f64;
    while crossed.iter().any(|c| c.is_none()) {
        if step >= cfg.max_steps {
            return Err(Error::Numerical(format!(
                "sgd_vs_flow: not all parameters crossed {} within {} steps",
                cfg.threshold, cfg.max_steps
            )));
        }
        let batch = crate::data::generate(
            &data,
            cfg.n_pairs,
            cfg.dim,
            cfg.batch,
            stream_seed(cfg.seed, step as u64),
        )?;
        if step == 0 {
            let losses = batch_losses(&batch, &w, mode)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            batch_loss_variance =
                losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / losses.len() as f64;
        }
        let (loss, grads) = batch_grad(&batch, &w, mode)?;
        if !loss.is_finite() || loss > crate::train::DIVERGENCE_LOSS {
            return Err(Error::Numerical(format!(
                "sgd_vs_flow diverged at step {step}"
            )));
        }
        let masked = mask.apply(&grads)?;
        w.step(&masked, cfg.learning_rate / cfg.dim as f64);
        let coeffs = extract_coeffs(&w.w1, &w.w2, &w.w3)?;
        let cur = [coeffs.alpha[2], coeffs.beta[1], coeffs.gamma[2]];
        for k in 0..3 {
            max_param_step_change = max_param_step_change.max((cur[k] - prev[k]).abs());
            if crossed[k].is_none() && prev[k] < cfg.threshold && cur[k] >= cfg.threshold {
                let frac = (cfg.threshold - prev[k]) / (cur[k] - prev[k]);
                crossed[k] = Some((step as f64 + frac) * dt);
            }
        }
        series.push(cur);
        prev = cur;
        step += 1;
    }

    // Compare on a thinned grid of shared times.
    let stride = (series.len() / 200).max(1);
    let mut table = Vec::new();
    let mut max_rel_deviation: f64 = 0.0;
    for (k, sgd) in series.iter().enumerate().step_by(stride) {
        let t = k as f64 * dt;
        if let Some(state) = flow_traj.value_at(t) {
            let flow = [state.alpha, state.beta, state.gamma];
            for j in 0..3 {
                let dev = (sgd[j] - flow[j]).abs() / flow[j].abs().max(0.05);
                max_rel_deviation = max_rel_deviation.max(dev);
            }
            table.push(ComparisonPoint { t, sgd: *sgd, flow });
        }
    }

    let sgd_t_alpha = crossed[0].unwrap();
    let sgd_t_beta = crossed[1].unwrap();
    let sgd_t_gamma = crossed[2].unwrap();
    Ok(SgdVsFlowReport {
        n_pairs: cfg.n_pairs,
        dim: cfg.dim,
        learning_rate: cfg.learning_rate,
        flow_time_per_step: dt,
        threshold: cfg.threshold,
        sgd_t_alpha,
        sgd_t_beta,
        sgd_t_gamma,
        ratio_alpha: sgd_t_alpha / flow_rec.t_alpha,
        ratio_beta: sgd_t_beta / flow_rec.t_beta,
        ratio_gamma: sgd_t_gamma / flow_rec.t_gamma,
        ordering_match: sgd_t_gamma < sgd_t_beta && sgd_t_beta < sgd_t_alpha,
        max_param_step_change,
        max_rel_deviation,
        batch_loss_variance,
        table,
        flow: flow_rec,
    })
}
