//! Moment-based detector threshold and the alarm rule.
//!
//! The threshold is the smallest value certified by one of two closed-form
//! tail bounds for a nonnegative statistic with known raw moments:
//! the Markov family `P[q > α] ≤ Mʲ/αʲ` and the one-sided Cantelli bound
//! `P[q − μ ≥ t] ≤ σ²/(σ² + t²)`.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matops::Matrix;
use crate::model::{NoiseKind, SynthesisWeights, UncertainLinearSystem};
use crate::moments::{build_operator, expected_q, steady_state};
use crate::sim::{self, SimConfig, SimMode};
use crate::synthesis::{Compensator, SolverOptions};

/// Relative slack allowed in the log-convexity check of a moment sequence.
pub const LOG_CONVEXITY_SLACK: f64 = 0.01;

/// Ties between certificates closer than this (relative) report `Combined`.
const TIE_TOLERANCE: f64 = 1e-12;

/// The alarm rule: strictly above the threshold raises an alarm.
#[inline]
pub fn is_alarm(q: f64, alpha: f64) -> bool {
    q > alpha
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Detection {
    pub alarms: Vec<bool>,
    pub alarm_times: Vec<usize>,
}

pub fn detect(q: &[f64], alpha: f64) -> Detection {
    let alarms: Vec<bool> = q.iter().map(|&v| is_alarm(v, alpha)).collect();
    let alarm_times = alarms
        .iter()
        .enumerate()
        .filter_map(|(k, &a)| a.then_some(k))
        .collect();
    Detection { alarms, alarm_times }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    MarkovFamily,
    Cantelli,
    /// Markov and Cantelli certificates agree.
    Combined,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMethod::MarkovFamily => "markov-family",
            ThresholdMethod::Cantelli => "cantelli",
            ThresholdMethod::Combined => "combined",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdReport {
    pub s: usize,
    pub moments: Vec<f64>,
    pub target_rate: f64,
    pub alpha_star: f64,
    /// Tightest certified worst-case tail at `alpha_star`.
    pub bound_at_alpha: f64,
    pub method: ThresholdMethod,
    /// Power of two nearest `M¹`; moments are divided by `scaleʲ` before the
    /// certificates are evaluated, which is exact in floating point.
    pub scale: f64,
}

#[derive(Serialize)]
struct ThresholdJson<'a> {
    s: usize,
    moments: &'a [f64],
    #[serde(rename = "F")]
    target_rate: f64,
    alpha_star: f64,
    bound_at_alpha: f64,
    method: ThresholdMethod,
    scale: f64,
}

/// Rounds up to the next multiple of 1e-6, so a reported threshold is never
/// below the certified one.
pub fn round_threshold(alpha: f64) -> f64 {
    let r = (alpha * 1e6).ceil() / 1e6;
    if r < alpha {
        r + 1e-6
    } else {
        r
    }
}

impl ThresholdReport {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ThresholdJson {
            s: self.s,
            moments: &self.moments,
            target_rate: self.target_rate,
            alpha_star: round_threshold(self.alpha_star),
            bound_at_alpha: self.bound_at_alpha,
            method: self.method,
            scale: self.scale,
        })
        .expect("threshold report serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("threshold report serializes")
    }
}

fn check_moments(moments: &[f64]) -> Result<()> {
    if moments.is_empty() {
        return Err(Error::InvalidInput("at least one moment is required".to_string()));
    }
    for (j, &m) in moments.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::MomentExplosion(format!("moment of order {} is {m}", j + 1)));
        }
        if m <= 0.0 {
            return Err(Error::InvalidInput(format!("moment of order {} must be positive, got {m}", j + 1)));
        }
    }
    Ok(())
}

/// Lyapunov's inequality `(Mʲ)² ≤ Mʲ⁻¹·Mʲ⁺¹` with `M⁰ = 1`, checked on
/// already-normalized moments.
fn check_log_convex(normalized: &[f64]) -> Result<()> {
    let seq: Vec<f64> = std::iter::once(1.0).chain(normalized.iter().copied()).collect();
    for j in 1..seq.len().saturating_sub(1) {
        let lhs = seq[j] * seq[j];
        let rhs = seq[j - 1] * seq[j + 1];
        if lhs > rhs * (1.0 + LOG_CONVEXITY_SLACK) {
            return Err(Error::InconsistentMoments { order: j, lhs, rhs });
        }
    }
    Ok(())
}

/// Markov certificate of order `j` on normalized moments.
fn markov_alpha(m: f64, j: usize, f: f64) -> f64 {
    (m / f).powf(1.0 / j as f64)
}

/// Tightest certified tail at `alpha` (normalized units).
fn certified_tail(normalized: &[f64], alpha: f64) -> f64 {
    let mut best = 1.0f64;
    let mut power = 1.0;
    for &m in normalized {
        power *= alpha;
        best = best.min(m / power);
    }
    if normalized.len() >= 2 {
        let mu = normalized[0];
        let var = (normalized[1] - mu * mu).max(0.0);
        let t = alpha - mu;
        if var == 0.0 && t >= 0.0 {
            best = 0.0;
        } else if t > 0.0 {
            best = best.min(var / (var + t * t));
        }
    }
    best
}

/// Smallest threshold certified by the Markov family and, for `s ≥ 2`, the
/// one-sided Cantelli bound, for raw moments `[M¹ … Mˢ]` and target rate `f`.
pub fn tune_threshold(moments: &[f64], f: f64) -> Result<ThresholdReport> {
    check_moments(moments)?;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::InvalidInput(format!("target rate must lie in (0, 1), got {f}")));
    }
    let scale = moments[0].log2().round().exp2();
    let mut normalized = Vec::with_capacity(moments.len());
    let mut power = 1.0;
    for &m in moments {
        power *= scale;
        normalized.push(m / power);
    }
    if let Some(j) = normalized.iter().position(|m| !m.is_finite() || *m <= 0.0) {
        return Err(Error::MomentExplosion(format!(
            "normalized moment of order {} is not representable",
            j + 1
        )));
    }
    check_log_convex(&normalized)?;

    let markov = normalized
        .iter()
        .enumerate()
        .map(|(i, &m)| markov_alpha(m, i + 1, f))
        .fold(f64::INFINITY, f64::min);
    let cantelli = (normalized.len() >= 2).then(|| {
        let mu = normalized[0];
        let sigma = (normalized[1] - mu * mu).max(0.0).sqrt();
        mu + sigma * ((1.0 - f) / f).sqrt()
    });

    let (alpha, method) = match cantelli {
        Some(c) if (c - markov).abs() <= TIE_TOLERANCE * markov => (markov.min(c), ThresholdMethod::Combined),
        Some(c) if c < markov => (c, ThresholdMethod::Cantelli),
        _ => (markov, ThresholdMethod::MarkovFamily),
    };
    // Each certificate equals f exactly at its own threshold; rounding in the
    // closed forms can push the evaluated bound a few ulps above it.
    let bound_at_alpha = certified_tail(&normalized, alpha).min(f);

    Ok(ThresholdReport {
        s: moments.len(),
        moments: moments.to_vec(),
        target_rate: f,
        alpha_star: alpha * scale,
        bound_at_alpha,
        method,
        scale,
    })
}

/// Settings for [`compare_compensators`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub target_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub stream: u64,
    pub moment_order: usize,
    pub noise_kind: NoiseKind,
    pub mode: SimMode,
    pub true_a: Option<Matrix>,
    pub solver: SolverOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            target_rate: 0.05,
            steps: 1_000_000,
            seed: 0,
            stream: 0,
            moment_order: 4,
            noise_kind: NoiseKind::Laplacian,
            mode: SimMode::SampledNoise,
            true_a: None,
            solver: SolverOptions::default(),
        }
    }
}

/// Outcome of synthesis, analysis, simulation and tuning for one compensator.
/// Fields are `None` where the quantity does not exist (no convergence, or
/// `ρ(H) ≥ 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatorSummary {
    pub compensator: Compensator,
    pub converged: bool,
    pub iterations: usize,
    pub rho_h: Option<f64>,
    pub sigma_r: Option<Matrix>,
    pub expected_q: Option<f64>,
    pub moments: Option<Vec<f64>>,
    pub threshold: Option<ThresholdReport>,
    pub empirical_false_alarm_rate: Option<f64>,
}

impl CompensatorSummary {
    pub fn alpha_star(&self) -> Option<f64> {
        self.threshold.as_ref().map(|t| t.alpha_star)
    }

    /// Both a steady state and a threshold exist.
    pub fn is_defined(&self) -> bool {
        self.threshold.is_some()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "compensator": self.compensator.name(),
            "converged": self.converged,
            "iterations": self.iterations,
            "rho_H": self.rho_h,
            "Sigma_r": self.sigma_r.as_ref().map(matrix_rows),
            "E_q": self.expected_q,
            "moments": self.moments,
            "alpha_star": self.alpha_star().map(round_threshold),
            "threshold": self.threshold.as_ref().map(ThresholdReport::to_json_value),
            "empirical_false_alarm_rate": self.empirical_false_alarm_rate,
        })
    }
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub target_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub moment_order: usize,
    pub noise_kind: NoiseKind,
    pub mode: SimMode,
    pub mlqg: CompensatorSummary,
    pub lqg: CompensatorSummary,
}

impl CompareReport {
    /// MLQG threshold no larger than LQG's; `None` unless both are defined.
    pub fn mlqg_tighter(&self) -> Option<bool> {
        Some(self.mlqg.alpha_star()? <= self.lqg.alpha_star()?)
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::json!({
            "F": self.target_rate,
            "steps": self.steps,
            "seed": self.seed,
            "moments_order": self.moment_order,
            "noise": self.noise_kind.to_string(),
            "mode": self.mode.to_string(),
            "mlqg": self.mlqg.to_json_value(),
            "lqg": self.lqg.to_json_value(),
        });
        serde_json::to_string_pretty(&v).expect("compare report serializes")
    }
}

/// Full pipeline for one compensator. Synthesis and numerical failures are
/// errors; non-convergence and `ρ(H) ≥ 1` yield a summary with empty fields.
pub fn evaluate_compensator(
    compensator: Compensator,
    sys: &UncertainLinearSystem,
    weights: &SynthesisWeights,
    opts: &CompareOptions,
) -> Result<CompensatorSummary> {
    let gains = compensator.synthesize(sys, weights, &opts.solver)?;
    let mut summary = CompensatorSummary {
        compensator,
        converged: gains.converged,
        iterations: gains.iterations,
        rho_h: None,
        sigma_r: None,
        expected_q: None,
        moments: None,
        threshold: None,
        empirical_false_alarm_rate: None,
    };
    if !gains.converged {
        return Ok(summary);
    }
    let op = build_operator(sys, &gains.k, &gains.l)?;
    let ss = match steady_state(&op, sys) {
        Ok(ss) => ss,
        Err(Error::NotMeanSquareCompensated { rho }) => {
            summary.rho_h = Some(rho);
            return Ok(summary);
        }
        Err(e) => return Err(e),
    };
    summary.rho_h = Some(ss.rho_h);
    summary.expected_q = Some(expected_q(&ss, &crate::matops::Vector::zeros(sys.n()), &sys.c_bar)?);

    let cfg = SimConfig {
        steps: opts.steps,
        seed: opts.seed,
        stream: opts.stream,
        noise_kind: opts.noise_kind,
        mode: opts.mode,
        true_a: opts.true_a.clone(),
        anomaly: None,
        alpha: None,
    };
    let q = sim::simulate_q(sys, &gains, &ss.sigma_r, &cfg)?;
    let window = &q[sim::BURN_IN.min(q.len())..];
    let moments = sim::raw_moments(window, opts.moment_order)?;
    let report = tune_threshold(&moments, opts.target_rate)?;
    summary.empirical_false_alarm_rate = Some(sim::exceedance_rate(window, report.alpha_star));
    summary.sigma_r = Some(ss.sigma_r);
    summary.moments = Some(moments);
    summary.threshold = Some(report);
    Ok(summary)
}

/// Runs the detector pipeline for MLQG and LQG on the same random stream.
pub fn compare_compensators(
    sys: &UncertainLinearSystem,
    weights: &SynthesisWeights,
    opts: &CompareOptions,
) -> Result<CompareReport> {
    let (mlqg, lqg) = rayon::join(
        || evaluate_compensator(Compensator::Mlqg, sys, weights, opts),
        || evaluate_compensator(Compensator::Lqg, sys, weights, opts),
    );
    Ok(CompareReport {
        target_rate: opts.target_rate,
        steps: opts.steps,
        seed: opts.seed,
        moment_order: opts.moment_order,
        noise_kind: opts.noise_kind,
        mode: opts.mode,
        mlqg: mlqg?,
        lqg: lqg?,
    })
}
