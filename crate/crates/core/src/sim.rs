//! Seeded Monte-Carlo simulation of the closed loop.
//!
//! Randomness comes from ChaCha8 seeded with `seed`; independent replicates
//! use distinct ChaCha stream ids (`stream`, `stream + 1`, ...), so every
//! replicate is reproducible on its own regardless of how replicates are
//! scheduled across threads. Within one trace the draw order per step is
//! fixed: A-direction noises, B-direction noises, C-direction noises, process
//! noise, sensor noise.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::detector;
use crate::error::{Error, Result};
use crate::matops::{psd_factor, Matrix, Vector};
use crate::model::{NoiseKind, UncertainLinearSystem};
use crate::synthesis::CompensatorGains;

/// Leading steps excluded from every empirical statistic.
pub const BURN_IN: usize = 1000;

/// Zero-mean vector noise with a prescribed covariance.
///
/// Gaussian draws are `F·g` with `g` standard normal and `F·Fᵀ = Σ`.
/// Laplacian draws are the scale mixture `√W·F·g` with `W ~ Exp(1)`, which
/// keeps the covariance at `Σ` but has heavier tails.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    pub kind: NoiseKind,
    pub covariance: Matrix,
    pub factor: Matrix,
    zero: bool,
    scratch: Vector,
}

impl NoiseSampler {
    pub fn new(kind: NoiseKind, covariance: Matrix) -> Result<Self> {
        let factor = psd_factor(&covariance, "noise covariance")?;
        let zero = covariance.iter().all(|&x| x == 0.0);
        let dim = covariance.nrows();
        Ok(Self {
            kind,
            covariance,
            factor,
            zero,
            scratch: Vector::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Writes one draw into `out`. Always consumes the same number of random
    /// numbers for a given dimension and kind, even for a zero covariance.
    pub fn sample_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vector) {
        let scale = match self.kind {
            NoiseKind::Gaussian => 1.0,
            NoiseKind::Laplacian => {
                let w: f64 = rng.sample(Exp1);
                w.sqrt()
            }
        };
        for g in self.scratch.iter_mut() {
            *g = rng.sample(StandardNormal);
        }
        if self.zero {
            out.fill(0.0);
        } else {
            out.gemv(scale, &self.factor, &self.scratch, 0.0);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vector {
        let mut out = Vector::zeros(self.dim());
        self.sample_into(rng, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimMode {
    /// Fresh multiplicative noises every step; the model the analysis assumes.
    #[default]
    SampledNoise,
    /// `A` is the constant true-dynamics matrix; B and C noises as configured.
    FixedMismatch,
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimMode::SampledNoise => f.write_str("sampled"),
            SimMode::FixedMismatch => f.write_str("fixed-mismatch"),
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" | "sampled-noise" => Ok(SimMode::SampledNoise),
            "fixed-mismatch" => Ok(SimMode::FixedMismatch),
            other => Err(Error::InvalidInput(format!("unknown simulation mode `{other}`"))),
        }
    }
}

/// Additive sensor bias on one output channel from step `start` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    pub start: usize,
    pub channel: usize,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub stream: u64,
    pub noise_kind: NoiseKind,
    pub mode: SimMode,
    pub true_a: Option<Matrix>,
    pub anomaly: Option<AnomalySpec>,
    /// Threshold used to fill the per-step alarm flags; no alarms when unset.
    pub alpha: Option<f64>,
}

impl SimConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            stream: 0,
            noise_kind: NoiseKind::Laplacian,
            mode: SimMode::SampledNoise,
            true_a: None,
            anomaly: None,
            alpha: None,
        }
    }
}

/// One simulated step, borrowed from the simulator's buffers.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub k: usize,
    pub x: &'a [f64],
    pub xhat: &'a [f64],
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub r: &'a [f64],
    pub q: f64,
    pub alarm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetadata {
    pub seed: u64,
    pub stream: u64,
    pub steps: usize,
    pub noise_kind: NoiseKind,
    pub mode: SimMode,
    pub anomaly: Option<AnomalySpec>,
}

/// Column-stored simulation trace; per-step vectors are contiguous slices of
/// the flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub alarm: Vec<bool>,
    pub metadata: TraceMetadata,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn xhat_at(&self, k: usize) -> &[f64] {
        &self.xhat[k * self.n..(k + 1) * self.n]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.p..(k + 1) * self.p]
    }

    pub fn r_at(&self, k: usize) -> &[f64] {
        &self.r[k * self.p..(k + 1) * self.p]
    }

    pub fn u_at(&self, k: usize) -> &[f64] {
        &self.u[k * self.m..(k + 1) * self.m]
    }

    /// Step indices used for statistics: everything after the burn-in.
    pub fn window(&self) -> std::ops::Range<usize> {
        BURN_IN.min(self.len())..self.len()
    }

    /// End (exclusive) of the anomaly-free part of the trace.
    pub fn anomaly_free_end(&self) -> usize {
        self.metadata
            .anomaly
            .map_or(self.len(), |a| a.start.min(self.len()))
    }

    /// CSV with header `k,x1..xn,xhat1..xhatn,u1..um,y1..yp,r1..rp,q,alarm`.
    /// Floats use Rust's shortest round-trip formatting; alarm is 0 or 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["k".to_string()];
        for (name, count) in [("x", self.n), ("xhat", self.n), ("u", self.m), ("y", self.p), ("r", self.p)] {
            header.extend((1..=count).map(|i| format!("{name}{i}")));
        }
        header.push("q".to_string());
        header.push("alarm".to_string());
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for k in 0..self.len() {
            line.clear();
            line.push_str(&k.to_string());
            for v in self
                .x_at(k)
                .iter()
                .chain(self.xhat_at(k))
                .chain(self.u_at(k))
                .chain(self.y_at(k))
                .chain(self.r_at(k))
                .chain(std::iter::once(&self.q[k]))
            {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push_str(if self.alarm[k] { ",1" } else { ",0" });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Checked inputs and preallocated buffers for one trace.
struct Simulator<'a> {
    sys: &'a UncertainLinearSystem,
    k_gain: &'a Matrix,
    l_gain: &'a Matrix,
    sigma_r_factor: Matrix,
    a_fixed: Option<&'a Matrix>,
    cfg: &'a SimConfig,
}

impl<'a> Simulator<'a> {
    fn new(
        sys: &'a UncertainLinearSystem,
        gains: &'a CompensatorGains,
        sigma_r: &Matrix,
        cfg: &'a SimConfig,
    ) -> Result<Self> {
        if !gains.converged {
            return Err(Error::InvalidInput(
                "simulation requires converged compensator gains".to_string(),
            ));
        }
        let (n, m, p) = (sys.n(), sys.m(), sys.p());
        if gains.k.shape() != (m, n) || gains.l.shape() != (n, p) || sigma_r.shape() != (p, p) {
            return Err(Error::Dimension(
                "gains or Sigma_r do not match the system dimensions".to_string(),
            ));
        }
        let sigma_r_factor = sigma_r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPsd("Sigma_r (must be positive definite)".to_string()))?
            .l();
        let a_fixed = match cfg.mode {
            SimMode::SampledNoise => None,
            SimMode::FixedMismatch => {
                let a = cfg.true_a.as_ref().ok_or(Error::MissingTrueA)?;
                if a.shape() != (n, n) {
                    return Err(Error::Dimension(format!(
                        "true_A is {}x{}, expected {n}x{n}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
                Some(a)
            }
        };
        if let Some(an) = cfg.anomaly {
            if an.channel >= p {
                return Err(Error::InvalidInput(format!(
                    "anomaly channel {} out of range for {p} outputs",
                    an.channel
                )));
            }
        }
        if let Some(alpha) = cfg.alpha {
            if alpha.is_nan() || alpha <= 0.0 {
                return Err(Error::InvalidInput(format!("alarm threshold {alpha} must be positive")));
            }
        }
        Ok(Self {
            sys,
            k_gain: &gains.k,
            l_gain: &gains.l,
            sigma_r_factor,
            a_fixed,
            cfg,
        })
    }

    fn run<F: FnMut(&StepRecord<'_>)>(&self, mut visit: F) -> Result<()> {
        let sys = self.sys;
        let cfg = self.cfg;
        let (n, m, p) = (sys.n(), sys.m(), sys.p());

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.stream);
        let mut w_sampler = NoiseSampler::new(cfg.noise_kind, sys.sigma_w.clone())?;
        let mut v_sampler = NoiseSampler::new(cfg.noise_kind, sys.sigma_v.clone())?;
        let mut x0_sampler = NoiseSampler::new(cfg.noise_kind, sys.sigma_x0.clone())?;

        let a_std: Vec<f64> = sys.a_dirs.iter().map(|d| d.variance.sqrt()).collect();
        let b_std: Vec<f64> = sys.b_dirs.iter().map(|d| d.variance.sqrt()).collect();
        let c_std: Vec<f64> = sys.c_dirs.iter().map(|d| d.variance.sqrt()).collect();

        let mut a_k = sys.a_bar.clone();
        let mut b_k = sys.b_bar.clone();
        let mut c_k = sys.c_bar.clone();
        let mut x = Vector::zeros(n);
        x0_sampler.sample_into(&mut rng, &mut x);
        let mut xhat = Vector::zeros(n);
        let mut x_next = Vector::zeros(n);
        let mut xhat_next = Vector::zeros(n);
        let mut u = Vector::zeros(m);
        let mut y = Vector::zeros(p);
        let mut r = Vector::zeros(p);
        let mut whitened = Vector::zeros(p);
        let mut w = Vector::zeros(n);
        let mut v = Vector::zeros(p);

        for k in 0..cfg.steps {
            match self.a_fixed {
                Some(a) => a_k.copy_from(a),
                None => {
                    a_k.copy_from(&sys.a_bar);
                    for (d, s) in sys.a_dirs.iter().zip(&a_std) {
                        let g: f64 = rng.sample(StandardNormal);
                        a_k.zip_apply(&d.pattern, |acc, e| *acc += g * s * e);
                    }
                }
            }
            b_k.copy_from(&sys.b_bar);
            for (d, s) in sys.b_dirs.iter().zip(&b_std) {
                let g: f64 = rng.sample(StandardNormal);
                b_k.zip_apply(&d.pattern, |acc, e| *acc += g * s * e);
            }
            c_k.copy_from(&sys.c_bar);
            for (d, s) in sys.c_dirs.iter().zip(&c_std) {
                let g: f64 = rng.sample(StandardNormal);
                c_k.zip_apply(&d.pattern, |acc, e| *acc += g * s * e);
            }
            w_sampler.sample_into(&mut rng, &mut w);
            v_sampler.sample_into(&mut rng, &mut v);

            u.gemv(1.0, self.k_gain, &xhat, 0.0);
            y.gemv(1.0, &c_k, &x, 0.0);
            y += &v;
            if let Some(an) = cfg.anomaly {
                if k >= an.start {
                    y[an.channel] += an.bias;
                }
            }
            r.copy_from(&y);
            r.gemv(-1.0, &sys.c_bar, &xhat, 1.0);
            whitened.copy_from(&r);
            self.sigma_r_factor.solve_lower_triangular_mut(&mut whitened);
            let q = whitened.norm_squared();
            let alarm = cfg.alpha.is_some_and(|a| detector::is_alarm(q, a));

            visit(&StepRecord {
                k,
                x: x.as_slice(),
                xhat: xhat.as_slice(),
                u: u.as_slice(),
                y: y.as_slice(),
                r: r.as_slice(),
                q,
                alarm,
            });

            x_next.gemv(1.0, &a_k, &x, 0.0);
            x_next.gemv(1.0, &b_k, &u, 1.0);
            x_next += &w;
            xhat_next.gemv(1.0, &sys.a_bar, &xhat, 0.0);
            xhat_next.gemv(1.0, &sys.b_bar, &u, 1.0);
            xhat_next.gemv(1.0, self.l_gain, &r, 1.0);
            std::mem::swap(&mut x, &mut x_next);
            std::mem::swap(&mut xhat, &mut xhat_next);
        }
        Ok(())
    }
}

/// Streams every step of a simulation to `visit` without storing the trace.
pub fn simulate_with<F: FnMut(&StepRecord<'_>)>(
    sys: &UncertainLinearSystem,
    gains: &CompensatorGains,
    sigma_r: &Matrix,
    cfg: &SimConfig,
    visit: F,
) -> Result<()> {
    Simulator::new(sys, gains, sigma_r, cfg)?.run(visit)
}

/// Simulates the closed loop under the compensator `gains`, normalizing the
/// residual statistic by `sigma_r`.
pub fn simulate(
    sys: &UncertainLinearSystem,
    gains: &CompensatorGains,
    sigma_r: &Matrix,
    cfg: &SimConfig,
) -> Result<SimulationTrace> {
    let (n, m, p) = (sys.n(), sys.m(), sys.p());
    let t = cfg.steps;
    let mut trace = SimulationTrace {
        n,
        m,
        p,
        x: Vec::with_capacity(t * n),
        xhat: Vec::with_capacity(t * n),
        u: Vec::with_capacity(t * m),
        y: Vec::with_capacity(t * p),
        r: Vec::with_capacity(t * p),
        q: Vec::with_capacity(t),
        alarm: Vec::with_capacity(t),
        metadata: TraceMetadata {
            seed: cfg.seed,
            stream: cfg.stream,
            steps: t,
            noise_kind: cfg.noise_kind,
            mode: cfg.mode,
            anomaly: cfg.anomaly,
        },
    };
    simulate_with(sys, gains, sigma_r, cfg, |s| {
        trace.x.extend_from_slice(s.x);
        trace.xhat.extend_from_slice(s.xhat);
        trace.u.extend_from_slice(s.u);
        trace.y.extend_from_slice(s.y);
        trace.r.extend_from_slice(s.r);
        trace.q.push(s.q);
        trace.alarm.push(s.alarm);
    })?;
    Ok(trace)
}

/// Only the `q` series of a simulation.
pub fn simulate_q(
    sys: &UncertainLinearSystem,
    gains: &CompensatorGains,
    sigma_r: &Matrix,
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let mut q = Vec::with_capacity(cfg.steps);
    simulate_with(sys, gains, sigma_r, cfg, |s| q.push(s.q))?;
    Ok(q)
}

/// Independent replicate `q` series on streams `cfg.stream + i`, run in
/// parallel; the result order is the replicate order.
pub fn simulate_q_replicates(
    sys: &UncertainLinearSystem,
    gains: &CompensatorGains,
    sigma_r: &Matrix,
    cfg: &SimConfig,
    replicates: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.stream = cfg.stream + i;
            simulate_q(sys, gains, sigma_r, &c)
        })
        .collect()
}

/// `[M¹ … Mˢ]` with `Mʲ = mean(qʲ)`.
pub fn raw_moments(q: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::InvalidInput("moment order must be at least 1".to_string()));
    }
    if q.is_empty() {
        return Err(Error::InvalidInput("cannot take moments of an empty series".to_string()));
    }
    let mut sums = vec![0.0; s];
    for &v in q {
        let mut power = 1.0;
        for acc in sums.iter_mut() {
            power *= v;
            *acc += power;
        }
    }
    let len = q.len() as f64;
    let moments: Vec<f64> = sums.into_iter().map(|x| x / len).collect();
    if let Some(j) = moments.iter().position(|m| !m.is_finite()) {
        return Err(Error::MomentExplosion(format!("empirical moment of order {} is not finite", j + 1)));
    }
    Ok(moments)
}

/// Raw moments of `q` over the post-burn-in window.
pub fn empirical_moments(trace: &SimulationTrace, s: usize) -> Result<Vec<f64>> {
    let end = trace.anomaly_free_end();
    let start = BURN_IN.min(end);
    raw_moments(&trace.q[start..end], s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    /// Fraction of anomaly-free window steps with `q > α`.
    pub false_alarm_rate: f64,
    /// Every step of the trace with `q > α`.
    pub alarm_times: Vec<usize>,
    pub mean_q: f64,
    /// Raw second moment `mean(r rᵀ)` over the anomaly-free window.
    pub var_r: Matrix,
}

/// Fraction of `q` strictly above `alpha`.
pub fn exceedance_rate(q: &[f64], alpha: f64) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().filter(|&&v| detector::is_alarm(v, alpha)).count() as f64 / q.len() as f64
}

pub fn empirical_stats(trace: &SimulationTrace, alpha: f64) -> Result<EmpiricalStats> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InvalidInput(format!("threshold {alpha} must be positive")));
    }
    let end = trace.anomaly_free_end();
    let start = BURN_IN.min(end);
    let clean = &trace.q[start..end];
    let p = trace.p;
    let mut var_r = Matrix::zeros(p, p);
    for k in start..end {
        let r = Vector::from_column_slice(trace.r_at(k));
        var_r += &r * r.transpose();
    }
    let count = (end - start).max(1) as f64;
    Ok(EmpiricalStats {
        false_alarm_rate: exceedance_rate(clean, alpha),
        alarm_times: detector::detect(&trace.q, alpha).alarm_times,
        mean_q: clean.iter().sum::<f64>() / count,
        var_r: var_r / count,
    })
}

/// Window averages of `x xᵀ`, `x x̂ᵀ`, `x̂ xᵀ`, `x̂ x̂ᵀ`, the empirical
/// counterparts of the four stacked second-moment blocks.
pub fn empirical_state_moments(trace: &SimulationTrace) -> [Matrix; 4] {
    let n = trace.n;
    let mut out = [Matrix::zeros(n, n), Matrix::zeros(n, n), Matrix::zeros(n, n), Matrix::zeros(n, n)];
    let range = trace.window();
    let count = range.len().max(1) as f64;
    for k in range {
        let x = Vector::from_column_slice(trace.x_at(k));
        let xh = Vector::from_column_slice(trace.xhat_at(k));
        out[0] += &x * x.transpose();
        out[1] += &x * xh.transpose();
        out[2] += &xh * x.transpose();
        out[3] += &xh * xh.transpose();
    }
    for m in out.iter_mut() {
        *m /= count;
    }
    out
}
