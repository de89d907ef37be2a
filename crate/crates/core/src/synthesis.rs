//! Joint controller/estimator synthesis for multiplicative-noise LQG.
//!
//! The separation principle does not hold under multiplicative noise, so the
//! control gain `K` and the estimator gain `L` come from four coupled Riccati
//! equations in `P1..P4`:
//!
//! ```text
//! P1 = Q + ĀᵀP1Ā + Σ σ²_a 𝒜ᵀ(P1 + P2)𝒜 + Σ σ²_c 𝒞ᵀLᵀP2L𝒞 − KᵀK_αK
//! P2 = (Ā − LC̄)ᵀP2(Ā − LC̄) + KᵀK_αK
//! P3 = Σ_w + ĀP3Āᵀ + Σ σ²_a 𝒜(P3 + P4)𝒜ᵀ + Σ σ²_b ℬKP4Kᵀℬᵀ − LL_αLᵀ
//! P4 = (Ā + B̄K)P4(Ā + B̄K)ᵀ + LL_αLᵀ
//!
//! K_α = R + B̄ᵀP1B̄ + Σ σ²_b ℬᵀ(P1 + P2)ℬ
//! L_α = Σ_v + C̄P3C̄ᵀ + Σ σ²_c 𝒞(P3 + P4)𝒞ᵀ
//! K = −K_α⁻¹B̄ᵀP1Ā,   L = ĀP3C̄ᵀL_α⁻¹
//! ```
//!
//! solved by value iteration. Non-convergence is reported in the returned
//! [`CompensatorGains`], not as an error: it is how loss of mean-square
//! compensatability shows up.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matops::{max_abs, solve_matrix, symmetrize, Matrix};
use crate::model::{validate_system, validate_weights, SynthesisWeights, UncertainLinearSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest elementwise change of any `P_i`
    /// over one sweep.
    pub tol: f64,
    pub max_iters: usize,
    /// Any `|P_i|` entry above this declares divergence.
    pub divergence_norm: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 100_000,
            divergence_norm: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompensatorGains {
    #[serde(serialize_with = "crate::serde_matrix")]
    pub k: Matrix,
    #[serde(serialize_with = "crate::serde_matrix")]
    pub l: Matrix,
    #[serde(serialize_with = "crate::serde_matrix")]
    pub p1: Matrix,
    #[serde(serialize_with = "crate::serde_matrix")]
    pub p2: Matrix,
    #[serde(serialize_with = "crate::serde_matrix")]
    pub p3: Matrix,
    #[serde(serialize_with = "crate::serde_matrix")]
    pub p4: Matrix,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// `P1..P4` of one iterate.
#[derive(Debug, Clone)]
struct RiccatiState {
    p1: Matrix,
    p2: Matrix,
    p3: Matrix,
    p4: Matrix,
}

/// Gains and their denominators derived from a Riccati state.
struct GainSet {
    k: Matrix,
    l: Matrix,
    k_alpha: Matrix,
    l_alpha: Matrix,
}

fn gains_from(sys: &UncertainLinearSystem, w: &SynthesisWeights, s: &RiccatiState) -> Result<GainSet> {
    let (a, b, c) = (&sys.a_bar, &sys.b_bar, &sys.c_bar);
    let p12 = &s.p1 + &s.p2;
    let p34 = &s.p3 + &s.p4;

    let mut k_alpha = &w.r + b.transpose() * &s.p1 * b;
    for d in &sys.b_dirs {
        k_alpha += d.pattern.transpose() * &p12 * &d.pattern * d.variance;
    }
    let mut l_alpha = &sys.sigma_v + c * &s.p3 * c.transpose();
    for d in &sys.c_dirs {
        l_alpha += &d.pattern * &p34 * d.pattern.transpose() * d.variance;
    }
    let k_alpha = symmetrize(&k_alpha);
    let l_alpha = symmetrize(&l_alpha);

    let k = -solve_matrix(&k_alpha, &(b.transpose() * &s.p1 * a), "control gain denominator K_alpha")?;
    // L = Ā P3 C̄ᵀ L_α⁻¹, i.e. Lᵀ = L_α⁻¹ C̄ P3 Āᵀ with L_α symmetric.
    let l = solve_matrix(&l_alpha, &(c * &s.p3 * a.transpose()), "estimator gain denominator L_alpha")?
        .transpose();
    Ok(GainSet {
        k,
        l,
        k_alpha,
        l_alpha,
    })
}

/// One application of the four Riccati right-hand sides with the gains held
/// fixed.
fn riccati_update(
    sys: &UncertainLinearSystem,
    w: &SynthesisWeights,
    s: &RiccatiState,
    g: &GainSet,
) -> RiccatiState {
    let (a, b, c) = (&sys.a_bar, &sys.b_bar, &sys.c_bar);
    let k_term = g.k.transpose() * &g.k_alpha * &g.k;
    let l_term = &g.l * &g.l_alpha * g.l.transpose();

    let mut p1 = &w.q + a.transpose() * &s.p1 * a - &k_term;
    let p12 = &s.p1 + &s.p2;
    for d in &sys.a_dirs {
        p1 += d.pattern.transpose() * &p12 * &d.pattern * d.variance;
    }
    let lt_p2_l = g.l.transpose() * &s.p2 * &g.l;
    for d in &sys.c_dirs {
        p1 += d.pattern.transpose() * &lt_p2_l * &d.pattern * d.variance;
    }

    let a_lc = a - &g.l * c;
    let p2 = a_lc.transpose() * &s.p2 * &a_lc + &k_term;

    let mut p3 = &sys.sigma_w + a * &s.p3 * a.transpose() - &l_term;
    let p34 = &s.p3 + &s.p4;
    for d in &sys.a_dirs {
        p3 += &d.pattern * &p34 * d.pattern.transpose() * d.variance;
    }
    let k_p4_kt = &g.k * &s.p4 * g.k.transpose();
    for d in &sys.b_dirs {
        p3 += &d.pattern * &k_p4_kt * d.pattern.transpose() * d.variance;
    }

    let a_bk = a + b * &g.k;
    let p4 = &a_bk * &s.p4 * a_bk.transpose() + &l_term;

    RiccatiState {
        p1: symmetrize(&p1),
        p2: symmetrize(&p2),
        p3: symmetrize(&p3),
        p4: symmetrize(&p4),
    }
}

fn max_change(a: &RiccatiState, b: &RiccatiState) -> f64 {
    [
        max_abs(&(&a.p1 - &b.p1)),
        max_abs(&(&a.p2 - &b.p2)),
        max_abs(&(&a.p3 - &b.p3)),
        max_abs(&(&a.p4 - &b.p4)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_inputs(sys: &UncertainLinearSystem, w: &SynthesisWeights, opts: &SolverOptions) -> Result<()> {
    let mut report = validate_system(sys);
    report
        .violations
        .extend(validate_weights(w, sys.n(), sys.m()).violations);
    if !report.is_ok() {
        return Err(Error::InvalidInput(report.violations.join("; ")));
    }
    if !(opts.tol > 0.0 && opts.tol < opts.divergence_norm && opts.max_iters > 0) {
        return Err(Error::InvalidInput(format!("bad solver options {opts:?}")));
    }
    Ok(())
}

/// Fixed-point iteration on the coupled Riccati equations.
///
/// Each sweep computes `K_α, L_α, K, L` from the current `P1..P4`, then
/// updates `P1..P4` and symmetrizes them. Starts from `P1 = Q`, `P2 = 0`,
/// `P3 = Σ_w`, `P4 = 0`. On success the returned gains are recomputed from
/// the final `P` iterate.
pub fn solve_coupled_riccati(
    sys: &UncertainLinearSystem,
    w: &SynthesisWeights,
    opts: &SolverOptions,
) -> Result<CompensatorGains> {
    check_inputs(sys, w, opts)?;
    let n = sys.n();
    let mut state = RiccatiState {
        p1: w.q.clone(),
        p2: Matrix::zeros(n, n),
        p3: sys.sigma_w.clone(),
        p4: Matrix::zeros(n, n),
    };
    let mut gains = gains_from(sys, w, &state)?;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        let next = riccati_update(sys, w, &state, &gains);
        residual = max_change(&next, &state);
        iterations += 1;
        state = next;

        let magnitude = [&state.p1, &state.p2, &state.p3, &state.p4]
            .into_iter()
            .map(max_abs)
            .fold(0.0, f64::max);
        if magnitude.is_nan() || magnitude > opts.divergence_norm || !residual.is_finite() {
            break;
        }
        match gains_from(sys, w, &state) {
            Ok(g) => gains = g,
            // A blown-up iterate can make K_α or L_α numerically singular;
            // that is divergence, not a caller error.
            Err(Error::Singular { .. }) if iterations > 1 => break,
            Err(e) => return Err(e),
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }

    Ok(CompensatorGains {
        k: gains.k,
        l: gains.l,
        p1: state.p1,
        p2: state.p2,
        p3: state.p3,
        p4: state.p4,
        iterations,
        residual,
        converged,
    })
}

/// Classical LQG: the coupled solver applied with every multiplicative
/// variance zeroed, where the equations decouple into the control and
/// filter Riccati pair of the nominal triple.
pub fn solve_lqg(
    sys: &UncertainLinearSystem,
    w: &SynthesisWeights,
    opts: &SolverOptions,
) -> Result<CompensatorGains> {
    solve_coupled_riccati(&sys.without_multiplicative_noise(), w, opts)
}

/// Largest elementwise mismatch of the four Riccati equations at the `P`
/// matrices in `gains`, with `K, L` re-derived from those `P`. Independent of
/// the iteration history.
pub fn riccati_residual(
    sys: &UncertainLinearSystem,
    w: &SynthesisWeights,
    gains: &CompensatorGains,
) -> Result<f64> {
    let state = RiccatiState {
        p1: gains.p1.clone(),
        p2: gains.p2.clone(),
        p3: gains.p3.clone(),
        p4: gains.p4.clone(),
    };
    let g = gains_from(sys, w, &state)?;
    Ok(max_change(&riccati_update(sys, w, &state, &g), &state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Compensator {
    Lqg,
    Mlqg,
}

impl Compensator {
    pub fn synthesize(
        self,
        sys: &UncertainLinearSystem,
        w: &SynthesisWeights,
        opts: &SolverOptions,
    ) -> Result<CompensatorGains> {
        match self {
            Compensator::Lqg => solve_lqg(sys, w, opts),
            Compensator::Mlqg => solve_coupled_riccati(sys, w, opts),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Compensator::Lqg => "lqg",
            Compensator::Mlqg => "mlqg",
        }
    }
}

impl std::fmt::Display for Compensator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Compensator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lqg" => Ok(Compensator::Lqg),
            "mlqg" => Ok(Compensator::Mlqg),
            other => Err(Error::InvalidInput(format!("unknown compensator `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::psd_violation;
    use crate::model::{build_pendulum, NoiseDirection};
    use approx::assert_relative_eq;

    fn scalar(a: f64, b: f64, c: f64, q: f64, r: f64, w: f64, v: f64) -> (UncertainLinearSystem, SynthesisWeights) {
        let s = |x: f64| Matrix::from_element(1, 1, x);
        (
            UncertainLinearSystem {
                a_bar: s(a),
                b_bar: s(b),
                c_bar: s(c),
                a_dirs: vec![],
                b_dirs: vec![],
                c_dirs: vec![],
                sigma_w: s(w),
                sigma_v: s(v),
                sigma_x0: s(0.0),
            },
            SynthesisWeights { q: s(q), r: s(r) },
        )
    }

    #[test]
    fn zero_dynamics_gives_zero_gains() {
        let (sys, w) = scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let g = solve_coupled_riccati(&sys, &w, &SolverOptions::default()).unwrap();
        assert!(g.converged);
        assert_eq!(g.k[(0, 0)], 0.0);
        assert_eq!(g.l[(0, 0)], 0.0);
        assert_relative_eq!(g.p1[(0, 0)], 1.0);
        assert_relative_eq!(g.p3[(0, 0)], 1.0);
    }

    #[test]
    fn scalar_lqg_matches_closed_form_dare() {
        // a = 0.5, b = q = r = 1: P = 1 + 0.25P − 0.25P²/(1 + P), i.e.
        // P² − 0.25P − 1 = 0, so P = (0.25 + √(0.0625 + 4))/2.
        let (sys, w) = scalar(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let g = solve_lqg(&sys, &w, &SolverOptions::default()).unwrap();
        let p = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert_relative_eq!(g.p1[(0, 0)], p, epsilon = 1e-8);
        assert_relative_eq!(g.k[(0, 0)], -0.5 * p / (1.0 + p), epsilon = 1e-8);
        // Filter Riccati is the same scalar equation by duality.
        assert_relative_eq!(g.p3[(0, 0)], p, epsilon = 1e-8);
        assert_relative_eq!(g.l[(0, 0)], 0.5 * p / (1.0 + p), epsilon = 1e-8);
    }

    #[test]
    fn lqg_ignores_multiplicative_variances() {
        let opts = SolverOptions::default();
        let cfg_a = build_pendulum(0.02, 0.02).unwrap();
        let cfg_b = build_pendulum(0.3, 0.3).unwrap();
        let a = solve_lqg(&cfg_a.system, &cfg_a.weights, &opts).unwrap();
        let b = solve_lqg(&cfg_b.system, &cfg_b.weights, &opts).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(a.l, b.l);
    }

    #[test]
    fn converged_pendulum_solution_is_psd_fixed_point() {
        let cfg = build_pendulum(0.06, 0.06).unwrap();
        let opts = SolverOptions::default();
        let g = solve_coupled_riccati(&cfg.system, &cfg.weights, &opts).unwrap();
        assert!(g.converged);
        assert!(g.residual <= opts.tol);
        for p in [&g.p1, &g.p2, &g.p3, &g.p4] {
            assert_eq!(p, &p.transpose());
            assert!(psd_violation(p, 1e-8).is_none());
        }
        assert!(riccati_residual(&cfg.system, &cfg.weights, &g).unwrap() <= 10.0 * opts.tol);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let cfg = build_pendulum(0.06, 0.06).unwrap();
        let opts = SolverOptions {
            max_iters: 5,
            ..SolverOptions::default()
        };
        let g = solve_coupled_riccati(&cfg.system, &cfg.weights, &opts).unwrap();
        assert!(!g.converged);
        assert_eq!(g.iterations, 5);
    }

    #[test]
    fn far_past_the_boundary_diverges() {
        let cfg = build_pendulum(5.0, 5.0).unwrap();
        let g = solve_coupled_riccati(&cfg.system, &cfg.weights, &SolverOptions::default()).unwrap();
        assert!(!g.converged);
    }

    #[test]
    fn singular_denominator_is_reported() {
        // R = 0 with B̄ᵀP1B̄ = 0 makes K_α singular.
        let (sys, mut w) = scalar(0.5, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        w.r = Matrix::zeros(1, 1);
        assert!(solve_coupled_riccati(&sys, &w, &SolverOptions::default()).is_err());
    }

    #[test]
    fn input_noise_enters_k_alpha() {
        let (mut sys, w) = scalar(0.9, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        let nominal = solve_coupled_riccati(&sys, &w, &SolverOptions::default()).unwrap();
        sys.b_dirs.push(NoiseDirection::new(Matrix::from_element(1, 1, 1.0), 0.5));
        let noisy = solve_coupled_riccati(&sys, &w, &SolverOptions::default()).unwrap();
        assert!(noisy.converged);
        // Uncertain actuation makes the controller more cautious.
        assert!(noisy.k[(0, 0)].abs() < nominal.k[(0, 0)].abs());
        assert!(riccati_residual(&sys, &w, &noisy).unwrap() <= 1e-8);
    }

    #[test]
    fn compensator_parses() {
        assert_eq!("MLQG".parse::<Compensator>().unwrap(), Compensator::Mlqg);
        assert!("kalman".parse::<Compensator>().is_err());
    }
}
