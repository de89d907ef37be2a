//! Exact second-moment dynamics of the closed loop under a linear
//! compensator `u = K x̂`, `x̂⁺ = Āx̂ + B̄u + L(y − C̄x̂)`.
//!
//! The stacked vector `𝒳 = [vec E[xxᵀ]; vec E[xx̂ᵀ]; vec E[x̂xᵀ]; vec E[x̂x̂ᵀ]]`
//! evolves as `𝒳⁺ = H𝒳 + Φ𝒱` with `𝒱 = [vec Σ_w; vec Σ_v]`. Its steady state
//! gives the residual second moment `Σ_r` that normalizes the detection
//! statistic `q = rᵀΣ_r⁻¹r`.

use crate::error::{Error, Result};
use crate::matops::{
    condition_number, kron, matricize, solve_linear, spectral_radius, symmetrize, vectorize, Matrix,
    Vector,
};
use crate::model::{NoiseDirection, UncertainLinearSystem};

/// Condition number above which `Σ_r` is treated as singular.
pub const MAX_SIGMA_R_CONDITION: f64 = 1e12;

/// `Σ σ²_i (𝒟_i ⊗ 𝒟_i)` for a list of noise directions, `rows² × cols²`.
pub fn lifted_covariance(dirs: &[NoiseDirection], rows: usize, cols: usize) -> Matrix {
    dirs.iter().fold(Matrix::zeros(rows * rows, cols * cols), |acc, d| {
        acc + kron(&d.pattern, &d.pattern) * d.variance
    })
}

#[derive(Debug, Clone)]
pub struct SecondMomentOperator {
    /// `4n² × 4n²` second-moment transition matrix.
    pub h: Matrix,
    /// `4n² × (n² + p²)` additive-noise input map.
    pub phi: Matrix,
    /// `Σ′_A`, `n² × n²`.
    pub sigma_a_prime: Matrix,
    /// `Σ′_B`, `n² × m²`.
    pub sigma_b_prime: Matrix,
    /// `Σ′_C`, `p² × n²`.
    pub sigma_c_prime: Matrix,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone)]
pub struct SteadyStateMoments {
    pub x_inf: Vector,
    pub xtilde_inf: Vector,
    pub xbreve_inf: Vector,
    pub xhat_inf: Vector,
    /// `vec E[eeᵀ]` with `e = x − x̂`.
    pub e_inf: Vector,
    /// `vec E[rrᵀ]`.
    pub r_inf: Vector,
    pub sigma_r: Matrix,
    pub sigma_x_err: Matrix,
    pub rho_h: f64,
}

fn check_gain_dims(sys: &UncertainLinearSystem, k: &Matrix, l: &Matrix) -> Result<()> {
    let (n, m, p) = (sys.n(), sys.m(), sys.p());
    if k.shape() != (m, n) {
        return Err(Error::Dimension(format!(
            "K is {}x{}, expected {m}x{n}",
            k.nrows(),
            k.ncols()
        )));
    }
    if l.shape() != (n, p) {
        return Err(Error::Dimension(format!(
            "L is {}x{}, expected {n}x{p}",
            l.nrows(),
            l.ncols()
        )));
    }
    Ok(())
}

/// Assembles `H` block by block and `Φ = [[I, 0], [0, 0], [0, 0], [0, L⊗L]]`.
pub fn build_operator(sys: &UncertainLinearSystem, k: &Matrix, l: &Matrix) -> Result<SecondMomentOperator> {
    check_gain_dims(sys, k, l)?;
    let (n, m, p) = (sys.n(), sys.m(), sys.p());
    let nn = n * n;
    let (a, b, c) = (&sys.a_bar, &sys.b_bar, &sys.c_bar);

    let sigma_a_prime = lifted_covariance(&sys.a_dirs, n, n);
    let sigma_b_prime = lifted_covariance(&sys.b_dirs, n, m);
    let sigma_c_prime = lifted_covariance(&sys.c_dirs, p, n);

    let bk = b * k;
    let lc = l * c;
    let f = a + &bk - &lc;
    let ll = kron(l, l);

    let blocks: [[Matrix; 4]; 4] = [
        [
            kron(a, a) + &sigma_a_prime,
            kron(&bk, a),
            kron(a, &bk),
            (kron(b, b) + &sigma_b_prime) * kron(k, k),
        ],
        [kron(&lc, a), kron(&f, a), kron(&lc, &bk), kron(&f, &bk)],
        [kron(a, &lc), kron(&bk, &lc), kron(a, &f), kron(&bk, &f)],
        [
            &ll * (kron(c, c) + &sigma_c_prime),
            kron(&f, &lc),
            kron(&lc, &f),
            kron(&f, &f),
        ],
    ];
    let mut h = Matrix::zeros(4 * nn, 4 * nn);
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, block) in row.iter().enumerate() {
            h.view_mut((bi * nn, bj * nn), (nn, nn)).copy_from(block);
        }
    }

    let pp = p * p;
    let mut phi = Matrix::zeros(4 * nn, nn + pp);
    phi.view_mut((0, 0), (nn, nn)).fill_with_identity();
    phi.view_mut((3 * nn, nn), (nn, pp)).copy_from(&ll);

    Ok(SecondMomentOperator {
        h,
        phi,
        sigma_a_prime,
        sigma_b_prime,
        sigma_c_prime,
        n,
        p,
    })
}

/// `𝒱 = [vec Σ_w; vec Σ_v]`.
pub fn noise_vector(sys: &UncertainLinearSystem) -> Vector {
    let w = vectorize(&sys.sigma_w);
    let v = vectorize(&sys.sigma_v);
    Vector::from_iterator(w.len() + v.len(), w.iter().chain(v.iter()).copied())
}

/// `Σ′_C·vec(X)` evaluated as `Σ σ²_l vec(𝒞_l X 𝒞_lᵀ)`.
pub fn output_noise_term(sys: &UncertainLinearSystem, x_second_moment: &Matrix) -> Vector {
    let p = sys.p();
    sys.c_dirs.iter().fold(Vector::zeros(p * p), |acc, d| {
        acc + vectorize(&(&d.pattern * x_second_moment * d.pattern.transpose())) * d.variance
    })
}

fn block(stacked: &Vector, index: usize, nn: usize) -> Vector {
    stacked.rows(index * nn, nn).into_owned()
}

/// `vec E[rrᵀ] = (C̄⊗C̄)·vec E[eeᵀ] + Σ′_C·vec E[xxᵀ] + vec Σ_v`.
fn residual_moment(sys: &UncertainLinearSystem, e: &Vector, x: &Vector) -> Result<Vector> {
    let n = sys.n();
    let x_mat = matricize(x.as_slice(), n, n)?;
    Ok(kron(&sys.c_bar, &sys.c_bar) * e + output_noise_term(sys, &x_mat) + vectorize(&sys.sigma_v))
}

/// Solves `(I − H)𝒳 = Φ𝒱` and derives the error and residual second
/// moments. Fails when `ρ(H) ≥ 1`, where no steady state exists.
pub fn steady_state(op: &SecondMomentOperator, sys: &UncertainLinearSystem) -> Result<SteadyStateMoments> {
    let rho_h = spectral_radius(&op.h)?;
    if rho_h >= 1.0 {
        return Err(Error::NotMeanSquareCompensated { rho: rho_h });
    }
    let (n, p) = (op.n, op.p);
    let nn = n * n;
    let lhs = Matrix::identity(4 * nn, 4 * nn) - &op.h;
    let stacked = solve_linear(&lhs, &(&op.phi * noise_vector(sys)))?;

    let x_inf = block(&stacked, 0, nn);
    let xtilde_inf = block(&stacked, 1, nn);
    let xbreve_inf = block(&stacked, 2, nn);
    let xhat_inf = block(&stacked, 3, nn);
    let e_inf = &x_inf - &xtilde_inf - &xbreve_inf + &xhat_inf;
    let r_inf = residual_moment(sys, &e_inf, &x_inf)?;
    let sigma_r = symmetrize(&matricize(r_inf.as_slice(), p, p)?);
    let sigma_x_err = symmetrize(&matricize(e_inf.as_slice(), n, n)?);

    Ok(SteadyStateMoments {
        x_inf,
        xtilde_inf,
        xbreve_inf,
        xhat_inf,
        e_inf,
        r_inf,
        sigma_r,
        sigma_x_err,
        rho_h,
    })
}

/// Convenience: operator plus steady state for a gain pair.
pub fn analyze(sys: &UncertainLinearSystem, k: &Matrix, l: &Matrix) -> Result<SteadyStateMoments> {
    steady_state(&build_operator(sys, k, l)?, sys)
}

/// Finite-horizon moment trajectory, index `k = 0..=T`.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub stacked: Vec<Vector>,
    pub e_mean: Vec<Vector>,
    pub r_mean: Vec<Vector>,
}

impl MomentTrajectory {
    /// `vec E[r_k r_kᵀ]` at step `k`.
    pub fn residual_second_moment(&self, sys: &UncertainLinearSystem, k: usize) -> Result<Vector> {
        let nn = sys.n() * sys.n();
        let s = &self.stacked[k];
        let e = block(s, 0, nn) - block(s, 1, nn) - block(s, 2, nn) + block(s, 3, nn);
        residual_moment(sys, &e, &block(s, 0, nn))
    }
}

/// Iterates `𝒳_{k+1} = H𝒳_k + Φ𝒱` and `E[e_{k+1}] = (Ā − LC̄)E[e_k]` for
/// `horizon` steps, starting from `E[x₀x₀ᵀ] = x0_second_moment` and `x̂₀ = 0`.
/// Defined for any `H`; moments grow without bound when `ρ(H) ≥ 1`.
pub fn propagate_moments(
    op: &SecondMomentOperator,
    sys: &UncertainLinearSystem,
    l: &Matrix,
    x0_second_moment: &Matrix,
    e0_mean: &Vector,
    horizon: usize,
) -> Result<MomentTrajectory> {
    let n = op.n;
    if x0_second_moment.shape() != (n, n) || e0_mean.len() != n || l.shape() != (n, op.p) {
        return Err(Error::Dimension(format!(
            "initial moments must be {n}x{n} and {n}-vector, L must be {n}x{}",
            op.p
        )));
    }
    let nn = n * n;
    let input = &op.phi * noise_vector(sys);
    let err_dyn = &sys.a_bar - l * &sys.c_bar;

    let mut current = Vector::zeros(4 * nn);
    current.rows_mut(0, nn).copy_from(&vectorize(x0_second_moment));
    let mut e = e0_mean.clone();

    let mut stacked = Vec::with_capacity(horizon + 1);
    let mut e_mean = Vec::with_capacity(horizon + 1);
    let mut r_mean = Vec::with_capacity(horizon + 1);
    for step in 0..=horizon {
        r_mean.push(&sys.c_bar * &e);
        e_mean.push(e.clone());
        stacked.push(current.clone());
        if step < horizon {
            current = &op.h * &current + &input;
            e = &err_dyn * &e;
        }
    }
    Ok(MomentTrajectory {
        stacked,
        e_mean,
        r_mean,
    })
}

/// Spectral radii behind the three mean-square predicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityDiagnostics {
    /// `ρ(Ā⊗Ā + Σ′_A)`: autonomous system.
    pub rho_open: f64,
    /// `ρ((Ā+B̄K)⊗(Ā+B̄K) + Σ′_A + Σ′_B(K⊗K))`: state feedback `u = Kx`.
    pub rho_closed: Option<f64>,
    /// `ρ(H)`: output feedback through the compensator.
    pub rho_h: Option<f64>,
}

impl StabilityDiagnostics {
    pub fn mean_square_stable(&self) -> bool {
        self.rho_open < 1.0
    }

    pub fn mean_square_stabilized(&self) -> Option<bool> {
        self.rho_closed.map(|r| r < 1.0)
    }

    pub fn mean_square_compensated(&self) -> Option<bool> {
        self.rho_h.map(|r| r < 1.0)
    }
}

pub fn stability_diagnostics(
    sys: &UncertainLinearSystem,
    k: Option<&Matrix>,
    l: Option<&Matrix>,
) -> Result<StabilityDiagnostics> {
    let (n, m) = (sys.n(), sys.m());
    let sigma_a = lifted_covariance(&sys.a_dirs, n, n);
    let rho_open = spectral_radius(&(kron(&sys.a_bar, &sys.a_bar) + &sigma_a))?;

    let rho_closed = match k {
        Some(k) => {
            if k.shape() != (m, n) {
                return Err(Error::Dimension(format!(
                    "K is {}x{}, expected {m}x{n}",
                    k.nrows(),
                    k.ncols()
                )));
            }
            let acl = &sys.a_bar + &sys.b_bar * k;
            let sigma_b = lifted_covariance(&sys.b_dirs, n, m);
            Some(spectral_radius(&(kron(&acl, &acl) + &sigma_a + sigma_b * kron(k, k)))?)
        }
        None => None,
    };

    let rho_h = match (k, l) {
        (Some(k), Some(l)) => Some(spectral_radius(&build_operator(sys, k, l)?.h)?),
        _ => None,
    };

    Ok(StabilityDiagnostics {
        rho_open,
        rho_closed,
        rho_h,
    })
}

/// `E[q] = p + E[e]ᵀC̄ᵀΣ_r⁻¹C̄E[e]`.
pub fn expected_q(ss: &SteadyStateMoments, e_mean: &Vector, c_bar: &Matrix) -> Result<f64> {
    let p = ss.sigma_r.nrows();
    if c_bar.shape() != (p, e_mean.len()) {
        return Err(Error::Dimension(format!(
            "C_bar is {}x{}, expected {p}x{}",
            c_bar.nrows(),
            c_bar.ncols(),
            e_mean.len()
        )));
    }
    let condition = condition_number(&ss.sigma_r);
    if condition.is_nan() || condition > MAX_SIGMA_R_CONDITION {
        return Err(Error::Singular {
            context: "residual covariance Sigma_r".to_string(),
            condition,
        });
    }
    let r_mean = c_bar * e_mean;
    let chol = ss.sigma_r.clone().cholesky().ok_or(Error::NotPsd("Sigma_r".to_string()))?;
    Ok(p as f64 + r_mean.dot(&chol.solve(&r_mean)))
}
