//! System description: nominal matrices, multiplicative-noise directions,
//! additive-noise covariances, synthesis weights and run options, plus the
//! JSON config format and the inverted-pendulum benchmark.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matops::{psd_violation, Matrix};

/// Relative tolerance of the symmetry / PSD checks on covariances.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// One scalar multiplicative-noise channel: the system matrix is perturbed
/// by `ξ·pattern` with `ξ` zero-mean of variance `variance`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDirection {
    pub pattern: Matrix,
    pub variance: f64,
}

impl NoiseDirection {
    pub fn new(pattern: Matrix, variance: f64) -> Self {
        Self { pattern, variance }
    }
}

/// Discrete-time linear system with multiplicative and additive noise:
///
/// ```text
/// x[k+1] = (Ā + Σ γ_i 𝒜_i) x[k] + (B̄ + Σ δ_j ℬ_j) u[k] + w[k]
/// y[k]   = (C̄ + Σ κ_l 𝒞_l) x[k] + v[k]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainLinearSystem {
    pub a_bar: Matrix,
    pub b_bar: Matrix,
    pub c_bar: Matrix,
    pub a_dirs: Vec<NoiseDirection>,
    pub b_dirs: Vec<NoiseDirection>,
    pub c_dirs: Vec<NoiseDirection>,
    pub sigma_w: Matrix,
    pub sigma_v: Matrix,
    pub sigma_x0: Matrix,
}

impl UncertainLinearSystem {
    /// State dimension.
    pub fn n(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b_bar.ncols()
    }

    /// Output dimension.
    pub fn p(&self) -> usize {
        self.c_bar.nrows()
    }

    /// Copy with every multiplicative variance set to zero.
    pub fn without_multiplicative_noise(&self) -> Self {
        let zero = |dirs: &[NoiseDirection]| {
            dirs.iter()
                .map(|d| NoiseDirection::new(d.pattern.clone(), 0.0))
                .collect()
        };
        Self {
            a_dirs: zero(&self.a_dirs),
            b_dirs: zero(&self.b_dirs),
            c_dirs: zero(&self.c_dirs),
            ..self.clone()
        }
    }

    /// Copy with the variance of the first A-direction and the first
    /// C-direction (when present) set to `sigma2`.
    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        let mut out = self.clone();
        if let Some(d) = out.a_dirs.first_mut() {
            d.variance = sigma2;
        }
        if let Some(d) = out.c_dirs.first_mut() {
            d.variance = sigma2;
        }
        out
    }
}

/// Quadratic cost weights `Q ⪰ 0`, `R ≻ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisWeights {
    pub q: Matrix,
    pub r: Matrix,
}

impl SynthesisWeights {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: Matrix::identity(n, n),
            r: Matrix::identity(m, m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    #[default]
    Laplacian,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Gaussian => f.write_str("gaussian"),
            NoiseKind::Laplacian => f.write_str("laplacian"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    /// Constant "true" dynamics used by the fixed-mismatch simulation mode.
    pub true_a: Option<Matrix>,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

/// Everything a config file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub system: UncertainLinearSystem,
    pub weights: SynthesisWeights,
    pub options: RunOptions,
}

/// Outcome of [`validate_system`]; an empty violation list means ok.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::ConfigValidation(self.violations))
        }
    }

    fn push(&mut self, msg: String) {
        self.violations.push(msg);
    }

    fn check_shape(&mut self, name: &str, m: &Matrix, rows: usize, cols: usize) {
        if m.nrows() != rows {
            self.push(format!("{name} row count {} ≠ {rows}", m.nrows()));
        }
        if m.ncols() != cols {
            self.push(format!("{name} column count {} ≠ {cols}", m.ncols()));
        }
    }

    fn check_finite(&mut self, name: &str, m: &Matrix) {
        if m.iter().any(|x| !x.is_finite()) {
            self.push(format!("{name} has non-finite entries"));
        }
    }

    fn check_psd(&mut self, name: &str, m: &Matrix, size: usize) {
        if m.shape() != (size, size) {
            self.push(format!(
                "{name} is {}x{}, expected {size}x{size}",
                m.nrows(),
                m.ncols()
            ));
        } else if let Some(v) = psd_violation(m, PSD_TOLERANCE) {
            self.push(format!("{name} not PSD: {v}"));
        }
    }

    fn check_dirs(&mut self, name: &str, dirs: &[NoiseDirection], rows: usize, cols: usize) {
        for (i, d) in dirs.iter().enumerate() {
            let label = format!("{name}[{i}].pattern");
            if d.pattern.shape() != (rows, cols) {
                self.push(format!(
                    "{label} is {}x{}, expected {rows}x{cols}",
                    d.pattern.nrows(),
                    d.pattern.ncols()
                ));
            }
            self.check_finite(&label, &d.pattern);
            if !(d.variance >= 0.0 && d.variance.is_finite()) {
                self.push(format!("{name}[{i}].variance {} is not a finite nonnegative number", d.variance));
            }
        }
    }
}

/// Checks every structural invariant of the system description. Violations
/// are returned as data, never as an error.
pub fn validate_system(sys: &UncertainLinearSystem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = sys.a_bar.nrows();
    let m = sys.b_bar.ncols();
    let p = sys.c_bar.nrows();
    if n == 0 {
        report.push("A_bar has no rows (n must be positive)".to_string());
    }
    if m == 0 {
        report.push("B_bar has no columns (m must be positive)".to_string());
    }
    if p == 0 {
        report.push("C_bar has no rows (p must be positive)".to_string());
    }
    if sys.a_bar.ncols() != n {
        report.push(format!("A_bar column count {} ≠ n = {n}", sys.a_bar.ncols()));
    }
    if sys.b_bar.nrows() != n {
        report.push(format!("B_bar row count {} ≠ n = {n}", sys.b_bar.nrows()));
    }
    if sys.c_bar.ncols() != n {
        report.push(format!("C_bar column count {} ≠ n = {n}", sys.c_bar.ncols()));
    }
    for (name, mat) in [("A_bar", &sys.a_bar), ("B_bar", &sys.b_bar), ("C_bar", &sys.c_bar)] {
        report.check_finite(name, mat);
    }
    report.check_dirs("a_dirs", &sys.a_dirs, n, n);
    report.check_dirs("b_dirs", &sys.b_dirs, n, m);
    report.check_dirs("c_dirs", &sys.c_dirs, p, n);
    report.check_psd("sigma_w", &sys.sigma_w, n);
    report.check_psd("sigma_v", &sys.sigma_v, p);
    report.check_psd("sigma_x0", &sys.sigma_x0, n);
    report
}

pub fn validate_weights(w: &SynthesisWeights, n: usize, m: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    report.check_psd("Q", &w.q, n);
    report.check_shape("R", &w.r, m, m);
    if w.r.shape() == (m, m) {
        match psd_violation(&w.r, PSD_TOLERANCE) {
            Some(v) => report.push(format!("R not positive definite: {v}")),
            None => {
                if w.r.clone().cholesky().is_none() {
                    report.push("R not positive definite: Cholesky factorization failed".to_string());
                }
            }
        }
    }
    report
}

fn validate_options(o: &RunOptions, n: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Some(a) = &o.true_a {
        report.check_shape("true_A", a, n, n);
        report.check_finite("true_A", a);
    }
    report
}

/// Runs all config-level checks (system, weights and options).
pub fn validate_config(cfg: &Config) -> ValidationReport {
    let mut report = validate_system(&cfg.system);
    let (n, m) = (cfg.system.n(), cfg.system.m());
    report.violations.extend(validate_weights(&cfg.weights, n, m).violations);
    report.violations.extend(validate_options(&cfg.options, n).violations);
    report
}

// ---------------------------------------------------------------------------
// JSON schema

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDirection {
    pattern: Rows,
    variance: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A_bar")]
    a_bar: Rows,
    #[serde(rename = "B_bar")]
    b_bar: Rows,
    #[serde(rename = "C_bar")]
    c_bar: Rows,
    #[serde(default)]
    a_dirs: Vec<RawDirection>,
    #[serde(default)]
    b_dirs: Vec<RawDirection>,
    #[serde(default)]
    c_dirs: Vec<RawDirection>,
    sigma_w: Rows,
    sigma_v: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_x0: Option<Rows>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<Rows>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Rows>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptions {
    #[serde(rename = "true_A", default, skip_serializing_if = "Option::is_none")]
    true_a: Option<Rows>,
    #[serde(default)]
    noise_kind: NoiseKind,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: RawSystem,
    #[serde(default)]
    weights: RawWeights,
    #[serde(default)]
    options: RawOptions,
}

fn rows_to_matrix(rows: &Rows, field: &str) -> Result<Matrix> {
    let schema = |message: String| Error::ConfigSchema {
        field: field.to_string(),
        message,
    };
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(schema("matrix must have at least one row and one column".to_string()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(schema(format!(
            "ragged matrix: row {i} has {} entries, row 0 has {ncols}",
            r.len()
        )));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &Matrix) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dirs_from_raw(raw: &[RawDirection], field: &str) -> Result<Vec<NoiseDirection>> {
    raw.iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(NoiseDirection::new(
                rows_to_matrix(&d.pattern, &format!("system.{field}[{i}].pattern"))?,
                d.variance,
            ))
        })
        .collect()
}

fn dirs_to_raw(dirs: &[NoiseDirection]) -> Vec<RawDirection> {
    dirs.iter()
        .map(|d| RawDirection {
            pattern: matrix_to_rows(&d.pattern),
            variance: d.variance,
        })
        .collect()
}

impl RawConfig {
    fn into_config(self) -> Result<Config> {
        let s = &self.system;
        let a_bar = rows_to_matrix(&s.a_bar, "system.A_bar")?;
        let n = a_bar.nrows();
        let b_bar = rows_to_matrix(&s.b_bar, "system.B_bar")?;
        let m = b_bar.ncols();
        let system = UncertainLinearSystem {
            b_bar,
            c_bar: rows_to_matrix(&s.c_bar, "system.C_bar")?,
            a_dirs: dirs_from_raw(&s.a_dirs, "a_dirs")?,
            b_dirs: dirs_from_raw(&s.b_dirs, "b_dirs")?,
            c_dirs: dirs_from_raw(&s.c_dirs, "c_dirs")?,
            sigma_w: rows_to_matrix(&s.sigma_w, "system.sigma_w")?,
            sigma_v: rows_to_matrix(&s.sigma_v, "system.sigma_v")?,
            sigma_x0: match &s.sigma_x0 {
                Some(rows) => rows_to_matrix(rows, "system.sigma_x0")?,
                None => Matrix::zeros(n, n),
            },
            a_bar,
        };
        let weights = SynthesisWeights {
            q: match &self.weights.q {
                Some(rows) => rows_to_matrix(rows, "weights.Q")?,
                None => Matrix::identity(n, n),
            },
            r: match &self.weights.r {
                Some(rows) => rows_to_matrix(rows, "weights.R")?,
                None => Matrix::identity(m, m),
            },
        };
        let options = RunOptions {
            true_a: self
                .options
                .true_a
                .as_ref()
                .map(|rows| rows_to_matrix(rows, "options.true_A"))
                .transpose()?,
            noise_kind: self.options.noise_kind,
            seed: self.options.seed,
        };
        let cfg = Config {
            system,
            weights,
            options,
        };
        validate_config(&cfg).into_result()?;
        Ok(cfg)
    }

    fn from_config(cfg: &Config) -> Self {
        let s = &cfg.system;
        RawConfig {
            system: RawSystem {
                a_bar: matrix_to_rows(&s.a_bar),
                b_bar: matrix_to_rows(&s.b_bar),
                c_bar: matrix_to_rows(&s.c_bar),
                a_dirs: dirs_to_raw(&s.a_dirs),
                b_dirs: dirs_to_raw(&s.b_dirs),
                c_dirs: dirs_to_raw(&s.c_dirs),
                sigma_w: matrix_to_rows(&s.sigma_w),
                sigma_v: matrix_to_rows(&s.sigma_v),
                sigma_x0: Some(matrix_to_rows(&s.sigma_x0)),
            },
            weights: RawWeights {
                q: Some(matrix_to_rows(&cfg.weights.q)),
                r: Some(matrix_to_rows(&cfg.weights.r)),
            },
            options: RawOptions {
                true_a: cfg.options.true_a.as_ref().map(matrix_to_rows),
                noise_kind: cfg.options.noise_kind,
                seed: cfg.options.seed,
            },
        }
    }
}

/// Parses and validates a JSON config document.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => Error::ConfigSchema {
                field: path,
                message: inner.to_string(),
            },
            _ => Error::ConfigParse {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            },
        }
    })?;
    raw.into_config()
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Serializes a config to pretty JSON. Floats are written as shortest
/// round-trip decimals, so [`parse_config`] restores them bit for bit.
pub fn config_to_json(cfg: &Config) -> String {
    serde_json::to_string_pretty(&RawConfig::from_config(cfg)).expect("config serializes")
}

pub fn write_config(cfg: &Config, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, config_to_json(cfg) + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pendulum benchmark

/// Forward-Euler step of the linearized pendulum.
pub const PENDULUM_DT: f64 = 0.1;
/// Mass constant assumed by the nominal model.
pub const PENDULUM_NOMINAL_MASS: f64 = 5.0;
/// Mass constant of the true plant.
pub const PENDULUM_TRUE_MASS: f64 = 10.0;

fn pendulum_a(mass: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[1.0, PENDULUM_DT, mass * PENDULUM_DT, 1.0])
}

/// Inverted pendulum linearized about the upright equilibrium, with
/// multiplicative noise on the mass term of `A` (variance `sigma2_a`) and on
/// the angle sensor gain (variance `sigma2_c`).
///
/// The true-mass `A` is stored in the run options for the fixed-mismatch
/// simulation mode; `Σ_x0 = 0`.
pub fn build_pendulum(sigma2_a: f64, sigma2_c: f64) -> Result<Config> {
    for (name, v) in [("sigma2_a", sigma2_a), ("sigma2_c", sigma2_c)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{name} = {v} must be a finite nonnegative variance"
            )));
        }
    }
    let system = UncertainLinearSystem {
        a_bar: pendulum_a(PENDULUM_NOMINAL_MASS),
        b_bar: Matrix::from_row_slice(2, 1, &[0.0, PENDULUM_DT]),
        c_bar: Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
        a_dirs: vec![NoiseDirection::new(
            Matrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]),
            sigma2_a,
        )],
        b_dirs: Vec::new(),
        c_dirs: vec![NoiseDirection::new(Matrix::from_row_slice(1, 2, &[0.1, 0.0]), sigma2_c)],
        sigma_w: Matrix::identity(2, 2) * 2.0,
        sigma_v: Matrix::identity(1, 1) * 2.0,
        sigma_x0: Matrix::zeros(2, 2),
    };
    Ok(Config {
        system,
        weights: SynthesisWeights::identity(2, 1),
        options: RunOptions {
            true_a: Some(pendulum_a(PENDULUM_TRUE_MASS)),
            noise_kind: NoiseKind::Laplacian,
            seed: 0,
        },
    })
}
