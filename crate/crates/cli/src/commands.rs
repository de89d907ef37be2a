use std::io::Write;
use std::path::Path;

use mlqg::detector::{self, compare_compensators, evaluate_compensator, CompareOptions, CompensatorSummary};
use mlqg::matops::{matricize, Matrix};
use mlqg::model::{build_pendulum, config_to_json, parse_config, Config, NoiseKind};
use mlqg::moments::{build_operator, expected_q, stability_diagnostics, steady_state, SteadyStateMoments};
use mlqg::sim::{self, AnomalySpec, SimConfig, BURN_IN};
use mlqg::synthesis::{Compensator, CompensatorGains, SolverOptions};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::manifest::{sha256_hex, unix_now, OutputDir, RunManifest};
use crate::{AnomalyArgs, CliError, CommonArgs};

const PENDULUM_DEFAULT_SIGMA2: f64 = 0.06;

/// Config after flag overrides, with provenance for the manifest.
struct Loaded {
    config: Config,
    source: String,
    sha256: String,
}

impl Loaded {
    fn seed(&self) -> u64 {
        self.config.options.seed
    }

    fn noise(&self) -> NoiseKind {
        self.config.options.noise_kind
    }
}

fn check_sigma2(s2: f64) -> Result<(), CliError> {
    if s2.is_finite() && s2 >= 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("multiplicative variance must be finite and >= 0, got {s2}")))
    }
}

fn with_sigma2(config: &Config, s2: f64) -> Result<Config, CliError> {
    check_sigma2(s2)?;
    if config.system.a_dirs.is_empty() && config.system.c_dirs.is_empty() {
        return Err(CliError::Usage(
            "--sigma2 needs at least one A or C multiplicative noise direction in the config".to_string(),
        ));
    }
    let mut out = config.clone();
    out.system = config.system.with_sigma2(s2);
    Ok(out)
}

fn load(args: &CommonArgs) -> Result<Loaded, CliError> {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".to_string()));
    }
    if args.moments == 0 {
        return Err(CliError::Usage("--moments must be at least 1".to_string()));
    }
    if !(args.rate > 0.0 && args.rate < 1.0) {
        return Err(CliError::Usage(format!("--rate must lie in (0, 1), got {}", args.rate)));
    }
    let mut loaded = match (&args.config, args.pendulum) {
        (Some(path), _) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
            let mut config = parse_config(&text)?;
            if let Some(s2) = args.sigma2 {
                config = with_sigma2(&config, s2)?;
            }
            Loaded {
                config,
                source: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            }
        }
        (None, true) => {
            let s2 = args.sigma2.unwrap_or(PENDULUM_DEFAULT_SIGMA2);
            check_sigma2(s2)?;
            let config = build_pendulum(s2, s2)?;
            let text = config_to_json(&config);
            Loaded {
                sha256: sha256_hex(text.as_bytes()),
                config,
                source: "pendulum".to_string(),
            }
        }
        (None, false) => return Err(CliError::Usage("one of --config or --pendulum is required".to_string())),
    };
    if let Some(seed) = args.seed {
        loaded.config.options.seed = seed;
    }
    if let Some(noise) = args.noise {
        loaded.config.options.noise_kind = noise;
    }
    Ok(loaded)
}

fn manifest(subcommand: &'static str, loaded: &Loaded, started: f64) -> RunManifest {
    RunManifest {
        subcommand,
        config: loaded.source.clone(),
        config_sha256: loaded.sha256.clone(),
        seed: loaded.seed(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: started,
        outputs: Vec::new(),
    }
}

fn require_converged(compensator: Compensator, gains: CompensatorGains) -> Result<CompensatorGains, CliError> {
    if gains.converged {
        Ok(gains)
    } else {
        Err(CliError::NotConverged {
            compensator: compensator.name(),
            iterations: gains.iterations,
            residual: gains.residual,
        })
    }
}

fn steady(loaded: &Loaded, compensator: Compensator) -> Result<(CompensatorGains, SteadyStateMoments), CliError> {
    let sys = &loaded.config.system;
    let gains = compensator.synthesize(sys, &loaded.config.weights, &SolverOptions::default())?;
    let gains = require_converged(compensator, gains)?;
    let ss = steady_state(&build_operator(sys, &gains.k, &gains.l)?, sys)?;
    Ok((gains, ss))
}

fn sim_config(args: &CommonArgs, loaded: &Loaded, anomaly: Option<AnomalySpec>, alpha: Option<f64>) -> SimConfig {
    SimConfig {
        steps: args.steps,
        seed: loaded.seed(),
        stream: 0,
        noise_kind: loaded.noise(),
        mode: args.mode,
        true_a: loaded.config.options.true_a.clone(),
        anomaly,
        alpha,
    }
}

fn anomaly_spec(a: &AnomalyArgs) -> Option<AnomalySpec> {
    match (a.anomaly_start, a.anomaly_bias) {
        (Some(start), Some(bias)) => Some(AnomalySpec {
            start,
            channel: a.anomaly_channel,
            bias,
        }),
        _ => None,
    }
}

fn rows(m: &Matrix) -> Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn synthesize(args: &CommonArgs) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let gains = args
        .compensator
        .synthesize(&loaded.config.system, &loaded.config.weights, &SolverOptions::default())?;
    let mut body = serde_json::to_value(&gains).expect("gains serialize");
    body["compensator"] = json!(args.compensator.name());
    let mut out = OutputDir::create(&args.out)?;
    out.write("gains.json", &pretty(&body))?;
    out.finish(manifest("synthesize", &loaded, started))?;
    require_converged(args.compensator, gains).map(|_| ())
}

pub fn analyze(args: &CommonArgs) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let sys = &loaded.config.system;
    let (gains, ss) = steady(&loaded, args.compensator)?;
    let diag = stability_diagnostics(sys, Some(&gains.k), Some(&gains.l))?;
    let n = sys.n();
    let body = json!({
        "compensator": args.compensator.name(),
        "rho_open": diag.rho_open,
        "rho_closed": diag.rho_closed,
        "rho_H": ss.rho_h,
        "mean_square_stable": diag.mean_square_stable(),
        "mean_square_stabilized": diag.mean_square_stabilized(),
        "mean_square_compensated": diag.mean_square_compensated(),
        "Sigma_r": rows(&ss.sigma_r),
        "Sigma_x_inf": rows(&matricize(ss.x_inf.as_slice(), n, n)?),
        "Sigma_e_inf": rows(&ss.sigma_x_err),
        "E_q": expected_q(&ss, &mlqg::matops::Vector::zeros(n), &sys.c_bar)?,
        "riccati_iterations": gains.iterations,
    });
    let mut out = OutputDir::create(&args.out)?;
    out.write("analysis.json", &pretty(&body))?;
    out.finish(manifest("analyze", &loaded, started))
}

pub fn simulate(args: &CommonArgs, alpha: Option<f64>, anomaly: &AnomalyArgs) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let (gains, ss) = steady(&loaded, args.compensator)?;
    let cfg = sim_config(args, &loaded, anomaly_spec(anomaly), alpha);
    let trace = sim::simulate(&loaded.config.system, &gains, &ss.sigma_r, &cfg)?;
    let mut out = OutputDir::create(&args.out)?;
    out.write_with("trace.csv", |w| trace.write_csv(w))?;
    out.finish(manifest("simulate", &loaded, started))
}

pub fn tune(args: &CommonArgs) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let (gains, ss) = steady(&loaded, args.compensator)?;
    let cfg = sim_config(args, &loaded, None, None);
    let q = sim::simulate_q(&loaded.config.system, &gains, &ss.sigma_r, &cfg)?;
    let moments = sim::raw_moments(&q[BURN_IN.min(q.len())..], args.moments)?;
    let report = detector::tune_threshold(&moments, args.rate)?;
    let mut out = OutputDir::create(&args.out)?;
    out.write("threshold.json", &pretty(&report.to_json_value()))?;
    out.finish(manifest("tune", &loaded, started))
}

fn read_threshold(path: &Path) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    v.get("alpha_star")
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::Usage(format!("{}: missing numeric `alpha_star`", path.display())))
}

pub fn evaluate(
    args: &CommonArgs,
    alpha: Option<f64>,
    threshold: Option<&Path>,
    anomaly: &AnomalyArgs,
) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let (gains, ss) = steady(&loaded, args.compensator)?;
    let given = match (alpha, threshold) {
        (Some(a), _) => Some((a, "flag")),
        (None, Some(p)) => Some((read_threshold(p)?, "threshold-file")),
        (None, None) => None,
    };
    if let Some((a, _)) = given {
        if a.is_nan() || a <= 0.0 {
            return Err(CliError::Usage(format!("threshold must be positive, got {a}")));
        }
    }
    let injected = anomaly_spec(anomaly);
    let mut cfg = sim_config(args, &loaded, injected, given.map(|g| g.0));
    let mut trace = sim::simulate(&loaded.config.system, &gains, &ss.sigma_r, &cfg)?;
    let (alpha, source) = match given {
        Some(g) => g,
        None => {
            let moments = sim::empirical_moments(&trace, args.moments)?;
            let a = detector::tune_threshold(&moments, args.rate)?.alpha_star;
            cfg.alpha = Some(a);
            trace.alarm = detector::detect(&trace.q, a).alarms;
            (a, "tuned")
        }
    };
    let stats = sim::empirical_stats(&trace, alpha)?;
    let after = injected.map(|a| a.start);
    let first_after = after.and_then(|s| stats.alarm_times.iter().copied().find(|&k| k >= s));
    let body = json!({
        "alpha": alpha,
        "alpha_source": source,
        "steps": trace.len(),
        "burn_in": BURN_IN,
        "false_alarm_rate": stats.false_alarm_rate,
        "alarm_count": stats.alarm_times.len(),
        "first_alarm": stats.alarm_times.first(),
        "first_alarm_after_anomaly": first_after,
        "detection_delay": first_after.zip(after).map(|(k, s)| k - s),
        "mean_q": stats.mean_q,
        "anomaly": injected.map(|a| json!({"start": a.start, "channel": a.channel, "bias": a.bias})),
    });
    let mut out = OutputDir::create(&args.out)?;
    out.write_with("alarms.csv", |w| {
        writeln!(w, "k,q,alarm")?;
        for (k, (q, a)) in trace.q.iter().zip(&trace.alarm).enumerate() {
            writeln!(w, "{k},{q},{}", u8::from(*a))?;
        }
        Ok(())
    })?;
    out.write("evaluation.json", &pretty(&body))?;
    out.finish(manifest("evaluate", &loaded, started))
}

fn compare_options(args: &CommonArgs, loaded: &Loaded, stream: u64) -> CompareOptions {
    CompareOptions {
        target_rate: args.rate,
        steps: args.steps,
        seed: loaded.seed(),
        stream,
        moment_order: args.moments,
        noise_kind: loaded.noise(),
        mode: args.mode,
        true_a: loaded.config.options.true_a.clone(),
        solver: SolverOptions::default(),
    }
}

pub fn compare(args: &CommonArgs) -> Result<(), CliError> {
    let started = unix_now();
    let loaded = load(args)?;
    let opts = compare_options(args, &loaded, 0);
    let report = compare_compensators(&loaded.config.system, &loaded.config.weights, &opts)?;
    let mut out = OutputDir::create(&args.out)?;
    out.write("compare.json", report.to_json().as_bytes())?;
    out.finish(manifest("compare", &loaded, started))
}

pub const SWEEP_HEADER: &str =
    "sigma2,compensator,converged,rho_H,Sigma_r,E_q,alpha_star,empirical_false_alarm_rate";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| x.to_string())
}

fn sweep_row(s2: f64, s: &CompensatorSummary) -> String {
    let sigma_r = s
        .sigma_r
        .as_ref()
        .map(|m| if m.len() == 1 { m[(0, 0)] } else { m.norm() });
    let mean_q = s.moments.as_ref().map(|m| m[0]);
    format!(
        "{s2},{},{},{},{},{},{},{}",
        s.compensator.name(),
        s.converged,
        cell(s.rho_h),
        cell(sigma_r),
        cell(mean_q),
        cell(s.alpha_star().map(detector::round_threshold)),
        cell(s.empirical_false_alarm_rate),
    )
}

pub fn sweep(args: &CommonArgs, grid: &[f64], compensators: &[Compensator]) -> Result<(), CliError> {
    let started = unix_now();
    if args.sigma2.is_some() {
        return Err(CliError::Usage("--sigma2 cannot be combined with --grid".to_string()));
    }
    for &s2 in grid {
        check_sigma2(s2)?;
    }
    let loaded = load(args)?;
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &s2)| -> Result<Vec<String>, CliError> {
            let config = if args.pendulum {
                let mut c = build_pendulum(s2, s2)?;
                c.options = loaded.config.options.clone();
                c
            } else {
                with_sigma2(&loaded.config, s2)?
            };
            let opts = compare_options(args, &loaded, i as u64);
            compensators
                .iter()
                .map(|&c| {
                    let s = evaluate_compensator(c, &config.system, &config.weights, &opts)?;
                    Ok(sweep_row(s2, &s))
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for line in rows.into_iter().flatten() {
        text.push_str(&line);
        text.push('\n');
    }
    let mut out = OutputDir::create(&args.out)?;
    out.write("sweep.csv", text.as_bytes())?;
    out.finish(manifest("sweep", &loaded, started))
}
