//! `smolux validate`: oracle and property suites on a scenario.

use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use smolux_core::dynamics::deterministic_flow;
use smolux_core::feynman_kac::{apply_semigroup, continuity_check, decay_check, McConfig};
use smolux_core::kernel_field::KernelField;
use smolux_core::reaction::coag_tv_lipschitz_check;
use smolux_core::rng::aux_stream;
use smolux_core::solver::{reference_homogeneous_solve, solve, SolverMode};
use smolux_core::{Error, Result};

use crate::report::fmt_f64;
use crate::scenario::{Built, Scenario, ValidationSpec};

pub const SUITES: [&str; 5] = ["semigroup", "continuity", "convection_oracle", "homogeneous_oracle", "lipschitz"];

pub struct SuiteResult {
    pub suite: &'static str,
    pub csv: String,
    pub pass: bool,
    pub details: Value,
}

/// Parameters used when `--suite` names a suite the scenario does not configure.
pub fn default_spec(name: &str) -> Result<ValidationSpec> {
    Ok(match name {
        "semigroup" => ValidationSpec::Semigroup { times: vec![0.25, 0.5, 1.0] },
        "continuity" => ValidationSpec::Continuity { times: vec![0.5, 0.25, 0.125, 0.0625, 0.03125, 0.0] },
        "convection_oracle" => ValidationSpec::ConvectionOracle { t: 1.0, dt_levels: vec![1e-3, 5e-4, 2.5e-4] },
        "homogeneous_oracle" => ValidationSpec::HomogeneousOracle { dt_levels: vec![1e-3, 5e-4], tol: 1e-3 },
        "lipschitz" => ValidationSpec::Lipschitz { trials: 1000 },
        other => return Err(Error::Config(format!("unknown suite {other:?}; known suites: {}", SUITES.join(", ")))),
    })
}

pub fn suite_name(spec: &ValidationSpec) -> &'static str {
    match spec {
        ValidationSpec::Semigroup { .. } => "semigroup",
        ValidationSpec::Continuity { .. } => "continuity",
        ValidationSpec::ConvectionOracle { .. } => "convection_oracle",
        ValidationSpec::HomogeneousOracle { .. } => "homogeneous_oracle",
        ValidationSpec::Lipschitz { .. } => "lipschitz",
    }
}

pub fn run(spec: &ValidationSpec, s: &Scenario, b: &Built) -> Result<SuiteResult> {
    match spec {
        ValidationSpec::Semigroup { times } => semigroup(times, b),
        ValidationSpec::Continuity { times } => continuity(times, b),
        ValidationSpec::ConvectionOracle { t, dt_levels } => convection(*t, dt_levels, b),
        ValidationSpec::HomogeneousOracle { dt_levels, tol } => homogeneous(dt_levels, *tol, s, b),
        ValidationSpec::Lipschitz { trials } => lipschitz(*trials, b),
    }
}

fn semigroup(times: &[f64], b: &Built) -> Result<SuiteResult> {
    let mc = &b.cfg.mc;
    let eps = b.model.eps_floor;
    let mut csv = String::from("t,lhs,rhs,margin,max_weight,weight_bound,n_paths,dt,seed,pass\n");
    let mut pass = true;
    let mut worst_rel = 0.0f64;
    for &t in times {
        let r = decay_check(&b.model, &b.mu0, t, mc)?;
        let weight_bound = (-(eps - smolux_core::dynamics::CERT_TOL) * t).exp() * (1.0 + 1e-12);
        let weight_ok = !b.model.divergence_certified || r.max_weight <= weight_bound;
        let ok = r.pass && weight_ok;
        pass &= ok;
        if r.rhs > 0.0 {
            worst_rel = worst_rel.max((r.lhs - r.rhs) / r.rhs);
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(t),
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            fmt_f64(r.margin),
            fmt_f64(r.max_weight),
            fmt_f64(weight_bound),
            mc.effective_paths(&b.model),
            fmt_f64(mc.dt),
            mc.seed,
            ok
        ));
    }
    Ok(SuiteResult { suite: "semigroup", csv, pass, details: json!({ "worst_relative_excess": worst_rel }) })
}

fn continuity(times: &[f64], b: &Built) -> Result<SuiteResult> {
    let r = continuity_check(&b.model, &b.mu0, times, &b.cfg.mc)?;
    let mut csv = String::from("t,diff,envelope\n");
    for row in &r.rows {
        csv.push_str(&format!("{},{},{}\n", fmt_f64(row.t), fmt_f64(row.diff), fmt_f64(row.envelope)));
    }
    Ok(SuiteResult {
        suite: "continuity",
        csv,
        pass: r.pass,
        details: json!({ "intercept": r.intercept, "slope": r.slope }),
    })
}

/// Least-squares slope and R^2 of `log err` against `log dt`.
pub fn loglog_fit(dt: &[f64], err: &[f64]) -> (f64, f64) {
    let x: Vec<f64> = dt.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Sup of `|a - b|` over all entries.
fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flow_field(b: &Built, t: f64, dt: f64) -> Result<(KernelField<f64>, Vec<Vec<f64>>)> {
    let grid = b.mu0.grid().clone();
    let n_mass = b.mu0.n_mass();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.n_sites())
        .into_par_iter()
        .map(|site| {
            let x = grid.coords(site);
            let p = deterministic_flow(&b.model, &x, b.base.grid().mass(0), t, dt)?;
            let st = grid.stencil(&p.endpoint)?;
            let vals = (0..n_mass).map(|m| p.weight * b.mu0.eval_stencil(&st, m)).collect();
            Ok((vals, p.endpoint))
        })
        .collect::<Result<_>>()?;
    let (vals, ends): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    let field = KernelField::from_values(grid, b.base.clone(), vals.into_iter().flatten().collect())?;
    Ok((field, ends))
}

fn convection(t: f64, dt_levels: &[f64], b: &Built) -> Result<SuiteResult> {
    if !b.model.is_deterministic() {
        return Err(Error::Config("convection_oracle needs sigma = zero".into()));
    }
    if dt_levels.len() < 2 {
        return Err(Error::Config("convection_oracle needs at least two dt levels".into()));
    }
    let finest = dt_levels.iter().copied().fold(f64::INFINITY, f64::min);
    let (oracle, oracle_ends) = flow_field(b, t, finest / 8.0)?;
    let scale = oracle.norm().max(f64::MIN_POSITIVE);

    let mut csv = String::from("dt,euler_rel_error,rk4_dt,rk4_endpoint_error\n");
    let mut euler = Vec::new();
    let mut rk4 = Vec::new();
    let rk4_levels: Vec<f64> = dt_levels.iter().map(|d| d * 50.0).collect();
    for (&dt, &dt4) in dt_levels.iter().zip(&rk4_levels) {
        let mc = McConfig { n_paths: 1, dt, seed: b.seed, antithetic: false };
        let est = apply_semigroup(&b.model, &b.mu0, t, &mc)?;
        let e = sup_diff(est.values(), oracle.values()) / scale;
        let (_, ends) = flow_field(b, t, dt4)?;
        let e4 = ends
            .iter()
            .zip(&oracle_ends)
            .map(|(a, o)| sup_diff(a, o))
            .fold(0.0, f64::max);
        csv.push_str(&format!("{},{},{},{}\n", fmt_f64(dt), fmt_f64(e), fmt_f64(dt4), fmt_f64(e4)));
        euler.push(e);
        rk4.push(e4);
    }
    let (slope, r2) = if euler.iter().all(|&e| e > 0.0) { loglog_fit(dt_levels, &euler) } else { (f64::NAN, f64::NAN) };
    let (rk4_order, _) = if rk4.iter().all(|&e| e > 0.0) { loglog_fit(&rk4_levels, &rk4) } else { (f64::NAN, f64::NAN) };
    let coarse = dt_levels.iter().copied().fold(0.0, f64::max);
    let coarse_err = euler[dt_levels.iter().position(|&d| d == coarse).unwrap_or(0)];
    // an exact Euler (e.g. zero drift) has nothing to fit
    let order_ok = euler.iter().all(|&e| e <= 1e-13) || ((slope - 1.0).abs() <= 0.15 && r2 >= 0.99);
    let pass = coarse_err <= 0.02 && order_ok;
    Ok(SuiteResult {
        suite: "convection_oracle",
        csv,
        pass,
        details: json!({ "euler_sup_error_coarsest": coarse_err, "euler_order": slope, "euler_r2": r2, "rk4_order": rk4_order }),
    })
}

fn homogeneous(dt_levels: &[f64], tol: f64, s: &Scenario, b: &Built) -> Result<SuiteResult> {
    if !b.model.is_deterministic() || b.model.linear_constant_parts().is_none_or(|(a, c, _)| {
        a.iter().flatten().any(|&v| v != 0.0) || c.iter().any(|&v| v != 0.0)
    }) {
        return Err(Error::Config("homogeneous_oracle needs zero drift and zero diffusion".into()));
    }
    if dt_levels.len() < 2 {
        return Err(Error::Config("homogeneous_oracle needs at least two dt levels".into()));
    }
    let c0 = b.mu0.site(0).to_vec();
    let finest = dt_levels.iter().copied().fold(f64::INFINITY, f64::min);
    let (_, states) = reference_homogeneous_solve(&c0, &b.reaction, &b.base, s.horizon, finest / 4.0)?;
    let reference = states.last().expect("reference has the initial state");

    let mut csv = String::from("dt,sup_diff\n");
    let mut errs = Vec::new();
    for &dt in dt_levels {
        let mut cfg = b.cfg.clone();
        cfg.mode = SolverMode::StepwiseMild;
        cfg.dt_quad = dt;
        cfg.mc = McConfig { n_paths: 1, dt, seed: b.seed, antithetic: false };
        let (traj, _) = solve(&b.mu0, &b.model, &b.reaction, &cfg, s.horizon)?;
        let last = traj.last();
        let e = (0..last.n_sites()).map(|site| sup_diff(last.site(site), reference)).fold(0.0, f64::max);
        csv.push_str(&format!("{},{}\n", fmt_f64(dt), fmt_f64(e)));
        errs.push(e);
    }
    let (order, r2) = loglog_fit(dt_levels, &errs);
    let coarse = dt_levels.iter().copied().fold(0.0, f64::max);
    let coarse_err = errs[dt_levels.iter().position(|&d| d == coarse).unwrap_or(0)];
    let pass = coarse_err <= tol && (order - 1.0).abs() <= 0.2;
    Ok(SuiteResult {
        suite: "homogeneous_oracle",
        csv,
        pass,
        details: json!({ "sup_diff_coarsest": coarse_err, "order": order, "r2": r2 }),
    })
}

fn lipschitz(trials: usize, b: &Built) -> Result<SuiteResult> {
    let kernel = match (&b.reaction.coag, &b.reaction.multi) {
        (Some(k), _) => k,
        (None, Some(m)) => m.binary(),
        _ => return Err(Error::Config("lipschitz suite needs a coagulation kernel".into())),
    };
    let n = b.base.n_mass();
    let scale = b.mu0.norm().max(1.0);
    let mut csv = String::from("trial,lhs,rhs,rhs_sharp,pass,pass_sharp\n");
    let (mut fails, mut fails_sharp) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = aux_stream(b.seed, 1000 + trial as u64);
        let f: Vec<f64> = (0..n).map(|_| scale * rng.random::<f64>()).collect();
        let g: Vec<f64> = (0..n).map(|_| scale * rng.random::<f64>()).collect();
        let r = coag_tv_lipschitz_check(kernel, &f, &g, &b.base)?;
        fails += usize::from(!r.pass);
        fails_sharp += usize::from(!r.pass_sharp);
        if r.rhs > 0.0 {
            worst = worst.max(r.lhs / r.rhs);
        }
        csv.push_str(&format!(
            "{trial},{},{},{},{},{}\n",
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            fmt_f64(r.rhs_sharp),
            r.pass,
            r.pass_sharp
        ));
    }
    Ok(SuiteResult {
        suite: "lipschitz",
        csv,
        pass: fails == 0,
        details: json!({ "trials": trials, "violations": fails, "violations_sharp": fails_sharp, "worst_ratio": worst }),
    })
}
