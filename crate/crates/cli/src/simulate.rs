//! `smolux simulate`: solve, check the runtime certificates, write CSV/snapshots/manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;
use smolux_core::kernel_field::write_snapshot;
use smolux_core::solver::{solve, solve_positive, transport_std_err, validate_bound, BoundCurve, CurveMode};
use smolux_core::{Error, Result};

use crate::report::{self, fmt_f64, Manifest};
use crate::scenario::{Built, Scenario};

/// Entries below this count as a positivity violation.
pub const POSITIVITY_TOL: f64 = -1e-10;

pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

pub fn run(s: &Scenario, b: &Built, config_text: &str, out: &Path) -> Result<Outcome> {
    let horizon = s.horizon;
    let result = if s.solver.positivity {
        solve_positive(&b.mu0, &b.model, &b.reaction, &b.cfg, horizon)
    } else {
        solve(&b.mu0, &b.model, &b.reaction, &b.cfg, horizon)
    };
    let (traj, conv) = match result {
        Ok(v) => v,
        Err(e @ Error::NonConvergence { .. }) => {
            report::write(out, "nonconvergence.txt", &format!("{e}\n"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let m_bound = b.reaction.bound_m();
    let c = b.base.conv_constant().unwrap_or(0.0);
    let m = b.base.total_mass();
    let z0 = b.mu0.norm();
    let mode = if b.reaction.multi.is_some() { CurveMode::Multi } else { CurveMode::Quadratic };
    let curve = BoundCurve::new(b.model.eps_floor, m_bound, c, m, z0, mode);
    let se = transport_std_err(&b.mu0, &b.model, &b.cfg.mc, &traj.times)?;
    let mc_margin = traj
        .times
        .iter()
        .zip(&se)
        .map(|(&t, &e)| {
            let z = curve.eval(t);
            if z.is_finite() && z > 0.0 {
                3.0 * e / z
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    let allowance = b.cfg.dt_quad * m_bound * (c / 2.0 + m) * z0 * z0;
    let bound = validate_bound(&traj, &curve, mc_margin, allowance);
    let threshold = b.threshold();
    let bound_applies = z0 < threshold;
    let min_entry = traj.min_entry();

    let mut csv = String::from("t,norm,z_bound,min_f,moment0,moment1,picard_sweeps,rho\n");
    for (j, (&t, f)) in traj.times.iter().zip(&traj.fields).enumerate() {
        let (m0, m1) = f.moments();
        let seg = conv.segment_at(t);
        let sweeps = seg.map_or(0, |s| s.sweeps);
        let rho = seg.and_then(|s| s.last_rho).unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_f64(t),
            fmt_f64(f.norm()),
            fmt_f64(bound.rows[j].z),
            fmt_f64(f.min_entry()),
            fmt_f64(m0),
            fmt_f64(m1),
            sweeps,
            fmt_f64(rho)
        ));
    }
    report::write(out, "trajectory.csv", &csv)?;
    report::write(out, "convergence.csv", &conv.to_csv())?;
    report::write(out, "bound.csv", &bound.to_csv())?;

    if s.output.snapshot_every > 0 {
        let dir = out.join("snapshots");
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        for (j, f) in traj.fields.iter().enumerate().step_by(s.output.snapshot_every) {
            let path = dir.join(format!("field_{j:05}.bin"));
            let file = File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            write_snapshot(f, BufWriter::new(file))?;
        }
    }

    let positivity_ok = !s.solver.positivity || min_entry >= POSITIVITY_TOL;
    let bound_ok = !bound_applies || bound.pass;
    let manifest = Manifest {
        command: "simulate",
        config_text,
        seed: b.seed,
        dt: b.cfg.mc.dt,
        dt_quad: b.cfg.dt_quad,
        n_paths: b.cfg.mc.n_paths,
        extra: json!({
            "norm0": z0,
            "threshold": threshold,
            "bound_applies": bound_applies,
            "bound_pass": bound.pass,
            "bound_worst_margin": bound.worst_margin,
            "mc_margin": mc_margin,
            "quadrature_allowance": allowance,
            "curve_horizon": bound.horizon,
            "min_entry": min_entry,
            "positivity": s.solver.positivity,
            "alpha": conv.alpha,
            "lipschitz_estimate": conv.lipschitz_estimate,
            "initial_segment": conv.initial_segment,
            "continuation_depth": conv.depth,
            "max_residual": conv.max_residual(),
        }),
    };
    report::write(out, "manifest.json", &manifest.to_json())?;

    let mut summary = format!(
        "simulated {} steps to t = {horizon}; ||mu0|| = {z0:.6e}, threshold = {threshold:.6e}\n",
        traj.len() - 1
    );
    if bound_applies {
        summary.push_str(&format!(
            "bound certificate: {} (worst margin {:.3e})\n",
            if bound.pass { "PASS" } else { "FAIL" },
            bound.worst_margin
        ));
    } else {
        summary.push_str("bound certificate: not applicable (initial norm above threshold)\n");
    }
    if s.solver.positivity {
        summary.push_str(&format!("positivity: {} (min entry {min_entry:.3e})\n", if positivity_ok { "PASS" } else { "FAIL" }));
    }
    Ok(Outcome { pass: bound_ok && positivity_ok, summary })
}
