//! The hypothesis sheet: every certification a scenario relies on.

use smolux_core::dynamics::{certify_divergence_bound, certify_ellipticity, default_samples};
use smolux_core::mass_measure::DEFAULT_ORDER_CAP;
use smolux_core::reaction::certify_scattering;
use smolux_core::{Error, Result};

use crate::report::fmt_f64;
use crate::scenario::Built;

pub const CHECKS: [&str; 6] = [
    "base_convolution",
    "base_power_n",
    "divergence_floor",
    "ellipticity",
    "scattering",
    "fragmentation_rate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Waived,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Waived => "WAIVED",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub status: Status,
}

pub fn validate_waivers(waive: &[String]) -> Result<()> {
    for w in waive {
        if !CHECKS.contains(&w.as_str()) {
            return Err(Error::Config(format!("unknown check {w:?} in waive list; known checks: {}", CHECKS.join(", "))));
        }
    }
    Ok(())
}

fn row(name: &'static str, value: f64, bound: f64, pass: bool, waive: &[String]) -> Check {
    let status = if waive.iter().any(|w| w == name) {
        Status::Waived
    } else if pass {
        Status::Pass
    } else {
        Status::Fail
    };
    Check { name, value, bound, status }
}

/// Runs every certification referenced by the scenario.
pub fn run_checks(b: &Built, waive: &[String]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let c = b.base.conv_constant().unwrap_or(f64::NAN);
    let r2 = b.base.conv_ratio().unwrap_or(f64::NAN);
    out.push(row("base_convolution", r2, c, b.base_ok, waive));

    if let Some(multi) = &b.reaction.multi {
        let order = multi.n_max();
        let cert = b.base.certify_convolution_constant(order, DEFAULT_ORDER_CAP.max(order))?;
        out.push(row("base_power_n", cert.ratio, c.powi(order as i32 - 1), cert.holds_power_n_minus_1, waive));
    }

    let samples = default_samples(&b.grid, &b.base);
    let div = certify_divergence_bound(&b.model, &samples)?;
    out.push(row("divergence_floor", div.min_div, div.eps_floor, div.pass, waive));
    let ell = certify_ellipticity(&b.model, &samples)?;
    out.push(row("ellipticity", ell.min_eig, ell.alpha, ell.pass, waive));

    if let Some(s) = &b.reaction.scat {
        let cert = certify_scattering(s, &b.base)?;
        out.push(row("scattering", cert.constant, cert.declared.unwrap_or(cert.constant), cert.pass, waive));
    }
    if let Some(f) = &b.reaction.frag {
        let rep = f.check_rate_condition(b.model.eps_floor);
        out.push(row("fragmentation_rate", rep.value, rep.bound, rep.pass, waive));
    }
    Ok(out)
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.status != Status::Fail)
}

pub fn table(checks: &[Check]) -> String {
    let mut s = format!("{:<20} {:>24} {:>24}  {}\n", "check", "value", "bound", "status");
    for c in checks {
        s.push_str(&format!("{:<20} {:>24} {:>24}  {}\n", c.name, fmt_f64(c.value), fmt_f64(c.bound), c.status.label()));
    }
    s
}

pub fn csv(checks: &[Check]) -> String {
    let mut s = String::from("check,value,bound,status\n");
    for c in checks {
        s.push_str(&format!("{},{},{},{}\n", c.name, fmt_f64(c.value), fmt_f64(c.bound), c.status.label()));
    }
    s
}
