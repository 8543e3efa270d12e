//! Monte Carlo evaluation of the game payoff, realization of the
//! contact-based stopping rule on simulated paths, and optimality
//! cross-checks of a PDE value against control batteries.

use std::io::Write;

use crate::control::ControlPath;
use crate::error::{Result, SglError};
use crate::model::{PayoffSpec, SdeModel};
use crate::par::{indexed_map, mean_ci};
use crate::pde::PdeSolution;
use crate::rng::derive_seed;
use crate::simulate::{euler_controlled, SamplePath};

/// Stopping rule applied pathwise.
pub enum StopRule<'a> {
    /// Stop at a fixed elapsed time (snapped to the grid).
    FixedTime(f64),
    /// First grid time where the value touches the obstacle within
    /// `tol`, checked on both the post state and the pre (left-limit)
    /// state; the horizon if no contact occurs.
    Contact { value: &'a PdeSolution, tol: f64 },
}

fn grid_index_of(path: &SamplePath, s: f64) -> Result<usize> {
    let dt = path.dt();
    let idx = (s / dt).round() as usize;
    if idx >= path.len() || (path.times[idx] - s).abs() > dt * 1e-3 + 1e-12 {
        return Err(SglError::StopOffGrid(s));
    }
    Ok(idx)
}

/// Discounted payoff of one realized path under one control and one stop
/// time: `e^{-r s} g + int_0^s e^{-r u} h du + int_[0,s] e^{-r u} f^gamma d nu`.
/// The control integral is over the closed interval: the atom at time 0
/// and any atom exactly at the stop are included. `gamma = 0` recovers
/// the plain cost rate `f`.
pub fn payoff_one_path(
    path: &SamplePath,
    control: &ControlPath,
    stop_time: f64,
    payoffs: &PayoffSpec,
    t_start: f64,
    gamma: f64,
) -> Result<f64> {
    let si = grid_index_of(path, stop_time)?;
    let dt = path.dt();
    let r = payoffs.r;
    let stop = path.times[si];

    let mut total = (-r * stop).exp() * (payoffs.g)(t_start + stop, path.post(si));

    // running payoff over [0, stop)
    for i in 0..si {
        let s = path.times[i];
        total += (-r * s).exp() * (payoffs.h)(t_start + s, path.post(i)) * dt;
    }

    // control cost: atoms snapped to the grid, closed interval [0, stop]
    for a in &control.atoms {
        let idx = ((a.time / dt).round() as usize).min(path.len() - 1);
        if idx <= si {
            let s = path.times[idx];
            total += (-r * s).exp() * payoffs.f_gamma(gamma, t_start + s) * a.size;
        }
    }
    // absolutely continuous part over [0, stop)
    for seg in &control.segments {
        for i in 0..si {
            let s = path.times[i];
            let overlap = (s + dt).min(seg.end) - s.max(seg.start);
            if overlap > 0.0 {
                total += (-r * s).exp() * payoffs.f_gamma(gamma, t_start + s) * seg.rate * overlap;
            }
        }
    }
    Ok(total)
}

/// First grid time at which the value grid touches the obstacle along
/// the path (post state, or pre state for the left-limit variant),
/// within `tol_contact`; the final grid time otherwise. Off-grid states
/// are clamped to the box (count returned for diagnostics).
pub fn realize_theta_star(
    value: &PdeSolution,
    path: &SamplePath,
    t_start: f64,
    tol_contact: f64,
) -> (f64, usize) {
    let mut clamps = 0usize;
    let g = &value.payoffs.g;
    for i in 0..path.len() {
        let s = path.times[i];
        let t = t_start + s;
        for state in [path.post(i), path.pre(i)] {
            let (v, clamped) = value.interpolate_detail(t, state);
            if clamped {
                clamps += 1;
            }
            if v - g(t, state) <= tol_contact {
                return (s, clamps);
            }
        }
    }
    (*path.times.last().unwrap(), clamps)
}

/// Sample mean and 95% CI half-width of the payoff over independent
/// paths, with the stop rule realized per path.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value(
    model: &SdeModel,
    payoffs: &PayoffSpec,
    control: &ControlPath,
    rule: &StopRule,
    t_start: f64,
    x: &[f64],
    gamma: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_paths < 2 {
        return Err(SglError::InvalidArgument("need n_paths >= 2".into()));
    }
    let results: Vec<Result<f64>> = indexed_map(n_paths, |i| {
        let path = euler_controlled(model, control, x, gamma, dt, derive_seed(seed, "path", i as u64))?;
        let stop = match rule {
            StopRule::FixedTime(s) => path.times[grid_index_of(&path, *s)?],
            StopRule::Contact { value, tol } => realize_theta_star(value, &path, t_start, *tol).0,
        };
        payoff_one_path(&path, control, stop, payoffs, t_start, gamma)
    });
    let mut vals = Vec::with_capacity(n_paths);
    for r in results {
        vals.push(r?);
    }
    Ok(mean_ci(&vals))
}

/// One row of the optimality cross-check.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrosscheckRow {
    pub control_id: usize,
    pub j_hat: f64,
    pub ci: f64,
    pub v_ref: f64,
    pub margin: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CrosscheckReport {
    pub rows: Vec<CrosscheckRow>,
    pub disc_tol: f64,
}

impl CrosscheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| !r.violated)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "control_id,J_hat,ci,v_ref,margin,violated")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                r.control_id, r.j_hat, r.ci, r.v_ref, r.margin, r.violated
            )?;
        }
        Ok(())
    }
}

/// For each battery control, estimates the payoff under the contact
/// stopping rule realized from `value` and flags entries falling below
/// `v(t,x) - (3 CI + disc_tol)`: the stopper's rule must secure at least
/// the value no matter the control.
#[allow(clippy::too_many_arguments)]
pub fn crosscheck_optimality(
    value: &PdeSolution,
    battery: &[ControlPath],
    t_start: f64,
    x: &[f64],
    tol_contact: f64,
    disc_tol: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<CrosscheckReport> {
    let v_ref = value.interpolate(t_start, x);
    let mut rows = Vec::with_capacity(battery.len());
    for (id, control) in battery.iter().enumerate() {
        let rule = StopRule::Contact {
            value,
            tol: tol_contact,
        };
        let (j_hat, ci) = estimate_value(
            &value.model,
            &value.payoffs,
            control,
            &rule,
            t_start,
            x,
            value.gamma,
            n_paths,
            dt,
            derive_seed(seed, "battery", id as u64),
        )?;
        let margin = j_hat - v_ref;
        rows.push(CrosscheckRow {
            control_id: id,
            j_hat,
            ci,
            v_ref,
            margin,
            violated: margin < -(3.0 * ci + disc_tol),
        });
    }
    Ok(CrosscheckReport { rows, disc_tol })
}
