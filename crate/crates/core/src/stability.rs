//! Monte Carlo harness for the L1-stability estimates of the projection
//! map, the comparison with the uncontrolled diffusion, the moment
//! bound for admissible controls, and the local-time domination bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::ControlPath;
use crate::error::{Result, SglError};
use crate::model::{BoxRegion, SdeModel};
use crate::par::{indexed_map, mean_ci};
use crate::rng::derive_seed;
use crate::simulate::{
    common_noise_pair, coupled_pair, dgi_rhs, local_time_zero, simulate_scalar, SamplePath,
    ScalarProcessSpec,
};

/// Explicit Gronwall constant of the coupled-difference estimate: from
/// `E|J_s| <= 5 d D1 int_0^s E|J| + 3 d gamma E[nu]` one gets
/// `E|J_T| <= 3 d e^{5 d D1 T} * gamma E[nu]`.
pub fn k3_constant(d: usize, d1_bound: f64, horizon: f64) -> f64 {
    3.0 * d as f64 * (5.0 * d as f64 * d1_bound * horizon).exp()
}

/// Stopping rule for the stability experiments: a fixed time or the
/// first exit of the (first) path from a box, both grid-snapped.
#[derive(Debug, Clone)]
pub enum StopSpec {
    Fixed(f64),
    ExitBox(BoxRegion),
}

fn stop_index(path: &SamplePath, stop: &StopSpec) -> usize {
    match stop {
        StopSpec::Fixed(s) => {
            let dt = path.dt();
            ((s / dt).round() as usize).min(path.len() - 1)
        }
        StopSpec::ExitBox(b) => {
            for i in 0..path.len() {
                let x = path.post(i);
                let inside = x
                    .iter()
                    .zip(b.lo.iter().zip(b.hi.iter()))
                    .all(|(v, (lo, hi))| v >= lo && v <= hi);
                if !inside {
                    return i;
                }
            }
            path.len() - 1
        }
    }
}

fn l1_distance(a: &SamplePath, b: &SamplePath, idx: usize) -> f64 {
    a.post(idx)
        .iter()
        .zip(b.post(idx).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityRow {
    pub gamma: f64,
    pub measured: f64,
    pub ci: f64,
    pub bound: f64,
    /// `measured / (gamma E[nu])`, exhibiting the linear scaling.
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub k3: f64,
    pub nu_total: f64,
}

impl StabilityReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Max relative spread of `measured/gamma` across the sweep.
    pub fn ratio_spread(&self) -> f64 {
        let ratios: Vec<f64> = self.rows.iter().map(|r| r.ratio).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= 0.0 {
            0.0
        } else {
            (hi - lo) / hi
        }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "gamma,measured,ci,bound,pass")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{}",
                r.gamma, r.measured, r.ci, r.bound, r.pass
            )?;
        }
        Ok(())
    }
}

/// Measures `E|X^gamma_tau - Xbar_tau|` between the gamma-weighted path
/// and its projected-control companion under common noise, against the
/// theoretical bound `gamma K3 E[nu]`. Pass requires the bound to
/// dominate the measured mean minus 3 CI.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment(
    model: &SdeModel,
    control: &ControlPath,
    x: &[f64],
    gammas: &[f64],
    stop: &StopSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<StabilityReport> {
    let nu_total = control.nu_total(control.horizon);
    if nu_total <= 0.0 {
        return Err(SglError::InvalidArgument(
            "stability experiment needs a control with nu_T > 0".into(),
        ));
    }
    let k3 = k3_constant(model.d, model.deriv_bound, control.horizon);
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let dists: Vec<Result<f64>> = indexed_map(n_paths, |i| {
            let (a, b) = coupled_pair(model, control, x, gamma, dt, derive_seed(seed, "path", i as u64))?;
            let idx = stop_index(&a, stop);
            Ok(l1_distance(&a, &b, idx))
        });
        let mut vals = Vec::with_capacity(n_paths);
        for d in dists {
            vals.push(d?);
        }
        let (measured, ci) = mean_ci(&vals);
        let bound = gamma * k3 * nu_total;
        rows.push(StabilityRow {
            gamma,
            measured,
            ci,
            bound,
            ratio: if gamma > 0.0 { measured / (gamma * nu_total) } else { 0.0 },
            pass: measured - 3.0 * ci <= bound,
        });
    }
    Ok(StabilityReport { rows, k3, nu_total })
}

/// Measures `E|X^{[n,nu]}_tau - X^{uncontrolled}_tau|` under common
/// noise against `K3 E[nu]` for a constrained control.
pub fn uncontrolled_comparison(
    model: &SdeModel,
    control: &ControlPath,
    x: &[f64],
    stop: &StopSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<StabilityRow> {
    let null = ControlPath::empty(control.horizon);
    let dists: Vec<Result<f64>> = indexed_map(n_paths, |i| {
        let (a, b) = common_noise_pair(
            model,
            control,
            1.0,
            &null,
            1.0,
            x,
            dt,
            derive_seed(seed, "path", i as u64),
        )?;
        let idx = stop_index(&a, stop);
        Ok(l1_distance(&a, &b, idx))
    });
    let mut vals = Vec::with_capacity(n_paths);
    for d in dists {
        vals.push(d?);
    }
    let (measured, ci) = mean_ci(&vals);
    let k3 = k3_constant(model.d, model.deriv_bound, control.horizon);
    let bound = k3 * control.nu_total(control.horizon);
    Ok(StabilityRow {
        gamma: 1.0,
        measured,
        ci,
        bound,
        ratio: measured / bound.max(f64::MIN_POSITIVE),
        pass: measured - 3.0 * ci <= bound,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentRow {
    pub control_id: usize,
    pub measured: f64,
    pub ci: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    pub k4: f64,
    /// Uncontrolled moment constant estimated from the null ensemble.
    pub c_sde: f64,
}

impl MomentReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Checks `E|X^{[n,nu]}_tau| <= K4 (1 + |x|)` with `K4 = K3 K2 + c_sde`,
/// where `c_sde` is measured from the null-control ensemble (with a 3 CI
/// allowance folded in).
#[allow(clippy::too_many_arguments)]
pub fn moment_bound_check(
    model: &SdeModel,
    battery: &[ControlPath],
    x: &[f64],
    k2: f64,
    stop: &StopSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<MomentReport> {
    if battery.is_empty() {
        return Err(SglError::InvalidArgument("battery must be nonempty".into()));
    }
    for c in battery {
        if !c.check_opt_class(x, k2) {
            return Err(SglError::InvalidArgument(
                "battery control exceeds the admissible-moment class".into(),
            ));
        }
    }
    let horizon = battery[0].horizon;
    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let measure = |control: &ControlPath, kind: u64| -> Result<(f64, f64)> {
        let vals: Vec<Result<f64>> = indexed_map(n_paths, |i| {
            let p = crate::simulate::euler_controlled(
                model,
                control,
                x,
                1.0,
                dt,
                derive_seed(seed.wrapping_add(kind), "path", i as u64),
            )?;
            let idx = stop_index(&p, stop);
            Ok(p.post(idx).iter().map(|v| v * v).sum::<f64>().sqrt())
        });
        let mut out = Vec::with_capacity(n_paths);
        for v in vals {
            out.push(v?);
        }
        Ok(mean_ci(&out))
    };

    let null = ControlPath::empty(horizon);
    let (null_mean, null_ci) = measure(&null, 0)?;
    let c_sde = (null_mean + 3.0 * null_ci) / (1.0 + xnorm);
    let k3 = k3_constant(model.d, model.deriv_bound, horizon);
    let k4 = k3 * k2 + c_sde;
    let bound = k4 * (1.0 + xnorm);

    let mut rows = Vec::with_capacity(battery.len());
    for (id, control) in battery.iter().enumerate() {
        let (measured, ci) = measure(control, 1 + id as u64)?;
        rows.push(MomentRow {
            control_id: id,
            measured,
            ci,
            bound,
            pass: measured - 3.0 * ci <= bound,
        });
    }
    Ok(MomentReport { rows, k4, c_sde })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeRow {
    pub eps: f64,
    pub mean_lhs: f64,
    pub ci_lhs: f64,
    pub mean_rhs: f64,
    pub ci_rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeReport {
    pub rows: Vec<LocalTimeRow>,
}

impl LocalTimeReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "eps,lhs,lhs_ci,rhs,rhs_ci,pass")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                r.eps, r.mean_lhs, r.ci_lhs, r.mean_rhs, r.ci_rhs, r.pass
            )?;
        }
        Ok(())
    }
}

/// Estimates the expected local time at zero and the expected value of
/// the pathwise domination bound, asserting `E[L] <= E[RHS] + 3 CI` for
/// every bandwidth in `eps_list`. Paths are shared across bandwidths.
pub fn local_time_lemma_check(
    spec: &ScalarProcessSpec,
    eps_list: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<LocalTimeReport> {
    if eps_list.iter().any(|&e| !(0.0..1.0).contains(&e) || e == 0.0) {
        return Err(SglError::InvalidArgument("eps values must lie in (0,1)".into()));
    }
    let per_path: Vec<Vec<(f64, f64)>> = indexed_map(n_paths, |i| {
        let p = simulate_scalar(spec, dt, derive_seed(seed, "path", i as u64));
        eps_list
            .iter()
            .map(|&eps| {
                (
                    local_time_zero(&p.j, eps, &p.quad_var),
                    dgi_rhs(&p.j, &p.dj_cont, &p.quad_var, &p.jumps, eps),
                )
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let lhs: Vec<f64> = per_path.iter().map(|v| v[k].0).collect();
        let rhs: Vec<f64> = per_path.iter().map(|v| v[k].1).collect();
        let (mean_lhs, ci_lhs) = mean_ci(&lhs);
        let (mean_rhs, ci_rhs) = mean_ci(&rhs);
        rows.push(LocalTimeRow {
            eps,
            mean_lhs,
            ci_lhs,
            mean_rhs,
            ci_rhs,
            pass: mean_lhs <= mean_rhs + 3.0 * (ci_lhs + ci_rhs),
        });
    }
    Ok(LocalTimeReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Atom;
    use std::sync::Arc;

    #[test]
    fn k3_closed_form_values() {
        assert!((k3_constant(1, 0.0, 1.0) - 3.0).abs() < 1e-12);
        assert!((k3_constant(2, 0.0, 1.0) - 6.0).abs() < 1e-12);
        let v = k3_constant(1, 1.0, 1.0);
        assert!((v - 3.0 * 5.0_f64.exp()).abs() < 1e-9); // about 445.24
        assert!((v - 445.239).abs() < 1e-2);
    }

    #[test]
    fn k3_is_monotone() {
        assert!(k3_constant(2, 1.0, 1.0) > k3_constant(1, 1.0, 1.0));
        assert!(k3_constant(1, 2.0, 1.0) > k3_constant(1, 1.0, 1.0));
        assert!(k3_constant(1, 1.0, 2.0) > k3_constant(1, 1.0, 1.0));
    }

    fn zero_model() -> SdeModel {
        SdeModel::new(
            2,
            1,
            2,
            Arc::new(|_x, out: &mut [f64]| out.fill(0.0)),
            Arc::new(|_x, out: &mut [f64]| out.fill(0.0)),
            0.0,
            1.0,
        )
        .unwrap()
    }

    fn diagonal_atom_control() -> ControlPath {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        ControlPath::new(
            1.0,
            vec![],
            vec![Atom {
                time: 0.4,
                direction: vec![s, s],
                size: 1.0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_stability_is_exact() {
        // zero dynamics: measured distance is gamma/sqrt(2) exactly and
        // the bound gamma * 3d * nu dominates
        let model = zero_model();
        let c = diagonal_atom_control();
        let rep = stability_experiment(
            &model,
            &c,
            &[0.0, 0.0],
            &[0.4, 0.1],
            &StopSpec::Fixed(1.0),
            8,
            0.01,
            5,
        )
        .unwrap();
        for row in &rep.rows {
            let expect = row.gamma * std::f64::consts::FRAC_1_SQRT_2;
            assert!((row.measured - expect).abs() < 1e-12, "{row:?}");
            assert_eq!(row.ci, 0.0);
            assert!(row.pass);
            assert!((row.bound - row.gamma * 6.0).abs() < 1e-12);
        }
        // ratio measured/(gamma nu) identical across gammas
        assert!(rep.ratio_spread() < 1e-12);
    }

    #[test]
    fn gamma_zero_distance_vanishes() {
        let model = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
        let c = diagonal_atom_control();
        let rep = stability_experiment(
            &model,
            &c,
            &[0.0, 0.0],
            &[0.0],
            &StopSpec::Fixed(1.0),
            16,
            0.01,
            5,
        )
        .unwrap();
        assert_eq!(rep.rows[0].measured, 0.0);
    }

    #[test]
    fn vacuous_control_is_rejected() {
        let model = zero_model();
        let c = ControlPath::empty(1.0);
        assert!(stability_experiment(
            &model,
            &c,
            &[0.0, 0.0],
            &[0.1],
            &StopSpec::Fixed(1.0),
            4,
            0.01,
            5
        )
        .is_err());
    }

    #[test]
    fn uncontrolled_comparison_cases() {
        let model = zero_model();
        let null_like = ControlPath::new(
            1.0,
            vec![],
            vec![Atom {
                time: 0.5,
                direction: vec![1.0, 0.0],
                size: 0.0,
            }],
        )
        .unwrap();
        let row = uncontrolled_comparison(
            &model,
            &null_like,
            &[0.0, 0.0],
            &StopSpec::Fixed(1.0),
            4,
            0.01,
            5,
        )
        .unwrap();
        assert_eq!(row.measured, 0.0);

        let jump = ControlPath::new(
            1.0,
            vec![],
            vec![Atom {
                time: 0.2,
                direction: vec![1.0, 0.0],
                size: 1.0,
            }],
        )
        .unwrap();
        let row = uncontrolled_comparison(
            &model,
            &jump,
            &[0.0, 0.0],
            &StopSpec::Fixed(1.0),
            4,
            0.01,
            5,
        )
        .unwrap();
        assert!((row.measured - 1.0).abs() < 1e-12);
        assert!((row.bound - 6.0).abs() < 1e-12);
        assert!(row.pass);
    }

    #[test]
    fn moment_bound_deterministic_jump() {
        let model = zero_model();
        let jump = ControlPath::new(
            1.0,
            vec![],
            vec![Atom {
                time: 0.1,
                direction: vec![1.0, 0.0],
                size: 0.5,
            }],
        )
        .unwrap();
        let rep = moment_bound_check(
            &model,
            &[jump],
            &[1.0, 0.0],
            2.0,
            &StopSpec::Fixed(1.0),
            4,
            0.01,
            5,
        )
        .unwrap();
        assert!(rep.all_pass(), "{rep:?}");
        // E|X_tau| = |x + jump| = 1.5 <= (K3 K2 + c_sde)(1 + 1)
        assert!((rep.rows[0].measured - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exit_box_stop_snaps_to_first_exit() {
        let model = zero_model();
        let jump = ControlPath::new(
            1.0,
            vec![],
            vec![Atom {
                time: 0.5,
                direction: vec![1.0, 0.0],
                size: 5.0,
            }],
        )
        .unwrap();
        let p = crate::simulate::euler_controlled(&model, &jump, &[0.0, 0.0], 1.0, 0.01, 1).unwrap();
        let b = BoxRegion::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let idx = stop_index(&p, &StopSpec::ExitBox(b));
        assert!((p.times[idx] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn local_time_drift_away_trivially_passes() {
        let spec = ScalarProcessSpec {
            x0: 1.0,
            drift: 1.0,
            sigma: 0.0,
            jumps: vec![],
            horizon: 1.0,
        };
        let rep = local_time_lemma_check(&spec, &[0.1, 0.05], 8, 0.01, 3).unwrap();
        assert!(rep.all_pass());
        for row in &rep.rows {
            assert_eq!(row.mean_lhs, 0.0);
        }
    }

    #[test]
    fn local_time_brownian_with_jumps_passes() {
        let spec = ScalarProcessSpec {
            x0: 0.0,
            drift: 0.0,
            sigma: 1.0,
            jumps: vec![(0.3, 0.3), (0.6, 0.3)],
            horizon: 1.0,
        };
        let rep = local_time_lemma_check(&spec, &[0.05], 2000, 1e-3, 3).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
        // the jump term alone contributes 2 * 0.6 = 1.2 to the RHS
        assert!(rep.rows[0].mean_rhs > 1.2);
    }
}
