//! Approximation chains: cutoff and mollification of payoffs, the
//! (eps, delta, m) continuation toward the gamma-game value, the gamma
//! sweep with convergence-rate fitting, and log-log least squares.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SglError};
use crate::model::{FieldFn, PayoffSpec, SdeModel, TimeFn};
use crate::pde::{solve_penalised, Grid, PdeSolution, SolverOptions};

/// Exponential blend: 1 on `z <= 0`, 0 on `z >= 1`, smooth in between.
pub fn xi(z: f64) -> f64 {
    if z <= 0.0 {
        1.0
    } else if z >= 1.0 {
        0.0
    } else {
        let a = (1.0 / (z - 1.0)).exp();
        let b = (-1.0 / z).exp();
        a / (a + b)
    }
}

/// Spatial cutoff at level `k`: 1 on the ball of radius `k`, 0 outside
/// radius `2k`; the radial profile is `xi((|x| - k)/k)`, so its gradient
/// never exceeds `2/k` in norm.
pub fn cutoff_xi(k: f64, x: &[f64]) -> f64 {
    debug_assert!(k >= 1.0);
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    xi((norm - k) / k)
}

/// Ordinary least squares on `(log param, log error)`. Any zero error is
/// treated as already-converged data and maps to the `+inf` sentinel
/// slope.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 2 {
        return Err(SglError::FitTooFewPoints(points.len()));
    }
    for &(p, e) in points {
        if p <= 0.0 || e < 0.0 {
            return Err(SglError::FitNonPositive { param: p, error: e });
        }
    }
    if points.iter().any(|&(_, e)| e == 0.0) {
        return Ok((f64::INFINITY, f64::NEG_INFINITY, 0.0));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(p, _)| p.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, e)| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys.iter()).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(SglError::FitNonPositive {
            param: points[0].0,
            error: 0.0,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum::<f64>()
        .sqrt();
    Ok((slope, intercept, residual))
}

/// Quadrature nodes and normalized weights of the bump mollifier of
/// width `1/j`, sampled at 4x oversampling (spacing `1/(4j)`).
fn mollifier_nodes(j: u32) -> (Vec<f64>, Vec<f64>) {
    let width = 1.0 / j as f64;
    let step = width / 4.0;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for q in -4i32..=4 {
        let z = q as f64 * 0.25; // scaled position in (-1, 1)
        let w = if z.abs() < 1.0 {
            (-1.0 / (1.0 - z * z)).exp()
        } else {
            0.0
        };
        if w > 0.0 {
            nodes.push(q as f64 * step);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    (nodes, weights)
}

/// Smooths the payoffs with a compact bump of width `1/j` (in time and
/// space, product kernel with normalized quadrature weights), truncates
/// `g` and `h` at height `m_trunc`, applies the spatial cutoff at level
/// `k`, and inflates the cost rate to
/// `f^{j,k} = (f + 1/j) * mollifier + (2/k) ||min(g, m_trunc)||_inf`
/// so the smoothed obstacle still satisfies the gradient bound against
/// the new cost rate.
pub fn mollify_truncate(payoffs: &PayoffSpec, d: usize, j: u32, k: u32, m_trunc: f64) -> Result<PayoffSpec> {
    if j < 1 || k < 1 || !(1..=2).contains(&d) {
        return Err(SglError::InvalidArgument("need j, k >= 1 and d in {1,2}".into()));
    }
    let (nodes, weights) = mollifier_nodes(j);
    let horizon = payoffs.horizon;
    let kf = k as f64;

    // sup of the truncated obstacle over the cutoff support (odd sample
    // counts so axis extrema like the origin are hit exactly)
    let g0 = payoffs.g.clone();
    let g_m = move |t: f64, x: &[f64]| g0(t, x).min(m_trunc);
    let mut sup_gm = 0.0_f64;
    {
        let ns = 81usize;
        let nt = 9usize;
        let mut x = vec![0.0; d];
        for ti in 0..=nt {
            let t = horizon * ti as f64 / nt as f64;
            if d == 1 {
                for i in 0..ns {
                    x[0] = -2.0 * kf + 4.0 * kf * i as f64 / (ns - 1) as f64;
                    sup_gm = sup_gm.max(g_m(t, &x));
                }
            } else {
                for i in 0..ns {
                    for jj in 0..ns {
                        x[0] = -2.0 * kf + 4.0 * kf * i as f64 / (ns - 1) as f64;
                        x[1] = -2.0 * kf + 4.0 * kf * jj as f64 / (ns - 1) as f64;
                        sup_gm = sup_gm.max(g_m(t, &x));
                    }
                }
            }
        }
    }

    // space-time convolution of a truncated field, then spatial cutoff
    let smooth_cut = |field: FieldFn| -> FieldFn {
        let nodes = nodes.clone();
        let weights = weights.clone();
        Arc::new(move |t: f64, x: &[f64]| {
            let d = x.len();
            let mut acc = 0.0;
            let mut y = vec![0.0; d];
            if d == 1 {
                for (qt, wt) in nodes.iter().zip(weights.iter()) {
                    let ts = (t - qt).clamp(0.0, horizon);
                    for (qx, wx) in nodes.iter().zip(weights.iter()) {
                        y[0] = x[0] - qx;
                        acc += wt * wx * field(ts, &y).min(m_trunc);
                    }
                }
            } else {
                for (qt, wt) in nodes.iter().zip(weights.iter()) {
                    let ts = (t - qt).clamp(0.0, horizon);
                    for (qx, wx) in nodes.iter().zip(weights.iter()) {
                        for (qy, wy) in nodes.iter().zip(weights.iter()) {
                            y[0] = x[0] - qx;
                            y[1] = x[1] - qy;
                            acc += wt * wx * wy * field(ts, &y).min(m_trunc);
                        }
                    }
                }
            }
            acc * cutoff_xi(kf, x)
        })
    };

    let g_new = smooth_cut(payoffs.g.clone());
    let h_new = smooth_cut(payoffs.h.clone());

    let f0 = payoffs.f.clone();
    let c_j = 1.0 / j as f64;
    let lift = 2.0 / kf * sup_gm;
    let nodes_t = nodes;
    let weights_t = weights;
    let f_new: TimeFn = Arc::new(move |t: f64| {
        let mut acc = 0.0;
        for (q, w) in nodes_t.iter().zip(weights_t.iter()) {
            acc += w * (f0((t - q).clamp(0.0, horizon)) + c_j);
        }
        acc + lift
    });

    PayoffSpec::new(
        f_new,
        g_new,
        h_new,
        payoffs.r,
        horizon,
        payoffs.k1,
        payoffs.beta,
        payoffs.lip,
    )
}

/// One stage of the penalisation/localization schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stage {
    pub eps: f64,
    pub delta: f64,
    /// Box radius for this stage.
    pub m: f64,
}

/// Probe points of the reference compact: the central 60% of the box in
/// each dimension, full time range.
fn sigma_probes(d: usize, m: f64, center: &[f64], horizon: f64) -> Vec<(f64, Vec<f64>)> {
    let nt = 10usize;
    let ns = if d == 1 { 41 } else { 21 };
    let mut out = Vec::new();
    for ti in 0..=nt {
        let t = horizon * ti as f64 / nt as f64;
        if d == 1 {
            for i in 0..ns {
                let x = center[0] - 0.6 * m + 1.2 * m * i as f64 / (ns - 1) as f64;
                out.push((t, vec![x]));
            }
        } else {
            for i in 0..ns {
                for j in 0..ns {
                    let x0 = center[0] - 0.6 * m + 1.2 * m * i as f64 / (ns - 1) as f64;
                    let x1 = center[1] - 0.6 * m + 1.2 * m * j as f64 / (ns - 1) as f64;
                    out.push((t, vec![x0, x1]));
                }
            }
        }
    }
    out
}

fn sup_diff_on_probes(a: &PdeSolution, b: &PdeSolution, probes: &[(f64, Vec<f64>)]) -> f64 {
    probes
        .iter()
        .map(|(t, x)| (a.interpolate(*t, x) - b.interpolate(*t, x)).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone)]
pub struct ContinuationResult {
    pub solution: PdeSolution,
    /// Sup-norm differences between consecutive stage solutions on the
    /// reference compact.
    pub cauchy: Vec<f64>,
    /// Set when the Cauchy log fails to be nonincreasing over the last
    /// three stages (schedule too aggressive).
    pub non_monotone_warning: bool,
}

/// Solves along a decreasing (eps, delta) / growing-box schedule, warm
/// starting each stage from the previous solution, and logs sup-norm
/// Cauchy differences on the reference compact.
pub fn continuation_solve(
    model: &SdeModel,
    payoffs: &PayoffSpec,
    grid: &Grid,
    gamma: f64,
    stages: &[Stage],
    opts: &SolverOptions,
) -> Result<ContinuationResult> {
    if stages.is_empty() {
        return Err(SglError::InvalidArgument("schedule must be nonempty".into()));
    }
    for w in stages.windows(2) {
        if w[1].eps >= w[0].eps || w[1].delta >= w[0].delta || w[1].m < w[0].m {
            return Err(SglError::InvalidArgument(
                "schedule must decrease eps and delta strictly and never shrink m".into(),
            ));
        }
    }
    let probes = sigma_probes(grid.d, stages[0].m, &grid.center, payoffs.horizon);
    let mut prev: Option<PdeSolution> = None;
    let mut cauchy = Vec::new();
    for stage in stages {
        let stage_grid = Grid::new(grid.d, stage.m, grid.nx, grid.nt)?
            .with_center(grid.center.clone())?;
        let sol = solve_penalised(
            model,
            payoffs,
            &stage_grid,
            stage.eps,
            stage.delta,
            gamma,
            opts,
            prev.as_ref(),
        )?;
        if let Some(p) = &prev {
            cauchy.push(sup_diff_on_probes(&sol, p, &probes));
        }
        prev = Some(sol);
    }
    let non_monotone_warning = cauchy.len() >= 3 && {
        let tail = &cauchy[cauchy.len() - 3..];
        !(tail[0] >= tail[1] && tail[1] >= tail[2])
    };
    Ok(ContinuationResult {
        solution: prev.unwrap(),
        cauchy,
        non_monotone_warning,
    })
}

/// Gamma sweep outcome: per-gamma sup-norm differences against the last
/// (smallest) gamma and the fitted log-log rate.
pub struct SweepResult {
    pub gammas: Vec<f64>,
    /// `||u^{gamma_i} - u^{gamma_last}||` on the reference compact, for
    /// every gamma except the last.
    pub diffs: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub fit_residual: f64,
    pub solutions: Vec<PdeSolution>,
}

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "gamma,err")?;
        for (g, e) in self.gammas.iter().zip(self.diffs.iter()) {
            writeln!(w, "{g:.12e},{e:.12e}")?;
        }
        writeln!(w, "# slope,{:.12e},intercept,{:.12e}", self.slope, self.intercept)?;
        Ok(())
    }
}

/// Runs the continuation per gamma (decreasing list) and fits the decay
/// rate of the differences toward the smallest gamma.
pub fn gamma_sweep(
    model: &SdeModel,
    payoffs: &PayoffSpec,
    grid: &Grid,
    gammas: &[f64],
    stages: &[Stage],
    opts: &SolverOptions,
) -> Result<SweepResult> {
    if gammas.len() < 3 {
        return Err(SglError::InvalidArgument("need at least 3 gamma values".into()));
    }
    for w in gammas.windows(2) {
        if w[1] >= w[0] || w[0] > 1.0 || w[1] <= 0.0 {
            return Err(SglError::InvalidArgument(
                "gammas must be strictly decreasing within (0, 1]".into(),
            ));
        }
    }
    let mut solutions = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let res = continuation_solve(model, payoffs, grid, g, stages, opts)?;
        solutions.push(res.solution);
    }
    let probes = sigma_probes(grid.d, stages[0].m, &grid.center, payoffs.horizon);
    let reference = solutions.last().unwrap();
    let diffs: Vec<f64> = solutions[..solutions.len() - 1]
        .iter()
        .map(|s| sup_diff_on_probes(s, reference, &probes))
        .collect();
    let points: Vec<(f64, f64)> = gammas[..gammas.len() - 1]
        .iter()
        .copied()
        .zip(diffs.iter().copied())
        .collect();
    let (slope, intercept, fit_residual) = fit_rate(&points)?;
    Ok(SweepResult {
        gammas: gammas[..gammas.len() - 1].to_vec(),
        diffs,
        slope,
        intercept,
        fit_residual,
        solutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_payoffs;

    #[test]
    fn xi_branches_and_gradient_bound() {
        let k = 4.0;
        assert_eq!(cutoff_xi(k, &[k / 2.0]), 1.0);
        assert_eq!(cutoff_xi(k, &[3.0 * k]), 0.0);
        // dense radial FD scan: |d/dr xi_k| <= 2/k
        let fd = 1e-6;
        let mut worst = 0.0_f64;
        let mut prev_val = f64::INFINITY;
        for i in 0..4000 {
            let rr = 3.0 * k * i as f64 / 3999.0;
            let v = cutoff_xi(k, &[rr]);
            assert!(v <= prev_val + 1e-12, "not nonincreasing at r = {rr}");
            prev_val = v;
            let der = (cutoff_xi(k, &[rr + fd]) - cutoff_xi(k, &[(rr - fd).max(0.0)])) / (2.0 * fd);
            worst = worst.max(der.abs());
        }
        assert!(worst <= 2.0 / k + 1e-3, "worst gradient {worst}");
    }

    #[test]
    fn fit_rate_examples() {
        let (s, _, _) = fit_rate(&[(0.4, 0.8), (0.1, 0.2)]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [0.4_f64, 0.2, 0.1, 0.05]
            .iter()
            .map(|&g| (g, 3.0 * g.sqrt()))
            .collect();
        let (s, i, r) = fit_rate(&pts).unwrap();
        assert!((s - 0.5).abs() < 1e-6);
        assert!((i - 3.0_f64.ln()).abs() < 1e-6);
        assert!(r < 1e-10);
        let (s, _, _) = fit_rate(&[(0.4, 2.0), (0.2, 2.0), (0.1, 2.0)]).unwrap();
        assert_eq!(s, 0.0);
        assert!(fit_rate(&[(0.4, 1.0)]).is_err());
        assert!(fit_rate(&[(-0.4, 1.0), (0.1, 1.0)]).is_err());
        let (s, _, _) = fit_rate(&[(0.4, 0.0), (0.1, 0.0)]).unwrap();
        assert!(s.is_infinite());
    }

    fn gaussian_payoffs(lip: f64) -> PayoffSpec {
        PayoffSpec::new(
            Arc::new(|_t| 1.0),
            Arc::new(|_t, x: &[f64]| (-x.iter().map(|v| v * v).sum::<f64>()).exp()),
            Arc::new(|_t, _x: &[f64]| 0.0),
            0.0,
            0.5,
            10.0,
            0.5,
            lip,
        )
        .unwrap()
    }

    #[test]
    fn mollified_cost_lift_is_two_over_k_sup_g() {
        // f = 1, sup g = 1 (at the origin), k = 10 -> lift exactly 0.2
        let p = gaussian_payoffs(2.0);
        let q = mollify_truncate(&p, 1, 8, 10, 100.0).unwrap();
        let f_j = 1.0 + 1.0 / 8.0; // constant f convolves to itself + c_j
        assert!(((q.f)(0.2) - f_j - 0.2).abs() < 1e-9);
    }

    #[test]
    fn zero_obstacle_stays_zero() {
        let p = PayoffSpec::new(
            Arc::new(|t| 2.0 - t),
            Arc::new(|_t, _x: &[f64]| 0.0),
            Arc::new(|_t, _x: &[f64]| 0.0),
            0.0,
            1.0,
            1.0,
            0.0,
            2.0,
        )
        .unwrap();
        let q = mollify_truncate(&p, 2, 4, 5, 10.0).unwrap();
        assert_eq!((q.g)(0.3, &[0.5, -1.0]), 0.0);
        // f^{j,k} = f^j (no lift), and f^j >= f is preserved up to the
        // averaging of the nonincreasing f
        assert!((q.f)(0.5) >= (p.f)(0.5));
    }

    #[test]
    fn mollified_payoffs_pass_gradient_clause() {
        let p = gaussian_payoffs(2.0);
        let model = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
        let q = mollify_truncate(&p, 2, 4, 5, 100.0).unwrap();
        let region = crate::model::BoxRegion::centered(2, 8.0);
        let rep = validate_payoffs(&q, &model, &region, 300, 17).unwrap();
        let clause = rep
            .clauses
            .iter()
            .find(|c| c.name == "gradient_bound")
            .unwrap();
        assert!(clause.pass, "{clause:?}");
    }

    fn brownian_1d() -> SdeModel {
        SdeModel::brownian(1, 1, vec![1.0]).unwrap()
    }

    #[test]
    fn continuation_zero_game_is_all_zero() {
        let model = brownian_1d();
        let p = PayoffSpec::new(
            Arc::new(|_t| 1.0),
            Arc::new(|_t, _x: &[f64]| 0.0),
            Arc::new(|_t, _x: &[f64]| 0.0),
            0.0,
            0.5,
            1.0,
            0.0,
            0.0,
        )
        .unwrap();
        let grid = Grid::new(1, 3.0, 31, 10).unwrap();
        let stages = [
            Stage { eps: 0.2, delta: 0.2, m: 3.0 },
            Stage { eps: 0.1, delta: 0.1, m: 3.0 },
            Stage { eps: 0.05, delta: 0.05, m: 3.0 },
        ];
        let res = continuation_solve(&model, &p, &grid, 1.0, &stages, &SolverOptions::default())
            .unwrap();
        assert!(res.solution.max_abs() <= 1e-10);
        assert!(res.cauchy.iter().all(|&c| c == 0.0));
        assert!(!res.non_monotone_warning);
    }

    #[test]
    fn continuation_cauchy_differences_shrink() {
        let model = brownian_1d();
        let p = gaussian_payoffs(2.0);
        let grid = Grid::new(1, 3.0, 61, 25).unwrap();
        let stages = [
            Stage { eps: 0.4, delta: 0.4, m: 3.0 },
            Stage { eps: 0.1, delta: 0.1, m: 3.0 },
            Stage { eps: 0.025, delta: 0.025, m: 3.0 },
        ];
        let res = continuation_solve(&model, &p, &grid, 0.5, &stages, &SolverOptions::default())
            .unwrap();
        assert_eq!(res.cauchy.len(), 2);
        assert!(res.cauchy[1] < res.cauchy[0], "{:?}", res.cauchy);
    }

    #[test]
    fn rejects_non_decreasing_schedule() {
        let model = brownian_1d();
        let p = gaussian_payoffs(2.0);
        let grid = Grid::new(1, 3.0, 31, 10).unwrap();
        let stages = [
            Stage { eps: 0.1, delta: 0.1, m: 3.0 },
            Stage { eps: 0.1, delta: 0.05, m: 3.0 },
        ];
        assert!(continuation_solve(&model, &p, &grid, 1.0, &stages, &SolverOptions::default()).is_err());
    }

    #[test]
    fn gamma_independent_inputs_give_infinite_slope() {
        // d0 = d and K = 0: nothing in the scheme depends on gamma
        let model = brownian_1d();
        let p = gaussian_payoffs(0.0);
        let grid = Grid::new(1, 3.0, 31, 10).unwrap();
        let stages = [Stage { eps: 0.1, delta: 0.1, m: 3.0 }];
        let res = gamma_sweep(
            &model,
            &p,
            &grid,
            &[0.4, 0.2, 0.1],
            &stages,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(res.diffs.iter().all(|&e| e == 0.0), "{:?}", res.diffs);
        assert!(res.slope.is_infinite());
    }
}
