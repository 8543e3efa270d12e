//! Finite-difference solver for the penalised gradient-constrained
//! obstacle problem on a box, the associated Hamiltonian, residuals of
//! the variational inequality, region maps and solution file I/O.
//!
//! The backward time stepping treats the linear operator implicitly
//! (tridiagonal solve in 1D, relaxed Gauss-Seidel in 2D) and the two
//! penalty terms explicitly with per-slice fixed-point sweeps. The
//! internal step size is clamped so the explicit penalty maps stay
//! contractive; see [`solve_penalised`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SglError};
use crate::limits::xi;
use crate::model::{PayoffSpec, SdeModel};

/// Uniform space-time grid on the box `center + [-m, m]^d`, `d <= 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub d: usize,
    /// Box radius.
    pub m: f64,
    /// Points per spatial dimension.
    pub nx: usize,
    /// Time steps.
    pub nt: usize,
    pub center: Vec<f64>,
}

impl Grid {
    pub fn new(d: usize, m: f64, nx: usize, nt: usize) -> Result<Self> {
        if !(1..=2).contains(&d) {
            return Err(SglError::InvalidArgument("grid supports d in {1, 2}".into()));
        }
        if nx < 3 || nt < 1 || m <= 0.0 {
            return Err(SglError::InvalidArgument(
                "need nx >= 3, nt >= 1, m > 0".into(),
            ));
        }
        Ok(Grid {
            d,
            m,
            nx,
            nt,
            center: vec![0.0; d],
        })
    }

    pub fn with_center(mut self, center: Vec<f64>) -> Result<Self> {
        if center.len() != self.d {
            return Err(SglError::InvalidArgument("center dimension mismatch".into()));
        }
        self.center = center;
        Ok(self)
    }

    pub fn hx(&self) -> f64 {
        2.0 * self.m / (self.nx - 1) as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.nx.pow(self.d as u32)
    }

    pub fn axis_coord(&self, dim: usize, i: usize) -> f64 {
        self.center[dim] - self.m + i as f64 * self.hx()
    }

    /// Multi-index of a flat node index (row-major, `idx = i0 * nx + i1`).
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        if self.d == 1 {
            [idx, 0]
        } else {
            [idx / self.nx, idx % self.nx]
        }
    }

    pub fn node_coords(&self, idx: usize, out: &mut [f64]) {
        let mi = self.multi_index(idx);
        for dim in 0..self.d {
            out[dim] = self.axis_coord(dim, mi[dim]);
        }
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let mi = self.multi_index(idx);
        (0..self.d).any(|dim| mi[dim] == 0 || mi[dim] == self.nx - 1)
    }

    /// True if the node lies at least `collar_frac * m` away from every
    /// face of the box.
    pub fn outside_collar(&self, idx: usize, collar_frac: f64) -> bool {
        let mi = self.multi_index(idx);
        let margin = collar_frac * self.m / self.hx();
        (0..self.d).all(|dim| {
            let i = mi[dim] as f64;
            i >= margin && i <= (self.nx - 1) as f64 - margin
        })
    }
}

/// Piecewise-linear penalty `z^+ / eps`; satisfies `psi(z) <= z/eps`.
pub fn psi_eps(z: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    z.max(0.0) / eps
}

/// C1 variant with a quadratic knee of width `eps^2`; still bounded by
/// `z/eps` on `z >= 0`.
pub fn psi_eps_smooth(z: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let w = eps * eps;
    if z <= 0.0 {
        0.0
    } else if z < w {
        z * z / (2.0 * w * eps)
    } else {
        (z - 0.5 * w) / eps
    }
}

/// Gamma-weighted squared norm `|y|_gamma^2 = |y_[d0]|^2 + gamma |y_[d1]|^2`.
pub fn gamma_sq_norm(y: &[f64], d0: usize, gamma: f64) -> f64 {
    let mut s = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let w = if i < d0 { 1.0 } else { gamma };
        s += w * v * v;
    }
    s
}

/// Closed-form Hamiltonian `sup_p { <y,p>_gamma - psi_eps(|p|_gamma^2 - F^2) }`
/// with `F = f^gamma(t)` and the piecewise-linear penalty: writing
/// `w = |y|_gamma`, the supremum is `F w` while `w <= 2F/eps`, and
/// `eps w^2/4 + F^2/eps` beyond.
pub fn hamiltonian(y: &[f64], d0: usize, t: f64, eps: f64, gamma: f64, payoffs: &PayoffSpec) -> f64 {
    debug_assert!(eps > 0.0 && gamma > 0.0);
    let w = gamma_sq_norm(y, d0, gamma).sqrt();
    let ff = payoffs.f_gamma(gamma, t);
    if w <= 2.0 * ff / eps {
        ff * w
    } else {
        eps * w * w / 4.0 + ff * ff / eps
    }
}

/// Solver knobs; defaults match the documented scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_sweeps: usize,
    pub slice_tol_factor: f64,
    /// Use the C1 penalty [`psi_eps_smooth`] instead of `z^+/eps`.
    pub smooth_psi: bool,
    pub relax_omega: f64,
    pub max_linear_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_sweeps: 200,
            slice_tol_factor: 1e-9,
            smooth_psi: false,
            relax_omega: 1.3,
            max_linear_iters: 4000,
        }
    }
}

/// Converged grid solution of the penalised problem.
#[derive(Clone)]
pub struct PdeSolution {
    pub grid: Grid,
    pub horizon: f64,
    pub eps: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Time-major `(nt+1) x n_nodes`; slice `nt` is the terminal slice.
    pub values: Vec<f64>,
    pub model: SdeModel,
    pub payoffs: PayoffSpec,
    /// Total fixed-point sweeps over all substeps.
    pub sweeps_total: usize,
    /// Largest accepted slice update on sweep exit.
    pub worst_residual: f64,
    /// A priori obstacle-penetration allowance `10 delta * operator scale`.
    pub tol_obstacle: f64,
    /// A priori gradient overshoot allowance `10 hx * curvature estimate`.
    pub tol_grad: f64,
}

impl PdeSolution {
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn ht(&self) -> f64 {
        self.horizon / self.grid.nt as f64
    }

    /// Value at `(t, x)`: multilinear in space, linear in time; `x` is
    /// clamped to the box (the flag reports whether clamping occurred).
    pub fn interpolate_detail(&self, t: f64, x: &[f64]) -> (f64, bool) {
        let g = &self.grid;
        let ht = self.ht();
        let s = (t / ht).clamp(0.0, g.nt as f64);
        let k0 = (s.floor() as usize).min(g.nt - (g.nt > 0) as usize);
        let k1 = (k0 + 1).min(g.nt);
        let wt = (s - k0 as f64).clamp(0.0, 1.0);

        let hx = g.hx();
        let mut idx0 = [0usize; 2];
        let mut frac = [0.0f64; 2];
        let mut clamped = false;
        for dim in 0..g.d {
            let lo = g.center[dim] - g.m;
            let pos = (x[dim] - lo) / hx;
            if pos < 0.0 || pos > (g.nx - 1) as f64 {
                clamped = true;
            }
            let pos = pos.clamp(0.0, (g.nx - 1) as f64);
            let i = (pos.floor() as usize).min(g.nx - 2);
            idx0[dim] = i;
            frac[dim] = pos - i as f64;
        }

        let spatial = |slice: &[f64]| -> f64 {
            if g.d == 1 {
                let i = idx0[0];
                slice[i] * (1.0 - frac[0]) + slice[i + 1] * frac[0]
            } else {
                let (i, j) = (idx0[0], idx0[1]);
                let (fx, fy) = (frac[0], frac[1]);
                let at = |a: usize, b: usize| slice[a * g.nx + b];
                at(i, j) * (1.0 - fx) * (1.0 - fy)
                    + at(i + 1, j) * fx * (1.0 - fy)
                    + at(i, j + 1) * (1.0 - fx) * fy
                    + at(i + 1, j + 1) * fx * fy
            }
        };
        let v0 = spatial(self.slice(k0));
        let v1 = spatial(self.slice(k1));
        (v0 * (1.0 - wt) + v1 * wt, clamped)
    }

    pub fn interpolate(&self, t: f64, x: &[f64]) -> f64 {
        self.interpolate_detail(t, x).0
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Per-node frozen coefficients of the (time-homogeneous) operator.
struct Coeffs {
    /// `a = kappa kappa^T`, `d*d` entries per node.
    a: Vec<f64>,
    /// drift, `d` entries per node.
    b: Vec<f64>,
}

fn precompute_coeffs(model: &SdeModel, grid: &Grid) -> Result<Coeffs> {
    let d = model.d;
    let dp = model.dprime;
    let n = grid.n_nodes();
    let mut a = vec![0.0; n * d * d];
    let mut b = vec![0.0; n * d];
    let mut x = vec![0.0; d];
    let mut kap = vec![0.0; d * dp];
    for idx in 0..n {
        grid.node_coords(idx, &mut x);
        (model.drift)(&x, &mut b[idx * d..(idx + 1) * d]);
        (model.diffusion)(&x, &mut kap);
        if b[idx * d..(idx + 1) * d].iter().any(|v| !v.is_finite())
            || kap.iter().any(|v| !v.is_finite())
        {
            return Err(SglError::NonFiniteCoefficient {
                what: "drift or diffusion".into(),
                point: x.clone(),
            });
        }
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for c in 0..dp {
                    s += kap[i * dp + c] * kap[j * dp + c];
                }
                a[idx * d * d + i * d + j] = s;
            }
        }
    }
    Ok(Coeffs { a, b })
}

/// Terminal-edge taper: 1 within half the box radius of the center,
/// 0 at the box boundary, matching the exponential cutoff blend.
pub fn edge_taper(grid: &Grid, x: &[f64]) -> f64 {
    let half = grid.m / 2.0;
    let dist: f64 = x
        .iter()
        .zip(grid.center.iter())
        .map(|(xi_, ci)| (xi_ - ci) * (xi_ - ci))
        .sum::<f64>()
        .sqrt();
    xi((dist - half) / half)
}

fn eval_field(
    f: &crate::model::FieldFn,
    grid: &Grid,
    t: f64,
    out: &mut [f64],
    coords: &mut [f64],
) {
    for (idx, o) in out.iter_mut().enumerate() {
        grid.node_coords(idx, coords);
        *o = f(t, coords);
    }
}

/// Central-difference gradient at an interior node.
fn gradient_at(grid: &Grid, u: &[f64], idx: usize, out: &mut [f64]) {
    let hx = grid.hx();
    if grid.d == 1 {
        out[0] = (u[idx + 1] - u[idx - 1]) / (2.0 * hx);
    } else {
        let nx = grid.nx;
        out[0] = (u[idx + nx] - u[idx - nx]) / (2.0 * hx);
        out[1] = (u[idx + 1] - u[idx - 1]) / (2.0 * hx);
    }
}

/// Tridiagonal (Thomas) solve of `(1/ht + r - L) u = rhs` in 1D with
/// Dirichlet-0 boundary rows.
fn solve_linear_1d(
    coeffs: &Coeffs,
    grid: &Grid,
    r: f64,
    inv_ht: f64,
    rhs: &[f64],
    out: &mut [f64],
    scratch: &mut (Vec<f64>, Vec<f64>),
) {
    let nx = grid.nx;
    let hx = grid.hx();
    let hx2 = hx * hx;
    let (cp, dp_) = scratch;
    cp.resize(nx, 0.0);
    dp_.resize(nx, 0.0);

    // forward elimination; boundary rows are u = 0
    cp[0] = 0.0;
    dp_[0] = 0.0;
    for i in 1..nx - 1 {
        let a = coeffs.a[i];
        let b = coeffs.b[i];
        let lower = -a / (2.0 * hx2) + b / (2.0 * hx);
        let diag = inv_ht + r + a / hx2;
        let upper = -a / (2.0 * hx2) - b / (2.0 * hx);
        let denom = diag - lower * cp[i - 1];
        cp[i] = upper / denom;
        dp_[i] = (rhs[i] - lower * dp_[i - 1]) / denom;
    }
    out[nx - 1] = 0.0;
    for i in (1..nx - 1).rev() {
        out[i] = dp_[i] - cp[i] * out[i + 1];
    }
    out[0] = 0.0;
}

/// Relaxed Gauss-Seidel solve of the 5-point system in 2D (the cross
/// derivative is part of `rhs`). `u` carries the initial guess.
fn solve_linear_2d(
    coeffs: &Coeffs,
    grid: &Grid,
    r: f64,
    inv_ht: f64,
    rhs: &[f64],
    u: &mut [f64],
    tol: f64,
    omega: f64,
    max_iters: usize,
) -> Result<()> {
    let nx = grid.nx;
    let hx = grid.hx();
    let hx2 = hx * hx;
    for _iter in 0..max_iters {
        let mut worst = 0.0_f64;
        for i in 1..nx - 1 {
            for j in 1..nx - 1 {
                let idx = i * nx + j;
                let a11 = coeffs.a[idx * 4];
                let a22 = coeffs.a[idx * 4 + 3];
                let b1 = coeffs.b[idx * 2];
                let b2 = coeffs.b[idx * 2 + 1];
                let diag = inv_ht + r + (a11 + a22) / hx2;
                let cxm = -a11 / (2.0 * hx2) + b1 / (2.0 * hx);
                let cxp = -a11 / (2.0 * hx2) - b1 / (2.0 * hx);
                let cym = -a22 / (2.0 * hx2) + b2 / (2.0 * hx);
                let cyp = -a22 / (2.0 * hx2) - b2 / (2.0 * hx);
                let sum = cxm * u[idx - nx] + cxp * u[idx + nx] + cym * u[idx - 1] + cyp * u[idx + 1];
                let gs = (rhs[idx] - sum) / diag;
                let new = u[idx] + omega * (gs - u[idx]);
                worst = worst.max((new - u[idx]).abs());
                u[idx] = new;
            }
        }
        if worst < tol {
            return Ok(());
        }
    }
    Err(SglError::SweepDiverged {
        max_sweeps: max_iters,
        residual: tol,
    })
}

/// Backward semi-implicit solve of
/// `du/dt + L u - r u = -h - (g - u)^+/delta + psi_eps(|grad u|_gamma^2 - (f^gamma)^2)`
/// with Dirichlet 0 on the box boundary and terminal data `g(T,.)`
/// tapered to zero at the edge. The internal time step is clamped below
/// `delta` (and below a gradient-penalty stability bound when the
/// gradient constraint can activate) so the explicit penalty sweeps
/// contract; each output step may therefore be split into substeps.
///
/// `guess` warm-starts the per-slice sweeps (same grid required).
pub fn solve_penalised(
    model: &SdeModel,
    payoffs: &PayoffSpec,
    grid: &Grid,
    eps: f64,
    delta: f64,
    gamma: f64,
    opts: &SolverOptions,
    guess: Option<&PdeSolution>,
) -> Result<PdeSolution> {
    if model.d != grid.d {
        return Err(SglError::InvalidArgument("grid/model dimension mismatch".into()));
    }
    if eps <= 0.0 || delta <= 0.0 || !(0.0..=1.0).contains(&gamma) {
        return Err(SglError::InvalidArgument(
            "need eps > 0, delta > 0, gamma in [0,1]".into(),
        ));
    }
    let d = grid.d;
    let n = grid.n_nodes();
    let nt = grid.nt;
    let tt = payoffs.horizon;
    let ht = tt / nt as f64;
    let hx = grid.hx();
    let r = payoffs.r;
    let coeffs = precompute_coeffs(model, grid)?;
    let psi = if opts.smooth_psi { psi_eps_smooth } else { psi_eps };

    let mut coords = vec![0.0; d];
    let mut values = vec![0.0; (nt + 1) * n];

    // terminal slice: tapered g, exactly 0 on the boundary
    let mut g_term = vec![0.0; n];
    eval_field(&payoffs.g, grid, tt, &mut g_term, &mut coords);
    for idx in 0..n {
        if grid.is_boundary(idx) {
            continue;
        }
        grid.node_coords(idx, &mut coords);
        values[nt * n + idx] = g_term[idx] * edge_taper(grid, &coords);
    }

    // a priori tolerance scales from the terminal data
    let mut h_term = vec![0.0; n];
    eval_field(&payoffs.h, grid, tt, &mut h_term, &mut coords);
    let mut op_scale = 0.0_f64;
    let mut curvature = 0.0_f64;
    let mut grad_scale = 0.0_f64;
    let term = &values[nt * n..];
    let mut grad = vec![0.0; d];
    for idx in 0..n {
        if grid.is_boundary(idx) {
            continue;
        }
        gradient_at(grid, term, idx, &mut grad);
        grad_scale = grad_scale.max(gamma_sq_norm(&grad, model.d0, gamma).sqrt());
        let mut lu = 0.0;
        let curv_here;
        if d == 1 {
            let sec = (term[idx + 1] - 2.0 * term[idx] + term[idx - 1]) / (hx * hx);
            lu = 0.5 * coeffs.a[idx] * sec + coeffs.b[idx] * grad[0];
            curv_here = sec.abs();
        } else {
            let nx = grid.nx;
            let sxx = (term[idx + nx] - 2.0 * term[idx] + term[idx - nx]) / (hx * hx);
            let syy = (term[idx + 1] - 2.0 * term[idx] + term[idx - 1]) / (hx * hx);
            lu += 0.5 * coeffs.a[idx * 4] * sxx + 0.5 * coeffs.a[idx * 4 + 3] * syy;
            lu += coeffs.b[idx * 2] * grad[0] + coeffs.b[idx * 2 + 1] * grad[1];
            curv_here = sxx.abs().max(syy.abs());
        }
        op_scale = op_scale.max((lu - r * term[idx] + h_term[idx]).abs());
        curvature = curvature.max(curv_here);
    }
    let tol_obstacle = 10.0 * delta * op_scale.max(1e-6);
    let tol_grad = 10.0 * hx * curvature.max(1e-6);

    // substep clamp: obstacle penalty always, gradient penalty only when
    // the constraint can activate on this data
    let ff0 = payoffs.f_gamma(gamma, 0.0);
    let ff_min: f64 = (0..=32)
        .map(|i| payoffs.f_gamma(gamma, tt * i as f64 / 32.0))
        .fold(f64::INFINITY, f64::min);
    let mut dt_max = 0.45 * delta;
    if grad_scale >= 0.8 * ff_min {
        dt_max = dt_max.min(0.2 * eps * hx / (d as f64 * ff0));
    }
    let ns = ((ht / dt_max).ceil() as usize).max(1);
    let ht_eff = ht / ns as f64;
    let inv_ht = 1.0 / ht_eff;

    let scale = values[nt * n..].iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let slice_tol = opts.slice_tol_factor * scale;
    let linear_tol = (0.05 * slice_tol).max(1e-14 * scale);

    let mut known = values[nt * n..].to_vec();
    let mut iterate = vec![0.0; n];
    let mut newu = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut g_now = vec![0.0; n];
    let mut h_now = vec![0.0; n];
    let mut scratch = (Vec::new(), Vec::new());
    let mut sweeps_total = 0usize;
    let mut worst_residual = 0.0_f64;

    for k in (0..nt).rev() {
        let t_hi = (k + 1) as f64 * ht;
        for sub in 1..=ns {
            let t_tgt = (t_hi - sub as f64 * ht_eff).max(0.0);
            eval_field(&payoffs.g, grid, t_tgt, &mut g_now, &mut coords);
            eval_field(&payoffs.h, grid, t_tgt, &mut h_now, &mut coords);
            let ff = payoffs.f_gamma(gamma, t_tgt);
            let ff2 = ff * ff;

            // warm start: previous solution at this output slice, else
            // the slice we are stepping from
            iterate.copy_from_slice(&known);
            if sub == ns {
                if let Some(gs) = guess {
                    if gs.grid.n_nodes() == n && gs.grid.nt == nt {
                        iterate.copy_from_slice(gs.slice(k));
                    }
                }
            }

            let mut first_diff = f64::INFINITY;
            let mut converged = false;
            for _sweep in 0..opts.max_sweeps {
                sweeps_total += 1;
                // explicit penalty terms and cross derivative from the
                // current iterate
                for idx in 0..n {
                    if grid.is_boundary(idx) {
                        rhs[idx] = 0.0;
                        continue;
                    }
                    gradient_at(grid, &iterate, idx, &mut grad);
                    let pen_grad = psi(gamma_sq_norm(&grad, model.d0, gamma) - ff2, eps);
                    let pen_obs = (g_now[idx] - iterate[idx]).max(0.0) / delta;
                    let mut cross = 0.0;
                    if d == 2 {
                        let nx = grid.nx;
                        let mi = grid.multi_index(idx);
                        if mi[0] > 0 && mi[0] < nx - 1 && mi[1] > 0 && mi[1] < nx - 1 {
                            let uxy = (iterate[idx + nx + 1] - iterate[idx + nx - 1]
                                - iterate[idx - nx + 1]
                                + iterate[idx - nx - 1])
                                / (4.0 * hx * hx);
                            cross = coeffs.a[idx * 4 + 1] * uxy;
                        }
                    }
                    rhs[idx] = known[idx] * inv_ht + h_now[idx] + pen_obs - pen_grad + cross;
                }

                if d == 1 {
                    solve_linear_1d(&coeffs, grid, r, inv_ht, &rhs, &mut newu, &mut scratch);
                } else {
                    newu.copy_from_slice(&iterate);
                    solve_linear_2d(
                        &coeffs,
                        grid,
                        r,
                        inv_ht,
                        &rhs,
                        &mut newu,
                        linear_tol,
                        opts.relax_omega,
                        opts.max_linear_iters,
                    )?;
                }

                let mut diff = 0.0_f64;
                for idx in 0..n {
                    diff = diff.max((newu[idx] - iterate[idx]).abs());
                }
                std::mem::swap(&mut iterate, &mut newu);
                if diff < slice_tol {
                    worst_residual = worst_residual.max(diff);
                    converged = true;
                    break;
                }
                if first_diff.is_infinite() {
                    first_diff = diff;
                } else if diff > 1e3 * first_diff + slice_tol {
                    return Err(SglError::SweepDiverged {
                        max_sweeps: opts.max_sweeps,
                        residual: diff,
                    });
                }
            }
            if !converged {
                let mut diff = 0.0_f64;
                for idx in 0..n {
                    diff = diff.max((iterate[idx] - newu[idx]).abs());
                }
                return Err(SglError::SweepDiverged {
                    max_sweeps: opts.max_sweeps,
                    residual: diff,
                });
            }
            known.copy_from_slice(&iterate);
            if iterate.iter().any(|v| !v.is_finite()) {
                return Err(SglError::SimulationBlowup { step: k });
            }
        }
        values[k * n..(k + 1) * n].copy_from_slice(&known);
    }

    Ok(PdeSolution {
        grid: grid.clone(),
        horizon: tt,
        eps,
        delta,
        gamma,
        values,
        model: model.clone(),
        payoffs: payoffs.clone(),
        sweeps_total,
        worst_residual,
        tol_obstacle,
        tol_grad,
    })
}

/// Residuals of the two complementarity forms of the variational
/// inequality over interior, collar-excluded nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViResidual {
    pub min_form: f64,
    pub max_form: f64,
    /// (time index, node index, coordinates) of the worst node.
    pub worst_time: usize,
    pub worst_node: usize,
    pub worst_coords: Vec<f64>,
}

pub fn vi_residual(sol: &PdeSolution, collar_frac: f64) -> Result<ViResidual> {
    let grid = &sol.grid;
    let d = grid.d;
    let n = grid.n_nodes();
    let nt = grid.nt;
    let ht = sol.ht();
    let hx = grid.hx();
    let coeffs = precompute_coeffs(&sol.model, grid)?;
    let r = sol.payoffs.r;

    let mut worst_min = 0.0_f64;
    let mut worst_max = 0.0_f64;
    let mut worst = (0usize, 0usize, 0.0_f64);
    let mut coords = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for k in 0..nt {
        let t = k as f64 * ht;
        let ff = sol.payoffs.f_gamma(sol.gamma, t);
        let uk = sol.slice(k);
        let uk1 = sol.slice(k + 1);
        for idx in 0..n {
            if grid.is_boundary(idx) || !grid.outside_collar(idx, collar_frac) {
                continue;
            }
            grid.node_coords(idx, &mut coords);
            gradient_at(grid, uk, idx, &mut grad);
            let lu;
            if d == 1 {
                let sec = (uk[idx + 1] - 2.0 * uk[idx] + uk[idx - 1]) / (hx * hx);
                lu = 0.5 * coeffs.a[idx] * sec + coeffs.b[idx] * grad[0];
            } else {
                let nx = grid.nx;
                let sxx = (uk[idx + nx] - 2.0 * uk[idx] + uk[idx - nx]) / (hx * hx);
                let syy = (uk[idx + 1] - 2.0 * uk[idx] + uk[idx - 1]) / (hx * hx);
                let mi = grid.multi_index(idx);
                let mut uxy = 0.0;
                if mi[0] > 0 && mi[0] < nx - 1 && mi[1] > 0 && mi[1] < nx - 1 {
                    uxy = (uk[idx + nx + 1] - uk[idx + nx - 1] - uk[idx - nx + 1]
                        + uk[idx - nx - 1])
                        / (4.0 * hx * hx);
                }
                lu = 0.5 * coeffs.a[idx * 4] * sxx
                    + 0.5 * coeffs.a[idx * 4 + 3] * syy
                    + coeffs.a[idx * 4 + 1] * uxy
                    + coeffs.b[idx * 2] * grad[0]
                    + coeffs.b[idx * 2 + 1] * grad[1];
            }
            let dtu = (uk1[idx] - uk[idx]) / ht;
            let aa = dtu + lu - r * uk[idx] + (sol.payoffs.h)(t, &coords);
            let bb = (sol.payoffs.g)(t, &coords) - uk[idx];
            let cc = ff - gamma_sq_norm(&grad, sol.model.d0, sol.gamma).sqrt();
            let form1 = aa.max(bb).min(cc);
            let form2 = aa.min(cc).max(bb);
            if form1.abs() > worst_min {
                worst_min = form1.abs();
                worst = (k, idx, 0.0);
            }
            worst_max = worst_max.max(form2.abs());
        }
    }
    let mut wc = vec![0.0; d];
    grid.node_coords(worst.1, &mut wc);
    Ok(ViResidual {
        min_form: worst_min,
        max_form: worst_max,
        worst_time: worst.0,
        worst_node: worst.1,
        worst_coords: wc,
    })
}

/// Node labels over the space-time grid; STOP and SATURATED may overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMap {
    pub nt: usize,
    pub n_nodes: usize,
    pub stop: Vec<bool>,
    pub saturated: Vec<bool>,
}

impl RegionMap {
    pub fn label(&self, k: usize, idx: usize) -> &'static str {
        let i = k * self.n_nodes + idx;
        match (self.stop[i], self.saturated[i]) {
            (true, true) => "STOP+SATURATED",
            (true, false) => "STOP",
            (false, true) => "SATURATED",
            (false, false) => "CONTINUATION",
        }
    }

    pub fn is_continuation(&self, k: usize, idx: usize) -> bool {
        let i = k * self.n_nodes + idx;
        !self.stop[i] && !self.saturated[i]
    }
}

/// Labels each node STOP where `u - g <= tol`, SATURATED where
/// `|grad u|_gamma >= f^gamma - tol`, CONTINUATION otherwise.
pub fn extract_regions(sol: &PdeSolution, tol: f64) -> RegionMap {
    let grid = &sol.grid;
    let n = grid.n_nodes();
    let nt = grid.nt;
    let ht = sol.ht();
    let mut stop = vec![false; (nt + 1) * n];
    let mut saturated = vec![false; (nt + 1) * n];
    let mut coords = vec![0.0; grid.d];
    let mut grad = vec![0.0; grid.d];
    for k in 0..=nt {
        let t = k as f64 * ht;
        let ff = sol.payoffs.f_gamma(sol.gamma, t);
        let uk = sol.slice(k);
        for idx in 0..n {
            grid.node_coords(idx, &mut coords);
            let g = (sol.payoffs.g)(t, &coords);
            if uk[idx] - g <= tol {
                stop[k * n + idx] = true;
            }
            if !grid.is_boundary(idx) {
                gradient_at(grid, uk, idx, &mut grad);
                if gamma_sq_norm(&grad, sol.model.d0, sol.gamma).sqrt() >= ff - tol {
                    saturated[k * n + idx] = true;
                }
            }
        }
    }
    RegionMap {
        nt,
        n_nodes: n,
        stop,
        saturated,
    }
}

const GRID_MAGIC: &[u8; 4] = b"SGVI";
const GRID_VERSION: u32 = 1;

/// Writes the binary solution file: magic, version, then
/// `d, nx, nt, m, eps, delta, gamma` as little-endian f64 followed by the
/// time-major values.
pub fn write_grid_file(sol: &PdeSolution, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    for v in [
        sol.grid.d as f64,
        sol.grid.nx as f64,
        sol.grid.nt as f64,
        sol.grid.m,
        sol.eps,
        sol.delta,
        sol.gamma,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &sol.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Raw contents of a solution file (no model/payoff callables).
#[derive(Debug, Clone)]
pub struct RawSolution {
    pub d: usize,
    pub nx: usize,
    pub nt: usize,
    pub m: f64,
    pub eps: f64,
    pub delta: f64,
    pub gamma: f64,
    pub values: Vec<f64>,
}

pub fn read_grid_file(path: &Path) -> Result<RawSolution> {
    let mut rdr = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    rdr.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(SglError::BadGridFile("bad magic".into()));
    }
    let mut v32 = [0u8; 4];
    rdr.read_exact(&mut v32)?;
    if u32::from_le_bytes(v32) != GRID_VERSION {
        return Err(SglError::BadGridFile("unsupported version".into()));
    }
    let mut header = [0.0f64; 7];
    let mut b8 = [0u8; 8];
    for h in header.iter_mut() {
        rdr.read_exact(&mut b8)?;
        *h = f64::from_le_bytes(b8);
    }
    let d = header[0] as usize;
    let nx = header[1] as usize;
    let nt = header[2] as usize;
    if !(1..=2).contains(&d) || nx < 3 {
        return Err(SglError::BadGridFile("implausible header".into()));
    }
    let count = (nt + 1) * nx.pow(d as u32);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        rdr.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok(RawSolution {
        d,
        nx,
        nt,
        m: header[3],
        eps: header[4],
        delta: header[5],
        gamma: header[6],
        values,
    })
}

/// CSV rows `(t, x1[, x2], u, g, |grad0|, f)`, every `time_stride`-th
/// time slice.
pub fn export_solution_csv<W: Write>(sol: &PdeSolution, time_stride: usize, w: &mut W) -> std::io::Result<()> {
    let grid = &sol.grid;
    let n = grid.n_nodes();
    let ht = sol.ht();
    let stride = time_stride.max(1);
    if grid.d == 1 {
        writeln!(w, "t,x1,u,g,grad0,f")?;
    } else {
        writeln!(w, "t,x1,x2,u,g,grad0,f")?;
    }
    let mut coords = vec![0.0; grid.d];
    let mut grad = vec![0.0; grid.d];
    for k in (0..=grid.nt).step_by(stride) {
        let t = k as f64 * ht;
        let uk = sol.slice(k);
        let fval = (sol.payoffs.f)(t);
        for idx in 0..n {
            grid.node_coords(idx, &mut coords);
            let g = (sol.payoffs.g)(t, &coords);
            let grad0 = if grid.is_boundary(idx) {
                0.0
            } else {
                gradient_at(grid, uk, idx, &mut grad);
                grad[..sol.model.d0].iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            write!(w, "{t:.9e}")?;
            for c in &coords {
                write!(w, ",{c:.9e}")?;
            }
            writeln!(w, ",{:.12e},{:.12e},{:.12e},{:.12e}", uk[idx], g, grad0, fval)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FieldFn, TimeFn};
    use std::sync::Arc;

    fn payoffs(
        f: TimeFn,
        g: FieldFn,
        h: FieldFn,
        r: f64,
        horizon: f64,
        lip: f64,
    ) -> PayoffSpec {
        PayoffSpec::new(f, g, h, r, horizon, 1e6, 0.5, lip).unwrap()
    }

    fn const_payoffs(fv: f64, gv: f64, hv: f64, r: f64, horizon: f64) -> PayoffSpec {
        payoffs(
            Arc::new(move |_t| fv),
            Arc::new(move |_t, _x: &[f64]| gv),
            Arc::new(move |_t, _x: &[f64]| hv),
            r,
            horizon,
            0.0,
        )
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi_eps(-1.0, 0.3), 0.0);
        assert_eq!(psi_eps(0.0, 0.3), 0.0);
        assert!((psi_eps(0.3, 0.1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn psi_smooth_is_c1_and_dominated() {
        let eps = 0.2;
        let w = eps * eps;
        // continuity and C1 at the knee
        let lo = psi_eps_smooth(w - 1e-9, eps);
        let hi = psi_eps_smooth(w + 1e-9, eps);
        assert!((hi - lo).abs() < 1e-7);
        for &z in &[0.001, 0.01, 0.05, 0.2, 1.0] {
            assert!(psi_eps_smooth(z, eps) <= z / eps + 1e-15);
            assert!(psi_eps_smooth(z, eps) >= 0.0);
        }
    }

    /// Golden-section maximization of `rho*w - psi((rho^2 - F^2))/..`
    /// over the radial variable; the objective is concave.
    fn hamiltonian_oracle(w: f64, ff: f64, eps: f64) -> f64 {
        let obj = |rho: f64| rho * w - psi_eps(rho * rho - ff * ff, eps);
        let mut lo = 0.0;
        let mut hi = (ff.max(eps * w / 2.0)) * 2.0 + 1.0;
        let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if obj(m1) < obj(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        obj(0.5 * (lo + hi))
    }

    #[test]
    fn hamiltonian_closed_form_examples() {
        let p = const_payoffs(1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(hamiltonian(&[0.0], 1, 0.0, 0.5, 1.0, &p), 0.0);
        // f^gamma = 1, eps = 0.5: w = 1 <= 2F/eps = 4 -> H = 1
        assert!((hamiltonian(&[1.0], 1, 0.0, 0.5, 1.0, &p) - 1.0).abs() < 1e-12);
        // w = 10 > 4 -> eps w^2/4 + F^2/eps = 12.5 + 2 = 14.5
        assert!((hamiltonian(&[10.0], 1, 0.0, 0.5, 1.0, &p) - 14.5).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_matches_radial_oracle() {
        let p = const_payoffs(1.3, 0.0, 0.0, 0.0, 1.0);
        for &(y, eps, gamma) in &[
            (0.7, 0.4, 1.0),
            (3.0, 0.2, 0.5),
            (25.0, 0.05, 0.8),
            (0.01, 1.0, 0.3),
        ] {
            let h = hamiltonian(&[y, y], 1, 0.2, eps, gamma, &p);
            let w = (y * y + gamma * y * y).sqrt();
            let ff = p.f_gamma(gamma, 0.2);
            let oracle = hamiltonian_oracle(w, ff, eps);
            assert!((h - oracle).abs() <= 1e-6 * (1.0 + h.abs()), "{h} vs {oracle}");
        }
    }

    fn brownian_grid_1d(nx: usize, nt: usize, m: f64) -> (SdeModel, Grid) {
        let model = SdeModel::brownian(1, 1, vec![1.0]).unwrap();
        let grid = Grid::new(1, m, nx, nt).unwrap();
        (model, grid)
    }

    #[test]
    fn zero_game_is_exactly_zero() {
        let (model, grid) = brownian_grid_1d(41, 20, 3.0);
        let p = const_payoffs(1.0, 0.0, 0.0, 0.1, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.1, 1.0, &SolverOptions::default(), None)
            .unwrap();
        assert!(sol.max_abs() <= 1e-10, "max {}", sol.max_abs());
    }

    #[test]
    fn feynman_kac_constant_running_payoff() {
        // h = 1, g = 0, r = 0.1, f huge: u(0,0) = (1 - e^{-rT})/r
        let (model, grid) = brownian_grid_1d(101, 100, 6.0);
        let p = const_payoffs(1e6, 0.0, 1.0, 0.1, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.01, 1.0, &SolverOptions::default(), None)
            .unwrap();
        let target = (1.0 - (-0.1_f64).exp()) / 0.1;
        let got = sol.interpolate(0.0, &[0.0]);
        assert!((got - target).abs() < 1e-2, "{got} vs {target}");
    }

    #[test]
    fn obstacle_dominance_as_delta_shrinks() {
        // concave obstacle: stopping is optimal at the center, where the
        // penalised solution undershoots g by O(delta)
        let (model, grid) = brownian_grid_1d(81, 60, 4.0);
        let p = payoffs(
            Arc::new(|_t| 1e6),
            Arc::new(|_t, x: &[f64]| 5.0 * (-x[0] * x[0]).exp()),
            Arc::new(|_t, _x: &[f64]| 0.0),
            0.0,
            0.5,
            0.0,
        );
        let mut gaps = Vec::new();
        for &delta in &[1e-2, 1e-3] {
            let sol =
                solve_penalised(&model, &p, &grid, 0.1, delta, 1.0, &SolverOptions::default(), None)
                    .unwrap();
            let got = sol.interpolate(0.0, &[0.0]);
            gaps.push(5.0 - got);
        }
        assert!(gaps[1].abs() < gaps[0].abs(), "{gaps:?}");
        assert!(gaps[1].abs() < 0.02, "{gaps:?}");
    }

    #[test]
    fn comparison_in_h() {
        let (model, grid) = brownian_grid_1d(41, 30, 3.0);
        let p1 = const_payoffs(1e6, 0.0, 0.5, 0.0, 0.5);
        let p2 = const_payoffs(1e6, 0.0, 1.0, 0.0, 0.5);
        let o = SolverOptions::default();
        let s1 = solve_penalised(&model, &p1, &grid, 0.1, 0.01, 1.0, &o, None).unwrap();
        let s2 = solve_penalised(&model, &p2, &grid, 0.1, 0.01, 1.0, &o, None).unwrap();
        for (a, b) in s1.values.iter().zip(s2.values.iter()) {
            assert!(b + 1e-12 >= *a);
        }
    }

    #[test]
    fn vi_residual_zero_solution() {
        let (model, grid) = brownian_grid_1d(21, 10, 2.0);
        let p = const_payoffs(1.0, 0.0, 0.0, 0.0, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.1, 1.0, &SolverOptions::default(), None)
            .unwrap();
        let res = vi_residual(&sol, 0.2).unwrap();
        assert!(res.min_form < 1e-9 && res.max_form < 1e-9, "{res:?}");
    }

    #[test]
    fn perturbation_inflates_residual() {
        let (model, grid) = brownian_grid_1d(41, 40, 3.0);
        let p = const_payoffs(1e6, 0.0, 1.0, 0.1, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.01, 1.0, &SolverOptions::default(), None)
            .unwrap();
        let base = vi_residual(&sol, 0.2).unwrap();
        let mut noisy = sol.clone();
        for (i, v) in noisy.values.iter_mut().enumerate() {
            *v += if i % 2 == 0 { 1e-2 } else { -1e-2 };
        }
        let pert = vi_residual(&noisy, 0.2).unwrap();
        assert!(pert.min_form > base.min_form);
    }

    #[test]
    fn regions_trivial_labels() {
        let (model, grid) = brownian_grid_1d(21, 5, 2.0);
        let p = const_payoffs(1.0, 0.0, 0.0, 0.0, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.1, 1.0, &SolverOptions::default(), None)
            .unwrap();
        // u = g = 0 everywhere -> all STOP
        let map = extract_regions(&sol, 1e-9);
        assert!(map.stop.iter().all(|&s| s));
        // lift u by 1: flat, gradient 0 < f -> interior is CONTINUATION
        let mut lifted = sol.clone();
        for v in lifted.values.iter_mut() {
            *v += 1.0;
        }
        let map = extract_regions(&lifted, 1e-9);
        for k in 0..=lifted.grid.nt {
            for idx in 1..lifted.grid.nx - 1 {
                assert!(map.is_continuation(k, idx), "k {k} idx {idx}");
            }
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let (model, grid) = brownian_grid_1d(21, 8, 2.0);
        let p = const_payoffs(1e6, 0.0, 1.0, 0.05, 0.5);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.01, 0.5, &SolverOptions::default(), None)
            .unwrap();
        let dir = std::env::temp_dir().join("sgl-grid-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.grid");
        write_grid_file(&sol, &path).unwrap();
        let raw = read_grid_file(&path).unwrap();
        assert_eq!(raw.d, 1);
        assert_eq!(raw.nx, 21);
        assert_eq!(raw.nt, 8);
        assert_eq!(raw.gamma, 0.5);
        assert_eq!(raw.values, sol.values);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn interpolation_reproduces_linear_data() {
        let (model, grid) = brownian_grid_1d(11, 4, 1.0);
        let p = const_payoffs(1.0, 0.0, 0.0, 0.0, 1.0);
        let mut sol =
            solve_penalised(&model, &p, &grid, 0.1, 0.1, 1.0, &SolverOptions::default(), None)
                .unwrap();
        let n = grid.n_nodes();
        for k in 0..=grid.nt {
            for i in 0..n {
                sol.values[k * n + i] = 2.0 * grid.axis_coord(0, i) + k as f64;
            }
        }
        let v = sol.interpolate(0.375, &[0.3]); // between slices 1 and 2
        assert!((v - (0.6 + 1.5)).abs() < 1e-12, "{v}");
        // clamped outside the box
        let (_, clamped) = sol.interpolate_detail(0.0, &[5.0]);
        assert!(clamped);
    }

    #[test]
    fn csv_export_shape() {
        let (model, grid) = brownian_grid_1d(11, 4, 1.0);
        let p = const_payoffs(1.0, 0.0, 0.0, 0.0, 1.0);
        let sol = solve_penalised(&model, &p, &grid, 0.1, 0.1, 1.0, &SolverOptions::default(), None)
            .unwrap();
        let mut buf = Vec::new();
        export_solution_csv(&sol, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,u,g,grad0,f"));
        assert_eq!(text.lines().count(), 1 + 5 * 11);
    }
}
