//! Controlled SDE coefficients, payoff functions and sampled validation
//! of the standing assumptions.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SglError};
use crate::rng::derive_seed;

/// Drift map `R^d -> R^d`; writes into the output slice.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Diffusion map `R^d -> R^{d x d'}`, row-major; writes into the output slice.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Time-dependent scalar, e.g. the control cost rate `f`.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// Scalar field over `(t, x)`, e.g. the obstacle `g` or running payoff `h`.
pub type FieldFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// The controlled diffusion: dimensions, coefficients and the regularity
/// constants they are validated against.
#[derive(Clone)]
pub struct SdeModel {
    /// State dimension.
    pub d: usize,
    /// Number of directly controlled coordinates (first block).
    pub d0: usize,
    /// Number of uncontrolled coordinates, `d = d0 + d1`.
    pub d1: usize,
    /// Brownian driver dimension, `d <= dprime`.
    pub dprime: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    /// Bound on first derivatives of drift and diffusion.
    pub deriv_bound: f64,
    /// Linear-growth constant: `|b(x)| + |kappa(x)| <= growth_bound (1+|x|)`.
    pub growth_bound: f64,
}

impl SdeModel {
    pub fn new(
        d: usize,
        d0: usize,
        dprime: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        deriv_bound: f64,
        growth_bound: f64,
    ) -> Result<Self> {
        if d == 0 || d0 == 0 || d0 > d {
            return Err(SglError::InvalidArgument(format!(
                "need 0 < d0 <= d, got d={d}, d0={d0}"
            )));
        }
        if dprime < d {
            return Err(SglError::InvalidArgument(format!(
                "need d <= dprime, got d={d}, dprime={dprime}"
            )));
        }
        Ok(SdeModel {
            d,
            d0,
            d1: d - d0,
            dprime,
            drift,
            diffusion,
            deriv_bound,
            growth_bound,
        })
    }

    /// Zero drift, diffusion `sigma_i` on the diagonal.
    pub fn brownian(d: usize, d0: usize, sigma: Vec<f64>) -> Result<Self> {
        assert_eq!(sigma.len(), d);
        let s = sigma.clone();
        let diffusion: DiffusionFn = Arc::new(move |_x, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = s[i];
            }
        });
        let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
        SdeModel::new(
            d,
            d0,
            d,
            Arc::new(|_x, out| out.fill(0.0)),
            diffusion,
            0.0,
            smax * (d as f64).sqrt() + 1e-12,
        )
    }

    /// Geometric dynamics: `b_i = mu_i x_i`, `kappa_ii = sigma_i x_i`.
    pub fn geometric(d: usize, d0: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        assert_eq!(mu.len(), d);
        assert_eq!(sigma.len(), d);
        let m = mu.clone();
        let s = sigma.clone();
        let drift: DriftFn = Arc::new(move |x, out| {
            for i in 0..x.len() {
                out[i] = m[i] * x[i];
            }
        });
        let diffusion: DiffusionFn = Arc::new(move |x, out| {
            out.fill(0.0);
            for i in 0..x.len() {
                out[i * x.len() + i] = s[i] * x[i];
            }
        });
        let d1b = mu
            .iter()
            .chain(sigma.iter())
            .map(|v| v.abs())
            .fold(0.0_f64, f64::max);
        let growth = mu.iter().map(|v| v.abs()).sum::<f64>()
            + sigma.iter().map(|v| v.abs()).sum::<f64>();
        SdeModel::new(d, d0, d, drift, diffusion, d1b, growth.max(1.0))
    }

    /// Ornstein-Uhlenbeck: `b_i = rate_i (mean_i - x_i)`, diffusion `sigma_i`.
    pub fn ornstein_uhlenbeck(
        d: usize,
        d0: usize,
        rate: Vec<f64>,
        mean: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        assert_eq!(rate.len(), d);
        assert_eq!(mean.len(), d);
        assert_eq!(sigma.len(), d);
        let r = rate.clone();
        let m = mean.clone();
        let s = sigma.clone();
        let drift: DriftFn = Arc::new(move |x, out| {
            for i in 0..x.len() {
                out[i] = r[i] * (m[i] - x[i]);
            }
        });
        let diffusion: DiffusionFn = Arc::new(move |x, out| {
            out.fill(0.0);
            for i in 0..x.len() {
                out[i * x.len() + i] = s[i];
            }
        });
        let d1b = rate.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
        let growth = rate
            .iter()
            .zip(mean.iter())
            .map(|(a, b)| a.abs() * (1.0 + b.abs()))
            .sum::<f64>()
            + sigma.iter().map(|v| v.abs()).sum::<f64>();
        SdeModel::new(d, d0, d, drift, diffusion, d1b, growth.max(1.0))
    }

    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        (self.drift)(x, &mut out);
        out
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.dprime];
        (self.diffusion)(x, &mut out);
        out
    }
}

/// Payoff data of the game: control cost `f`, stopping payoff `g`, running
/// payoff `h`, discount `r`, horizon and growth/Lipschitz constants.
#[derive(Clone)]
pub struct PayoffSpec {
    pub f: TimeFn,
    pub g: FieldFn,
    pub h: FieldFn,
    pub r: f64,
    pub horizon: f64,
    /// Growth constant: `g + h <= k1 (1 + |x|^beta)`.
    pub k1: f64,
    pub beta: f64,
    /// Lipschitz constant of `g` and `h`; also enters `f_gamma`.
    pub lip: f64,
}

impl PayoffSpec {
    pub fn new(
        f: TimeFn,
        g: FieldFn,
        h: FieldFn,
        r: f64,
        horizon: f64,
        k1: f64,
        beta: f64,
        lip: f64,
    ) -> Result<Self> {
        if horizon <= 0.0 {
            return Err(SglError::InvalidArgument("horizon must be positive".into()));
        }
        if r < 0.0 {
            // Negative discount rates can be folded into f, g, h instead
            // (they are time-dependent); we only expose r >= 0.
            return Err(SglError::InvalidArgument("discount rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(SglError::InvalidArgument("beta must lie in [0,1)".into()));
        }
        Ok(PayoffSpec {
            f,
            g,
            h,
            r,
            horizon,
            k1,
            beta,
            lip,
        })
    }

    /// The gamma-regularised cost rate `f^gamma(t) = sqrt(f(t)^2 + gamma K^2)`.
    pub fn f_gamma(&self, gamma: f64, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&gamma));
        let ft = (self.f)(t);
        (ft * ft + gamma * self.lip * self.lip).sqrt()
    }
}

/// Axis-aligned sampling region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(SglError::InvalidArgument("box bounds must match".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| a >= b) {
            return Err(SglError::InvalidArgument("box must be nonempty".into()));
        }
        Ok(BoxRegion { lo, hi })
    }

    /// Centered cube `[-m, m]^d`.
    pub fn centered(d: usize, m: f64) -> Self {
        BoxRegion {
            lo: vec![-m; d],
            hi: vec![m; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(&a, &b)| rng.gen_range(a..b))
            .collect()
    }
}

/// Outcome of one assumption clause.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClauseReport {
    pub name: String,
    pub pass: bool,
    /// Worst sampled value for the clause (violation magnitude, or the
    /// reported quantity for informational clauses).
    pub worst: f64,
    pub threshold: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub clauses: Vec<ClauseReport>,
    /// Smallest sampled eigenvalue of `kappa kappa^T` (model reports only).
    pub min_eigenvalue: Option<f64>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }
}

const FD_REL_STEP: f64 = 1e-5;

fn fd_step(x: f64) -> f64 {
    FD_REL_STEP * (1.0 + x.abs())
}

fn check_finite(what: &str, vals: &[f64], point: &[f64]) -> Result<()> {
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(SglError::NonFiniteCoefficient {
            what: what.to_string(),
            point: point.to_vec(),
        });
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn min_symmetric_eigenvalue(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
}

/// Samples the box and checks the model's standing assumptions by finite
/// differences: bounded derivatives, own-coordinate diffusion rows,
/// ellipticity (reported, not prescribed) and linear growth.
pub fn validate_model(
    model: &SdeModel,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(SglError::InvalidArgument("samples must be >= 1".into()));
    }
    if region.dim() != model.d {
        return Err(SglError::InvalidArgument(
            "box dimension does not match model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "validate-model", 0));
    let d = model.d;
    let dp = model.dprime;

    let mut worst_deriv = 0.0_f64;
    let mut worst_foreign = 0.0_f64;
    let mut min_eig = f64::INFINITY;
    let mut worst_growth = f64::NEG_INFINITY;

    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let b = model.drift_at(&x);
        check_finite("drift", &b, &x)?;
        let kappa = model.diffusion_at(&x);
        check_finite("diffusion", &kappa, &x)?;

        // clause (i): finite-difference partials of b and kappa
        for j in 0..d {
            let h = fd_step(x[j]);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let bp = model.drift_at(&xp);
            let bm = model.drift_at(&xm);
            check_finite("drift", &bp, &xp)?;
            check_finite("drift", &bm, &xm)?;
            for i in 0..d {
                worst_deriv = worst_deriv.max(((bp[i] - bm[i]) / (2.0 * h)).abs());
            }
            let kp = model.diffusion_at(&xp);
            let km = model.diffusion_at(&xm);
            check_finite("diffusion", &kp, &xp)?;
            check_finite("diffusion", &km, &xm)?;
            for i in 0..d {
                for c in 0..dp {
                    let der = ((kp[i * dp + c] - km[i * dp + c]) / (2.0 * h)).abs();
                    worst_deriv = worst_deriv.max(der);
                    // clause (ii): row i must not react to coordinate j != i
                    if i != j {
                        worst_foreign = worst_foreign
                            .max((kp[i * dp + c] - kappa[i * dp + c]).abs() / h)
                            .max((km[i * dp + c] - kappa[i * dp + c]).abs() / h);
                    }
                }
            }
        }

        // clause (iii): smallest eigenvalue of kappa kappa^T
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for c in 0..dp {
                    s += kappa[i * dp + c] * kappa[j * dp + c];
                }
                a[i * d + j] = s;
            }
        }
        min_eig = min_eig.min(min_symmetric_eigenvalue(&a, d));

        // linear growth
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let knorm = kappa.iter().map(|v| v * v).sum::<f64>().sqrt();
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_growth = worst_growth.max(bnorm + knorm - model.growth_bound * (1.0 + xnorm));
    }

    let fd_tol = 1e-3 * (1.0 + model.deriv_bound);
    let clauses = vec![
        ClauseReport {
            name: "derivative_bound".into(),
            pass: worst_deriv <= model.deriv_bound + fd_tol,
            worst: worst_deriv,
            threshold: model.deriv_bound,
            note: "max sampled |partial| of b and kappa (clause i)".into(),
        },
        ClauseReport {
            name: "own_coordinate_diffusion".into(),
            pass: worst_foreign <= fd_tol,
            worst: worst_foreign,
            threshold: 0.0,
            note: "max response of kappa row i to a foreign coordinate (clause ii)".into(),
        },
        ClauseReport {
            name: "ellipticity".into(),
            pass: min_eig > 0.0,
            worst: min_eig,
            threshold: 0.0,
            note: "smallest sampled eigenvalue of kappa kappa^T (theta_B, clause iii)".into(),
        },
        ClauseReport {
            name: "linear_growth".into(),
            pass: worst_growth <= fd_tol,
            worst: worst_growth,
            threshold: 0.0,
            note: "max of |b|+|kappa| - D2(1+|x|)".into(),
        },
    ];
    Ok(ValidationReport {
        clauses,
        min_eigenvalue: Some(min_eig),
    })
}

/// Samples the box and checks the payoff assumptions: positivity and
/// monotonicity of `f`, nonnegativity and growth of `g`, `h`, and the
/// gradient bound `|grad0 g| <= f`.
pub fn validate_payoffs(
    payoffs: &PayoffSpec,
    model: &SdeModel,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(SglError::InvalidArgument("samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "validate-payoffs", 0));
    let t_grid: Vec<f64> = (0..=64)
        .map(|i| payoffs.horizon * i as f64 / 64.0)
        .collect();

    // f positivity (hard failure) and monotonicity
    let mut f_prev = f64::INFINITY;
    let mut worst_mono = f64::NEG_INFINITY;
    for &t in &t_grid {
        let ft = (payoffs.f)(t);
        if !ft.is_finite() {
            return Err(SglError::NonFiniteCoefficient {
                what: "f".into(),
                point: vec![t],
            });
        }
        if ft <= 0.0 {
            return Err(SglError::InvalidArgument(format!(
                "f({t}) = {ft} violates f : [0,T] -> (0,inf)"
            )));
        }
        worst_mono = worst_mono.max(ft - f_prev);
        f_prev = ft;
    }

    let mut worst_neg = 0.0_f64; // most negative g or h
    let mut worst_growth = f64::NEG_INFINITY;
    let mut worst_grad = f64::NEG_INFINITY; // |grad0 g| - f
    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let t = rng.gen_range(0.0..payoffs.horizon);
        let gv = (payoffs.g)(t, &x);
        let hv = (payoffs.h)(t, &x);
        if !gv.is_finite() || !hv.is_finite() {
            return Err(SglError::NonFiniteCoefficient {
                what: "g or h".into(),
                point: x,
            });
        }
        worst_neg = worst_neg.min(gv).min(hv);
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_growth =
            worst_growth.max(gv + hv - payoffs.k1 * (1.0 + xnorm.powf(payoffs.beta)));

        let mut grad_sq = 0.0;
        for j in 0..model.d0 {
            let h = fd_step(x[j]);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let der = ((payoffs.g)(t, &xp) - (payoffs.g)(t, &xm)) / (2.0 * h);
            grad_sq += der * der;
        }
        worst_grad = worst_grad.max(grad_sq.sqrt() - (payoffs.f)(t));
    }

    let tol = 1e-6;
    let grad_tol = 1e-3;
    let clauses = vec![
        ClauseReport {
            name: "f_positive_nonincreasing".into(),
            pass: worst_mono <= tol,
            worst: worst_mono,
            threshold: 0.0,
            note: "max increase of f along the time grid".into(),
        },
        ClauseReport {
            name: "g_h_nonnegative".into(),
            pass: worst_neg >= -tol,
            worst: worst_neg,
            threshold: 0.0,
            note: "most negative sampled g or h".into(),
        },
        ClauseReport {
            name: "growth".into(),
            pass: worst_growth <= tol,
            worst: worst_growth,
            threshold: 0.0,
            note: "max of g+h - K1(1+|x|^beta)".into(),
        },
        ClauseReport {
            name: "gradient_bound".into(),
            pass: worst_grad <= grad_tol,
            worst: worst_grad,
            threshold: 0.0,
            note: "max of |grad0 g| - f(t) by finite differences (clause iii)".into(),
        },
    ];
    Ok(ValidationReport {
        clauses,
        min_eigenvalue: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(d: usize) -> BoxRegion {
        BoxRegion::centered(d, 1.0)
    }

    #[test]
    fn identity_diffusion_passes() {
        let m = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
        let rep = validate_model(&m, &unit_box(2), 64, 7).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
        let eig = rep.min_eigenvalue.unwrap();
        assert!((eig - 1.0).abs() < 1e-9);
        // D1 estimate is 0 for constant coefficients
        assert!(rep.clauses[0].worst.abs() < 1e-9);
    }

    #[test]
    fn foreign_coordinate_row_fails_clause_ii() {
        // d=2, kappa row 1 = (x2, 0): depends on the other coordinate
        let diffusion: DiffusionFn = Arc::new(|x, out| {
            out.fill(0.0);
            out[0] = x[1];
            out[3] = 1.0;
        });
        let m = SdeModel::new(
            2,
            1,
            2,
            Arc::new(|_x, out| out.fill(0.0)),
            diffusion,
            1.0,
            3.0,
        )
        .unwrap();
        let rep = validate_model(&m, &unit_box(2), 64, 7).unwrap();
        let clause = rep
            .clauses
            .iter()
            .find(|c| c.name == "own_coordinate_diffusion")
            .unwrap();
        assert!(!clause.pass);
    }

    #[test]
    fn geometric_model_on_shifted_box() {
        // kappa = diag(0.2 x1, 0.3 x2) on [1,2]^2: passes clause (ii),
        // min eigenvalue 0.04 at x1 = 1 (brute-force sampled).
        let m = SdeModel::geometric(2, 1, vec![0.0, 0.0], vec![0.2, 0.3]).unwrap();
        let region = BoxRegion::new(vec![1.0, 1.0], vec![2.0, 2.0]).unwrap();
        let rep = validate_model(&m, &region, 4000, 11).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
        let eig = rep.min_eigenvalue.unwrap();
        assert!((eig - 0.04).abs() < 0.005, "min eig {eig}");
    }

    #[test]
    fn validation_is_deterministic() {
        let m = SdeModel::geometric(2, 1, vec![0.1, 0.2], vec![0.2, 0.3]).unwrap();
        let region = BoxRegion::new(vec![1.0, 1.0], vec![2.0, 2.0]).unwrap();
        let a = validate_model(&m, &region, 256, 5).unwrap();
        let b = validate_model(&m, &region, 256, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn nonfinite_coefficient_is_hard_failure() {
        let drift: DriftFn = Arc::new(|x, out| out[0] = 1.0 / (x[0] - x[0]));
        let m = SdeModel::new(
            1,
            1,
            1,
            drift,
            Arc::new(|_x, out| out[0] = 1.0),
            0.0,
            2.0,
        )
        .unwrap();
        let err = validate_model(&m, &unit_box(1), 8, 1).unwrap_err();
        assert!(matches!(err, SglError::NonFiniteCoefficient { .. }));
    }

    fn simple_payoffs(g: FieldFn, f: TimeFn) -> PayoffSpec {
        PayoffSpec::new(
            f,
            g,
            Arc::new(|_t, _x| 0.0),
            0.0,
            1.0,
            100.0,
            0.5,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn trivial_payoffs_pass() {
        let p = simple_payoffs(Arc::new(|_t, _x| 0.0), Arc::new(|_t| 1.0));
        let m = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
        let rep = validate_payoffs(&p, &m, &unit_box(2), 128, 3).unwrap();
        assert!(rep.all_pass(), "{rep:?}");
    }

    #[test]
    fn steep_obstacle_fails_gradient_clause() {
        // g = 2 x1 has |d/dx1 g| = 2 > f = 1 (and is negative somewhere,
        // but the gradient clause is what we check here)
        let p = simple_payoffs(Arc::new(|_t, x| 2.0 * x[0]), Arc::new(|_t| 1.0));
        let m = SdeModel::brownian(2, 1, vec![1.0, 1.0]).unwrap();
        let rep = validate_payoffs(&p, &m, &unit_box(2), 128, 3).unwrap();
        let clause = rep
            .clauses
            .iter()
            .find(|c| c.name == "gradient_bound")
            .unwrap();
        assert!(!clause.pass);
        assert!((clause.worst - 1.0).abs() < 1e-3); // 2 - f = 1
    }

    #[test]
    fn time_decaying_gradient_bound_passes() {
        // f(t) = 2 - t, g = (1.5 - t) sin(x1): |d g/dx1| <= 1.5 - t <= f
        let p = PayoffSpec::new(
            Arc::new(|t| 2.0 - t),
            Arc::new(|t, x: &[f64]| (1.5 - t) * x[0].sin() + 10.0),
            Arc::new(|_t, _x| 0.0),
            0.0,
            1.0,
            100.0,
            0.0,
            2.0,
        )
        .unwrap();
        let m = SdeModel::brownian(1, 1, vec![1.0]).unwrap();
        let region = BoxRegion::new(vec![-4.0], vec![4.0]).unwrap();
        let rep = validate_payoffs(&p, &m, &region, 2000, 9).unwrap();
        let clause = rep
            .clauses
            .iter()
            .find(|c| c.name == "gradient_bound")
            .unwrap();
        assert!(clause.pass, "{clause:?}");
    }

    #[test]
    fn nonpositive_f_is_hard_failure() {
        let p = simple_payoffs(Arc::new(|_t, _x| 0.0), Arc::new(|t| 0.5 - t));
        let m = SdeModel::brownian(1, 1, vec![1.0]).unwrap();
        assert!(validate_payoffs(&p, &m, &unit_box(1), 8, 1).is_err());
    }

    #[test]
    fn f_gamma_formula() {
        let p = simple_payoffs(Arc::new(|_t, _x| 0.0), Arc::new(|_t| 1.0));
        // f = 1, K = 2, gamma = 0.25 -> sqrt(1 + 0.25 * 4) = sqrt 2
        assert!((p.f_gamma(0.25, 0.3) - 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(p.f_gamma(0.0, 0.3), 1.0);
        let p0 = PayoffSpec::new(
            Arc::new(|_t| 1.0),
            Arc::new(|_t, _x| 0.0),
            Arc::new(|_t, _x| 0.0),
            0.0,
            1.0,
            1.0,
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(p0.f_gamma(1.0, 0.0), 1.0); // K = 0 collapses the correction
    }

    #[test]
    fn min_eigenvalue_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let eig = min_symmetric_eigenvalue(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((eig - 1.0).abs() < 1e-10);
    }
}
