//! Experiment configuration: one JSON document with sections `model`,
//! `payoffs`, `grid`, `schedules`, `experiments` (plus optional
//! `solver`). Fields accept named built-ins with numeric parameters or
//! expression strings in the small arithmetic grammar of the core crate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sgl_core::control::{BatteryConfig, ControlPath};
use sgl_core::expr::Expr;
use sgl_core::limits::Stage;
use sgl_core::model::{BoxRegion, PayoffSpec, SdeModel};
use sgl_core::pde::{Grid, SolverOptions};
use sgl_core::simulate::ScalarProcessSpec;
use sgl_core::SglError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelSection,
    pub payoffs: PayoffSection,
    pub grid: GridSection,
    #[serde(default)]
    pub schedules: ScheduleSection,
    #[serde(default)]
    pub experiments: ExperimentSection,
    #[serde(default)]
    pub solver: SolverSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    /// `brownian`, `geometric`, `ornstein-uhlenbeck`, or `custom`.
    pub kind: String,
    pub d: usize,
    pub d0: usize,
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub rate: Option<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    /// Custom drift: one expression per coordinate.
    #[serde(default)]
    pub drift: Option<Vec<String>>,
    /// Custom diffusion: row-major `d x dprime` matrix of expressions.
    #[serde(default)]
    pub diffusion: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub dprime: Option<usize>,
    #[serde(default)]
    pub deriv_bound: Option<f64>,
    #[serde(default)]
    pub growth_bound: Option<f64>,
}

/// A scalar field: an expression string or a named built-in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Expr(String),
    Builtin {
        kind: String,
        #[serde(default)]
        strike: Option<f64>,
        #[serde(default)]
        coeff: Option<f64>,
        #[serde(default)]
        offset: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayoffSection {
    pub f: FieldSpec,
    pub g: FieldSpec,
    pub h: FieldSpec,
    pub r: f64,
    pub horizon: f64,
    #[serde(default = "one")]
    pub k1: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "one")]
    pub lip: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub m: f64,
    pub nx: usize,
    pub nt: usize,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ScheduleSection {
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatterySection {
    pub n_controls: usize,
    #[serde(default = "default_atoms")]
    pub max_atoms: usize,
    #[serde(default = "default_segments")]
    pub max_segments: usize,
    #[serde(default = "one")]
    pub max_atom_size: f64,
    #[serde(default = "one")]
    pub max_rate: f64,
    /// Confine directions to the first d0 coordinates.
    #[serde(default = "yes")]
    pub constrained: bool,
    /// Admissible-class moment constant.
    #[serde(default = "default_k2")]
    pub k2: f64,
}

fn default_atoms() -> usize {
    3
}
fn default_segments() -> usize {
    2
}
fn default_k2() -> f64 {
    4.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilitySection {
    pub gammas: Vec<f64>,
    pub control: ControlPath,
    /// Fixed stop time (grid-snapped); defaults to the control horizon.
    #[serde(default)]
    pub stop: Option<f64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeSection {
    pub x0: f64,
    pub drift: f64,
    pub sigma: f64,
    /// Jumps as `[time, size]` pairs.
    #[serde(default)]
    pub jumps: Vec<(f64, f64)>,
    pub horizon: f64,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ExperimentSection {
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Contact tolerance for the realized optimal stop.
    #[serde(default = "default_contact")]
    pub tol_contact: f64,
    /// Discretisation allowance in the optimality cross-check.
    #[serde(default = "default_disc")]
    pub disc_tol: f64,
    #[serde(default)]
    pub battery: Option<BatterySection>,
    #[serde(default)]
    pub stability: Option<StabilitySection>,
    #[serde(default)]
    pub local_time: Option<LocalTimeSection>,
}

fn default_seed() -> u64 {
    42
}
fn default_paths() -> usize {
    400
}
fn default_dt() -> f64 {
    2e-3
}
fn default_contact() -> f64 {
    1e-3
}
fn default_disc() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SolverSection {
    #[serde(default)]
    pub smooth_psi: bool,
    #[serde(default)]
    pub max_sweeps: Option<usize>,
}

impl Config {
    pub fn from_value(v: Value) -> Result<Config, String> {
        serde_json::from_value(v).map_err(|e| e.to_string())
    }

    pub fn build_model(&self) -> Result<SdeModel, SglError> {
        let m = &self.model;
        let d = m.d;
        let need = |o: &Option<Vec<f64>>, name: &str| -> Result<Vec<f64>, SglError> {
            o.clone().ok_or_else(|| {
                SglError::InvalidArgument(format!("model kind {} needs `{}`", m.kind, name))
            })
        };
        match m.kind.as_str() {
            "brownian" => SdeModel::brownian(d, m.d0, need(&m.sigma, "sigma")?),
            "geometric" => SdeModel::geometric(d, m.d0, need(&m.mu, "mu")?, need(&m.sigma, "sigma")?),
            "ornstein-uhlenbeck" | "ornstein_uhlenbeck" => SdeModel::ornstein_uhlenbeck(
                d,
                m.d0,
                need(&m.rate, "rate")?,
                need(&m.mean, "mean")?,
                need(&m.sigma, "sigma")?,
            ),
            "custom" => {
                let drift_src = m.drift.clone().ok_or_else(|| {
                    SglError::InvalidArgument("custom model needs `drift`".into())
                })?;
                let diff_src = m.diffusion.clone().ok_or_else(|| {
                    SglError::InvalidArgument("custom model needs `diffusion`".into())
                })?;
                if drift_src.len() != d || diff_src.len() != d {
                    return Err(SglError::InvalidArgument(
                        "custom drift/diffusion must have d rows".into(),
                    ));
                }
                let dprime = m.dprime.unwrap_or(d);
                let drift_ex: Vec<Expr> = drift_src
                    .iter()
                    .map(|s| Expr::parse(s))
                    .collect::<Result<_, _>>()?;
                let mut diff_ex = Vec::with_capacity(d * dprime);
                for row in &diff_src {
                    if row.len() != dprime {
                        return Err(SglError::InvalidArgument(
                            "diffusion rows must have dprime entries".into(),
                        ));
                    }
                    for s in row {
                        diff_ex.push(Expr::parse(s)?);
                    }
                }
                let drift_ex = Arc::new(drift_ex);
                let diff_ex = Arc::new(diff_ex);
                let de = drift_ex.clone();
                let drift = Arc::new(move |x: &[f64], out: &mut [f64]| {
                    for (i, e) in de.iter().enumerate() {
                        out[i] = e.eval(0.0, x);
                    }
                });
                let fe = diff_ex.clone();
                let diffusion = Arc::new(move |x: &[f64], out: &mut [f64]| {
                    for (i, e) in fe.iter().enumerate() {
                        out[i] = e.eval(0.0, x);
                    }
                });
                SdeModel::new(
                    d,
                    m.d0,
                    dprime,
                    drift,
                    diffusion,
                    m.deriv_bound.unwrap_or(1.0),
                    m.growth_bound.unwrap_or(1.0),
                )
            }
            other => Err(SglError::InvalidArgument(format!(
                "unknown model kind `{other}`"
            ))),
        }
    }

    fn build_field(spec: &FieldSpec) -> Result<Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>, SglError> {
        match spec {
            FieldSpec::Expr(src) => {
                let e = Expr::parse(src)?;
                Ok(Arc::new(move |t, x: &[f64]| e.eval(t, x)))
            }
            FieldSpec::Builtin {
                kind,
                strike,
                coeff,
                offset,
            } => match kind.as_str() {
                "put" => {
                    let k = strike.ok_or_else(|| {
                        SglError::InvalidArgument("put payoff needs `strike`".into())
                    })?;
                    Ok(Arc::new(move |_t, x: &[f64]| (k - x[0]).max(0.0)))
                }
                "call" => {
                    let k = strike.ok_or_else(|| {
                        SglError::InvalidArgument("call payoff needs `strike`".into())
                    })?;
                    Ok(Arc::new(move |_t, x: &[f64]| (x[0] - k).max(0.0)))
                }
                "quadratic" => {
                    let c = coeff.unwrap_or(1.0);
                    let o = offset.unwrap_or(0.0);
                    Ok(Arc::new(move |_t, x: &[f64]| {
                        c * x.iter().map(|v| v * v).sum::<f64>() + o
                    }))
                }
                other => Err(SglError::InvalidArgument(format!(
                    "unknown payoff builtin `{other}`"
                ))),
            },
        }
    }

    pub fn build_payoffs(&self) -> Result<PayoffSpec, SglError> {
        let p = &self.payoffs;
        let f = Self::build_field(&p.f)?;
        let g = Self::build_field(&p.g)?;
        let h = Self::build_field(&p.h)?;
        let f_time: sgl_core::model::TimeFn = Arc::new(move |t| f(t, &[]));
        PayoffSpec::new(f_time, g, h, p.r, p.horizon, p.k1, p.beta, p.lip)
    }

    pub fn build_grid(&self) -> Result<Grid, SglError> {
        let g = Grid::new(self.model.d, self.grid.m, self.grid.nx, self.grid.nt)?;
        match &self.grid.center {
            Some(c) => g.with_center(c.clone()),
            None => Ok(g),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        let mut o = SolverOptions {
            smooth_psi: self.solver.smooth_psi,
            ..SolverOptions::default()
        };
        if let Some(s) = self.solver.max_sweeps {
            o.max_sweeps = s;
        }
        o
    }

    /// Sampling box for the validation clauses: the grid domain.
    pub fn region(&self) -> Result<BoxRegion, SglError> {
        let g = self.build_grid()?;
        let lo: Vec<f64> = g.center.iter().map(|c| c - self.grid.m).collect();
        let hi: Vec<f64> = g.center.iter().map(|c| c + self.grid.m).collect();
        BoxRegion::new(lo, hi)
    }

    pub fn x0(&self) -> Vec<f64> {
        self.experiments
            .x0
            .clone()
            .unwrap_or_else(|| self.build_grid().map(|g| g.center).unwrap_or_default())
    }

    /// Single-solve parameters: the last schedule stage, or a mild default.
    pub fn final_stage(&self) -> Stage {
        self.schedules.stages.last().cloned().unwrap_or(Stage {
            eps: 0.1,
            delta: 0.01,
            m: self.grid.m,
        })
    }

    pub fn battery_controls(&self, horizon: f64) -> Result<Vec<ControlPath>, SglError> {
        let b = self.experiments.battery.as_ref().ok_or_else(|| {
            SglError::InvalidArgument("config has no experiments.battery section".into())
        })?;
        let cfg = BatteryConfig {
            d: self.model.d,
            d0: if b.constrained { Some(self.model.d0) } else { None },
            max_atoms: b.max_atoms,
            max_segments: b.max_segments,
            max_atom_size: b.max_atom_size,
            max_rate: b.max_rate,
        };
        let mut out = vec![ControlPath::empty(horizon)];
        for i in 0..b.n_controls {
            out.push(sgl_core::control::random_control(
                &cfg,
                horizon,
                self.experiments.seed,
                i as u64,
            ));
        }
        Ok(out)
    }

    pub fn scalar_spec(&self) -> Result<(ScalarProcessSpec, Vec<f64>, usize, f64), SglError> {
        let lt = self.experiments.local_time.as_ref().ok_or_else(|| {
            SglError::InvalidArgument("config has no experiments.local_time section".into())
        })?;
        let spec = ScalarProcessSpec {
            x0: lt.x0,
            drift: lt.drift,
            sigma: lt.sigma,
            jumps: lt.jumps.clone(),
            horizon: lt.horizon,
        };
        Ok((
            spec,
            lt.eps.clone(),
            lt.n_paths.unwrap_or(self.experiments.n_paths),
            lt.dt.unwrap_or(self.experiments.dt),
        ))
    }
}

/// Applies one `--set key=value` override to the raw JSON document using
/// a dotted path (e.g. `grid.nx=81`, `schedules.gammas=[0.4,0.2,0.1]`).
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let val: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cur {
                Value::Object(map) => {
                    map.insert(part.to_string(), val);
                    return Ok(());
                }
                _ => return Err(format!("cannot set `{path}`: parent is not an object")),
            }
        }
        cur = match cur {
            Value::Object(map) => map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(format!("cannot descend into `{part}` in `{path}`")),
        };
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_and_typed_values() {
        let mut doc: Value = serde_json::json!({"grid": {"nx": 41}});
        apply_override(&mut doc, "grid.nx=81").unwrap();
        apply_override(&mut doc, "schedules.gammas=[0.4,0.2]").unwrap();
        apply_override(&mut doc, "model.kind=brownian").unwrap();
        assert_eq!(doc["grid"]["nx"], 81);
        assert_eq!(doc["schedules"]["gammas"][1], 0.2);
        assert_eq!(doc["model"]["kind"], "brownian");
        assert!(apply_override(&mut doc, "nonsense").is_err());
    }
}
