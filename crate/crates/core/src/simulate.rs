//! Euler–Maruyama simulation of the controlled diffusion, common-noise
//! coupled pairs, and occupation-time estimators for the local time of a
//! scalar semimartingale at zero.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::control::{gamma_weight, project_control, ControlPath};
use crate::error::{Result, SglError};
use crate::model::SdeModel;

/// One simulated trajectory on a uniform grid. At grid times where a
/// control atom acts, the pre state is the left limit and the post state
/// includes the instantaneous push; elsewhere they coincide.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub d: usize,
    /// Uniform grid `0 = t_0 < ... < t_M = horizon`.
    pub times: Vec<f64>,
    /// Flattened `(M+1) x d`, row i = state just before time `t_i`.
    pub states_pre: Vec<f64>,
    /// Flattened `(M+1) x d`, row i = state at time `t_i` (atoms applied).
    pub states_post: Vec<f64>,
    pub noise_seed: u64,
}

impl SamplePath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn pre(&self, i: usize) -> &[f64] {
        &self.states_pre[i * self.d..(i + 1) * self.d]
    }

    pub fn post(&self, i: usize) -> &[f64] {
        &self.states_post[i * self.d..(i + 1) * self.d]
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Writes `step,time,x1.._pre,x1.._post` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "step,time")?;
        for i in 1..=self.d {
            write!(w, ",x{i}_pre")?;
        }
        for i in 1..=self.d {
            write!(w, ",x{i}_post")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{},{:.12e}", i, self.times[i])?;
            for v in self.pre(i) {
                write!(w, ",{v:.17e}")?;
            }
            for v in self.post(i) {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Number of Euler steps for a requested step size.
fn n_steps(horizon: f64, dt: f64) -> usize {
    ((horizon / dt - 1e-9).ceil() as usize).max(1)
}

/// Control atoms snapped to the grid: per grid index, the summed
/// gamma-weighted instantaneous increment.
fn snapped_atoms(control: &ControlPath, d: usize, d0: usize, gamma: f64, m: usize, ht: f64) -> Vec<Vec<f64>> {
    let mut incr = vec![Vec::new(); m + 1];
    for a in &control.atoms {
        let idx = ((a.time / ht).round() as usize).min(m);
        if incr[idx].is_empty() {
            incr[idx] = vec![0.0; d];
        }
        let w = gamma_weight(&a.direction, d0, gamma);
        for (acc, wi) in incr[idx].iter_mut().zip(w.iter()) {
            *acc += wi * a.size;
        }
    }
    incr
}

/// Gamma-weighted absolutely continuous control increment over
/// `[t, t + ht)`.
fn segment_increment(control: &ControlPath, d: usize, d0: usize, gamma: f64, t: f64, ht: f64, out: &mut [f64]) {
    out.fill(0.0);
    for s in &control.segments {
        let overlap = (t + ht).min(s.end) - t.max(s.start);
        if overlap > 0.0 {
            let w = gamma_weight(&s.direction, d0, gamma);
            for i in 0..d {
                out[i] += w[i] * s.rate * overlap;
            }
        }
    }
}

fn check_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SglError::SimulationBlowup { step });
    }
    Ok(())
}

/// Euler–Maruyama path of the controlled SDE with gamma-weighted control
/// directions. Atom times are snapped to the nearest grid point; at a
/// shared grid time the diffusion increment is applied first and the atom
/// acts on the resulting left limit.
pub fn euler_controlled(
    model: &SdeModel,
    control: &ControlPath,
    x: &[f64],
    gamma: f64,
    dt: f64,
    seed: u64,
) -> Result<SamplePath> {
    let (a, _) = coupled_core(model, (control, gamma), None, x, dt, seed)?;
    Ok(a)
}

/// Simulates the gamma-weighted path and the path driven by the projected
/// (constrained) control under the identical Brownian increments.
pub fn coupled_pair(
    model: &SdeModel,
    control: &ControlPath,
    x: &[f64],
    gamma: f64,
    dt: f64,
    seed: u64,
) -> Result<(SamplePath, SamplePath)> {
    let projected = project_control(control, model.d0);
    let (a, b) = coupled_core(model, (control, gamma), Some((&projected, 1.0)), x, dt, seed)?;
    Ok((a, b.expect("second path requested")))
}

/// Two arbitrary controls (with their own gamma weights) driven by the
/// identical Brownian increments.
pub fn common_noise_pair(
    model: &SdeModel,
    control_a: &ControlPath,
    gamma_a: f64,
    control_b: &ControlPath,
    gamma_b: f64,
    x: &[f64],
    dt: f64,
    seed: u64,
) -> Result<(SamplePath, SamplePath)> {
    let (a, b) = coupled_core(model, (control_a, gamma_a), Some((control_b, gamma_b)), x, dt, seed)?;
    Ok((a, b.expect("second path requested")))
}

/// Shared stepping loop: one Brownian increment stream drives up to two
/// (control, gamma) lanes step-synchronously.
fn coupled_core(
    model: &SdeModel,
    lane_a: (&ControlPath, f64),
    lane_b: Option<(&ControlPath, f64)>,
    x: &[f64],
    dt: f64,
    seed: u64,
) -> Result<(SamplePath, Option<SamplePath>)> {
    let (control_a, gamma) = lane_a;
    if x.len() != model.d {
        return Err(SglError::InvalidArgument(format!(
            "initial state has dimension {}, model is {}-dimensional",
            x.len(),
            model.d
        )));
    }
    if dt <= 0.0 {
        return Err(SglError::InvalidArgument("dt must be positive".into()));
    }
    let d = model.d;
    let dp = model.dprime;
    let horizon = control_a.horizon;
    let m = n_steps(horizon, dt);
    let ht = horizon / m as f64;
    let times: Vec<f64> = (0..=m).map(|i| i as f64 * ht).collect();

    struct Lane<'c> {
        control: &'c ControlPath,
        gamma: f64,
        atoms: Vec<Vec<f64>>,
        pre: Vec<f64>,
        post: Vec<f64>,
        state: Vec<f64>,
    }
    fn new_lane<'c>(
        control: &'c ControlPath,
        g: f64,
        d: usize,
        d0: usize,
        m: usize,
        ht: f64,
        x: &[f64],
    ) -> Lane<'c> {
        Lane {
            control,
            gamma: g,
            atoms: snapped_atoms(control, d, d0, g, m, ht),
            pre: Vec::with_capacity((m + 1) * d),
            post: Vec::with_capacity((m + 1) * d),
            state: x.to_vec(),
        }
    }
    let mut lanes: Vec<Lane> = vec![new_lane(control_a, gamma, d, model.d0, m, ht, x)];
    if let Some((cb, gb)) = lane_b {
        if (cb.horizon - horizon).abs() > 1e-12 {
            return Err(SglError::InvalidArgument(
                "coupled controls must share the horizon".into(),
            ));
        }
        lanes.push(new_lane(cb, gb, d, model.d0, m, ht, x));
    }

    // time 0: X_{0-} = x, then the atom at 0
    for lane in lanes.iter_mut() {
        lane.pre.extend_from_slice(x);
        if !lane.atoms[0].is_empty() {
            for (s, inc) in lane.state.iter_mut().zip(lane.atoms[0].iter()) {
                *s += inc;
            }
        }
        lane.post.extend_from_slice(&lane.state);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dw = vec![0.0; dp];
    let mut b = vec![0.0; d];
    let mut kappa = vec![0.0; d * dp];
    let mut seg = vec![0.0; d];
    let sqdt = ht.sqrt();

    for step in 0..m {
        for z in dw.iter_mut() {
            *z = rng.sample::<f64, _>(StandardNormal) * sqdt;
        }
        for lane in lanes.iter_mut() {
            (model.drift)(&lane.state, &mut b);
            (model.diffusion)(&lane.state, &mut kappa);
            segment_increment(lane.control, d, model.d0, lane.gamma, times[step], ht, &mut seg);
            for i in 0..d {
                let mut noise = 0.0;
                for c in 0..dp {
                    noise += kappa[i * dp + c] * dw[c];
                }
                lane.state[i] += b[i] * ht + noise + seg[i];
            }
            check_state(&lane.state, step + 1)?;
            lane.pre.extend_from_slice(&lane.state);
            let atom = &lane.atoms[step + 1];
            if !atom.is_empty() {
                for (s, inc) in lane.state.iter_mut().zip(atom.iter()) {
                    *s += inc;
                }
                check_state(&lane.state, step + 1)?;
            }
            lane.post.extend_from_slice(&lane.state);
        }
    }

    let mut out = lanes.into_iter().map(|lane| SamplePath {
        d,
        times: times.clone(),
        states_pre: lane.pre,
        states_post: lane.post,
        noise_seed: seed,
    });
    let a = out.next().unwrap();
    Ok((a, out.next()))
}

/// Occupation-time estimate of the local time at zero:
/// `(1/2eps) * sum over steps of 1{|J| < eps} * d<J>`.
/// `quad_var[i]` is the quadratic-variation increment over step `i`.
pub fn local_time_zero(j: &[f64], eps: f64, quad_var: &[f64]) -> f64 {
    debug_assert!(eps > 0.0);
    debug_assert_eq!(quad_var.len() + 1, j.len());
    let mut acc = 0.0;
    for (ji, qv) in j.iter().zip(quad_var.iter()) {
        if ji.abs() < eps {
            acc += qv;
        }
    }
    acc / (2.0 * eps)
}

/// Pathwise right-hand side of the local-time domination bound:
/// `4 eps - 2 int (1{J in [0,eps)} + 1{J >= eps} e^{1 - J/eps}) dJ^c
///  + (1/eps) int 1{J > eps} e^{1 - J/eps} d<J>^c + 2 sum |dJ|`.
/// `j[i]` is the value entering step `i`, `dj_cont[i]` the continuous
/// increment and `quad_var[i]` the quadratic-variation increment over
/// step `i`; `jumps` lists the jump sizes of the path.
pub fn dgi_rhs(j: &[f64], dj_cont: &[f64], quad_var: &[f64], jumps: &[f64], eps: f64) -> f64 {
    debug_assert!(eps > 0.0 && eps < 1.0);
    let mut drift_term = 0.0;
    let mut qv_term = 0.0;
    for i in 0..dj_cont.len() {
        let ji = j[i];
        if (0.0..eps).contains(&ji) {
            drift_term += dj_cont[i];
        } else if ji >= eps {
            let w = (1.0 - ji / eps).exp();
            drift_term += w * dj_cont[i];
            qv_term += w * quad_var[i];
        }
    }
    let jump_term: f64 = jumps.iter().map(|v| v.abs()).sum();
    4.0 * eps - 2.0 * drift_term + qv_term / eps + 2.0 * jump_term
}

/// A scalar test semimartingale: constant drift and diffusion plus
/// deterministic jumps, for exercising the local-time bound.
#[derive(Debug, Clone)]
pub struct ScalarProcessSpec {
    pub x0: f64,
    pub drift: f64,
    pub sigma: f64,
    /// (time, jump size) pairs; times are snapped to the grid.
    pub jumps: Vec<(f64, f64)>,
    pub horizon: f64,
}

/// Per-path data needed by [`local_time_zero`] and [`dgi_rhs`].
#[derive(Debug, Clone)]
pub struct ScalarPathData {
    /// Value entering each step (length = steps + 1, includes terminal).
    pub j: Vec<f64>,
    pub dj_cont: Vec<f64>,
    pub quad_var: Vec<f64>,
    pub jumps: Vec<f64>,
}

pub fn simulate_scalar(spec: &ScalarProcessSpec, dt: f64, seed: u64) -> ScalarPathData {
    let m = n_steps(spec.horizon, dt);
    let ht = spec.horizon / m as f64;
    let mut jump_at = vec![0.0; m + 1];
    let mut jumps = Vec::with_capacity(spec.jumps.len());
    for &(t, s) in &spec.jumps {
        let idx = ((t / ht).round() as usize).min(m);
        jump_at[idx] += s;
        jumps.push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqdt = ht.sqrt();
    let qv_step = spec.sigma * spec.sigma * ht;
    let mut j = Vec::with_capacity(m + 1);
    let mut dj_cont = Vec::with_capacity(m);
    let mut quad_var = Vec::with_capacity(m);
    let mut x = spec.x0 + jump_at[0];
    j.push(x);
    for step in 0..m {
        let dw: f64 = rng.sample::<f64, _>(StandardNormal);
        let dc = spec.drift * ht + spec.sigma * sqdt * dw;
        x += dc + jump_at[step + 1];
        j.push(x);
        dj_cont.push(dc);
        quad_var.push(qv_step);
    }
    ScalarPathData {
        j,
        dj_cont,
        quad_var,
        jumps,
    }
}
