//! `sgl` — experiment runner for the stopper-vs-singular-controller
//! laboratory. One JSON config drives every subcommand; all randomness
//! derives from the master seed, so identical configs produce identical
//! CSV bytes.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use sgl_core::limits::{continuation_solve, gamma_sweep};
use sgl_core::model::{validate_model, validate_payoffs, ValidationReport};
use sgl_core::payoff::crosscheck_optimality;
use sgl_core::pde::{
    export_solution_csv, extract_regions, solve_penalised, vi_residual, write_grid_file,
    PdeSolution,
};
use sgl_core::stability::{
    local_time_lemma_check, moment_bound_check, stability_experiment, uncontrolled_comparison,
    StopSpec,
};
use sgl_core::SglError;

use config::{apply_override, Config};

#[derive(Parser)]
#[command(name = "sgl", version, about = "stopper vs singular-controller game laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Path to the JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set grid.nx=81
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy, PartialEq)]
enum Cmd {
    /// Check the model and payoff regularity clauses.
    Validate,
    /// One penalised solve at the final schedule stage.
    Solve,
    /// Solve along the full eps/delta schedule with Cauchy logging.
    Continuation,
    /// Approximation-rate sweep over the gamma schedule.
    GammaSweep,
    /// Stopping / gradient-saturation region maps.
    Regions,
    /// Monte Carlo optimality cross-check of the solved value.
    Crosscheck,
    /// Projection stability, uncontrolled comparison, and moment bounds.
    Stability,
    /// Local-time domination bound for scalar test processes.
    LocalTime,
    /// Everything above, in order.
    All,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Validate => "validate",
            Cmd::Solve => "solve",
            Cmd::Continuation => "continuation",
            Cmd::GammaSweep => "gamma-sweep",
            Cmd::Regions => "regions",
            Cmd::Crosscheck => "crosscheck",
            Cmd::Stability => "stability",
            Cmd::LocalTime => "local-time",
            Cmd::All => "all",
        }
    }
}

/// Collects output artifacts and the pass/fail state of every assertion.
struct Collector {
    out_dir: PathBuf,
    outputs: Vec<String>,
    failures: Vec<String>,
}

impl Collector {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), SglError> {
        fs::write(self.path(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn check(&mut self, what: &str, pass: bool) {
        println!("[{}] {}", if pass { "PASS" } else { "FAIL" }, what);
        if !pass {
            self.failures.push(what.to_string());
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    tool_version: &'static str,
    subcommand: String,
    config_sha256: String,
    master_seed: u64,
    parameters: Value,
    outputs: Vec<String>,
    wall_clock_secs: f64,
    pass: bool,
    failures: Vec<String>,
}

fn exit_code_for(err: &SglError) -> u8 {
    match err {
        SglError::InvalidArgument(_)
        | SglError::ExprParse(_)
        | SglError::Io(_)
        | SglError::BadGridFile(_)
        | SglError::FitTooFewPoints(_) => 2,
        SglError::NonFiniteCoefficient { .. }
        | SglError::SimulationBlowup { .. }
        | SglError::SweepDiverged { .. }
        | SglError::FitNonPositive { .. }
        | SglError::StopOffGrid(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("SGL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required");
            return ExitCode::from(2);
        }
    };
    let raw = match fs::read_to_string(&config_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return ExitCode::from(2);
        }
    };
    let mut doc: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: config is not valid JSON: {e}");
            return ExitCode::from(2);
        }
    };
    for ov in &cli.overrides {
        if let Err(e) = apply_override(&mut doc, ov) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let resolved = doc.clone();
    let cfg = match Config::from_value(doc) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config schema: {e}");
            return ExitCode::from(2);
        }
    };

    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return ExitCode::from(2);
    }
    let mut col = Collector {
        out_dir,
        outputs: Vec::new(),
        failures: Vec::new(),
    };

    let start = Instant::now();
    let result = run(cli.cmd, &cfg, &mut col);

    // the manifest is written even on failure so diagnostics are kept
    let hash = format!("{:x}", Sha256::digest(serde_json::to_vec(&resolved).unwrap()));
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        subcommand: cli.cmd.name().to_string(),
        config_sha256: hash,
        master_seed: cfg.experiments.seed,
        parameters: resolved,
        outputs: col.outputs.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        pass: col.failures.is_empty() && result.is_ok(),
        failures: col.failures.clone(),
    };
    let mpath = col.path("manifest.json");
    if let Err(e) = fs::write(&mpath, serde_json::to_vec_pretty(&manifest).unwrap()) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::from(2);
    }

    match result {
        Err(err) => {
            eprintln!("error: {err}");
            let _ = fs::write(col.path("error.txt"), format!("{err}\n"));
            ExitCode::from(exit_code_for(&err))
        }
        Ok(()) if !col.failures.is_empty() => {
            eprintln!("{} assertion(s) failed", col.failures.len());
            ExitCode::from(1)
        }
        Ok(()) => ExitCode::SUCCESS,
    }
}

fn run(cmd: Cmd, cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    match cmd {
        Cmd::Validate => cmd_validate(cfg, col),
        Cmd::Solve => cmd_solve(cfg, col).map(|_| ()),
        Cmd::Continuation => cmd_continuation(cfg, col),
        Cmd::GammaSweep => cmd_gamma_sweep(cfg, col),
        Cmd::Regions => cmd_regions(cfg, col),
        Cmd::Crosscheck => cmd_crosscheck(cfg, col),
        Cmd::Stability => cmd_stability(cfg, col),
        Cmd::LocalTime => cmd_local_time(cfg, col),
        Cmd::All => {
            cmd_validate(cfg, col)?;
            cmd_solve(cfg, col)?;
            cmd_continuation(cfg, col)?;
            if cfg.schedules.gammas.len() >= 3 {
                cmd_gamma_sweep(cfg, col)?;
            }
            cmd_regions(cfg, col)?;
            if cfg.experiments.battery.is_some() {
                cmd_crosscheck(cfg, col)?;
            }
            if cfg.experiments.stability.is_some() {
                cmd_stability(cfg, col)?;
            }
            if cfg.experiments.local_time.is_some() {
                cmd_local_time(cfg, col)?;
            }
            Ok(())
        }
    }
}

fn report_csv(rep: &ValidationReport) -> String {
    let mut s = String::from("clause,pass,worst,threshold,note\n");
    for c in &rep.clauses {
        s.push_str(&format!(
            "{},{},{:.12e},{:.12e},{}\n",
            c.name, c.pass, c.worst, c.threshold, c.note
        ));
    }
    if let Some(e) = rep.min_eigenvalue {
        s.push_str(&format!("min_eigenvalue,true,{e:.12e},0,informational\n"));
    }
    s
}

fn cmd_validate(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let model = cfg.build_model()?;
    let payoffs = cfg.build_payoffs()?;
    let region = cfg.region()?;
    let seed = cfg.experiments.seed;
    let mrep = validate_model(&model, &region, 200, seed)?;
    let prep = validate_payoffs(&payoffs, &model, &region, 200, seed)?;
    col.write("validate_model.csv", report_csv(&mrep).as_bytes())?;
    col.write("validate_payoffs.csv", report_csv(&prep).as_bytes())?;
    col.check("model regularity clauses", mrep.all_pass());
    col.check("payoff regularity clauses", prep.all_pass());
    Ok(())
}

fn solve_final(cfg: &Config) -> Result<PdeSolution, SglError> {
    let model = cfg.build_model()?;
    let payoffs = cfg.build_payoffs()?;
    let grid = cfg.build_grid()?;
    let stage = cfg.final_stage();
    let opts = cfg.solver_options();
    if cfg.schedules.stages.len() > 1 {
        Ok(continuation_solve(&model, &payoffs, &grid, cfg.schedules.gamma, &cfg.schedules.stages, &opts)?.solution)
    } else {
        solve_penalised(&model, &payoffs, &grid, stage.eps, stage.delta, cfg.schedules.gamma, &opts, None)
    }
}

fn cmd_solve(cfg: &Config, col: &mut Collector) -> Result<PdeSolution, SglError> {
    let model = cfg.build_model()?;
    let payoffs = cfg.build_payoffs()?;
    let grid = cfg.build_grid()?;
    let stage = cfg.final_stage();
    let sol = solve_penalised(
        &model,
        &payoffs,
        &grid,
        stage.eps,
        stage.delta,
        cfg.schedules.gamma,
        &cfg.solver_options(),
        None,
    )?;
    write_grid_file(&sol, &col.path("solution.grid"))?;
    col.outputs.push("solution.grid".to_string());
    let mut csv = Vec::new();
    export_solution_csv(&sol, 1.max(grid.nt / 8), &mut csv)?;
    col.write("solution.csv", &csv)?;
    emit_value_slice(&sol, col)?;
    let vi = vi_residual(&sol, 0.1)?;
    let summary = serde_json::json!({
        "max_abs": sol.max_abs(),
        "sweeps_total": sol.sweeps_total,
        "worst_residual": sol.worst_residual,
        "tol_obstacle": sol.tol_obstacle,
        "tol_grad": sol.tol_grad,
        "vi_min_form": vi.min_form,
        "vi_max_form": vi.max_form,
    });
    col.write("solve_summary.json", serde_json::to_vec_pretty(&summary).unwrap().as_slice())?;
    println!(
        "solved: max |u| = {:.6e}, sweeps = {}, vi residual = {:.3e}",
        sol.max_abs(),
        sol.sweeps_total,
        vi.min_form.abs().max(vi.max_form.abs())
    );
    Ok(sol)
}

/// Gnuplot table of u(0, .): `x u` in 1D, `x1 x2 u` in 2D.
fn emit_value_slice(sol: &PdeSolution, col: &mut Collector) -> Result<(), SglError> {
    let grid = &sol.grid;
    let mut s = String::new();
    let u0 = sol.slice(0);
    let mut coords = vec![0.0; grid.d];
    if grid.d == 1 {
        s.push_str("# x u\n");
        for (idx, u) in u0.iter().enumerate() {
            grid.node_coords(idx, &mut coords);
            s.push_str(&format!("{:.12e} {:.12e}\n", coords[0], u));
        }
    } else {
        s.push_str("# x1 x2 u\n");
        for (idx, u) in u0.iter().enumerate() {
            grid.node_coords(idx, &mut coords);
            if idx > 0 && idx % grid.nx == 0 {
                s.push('\n'); // gnuplot grid separator
            }
            s.push_str(&format!("{:.12e} {:.12e} {:.12e}\n", coords[0], coords[1], u));
        }
    }
    col.write("value_t0.dat", s.as_bytes())
}

fn cmd_continuation(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let model = cfg.build_model()?;
    let payoffs = cfg.build_payoffs()?;
    let grid = cfg.build_grid()?;
    if cfg.schedules.stages.is_empty() {
        return Err(SglError::InvalidArgument(
            "continuation needs schedules.stages".into(),
        ));
    }
    let res = continuation_solve(
        &model,
        &payoffs,
        &grid,
        cfg.schedules.gamma,
        &cfg.schedules.stages,
        &cfg.solver_options(),
    )?;
    let mut s = String::from("stage,eps,delta,m,cauchy\n");
    for (i, st) in cfg.schedules.stages.iter().enumerate() {
        let c = if i == 0 { f64::NAN } else { res.cauchy[i - 1] };
        s.push_str(&format!("{},{:.6e},{:.6e},{:.6e},{:.12e}\n", i, st.eps, st.delta, st.m, c));
    }
    col.write("continuation.csv", s.as_bytes())?;
    write_grid_file(&res.solution, &col.path("continuation.grid"))?;
    col.outputs.push("continuation.grid".to_string());
    col.check(
        "continuation Cauchy differences nonincreasing",
        !res.non_monotone_warning,
    );
    Ok(())
}

fn cmd_gamma_sweep(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let model = cfg.build_model()?;
    let payoffs = cfg.build_payoffs()?;
    let grid = cfg.build_grid()?;
    if cfg.schedules.stages.is_empty() {
        return Err(SglError::InvalidArgument("gamma-sweep needs schedules.stages".into()));
    }
    let res = gamma_sweep(
        &model,
        &payoffs,
        &grid,
        &cfg.schedules.gammas,
        &cfg.schedules.stages,
        &cfg.solver_options(),
    )?;
    let mut csv = Vec::new();
    res.write_csv(&mut csv)?;
    col.write("gamma_sweep.csv", &csv)?;
    // log-log plot table with the fitted slope in the header
    let mut s = format!("# slope {:.6} intercept {:.6}\n# gamma err\n", res.slope, res.intercept);
    for (g, e) in res.gammas.iter().zip(res.diffs.iter()) {
        s.push_str(&format!("{:.12e} {:.12e}\n", g, e));
    }
    col.write("gamma_sweep.dat", s.as_bytes())?;
    println!("gamma sweep: fitted rate slope = {:.4}", res.slope);
    col.check("gamma sweep fitted slope >= 0.45", res.slope >= 0.45);
    Ok(())
}

fn cmd_regions(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let sol = solve_final(cfg)?;
    let tol = sol.tol_obstacle.max(sol.tol_grad);
    let map = extract_regions(&sol, tol);
    let grid = &sol.grid;
    let mut coords = vec![0.0; grid.d];
    let header = if grid.d == 1 { "t,x1,label\n" } else { "t,x1,x2,label\n" };
    let mut csv = String::from(header);
    let stride = 1.max(grid.nt / 8);
    for k in (0..=grid.nt).step_by(stride) {
        let t = k as f64 * sol.ht();
        for idx in 0..grid.n_nodes() {
            grid.node_coords(idx, &mut coords);
            if grid.d == 1 {
                csv.push_str(&format!("{:.6e},{:.12e},{}\n", t, coords[0], map.label(k, idx)));
            } else {
                csv.push_str(&format!(
                    "{:.6e},{:.12e},{:.12e},{}\n",
                    t, coords[0], coords[1], map.label(k, idx)
                ));
            }
        }
    }
    col.write("regions.csv", csv.as_bytes())?;
    // numeric map at t = 0 for plotting: 0 continue, 1 stop, 2 saturated, 3 both
    let mut s = String::from(if grid.d == 1 { "# x label\n" } else { "# x1 x2 label\n" });
    for idx in 0..grid.n_nodes() {
        grid.node_coords(idx, &mut coords);
        let code = map.stop[idx] as u8 + 2 * map.saturated[idx] as u8;
        if grid.d == 2 && idx > 0 && idx % grid.nx == 0 {
            s.push('\n');
        }
        for c in coords.iter() {
            s.push_str(&format!("{c:.12e} "));
        }
        s.push_str(&format!("{code}\n"));
    }
    col.write("regions_t0.dat", s.as_bytes())?;
    Ok(())
}

fn cmd_crosscheck(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let sol = solve_final(cfg)?;
    let battery = cfg.battery_controls(cfg.payoffs.horizon - cfg.experiments.t_start)?;
    let rep = crosscheck_optimality(
        &sol,
        &battery,
        cfg.experiments.t_start,
        &cfg.x0(),
        cfg.experiments.tol_contact,
        cfg.experiments.disc_tol,
        cfg.experiments.n_paths,
        cfg.experiments.dt,
        cfg.experiments.seed,
    )?;
    let mut csv = Vec::new();
    rep.write_csv(&mut csv)?;
    col.write("crosscheck.csv", &csv)?;
    col.check(
        &format!("optimality cross-check over {} controls", battery.len()),
        rep.all_pass(),
    );
    Ok(())
}

fn cmd_stability(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let model = cfg.build_model()?;
    let st = cfg.experiments.stability.as_ref().ok_or_else(|| {
        SglError::InvalidArgument("config has no experiments.stability section".into())
    })?;
    let x0 = cfg.x0();
    let n_paths = st.n_paths.unwrap_or(cfg.experiments.n_paths);
    let dt = st.dt.unwrap_or(cfg.experiments.dt);
    let stop = StopSpec::Fixed(st.stop.unwrap_or(st.control.horizon));
    let rep = stability_experiment(
        &model,
        &st.control,
        &x0,
        &st.gammas,
        &stop,
        n_paths,
        dt,
        cfg.experiments.seed,
    )?;
    let mut csv = Vec::new();
    rep.write_csv(&mut csv)?;
    col.write("stability.csv", &csv)?;
    let mut s = String::from("# gamma measured ci bound\n");
    for r in &rep.rows {
        s.push_str(&format!(
            "{:.12e} {:.12e} {:.12e} {:.12e}\n",
            r.gamma, r.measured, r.ci, r.bound
        ));
    }
    col.write("stability.dat", s.as_bytes())?;
    col.check("projection stability bound", rep.all_pass());
    col.check("stability ratio spread < 25%", rep.ratio_spread() < 0.25);

    if st.control.is_constrained(model.d0) {
        let row = uncontrolled_comparison(&model, &st.control, &x0, &stop, n_paths, dt, cfg.experiments.seed)?;
        col.write(
            "uncontrolled_comparison.csv",
            format!(
                "measured,ci,bound,pass\n{:.12e},{:.12e},{:.12e},{}\n",
                row.measured, row.ci, row.bound, row.pass
            )
            .as_bytes(),
        )?;
        col.check("uncontrolled comparison bound", row.pass);
    }

    if let Some(b) = &cfg.experiments.battery {
        let battery = cfg.battery_controls(st.control.horizon)?;
        let admissible: Vec<_> = battery
            .into_iter()
            .filter(|c| c.check_opt_class(&x0, b.k2))
            .collect();
        if !admissible.is_empty() {
            let rep = moment_bound_check(&model, &admissible, &x0, b.k2, &stop, n_paths, dt, cfg.experiments.seed)?;
            let mut s = String::from("control_id,measured,ci,bound,pass\n");
            for r in &rep.rows {
                s.push_str(&format!(
                    "{},{:.12e},{:.12e},{:.12e},{}\n",
                    r.control_id, r.measured, r.ci, r.bound, r.pass
                ));
            }
            col.write("moment_bound.csv", s.as_bytes())?;
            col.check("admissible-class moment bound", rep.all_pass());
        }
    }
    Ok(())
}

fn cmd_local_time(cfg: &Config, col: &mut Collector) -> Result<(), SglError> {
    let (spec, eps, n_paths, dt) = cfg.scalar_spec()?;
    let rep = local_time_lemma_check(&spec, &eps, n_paths, dt, cfg.experiments.seed)?;
    let mut csv = Vec::new();
    rep.write_csv(&mut csv)?;
    col.write("local_time.csv", &csv)?;
    col.check("local-time domination bound", rep.all_pass());
    Ok(())
}
