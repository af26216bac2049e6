//! Augmented-Lagrangian solver with a bound-projected L-BFGS inner loop.
//!
//! The solver is deterministic given its inputs and works on a generic
//! [`Program`] so the same machinery handles analytic toy problems and
//! the shooting transcription. Variables are scaled internally to the
//! unit box; equality-constraint Jacobians come from central differences
//! with per-entry steps, evaluated at a loose integration tolerance
//! during the search and re-certified at 1e-12 before any claim of
//! optimality.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::transcribe::{self, DecisionVector, ProblemSpec};

/// A smooth nonlinear program over a finite box, with equality
/// constraints (possibly expensive and fallible) and cheap analytic
/// inequality constraints `g(x) <= 0`.
pub trait Program: Sync {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize {
        0
    }
    fn objective(&self, x: &[f64]) -> f64;
    fn objective_grad(&self, x: &[f64], g: &mut [f64]);
    /// Equality residuals; `tight` requests certification accuracy.
    fn eq_constraints(&self, x: &[f64], c: &mut [f64], tight: bool) -> Result<(), String>;
    fn ineq_constraints(&self, _x: &[f64], _g: &mut [f64]) {}
    /// Dense inequality Jacobian rows (n_ineq x dim).
    fn ineq_jacobian(&self, _x: &[f64], _jac: &mut [Vec<f64>]) {}
    /// Central-difference step for the equality Jacobian, in x units.
    fn fd_step(&self, _idx: usize) -> f64 {
        1e-6
    }
    /// Absolute noise of one equality-residual component (zero for
    /// analytic programs, the integration tolerance otherwise).
    fn eval_noise(&self, _tight: bool) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Wall-clock cap including all finite-difference propagations.
    pub max_wall_time_s: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Feasibility tolerance on max |c| and inequality violation.
    pub tol_feas: f64,
    /// Optimality tolerance on the projected-gradient KKT residual.
    pub tol_opt: f64,
    pub penalty_initial: f64,
    pub penalty_factor: f64,
    pub penalty_max: f64,
    /// Integration tolerance for search-phase evaluations.
    pub integ_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_wall_time_s: 240.0,
            max_outer_iterations: 40,
            max_inner_iterations: 300,
            tol_feas: 1e-6,
            tol_opt: 1e-5,
            penalty_initial: 1000.0,
            penalty_factor: 10.0,
            penalty_max: 1e6,
            integ_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Failed,
    Feasible,
    Optimal,
}

/// One outer-iteration record for the feasibility-pressure diagnostics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OuterTrace {
    pub outer: usize,
    pub penalty: f64,
    pub max_violation: f64,
    pub kkt: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub x_final: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub feas_residual: f64,
    /// Total inner iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time_s: f64,
    pub n_evals: usize,
    pub trace: Vec<OuterTrace>,
    pub failure: Option<String>,
}

/// Status from residuals alone; the three statuses partition outcomes.
pub fn classify(feas_residual: f64, kkt_residual: f64, cfg: &SolverConfig) -> SolveStatus {
    if !(feas_residual.is_finite() && kkt_residual.is_finite()) {
        return SolveStatus::Failed;
    }
    if feas_residual <= cfg.tol_feas {
        if kkt_residual <= cfg.tol_opt {
            SolveStatus::Optimal
        } else {
            SolveStatus::Feasible
        }
    } else {
        SolveStatus::Failed
    }
}

struct Workspace<'a, P: Program> {
    prog: &'a P,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// hi - lo, the x-per-z scale of each coordinate.
    span: Vec<f64>,
    n_eq: usize,
    n_ineq: usize,
    evals: std::cell::Cell<usize>,
}

impl<'a, P: Program> Workspace<'a, P> {
    fn new(prog: &'a P) -> Self {
        let (lo, hi) = prog.bounds();
        let span = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l).max(1e-12))
            .collect();
        Workspace {
            n_eq: prog.n_eq(),
            n_ineq: prog.n_ineq(),
            prog,
            lo,
            hi,
            span,
            evals: std::cell::Cell::new(0),
        }
    }

    fn to_x(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.lo)
            .zip(&self.span)
            .map(|((z, l), s)| l + z * s)
            .collect()
    }

    fn project(&self, z: &mut [f64]) {
        for v in z.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn constraints(
        &self,
        z: &[f64],
        c: &mut [f64],
        g: &mut [f64],
        tight: bool,
    ) -> Result<(), String> {
        let x = self.to_x(z);
        self.evals.set(self.evals.get() + 1);
        self.prog.eq_constraints(&x, c, tight)?;
        if self.n_ineq > 0 {
            self.prog.ineq_constraints(&x, g);
        }
        Ok(())
    }

    fn objective(&self, z: &[f64]) -> f64 {
        self.prog.objective(&self.to_x(z))
    }

    /// Objective gradient in z coordinates.
    fn objective_grad_z(&self, z: &[f64], out: &mut [f64]) {
        let x = self.to_x(z);
        let mut gx = vec![0.0; x.len()];
        self.prog.objective_grad(&x, &mut gx);
        for i in 0..x.len() {
            out[i] = gx[i] * self.span[i];
        }
    }

    /// Central-difference equality Jacobian in z coordinates
    /// (n_eq x dim), with per-entry steps taken in x units.
    fn eq_jacobian_z(
        &self,
        z: &[f64],
        tight: bool,
        step_scale: f64,
    ) -> Result<Vec<Vec<f64>>, String> {
        let dim = z.len();
        let mut jac = vec![vec![0.0; dim]; self.n_eq];
        let mut c_hi = vec![0.0; self.n_eq];
        let mut c_lo = vec![0.0; self.n_eq];
        let mut g_scratch = vec![0.0; self.n_ineq];
        let mut zt = z.to_vec();
        for col in 0..dim {
            let h_z = (self.prog.fd_step(col) * step_scale / self.span[col]).max(1e-12);
            let z0 = zt[col];
            // Stencil clipped into the box: central in the interior,
            // one-sided at an active bound.
            let zp = (z0 + h_z).min(1.0);
            let zm = (z0 - h_z).max(0.0);
            if zp - zm < 0.1 * h_z {
                continue;
            }
            zt[col] = zp;
            self.constraints(&zt, &mut c_hi, &mut g_scratch, tight)?;
            zt[col] = zm;
            self.constraints(&zt, &mut c_lo, &mut g_scratch, tight)?;
            zt[col] = z0;
            for row in 0..self.n_eq {
                jac[row][col] = (c_hi[row] - c_lo[row]) / (zp - zm);
            }
        }
        Ok(jac)
    }

    /// Inequality Jacobian in z coordinates.
    fn ineq_jacobian_z(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let x = self.to_x(z);
        let mut jac = vec![vec![0.0; z.len()]; self.n_ineq];
        self.prog.ineq_jacobian(&x, &mut jac);
        for row in &mut jac {
            for (v, s) in row.iter_mut().zip(&self.span) {
                *v *= s;
            }
        }
        jac
    }
}

fn al_value(f: f64, c: &[f64], g: &[f64], lambda: &[f64], mu: &[f64], rho: f64) -> f64 {
    let mut v = f;
    for (ci, li) in c.iter().zip(lambda) {
        v += li * ci + 0.5 * rho * ci * ci;
    }
    for (gi, mi) in g.iter().zip(mu) {
        let t = (mi + rho * gi).max(0.0);
        v += (t * t - mi * mi) / (2.0 * rho);
    }
    v
}

fn max_violation(c: &[f64], g: &[f64]) -> f64 {
    let ec = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ig = g.iter().fold(0.0f64, |a, v| a.max(v.max(0.0)));
    ec.max(ig)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected-gradient norm on the unit box: ||P(z - grad) - z||_inf.
fn projected_gradient_norm(z: &[f64], grad: &[f64]) -> f64 {
    z.iter()
        .zip(grad)
        .map(|(zi, gi)| ((zi - gi).clamp(0.0, 1.0) - zi).abs())
        .fold(0.0, f64::max)
}

/// Solve a generic program from `x0` (clipped into the box first).
pub fn solve_program<P: Program>(prog: &P, x0: &[f64], cfg: &SolverConfig) -> SolveOutcome {
    let start = Instant::now();
    let ws = Workspace::new(prog);
    let dim = prog.dim();
    let failed = |reason: String, ws: &Workspace<P>| SolveOutcome {
        status: SolveStatus::Failed,
        x_final: x0.to_vec(),
        objective: f64::NAN,
        kkt_residual: f64::INFINITY,
        feas_residual: f64::INFINITY,
        iterations: 0,
        outer_iterations: 0,
        wall_time_s: start.elapsed().as_secs_f64(),
        n_evals: ws.evals.get(),
        trace: Vec::new(),
        failure: Some(reason),
    };
    if x0.len() != dim || x0.iter().any(|v| !v.is_finite()) {
        return failed(format!("bad initial point (dim {} vs {dim})", x0.len()), &ws);
    }

    // Scale into the unit box and clip.
    let mut z: Vec<f64> = x0
        .iter()
        .zip(&ws.lo)
        .zip(&ws.span)
        .map(|((x, l), s)| ((x - l) / s).clamp(0.0, 1.0))
        .collect();

    let n_eq = ws.n_eq;
    let n_ineq = ws.n_ineq;
    let mut c = vec![0.0; n_eq];
    let mut g = vec![0.0; n_ineq];
    if let Err(e) = ws.constraints(&z, &mut c, &mut g, false) {
        return failed(format!("evaluation failed at the initial point: {e}"), &ws);
    }
    if !max_violation(&c, &g).is_finite() {
        return failed("non-finite residual at the initial point".into(), &ws);
    }

    let mut lambda = vec![0.0; n_eq];
    let mut mu = vec![0.0; n_ineq];
    let mut rho = cfg.penalty_initial;
    let mut trace: Vec<OuterTrace> = Vec::new();
    let mut total_inner = 0usize;
    let mut best_violation = max_violation(&c, &g);
    let mut best_z = z.clone();
    let mut failure: Option<String> = None;
    let deadline = cfg.max_wall_time_s;
    let mut outer_done = 0usize;
    let mut certified_kkt = f64::INFINITY;
    let mut stall_outers = 0usize;

    'outer: for outer in 0..cfg.max_outer_iterations {
        outer_done = outer + 1;
        // Inner tolerance tightens as feasibility improves; once the
        // iterate is near-feasible the finite differences switch to the
        // certification-grade integration tolerance so gradient noise
        // no longer bounds the reachable optimality.
        let viol_now = max_violation(&c, &g);
        let inner_tol = (0.1 * viol_now).clamp(0.5 * cfg.tol_opt, 1e-2);
        // Tight integration once noise could mask progress: either the
        // iterate is near-feasible or the penalty amplifies residual
        // noise beyond the decreases the subproblem still offers.
        let tight_inner = viol_now <= 100.0 * cfg.tol_feas || rho >= 1e5;

        // ---- Inner: projected damped Gauss-Newton on the augmented
        // Lagrangian. The Jacobian is in hand every iteration, and the
        // objective is linear, so rho (J^T J + active G^T G) + lm I is
        // the exact curvature of the penalty part.
        let mut inner_iters = 0usize;
        let mut grad = vec![0.0; dim];
        let mut lm = 1e-3;
        let mut radius = 0.25;
        let mut recent_drop = f64::INFINITY;
        let mut tiny_drops = 0usize;
        loop {
            if start.elapsed().as_secs_f64() > deadline {
                break 'outer;
            }
            if inner_iters >= cfg.max_inner_iterations {
                break;
            }
            let jac = match ws.eq_jacobian_z(&z, tight_inner, 100.0) {
                Ok(j) => j,
                Err(e) => {
                    failure = Some(format!("jacobian evaluation failed: {e}"));
                    break;
                }
            };
            if ws.constraints(&z, &mut c, &mut g, tight_inner).is_err() {
                failure = Some("evaluation failed at an iterate".into());
                break;
            }
            let ij = if n_ineq > 0 {
                ws.ineq_jacobian_z(&z)
            } else {
                Vec::new()
            };
            ws.objective_grad_z(&z, &mut grad);
            for row in 0..n_eq {
                let w = lambda[row] + rho * c[row];
                for (gi, ji) in grad.iter_mut().zip(&jac[row]) {
                    *gi += w * ji;
                }
            }
            let mut active = vec![false; n_ineq];
            for row in 0..n_ineq {
                let w = (mu[row] + rho * g[row]).max(0.0);
                if w > 0.0 {
                    active[row] = true;
                    for (gi, ji) in grad.iter_mut().zip(&ij[row]) {
                        *gi += w * ji;
                    }
                }
            }

            let pg_norm = projected_gradient_norm(&z, &grad);
            if pg_norm <= inner_tol {
                break;
            }

            // Gauss-Newton curvature of the penalty terms.
            let mut h = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            for row in &jac {
                for a in 0..dim {
                    let ra = rho * row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..dim {
                        h[(a, b)] += ra * row[b];
                    }
                }
            }
            for (row, is_active) in ij.iter().zip(&active) {
                if !is_active {
                    continue;
                }
                for a in 0..dim {
                    let ra = rho * row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..dim {
                        h[(a, b)] += ra * row[b];
                    }
                }
            }
            for a in 0..dim {
                for b in 0..a {
                    h[(a, b)] = h[(b, a)];
                }
            }
            let h_scale = (0..dim).map(|i| h[(i, i)]).fold(0.0f64, f64::max).max(1.0);

            let f_here = ws.objective(&z);
            let al_here = al_value(f_here, &c, &g, &lambda, &mu, rho);
            // Augmented-Lagrangian value noise from residual noise:
            // lambda^T c and (rho/2)|c|^2 terms propagate it linearly.
            let c_l1: f64 = c.iter().map(|v| v.abs()).sum();
            let lam_l1: f64 = lambda.iter().map(|v| v.abs()).sum();
            let noise_floor =
                ws.prog.eval_noise(tight_inner) * (1.0 + lam_l1 + rho * c_l1);
            let grad_v = nalgebra::DVector::from_column_slice(&grad);

            // Levenberg-Marquardt retry loop with a trust radius on the
            // scaled step: damp until a projected Armijo step is accepted.
            let mut accepted = false;
            for _ in 0..10 {
                let mut h_try = h.clone();
                for i in 0..dim {
                    h_try[(i, i)] += lm * h_scale;
                }
                let mut dir = match h_try.cholesky() {
                    Some(chol) => -chol.solve(&grad_v),
                    None => -&grad_v / h_scale,
                };
                let dn = dir.norm();
                if dn > radius {
                    dir *= radius / dn;
                }
                let mut step_ok = false;
                let mut alpha = 1.0;
                for _ in 0..12 {
                    let mut zt: Vec<f64> =
                        z.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
                    ws.project(&mut zt);
                    let step: Vec<f64> = zt.iter().zip(&z).map(|(a, b)| a - b).collect();
                    if step.iter().all(|v| v.abs() < 1e-16) {
                        break;
                    }
                    let decrease = dot(&grad, &step);
                    let mut ct = vec![0.0; n_eq];
                    let mut gt = vec![0.0; n_ineq];
                    if ws.constraints(&zt, &mut ct, &mut gt, tight_inner).is_ok() {
                        let ft = ws.objective(&zt);
                        let alt = al_value(ft, &ct, &gt, &lambda, &mu, rho);
                        if alt.is_finite()
                            && alt <= al_here + 1e-4 * decrease.min(0.0) + noise_floor
                        {
                            recent_drop = al_here - alt;
                            z = zt;
                            c = ct;
                            g = gt;
                            step_ok = true;
                            break;
                        }
                    }
                    alpha *= 0.25;
                }
                if step_ok {
                    accepted = true;
                    if alpha == 1.0 {
                        lm = (lm / 3.0).max(1e-9);
                        radius = (radius * 1.5).min(2.0);
                    } else {
                        lm = (lm * 2.0).min(1e6);
                        radius = (radius * 0.5).max(1e-4);
                    }
                    break;
                }
                lm = (lm * 10.0).min(1e8);
                radius = (radius * 0.5).max(1e-4);
            }
            inner_iters += 1;
            total_inner += 1;
            if !accepted {
                break;
            }
            // Diminishing returns: repeated sub-noise decreases mean the
            // subproblem is as solved as the noise floor allows.
            if recent_drop < noise_floor.max(1e-14 * (1.0 + al_here.abs())) {
                tiny_drops += 1;
                if tiny_drops >= 5 {
                    break;
                }
            } else {
                tiny_drops = 0;
            }
        }

        // ---- Outer bookkeeping ----
        if ws.constraints(&z, &mut c, &mut g, false).is_err() {
            failure = Some("evaluation failed after inner loop".into());
            break 'outer;
        }
        let mut viol = max_violation(&c, &g);

        // Once the penalty is saturated, never accept a feasibility
        // regression: restore the best iterate instead.
        if rho >= cfg.penalty_max && viol > best_violation {
            z = best_z.clone();
            if ws.constraints(&z, &mut c, &mut g, false).is_err() {
                failure = Some("evaluation failed at restored iterate".into());
                break 'outer;
            }
            viol = max_violation(&c, &g);
        }
        if viol <= best_violation {
            best_violation = viol;
            best_z = z.clone();
        }

        // Certified KKT residual at the current point (tight integration).
        certified_kkt = match certify_kkt(&ws, &z, &lambda, &mu, rho, &mut c, &mut g) {
            Ok(k) => k,
            Err(e) => {
                failure = Some(format!("certification failed: {e}"));
                break 'outer;
            }
        };
        trace.push(OuterTrace {
            outer,
            penalty: rho,
            max_violation: viol,
            kkt: certified_kkt,
            objective: ws.objective(&z),
        });

        if viol <= cfg.tol_feas && certified_kkt <= cfg.tol_opt {
            break 'outer;
        }
        if start.elapsed().as_secs_f64() > deadline {
            break 'outer;
        }
        // Convergence to an infeasible stationary point: saturated
        // penalty with no meaningful feasibility progress.
        if rho >= cfg.penalty_max && viol > cfg.tol_feas {
            if viol > 0.98 * best_violation && viol > 100.0 * cfg.tol_feas {
                stall_outers += 1;
                if stall_outers >= 5 {
                    failure = Some(format!(
                        "stalled at max violation {viol:.3e} with saturated penalty"
                    ));
                    break 'outer;
                }
            } else {
                stall_outers = 0;
            }
        }

        // Multiplier / penalty update. Once the iterate is feasible the
        // multipliers carry the constraints and a softer penalty improves
        // the conditioning of the tangential (cost-reducing) steps.
        if viol <= 0.01 * cfg.tol_feas && rho > 1e4 {
            rho /= 10.0;
        }
        let prev_viol = trace
            .iter()
            .rev()
            .nth(1)
            .map_or(f64::INFINITY, |t| t.max_violation);
        if viol <= cfg.tol_feas || viol <= 0.25 * prev_viol {
            for (li, ci) in lambda.iter_mut().zip(&c) {
                *li = (*li + rho * ci).clamp(-1e10, 1e10);
            }
            for (mi, gi) in mu.iter_mut().zip(&g) {
                *mi = ((*mi + rho * gi).max(0.0)).min(1e10);
            }
        } else {
            rho = (rho * cfg.penalty_factor).min(cfg.penalty_max);
        }
    }

    // Final certification at the tight tolerance.
    let (feas_final, obj_final) = {
        let mut cf = vec![0.0; n_eq];
        let mut gf = vec![0.0; n_ineq];
        match ws.constraints(&z, &mut cf, &mut gf, true) {
            Ok(()) => (max_violation(&cf, &gf), ws.objective(&z)),
            Err(e) => {
                failure.get_or_insert(format!("final evaluation failed: {e}"));
                (f64::INFINITY, f64::NAN)
            }
        }
    };

    let status = classify(feas_final, certified_kkt, cfg);
    SolveOutcome {
        status,
        x_final: ws.to_x(&z),
        objective: obj_final,
        kkt_residual: certified_kkt,
        feas_residual: feas_final,
        iterations: total_inner,
        outer_iterations: outer_done,
        wall_time_s: start.elapsed().as_secs_f64(),
        n_evals: ws.evals.get(),
        trace,
        failure,
    }
}

/// KKT residual with first-order multiplier estimates, from a
/// tight-tolerance Jacobian. The projected-gradient norm is scaled by
/// the multiplier magnitude, the usual relative optimality measure.
fn certify_kkt<P: Program>(
    ws: &Workspace<P>,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
    rho: f64,
    c: &mut [f64],
    g: &mut [f64],
) -> Result<f64, String> {
    ws.constraints(z, c, g, true)?;
    let jac = ws.eq_jacobian_z(z, true, 100.0)?;
    let mut grad = vec![0.0; z.len()];
    ws.objective_grad_z(z, &mut grad);
    for row in 0..ws.n_eq {
        let w = lambda[row] + rho * c[row];
        for (gi, ji) in grad.iter_mut().zip(&jac[row]) {
            *gi += w * ji;
        }
    }
    if ws.n_ineq > 0 {
        let ij = ws.ineq_jacobian_z(z);
        for row in 0..ws.n_ineq {
            let w = (mu[row] + rho * g[row]).max(0.0);
            if w > 0.0 {
                for (gi, ji) in grad.iter_mut().zip(&ij[row]) {
                    *gi += w * ji;
                }
            }
        }
    }
    let mut mult_scale = 1.0f64;
    for (li, ci) in lambda.iter().zip(c.iter()) {
        mult_scale = mult_scale.max((li + rho * ci).abs());
    }
    for (mi, gi) in mu.iter().zip(g.iter()) {
        mult_scale = mult_scale.max((mi + rho * gi).max(0.0));
    }
    Ok(projected_gradient_norm(z, &grad) / mult_scale)
}

/// The shooting transcription as a [`Program`].
pub struct TranscriptionProgram {
    spec: Arc<ProblemSpec>,
    integ_tol: f64,
    certify_tol: f64,
    /// Manifold terminal states keyed by (t1, t2, tight); most
    /// finite-difference stencil points share one entry.
    terminal_cache: std::sync::Mutex<std::collections::HashMap<(u64, u64, bool), [f64; 6]>>,
}

impl TranscriptionProgram {
    pub fn new(spec: Arc<ProblemSpec>, cfg: &SolverConfig) -> Self {
        TranscriptionProgram {
            spec,
            integ_tol: cfg.integ_tol,
            certify_tol: 1e-11,
            terminal_cache: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }

    fn decision(&self, x: &[f64]) -> Result<DecisionVector, String> {
        DecisionVector::from_flat(self.spec.layout(), x).map_err(|e| e.to_string())
    }

    fn terminal_for(&self, d: &DecisionVector, tol: f64, tight: bool) -> Result<[f64; 6], String> {
        let (t1, t2) = match (d.t1, d.t2) {
            (Some(t1), Some(t2)) => (t1, t2),
            // Fixed-terminal variants resolve instantly; skip the cache.
            _ => return self.spec.terminal_state_for(d, tol).map_err(|e| e.to_string()),
        };
        let key = (t1.to_bits(), t2.to_bits(), tight);
        if let Some(hit) = self.terminal_cache.lock().unwrap().get(&key) {
            return Ok(*hit);
        }
        let terminal = self
            .spec
            .terminal_state_for(d, tol)
            .map_err(|e| e.to_string())?;
        let mut cache = self.terminal_cache.lock().unwrap();
        if cache.len() >= 1024 {
            cache.clear();
        }
        cache.insert(key, terminal);
        Ok(terminal)
    }
}

impl Program for TranscriptionProgram {
    fn dim(&self) -> usize {
        self.spec.layout().dim()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.spec.bounds()
    }

    fn n_eq(&self) -> usize {
        7
    }

    fn n_ineq(&self) -> usize {
        self.spec.config.n_segments
    }

    fn objective(&self, x: &[f64]) -> f64 {
        match self.decision(x) {
            Ok(d) => transcribe::hybrid_cost(&d, &self.spec),
            Err(_) => f64::NAN,
        }
    }

    fn objective_grad(&self, x: &[f64], g: &mut [f64]) {
        let _ = x;
        g.copy_from_slice(&transcribe::cost_gradient(&self.spec));
    }

    fn eq_constraints(&self, x: &[f64], c: &mut [f64], tight: bool) -> Result<(), String> {
        let d = self.decision(x)?;
        let tol = if tight { self.certify_tol } else { self.integ_tol };
        let terminal = self.terminal_for(&d, tol, tight)?;
        let (r, _) = transcribe::evaluate_residual_with_terminal(&d, &self.spec, tol, &terminal)
            .map_err(|e| e.to_string())?;
        c.copy_from_slice(&r);
        Ok(())
    }

    /// Smooth squared thrust-norm constraints |u_s|^2 / T_max^2 - 1 <= 0.
    fn ineq_constraints(&self, x: &[f64], g: &mut [f64]) {
        let l = self.spec.layout();
        let t2 = self.spec.config.params.thrust_max_newtons.powi(2);
        for s in 0..l.n_segments {
            let k = l.u(s);
            g[s] = (x[k] * x[k] + x[k + 1] * x[k + 1] + x[k + 2] * x[k + 2]) / t2 - 1.0;
        }
    }

    fn ineq_jacobian(&self, x: &[f64], jac: &mut [Vec<f64>]) {
        let l = self.spec.layout();
        let t2 = self.spec.config.params.thrust_max_newtons.powi(2);
        for s in 0..l.n_segments {
            let k = l.u(s);
            for c in 0..3 {
                jac[s][k + c] = 2.0 * x[k + c] / t2;
            }
        }
    }

    fn fd_step(&self, idx: usize) -> f64 {
        // The solver passes step_scale = 100 on top of these, so its
        // searches use 1e-5 (times/thrust) and 1e-2 kg (mass).
        self.spec.layout().fd_step(idx)
    }

    fn eval_noise(&self, tight: bool) -> f64 {
        if tight {
            self.certify_tol
        } else {
            self.integ_tol
        }
    }
}

/// Solve one transcription instance from `x0`.
pub fn solve(x0: &DecisionVector, spec: &ProblemSpec, cfg: &SolverConfig) -> SolveOutcome {
    let prog = TranscriptionProgram::new(Arc::new(spec.clone()), cfg);
    solve_program(&prog, &x0.to_flat(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x1-1)^2 + (x2-2)^2  s.t.  x1 + x2 = 1.
    struct ToyEquality;

    impl Program for ToyEquality {
        fn dim(&self) -> usize {
            2
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-10.0, -10.0], vec![10.0, 10.0])
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2)
        }
        fn objective_grad(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 2.0 * (x[1] - 2.0);
        }
        fn eq_constraints(&self, x: &[f64], c: &mut [f64], _tight: bool) -> Result<(), String> {
            c[0] = x[0] + x[1] - 1.0;
            Ok(())
        }
    }

    /// min x  s.t.  x >= 2 (pure bound activity).
    struct ToyBound;

    impl Program for ToyBound {
        fn dim(&self) -> usize {
            1
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![2.0], vec![10.0])
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0]
        }
        fn objective_grad(&self, _x: &[f64], g: &mut [f64]) {
            g[0] = 1.0;
        }
        fn eq_constraints(&self, _x: &[f64], _c: &mut [f64], _tight: bool) -> Result<(), String> {
            Ok(())
        }
    }

    /// min -x1 - x2 s.t. x1^2 + x2^2 <= 1 (active smooth inequality).
    struct ToyInequality;

    impl Program for ToyInequality {
        fn dim(&self) -> usize {
            2
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-2.0, -2.0], vec![2.0, 2.0])
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            -x[0] - x[1]
        }
        fn objective_grad(&self, _x: &[f64], g: &mut [f64]) {
            g[0] = -1.0;
            g[1] = -1.0;
        }
        fn eq_constraints(&self, _x: &[f64], _c: &mut [f64], _tight: bool) -> Result<(), String> {
            Ok(())
        }
        fn ineq_constraints(&self, x: &[f64], g: &mut [f64]) {
            g[0] = x[0] * x[0] + x[1] * x[1] - 1.0;
        }
        fn ineq_jacobian(&self, x: &[f64], jac: &mut [Vec<f64>]) {
            jac[0][0] = 2.0 * x[0];
            jac[0][1] = 2.0 * x[1];
        }
    }

    fn cfg() -> SolverConfig {
        SolverConfig {
            max_wall_time_s: 30.0,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn toy_equality_reaches_analytic_optimum() {
        let out = solve_program(&ToyEquality, &[0.0, 0.0], &cfg());
        assert_eq!(out.status, SolveStatus::Optimal, "{:?}", out.failure);
        assert!((out.x_final[0] - 0.0).abs() < 1e-6, "x = {:?}", out.x_final);
        assert!((out.x_final[1] - 1.0).abs() < 1e-6);
        assert!((out.objective - 2.0).abs() < 1e-6);
        assert!(out.feas_residual <= 1e-6);
    }

    #[test]
    fn toy_bound_activates() {
        let out = solve_program(&ToyBound, &[7.3], &cfg());
        assert_eq!(out.status, SolveStatus::Optimal);
        assert!((out.x_final[0] - 2.0).abs() < 1e-9, "x = {:?}", out.x_final);
    }

    #[test]
    fn toy_inequality_activates_on_circle() {
        let out = solve_program(&ToyInequality, &[0.0, 0.0], &cfg());
        assert_eq!(out.status, SolveStatus::Optimal, "{:?}", out.failure);
        let r = 0.5f64.sqrt();
        assert!((out.x_final[0] - r).abs() < 1e-4, "x = {:?}", out.x_final);
        assert!((out.x_final[1] - r).abs() < 1e-4);
    }

    #[test]
    fn classification_partitions() {
        let cfg = cfg();
        assert_eq!(classify(0.0, 0.0, &cfg), SolveStatus::Optimal);
        assert_eq!(classify(1e-7, 1.0, &cfg), SolveStatus::Feasible);
        assert_eq!(classify(0.1, 0.0, &cfg), SolveStatus::Failed);
        assert_eq!(classify(f64::NAN, 0.0, &cfg), SolveStatus::Failed);
    }

    #[test]
    fn deterministic_given_inputs() {
        let a = solve_program(&ToyEquality, &[3.0, -4.0], &cfg());
        let b = solve_program(&ToyEquality, &[3.0, -4.0], &cfg());
        assert_eq!(a.x_final, b.x_final);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.trace.len(), b.trace.len());
    }

    #[test]
    fn bad_start_is_reported_failed() {
        let out = solve_program(&ToyEquality, &[f64::NAN, 0.0], &cfg());
        assert_eq!(out.status, SolveStatus::Failed);
        assert!(out.failure.is_some());
    }
}
