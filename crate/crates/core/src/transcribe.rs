//! Direct forward-backward shooting transcription of the two transfer
//! problems.
//!
//! The decision vector is laid out flat as
//! `[tau_s, tau_i, tau_f, (t1, t2,) m_f, u_1x, u_1y, u_1z, ..., u_Nz]`
//! with times normalized, mass in kilograms and thrust in newtons. The
//! forward leg runs from the end of a GTO low-thrust spiral through the
//! first N/2 segments; the backward leg runs from the manifold terminal
//! state through the last N/2 segments; the match-point residual is
//! their difference (mass component scaled by the initial mass).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cr3bp::{
    self, ControlSchedule, Cr3bpError, Direction, Segment, State7, SystemParams, Trajectory,
};
use crate::halo::{self, HaloError, HaloFamily, HaloOrbit, ManifoldArcSpec};
use crate::ode::{self, StepControl};

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("invalid problem configuration: {0}")]
    Config(String),
    #[error("invalid decision vector: {0}")]
    Decision(String),
    #[error("propagation failed in the {leg} leg: {source}")]
    Leg {
        leg: &'static str,
        source: Cr3bpError,
    },
    #[error(transparent)]
    Halo(#[from] HaloError),
    #[error(transparent)]
    Dynamics(#[from] Cr3bpError),
}

/// Which example problem is being transcribed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemVariant {
    /// Hybrid fuel/time cost, fixed manifold terminal point; alpha is the
    /// cost weight.
    Hybrid,
    /// Minimum-fuel transfer with (t1, t2) free; alpha is the halo energy
    /// parameter.
    VariableTerminal,
}

/// GTO spiral construction constants; all recorded in dataset headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralConfig {
    pub earth_radius_km: f64,
    pub perigee_alt_km: f64,
    pub apogee_radius_km: f64,
    pub thrust_newtons: f64,
    pub duration_days: f64,
    pub integ_tol: f64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        SpiralConfig {
            earth_radius_km: 6378.137,
            perigee_alt_km: 400.0,
            apogee_radius_km: 42_164.0,
            thrust_newtons: 1.0,
            duration_days: 27.5,
            integ_tol: 1e-11,
        }
    }
}

/// Terminal boundary of the hybrid variant: a fixed point on the stable
/// manifold of the e_pert = 0.01 halo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridTerminal {
    pub e_pert: f64,
    /// t1 as a fraction of the halo period.
    pub t1_fraction: f64,
    pub t2: f64,
}

impl Default for HybridTerminal {
    fn default() -> Self {
        HybridTerminal {
            e_pert: 0.01,
            t1_fraction: 0.2,
            t2: 8.0,
        }
    }
}

/// Serializable snapshot of one problem instance; dataset headers embed
/// this verbatim so a spec can be reconstructed from a file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub variant: ProblemVariant,
    /// Cost weight (hybrid) or halo-energy parameter (variable-terminal).
    pub alpha: f64,
    pub n_segments: usize,
    pub params: SystemParams,
    pub spiral: SpiralConfig,
    pub m_initial_kg: f64,
    pub m_dry_kg: f64,
    pub tau_s_bounds: (f64, f64),
    pub tau_i_bounds: (f64, f64),
    pub tau_f_bounds: (f64, f64),
    pub t2_bounds: (f64, f64),
    pub hybrid_terminal: HybridTerminal,
    pub manifold_eps_mag: f64,
    pub manifold_branch_sign: f64,
}

impl ProblemConfig {
    pub fn hybrid(alpha: f64) -> Self {
        ProblemConfig {
            variant: ProblemVariant::Hybrid,
            alpha,
            n_segments: 20,
            params: SystemParams::earth_moon(),
            spiral: SpiralConfig::default(),
            m_initial_kg: 1000.0,
            m_dry_kg: 300.0,
            tau_s_bounds: (0.5, 10.0),
            tau_i_bounds: (0.0, 5.0),
            tau_f_bounds: (0.0, 5.0),
            t2_bounds: (5.0, 11.0),
            hybrid_terminal: HybridTerminal::default(),
            manifold_eps_mag: halo::EPS_MAG_DEFAULT,
            manifold_branch_sign: 1.0,
        }
    }

    pub fn variable_terminal(alpha: f64) -> Self {
        ProblemConfig {
            variant: ProblemVariant::VariableTerminal,
            ..ProblemConfig::hybrid(alpha)
        }
    }

    pub fn validate(&self) -> Result<(), TranscribeError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TranscribeError::Config(format!("alpha = {}", self.alpha)));
        }
        if self.n_segments == 0 || self.n_segments % 2 != 0 {
            return Err(TranscribeError::Config(format!(
                "n_segments = {} must be even and positive",
                self.n_segments
            )));
        }
        if !(self.m_dry_kg > 0.0 && self.m_initial_kg > self.m_dry_kg) {
            return Err(TranscribeError::Config("mass bounds".into()));
        }
        for (lo, hi) in [
            self.tau_s_bounds,
            self.tau_i_bounds,
            self.tau_f_bounds,
            self.t2_bounds,
        ] {
            if !(lo <= hi && lo >= 0.0) {
                return Err(TranscribeError::Config(format!("bounds ({lo}, {hi})")));
            }
        }
        self.params.validate()?;
        Ok(())
    }
}

/// Flat-vector layout helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_segments: usize,
    pub has_manifold_vars: bool,
}

impl Layout {
    pub const TAU_S: usize = 0;
    pub const TAU_I: usize = 1;
    pub const TAU_F: usize = 2;

    pub fn dim(&self) -> usize {
        3 * self.n_segments + 4 + if self.has_manifold_vars { 2 } else { 0 }
    }

    pub fn t1(&self) -> Option<usize> {
        self.has_manifold_vars.then_some(3)
    }

    pub fn t2(&self) -> Option<usize> {
        self.has_manifold_vars.then_some(4)
    }

    pub fn m_f(&self) -> usize {
        if self.has_manifold_vars {
            5
        } else {
            3
        }
    }

    pub fn u(&self, segment: usize) -> usize {
        self.m_f() + 1 + 3 * segment
    }

    /// Central-difference step for one entry: 1e-7 for times and thrust
    /// components, 1e-4 kg for the mass.
    pub fn fd_step(&self, idx: usize) -> f64 {
        if idx == self.m_f() {
            1e-4
        } else {
            1e-7
        }
    }
}

/// The NLP unknowns in structured form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub tau_s: f64,
    pub tau_i: f64,
    pub tau_f: f64,
    /// Present only in the variable-terminal variant.
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub m_f_kg: f64,
    /// N thrust vectors in newtons.
    pub u: Vec<[f64; 3]>,
}

impl DecisionVector {
    pub fn dim(&self) -> usize {
        3 * self.u.len() + 4 + if self.t1.is_some() { 2 } else { 0 }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.push(self.tau_s);
        x.push(self.tau_i);
        x.push(self.tau_f);
        if let (Some(t1), Some(t2)) = (self.t1, self.t2) {
            x.push(t1);
            x.push(t2);
        }
        x.push(self.m_f_kg);
        for u in &self.u {
            x.extend_from_slice(u);
        }
        x
    }

    pub fn from_flat(layout: Layout, x: &[f64]) -> Result<Self, TranscribeError> {
        if x.len() != layout.dim() {
            return Err(TranscribeError::Decision(format!(
                "dimension {} != expected {}",
                x.len(),
                layout.dim()
            )));
        }
        let mut u = Vec::with_capacity(layout.n_segments);
        for i in 0..layout.n_segments {
            let k = layout.u(i);
            u.push([x[k], x[k + 1], x[k + 2]]);
        }
        Ok(DecisionVector {
            tau_s: x[Layout::TAU_S],
            tau_i: x[Layout::TAU_I],
            tau_f: x[Layout::TAU_F],
            t1: layout.t1().map(|i| x[i]),
            t2: layout.t2().map(|i| x[i]),
            m_f_kg: x[layout.m_f()],
            u,
        })
    }
}

/// What the backward leg starts from.
#[derive(Debug, Clone)]
enum TerminalKind {
    /// Resolved once: the hybrid variant's fixed manifold point.
    Fixed([f64; 6]),
    /// Per-evaluation manifold lookup from the decision (t1, t2).
    Manifold,
    /// Test hook: an arbitrary fixed state.
    FixedState([f64; 6]),
}

/// A fully resolved problem instance: configuration plus the cached
/// spiral end state and target halo orbit.
#[derive(Clone)]
pub struct ProblemSpec {
    pub config: ProblemConfig,
    pub initial_state: State7,
    pub orbit: Arc<HaloOrbit>,
    terminal: TerminalKind,
}

impl ProblemSpec {
    pub fn new(config: ProblemConfig, family: &HaloFamily) -> Result<Self, TranscribeError> {
        config.validate()?;
        let initial_state = initial_boundary(&config.spiral, config.m_initial_kg, &config.params)?;
        let (orbit, terminal) = match config.variant {
            ProblemVariant::Hybrid => {
                let orbit = family.orbit_at_energy(halo::E_L1 + config.hybrid_terminal.e_pert)?;
                let spec = ManifoldArcSpec {
                    t1: config.hybrid_terminal.t1_fraction * orbit.period,
                    t2: config.hybrid_terminal.t2,
                    eps_mag: config.manifold_eps_mag,
                    branch_sign: config.manifold_branch_sign,
                };
                let point = halo::manifold_terminal_state(&orbit, &spec, &config.params)?;
                (orbit, TerminalKind::Fixed(point))
            }
            ProblemVariant::VariableTerminal => {
                let orbit = family.orbit_for_alpha(config.alpha)?;
                (orbit, TerminalKind::Manifold)
            }
        };
        Ok(ProblemSpec {
            config,
            initial_state,
            orbit,
            terminal,
        })
    }

    /// Test hook: overrides the backward-leg start with an arbitrary
    /// state, turning the transcription into a plain two-point problem.
    #[doc(hidden)]
    pub fn with_fixed_terminal_state(mut self, state: [f64; 6]) -> Self {
        self.terminal = TerminalKind::FixedState(state);
        self
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n_segments: self.config.n_segments,
            has_manifold_vars: matches!(self.config.variant, ProblemVariant::VariableTerminal),
        }
    }

    /// Cost weight: alpha for the hybrid variant, 1 for minimum fuel.
    pub fn omega(&self) -> f64 {
        match self.config.variant {
            ProblemVariant::Hybrid => self.alpha(),
            ProblemVariant::VariableTerminal => 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    /// Box bounds in flat order.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let mut lo = vec![0.0; l.dim()];
        let mut hi = vec![0.0; l.dim()];
        lo[Layout::TAU_S] = self.config.tau_s_bounds.0;
        hi[Layout::TAU_S] = self.config.tau_s_bounds.1;
        lo[Layout::TAU_I] = self.config.tau_i_bounds.0;
        hi[Layout::TAU_I] = self.config.tau_i_bounds.1;
        lo[Layout::TAU_F] = self.config.tau_f_bounds.0;
        hi[Layout::TAU_F] = self.config.tau_f_bounds.1;
        if let (Some(i1), Some(i2)) = (l.t1(), l.t2()) {
            lo[i1] = 0.0;
            hi[i1] = self.orbit.period - 1e-6;
            lo[i2] = self.config.t2_bounds.0;
            hi[i2] = self.config.t2_bounds.1;
        }
        lo[l.m_f()] = self.config.m_dry_kg;
        hi[l.m_f()] = self.config.m_initial_kg;
        let t_max = self.config.params.thrust_max_newtons;
        for s in 0..l.n_segments {
            for c in 0..3 {
                lo[l.u(s) + c] = -t_max;
                hi[l.u(s) + c] = t_max;
            }
        }
        (lo, hi)
    }

    /// Normalization constant of the time-of-flight cost term.
    pub fn tof_normalizer(&self) -> f64 {
        self.config.tau_s_bounds.1 + self.config.tau_i_bounds.1 + self.config.tau_f_bounds.1
    }

    /// Backward-leg start (position/velocity) for the decision vector.
    pub fn terminal_state_for(
        &self,
        x: &DecisionVector,
        tol: f64,
    ) -> Result<[f64; 6], TranscribeError> {
        match &self.terminal {
            TerminalKind::Fixed(s) | TerminalKind::FixedState(s) => Ok(*s),
            TerminalKind::Manifold => {
                let (t1, t2) = match (x.t1, x.t2) {
                    (Some(t1), Some(t2)) => (t1, t2),
                    _ => {
                        return Err(TranscribeError::Decision(
                            "variable-terminal vector missing (t1, t2)".into(),
                        ))
                    }
                };
                let spec = ManifoldArcSpec {
                    t1: t1.clamp(0.0, self.orbit.period * (1.0 - 1e-12)),
                    t2: t2.max(0.0),
                    eps_mag: self.config.manifold_eps_mag,
                    branch_sign: self.config.manifold_branch_sign,
                };
                Ok(manifold_terminal_state_tol(
                    &self.orbit,
                    &spec,
                    &self.config.params,
                    tol,
                )?)
            }
        }
    }
}

/// Manifold terminal state at a caller-chosen integration tolerance (the
/// public halo op pins 1e-12; the transcription hot path relaxes it).
fn manifold_terminal_state_tol(
    orbit: &HaloOrbit,
    spec: &ManifoldArcSpec,
    p: &SystemParams,
    tol: f64,
) -> Result<[f64; 6], HaloError> {
    let (s, stm) = cr3bp::propagate_stm(
        &State7::from_array6(&orbit.crossing_state, 1.0),
        spec.t1,
        p,
        tol,
    )?;
    let v = stm * nalgebra::Vector6::from_row_slice(&orbit.stable_eigvec);
    let v = v / v.norm();
    let mut perturbed = s.to_array6();
    for i in 0..6 {
        perturbed[i] += spec.eps_mag * spec.branch_sign * v[i];
    }
    if spec.t2 == 0.0 {
        return Ok(perturbed);
    }
    let traj = cr3bp::propagate(
        &State7::from_array6(&perturbed, 1.0),
        &ControlSchedule::ballistic(),
        spec.t2,
        p,
        tol,
        Direction::Backward,
    )?;
    Ok(traj.final_state.to_array6())
}

/// Dense GTO spiral trajectory: thrust held tangential to the rotating
/// velocity, which makes the rotating-frame energy strictly increasing.
pub fn spiral_trajectory(
    spiral: &SpiralConfig,
    m_initial_kg: f64,
    p: &SystemParams,
) -> Result<Trajectory, TranscribeError> {
    let mu = p.mu;
    let lu = p.length_unit_km;
    let r_p = (spiral.earth_radius_km + spiral.perigee_alt_km) / lu;
    let r_a = spiral.apogee_radius_km / lu;
    if !(r_p > 0.0 && r_a > r_p) {
        return Err(TranscribeError::Config(format!(
            "spiral radii ({r_p}, {r_a})"
        )));
    }
    let sma = 0.5 * (r_p + r_a);
    // Perigee on the Earth-Moon line, prograde, frames aligned at t = 0.
    let v_p = ((1.0 - mu) * (2.0 / r_p - 1.0 / sma)).sqrt();
    let q = [-mu + r_p, 0.0, 0.0];
    let v_rot = [0.0, v_p - q[0], 0.0];
    let s0 = State7::new(q, v_rot, m_initial_kg);

    let duration = spiral.duration_days * 86_400.0 / p.time_unit_s;
    let thrust = spiral.thrust_newtons;
    let accel_scale = p.accel_scale();
    let mdot = thrust * p.mass_flow_scale();
    let rhs = move |y: &[f64; 7]| -> [f64; 7] {
        let pos = [y[0], y[1], y[2]];
        let vel = [y[3], y[4], y[5]];
        let (rho1, rho2) = cr3bp::primary_distances(&pos, mu);
        let c1 = (1.0 - mu) / (rho1 * rho1 * rho1);
        let c2 = mu / (rho2 * rho2 * rho2);
        let vmag = (vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2]).sqrt();
        let ut = thrust * accel_scale / (y[6] * vmag);
        [
            vel[0],
            vel[1],
            vel[2],
            2.0 * vel[1] + pos[0] - c1 * (pos[0] + mu) - c2 * (pos[0] - 1.0 + mu) + ut * vel[0],
            -2.0 * vel[0] + pos[1] - c1 * pos[1] - c2 * pos[1] + ut * vel[1],
            -c1 * pos[2] - c2 * pos[2] + ut * vel[2],
            -mdot,
        ]
    };
    let mut samples = vec![(0.0, s0)];
    let y_end = ode::integrate(
        rhs,
        s0.to_array(),
        duration,
        StepControl::with_tol(spiral.integ_tol),
        |t, y| samples.push((t, State7::from_array(y))),
    )
    .map_err(Cr3bpError::from)?;
    Ok(Trajectory {
        samples,
        final_state: State7::from_array(&y_end),
    })
}

/// Deterministic fixed initial boundary: the end of the GTO spiral.
/// Results are memoized per configuration.
pub fn initial_boundary(
    spiral: &SpiralConfig,
    m_initial_kg: f64,
    p: &SystemParams,
) -> Result<State7, TranscribeError> {
    static CACHE: OnceLock<Mutex<HashMap<String, State7>>> = OnceLock::new();
    let key = serde_json::to_string(&(spiral, m_initial_kg, p)).expect("serializable config");
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return Ok(*hit);
    }
    let state = spiral_trajectory(spiral, m_initial_kg, p)?.final_state;
    cache.lock().unwrap().insert(key, state);
    Ok(state)
}

/// Evaluation output: cost, match-point residual and leg diagnostics.
/// Residual components: position (3, normalized), velocity (3,
/// normalized), mass difference divided by the initial mass.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cost: f64,
    pub residual: [f64; 7],
    pub forward: Trajectory,
    pub backward: Trajectory,
    /// Per-segment |u_i| / T_max.
    pub throttles: Vec<f64>,
}

fn leg_schedules(x: &DecisionVector, n: usize) -> (ControlSchedule, ControlSchedule) {
    let seg_dt = x.tau_s / n as f64;
    let half = n / 2;
    let mut fwd = Vec::with_capacity(half + 1);
    fwd.push(Segment {
        duration: x.tau_i,
        u: [0.0; 3],
    });
    for i in 0..half {
        fwd.push(Segment {
            duration: seg_dt,
            u: x.u[i],
        });
    }
    let mut bwd = Vec::with_capacity(half + 1);
    bwd.push(Segment {
        duration: x.tau_f,
        u: [0.0; 3],
    });
    for i in (half..n).rev() {
        bwd.push(Segment {
            duration: seg_dt,
            u: x.u[i],
        });
    }
    (ControlSchedule::new(fwd), ControlSchedule::new(bwd))
}

fn check_loose_box(x: &DecisionVector) -> Result<(), TranscribeError> {
    let ok = x.tau_s >= 0.0
        && x.tau_i >= 0.0
        && x.tau_f >= 0.0
        && x.m_f_kg > 0.0
        && x.t1.map_or(true, |t| t.is_finite())
        && x.t2.map_or(true, |t| t >= 0.0)
        && x.u.iter().flatten().all(|c| c.is_finite());
    if ok {
        Ok(())
    } else {
        Err(TranscribeError::Decision(format!("{x:?}")))
    }
}

fn assemble_residual(fwd: &State7, bwd: &State7, m_initial_kg: f64) -> [f64; 7] {
    [
        fwd.pos[0] - bwd.pos[0],
        fwd.pos[1] - bwd.pos[1],
        fwd.pos[2] - bwd.pos[2],
        fwd.vel[0] - bwd.vel[0],
        fwd.vel[1] - bwd.vel[1],
        fwd.vel[2] - bwd.vel[2],
        (fwd.mass_kg - bwd.mass_kg) / m_initial_kg,
    ]
}

/// Hybrid cost in terms of the decision vector.
pub fn hybrid_cost(x: &DecisionVector, spec: &ProblemSpec) -> f64 {
    let omega = spec.omega();
    omega * (-x.m_f_kg / spec.config.m_initial_kg)
        + (1.0 - omega) * (x.tau_s + x.tau_i + x.tau_f) / spec.tof_normalizer()
}

/// Analytic gradient of the cost: linear in m_f and the times, zero in
/// the controls and the manifold parameters.
pub fn cost_gradient(spec: &ProblemSpec) -> Vec<f64> {
    let l = spec.layout();
    let omega = spec.omega();
    let mut g = vec![0.0; l.dim()];
    let dt = (1.0 - omega) / spec.tof_normalizer();
    g[Layout::TAU_S] = dt;
    g[Layout::TAU_I] = dt;
    g[Layout::TAU_F] = dt;
    g[l.m_f()] = -omega / spec.config.m_initial_kg;
    g
}

/// Match-point residual and cost without trajectory recording.
pub fn evaluate_residual(
    x: &DecisionVector,
    spec: &ProblemSpec,
    tol: f64,
) -> Result<([f64; 7], f64), TranscribeError> {
    let terminal = spec.terminal_state_for(x, tol)?;
    evaluate_residual_with_terminal(x, spec, tol, &terminal)
}

/// Same as [`evaluate_residual`] with the backward-leg start supplied by
/// the caller (the solver caches it across finite-difference stencils
/// that do not perturb t1/t2).
pub fn evaluate_residual_with_terminal(
    x: &DecisionVector,
    spec: &ProblemSpec,
    tol: f64,
    terminal: &[f64; 6],
) -> Result<([f64; 7], f64), TranscribeError> {
    check_loose_box(x)?;
    let n = spec.config.n_segments;
    if x.u.len() != n {
        return Err(TranscribeError::Decision(format!(
            "{} segments, expected {n}",
            x.u.len()
        )));
    }
    let (fwd_sched, bwd_sched) = leg_schedules(x, n);
    let p = &spec.config.params;
    let fwd_end =
        cr3bp::propagate_final(&spec.initial_state, &fwd_sched, 0.0, p, tol, Direction::Forward)
            .map_err(|source| TranscribeError::Leg {
                leg: "forward",
                source,
            })?;
    let bwd_start = State7::from_array6(terminal, x.m_f_kg);
    let bwd_end = cr3bp::propagate_final(&bwd_start, &bwd_sched, 0.0, p, tol, Direction::Backward)
        .map_err(|source| TranscribeError::Leg {
            leg: "backward",
            source,
        })?;
    Ok((
        assemble_residual(&fwd_end, &bwd_end, spec.config.m_initial_kg),
        hybrid_cost(x, spec),
    ))
}

/// Full evaluation with dense leg trajectories and throttle diagnostics.
pub fn evaluate(
    x: &DecisionVector,
    spec: &ProblemSpec,
    tol: f64,
) -> Result<EvalReport, TranscribeError> {
    check_loose_box(x)?;
    let n = spec.config.n_segments;
    if x.u.len() != n {
        return Err(TranscribeError::Decision(format!(
            "{} segments, expected {n}",
            x.u.len()
        )));
    }
    let (fwd_sched, bwd_sched) = leg_schedules(x, n);
    let p = &spec.config.params;
    let forward =
        cr3bp::propagate(&spec.initial_state, &fwd_sched, 0.0, p, tol, Direction::Forward)
            .map_err(|source| TranscribeError::Leg {
                leg: "forward",
                source,
            })?;
    let terminal = spec.terminal_state_for(x, tol)?;
    let bwd_start = State7::from_array6(&terminal, x.m_f_kg);
    let backward = cr3bp::propagate(&bwd_start, &bwd_sched, 0.0, p, tol, Direction::Backward)
        .map_err(|source| TranscribeError::Leg {
            leg: "backward",
            source,
        })?;
    let t_max = p.thrust_max_newtons;
    let throttles = x
        .u
        .iter()
        .map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() / t_max)
        .collect();
    Ok(EvalReport {
        cost: hybrid_cost(x, spec),
        residual: assemble_residual(
            &forward.final_state,
            &backward.final_state,
            spec.config.m_initial_kg,
        ),
        forward,
        backward,
        throttles,
    })
}

/// Cost gradient (analytic) and central-difference residual Jacobian,
/// integrated at 1e-12 with per-entry steps.
pub struct Jacobian {
    pub cost_grad: Vec<f64>,
    /// residual[row][col], 7 x dim.
    pub residual: Vec<Vec<f64>>,
}

pub fn jacobian(x: &DecisionVector, spec: &ProblemSpec) -> Result<Jacobian, TranscribeError> {
    const TOL: f64 = 1e-12;
    let l = spec.layout();
    let flat = x.to_flat();
    let mut residual = vec![vec![0.0; l.dim()]; 7];
    for col in 0..l.dim() {
        let h = l.fd_step(col);
        let mut hi = flat.clone();
        let mut lo = flat.clone();
        hi[col] += h;
        lo[col] -= h;
        let (r_hi, _) = evaluate_residual(&DecisionVector::from_flat(l, &hi)?, spec, TOL)?;
        let (r_lo, _) = evaluate_residual(&DecisionVector::from_flat(l, &lo)?, spec, TOL)?;
        for row in 0..7 {
            residual[row][col] = (r_hi[row] - r_lo[row]) / (2.0 * h);
        }
    }
    Ok(Jacobian {
        cost_grad: cost_gradient(spec),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn family() -> &'static HaloFamily {
        static FAMILY: OnceLock<HaloFamily> = OnceLock::new();
        FAMILY.get_or_init(|| HaloFamily::new(SystemParams::earth_moon()))
    }

    fn hybrid_spec(alpha: f64, n: usize) -> ProblemSpec {
        let mut cfg = ProblemConfig::hybrid(alpha);
        cfg.n_segments = n;
        ProblemSpec::new(cfg, family()).unwrap()
    }

    fn sample_x(spec: &ProblemSpec, scale: f64) -> DecisionVector {
        let n = spec.config.n_segments;
        let mut u = Vec::new();
        for i in 0..n {
            let phase = i as f64 / n as f64;
            u.push([
                scale * 0.4 * (1.0 - phase),
                scale * 0.3 * phase,
                scale * 0.1,
            ]);
        }
        DecisionVector {
            tau_s: 3.0,
            tau_i: 0.8,
            tau_f: 1.1,
            t1: spec.layout().t1().map(|_| 0.3 * spec.orbit.period),
            t2: spec.layout().t2().map(|_| 6.0),
            m_f_kg: 600.0,
            u,
        }
    }

    #[test]
    fn initial_boundary_is_deterministic_and_burns_fuel() {
        let cfg = ProblemConfig::hybrid(0.5);
        let a = initial_boundary(&cfg.spiral, cfg.m_initial_kg, &cfg.params).unwrap();
        let b = initial_boundary(&cfg.spiral, cfg.m_initial_kg, &cfg.params).unwrap();
        assert_eq!(a, b, "bit-identical across invocations");
        assert!(a.mass_kg < cfg.m_initial_kg);
        assert!(a.mass_kg > cfg.m_dry_kg);
    }

    #[test]
    fn spiral_energy_strictly_increases() {
        let cfg = ProblemConfig::hybrid(0.5);
        let traj = spiral_trajectory(&cfg.spiral, cfg.m_initial_kg, &cfg.params).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for (_, s) in &traj.samples {
            let e = cr3bp::energy(s, &cfg.params).unwrap();
            assert!(e > prev, "energy not strictly increasing");
            prev = e;
        }
    }

    #[test]
    fn dimensions_match_variants() {
        let h = hybrid_spec(0.5, 20);
        assert_eq!(h.layout().dim(), 64);
        let mut cfg = ProblemConfig::variable_terminal(0.5);
        cfg.n_segments = 20;
        let v = ProblemSpec::new(cfg, family()).unwrap();
        assert_eq!(v.layout().dim(), 66);
        // Flat order round-trips.
        let x = sample_x(&v, 0.5);
        let flat = x.to_flat();
        assert_eq!(flat.len(), 66);
        let back = DecisionVector::from_flat(v.layout(), &flat).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn hybrid_cost_examples() {
        let spec = hybrid_spec(1.0, 10);
        let mut x = sample_x(&spec, 0.0);
        x.m_f_kg = 800.0;
        assert_relative_eq!(hybrid_cost(&x, &spec), -0.8, epsilon = 1e-15);

        let spec0 = hybrid_spec(0.0, 10);
        let mut x0 = sample_x(&spec0, 0.0);
        x0.tau_s = spec0.config.tau_s_bounds.1;
        x0.tau_i = spec0.config.tau_i_bounds.1;
        x0.tau_f = spec0.config.tau_f_bounds.1;
        assert_relative_eq!(hybrid_cost(&x0, &spec0), 1.0, epsilon = 1e-15);

        // omega = 1/2 is the midpoint of the two endpoint costs.
        let spec_half = hybrid_spec(0.5, 10);
        let x = sample_x(&spec_half, 0.0);
        let j_fuel = -x.m_f_kg / spec_half.config.m_initial_kg;
        let j_time = (x.tau_s + x.tau_i + x.tau_f) / spec_half.tof_normalizer();
        assert_relative_eq!(
            hybrid_cost(&x, &spec_half),
            0.5 * (j_fuel + j_time),
            epsilon = 1e-12
        );
    }

    #[test]
    fn matched_endpoint_zeroes_position_velocity_residual() {
        // With zero shooting and final-coast spans the backward leg stays
        // at its start, so injecting the forward endpoint as the terminal
        // state makes both legs end at the same state.
        let spec = hybrid_spec(0.7, 6);
        let mut x = sample_x(&spec, 0.5);
        x.tau_s = 0.0;
        x.tau_f = 0.0;
        let (fwd_sched, _) = leg_schedules(&x, 6);
        let fwd_end = cr3bp::propagate_final(
            &spec.initial_state,
            &fwd_sched,
            0.0,
            &spec.config.params,
            1e-11,
            Direction::Forward,
        )
        .unwrap();
        let matched = spec.clone().with_fixed_terminal_state(fwd_end.to_array6());
        let (r, _) = evaluate_residual(&x, &matched, 1e-11).unwrap();
        for c in &r[..6] {
            assert_eq!(*c, 0.0, "exact position/velocity match");
        }
        assert_relative_eq!(
            r[6],
            (fwd_end.mass_kg - x.m_f_kg) / spec.config.m_initial_kg,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_thrust_mass_residual() {
        let spec = hybrid_spec(0.3, 6);
        let x = sample_x(&spec, 0.0);
        let (r, _) = evaluate_residual(&x, &spec, 1e-10).unwrap();
        assert_relative_eq!(
            r[6],
            (spec.initial_state.mass_kg - x.m_f_kg) / spec.config.m_initial_kg,
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_shooting_agreement_at_a_root() {
        // Construct a root of c by injecting the full forward endpoint as
        // the terminal state, then compare against the independent
        // single-shooting residual (forward through all N segments, then
        // comparison at the terminal state).
        let spec = hybrid_spec(1.0, 6);
        let x = sample_x(&spec, 0.4);
        let p = &spec.config.params;
        let n = 6;
        let seg_dt = x.tau_s / n as f64;
        let mut full = vec![Segment {
            duration: x.tau_i,
            u: [0.0; 3],
        }];
        for i in 0..n {
            full.push(Segment {
                duration: seg_dt,
                u: x.u[i],
            });
        }
        let full_end = cr3bp::propagate_final(
            &spec.initial_state,
            &ControlSchedule::new(full),
            x.tau_f,
            p,
            1e-12,
            Direction::Forward,
        )
        .unwrap();
        let mut x_root = x.clone();
        x_root.m_f_kg = full_end.mass_kg;
        let rooted = spec.clone().with_fixed_terminal_state(full_end.to_array6());

        // Forward-backward residual at the constructed root.
        let (c, _) = evaluate_residual(&x_root, &rooted, 1e-12).unwrap();
        // Single-shooting residual: full forward endpoint vs terminal.
        let terminal = State7::from_array6(&full_end.to_array6(), x_root.m_f_kg);
        let c_ss = assemble_residual(&full_end, &terminal, spec.config.m_initial_kg);
        for i in 0..7 {
            assert!(
                (c[i] - c_ss[i]).abs() < 1e-6,
                "row {i}: fb {} vs ss {}",
                c[i],
                c_ss[i]
            );
        }
    }

    #[test]
    fn segment_swap_changes_residual() {
        let spec = hybrid_spec(0.5, 6);
        let x = sample_x(&spec, 0.5);
        let (r0, _) = evaluate_residual(&x, &spec, 1e-10).unwrap();
        let mut swapped = x.clone();
        swapped.u.swap(0, 2);
        let (r1, _) = evaluate_residual(&swapped, &spec, 1e-10).unwrap();
        let diff: f64 = r0
            .iter()
            .zip(&r1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "residual must be order-sensitive");
        // Swapping equal controls is a no-op.
        let mut x_eq = x.clone();
        x_eq.u[0] = [0.2, 0.1, 0.0];
        x_eq.u[2] = [0.2, 0.1, 0.0];
        let (a, _) = evaluate_residual(&x_eq, &spec, 1e-10).unwrap();
        let mut x_eq2 = x_eq.clone();
        x_eq2.u.swap(0, 2);
        let (b, _) = evaluate_residual(&x_eq2, &spec, 1e-10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cost_gradient_is_exact() {
        let spec = hybrid_spec(1.0, 6);
        let g = cost_gradient(&spec);
        let l = spec.layout();
        assert_relative_eq!(g[l.m_f()], -1.0 / spec.config.m_initial_kg, epsilon = 1e-18);
        for s in 0..6 {
            for c in 0..3 {
                assert_eq!(g[l.u(s) + c], 0.0);
            }
        }
        // omega = 1 kills the time term entirely.
        assert_eq!(g[Layout::TAU_S], 0.0);
    }

    #[test]
    fn residual_jacobian_matches_richardson() {
        let spec = hybrid_spec(0.6, 6);
        let x = sample_x(&spec, 0.3);
        let jac = jacobian(&x, &spec).unwrap();
        let l = spec.layout();
        // Richardson-extrapolated central difference on the tau_i column.
        let col = Layout::TAU_I;
        let flat = x.to_flat();
        let d = |h: f64| -> [f64; 7] {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            hi[col] += h;
            lo[col] -= h;
            let (rh, _) =
                evaluate_residual(&DecisionVector::from_flat(l, &hi).unwrap(), &spec, 1e-12)
                    .unwrap();
            let (rl, _) =
                evaluate_residual(&DecisionVector::from_flat(l, &lo).unwrap(), &spec, 1e-12)
                    .unwrap();
            let mut out = [0.0; 7];
            for i in 0..7 {
                out[i] = (rh[i] - rl[i]) / (2.0 * h);
            }
            out
        };
        let h = 1e-4;
        let d1 = d(h);
        let d2 = d(h / 2.0);
        let mut scale: f64 = 0.0;
        for row in 0..7 {
            scale = scale.max(d1[row].abs());
        }
        for row in 0..7 {
            let richardson = (4.0 * d2[row] - d1[row]) / 3.0;
            let err = (jac.residual[row][col] - richardson).abs() / scale;
            assert!(
                err < 1e-5,
                "row {row}: jac {} vs richardson {richardson}",
                jac.residual[row][col]
            );
        }
    }

    #[test]
    fn throttles_and_report_shapes() {
        let spec = hybrid_spec(0.5, 6);
        let mut x = sample_x(&spec, 0.0);
        x.u[0] = [1.0, 0.0, 0.0];
        let report = evaluate(&x, &spec, 1e-9).unwrap();
        assert_eq!(report.residual.len(), 7);
        assert_eq!(report.throttles.len(), 6);
        assert_relative_eq!(report.throttles[0], 1.0, epsilon = 1e-15);
        assert_eq!(report.throttles[1], 0.0);
        assert!(report.forward.samples.len() > 2);
        assert!(report.backward.samples.len() > 2);
    }

    #[test]
    fn loose_box_is_enforced() {
        let spec = hybrid_spec(0.5, 6);
        let mut x = sample_x(&spec, 0.1);
        x.m_f_kg = -1.0;
        assert!(evaluate_residual(&x, &spec, 1e-9).is_err());
        let mut x = sample_x(&spec, 0.1);
        x.tau_s = -0.5;
        assert!(evaluate_residual(&x, &spec, 1e-9).is_err());
    }

    #[test]
    fn cost_stays_in_box_range() {
        for alpha in [0.0, 0.3, 1.0] {
            let spec = hybrid_spec(alpha, 6);
            let (lo, hi) = spec.bounds();
            for t in [0.0, 0.5, 1.0] {
                let mut flat = vec![0.0; spec.layout().dim()];
                for i in 0..flat.len() {
                    flat[i] = lo[i] + t * (hi[i] - lo[i]);
                }
                let x = DecisionVector::from_flat(spec.layout(), &flat).unwrap();
                let j = hybrid_cost(&x, &spec);
                assert!((-1.0..=1.0).contains(&j), "J = {j}");
            }
        }
    }
}
