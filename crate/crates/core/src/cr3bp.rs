//! Normalized Earth-Moon circular restricted three-body dynamics.
//!
//! Everything runs in the canonical rotating frame: the primary sits at
//! `(-mu, 0, 0)`, the secondary at `(1-mu, 0, 0)`, lengths are scaled by
//! the primary-secondary distance and time by the inverse mean motion.
//! Mass is carried in kilograms and thrust in newtons; both are converted
//! to normalized acceleration / mass flow at evaluation time.

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{self, OdeError, StepControl};

/// Distance floor to either primary below which an arc is aborted.
pub const RHO_MIN: f64 = 1e-9;
/// Spacecraft mass floor in kilograms.
pub const MASS_FLOOR_KG: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum Cr3bpError {
    #[error("trajectory came within {rho:.3e} of a primary (floor {floor:.3e}) at t={t}")]
    Singularity { rho: f64, floor: f64, t: f64 },
    #[error("spacecraft mass {mass_kg} kg fell below the floor at t={t}")]
    MassFloor { mass_kg: f64, t: f64 },
    #[error("thrust magnitude {magnitude} N exceeds the {max} N bound")]
    ThrustBound { magnitude: f64, max: f64 },
    #[error("invalid {what}: {why}")]
    Domain { what: &'static str, why: String },
    #[error("root finder failed for {what} in bracket [{lo}, {hi}]")]
    RootFind { what: &'static str, lo: f64, hi: f64 },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Physical constants and normalization scales of one CR3BP instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Mass ratio mu = m2 / (m1 + m2).
    pub mu: f64,
    /// Constant specific impulse in seconds.
    pub isp_seconds: f64,
    /// Earth gravitational constant in m/s^2.
    pub g0: f64,
    /// Maximum thrust magnitude in newtons.
    pub thrust_max_newtons: f64,
    /// Primary-secondary distance in km.
    pub length_unit_km: f64,
    /// Seconds per normalized time unit (inverse mean motion).
    pub time_unit_s: f64,
    /// Total system mass in kg.
    pub mass_unit_kg: f64,
}

impl SystemParams {
    /// Earth-Moon system with the 1000 kg / 1 N / 1000 s spacecraft.
    pub fn earth_moon() -> Self {
        SystemParams {
            mu: 0.012_150_585_6,
            isp_seconds: 1000.0,
            g0: 9.806_65,
            thrust_max_newtons: 1.0,
            length_unit_km: 384_400.0,
            time_unit_s: 375_190.258_52,
            mass_unit_kg: 6.0456e24,
        }
    }

    pub fn validate(&self) -> Result<(), Cr3bpError> {
        let ok = self.mu > 0.0
            && self.mu < 0.5
            && self.isp_seconds > 0.0
            && self.g0 > 0.0
            && self.thrust_max_newtons > 0.0
            && self.length_unit_km > 0.0
            && self.time_unit_s > 0.0
            && self.mass_unit_kg > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Cr3bpError::Domain {
                what: "SystemParams",
                why: format!("{self:?}"),
            })
        }
    }

    /// Normalized acceleration per (newton / kilogram).
    #[inline]
    pub fn accel_scale(&self) -> f64 {
        self.time_unit_s * self.time_unit_s / (self.length_unit_km * 1000.0)
    }

    /// Mass flow in kg per normalized time per newton of thrust.
    #[inline]
    pub fn mass_flow_scale(&self) -> f64 {
        self.time_unit_s / (self.isp_seconds * self.g0)
    }
}

/// Spacecraft state: normalized position and velocity plus mass in kg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State7 {
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub mass_kg: f64,
}

impl State7 {
    pub fn new(pos: [f64; 3], vel: [f64; 3], mass_kg: f64) -> Self {
        State7 { pos, vel, mass_kg }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 7] {
        [
            self.pos[0],
            self.pos[1],
            self.pos[2],
            self.vel[0],
            self.vel[1],
            self.vel[2],
            self.mass_kg,
        ]
    }

    #[inline]
    pub fn from_array(y: &[f64; 7]) -> Self {
        State7 {
            pos: [y[0], y[1], y[2]],
            vel: [y[3], y[4], y[5]],
            mass_kg: y[6],
        }
    }

    /// Position/velocity 6-vector, dropping mass.
    #[inline]
    pub fn to_array6(self) -> [f64; 6] {
        [
            self.pos[0],
            self.pos[1],
            self.pos[2],
            self.vel[0],
            self.vel[1],
            self.vel[2],
        ]
    }

    pub fn from_array6(y: &[f64; 6], mass_kg: f64) -> Self {
        State7 {
            pos: [y[0], y[1], y[2]],
            vel: [y[3], y[4], y[5]],
            mass_kg,
        }
    }
}

/// State transition matrix of the ballistic flow: partials of the final
/// position/velocity with respect to the initial ones.
pub type Stm = Matrix6<f64>;

/// One constant-thrust segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Normalized duration, >= 0.
    pub duration: f64,
    /// Thrust vector in newtons.
    pub u: [f64; 3],
}

/// Ordered constant-thrust segments; empty means ballistic coast.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub segments: Vec<Segment>,
}

impl ControlSchedule {
    pub fn ballistic() -> Self {
        ControlSchedule::default()
    }

    pub fn new(segments: Vec<Segment>) -> Self {
        ControlSchedule { segments }
    }

    /// Strict contract check: finite non-negative durations, thrust norm
    /// within the configured bound.
    pub fn validate(&self, p: &SystemParams) -> Result<(), Cr3bpError> {
        for seg in &self.segments {
            if !(seg.duration >= 0.0 && seg.duration.is_finite()) {
                return Err(Cr3bpError::Domain {
                    what: "segment duration",
                    why: format!("{}", seg.duration),
                });
            }
            let magnitude = norm3(&seg.u);
            if !magnitude.is_finite() || magnitude > p.thrust_max_newtons * (1.0 + 1e-12) {
                return Err(Cr3bpError::ThrustBound {
                    magnitude,
                    max: p.thrust_max_newtons,
                });
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

#[inline]
fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Distances to the primary and secondary body.
#[inline]
pub fn primary_distances(pos: &[f64; 3], mu: f64) -> (f64, f64) {
    let dx1 = pos[0] + mu;
    let dx2 = pos[0] - 1.0 + mu;
    let yz = pos[1] * pos[1] + pos[2] * pos[2];
    ((dx1 * dx1 + yz).sqrt(), (dx2 * dx2 + yz).sqrt())
}

/// Gravitational plus centrifugal plus Coriolis acceleration on a unit mass.
#[inline]
fn accel_natural(pos: &[f64; 3], vel: &[f64; 3], mu: f64) -> [f64; 3] {
    let (rho1, rho2) = primary_distances(pos, mu);
    let c1 = (1.0 - mu) / (rho1 * rho1 * rho1);
    let c2 = mu / (rho2 * rho2 * rho2);
    [
        2.0 * vel[1] + pos[0] - c1 * (pos[0] + mu) - c2 * (pos[0] - 1.0 + mu),
        -2.0 * vel[0] + pos[1] - c1 * pos[1] - c2 * pos[1],
        -c1 * pos[2] - c2 * pos[2],
    ]
}

fn check_not_singular(pos: &[f64; 3], mu: f64) -> Result<(), Cr3bpError> {
    let (rho1, rho2) = primary_distances(pos, mu);
    let rho = rho1.min(rho2);
    if rho < RHO_MIN {
        return Err(Cr3bpError::Singularity {
            rho,
            floor: RHO_MIN,
            t: 0.0,
        });
    }
    Ok(())
}

/// Natural (ballistic) equations of motion. The mass derivative is zero.
pub fn eom_natural(s: &State7, p: &SystemParams) -> Result<State7, Cr3bpError> {
    check_not_singular(&s.pos, p.mu)?;
    Ok(State7 {
        pos: s.vel,
        vel: accel_natural(&s.pos, &s.vel, p.mu),
        mass_kg: 0.0,
    })
}

/// Controlled equations of motion with thrust `u` in newtons. The mass
/// derivative is negative so that fuel depletes along forward time.
pub fn eom_controlled(s: &State7, u: &[f64; 3], p: &SystemParams) -> Result<State7, Cr3bpError> {
    check_not_singular(&s.pos, p.mu)?;
    let magnitude = norm3(u);
    if magnitude > p.thrust_max_newtons * (1.0 + 1e-12) {
        return Err(Cr3bpError::ThrustBound {
            magnitude,
            max: p.thrust_max_newtons,
        });
    }
    if s.mass_kg < MASS_FLOOR_KG {
        return Err(Cr3bpError::MassFloor {
            mass_kg: s.mass_kg,
            t: 0.0,
        });
    }
    let mut a = accel_natural(&s.pos, &s.vel, p.mu);
    let thrust_scale = p.accel_scale() / s.mass_kg;
    for i in 0..3 {
        a[i] += u[i] * thrust_scale;
    }
    Ok(State7 {
        pos: s.vel,
        vel: a,
        mass_kg: -magnitude * p.mass_flow_scale(),
    })
}

/// Rotating-frame energy integral, constant along ballistic motion.
pub fn energy(s: &State7, p: &SystemParams) -> Result<f64, Cr3bpError> {
    check_not_singular(&s.pos, p.mu)?;
    let (rho1, rho2) = primary_distances(&s.pos, p.mu);
    let v2 = s.vel[0] * s.vel[0] + s.vel[1] * s.vel[1] + s.vel[2] * s.vel[2];
    let r2 = s.pos[0] * s.pos[0] + s.pos[1] * s.pos[1];
    Ok(0.5 * v2 - 0.5 * r2 - (1.0 - p.mu) / rho1 - p.mu / rho2)
}

/// Collinear equilibrium condition along the q1-axis.
fn axis_residual(x: f64, mu: f64) -> f64 {
    let d1 = x + mu;
    let d2 = x - 1.0 + mu;
    x - (1.0 - mu) * d1 / (d1.abs().powi(3)) - mu * d2 / (d2.abs().powi(3))
}

fn bisect_axis(mut lo: f64, mut hi: f64, mu: f64, what: &'static str) -> Result<f64, Cr3bpError> {
    let (flo, fhi) = (axis_residual(lo, mu), axis_residual(hi, mu));
    if flo.signum() == fhi.signum() {
        return Err(Cr3bpError::RootFind { what, lo, hi });
    }
    let (lo0, hi0) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = axis_residual(mid, mu);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    if axis_residual(root, mu).abs() < 1e-12 {
        Ok(root)
    } else {
        Err(Cr3bpError::RootFind {
            what,
            lo: lo0,
            hi: hi0,
        })
    }
}

/// The five libration points, ordered L1..L5.
pub fn lagrange_points(p: &SystemParams) -> Result<[Vector3<f64>; 5], Cr3bpError> {
    p.validate()?;
    let mu = p.mu;
    let eps = 1e-7;
    let l1 = bisect_axis(-mu + eps, 1.0 - mu - eps, mu, "L1")?;
    let l2 = bisect_axis(1.0 - mu + eps, 2.5, mu, "L2")?;
    let l3 = bisect_axis(-2.5, -mu - eps, mu, "L3")?;
    let half = 0.5 - mu;
    let tri = 3.0f64.sqrt() / 2.0;
    Ok([
        Vector3::new(l1, 0.0, 0.0),
        Vector3::new(l2, 0.0, 0.0),
        Vector3::new(l3, 0.0, 0.0),
        Vector3::new(half, tri, 0.0),
        Vector3::new(half, -tri, 0.0),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Dense result of one propagation: accepted-step samples (times carry
/// the sign of the integration direction) plus the final state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, State7)>,
    pub final_state: State7,
}

impl Trajectory {
    /// CSV with header `t,q1,q2,q3,v1,v2,v3,m` in normalized units
    /// (mass in kg).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,q1,q2,q3,v1,v2,v3,m")?;
        for (t, s) in &self.samples {
            writeln!(
                w,
                "{t},{},{},{},{},{},{},{}",
                s.pos[0], s.pos[1], s.pos[2], s.vel[0], s.vel[1], s.vel[2], s.mass_kg
            )?;
        }
        Ok(())
    }
}

struct LegOutcome {
    y: [f64; 7],
    t_signed: f64,
}

/// Integrate one constant-control leg of `duration >= 0` in internal
/// forward time; `sign` = -1 flips the vector field for backward motion.
fn integrate_leg(
    y0: [f64; 7],
    u: [f64; 3],
    duration: f64,
    sign: f64,
    t_offset: f64,
    p: &SystemParams,
    ctrl: StepControl,
    samples: &mut Option<&mut Vec<(f64, State7)>>,
) -> Result<LegOutcome, Cr3bpError> {
    let mu = p.mu;
    let u_mag = norm3(&u);
    let thrusting = u_mag > 0.0;
    let accel_scale = p.accel_scale();
    let mdot = u_mag * p.mass_flow_scale();
    let rhs = |y: &[f64; 7]| -> [f64; 7] {
        let pos = [y[0], y[1], y[2]];
        let vel = [y[3], y[4], y[5]];
        let mut a = accel_natural(&pos, &vel, mu);
        if thrusting {
            let s = accel_scale / y[6];
            a[0] += u[0] * s;
            a[1] += u[1] * s;
            a[2] += u[2] * s;
        }
        [
            sign * vel[0],
            sign * vel[1],
            sign * vel[2],
            sign * a[0],
            sign * a[1],
            sign * a[2],
            sign * -mdot,
        ]
    };

    let mut err: Option<Cr3bpError> = None;
    let y_end = ode::integrate(rhs, y0, duration, ctrl, |t, y| {
        if err.is_some() {
            return;
        }
        let (rho1, rho2) = primary_distances(&[y[0], y[1], y[2]], mu);
        let rho = rho1.min(rho2);
        let t_signed = t_offset + sign * t;
        if rho < RHO_MIN {
            err = Some(Cr3bpError::Singularity {
                rho,
                floor: RHO_MIN,
                t: t_signed,
            });
            return;
        }
        if y[6] < MASS_FLOOR_KG {
            err = Some(Cr3bpError::MassFloor {
                mass_kg: y[6],
                t: t_signed,
            });
            return;
        }
        if let Some(v) = samples.as_deref_mut() {
            v.push((t_signed, State7::from_array(y)));
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(LegOutcome {
        y: y_end,
        t_signed: t_offset + sign * duration,
    })
}

/// Propagate through the control schedule, then coast, sampling every
/// accepted step. Backward propagation integrates the negated vector
/// field, so mass grows back through thrust arcs.
pub fn propagate(
    s0: &State7,
    schedule: &ControlSchedule,
    coast_after: f64,
    p: &SystemParams,
    tol: f64,
    direction: Direction,
) -> Result<Trajectory, Cr3bpError> {
    check_tol(tol)?;
    if !(coast_after >= 0.0 && coast_after.is_finite()) {
        return Err(Cr3bpError::Domain {
            what: "coast_after",
            why: format!("{coast_after}"),
        });
    }
    for seg in &schedule.segments {
        if !(seg.duration >= 0.0 && seg.duration.is_finite()) || !norm3(&seg.u).is_finite() {
            return Err(Cr3bpError::Domain {
                what: "schedule segment",
                why: format!("{seg:?}"),
            });
        }
    }

    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let ctrl = StepControl::with_tol(tol);
    let mut samples = vec![(0.0, *s0)];
    let mut y = s0.to_array();
    let mut t = 0.0;
    for seg in &schedule.segments {
        let leg = integrate_leg(
            y,
            seg.u,
            seg.duration,
            sign,
            t,
            p,
            ctrl,
            &mut Some(&mut samples),
        )?;
        y = leg.y;
        t = leg.t_signed;
    }
    let leg = integrate_leg(
        y,
        [0.0; 3],
        coast_after,
        sign,
        t,
        p,
        ctrl,
        &mut Some(&mut samples),
    )?;
    let final_state = State7::from_array(&leg.y);
    if *samples.last().map(|(st, _)| st).unwrap_or(&0.0) != leg.t_signed {
        samples.push((leg.t_signed, final_state));
    }
    Ok(Trajectory {
        samples,
        final_state,
    })
}

/// Fast path used by the transcription: no sample recording.
pub(crate) fn propagate_final(
    s0: &State7,
    schedule: &ControlSchedule,
    coast_after: f64,
    p: &SystemParams,
    tol: f64,
    direction: Direction,
) -> Result<State7, Cr3bpError> {
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let ctrl = StepControl::with_tol(tol);
    let mut y = s0.to_array();
    let mut t = 0.0;
    for seg in &schedule.segments {
        let leg = integrate_leg(y, seg.u, seg.duration, sign, t, p, ctrl, &mut None)?;
        y = leg.y;
        t = leg.t_signed;
    }
    let leg = integrate_leg(y, [0.0; 3], coast_after, sign, t, p, ctrl, &mut None)?;
    Ok(State7::from_array(&leg.y))
}

fn check_tol(tol: f64) -> Result<(), Cr3bpError> {
    if (1e-13..=1e-6).contains(&tol) {
        Ok(())
    } else {
        Err(Cr3bpError::Domain {
            what: "tolerance",
            why: format!("{tol} outside [1e-13, 1e-6]"),
        })
    }
}

/// Second partials of the effective potential; the gravity-gradient block
/// of the variational equations.
pub(crate) fn potential_hessian(pos: &[f64; 3], mu: f64) -> Matrix3<f64> {
    let r1 = [pos[0] + mu, pos[1], pos[2]];
    let r2 = [pos[0] - 1.0 + mu, pos[1], pos[2]];
    let rho1 = norm3(&r1);
    let rho2 = norm3(&r2);
    let mut g = Matrix3::zeros();
    g[(0, 0)] = 1.0;
    g[(1, 1)] = 1.0;
    for (gm, r, rho) in [(1.0 - mu, r1, rho1), (mu, r2, rho2)] {
        let i3 = gm / (rho * rho * rho);
        let i5 = 3.0 * gm / (rho * rho * rho * rho * rho);
        for a in 0..3 {
            for b in 0..3 {
                let mut v = i5 * r[a] * r[b];
                if a == b {
                    v -= i3;
                }
                g[(a, b)] += v;
            }
        }
    }
    g
}

pub(crate) fn rhs_ballistic6(mu: f64) -> impl Fn(&[f64; 6]) -> [f64; 6] {
    move |y: &[f64; 6]| {
        let pos = [y[0], y[1], y[2]];
        let vel = [y[3], y[4], y[5]];
        let a = accel_natural(&pos, &vel, mu);
        [vel[0], vel[1], vel[2], a[0], a[1], a[2]]
    }
}

/// Ballistic state plus state transition matrix; layout
/// `[q, v, phi_row_major]`.
pub(crate) fn rhs_variational42(mu: f64) -> impl Fn(&[f64; 42]) -> [f64; 42] {
    move |y: &[f64; 42]| {
        let pos = [y[0], y[1], y[2]];
        let vel = [y[3], y[4], y[5]];
        let a = accel_natural(&pos, &vel, mu);
        let g = potential_hessian(&pos, mu);
        let mut dy = [0.0; 42];
        dy[0] = vel[0];
        dy[1] = vel[1];
        dy[2] = vel[2];
        dy[3] = a[0];
        dy[4] = a[1];
        dy[5] = a[2];
        let phi = |r: usize, c: usize| y[6 + 6 * r + c];
        for c in 0..6 {
            // Rows 0..2: d(dq)/dt = dv.
            dy[6 + c] = phi(3, c);
            dy[6 + 6 + c] = phi(4, c);
            dy[6 + 12 + c] = phi(5, c);
            // Rows 3..5: gravity gradient plus Coriolis coupling.
            dy[6 + 18 + c] =
                g[(0, 0)] * phi(0, c) + g[(0, 1)] * phi(1, c) + g[(0, 2)] * phi(2, c)
                    + 2.0 * phi(4, c);
            dy[6 + 24 + c] =
                g[(1, 0)] * phi(0, c) + g[(1, 1)] * phi(1, c) + g[(1, 2)] * phi(2, c)
                    - 2.0 * phi(3, c);
            dy[6 + 30 + c] =
                g[(2, 0)] * phi(0, c) + g[(2, 1)] * phi(1, c) + g[(2, 2)] * phi(2, c);
        }
        dy
    }
}

pub(crate) fn pack42(y6: &[f64; 6]) -> [f64; 42] {
    let mut y = [0.0; 42];
    y[..6].copy_from_slice(y6);
    for i in 0..6 {
        y[6 + 6 * i + i] = 1.0;
    }
    y
}

pub(crate) fn unpack42(y: &[f64; 42]) -> ([f64; 6], Stm) {
    let mut y6 = [0.0; 6];
    y6.copy_from_slice(&y[..6]);
    let mut stm = Stm::zeros();
    for r in 0..6 {
        for c in 0..6 {
            stm[(r, c)] = y[6 + 6 * r + c];
        }
    }
    (y6, stm)
}

/// Ballistic propagation of the state together with its state transition
/// matrix over `elapsed >= 0`.
pub fn propagate_stm(
    s0: &State7,
    elapsed: f64,
    p: &SystemParams,
    tol: f64,
) -> Result<(State7, Stm), Cr3bpError> {
    check_tol(tol)?;
    if !(elapsed >= 0.0 && elapsed.is_finite()) {
        return Err(Cr3bpError::Domain {
            what: "elapsed",
            why: format!("{elapsed}"),
        });
    }
    let mu = p.mu;
    let rhs = rhs_variational42(mu);
    let mut err: Option<Cr3bpError> = None;
    let y = ode::integrate(
        rhs,
        pack42(&s0.to_array6()),
        elapsed,
        StepControl::with_tol(tol),
        |t, y| {
            if err.is_some() {
                return;
            }
            let (rho1, rho2) = primary_distances(&[y[0], y[1], y[2]], mu);
            let rho = rho1.min(rho2);
            if rho < RHO_MIN {
                err = Some(Cr3bpError::Singularity {
                    rho,
                    floor: RHO_MIN,
                    t,
                });
            }
        },
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let (y6, stm) = unpack42(&y);
    Ok((State7::from_array6(&y6, s0.mass_kg), stm))
}
