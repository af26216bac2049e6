//! L1 halo orbits and their stable invariant manifolds.
//!
//! The family is grown without literature seed states: a planar Lyapunov
//! orbit is corrected from the linearization at L1, its amplitude is
//! continued until the out-of-plane multipliers hit the 1:1 resonance,
//! a small out-of-plane step lands on the northern halo branch, and the
//! family is then continued in energy to any requested level. Orbits are
//! memoized per quantized energy so repeated lookups are cheap.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Matrix2, Vector2, Vector6};
use thiserror::Error;

use crate::cr3bp::{
    self, lagrange_points, pack42, potential_hessian, primary_distances, rhs_variational42,
    unpack42, Cr3bpError, State7, Stm, SystemParams,
};
use crate::ode::{Stepper, StepControl};

/// L1 energy as quoted with the halo-energy parameterization.
pub const E_L1: f64 = -1.594;
pub const E_PERT_MIN: f64 = 0.008;
pub const E_PERT_MAX: f64 = 0.095;

/// Default manifold perturbation magnitude (normalized).
pub const EPS_MAG_DEFAULT: f64 = 1e-6;

const CORRECTOR_TOL: f64 = 1e-12;
const CORRECTOR_MAX_ITER: usize = 50;
const Q3_STEP: f64 = 0.005;
const INTEG_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HaloError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaDomain(f64),
    #[error("target energy {target} outside the constructed family range [{lo}, {hi}]")]
    EnergyRange { target: f64, lo: f64, hi: f64 },
    #[error(
        "differential correction did not converge after {iters} iterations (residual {residual:.3e})"
    )]
    CorrectionDiverged { iters: usize, residual: f64 },
    #[error("energy continuation stalled at e={at} targeting {target}")]
    ContinuationStall { at: f64, target: f64 },
    #[error("no plane crossing found within {horizon} time units")]
    NoCrossing { horizon: f64 },
    #[error("no real stable multiplier inside the unit circle (correction failure or bifurcation)")]
    NoStableMultiplier,
    #[error("halo bifurcation not found while scanning the planar family")]
    BifurcationNotFound,
    #[error("family bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("invalid manifold arc spec: {0}")]
    ArcSpec(String),
    #[error(transparent)]
    Dynamics(#[from] Cr3bpError),
}

/// Halo-orbit energy for the conditional parameter `alpha`.
pub fn energy_from_alpha(alpha: f64) -> Result<f64, HaloError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HaloError::AlphaDomain(alpha));
    }
    Ok(E_L1 + E_PERT_MIN + alpha * (E_PERT_MAX - E_PERT_MIN))
}

/// A corrected periodic halo orbit with its monodromy analysis.
#[derive(Debug, Clone)]
pub struct HaloOrbit {
    /// Rotating-frame energy of every state on the orbit.
    pub energy: f64,
    /// Orbital period in normalized time.
    pub period: f64,
    /// Perpendicular q1q3-plane crossing closest to the Earth:
    /// q2 = v1 = v3 = 0.
    pub crossing_state: [f64; 6],
    /// State transition matrix over one period from the crossing.
    pub monodromy: Stm,
    /// Real multiplier with |lambda| < 1.
    pub stable_eigval: f64,
    /// Unit eigenvector of the stable multiplier, oriented toward the
    /// interior (Earth-side) realm: negative q1 component.
    pub stable_eigvec: [f64; 6],
    /// The reciprocal hyperbolic multiplier.
    pub unstable_eigval: f64,
}

/// Parameters picking one point of the stable manifold: phase `t1` along
/// the orbit, backward coast `t2`, perturbation size and branch sign
/// (+1 is the Earth-side branch).
#[derive(Debug, Clone, Copy)]
pub struct ManifoldArcSpec {
    pub t1: f64,
    pub t2: f64,
    pub eps_mag: f64,
    pub branch_sign: f64,
}

impl ManifoldArcSpec {
    pub fn new(t1: f64, t2: f64) -> Self {
        ManifoldArcSpec {
            t1,
            t2,
            eps_mag: EPS_MAG_DEFAULT,
            branch_sign: 1.0,
        }
    }

    fn validate(&self, orbit: &HaloOrbit) -> Result<(), HaloError> {
        if !(self.t1 >= 0.0 && self.t1 < orbit.period) {
            return Err(HaloError::ArcSpec(format!(
                "t1 = {} outside [0, {})",
                self.t1, orbit.period
            )));
        }
        if !(self.t2 >= 0.0 && self.t2.is_finite()) {
            return Err(HaloError::ArcSpec(format!("t2 = {}", self.t2)));
        }
        if !(self.eps_mag >= 0.0) || self.branch_sign.abs() != 1.0 {
            return Err(HaloError::ArcSpec(format!(
                "eps_mag = {}, branch_sign = {}",
                self.eps_mag, self.branch_sign
            )));
        }
        Ok(())
    }
}

/// Result of propagating to the next q2 = 0 crossing.
struct Crossing {
    t: f64,
    /// Full 42-dimensional state (position/velocity plus STM).
    y: [f64; 42],
}

/// Walk the variational system from `y0` until q2 changes sign after
/// `min_time`, then polish the crossing time with safeguarded Newton.
fn next_plane_crossing(
    p: &SystemParams,
    y0: [f64; 42],
    min_time: f64,
    max_time: f64,
    tol: f64,
) -> Result<Crossing, HaloError> {
    let rhs = rhs_variational42(p.mu);
    let ctrl = StepControl::with_tol(tol);
    let mut st = Stepper::new(&rhs, 0.0, y0, ctrl);
    let mut t_prev = st.t;
    let mut y_prev = st.y;
    loop {
        if st.t >= max_time {
            return Err(HaloError::NoCrossing { horizon: max_time });
        }
        st.step(max_time).map_err(Cr3bpError::from)?;
        if t_prev >= min_time && y_prev[1].signum() != st.y[1].signum() {
            break;
        }
        t_prev = st.t;
        y_prev = st.y;
    }

    // Bracketed Newton on q2(tau), re-integrating short spans from the
    // pre-crossing state.
    let (mut lo, mut hi) = (0.0, st.t - t_prev);
    let (q2_lo, q2_hi) = (y_prev[1], st.y[1]);
    let mut tau = lo + (hi - lo) * q2_lo / (q2_lo - q2_hi);
    let mut best = (st.t, st.y);
    for _ in 0..60 {
        let y = crate::ode::integrate(&rhs, y_prev, tau, ctrl, |_, _| {})
            .map_err(Cr3bpError::from)?;
        best = (t_prev + tau, y);
        let g = y[1];
        if g.abs() < 1e-13 {
            break;
        }
        if g.signum() == q2_lo.signum() {
            lo = tau;
        } else {
            hi = tau;
        }
        let newton = tau - g / y[4];
        tau = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(Crossing {
        t: best.0,
        y: best.1,
    })
}

struct HalfPeriodMap {
    t_half: f64,
    /// State at the crossing.
    y: [f64; 6],
    stm: Stm,
    /// Acceleration at the crossing (for crossing-time sensitivities).
    accel: [f64; 3],
}

fn half_period_map(
    p: &SystemParams,
    x0: &[f64; 6],
    t_hint: f64,
) -> Result<HalfPeriodMap, HaloError> {
    let crossing = next_plane_crossing(
        p,
        pack42(x0),
        (0.25 * t_hint).max(0.05),
        6.0 * t_hint.max(0.5),
        INTEG_TOL,
    )?;
    let (y6, stm) = unpack42(&crossing.y);
    let accel = [
        accel_component(&y6, p.mu, 0),
        accel_component(&y6, p.mu, 1),
        accel_component(&y6, p.mu, 2),
    ];
    Ok(HalfPeriodMap {
        t_half: crossing.t,
        y: y6,
        stm,
        accel,
    })
}

fn accel_component(y: &[f64; 6], mu: f64, i: usize) -> f64 {
    let pos = [y[0], y[1], y[2]];
    let vel = [y[3], y[4], y[5]];
    let (rho1, rho2) = primary_distances(&pos, mu);
    let c1 = (1.0 - mu) / (rho1 * rho1 * rho1);
    let c2 = mu / (rho2 * rho2 * rho2);
    match i {
        0 => 2.0 * vel[1] + pos[0] - c1 * (pos[0] + mu) - c2 * (pos[0] - 1.0 + mu),
        1 => -2.0 * vel[0] + pos[1] - c1 * pos[1] - c2 * pos[1],
        _ => -c1 * pos[2] - c2 * pos[2],
    }
}

/// d(component at crossing)/d(initial component), accounting for the
/// crossing-time variation through q2 = 0.
fn crossing_sensitivity(map: &HalfPeriodMap, row: usize, col: usize) -> f64 {
    let fdot = match row {
        3 => map.accel[0],
        5 => map.accel[2],
        _ => unreachable!("only v1/v3 rows are constrained"),
    };
    let v2 = map.y[4];
    map.stm[(row, col)] - (fdot / v2) * map.stm[(1, col)]
}

fn energy6(x: &[f64; 6], p: &SystemParams) -> f64 {
    cr3bp::energy(&State7::from_array6(x, 1.0), p).expect("off-primary state")
}

/// Correct a planar Lyapunov orbit: v2 is adjusted so the half-period
/// crossing is perpendicular (v1 = 0) with q1 held fixed.
fn correct_lyapunov(
    p: &SystemParams,
    q1: f64,
    v2_guess: f64,
    t_hint: f64,
) -> Result<(f64, HalfPeriodMap), HaloError> {
    let mut v2 = v2_guess;
    let mut last_residual = f64::INFINITY;
    for _ in 0..CORRECTOR_MAX_ITER {
        let x0 = [q1, 0.0, 0.0, 0.0, v2, 0.0];
        let map = half_period_map(p, &x0, t_hint)?;
        let v1 = map.y[3];
        last_residual = v1.abs();
        if last_residual < CORRECTOR_TOL {
            return Ok((v2, map));
        }
        v2 -= v1 / crossing_sensitivity(&map, 3, 4);
    }
    Err(HaloError::CorrectionDiverged {
        iters: CORRECTOR_MAX_ITER,
        residual: last_residual,
    })
}

/// Correct a halo orbit holding q3 fixed: (q1, v2) are adjusted so the
/// half-period crossing is perpendicular (v1 = v3 = 0).
fn correct_halo_fixed_q3(
    p: &SystemParams,
    mut q1: f64,
    q3: f64,
    mut v2: f64,
    t_hint: f64,
) -> Result<([f64; 6], HalfPeriodMap), HaloError> {
    let mut last_residual = f64::INFINITY;
    for _ in 0..CORRECTOR_MAX_ITER {
        let x0 = [q1, 0.0, q3, 0.0, v2, 0.0];
        let map = half_period_map(p, &x0, t_hint)?;
        let r = Vector2::new(map.y[3], map.y[5]);
        last_residual = r.amax();
        if last_residual < CORRECTOR_TOL {
            return Ok((x0, map));
        }
        let j = Matrix2::new(
            crossing_sensitivity(&map, 3, 0),
            crossing_sensitivity(&map, 3, 4),
            crossing_sensitivity(&map, 5, 0),
            crossing_sensitivity(&map, 5, 4),
        );
        let delta = j.lu().solve(&r).ok_or(HaloError::CorrectionDiverged {
            iters: 0,
            residual: last_residual,
        })?;
        q1 -= clamp_step(delta[0]);
        v2 -= clamp_step(delta[1]);
    }
    Err(HaloError::CorrectionDiverged {
        iters: CORRECTOR_MAX_ITER,
        residual: last_residual,
    })
}

fn clamp_step(d: f64) -> f64 {
    d.clamp(-0.02, 0.02)
}

fn monodromy(
    p: &SystemParams,
    x0: &[f64; 6],
    period: f64,
) -> Result<(Vector6<f64>, Stm), HaloError> {
    let (s, m) = cr3bp::propagate_stm(&State7::from_array6(x0, 1.0), period, p, INTEG_TOL)?;
    Ok((Vector6::from_row_slice(&s.to_array6()), m))
}

fn power_iterate(m: &Stm) -> (f64, Vector6<f64>) {
    let mut v = Vector6::repeat(1.0 / 6.0f64.sqrt());
    let mut lambda = 0.0;
    for _ in 0..300 {
        let w = m * v;
        let n = w.norm();
        if n == 0.0 {
            break;
        }
        let v_next = w / n;
        let l_next = (m * v_next).dot(&v_next);
        let converged = (l_next - lambda).abs() <= 1e-15 * l_next.abs();
        v = v_next;
        lambda = l_next;
        if converged {
            break;
        }
    }
    (lambda, v)
}

/// Real multiplier of smallest magnitude (< 1) and its unit eigenvector,
/// oriented toward the interior realm.
pub fn stable_direction(orbit: &HaloOrbit) -> Result<(f64, [f64; 6]), HaloError> {
    let m = orbit.monodromy;
    let inv = m.try_inverse().ok_or(HaloError::NoStableMultiplier)?;
    let (lambda_inv, v) = power_iterate(&inv);
    if !lambda_inv.is_finite() || lambda_inv.abs() <= 1.0 {
        return Err(HaloError::NoStableMultiplier);
    }
    let lambda = 1.0 / lambda_inv;
    // v must actually be an eigenvector of the monodromy matrix.
    let res = (m * v - lambda * v).norm();
    if res > 1e-6 {
        return Err(HaloError::NoStableMultiplier);
    }
    let mut vec = [v[0], v[1], v[2], v[3], v[4], v[5]];
    let pivot = if vec[0].abs() > 1e-12 {
        vec[0]
    } else {
        *vec.iter().find(|c| c.abs() > 1e-12).unwrap_or(&1.0)
    };
    if pivot > 0.0 {
        for c in &mut vec {
            *c = -*c;
        }
    }
    Ok((lambda, vec))
}

fn build_orbit(p: &SystemParams, x0: &[f64; 6], t_half: f64) -> Result<HaloOrbit, HaloError> {
    let period = 2.0 * t_half;
    let (y_end, m) = monodromy(p, x0, period)?;
    let x0v = Vector6::from_row_slice(x0);
    let mismatch = (y_end - x0v).norm();
    if mismatch > 1e-9 {
        return Err(HaloError::CorrectionDiverged {
            iters: 0,
            residual: mismatch,
        });
    }
    let (lambda_u, _) = power_iterate(&m);
    let mut orbit = HaloOrbit {
        energy: energy6(x0, p),
        period,
        crossing_state: *x0,
        monodromy: m,
        stable_eigval: 0.0,
        stable_eigvec: [0.0; 6],
        unstable_eigval: lambda_u,
    };
    let (lambda_s, v) = stable_direction(&orbit)?;
    orbit.stable_eigval = lambda_s;
    orbit.stable_eigvec = v;
    Ok(orbit)
}

/// Seed produced once per parameter set: a small halo stepped off the
/// planar family at the vertical 1:1 resonance.
struct FamilySeed {
    x0: [f64; 6],
    t_half: f64,
    energy: f64,
}

fn z_block_trace(m: &Stm) -> f64 {
    m[(2, 2)] + m[(5, 5)]
}

/// Locate the Lyapunov amplitude where the out-of-plane multipliers hit
/// +1 and step off onto the northern halo branch.
fn bootstrap_seed(p: &SystemParams) -> Result<FamilySeed, HaloError> {
    let l1 = lagrange_points(p)?[0][0];
    let g = potential_hessian(&[l1, 0.0, 0.0], p.mu);
    let (gxx, gyy) = (g[(0, 0)], g[(1, 1)]);
    // Planar center frequency from the linearization at L1.
    let b = gxx + gyy - 4.0;
    let s_center = 0.5 * (b - (b * b - 4.0 * gxx * gyy).sqrt());
    let nu = (-s_center).sqrt();
    let kappa = (gxx + nu * nu) / (2.0 * nu);
    let t_hint = std::f64::consts::PI / nu;

    // Grow the planar family until the trace of the vertical block of the
    // monodromy matrix crosses +2.
    let mut ax = 1e-3;
    let dax = 4e-3;
    let mut v2 = kappa * nu * ax;
    let mut prev: Option<(f64, f64, f64)> = None; // (ax, v2, trace - 2)
    let mut bracket = None;
    for _ in 0..80 {
        let (v2c, map) = correct_lyapunov(p, l1 - ax, v2, t_hint)?;
        let x0 = [l1 - ax, 0.0, 0.0, 0.0, v2c, 0.0];
        let (_, m) = monodromy(p, &x0, 2.0 * map.t_half)?;
        let f = z_block_trace(&m) - 2.0;
        if let Some((ax_p, v2_p, f_p)) = prev {
            if f_p.signum() != f.signum() {
                bracket = Some(((ax_p, v2_p, f_p), (ax, v2c, f)));
                break;
            }
        }
        prev = Some((ax, v2c, f));
        v2 = v2c + kappa * nu * dax;
        ax += dax;
    }
    let ((mut ax_lo, mut v2_lo, f_lo), (mut ax_hi, mut v2_hi, _)) =
        bracket.ok_or(HaloError::BifurcationNotFound)?;
    for _ in 0..40 {
        let ax_mid = 0.5 * (ax_lo + ax_hi);
        let v2_guess = 0.5 * (v2_lo + v2_hi);
        let (v2c, map) = correct_lyapunov(p, l1 - ax_mid, v2_guess, t_hint)?;
        let x0 = [l1 - ax_mid, 0.0, 0.0, 0.0, v2c, 0.0];
        let (_, m) = monodromy(p, &x0, 2.0 * map.t_half)?;
        let f = z_block_trace(&m) - 2.0;
        if f.signum() == f_lo.signum() {
            ax_lo = ax_mid;
            v2_lo = v2c;
        } else {
            ax_hi = ax_mid;
            v2_hi = v2c;
        }
        if (ax_hi - ax_lo).abs() < 1e-10 {
            break;
        }
    }

    // Step off the plane: hold a small positive q3 and re-correct.
    let ax_bif = 0.5 * (ax_lo + ax_hi);
    let v2_bif = 0.5 * (v2_lo + v2_hi);
    let mut q3 = 8e-3;
    let mut last = None;
    for _ in 0..6 {
        match correct_halo_fixed_q3(p, l1 - ax_bif, q3, v2_bif, t_hint) {
            Ok((x0, map)) => {
                return Ok(FamilySeed {
                    x0,
                    t_half: map.t_half,
                    energy: energy6(&x0, p),
                });
            }
            Err(e) => {
                last = Some(e);
                q3 *= 1.6;
            }
        }
    }
    Err(last.unwrap_or(HaloError::BifurcationNotFound))
}

/// Memoizing constructor of the northern L1 halo family.
pub struct HaloFamily {
    params: SystemParams,
    seed: OnceLock<Result<FamilySeed, String>>,
    cache: Mutex<BTreeMap<i64, Arc<HaloOrbit>>>,
}

fn quantize(e: f64) -> i64 {
    (e / 1e-12).round() as i64
}

impl HaloFamily {
    pub fn new(params: SystemParams) -> Self {
        HaloFamily {
            params,
            seed: OnceLock::new(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    fn seed(&self) -> Result<&FamilySeed, HaloError> {
        self.seed
            .get_or_init(|| bootstrap_seed(&self.params).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| HaloError::Bootstrap(e.clone()))
    }

    /// Corrected orbit at `alpha` per the halo-energy parameterization.
    pub fn orbit_for_alpha(&self, alpha: f64) -> Result<Arc<HaloOrbit>, HaloError> {
        self.orbit_at_energy(energy_from_alpha(alpha)?)
    }

    /// Corrected orbit with energy within 1e-10 of `target_e`.
    ///
    /// The out-of-plane amplitude q3 is the continuation parameter (it
    /// pins the halo branch; freeing it lets Newton slide back onto the
    /// planar Lyapunov family, which satisfies the same crossing
    /// constraints). Energy is strictly increasing along the branch, so
    /// the target is bracketed in q3 and polished with a safeguarded
    /// secant on e(q3).
    pub fn orbit_at_energy(&self, target_e: f64) -> Result<Arc<HaloOrbit>, HaloError> {
        if let Some(hit) = self.cache.lock().unwrap().get(&quantize(target_e)) {
            return Ok(hit.clone());
        }
        let seed = self.seed()?;
        if target_e < seed.energy - 5e-4 || target_e > E_L1 + 0.2 {
            return Err(HaloError::EnergyRange {
                target: target_e,
                lo: seed.energy - 5e-4,
                hi: E_L1 + 0.2,
            });
        }

        // Start from the nearest cached orbit, falling back to the seed.
        let start = {
            let cache = self.cache.lock().unwrap();
            let below = cache.range(..=quantize(target_e)).next_back();
            let above = cache.range(quantize(target_e)..).next();
            let nearest = match (below, above) {
                (Some((kb, ob)), Some((ka, oa))) => {
                    if (quantize(target_e) - kb).abs() <= (ka - quantize(target_e)).abs() {
                        Some(ob.clone())
                    } else {
                        Some(oa.clone())
                    }
                }
                (Some((_, o)), None) | (None, Some((_, o))) => Some(o.clone()),
                (None, None) => None,
            };
            match nearest {
                Some(o) => Member {
                    q1: o.crossing_state[0],
                    q3: o.crossing_state[2],
                    v2: o.crossing_state[4],
                    t_half: 0.5 * o.period,
                    e: o.energy,
                },
                None => Member {
                    q1: seed.x0[0],
                    q3: seed.x0[2],
                    v2: seed.x0[4],
                    t_half: seed.t_half,
                    e: seed.energy,
                },
            }
        };

        let member = self.continue_to_energy(start, target_e)?;
        let x0 = [member.q1, 0.0, member.q3, 0.0, member.v2, 0.0];
        let orbit = Arc::new(build_orbit(&self.params, &x0, member.t_half)?);
        self.cache
            .lock()
            .unwrap()
            .insert(quantize(target_e), orbit.clone());
        Ok(orbit)
    }

    fn member_at_q3(&self, q3: f64, warm: &Member) -> Result<Member, HaloError> {
        let (x0, map) = correct_halo_fixed_q3(&self.params, warm.q1, q3, warm.v2, warm.t_half)?;
        Ok(Member {
            q1: x0[0],
            q3,
            v2: x0[4],
            t_half: map.t_half,
            e: energy6(&x0, &self.params),
        })
    }

    fn continue_to_energy(&self, start: Member, target_e: f64) -> Result<Member, HaloError> {
        const Q3_MIN: f64 = 3e-3;
        const Q3_MAX: f64 = 0.45;
        if (start.e - target_e).abs() <= 1e-10 {
            return Ok(start);
        }

        // Walk q3 until the target energy is bracketed.
        let dir = (target_e - start.e).signum();
        let mut step = Q3_STEP * dir;
        let mut prev = start;
        let mut stall = 0;
        let bracket = loop {
            let q3_next = (prev.q3 + step).clamp(Q3_MIN, Q3_MAX);
            if q3_next == prev.q3 {
                return Err(HaloError::EnergyRange {
                    target: target_e,
                    lo: prev.e.min(target_e),
                    hi: prev.e.max(target_e),
                });
            }
            match self.member_at_q3(q3_next, &prev) {
                Ok(next) => {
                    if (next.e - target_e) * (prev.e - target_e) <= 0.0 {
                        break (prev, next);
                    }
                    prev = next;
                    stall = 0;
                    step = (step * 1.4).clamp(-2.0 * Q3_STEP, 2.0 * Q3_STEP);
                }
                Err(_) => {
                    step *= 0.5;
                    stall += 1;
                    if stall > 14 {
                        return Err(HaloError::ContinuationStall {
                            at: prev.e,
                            target: target_e,
                        });
                    }
                }
            }
        };

        // Safeguarded secant on e(q3) within the bracket.
        let (mut lo, mut hi) = bracket;
        if lo.q3 > hi.q3 {
            std::mem::swap(&mut lo, &mut hi);
        }
        let mut best = if (lo.e - target_e).abs() < (hi.e - target_e).abs() {
            lo
        } else {
            hi
        };
        for _ in 0..90 {
            if (best.e - target_e).abs() <= 1e-10 {
                return Ok(best);
            }
            let denom = hi.e - lo.e;
            let mut q3_try = if denom.abs() > 1e-15 {
                lo.q3 + (target_e - lo.e) / denom * (hi.q3 - lo.q3)
            } else {
                0.5 * (lo.q3 + hi.q3)
            };
            // Keep strictly inside the bracket.
            let width = hi.q3 - lo.q3;
            if !(q3_try > lo.q3 && q3_try < hi.q3) || width < 1e-15 {
                q3_try = 0.5 * (lo.q3 + hi.q3);
            }
            let trial = self.member_at_q3(q3_try, &best)?;
            if (trial.e - target_e) * (lo.e - target_e) > 0.0 {
                lo = trial;
            } else {
                hi = trial;
            }
            best = if (lo.e - target_e).abs() < (hi.e - target_e).abs() {
                lo
            } else {
                hi
            };
        }
        if (best.e - target_e).abs() <= 1e-10 {
            Ok(best)
        } else {
            Err(HaloError::ContinuationStall {
                at: best.e,
                target: target_e,
            })
        }
    }
}

/// One corrected family member during continuation.
#[derive(Debug, Clone, Copy)]
struct Member {
    q1: f64,
    q3: f64,
    v2: f64,
    t_half: f64,
    e: f64,
}

/// Scratch diagnostic: walk the halo family in q3 and print (q3, e, T).
#[doc(hidden)]
pub fn probe_family(p: &SystemParams) -> Result<(), HaloError> {
    let seed = bootstrap_seed(p)?;
    println!(
        "seed: q1={} q3={} v2={} t_half={} e={}",
        seed.x0[0], seed.x0[2], seed.x0[4], seed.t_half, seed.energy
    );
    let (mut q1, mut v2, mut t_hint) = (seed.x0[0], seed.x0[4], seed.t_half);
    let mut q3 = seed.x0[2];
    for _ in 0..60 {
        match correct_halo_fixed_q3(p, q1, q3, v2, t_hint) {
            Ok((x0, map)) => {
                let e = energy6(&x0, p);
                println!(
                    "q3={:.5} e={:.6} e-eL1={:.6} T={:.4} q1={:.6} v2={:.6}",
                    q3,
                    e,
                    e - E_L1,
                    2.0 * map.t_half,
                    x0[0],
                    x0[4]
                );
                q1 = x0[0];
                v2 = x0[4];
                t_hint = map.t_half;
            }
            Err(e) => {
                println!("q3={q3:.5} FAILED: {e}");
                break;
            }
        }
        q3 += 0.005;
    }
    Ok(())
}

/// One-shot construction of a halo orbit at `target_e`.
pub fn solve_halo(target_e: f64, p: &SystemParams) -> Result<HaloOrbit, HaloError> {
    let family = HaloFamily::new(*p);
    let orbit = family.orbit_at_energy(target_e)?;
    Ok((*orbit).clone())
}

/// On-orbit state and transported stable direction at phase `t1`.
fn orbit_state_and_direction(
    orbit: &HaloOrbit,
    t1: f64,
    p: &SystemParams,
) -> Result<([f64; 6], [f64; 6]), HaloError> {
    let (s, stm) = cr3bp::propagate_stm(
        &State7::from_array6(&orbit.crossing_state, 1.0),
        t1,
        p,
        INTEG_TOL,
    )?;
    let v = stm * Vector6::from_row_slice(&orbit.stable_eigvec);
    let v = v / v.norm();
    Ok((s.to_array6(), [v[0], v[1], v[2], v[3], v[4], v[5]]))
}

/// Terminal boundary state: coast along the orbit for `t1`, nudge along
/// the transported stable direction, then coast backward for `t2`.
pub fn manifold_terminal_state(
    orbit: &HaloOrbit,
    spec: &ManifoldArcSpec,
    p: &SystemParams,
) -> Result<[f64; 6], HaloError> {
    spec.validate(orbit)?;
    let (on_orbit, dir) = orbit_state_and_direction(orbit, spec.t1, p)?;
    let mut perturbed = on_orbit;
    for i in 0..6 {
        perturbed[i] += spec.eps_mag * spec.branch_sign * dir[i];
    }
    if spec.t2 == 0.0 {
        return Ok(perturbed);
    }
    let traj = cr3bp::propagate(
        &State7::from_array6(&perturbed, 1.0),
        &cr3bp::ControlSchedule::ballistic(),
        spec.t2,
        p,
        INTEG_TOL,
        cr3bp::Direction::Backward,
    )?;
    Ok(traj.final_state.to_array6())
}

/// Dense polyline of the backward manifold coast; sample times are
/// non-positive (backward), the last sample is the terminal state.
pub fn manifold_arc(
    orbit: &HaloOrbit,
    spec: &ManifoldArcSpec,
    n_samples: usize,
    p: &SystemParams,
) -> Result<Vec<(f64, [f64; 6])>, HaloError> {
    if n_samples < 2 {
        return Err(HaloError::ArcSpec(format!(
            "n_samples = {n_samples}, need at least 2"
        )));
    }
    spec.validate(orbit)?;
    let (on_orbit, dir) = orbit_state_and_direction(orbit, spec.t1, p)?;
    let mut state = on_orbit;
    for i in 0..6 {
        state[i] += spec.eps_mag * spec.branch_sign * dir[i];
    }
    let mut samples = Vec::with_capacity(n_samples);
    samples.push((0.0, state));
    let dt = spec.t2 / (n_samples - 1) as f64;
    for k in 1..n_samples {
        let traj = cr3bp::propagate(
            &State7::from_array6(&state, 1.0),
            &cr3bp::ControlSchedule::ballistic(),
            dt,
            p,
            INTEG_TOL,
            cr3bp::Direction::Backward,
        )?;
        state = traj.final_state.to_array6();
        samples.push((-(k as f64) * dt, state));
    }
    Ok(samples)
}

/// CSV row for the family export: `alpha,e,period,q1,q3,v2`.
pub fn family_csv_row(alpha: f64, orbit: &HaloOrbit) -> String {
    format!(
        "{alpha},{},{},{},{},{}",
        orbit.energy,
        orbit.period,
        orbit.crossing_state[0],
        orbit.crossing_state[2],
        orbit.crossing_state[4]
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> SystemParams {
        SystemParams::earth_moon()
    }

    fn family() -> &'static HaloFamily {
        static FAMILY: OnceLock<HaloFamily> = OnceLock::new();
        FAMILY.get_or_init(|| HaloFamily::new(SystemParams::earth_moon()))
    }

    #[test]
    fn energy_parameterization_endpoints() {
        assert_relative_eq!(energy_from_alpha(0.0).unwrap(), -1.586, epsilon = 1e-12);
        assert_relative_eq!(energy_from_alpha(1.0).unwrap(), -1.499, epsilon = 1e-12);
        assert_relative_eq!(energy_from_alpha(0.5).unwrap(), -1.5425, epsilon = 1e-12);
        assert!(energy_from_alpha(1.5).is_err());
        assert!(energy_from_alpha(-0.1).is_err());
    }

    #[test]
    fn paper_anchor_halo_period() {
        let orbit = family().orbit_at_energy(E_L1 + 0.01).unwrap();
        assert!(
            (orbit.period - 2.748).abs() / 2.748 < 0.01,
            "period {} vs 2.748",
            orbit.period
        );
    }

    #[test]
    fn corrected_orbit_is_periodic_and_on_energy() {
        let orbit = family().orbit_for_alpha(0.3).unwrap();
        let traj = cr3bp::propagate(
            &State7::from_array6(&orbit.crossing_state, 1.0),
            &cr3bp::ControlSchedule::ballistic(),
            orbit.period,
            &p(),
            1e-12,
            cr3bp::Direction::Forward,
        )
        .unwrap();
        let end = traj.final_state.to_array6();
        let mut err: f64 = 0.0;
        for i in 0..6 {
            err = err.max((end[i] - orbit.crossing_state[i]).abs());
        }
        assert!(err < 1e-9, "periodicity mismatch {err}");
        assert!((energy6(&orbit.crossing_state, &p()) - orbit.energy).abs() < 1e-10);
        // Crossing convention: on the q1q3 plane, Earth side of L1.
        let l1 = lagrange_points(&p()).unwrap()[0][0];
        assert_eq!(orbit.crossing_state[1], 0.0);
        assert!(orbit.crossing_state[0] < l1);
        assert!(orbit.crossing_state[2] > 0.0, "northern branch");
    }

    #[test]
    fn family_amplitude_grows_monotonically() {
        let mut amplitudes = Vec::new();
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let orbit = family().orbit_for_alpha(alpha).unwrap();
            amplitudes.push(orbit.crossing_state[2]);
        }
        for w in amplitudes.windows(2) {
            assert!(w[1] > w[0], "amplitudes not monotone: {amplitudes:?}");
        }
    }

    #[test]
    fn monodromy_spectrum_structure() {
        let orbit = family().orbit_for_alpha(0.2).unwrap();
        // Hyperbolic pair multiplies to one.
        assert_relative_eq!(
            orbit.stable_eigval * orbit.unstable_eigval,
            1.0,
            epsilon = 1e-6
        );
        assert!(orbit.stable_eigval.abs() < 1.0);
        assert!(orbit.unstable_eigval.abs() > 1.0);
        // Trivial multipliers: at least two eigenvalues near +1.
        let m = nalgebra::DMatrix::from_fn(6, 6, |r, c| orbit.monodromy[(r, c)]);
        let eig = m.complex_eigenvalues();
        let near_one = eig
            .iter()
            .filter(|l| (*l - nalgebra::Complex::new(1.0, 0.0)).norm() < 1e-4)
            .count();
        assert!(near_one >= 2, "eigenvalues {eig:?}");
    }

    #[test]
    fn stable_direction_contracts_forward_diverges_backward() {
        let pp = p();
        let orbit = family().orbit_for_alpha(0.2).unwrap();
        let eps = 1e-6;
        let mut perturbed = orbit.crossing_state;
        for i in 0..6 {
            perturbed[i] += eps * orbit.stable_eigvec[i];
        }
        let dist = |a: &[f64; 6], b: &[f64; 6]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let coast = |x0: &[f64; 6], span: f64, dir: cr3bp::Direction| {
            cr3bp::propagate(
                &State7::from_array6(x0, 1.0),
                &cr3bp::ControlSchedule::ballistic(),
                span,
                &pp,
                1e-12,
                dir,
            )
            .unwrap()
            .final_state
            .to_array6()
        };
        // Forward one period: contraction toward the orbit.
        let fwd = coast(&perturbed, orbit.period, cr3bp::Direction::Forward);
        assert!(dist(&fwd, &orbit.crossing_state) < 0.5 * eps);
        // Backward five time units: departure along the manifold.
        let back = coast(&perturbed, 5.0, cr3bp::Direction::Backward);
        let on_orbit_back = coast(&orbit.crossing_state, 5.0, cr3bp::Direction::Backward);
        assert!(dist(&back, &on_orbit_back) > 50.0 * eps);
    }

    #[test]
    fn terminal_state_zero_coast_and_energy() {
        let pp = p();
        let orbit = family().orbit_for_alpha(0.5).unwrap();
        let t1 = 0.37 * orbit.period;

        // t2 = 0 returns the perturbed on-orbit state at phase t1.
        let spec0 = ManifoldArcSpec::new(t1, 0.0);
        let s0 = manifold_terminal_state(&orbit, &spec0, &pp).unwrap();
        let (on_orbit, dir) = orbit_state_and_direction(&orbit, t1, &pp).unwrap();
        for i in 0..6 {
            assert_relative_eq!(
                s0[i],
                on_orbit[i] + EPS_MAG_DEFAULT * dir[i],
                epsilon = 1e-12
            );
        }

        // eps = 0 stays on the periodic orbit: backward t2 from the
        // unperturbed phase point lands at phase t1 - t2 mod period.
        // Backward instability amplifies integrator noise by
        // lambda_u^(t2/T); t2 = 5 keeps the amplified floor well under
        // the 1e-8 invariance threshold.
        let spec_on = ManifoldArcSpec {
            eps_mag: 0.0,
            ..ManifoldArcSpec::new(t1, 5.0)
        };
        let s_on = manifold_terminal_state(&orbit, &spec_on, &pp).unwrap();
        let mut back_phase = (t1 - 5.0) % orbit.period;
        if back_phase < 0.0 {
            back_phase += orbit.period;
        }
        let expect = cr3bp::propagate(
            &State7::from_array6(&orbit.crossing_state, 1.0),
            &cr3bp::ControlSchedule::ballistic(),
            back_phase,
            &pp,
            1e-12,
            cr3bp::Direction::Forward,
        )
        .unwrap()
        .final_state
        .to_array6();
        let d: f64 = s_on
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d < 1e-8, "distance to orbit {d}");

        // Manifold states share the orbit energy to first order.
        let spec = ManifoldArcSpec::new(t1, 6.0);
        let st = manifold_terminal_state(&orbit, &spec, &pp).unwrap();
        assert!((energy6(&st, &pp) - orbit.energy).abs() < 1e-6);
    }

    #[test]
    fn arc_endpoints_and_energy() {
        let pp = p();
        let orbit = family().orbit_for_alpha(0.5).unwrap();
        let spec = ManifoldArcSpec::new(0.2 * orbit.period, 5.5);
        let arc = manifold_arc(&orbit, &spec, 2, &pp).unwrap();
        let terminal = manifold_terminal_state(&orbit, &spec, &pp).unwrap();
        assert_eq!(arc.len(), 2);
        assert_eq!(arc[1].1, terminal, "bit-exact endpoint");

        let arc = manifold_arc(&orbit, &spec, 24, &pp).unwrap();
        for (_, s) in &arc {
            assert!((energy6(s, &pp) - orbit.energy).abs() < 1e-6);
        }
    }

    #[test]
    fn terminal_state_is_continuous_in_t1() {
        let pp = p();
        let orbit = family().orbit_for_alpha(0.4).unwrap();
        let base = ManifoldArcSpec::new(0.3 * orbit.period, 5.0);
        let s = manifold_terminal_state(&orbit, &base, &pp).unwrap();
        let mut prev_change = f64::INFINITY;
        for delta in [1e-3, 5e-4] {
            let spec = ManifoldArcSpec::new(base.t1 + delta, base.t2);
            let s2 = manifold_terminal_state(&orbit, &spec, &pp).unwrap();
            let change: f64 = s
                .iter()
                .zip(&s2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(change < prev_change);
            prev_change = change;
        }
    }
}
