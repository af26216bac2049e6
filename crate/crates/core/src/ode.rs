//! Embedded adaptive Runge-Kutta integration on stack-allocated states.
//!
//! The stepper uses Verner's efficient 6(5) pair: nine stages, sixth-order
//! propagation with an embedded fifth-order error estimate, and a FSAL
//! stage (the last stage evaluates the right-hand side at the accepted
//! solution and seeds the next step). States are `[f64; D]` so the hot
//! loop allocates nothing; dimensions used in this crate are 6 (ballistic
//! point state), 7 (point state plus mass), and 42 (state plus state
//! transition matrix).

use thiserror::Error;

const STAGES: usize = 9;

// Verner 6(5) "IIIXb efficient" coefficients.
const A: [[f64; 8]; 9] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.6e-1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        1.923_996_296_296_296_2e-2,
        7.669_337_037_037_037e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [0.35975e-1, 0.0, 0.107925, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        1.318_683_415_233_148_4,
        0.0,
        -5.042_058_063_628_562,
        4.220_674_648_395_414,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -41.872_591_664_327_516,
        0.0,
        159.432_562_163_137_5,
        -122.119_213_565_010_03,
        5.531_743_066_200_054,
        0.0,
        0.0,
        0.0,
    ],
    [
        -54.430_156_935_316_504,
        0.0,
        207.067_251_365_018_48,
        -158.610_813_784_59,
        6.991_816_585_950_242,
        -1.859_723_106_220_323_4e-2,
        0.0,
        0.0,
    ],
    [
        -54.663_741_787_281_98,
        0.0,
        207.952_806_255_389_36,
        -159.288_957_474_499_5,
        7.018_743_740_796_944,
        -1.833_878_590_504_572_2e-2,
        -5.119_484_997_882_099e-4,
        0.0,
    ],
    [
        3.438_957_868_357_036e-2,
        0.0,
        0.0,
        0.258_262_455_563_350_3,
        0.420_937_118_967_353_7,
        4.405_396_469_669_31,
        -176.483_119_024_298_65,
        172.364_133_401_415_07,
    ],
];

const B_HIGH: [f64; 9] = [
    3.438_957_868_357_036e-2,
    0.0,
    0.0,
    0.258_262_455_563_350_3,
    0.420_937_118_967_353_7,
    4.405_396_469_669_31,
    -176.483_119_024_298_65,
    172.364_133_401_415_07,
    0.0,
];

const B_LOW: [f64; 9] = [
    4.909_967_648_382_49e-2,
    0.0,
    0.0,
    0.225_111_222_951_652_42,
    0.469_468_225_302_956_2,
    0.806_579_224_998_886_8,
    0.0,
    -0.607_119_489_177_796,
    5.686_113_944_047_569_6e-2,
];

const ORDER: f64 = 6.0;
const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t={t} (h={h})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t={t}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("non-finite state encountered at t={t}")]
    NonFinite { t: f64 },
}

/// Tolerances and step limits for one integration.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl StepControl {
    /// Control with rtol = atol = `tol` and generous step limits.
    pub fn with_tol(tol: f64) -> Self {
        StepControl {
            rtol: tol,
            atol: tol,
            h_max: 1.0,
            h_min: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

/// One-step-at-a-time adaptive integrator over `t >= t0` (monotone
/// increasing internal time; callers integrate backward by negating the
/// vector field of an autonomous system).
pub struct Stepper<const D: usize, F: FnMut(&[f64; D]) -> [f64; D]> {
    rhs: F,
    pub t: f64,
    pub y: [f64; D],
    /// Derivative at (t, y); FSAL cache.
    pub dy: [f64; D],
    h: f64,
    ctrl: StepControl,
    steps: usize,
}

impl<const D: usize, F: FnMut(&[f64; D]) -> [f64; D]> Stepper<D, F> {
    pub fn new(mut rhs: F, t0: f64, y0: [f64; D], ctrl: StepControl) -> Self {
        let dy = rhs(&y0);
        // Cheap initial step guess; the controller settles within a few steps.
        let mut scale: f64 = 0.0;
        for i in 0..D {
            scale = scale.max(dy[i].abs() / (ctrl.atol + ctrl.rtol * y0[i].abs()).max(1e-300));
        }
        let h = (0.01 / scale.max(1e-4)).clamp(1e-10, ctrl.h_max.min(0.05));
        Stepper {
            rhs,
            t: t0,
            y: y0,
            dy,
            h,
            ctrl,
            steps: 0,
        }
    }

    /// Advance by one accepted step, never stepping past `t_limit`.
    /// Returns the step size actually taken.
    pub fn step(&mut self, t_limit: f64) -> Result<f64, OdeError> {
        let mut k = [[0.0; D]; STAGES];
        loop {
            self.steps += 1;
            if self.steps > self.ctrl.max_steps {
                return Err(OdeError::MaxSteps {
                    t: self.t,
                    max_steps: self.ctrl.max_steps,
                });
            }
            let mut h = self.h.min(self.ctrl.h_max);
            let clipped = self.t + h >= t_limit;
            if clipped {
                h = t_limit - self.t;
            }
            if h <= 0.0 {
                return Ok(0.0);
            }

            k[0] = self.dy;
            for s in 1..STAGES {
                let mut ys = self.y;
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        for i in 0..D {
                            ys[i] += h * a * kj[i];
                        }
                    }
                }
                k[s] = (self.rhs)(&ys);
            }

            let mut y_high = self.y;
            let mut y_low = self.y;
            for (s, ks) in k.iter().enumerate() {
                for i in 0..D {
                    y_high[i] += h * B_HIGH[s] * ks[i];
                    y_low[i] += h * B_LOW[s] * ks[i];
                }
            }

            let mut err: f64 = 0.0;
            for i in 0..D {
                let tol =
                    self.ctrl.atol + self.ctrl.rtol * self.y[i].abs().max(y_high[i].abs());
                err = err.max(((y_high[i] - y_low[i]) / tol).abs());
            }

            if err.is_nan() {
                // Poisoned stage (e.g. singular gravity term); retry smaller.
                self.h = h * MIN_SCALE;
                if self.h < self.ctrl.h_min {
                    return Err(OdeError::NonFinite { t: self.t });
                }
                continue;
            }

            let scale = (SAFETY * err.powf(-1.0 / ORDER)).clamp(MIN_SCALE, MAX_SCALE);
            if err <= 1.0 {
                self.t += h;
                self.y = y_high;
                // FSAL: stage 9 is the derivative at the accepted solution.
                self.dy = k[8];
                if !clipped {
                    self.h = h * scale;
                } else {
                    self.h = (self.h * scale).min(self.ctrl.h_max);
                }
                if !self.y.iter().all(|v| v.is_finite()) {
                    return Err(OdeError::NonFinite { t: self.t });
                }
                return Ok(h);
            }

            self.h = h * scale;
            if self.h < self.ctrl.h_min {
                return Err(OdeError::StepSizeUnderflow { t: self.t, h: self.h });
            }
        }
    }
}

/// Integrate from `t0` to `t0 + span` (span >= 0), invoking `on_step`
/// after every accepted step, and return the final state.
pub fn integrate<const D: usize>(
    rhs: impl FnMut(&[f64; D]) -> [f64; D],
    y0: [f64; D],
    span: f64,
    ctrl: StepControl,
    mut on_step: impl FnMut(f64, &[f64; D]),
) -> Result<[f64; D], OdeError> {
    if span == 0.0 {
        return Ok(y0);
    }
    let mut st = Stepper::new(rhs, 0.0, y0, ctrl);
    let t_end = span;
    while st.t < t_end {
        st.step(t_end)?;
        on_step(st.t, &st.y);
    }
    Ok(st.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let ctrl = StepControl::with_tol(1e-12);
        let y = integrate(|y: &[f64; 1]| [-y[0]], [1.0], 3.0, ctrl, |_, _| {}).unwrap();
        assert_relative_eq!(y[0], (-3.0f64).exp(), max_relative = 1e-11);
    }

    #[test]
    fn harmonic_oscillator_energy_and_phase() {
        let ctrl = StepControl::with_tol(1e-12);
        let y = integrate(
            |y: &[f64; 2]| [y[1], -y[0]],
            [1.0, 0.0],
            10.0 * std::f64::consts::PI,
            ctrl,
            |_, _| {},
        )
        .unwrap();
        // Five full revolutions return to the initial condition.
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-9);
        assert!(y[1].abs() < 1e-9);
    }

    #[test]
    fn observed_convergence_order_is_high() {
        // Fixed-step error on y' = y^2, y(0) = 1/2 over [0,1] must fall
        // as ~h^6 (the exact solution is 1/(2-t)). The step sizes are
        // chosen large enough that truncation dominates rounding.
        let run = |h: f64| {
            let f = |y: f64| y * y;
            let mut k = [0.0f64; STAGES];
            let mut y = 0.5f64;
            let n = (1.0 / h).round() as usize;
            for _ in 0..n {
                for s in 0..STAGES {
                    let mut ys = y;
                    for j in 0..s {
                        ys += h * A[s][j] * k[j];
                    }
                    k[s] = f(ys);
                }
                for (s, ks) in k.iter().enumerate() {
                    y += h * B_HIGH[s] * ks;
                }
            }
            (y - 1.0).abs()
        };
        let e1 = run(0.1);
        let e2 = run(0.05);
        let order = (e1 / e2).log2();
        assert!(order > 5.5, "observed order {order}");
    }

    #[test]
    fn step_limit_is_reported() {
        let ctrl = StepControl {
            max_steps: 3,
            ..StepControl::with_tol(1e-12)
        };
        let r = integrate(|y: &[f64; 1]| [-y[0]], [1.0], 10.0, ctrl, |_, _| {});
        assert!(matches!(r, Err(OdeError::MaxSteps { .. })));
    }

    #[test]
    fn clipping_hits_t_end_exactly() {
        let ctrl = StepControl::with_tol(1e-10);
        let mut last_t = 0.0;
        integrate(
            |y: &[f64; 1]| [y[0].cos()],
            [0.3],
            2.5,
            ctrl,
            |t, _| last_t = t,
        )
        .unwrap();
        assert_eq!(last_t, 2.5);
    }
}
