//! Dormand-Prince 5(4) embedded Runge-Kutta pair for autonomous systems.

use crate::error::{LensError, Result};

pub trait System<const N: usize>: Sync {
    fn rhs(&self, y: &[f64; N]) -> Result<[f64; N]>;
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the fifth- and fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// One step of size `h` from `y`. Returns the fifth-order solution and the
/// embedded error estimate.
pub fn dp5_step<const N: usize, S: System<N> + ?Sized>(sys: &S, y: &[f64; N], h: f64) -> Result<([f64; N], [f64; N])> {
    let k1 = sys.rhs(y)?;
    let k2 = sys.rhs(&combine(y, h, &[(A21, &k1)]))?;
    let k3 = sys.rhs(&combine(y, h, &[(A31, &k1), (A32, &k2)]))?;
    let k4 = sys.rhs(&combine(y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
    let k5 = sys.rhs(&combine(y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
    let k6 = sys.rhs(&combine(y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))?;
    let y5 = combine(y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = sys.rhs(&y5)?;
    let mut err = [0.0; N];
    for i in 0..N {
        err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }
    Ok((y5, err))
}

/// Step-size controller settings.
#[derive(Clone, Copy, Debug)]
pub struct Adaptive {
    pub tol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

/// What the driver should do after an accepted step.
pub enum Control {
    Continue,
    Stop,
}

impl Adaptive {
    pub fn new(tol: f64, scale: f64) -> Self {
        Self { tol, h_init: 0.01 * scale, h_max: 0.1 * scale, max_steps: 20_000_000 }
    }

    fn error_ratio<const N: usize>(&self, y: &[f64; N], y_new: &[f64; N], err: &[f64; N]) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..N {
            let sc = self.tol * (1.0 + y[i].abs().max(y_new[i].abs()));
            r = r.max(err[i].abs() / sc);
        }
        r
    }

    /// Integrate forward from `t = 0` until `t_end` or until `on_step` stops.
    /// `on_step(t_old, h, y_old, y_new)` sees every accepted step and may
    /// modify `y_new` in place. Returns the final time and state.
    pub fn run<const N: usize, S: System<N> + ?Sized>(
        &self,
        sys: &S,
        y0: [f64; N],
        t_end: f64,
        mut on_step: impl FnMut(f64, f64, &[f64; N], &mut [f64; N]) -> Result<Control>,
    ) -> Result<(f64, [f64; N])> {
        let mut t = 0.0;
        let mut y = y0;
        let mut h = self.h_init.min(self.h_max);
        let mut steps = 0usize;
        while t < t_end {
            let h_try = h.min(t_end - t);
            if h_try < 1e-14 * (1.0 + t.abs()) && t_end - t > h_try {
                return Err(LensError::StepFailure(t));
            }
            steps += 1;
            if steps > self.max_steps {
                return Err(LensError::StepFailure(t));
            }
            let (mut y_new, err) = match dp5_step(sys, &y, h_try) {
                Ok(v) => v,
                Err(e @ LensError::OutOfChart(..)) | Err(e @ LensError::NotSpd(..)) => {
                    if h_try > 1e-9 * self.h_max {
                        h = 0.25 * h_try;
                        continue;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let ratio = self.error_ratio(&y, &y_new, &err);
            if !ratio.is_finite() {
                h = 0.2 * h_try;
                continue;
            }
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            if ratio <= 1.0 {
                let control = on_step(t, h_try, &y, &mut y_new)?;
                t += h_try;
                y = y_new;
                h = (h_try * factor).min(self.h_max);
                if let Control::Stop = control {
                    break;
                }
            } else {
                h = h_try * factor;
            }
        }
        Ok((t, y))
    }
}
