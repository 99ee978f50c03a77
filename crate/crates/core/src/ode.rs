//! Dormand–Prince 5(4) integrator with continuous output.
//!
//! Right-hand sides are integrated piecewise between caller-supplied
//! breakpoints so that discontinuities (infusion start/stop) never fall
//! inside a step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances and step limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Upper bound on the step size (h).
    pub h_max: f64,
}

impl Default for OdeSettings {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 200_000,
            h_max: 24.0,
        }
    }
}

impl OdeSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.h_max > 0.0) || self.max_steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "ODE tolerances and limits must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn halved(&self) -> Self {
        Self {
            rtol: self.rtol / 2.0,
            atol: self.atol / 2.0,
            ..*self
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its continuous-extension coefficients.
#[derive(Debug, Clone, Copy)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub(crate) fn from_constant(t0: f64, h: f64, y: [f64; N]) -> Self {
        let mut rcont = [[0.0; N]; 5];
        rcont[0] = y;
        Self { t0, h, rcont }
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let theta1 = 1.0 - theta;
        let r = &self.rcont;
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = r[0][i] + theta * (r[1][i] + theta1 * (r[2][i] + theta * (r[3][i] + theta1 * r[4][i])));
        }
        y
    }
}

/// Piecewise continuous solution assembled from accepted steps.
#[derive(Debug, Clone)]
pub struct Trajectory<const N: usize> {
    pub steps: Vec<DenseStep<N>>,
}

impl<const N: usize> Trajectory<N> {
    pub fn t_start(&self) -> f64 {
        self.steps.first().map_or(0.0, |s| s.t0)
    }

    pub fn t_end(&self) -> f64 {
        self.steps.last().map_or(0.0, DenseStep::t1)
    }

    fn step_index(&self, t: f64) -> usize {
        // first step whose end is >= t
        let idx = self.steps.partition_point(|s| s.t1() < t);
        idx.min(self.steps.len() - 1)
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        self.steps[self.step_index(t)].eval(t)
    }

    /// Steps overlapping `[a, b]`.
    pub fn steps_in(&self, a: f64, b: f64) -> &[DenseStep<N>] {
        let lo = self.step_index(a);
        let hi = self.steps.partition_point(|s| s.t0 < b).max(lo + 1);
        &self.steps[lo..hi.min(self.steps.len())]
    }
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] += h * acc;
    }
    out
}

fn finite<const N: usize>(y: &[f64; N]) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Integrates `rhs` from `t0` to `t1`, appending accepted steps to `out`.
///
/// `h_init` is the suggested first step; the suggested next step is returned
/// alongside the final state.
pub fn integrate<const N: usize, F>(
    rhs: &F,
    t0: f64,
    t1: f64,
    y0: [f64; N],
    h_init: f64,
    settings: &OdeSettings,
    out: &mut Vec<DenseStep<N>>,
) -> Result<([f64; N], f64)>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    if t1 <= t0 {
        return Ok((y0, h_init));
    }
    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y);
    let span = t1 - t0;
    let mut h = if h_init > 0.0 {
        h_init
    } else {
        initial_step(rhs, t, &y, &k1, settings)
    };
    h = h.min(settings.h_max).min(span);
    let mut steps = 0usize;
    let mut last_rejected = false;

    while t < t1 {
        steps += 1;
        if steps > settings.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("exceeded {} steps", settings.max_steps),
            });
        }
        // land exactly on the breakpoint
        if t + 1.01 * h >= t1 {
            h = t1 - t;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) * 4.0 {
            return Err(Error::Integration {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }

        let k2 = rhs(t + C2 * h, &axpy(&y, h, &[(A21, &k1)]));
        let k3 = rhs(t + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = rhs(t + C4 * h, &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = rhs(
            t + C5 * h,
            &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let tn = if t + h >= t1 { t1 } else { t + h };
        let k6 = rhs(
            tn,
            &axpy(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let yn = axpy(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = rhs(tn, &yn);

        if !finite(&yn) || !finite(&k7) {
            h *= 0.25;
            last_rejected = true;
            continue;
        }

        let mut err = 0.0;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = settings.atol + settings.rtol * y[i].abs().max(yn[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / N as f64).sqrt();

        if err <= 1.0 {
            let mut rcont = [[0.0; N]; 5];
            for i in 0..N {
                let ydiff = yn[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                rcont[0][i] = y[i];
                rcont[1][i] = ydiff;
                rcont[2][i] = bspl;
                rcont[3][i] = ydiff - h * k7[i] - bspl;
                rcont[4][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            out.push(DenseStep { t0: t, h, rcont });
            t = tn;
            y = yn;
            k1 = k7;
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = (h * fac).min(settings.h_max);
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            h *= fac;
            last_rejected = true;
        }
    }
    Ok((y, h))
}

fn initial_step<const N: usize, F>(rhs: &F, t: f64, y: &[f64; N], f0: &[f64; N], settings: &OdeSettings) -> f64
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let sc: Vec<f64> = y.iter().map(|v| settings.atol + settings.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, h0, &[(1.0, f0)]);
    let f1 = rhs(t + h0, &y1);
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / N as f64)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(settings.h_max)
}
