//! PK/PD simulation: one-compartment infusion kinetics driving a cytokine
//! release model with exposure-dependent inhibition and priming.
//!
//! The concentration is available in closed form. The cytokine level `E`
//! and its cumulative exposure `AUC_E` follow
//!
//! ```text
//! dE/dt     = Emax·C^H / (EC50^H + C^H) · (1 − Imax·AUC_E / (IC50/K^(j−1) + AUC_E)) − kdeg·E
//! dAUC_E/dt = E
//! ```
//!
//! where the priming exponent is set by [`Priming`]: by default `J` is the
//! number of administrations in the dosing schedule, fixed for the whole
//! profile, so a truncated regimen reproduces the prefix of the full one.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ode::{self, OdeSettings, Trajectory};
use crate::regimen::{DoseRegimen, RegimenPanel};

pub const N_PARAMS: usize = 9;
pub const PARAM_NAMES: [&str; N_PARAMS] = ["cl", "v", "emax", "ec50", "h", "imax", "ic50", "kdeg", "kprime"];

/// Index of each component in the flat parameter vector.
pub mod idx {
    pub const CL: usize = 0;
    pub const V: usize = 1;
    pub const EMAX: usize = 2;
    pub const EC50: usize = 3;
    pub const H: usize = 4;
    pub const IMAX: usize = 5;
    pub const IC50: usize = 6;
    pub const KDEG: usize = 7;
    pub const KPRIME: usize = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    /// Clearance (L/h).
    pub cl: f64,
    /// Distribution volume (L).
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    /// Maximum cytokine release rate (pg/mL/h).
    pub emax: f64,
    /// Concentration for half-maximal release (ng/mL).
    pub ec50: f64,
    /// Hill coefficient.
    pub h: f64,
    /// Maximal inhibition fraction, in [0, 1).
    pub imax: f64,
    /// Cytokine exposure for half-maximal inhibition (pg/mL·h).
    pub ic50: f64,
    /// Cytokine degradation rate (1/h).
    pub kdeg: f64,
    /// Priming factor.
    pub kprime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualParams {
    pub pk: PkParams,
    pub pd: PdParams,
}

impl IndividualParams {
    /// Fixed effects of the reference blinatumomab-inspired model.
    pub fn reference() -> Self {
        Self {
            pk: PkParams { cl: 1.36, v: 3.4 },
            pd: PdParams {
                emax: 3.59e5,
                ec50: 1.0e4,
                h: 0.92,
                imax: 0.995,
                ic50: 1.82e4,
                kdeg: 0.18,
                kprime: 2.83,
            },
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let (pk, pd) = (&self.pk, &self.pd);
        [
            pk.cl, pk.v, pd.emax, pd.ec50, pd.h, pd.imax, pd.ic50, pd.kdeg, pd.kprime,
        ]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self {
            pk: PkParams { cl: a[0], v: a[1] },
            pd: PdParams {
                emax: a[2],
                ec50: a[3],
                h: a[4],
                imax: a[5],
                ic50: a[6],
                kdeg: a[7],
                kprime: a[8],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if let Some(i) = a.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid(format!("parameter {} must be positive, got {}", PARAM_NAMES[i], a[i]));
        }
        if self.pd.imax >= 1.0 {
            return invalid(format!("imax must be < 1, got {}", self.pd.imax));
        }
        Ok(())
    }

    /// Validation that allows `emax = 0` (used for degenerate test inputs).
    fn validate_for_simulation(&self) -> Result<()> {
        let mut a = self.to_array();
        if a[idx::EMAX] == 0.0 {
            a[idx::EMAX] = 1.0;
        }
        Self::from_array(a).validate()
    }
}

/// Nine named values, one per PK/PD component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "NamedParams", into = "NamedParams")]
pub struct ParamVector(pub [f64; N_PARAMS]);

#[derive(Serialize, Deserialize)]
struct NamedParams {
    cl: f64,
    v: f64,
    emax: f64,
    ec50: f64,
    h: f64,
    imax: f64,
    ic50: f64,
    kdeg: f64,
    kprime: f64,
}

impl From<NamedParams> for ParamVector {
    fn from(n: NamedParams) -> Self {
        ParamVector([n.cl, n.v, n.emax, n.ec50, n.h, n.imax, n.ic50, n.kdeg, n.kprime])
    }
}

impl From<ParamVector> for NamedParams {
    fn from(p: ParamVector) -> Self {
        let a = p.0;
        NamedParams {
            cl: a[0],
            v: a[1],
            emax: a[2],
            ec50: a[3],
            h: a[4],
            imax: a[5],
            ic50: a[6],
            kdeg: a[7],
            kprime: a[8],
        }
    }
}

/// Log-normal variance matching a coefficient of variation exactly.
pub fn omega_from_cv(cv: f64) -> f64 {
    (1.0 + cv * cv).ln()
}

/// Population model: fixed effects, diagonal log-scale random-effect
/// variances and proportional residual error for each observation type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub mu: IndividualParams,
    /// Variances of the log-scale random effects.
    pub omega: ParamVector,
    pub b_pk: f64,
    pub b_pd: f64,
}

impl PopulationParams {
    /// Reference model with the published coefficients of variation.
    pub fn reference() -> Self {
        let cv_percent = [41.9, 0.0, 14.0, 0.0, 3.0, 0.0, 12.0, 13.0, 36.0];
        let mut omega = [0.0; N_PARAMS];
        for (o, cv) in omega.iter_mut().zip(cv_percent) {
            *o = omega_from_cv(cv / 100.0);
        }
        Self {
            mu: IndividualParams::reference(),
            omega: ParamVector(omega),
            b_pk: 0.1,
            b_pd: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mu.validate()?;
        if self.omega.0.iter().any(|o| !(o.is_finite() && *o >= 0.0)) {
            return invalid(format!("omega entries must be >= 0: {:?}", self.omega.0));
        }
        if !(self.b_pk >= 0.0 && self.b_pd >= 0.0) {
            return invalid("residual error SDs must be >= 0");
        }
        Ok(())
    }

    /// Same population without between-subject variability.
    pub fn without_variability(&self) -> Self {
        Self {
            omega: ParamVector([0.0; N_PARAMS]),
            ..*self
        }
    }
}

/// How the priming factor `K` enters the inhibition constant `IC50 / K^(J−1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Priming {
    /// `J` is the fixed number of administrations of the dosing schedule.
    Schedule { administrations: u32 },
    /// `J` is the number of administrations started so far (piecewise constant).
    RunningIndex,
}

impl Default for Priming {
    fn default() -> Self {
        Priming::Schedule { administrations: 7 }
    }
}

/// Simulation settings shared by every profile computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub body_weight_kg: f64,
    pub infusion_hours: f64,
    /// Length of the observation window after the last administration (h).
    pub horizon_hours: f64,
    pub points_per_window: usize,
    pub priming: Priming,
    pub ode: OdeSettings,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            body_weight_kg: 70.0,
            infusion_hours: 4.0,
            horizon_hours: 96.0,
            points_per_window: 200,
            priming: Priming::default(),
            ode: OdeSettings::default(),
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        self.ode.validate()?;
        if !(self.body_weight_kg > 0.0 && self.infusion_hours > 0.0 && self.horizon_hours > 0.0) {
            return invalid("body weight, infusion duration and horizon must be positive");
        }
        if self.points_per_window < 2 {
            return invalid("points_per_window must be >= 2");
        }
        if self.priming == (Priming::Schedule { administrations: 0 }) {
            return invalid("priming schedule needs at least one administration");
        }
        Ok(())
    }
}

/// Concentration (ng/mL) at time `t` by superposition of infusion doses.
pub fn concentration(
    pk: &PkParams,
    regimen: &DoseRegimen,
    body_weight: f64,
    infusion_hours: f64,
    t: f64,
) -> Result<f64> {
    concentration_parts(pk, regimen, body_weight, infusion_hours, t).map(|(c, _)| c)
}

/// Concentration and its derivative with respect to ln(ke) at fixed clearance.
///
/// With `ke = CL/V`: `∂C/∂ln CL = −C + ∂C/∂ln ke` and `∂C/∂ln V = −∂C/∂ln ke`.
pub(crate) fn concentration_parts(
    pk: &PkParams,
    regimen: &DoseRegimen,
    body_weight: f64,
    infusion_hours: f64,
    t: f64,
) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return invalid(format!("time must be nonnegative, got {t}"));
    }
    if !(infusion_hours > 0.0) {
        return invalid("infusion duration must be positive");
    }
    let ke = pk.cl / pk.v;
    let (mut c, mut dc) = (0.0, 0.0);
    for (&dose, &tj) in regimen.doses().iter().zip(regimen.times()) {
        if t <= tj {
            continue;
        }
        let scale = dose * body_weight / infusion_hours / pk.cl;
        let dt = t - tj;
        if dt <= infusion_hours {
            let e = (-ke * dt).exp();
            c += scale * (-(-ke * dt).exp_m1());
            dc += scale * ke * dt * e;
        } else {
            let rise = -(-ke * infusion_hours).exp_m1();
            let decay = (-ke * (dt - infusion_hours)).exp();
            c += scale * rise * decay;
            dc += scale
                * decay
                * (ke * infusion_hours * (-ke * infusion_hours).exp() - rise * ke * (dt - infusion_hours));
        }
    }
    Ok((c, dc))
}

/// Interval on which the concentration is `c_ss + (c0 − c_ss)·exp(−ke (t − start))`
/// and the priming level is constant.
#[derive(Debug, Clone, Copy)]
struct Segment {
    start: f64,
    end: f64,
    c_ss: f64,
    c_amp: f64,
    /// ∂C/∂ln(ke) at `start`, holding clearance fixed.
    dc_dlnk_start: f64,
    ic50_eff: f64,
    exponent: i32,
}

impl Segment {
    /// Concentration and its log-ke derivative at `t`.
    fn conc_parts(&self, ke: f64, t: f64) -> (f64, f64) {
        let tau = t - self.start;
        let e = (-ke * tau).exp();
        let c = self.c_ss + self.c_amp * e;
        (c.max(0.0), (self.dc_dlnk_start - self.c_amp * ke * tau) * e)
    }
}

/// Dense solution of the PD system for one parameter set and regimen.
#[derive(Debug, Clone)]
pub struct PdSolution {
    traj: Trajectory<2>,
    segments: Vec<Segment>,
    ke: f64,
    windows: Vec<(f64, f64)>,
    points_per_window: usize,
}

fn build_segments(
    theta: &IndividualParams,
    regimen: &DoseRegimen,
    settings: &SimSettings,
    t_end: f64,
) -> Result<Vec<Segment>> {
    let pk = &theta.pk;
    let tinf = settings.infusion_hours;
    let mut cuts: Vec<f64> = vec![0.0, t_end];
    for &tj in regimen.times() {
        cuts.push(tj);
        cuts.push(tj + tinf);
    }
    cuts.retain(|&c| c <= t_end);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let mut segs = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let mut rate = 0.0;
        let mut started = 0i32;
        for (&d, &tj) in regimen.doses().iter().zip(regimen.times()) {
            if tj <= a + 1e-9 {
                started += 1;
                if mid < tj + tinf {
                    rate += d * settings.body_weight_kg / tinf;
                }
            }
        }
        let (c0, dc0) = concentration_parts(pk, regimen, settings.body_weight_kg, tinf, a)?;
        let c_ss = rate / pk.cl;
        let exponent = match settings.priming {
            Priming::Schedule { administrations } => administrations as i32 - 1,
            Priming::RunningIndex => (started - 1).max(0),
        };
        let priming = theta.pd.kprime.powi(exponent);
        segs.push(Segment {
            start: a,
            end: b,
            c_ss,
            c_amp: c0 - c_ss,
            dc_dlnk_start: dc0,
            ic50_eff: theta.pd.ic50 / priming,
            exponent,
        });
    }
    Ok(segs)
}

/// Observation windows `[t_j, t_{j+1})`, the last one closing at `t_J + horizon`.
pub fn administration_windows(regimen: &DoseRegimen, horizon: f64) -> Vec<(f64, f64)> {
    let t = regimen.times();
    (0..t.len())
        .map(|j| (t[j], if j + 1 < t.len() { t[j + 1] } else { t[j] + horizon }))
        .collect()
}

impl PdSolution {
    /// Integrates the PD system over the whole regimen plus horizon.
    pub fn solve(theta: &IndividualParams, regimen: &DoseRegimen, settings: &SimSettings) -> Result<Self> {
        let windows = administration_windows(regimen, settings.horizon_hours);
        let t_end = windows.last().map(|w| w.1).unwrap_or(0.0);
        Self::solve_to(theta, regimen, settings, t_end)
    }

    /// Integrates only up to `t_end` (e.g. the last observation time).
    pub(crate) fn solve_to(
        theta: &IndividualParams,
        regimen: &DoseRegimen,
        settings: &SimSettings,
        t_end: f64,
    ) -> Result<Self> {
        theta.validate_for_simulation()?;
        let windows = administration_windows(regimen, settings.horizon_hours);
        let segments = build_segments(theta, regimen, settings, t_end)?;
        let pd = theta.pd;
        let ke = theta.pk.cl / theta.pk.v;
        let ec50_h = pd.ec50.powf(pd.h);

        let mut steps = Vec::with_capacity(64 * regimen.len());
        let mut y = [0.0f64, 0.0];
        let mut h = 0.0;
        for seg in &segments {
            if seg.c_ss == 0.0 && seg.c_amp.abs() < 1e-300 && y[0] == 0.0 {
                // nothing given yet: the state stays at rest
                steps.push(ode::DenseStep::from_constant(seg.start, seg.end - seg.start, y));
                continue;
            }
            let rhs = |t: f64, s: &[f64; 2]| -> [f64; 2] {
                let c = (seg.c_ss + seg.c_amp * (-ke * (t - seg.start)).exp()).max(0.0);
                let stim = if c > 0.0 {
                    let ch = c.powf(pd.h);
                    pd.emax * ch / (ec50_h + ch)
                } else {
                    0.0
                };
                let auc = s[1].max(0.0);
                let inhib = 1.0 - pd.imax * auc / (seg.ic50_eff + auc);
                [stim * inhib - pd.kdeg * s[0], s[0]]
            };
            let (yn, hn) = ode::integrate(&rhs, seg.start, seg.end, y, h, &settings.ode, &mut steps)?;
            y = yn;
            h = hn;
        }
        Ok(Self {
            traj: Trajectory { steps },
            segments,
            ke,
            windows,
            points_per_window: settings.points_per_window,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.traj.t_end()
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let i = self
            .segments
            .partition_point(|s| s.end < t)
            .min(self.segments.len() - 1);
        &self.segments[i]
    }

    pub fn windows(&self) -> &[(f64, f64)] {
        &self.windows
    }

    /// Concentration at `t` (ng/mL).
    pub fn conc(&self, t: f64) -> f64 {
        self.segment_at(t).conc_parts(self.ke, t).0
    }

    /// Cytokine level at `t` (pg/mL), clamped at zero.
    pub fn cytokine(&self, t: f64) -> f64 {
        self.traj.eval(t)[0].max(0.0)
    }

    pub fn auc_e(&self, t: f64) -> f64 {
        self.traj.eval(t)[1]
    }

    /// Maximum cytokine level within each administration window.
    pub fn window_peaks(&self) -> Vec<f64> {
        let n = self.windows.len();
        self.windows
            .iter()
            .enumerate()
            .map(|(j, &(a, b))| self.peak_in(a, b, j + 1 == n))
            .collect()
    }

    fn peak_in(&self, a: f64, b: f64, closed: bool) -> f64 {
        let m = self.points_per_window;
        let denom = if closed { (m - 1) as f64 } else { m as f64 };
        let dt = (b - a) / denom;
        let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
        for i in 0..m {
            let v = self.traj.eval(a + i as f64 * dt)[0];
            if v > best {
                best = v;
                best_i = i;
            }
        }
        let lo = (a + (best_i as f64 - 1.0) * dt).max(a);
        let hi = (a + (best_i as f64 + 1.0) * dt).min(b);
        let refined = crate::optim::golden_section_max(|t| self.traj.eval(t)[0], lo, hi, 1e-9 * b.max(1.0));
        best.max(refined.1).max(0.0)
    }
}

/// Number of states in the sensitivity system: `E`, `AUC_E`, and the
/// derivatives of both with respect to the log of every parameter.
const N_SENS: usize = 2 + 2 * N_PARAMS;

/// Cytokine level and its gradient with respect to log-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CytokineSensitivity {
    pub value: f64,
    /// `∂E/∂ln θ_c` in [`PARAM_NAMES`] order.
    pub grad: [f64; N_PARAMS],
}

/// Solves the PD system together with its forward sensitivity equations and
/// evaluates the cytokine level and gradient at `times`.
///
/// The integration stops at the latest requested time.
pub fn cytokine_sensitivities(
    theta: &IndividualParams,
    regimen: &DoseRegimen,
    settings: &SimSettings,
    times: &[f64],
) -> Result<Vec<CytokineSensitivity>> {
    theta.validate_for_simulation()?;
    if times.iter().any(|t| !(*t >= 0.0)) {
        return invalid("sensitivity times must be nonnegative");
    }
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let segments = build_segments(theta, regimen, settings, t_end)?;
    let pd = theta.pd;
    let ke = theta.pk.cl / theta.pk.v;
    let ec50_h = pd.ec50.powf(pd.h);
    let ln_ec50 = pd.ec50.ln();

    let mut steps: Vec<ode::DenseStep<N_SENS>> = Vec::with_capacity(64 * regimen.len());
    let mut y = [0.0f64; N_SENS];
    let mut h = 0.0;
    for seg in &segments {
        if seg.c_ss == 0.0 && seg.c_amp.abs() < 1e-300 && y[0] == 0.0 {
            steps.push(ode::DenseStep::from_constant(seg.start, seg.end - seg.start, y));
            continue;
        }
        let ic = seg.ic50_eff;
        let p = seg.exponent as f64;
        let rhs = |t: f64, s: &[f64; N_SENS]| -> [f64; N_SENS] {
            let (c, dc_dlnk) = seg.conc_parts(ke, t);
            // stimulation and its partial derivatives
            let (stim, ds_dc, ds_dlnec50, ds_dlnh) = if c > 0.0 {
                let u = c.powf(pd.h);
                let d = ec50_h + u;
                let core = pd.emax * u * ec50_h / (d * d);
                (
                    pd.emax * u / d,
                    core * pd.h / c,
                    -core * pd.h,
                    core * pd.h * (c.ln() - ln_ec50),
                )
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            let auc = s[1].max(0.0);
            let denom = ic + auc;
            let q = 1.0 - pd.imax * auc / denom;
            let dq_da = -pd.imax * ic / (denom * denom);
            let dq_dlnic = pd.imax * auc * ic / (denom * denom);

            let dc_dlncl = -c + dc_dlnk;
            let dc_dlnv = -dc_dlnk;
            let direct = [
                ds_dc * dc_dlncl * q,
                ds_dc * dc_dlnv * q,
                stim * q,
                ds_dlnec50 * q,
                ds_dlnh * q,
                stim * (q - 1.0),
                stim * dq_dlnic,
                -pd.kdeg * s[0],
                -p * stim * dq_dlnic,
            ];
            let mut out = [0.0; N_SENS];
            out[0] = stim * q - pd.kdeg * s[0];
            out[1] = s[0];
            let df_da = stim * dq_da;
            for c in 0..N_PARAMS {
                let x = s[2 + c];
                let a = s[2 + N_PARAMS + c];
                out[2 + c] = -pd.kdeg * x + df_da * a + direct[c];
                out[2 + N_PARAMS + c] = x;
            }
            out
        };
        let (yn, hn) = ode::integrate(&rhs, seg.start, seg.end, y, h, &settings.ode, &mut steps)?;
        y = yn;
        h = hn;
    }
    let traj = Trajectory { steps };
    Ok(times
        .iter()
        .map(|&t| {
            let s = traj.eval(t);
            let mut grad = [0.0; N_PARAMS];
            grad.copy_from_slice(&s[2..2 + N_PARAMS]);
            CytokineSensitivity { value: s[0], grad }
        })
        .collect())
}

/// Time grid with simulated concentration, cytokine and cumulative exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdProfile {
    pub grid: Vec<f64>,
    pub conc: Vec<f64>,
    pub cytokine: Vec<f64>,
    pub auc_e: Vec<f64>,
}

impl PdProfile {
    fn from_solution(sol: &PdSolution, extra_times: &[f64]) -> Self {
        let mut grid = Vec::new();
        let first = sol.windows.first().map_or(0.0, |w| w.0);
        if first > 0.0 {
            grid.extend((0..10).map(|i| first * i as f64 / 10.0));
        }
        let n = sol.windows.len();
        for (j, &(a, b)) in sol.windows.iter().enumerate() {
            let m = sol.points_per_window;
            let closed = j + 1 == n;
            let denom = if closed { (m - 1) as f64 } else { m as f64 };
            grid.extend((0..m).map(|i| a + (b - a) * i as f64 / denom));
        }
        grid.extend(extra_times.iter().copied().filter(|t| *t >= 0.0 && *t <= sol.t_end()));
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let conc = grid.iter().map(|&t| sol.conc(t)).collect();
        let (cytokine, auc_e) = grid
            .iter()
            .map(|&t| {
                let y = sol.traj.eval(t);
                (y[0].max(0.0), y[1])
            })
            .unzip();
        Self {
            grid,
            conc,
            cytokine,
            auc_e,
        }
    }

    /// Linear interpolation of `(conc, cytokine)` at `t`.
    pub fn interpolate(&self, t: f64) -> Result<(f64, f64)> {
        let (first, last) = (self.grid[0], *self.grid.last().unwrap());
        if !(t >= first && t <= last) {
            return invalid(format!("sample time {t} outside profile span [{first}, {last}]"));
        }
        let i = self.grid.partition_point(|&g| g < t);
        if i < self.grid.len() && self.grid[i] == t {
            return Ok((self.conc[i], self.cytokine[i]));
        }
        let (t0, t1) = (self.grid[i - 1], self.grid[i]);
        let w = (t - t0) / (t1 - t0);
        Ok((
            self.conc[i - 1] + w * (self.conc[i] - self.conc[i - 1]),
            self.cytokine[i - 1] + w * (self.cytokine[i] - self.cytokine[i - 1]),
        ))
    }

    /// Writes `time_h,conc_ng_ml,cytokine_pg_ml,auc_e` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_h", "conc_ng_ml", "cytokine_pg_ml", "auc_e"])?;
        for i in 0..self.grid.len() {
            wr.write_record([
                format!("{}", self.grid[i]),
                format!("{}", self.conc[i]),
                format!("{}", self.cytokine[i]),
                format!("{}", self.auc_e[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn simulate_pd(theta: &IndividualParams, regimen: &DoseRegimen, settings: &SimSettings) -> Result<PdProfile> {
    simulate_pd_with_times(theta, regimen, settings, &[])
}

/// Like [`simulate_pd`] with additional grid points (e.g. sampling times).
pub fn simulate_pd_with_times(
    theta: &IndividualParams,
    regimen: &DoseRegimen,
    settings: &SimSettings,
    extra_times: &[f64],
) -> Result<PdProfile> {
    settings.validate()?;
    let sol = PdSolution::solve(theta, regimen, settings)?;
    Ok(PdProfile::from_solution(&sol, extra_times))
}

/// Per-administration cytokine peaks `r_j`, j = 1..J.
pub fn cytokine_peaks(theta: &IndividualParams, regimen: &DoseRegimen, settings: &SimSettings) -> Result<Vec<f64>> {
    Ok(PdSolution::solve(theta, regimen, settings)?.window_peaks())
}

pub fn max_peak(peaks: &[f64]) -> Result<f64> {
    if peaks.is_empty() {
        return invalid("max_peak of an empty peak sequence");
    }
    Ok(peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Draws `θ = μ·exp(η)`, `η ~ N(0, ω)` independently per component.
pub fn sample_individual<R: Rng + ?Sized>(pop: &PopulationParams, rng: &mut R) -> IndividualParams {
    sample_around(&pop.mu, &pop.omega, rng)
}

pub(crate) fn sample_around<R: Rng + ?Sized>(
    mu: &IndividualParams,
    omega: &ParamVector,
    rng: &mut R,
) -> IndividualParams {
    let mut a = mu.to_array();
    for (v, &o) in a.iter_mut().zip(&omega.0) {
        // one normal per component keeps streams aligned across configurations
        let z: f64 = rng.sample(StandardNormal);
        if o > 0.0 {
            *v *= (o.sqrt() * z).exp();
        }
    }
    IndividualParams::from_array(a)
}

/// Times at which concentration and cytokine are measured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub pk_times: Vec<f64>,
    pub pd_times: Vec<f64>,
}

/// Sampling design applied per administration window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingDesign {
    /// Concentration at the end of each infusion.
    pub pk_end_of_infusion: bool,
    /// Concentration at the end of each window (pre-dose trough).
    pub pk_trough: bool,
    /// Cytokine sampling offsets (h) from each administration.
    pub pd_offsets_h: Vec<f64>,
}

impl Default for SamplingDesign {
    fn default() -> Self {
        Self {
            pk_end_of_infusion: true,
            pk_trough: true,
            pd_offsets_h: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
        }
    }
}

impl SamplingDesign {
    pub fn schedule(&self, regimen: &DoseRegimen, settings: &SimSettings) -> SamplingSchedule {
        let mut s = SamplingSchedule::default();
        for (a, b) in administration_windows(regimen, settings.horizon_hours) {
            if self.pk_end_of_infusion && a + settings.infusion_hours <= b {
                s.pk_times.push(a + settings.infusion_hours);
            }
            if self.pk_trough {
                s.pk_times.push(b);
            }
            s.pd_times
                .extend(self.pd_offsets_h.iter().map(|o| a + o).filter(|t| *t <= b));
        }
        s.pk_times.dedup();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedSamples {
    pub pk: Vec<Observation>,
    pub pd: Vec<Observation>,
}

/// Adds proportional residual error `value·(1 + b·ε)` to profile values.
pub fn observe_with_error<R: Rng + ?Sized>(
    profile: &PdProfile,
    schedule: &SamplingSchedule,
    pop: &PopulationParams,
    rng: &mut R,
) -> Result<ObservedSamples> {
    let mut out = ObservedSamples::default();
    for &t in &schedule.pk_times {
        let (c, _) = profile.interpolate(t)?;
        let eps: f64 = rng.sample(StandardNormal);
        out.pk.push(Observation {
            t,
            value: c * (1.0 + pop.b_pk * eps),
        });
    }
    for &t in &schedule.pd_times {
        let (_, e) = profile.interpolate(t)?;
        let eps: f64 = rng.sample(StandardNormal);
        out.pd.push(Observation {
            t,
            value: e * (1.0 + pop.b_pd * eps),
        });
    }
    Ok(out)
}

/// Reference peaks: maximum cytokine peak of each regimen at the fixed effects.
pub fn reference_peaks(pop: &PopulationParams, panel: &RegimenPanel, settings: &SimSettings) -> Result<Vec<f64>> {
    panel
        .regimens()
        .iter()
        .map(|r| max_peak(&cytokine_peaks(&pop.mu, r, settings)?))
        .collect()
}

/// Maximum peak for each parameter draw (used by Monte Carlo loops).
///
/// Draws are processed in parallel; the output order follows `thetas`.
pub fn max_peaks_for(thetas: &[IndividualParams], regimen: &DoseRegimen, settings: &SimSettings) -> Result<Vec<f64>> {
    thetas
        .par_iter()
        .map(|th| max_peak(&cytokine_peaks(th, regimen, settings)?))
        .collect()
}
