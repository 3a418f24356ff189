//! Fixed-step RK4 recorded on a tape, and adaptive Dormand–Prince 5(4) with
//! dense output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IntegratorError {
    #[error("non-finite field value at t = {t} (stage {stage})")]
    NonFinite { t: f64, stage: usize },
    #[error("step size {h:e} underflowed at t = {t}; the problem looks stiff")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t = {t}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("sample times must be strictly increasing and start at t0")]
    BadSampleTimes,
    #[error("field evaluation failed at t = {t}: {message}")]
    Field { t: f64, message: String },
    #[error("invalid integrator setting: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt: f64,
    pub substeps: usize,
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { method: Method::Dopri5, dt: 0.1, substeps: 4, atol: 1e-7, rtol: 1e-9, max_steps: 5_000_000 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), IntegratorError> {
        if !(self.dt > 0.0) {
            return Err(IntegratorError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(IntegratorError::Config("substeps must be at least 1".into()));
        }
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(IntegratorError::Config("tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(IntegratorError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dopri5(&self) -> Dopri5Options {
        Dopri5Options { atol: self.atol, rtol: self.rtol, max_steps: self.max_steps, ..Dopri5Options::default() }
    }
}

fn check_finite(tape: &Tape, v: Var, t: f64, stage: usize) -> Result<(), IntegratorError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(IntegratorError::NonFinite { t, stage })
    }
}

/// Classical RK4 over `dt`, split into `substeps` equal steps, recorded on
/// the tape so the result is differentiable in `u` and the field parameters.
///
/// `field(tape, u, t)` returns `du/dt` with the shape of `u`.
pub fn rk4_step<F>(tape: &mut Tape, u: Var, t: f64, dt: f64, substeps: usize, mut field: F) -> Result<Var, IntegratorError>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var, IntegratorError>,
{
    assert!(substeps >= 1, "substeps must be at least 1");
    let h = dt / substeps as f64;
    let mut u = u;
    for s in 0..substeps {
        let t0 = t + s as f64 * h;
        let k1 = field(tape, u, t0)?;
        check_finite(tape, k1, t0, 1)?;
        let y = tape.scale(k1, 0.5 * h);
        let y = tape.add(u, y);
        let k2 = field(tape, y, t0 + 0.5 * h)?;
        check_finite(tape, k2, t0 + 0.5 * h, 2)?;
        let y = tape.scale(k2, 0.5 * h);
        let y = tape.add(u, y);
        let k3 = field(tape, y, t0 + 0.5 * h)?;
        check_finite(tape, k3, t0 + 0.5 * h, 3)?;
        let y = tape.scale(k3, h);
        let y = tape.add(u, y);
        let k4 = field(tape, y, t0 + h)?;
        check_finite(tape, k4, t0 + h, 4)?;
        let k23 = tape.add(k2, k3);
        let k23 = tape.scale(k23, 2.0);
        let sum = tape.add(k1, k4);
        let sum = tape.add(sum, k23);
        let inc = tape.scale(sum, h / 6.0);
        u = tape.add(u, inc);
    }
    Ok(u)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dopri5Options {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    pub safety: f64,
    /// Bounds on the step ratio `h_new / h`.
    pub min_factor: f64,
    pub max_factor: f64,
    /// PI controller memory exponent.
    pub beta: f64,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Dopri5Options {
            atol: 1e-7,
            rtol: 1e-9,
            max_steps: 5_000_000,
            h0: None,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
            beta: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dopri5Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// Dense output: `y(t + σh) = y + h·Σᵢ kᵢ·(Pᵢ · [σ, σ², σ³, σ⁴])`.
const P: [[f64; 4]; 7] = [
    [1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0],
    [0.0; 4],
    [0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0, 87487479700.0 / 32700410799.0],
    [0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0],
    [0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0, 701980252875.0 / 199316789632.0],
    [0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0],
    [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
];

fn rms_norm(v: &[f64], y0: &[f64], y1: &[f64], opts: &Dopri5Options) -> f64 {
    let n = v.len().max(1) as f64;
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// Integrates `du/dt = field(t, u)` and returns the state at every entry of
/// `sample_times`, whose first element is the initial time.
///
/// `field(t, u, out)` writes the derivative into `out`.
pub fn dopri5_integrate<F>(
    mut field: F,
    u0: &[f64],
    sample_times: &[f64],
    opts: &Dopri5Options,
) -> Result<(Vec<Vec<f64>>, Dopri5Stats), IntegratorError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegratorError>,
{
    if sample_times.is_empty() || sample_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IntegratorError::BadSampleTimes);
    }
    let n = u0.len();
    let t0 = sample_times[0];
    let t_end = *sample_times.last().unwrap();
    let span = t_end - t0;
    let mut out = Vec::with_capacity(sample_times.len());
    out.push(u0.to_vec());
    let mut stats = Dopri5Stats::default();
    if sample_times.len() == 1 || n == 0 {
        out.resize(sample_times.len(), u0.to_vec());
        return Ok((out, stats));
    }

    let mut eval = |t: f64, y: &[f64], k: &mut [f64], stats: &mut Dopri5Stats| -> Result<(), IntegratorError> {
        stats.evaluations += 1;
        field(t, y, k)?;
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(IntegratorError::NonFinite { t, stage: 0 })
        }
    };

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut y = u0.to_vec();
    let mut t = t0;
    eval(t, &y, &mut k[0], &mut stats)?;

    let mut h = match opts.h0 {
        Some(h) => h,
        None => initial_step(&mut eval, t, &y, &k[0], span, opts, &mut stats)?,
    }
    .min(span);

    let expo = 0.2 - opts.beta * 0.75;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut next_sample = 1;
    let mut ytmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut steps = 0usize;

    while next_sample < sample_times.len() {
        if steps >= opts.max_steps {
            return Err(IntegratorError::MaxSteps { t, max_steps: opts.max_steps });
        }
        if h < 1e-14 * span {
            return Err(IntegratorError::StepUnderflow { t, h });
        }
        steps += 1;
        let last = t + h >= t_end || (t_end - (t + h)) < 1e-12 * span;
        if last {
            h = t_end - t;
        }

        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += A[s][j] * k[j][i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            if s == 6 {
                y_new.copy_from_slice(&ytmp);
            }
            eval(t + C[s] * h, &ytmp, &mut k[s], &mut stats)?;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (s, e) in E.iter().enumerate() {
                acc += e * k[s][i];
            }
            err[i] = h * acc;
        }
        let err_norm = rms_norm(&err, &y, &y_new, opts);
        if !err_norm.is_finite() {
            return Err(IntegratorError::NonFinite { t, stage: 0 });
        }

        let fac11 = err_norm.powf(expo);
        if err_norm <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            // dense output for every sample inside (t, t_new]
            while next_sample < sample_times.len() && sample_times[next_sample] <= t_new {
                let ts = sample_times[next_sample];
                if ts == t_new {
                    out.push(y_new.clone());
                } else {
                    let sigma = (ts - t) / h;
                    let pw = [sigma, sigma * sigma, sigma.powi(3), sigma.powi(4)];
                    let mut ys = y.clone();
                    for (s, row) in P.iter().enumerate() {
                        let w: f64 = row.iter().zip(&pw).map(|(a, b)| a * b).sum();
                        if w != 0.0 {
                            for i in 0..n {
                                ys[i] += h * w * k[s][i];
                            }
                        }
                    }
                    out.push(ys);
                }
                next_sample += 1;
            }
            stats.accepted += 1;
            let mut fac = fac11 / fac_old.powf(opts.beta);
            fac = (fac / opts.safety).clamp(1.0 / opts.max_factor, 1.0 / opts.min_factor);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err_norm.max(1e-4);
            last_rejected = false;
            y.copy_from_slice(&y_new);
            t = t_new;
            // first-same-as-last
            let (first, rest) = k.split_at_mut(6);
            first[0].copy_from_slice(&rest[0]);
            h = h_new;
        } else {
            stats.rejected += 1;
            h /= (fac11 / opts.safety).min(1.0 / opts.min_factor);
            last_rejected = true;
        }
    }
    Ok((out, stats))
}

/// Starting step from the two-evaluation heuristic of Hairer, Nørsett and Wanner.
fn initial_step<G>(
    eval: &mut G,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    opts: &Dopri5Options,
    stats: &mut Dopri5Stats,
) -> Result<f64, IntegratorError>
where
    G: FnMut(f64, &[f64], &mut [f64], &mut Dopri5Stats) -> Result<(), IntegratorError>,
{
    let n = y.len() as f64;
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + h0 * f).collect();
    let mut f1 = vec![0.0; y.len()];
    eval(t + h0, &y1, &mut f1, stats)?;
    let d2 = (f1.iter().zip(f0).zip(&sc).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>() / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}
