//! Levenberg–Marquardt least squares and the standard experiment fits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model_name: String,
    pub names: Vec<String>,
    pub params: Vec<f64>,
    /// 1σ from `s² (JᵀJ)⁻¹`.
    pub uncertainties: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Euclidean norm of the residual vector.
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("model {} has no parameter {name}", self.model_name))
    }

    pub fn get(&self, name: &str) -> f64 {
        self.params[self.index(name)]
    }

    pub fn uncertainty(&self, name: &str) -> f64 {
        self.uncertainties[self.index(name)]
    }

    /// `1/rate` for exponential fits.
    pub fn time_constant(&self) -> f64 {
        1.0 / self.get("rate")
    }

    pub fn time_constant_uncertainty(&self) -> f64 {
        let rate = self.get("rate");
        self.uncertainty("rate") / (rate * rate)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("fit did not converge (residual norm {:e})", .best.residual_norm)]
    NoConvergence { best: Box<FitResult> },
    #[error("data are flat; the model is not identifiable")]
    DegenerateData,
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("abscissa must be finite and strictly increasing")]
    InvalidAbscissa,
    #[error("only {0:.2} oscillation periods covered, need 3")]
    InsufficientPeriods(f64),
    #[error("invalid initial guess: {0}")]
    InvalidInit(String),
}

/// Box constraints; infinite entries mean unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }
}

/// A named parametric model `y = predict(params, x)`.
pub struct ModelSpec<'a, F> {
    pub name: &'a str,
    pub params: &'a [&'a str],
    pub predict: F,
}

const MAX_ITERATIONS: usize = 200;
const PARAM_TOL: f64 = 1e-8;
const RESIDUAL_TOL: f64 = 1e-10;

struct Outcome {
    params: Vec<f64>,
    ssr: f64,
    converged: bool,
    iterations: usize,
}

fn residuals<F: Fn(&[f64], f64) -> f64>(f: &F, p: &[f64], x: &[f64], y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().zip(y).map(|(&xi, &yi)| yi - f(p, xi)))
}

fn ssr_of(r: &DVector<f64>) -> f64 {
    let s = r.norm_squared();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Forward-difference Jacobian of the model, stepping inward at upper bounds.
fn jacobian<F: Fn(&[f64], f64) -> f64>(f: &F, p: &[f64], x: &[f64], bounds: &Bounds) -> DMatrix<f64> {
    let base: Vec<f64> = x.iter().map(|&xi| f(p, xi)).collect();
    let mut j = DMatrix::zeros(x.len(), p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let mut h = (1e-6 * p[k].abs()).max(1e-9);
        if p[k] + h > bounds.upper[k] {
            h = -h;
        }
        q[k] = p[k] + h;
        let step = q[k] - p[k];
        for (i, &xi) in x.iter().enumerate() {
            j[(i, k)] = (f(&q, xi) - base[i]) / step;
        }
        q[k] = p[k];
    }
    j
}

fn solve_damped(jtj: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = jtj.nrows();
    let mut a = jtj.clone();
    for i in 0..n {
        let d = jtj[(i, i)];
        a[(i, i)] += lambda * if d > 0.0 { d } else { 1e-12 };
    }
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(g));
    }
    a.svd(true, true).solve(g, 1e-14).ok()
}

fn levenberg_marquardt<F: Fn(&[f64], f64) -> f64>(
    f: &F,
    x: &[f64],
    y: &[f64],
    init: &[f64],
    bounds: &Bounds,
) -> Outcome {
    let mut p = init.to_vec();
    bounds.clamp(&mut p);
    let mut r = residuals(f, &p, x, y);
    let mut ssr = ssr_of(&r);
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if ssr <= 1e-28 * scale {
        return Outcome {
            params: p,
            ssr,
            converged: true,
            iterations: 0,
        };
    }
    let mut lambda = 1e-3;
    for iteration in 1..=MAX_ITERATIONS {
        let j = jacobian(f, &p, x, bounds);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        loop {
            let Some(delta) = solve_damped(&jtj, &g, lambda) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    return Outcome { params: p, ssr, converged: true, iterations: iteration };
                }
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            bounds.clamp(&mut trial);
            let r_trial = residuals(f, &trial, x, y);
            let ssr_trial = ssr_of(&r_trial);
            if ssr_trial < ssr {
                let step: f64 = trial.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let size: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                let drop = (ssr - ssr_trial) / ssr;
                p = trial;
                r = r_trial;
                ssr = ssr_trial;
                lambda = (lambda / 10.0).max(1e-12);
                if step <= PARAM_TOL * (size + PARAM_TOL) || drop < RESIDUAL_TOL || ssr <= 1e-28 * scale {
                    return Outcome { params: p, ssr, converged: true, iterations: iteration };
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent direction left: a numerical stationary point
                return Outcome { params: p, ssr, converged: true, iterations: iteration };
            }
        }
    }
    Outcome {
        params: p,
        ssr,
        converged: false,
        iterations: MAX_ITERATIONS,
    }
}

fn finish<F: Fn(&[f64], f64) -> f64>(
    model: &ModelSpec<F>,
    x: &[f64],
    bounds: &Bounds,
    outcome: Outcome,
) -> FitResult {
    let n = x.len();
    let m = outcome.params.len();
    let j = jacobian(&model.predict, &outcome.params, x, bounds);
    let jtj = j.transpose() * &j;
    let dof = n.saturating_sub(m).max(1) as f64;
    let s2 = outcome.ssr / dof;
    let inv = jtj
        .clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| jtj.clone().pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::zeros(m, m)));
    let cov = inv * s2;
    let cov = (&cov + cov.transpose()) * 0.5;
    let uncertainties = (0..m).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    FitResult {
        model_name: model.name.to_string(),
        names: model.params.iter().map(|s| s.to_string()).collect(),
        params: outcome.params,
        uncertainties,
        covariance: cov,
        residual_norm: outcome.ssr.sqrt(),
        converged: outcome.converged,
        iterations: outcome.iterations,
    }
}

fn check_xy(x: &[f64], y: &[f64], needed: usize) -> Result<(), FitError> {
    if x.len() != y.len() || x.len() < needed {
        return Err(FitError::InsufficientPoints {
            needed,
            got: x.len().min(y.len()),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) || x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FitError::InvalidAbscissa);
    }
    Ok(())
}

/// Start points on a 3-per-axis grid inside the bounds (or around `init`
/// for unbounded axes).
fn start_grid(init: &[f64], bounds: &Bounds) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = init
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
            if lo.is_finite() && hi.is_finite() {
                vec![lo + 0.25 * (hi - lo), lo + 0.5 * (hi - lo), lo + 0.75 * (hi - lo)]
            } else if v == 0.0 {
                vec![-1.0, 0.0, 1.0]
            } else {
                vec![0.3 * v, v, 3.0 * v]
            }
        })
        .collect();
    let mut grid = vec![Vec::new()];
    for axis in &axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    grid.truncate(729);
    grid
}

fn better(a: &Outcome, b: &Outcome) -> bool {
    match a.ssr.total_cmp(&b.ssr) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            a.params.iter().zip(&b.params).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne())
                == Some(std::cmp::Ordering::Less)
        }
    }
}

/// Bounded Levenberg–Marquardt fit with a multi-start fallback when the
/// first start does not converge.
pub fn fit_model<F>(
    model: &ModelSpec<F>,
    x: &[f64],
    y: &[f64],
    init: &[f64],
    bounds: &Bounds,
) -> Result<FitResult, FitError>
where
    F: Fn(&[f64], f64) -> f64 + Sync,
{
    let m = model.params.len();
    check_xy(x, y, m.max(1))?;
    if init.len() != m || bounds.lower.len() != m || bounds.upper.len() != m {
        return Err(FitError::InvalidInit(format!("expected {m} parameters")));
    }
    if init.iter().any(|v| !v.is_finite()) || !bounds.contains(init) {
        return Err(FitError::InvalidInit("initial guess must be finite and inside the bounds".into()));
    }
    let first = levenberg_marquardt(&model.predict, x, y, init, bounds);
    if first.converged {
        return Ok(finish(model, x, bounds, first));
    }
    let outcomes: Vec<Outcome> = start_grid(init, bounds)
        .par_iter()
        .map(|start| levenberg_marquardt(&model.predict, x, y, start, bounds))
        .collect();
    let mut best = first;
    for o in outcomes {
        let improves = o.converged && (!best.converged || better(&o, &best));
        if improves || (!best.converged && better(&o, &best)) {
            best = o;
        }
    }
    let result = finish(model, x, bounds, best);
    if result.converged {
        Ok(result)
    } else {
        Err(FitError::NoConvergence {
            best: Box::new(result),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpMode {
    /// `A·exp(−k x) + B`
    Decay,
    /// `A·(1 − exp(−k x)) + B`
    Recovery,
}

fn exp_basis(mode: ExpMode, k: f64, x: f64) -> f64 {
    match mode {
        ExpMode::Decay => (-k * x).exp(),
        ExpMode::Recovery => 1.0 - (-k * x).exp(),
    }
}

/// Best (A, B) for a fixed rate, and the residual.
fn linear_amplitudes(mode: ExpMode, k: f64, x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let u = exp_basis(mode, k, xi);
        su += u;
        suu += u * u;
        sy += yi;
        suy += u * yi;
    }
    let det = n * suu - su * su;
    if det.abs() < 1e-300 {
        return (0.0, sy / n, f64::INFINITY);
    }
    let a = (n * suy - su * sy) / det;
    let b = (sy - a * su) / n;
    let ssr = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - a * exp_basis(mode, k, xi) - b).powi(2))
        .sum();
    (a, b, ssr)
}

fn is_flat(y: &[f64]) -> bool {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = max.abs().max(min.abs());
    max - min <= 1e-12 * scale || max == min
}

/// Exponential decay or recovery with parameters `amplitude`, `rate`, `offset`.
pub fn fit_exponential(x: &[f64], y: &[f64], mode: ExpMode) -> Result<FitResult, FitError> {
    check_xy(x, y, 5)?;
    if is_flat(y) {
        return Err(FitError::DegenerateData);
    }
    let xs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ys = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let xn: Vec<f64> = x.iter().map(|v| v / xs).collect();
    let yn: Vec<f64> = y.iter().map(|v| v / ys).collect();

    // rate seed from a log grid with the linear parameters projected out
    let mut seed = (f64::INFINITY, 1.0, 0.0, 0.0);
    for i in 0..=120 {
        let k = 10f64.powf(-2.0 + 5.0 * i as f64 / 120.0);
        let (a, b, ssr) = linear_amplitudes(mode, k, &xn, &yn);
        if ssr < seed.0 {
            seed = (ssr, k, a, b);
        }
    }
    let name = match mode {
        ExpMode::Decay => "exponential_decay",
        ExpMode::Recovery => "exponential_recovery",
    };
    let scaled = ModelSpec {
        name,
        params: &["amplitude", "rate", "offset"],
        predict: move |p: &[f64], x: f64| p[0] * exp_basis(mode, p[1], x) + p[2],
    };
    let bounds = Bounds {
        lower: vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY],
        upper: vec![f64::INFINITY; 3],
    };
    let unscale = |mut r: FitResult| {
        let factors = [ys, 1.0 / xs, ys];
        for i in 0..3 {
            r.params[i] *= factors[i];
            r.uncertainties[i] *= factors[i];
            for j in 0..3 {
                r.covariance[(i, j)] *= factors[i] * factors[j];
            }
        }
        r.residual_norm *= ys;
        r
    };
    match fit_model(&scaled, &xn, &yn, &[seed.2, seed.1, seed.3], &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

/// Dominant frequency (cycles per x unit) of the data with its least-squares
/// line removed, from a direct DFT on an oversampled grid.
pub fn dominant_frequency(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len();
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let detrended: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - ym - slope * (a - xm)).collect();
    let (y, mean) = (&detrended[..], 0.0);
    let span = x[n - 1] - x[0];
    let dx = span / (n - 1) as f64;
    let nyquist = 0.5 / dx;
    let df = 1.0 / (8.0 * span);
    let mut best = (0.0, 0.0, 0.0);
    let mut f = df;
    while f <= nyquist {
        let (mut re, mut im) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let arg = 2.0 * std::f64::consts::PI * f * (xi - x[0]);
            re += (yi - mean) * arg.cos();
            im -= (yi - mean) * arg.sin();
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (f, power, im.atan2(re));
        }
        f += df;
    }
    best
}

/// `A·exp(−γx)·cos(2πf x + φ) + B` with parameters `amplitude`,
/// `frequency`, `decay_rate`, `phase`, `offset`.
pub fn fit_damped_sinusoid(x: &[f64], y: &[f64]) -> Result<FitResult, FitError> {
    check_xy(x, y, 8)?;
    if is_flat(y) {
        return Err(FitError::DegenerateData);
    }
    let x0 = x[0];
    let span = x[x.len() - 1] - x0;
    let (f0, power, phase0) = dominant_frequency(x, y);
    let periods = f0 * span;
    if periods < 3.0 {
        return Err(FitError::InsufficientPeriods(periods));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ymax = y.iter().fold(0.0f64, |a, v| a.max((v - mean).abs())).max(f64::MIN_POSITIVE);
    let xn: Vec<f64> = x.iter().map(|v| (v - x0) / span).collect();
    let yn: Vec<f64> = y.iter().map(|v| (v - mean) / ymax).collect();
    let amp0 = 2.0 * power.sqrt() / (x.len() as f64 * ymax);

    let scaled = ModelSpec {
        name: "damped_sinusoid",
        params: &["amplitude", "frequency", "decay_rate", "phase", "offset"],
        predict: |p: &[f64], x: f64| {
            p[0] * (-p[2] * x).exp() * (2.0 * std::f64::consts::PI * p[1] * x + p[3]).cos() + p[4]
        },
    };
    let bounds = Bounds {
        lower: vec![0.0, 0.5 * periods, -5.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        upper: vec![f64::INFINITY, 2.0 * periods, 50.0, f64::INFINITY, f64::INFINITY],
    };
    let init = [amp0.max(1e-6), periods, 0.0, phase0, 0.0];
    let unscale = |mut r: FitResult| {
        // x' = (x − x0)/span, y' = (y − mean)/ymax
        let (a, f, g, ph, b) = (r.params[0], r.params[1], r.params[2], r.params[3], r.params[4]);
        let two_pi = 2.0 * std::f64::consts::PI;
        let phase = ph - two_pi * f * x0 / span;
        let amp = a * ymax * (g * x0 / span).exp();
        r.params = vec![amp, f / span, g / span, phase.rem_euclid(two_pi), b * ymax + mean];
        let factors = [ymax * (g * x0 / span).exp(), 1.0 / span, 1.0 / span, 1.0, ymax];
        for i in 0..5 {
            r.uncertainties[i] *= factors[i];
            for j in 0..5 {
                r.covariance[(i, j)] *= factors[i] * factors[j];
            }
        }
        r.residual_norm *= ymax;
        r
    };
    match fit_model(&scaled, &xn, &yn, &init, &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

/// `exp(−εx)·(A·exp(−γx)·cos(2πf x + φ) + B)`: a damped sinusoid under a
/// common exponential amplitude factor, with parameters `amplitude`,
/// `frequency`, `decay_rate`, `phase`, `offset`, `edge_rate`.
pub fn fit_edged_sinusoid(x: &[f64], y: &[f64]) -> Result<FitResult, FitError> {
    check_xy(x, y, 10)?;
    if is_flat(y) {
        return Err(FitError::DegenerateData);
    }
    let n = x.len() as f64;
    // log-linear estimate of the common factor for positive signals
    let edge0 = if y.iter().all(|v| *v > 0.0) {
        let xm = x.iter().sum::<f64>() / n;
        let lm = y.iter().map(|v| v.ln()).sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b.ln() - lm)).sum();
        -sxy / sxx
    } else {
        0.0
    };
    let flattened: Vec<f64> = x.iter().zip(y).map(|(a, b)| b * (edge0 * a).exp()).collect();
    let seed = match fit_damped_sinusoid(x, &flattened) {
        Ok(r) => r,
        Err(FitError::NoConvergence { best }) => *best,
        Err(e) => return Err(e),
    };
    let x0 = x[0];
    let span = x[x.len() - 1] - x0;
    let ymax = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let xn: Vec<f64> = x.iter().map(|v| (v - x0) / span).collect();
    let yn: Vec<f64> = y.iter().map(|v| v / ymax).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let (a, f, g, ph, b) = (seed.params[0], seed.params[1], seed.params[2], seed.params[3], seed.params[4]);
    let lead = (-edge0 * x0).exp() / ymax;
    let init = [
        a * (-g * x0).exp() * lead,
        f * span,
        g * span,
        ph + two_pi * f * x0,
        b * lead,
        edge0 * span,
    ];
    let scaled = ModelSpec {
        name: "edged_sinusoid",
        params: &["amplitude", "frequency", "decay_rate", "phase", "offset", "edge_rate"],
        predict: |p: &[f64], x: f64| {
            (-p[5] * x).exp() * (p[0] * (-p[2] * x).exp() * (two_pi * p[1] * x + p[3]).cos() + p[4])
        },
    };
    let periods = init[1];
    let bounds = Bounds {
        lower: vec![0.0, 0.5 * periods, -5.0, f64::NEG_INFINITY, f64::NEG_INFINITY, -5.0],
        upper: vec![f64::INFINITY, 2.0 * periods, 50.0, f64::INFINITY, f64::INFINITY, 50.0],
    };
    let unscale = |mut r: FitResult| {
        let (a, f, g, ph, b, e) = (r.params[0], r.params[1], r.params[2], r.params[3], r.params[4], r.params[5]);
        let (fx, gx, ex) = (f / span, g / span, e / span);
        r.params = vec![
            a * ymax * ((gx + ex) * x0).exp(),
            fx,
            gx,
            (ph - two_pi * fx * x0).rem_euclid(two_pi),
            b * ymax * (ex * x0).exp(),
            ex,
        ];
        let factors = [
            ymax * ((gx + ex) * x0).exp(),
            1.0 / span,
            1.0 / span,
            1.0,
            ymax * (ex * x0).exp(),
            1.0 / span,
        ];
        for i in 0..6 {
            r.uncertainties[i] *= factors[i];
            for j in 0..6 {
                r.covariance[(i, j)] *= factors[i] * factors[j];
            }
        }
        r.residual_norm *= ymax;
        r
    };
    match fit_model(&scaled, &xn, &yn, &init, &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

/// `A·exp(−(x/τ)²) + B` with parameters `amplitude`, `tau`, `offset`.
pub fn fit_gaussian_decay(x: &[f64], y: &[f64]) -> Result<FitResult, FitError> {
    check_xy(x, y, 5)?;
    if is_flat(y) {
        return Err(FitError::DegenerateData);
    }
    let xs = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ys = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let xn: Vec<f64> = x.iter().map(|v| v / xs).collect();
    let yn: Vec<f64> = y.iter().map(|v| v / ys).collect();
    let scaled = ModelSpec {
        name: "gaussian_decay",
        params: &["amplitude", "tau", "offset"],
        predict: |p: &[f64], x: f64| p[0] * (-(x / p[1]).powi(2)).exp() + p[2],
    };
    let mut best = (f64::INFINITY, 1.0, 0.0, 0.0);
    for i in 0..=100 {
        let tau = 10f64.powf(-2.0 + 4.0 * i as f64 / 100.0);
        // linear (A, B) for fixed τ
        let u: Vec<f64> = xn.iter().map(|x| (-(x / tau).powi(2)).exp()).collect();
        let n = u.len() as f64;
        let (su, suu) = (u.iter().sum::<f64>(), u.iter().map(|v| v * v).sum::<f64>());
        let (sy, suy) = (yn.iter().sum::<f64>(), u.iter().zip(&yn).map(|(a, b)| a * b).sum::<f64>());
        let det = n * suu - su * su;
        if det.abs() < 1e-300 {
            continue;
        }
        let a = (n * suy - su * sy) / det;
        let b = (sy - a * su) / n;
        let ssr: f64 = u.iter().zip(&yn).map(|(ui, yi)| (yi - a * ui - b).powi(2)).sum();
        if ssr < best.0 {
            best = (ssr, tau, a, b);
        }
    }
    let bounds = Bounds {
        lower: vec![f64::NEG_INFINITY, 1e-6, f64::NEG_INFINITY],
        upper: vec![f64::INFINITY; 3],
    };
    let unscale = |mut r: FitResult| {
        let factors = [ys, xs, ys];
        for i in 0..3 {
            r.params[i] *= factors[i];
            r.uncertainties[i] *= factors[i];
            for j in 0..3 {
                r.covariance[(i, j)] *= factors[i] * factors[j];
            }
        }
        r.residual_norm *= ys;
        r
    };
    match fit_model(&scaled, &xn, &yn, &[best.2, best.1, best.3], &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeShape {
    Exponential,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeComparison {
    pub exponential: FitResult,
    pub gaussian: FitResult,
    pub preferred: EnvelopeShape,
}

impl EnvelopeComparison {
    /// 1/e time of the preferred shape.
    pub fn coherence_time(&self) -> f64 {
        match self.preferred {
            EnvelopeShape::Exponential => self.exponential.time_constant(),
            EnvelopeShape::Gaussian => self.gaussian.get("tau"),
        }
    }
}

/// Fits both envelope shapes and prefers the one with the smaller residual.
pub fn compare_envelopes(x: &[f64], y: &[f64]) -> Result<EnvelopeComparison, FitError> {
    let exponential = fit_exponential(x, y, ExpMode::Decay)?;
    let gaussian = fit_gaussian_decay(x, y)?;
    let preferred = if gaussian.residual_norm < exponential.residual_norm {
        EnvelopeShape::Gaussian
    } else {
        EnvelopeShape::Exponential
    };
    Ok(EnvelopeComparison {
        exponential,
        gaussian,
        preferred,
    })
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edged_sinusoid_round_trip() {
        let x: Vec<f64> = (0..400).map(|i| 5.0 + 0.5 * i as f64).collect();
        let truth = [0.7, 0.031, 0.002, 1.1, 2.0, 0.004];
        let y: Vec<f64> = x
            .iter()
            .map(|&t| {
                (-truth[5] * t).exp()
                    * (truth[0] * (-truth[2] * t).exp() * (2.0 * std::f64::consts::PI * truth[1] * t + truth[3]).cos() + truth[4])
            })
            .collect();
        let r = fit_edged_sinusoid(&x, &y).unwrap();
        for (p, t) in r.params.iter().zip(truth) {
            assert!((p - t).abs() < 1e-6 * t.abs().max(1.0), "{:?}", r.params);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn never_worse_than_init(a in 0.1f64..3.0, k in 0.1f64..5.0, b in -1.0f64..1.0,
                                 ia in 0.1f64..3.0, ik in 0.1f64..5.0, noise_seed in 0u64..1000) {
            let x: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
            let y: Vec<f64> = x.iter().enumerate()
                .map(|(i, t)| a * (-k * t).exp() + b + 0.01 * (((i as u64 * 7919 + noise_seed) % 17) as f64 - 8.0) / 8.0)
                .collect();
            let spec = ModelSpec {
                name: "decay",
                params: &["a", "k", "b"],
                predict: |p: &[f64], x: f64| p[0] * (-p[1] * x).exp() + p[2],
            };
            let init = [ia, ik, 0.0];
            let r0: f64 = x.iter().zip(&y).map(|(&t, &v)| (v - (spec.predict)(&init, t)).powi(2)).sum::<f64>().sqrt();
            let bounds = Bounds { lower: vec![-10.0, 0.0, -10.0], upper: vec![10.0, 50.0, 10.0] };
            let r = match fit_model(&spec, &x, &y, &init, &bounds) {
                Ok(r) => r,
                Err(FitError::NoConvergence { best }) => *best,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(r.residual_norm <= r0 * (1.0 + 1e-12));
            let cov = &r.covariance;
            prop_assert!((cov - cov.transpose()).amax() <= 1e-9 * cov.amax().max(1e-300));
            let eig = cov.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() >= -1e-9 * cov.amax().max(1e-300));
            prop_assert!(r.uncertainties.iter().all(|u| *u >= 0.0));
        }

        #[test]
        fn frequency_invariant_under_affine_y(scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
            let x: Vec<f64> = (0..300).map(|i| i as f64 * 10.0).collect();
            let y: Vec<f64> = x.iter().map(|t| (2.0 * std::f64::consts::PI * 1.54e-3 * t).cos() * (-t / 4000.0).exp()).collect();
            let base = fit_damped_sinusoid(&x, &y).unwrap().get("frequency");
            let y2: Vec<f64> = y.iter().map(|v| scale * v + offset).collect();
            let f = fit_damped_sinusoid(&x, &y2).unwrap().get("frequency");
            prop_assert!((f / base - 1.0).abs() < 0.005);
        }
    }
}
