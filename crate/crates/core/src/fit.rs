//! Calibration of (⟨N⟩, E_vac0, S) from deconvolved scan data by
//! least squares on `χ² = Σ (y_i − S n_i)²`.
//!
//! The scale `S` enters linearly and is eliminated in closed form at every
//! evaluation; the remaining two parameters are searched on a log-spaced
//! grid and refined with a Nelder–Mead simplex in log space.

use serde::Serialize;

use crate::ensemble::{AveragedPump, PumpBase};
use crate::error::{Error, Result};
use crate::kinetics::{self, linear_regime_output, GainSource};
use crate::linalg;
use crate::physics::V_PER_CM_TO_V_PER_M;

pub const DEFAULT_U_MIN: f64 = 0.5;
pub const DEFAULT_U_MAX: f64 = 1.0;
pub const DEFAULT_GRID: usize = 21;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_EVALUATIONS: usize = 5000;
/// Relative rms misfit above which a fit is flagged as poor when no count
/// statistics are known.
pub const DEFAULT_POOR_FIT: f64 = 0.05;
/// Poisson-normalized χ²/dof above which a fit is flagged as poor.
pub const DEFAULT_POOR_REDUCED_CHI2: f64 = 4.0;
/// Data whose relative spread inside the window is below this carry no
/// shape information.
const FLAT_DATA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitPoint {
    pub u: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain sum of squared residuals.
    #[default]
    Uniform,
    /// Residuals weighted by `1 / y_i`.
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchRanges {
    pub mean_atoms: (f64, f64),
    /// V/m
    pub e_vac0: (f64, f64),
}

impl Default for SearchRanges {
    fn default() -> Self {
        SearchRanges {
            mean_atoms: (0.01, 10.0),
            e_vac0: (0.1 * V_PER_CM_TO_V_PER_M, 10.0 * V_PER_CM_TO_V_PER_M),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitProblem {
    pub points: Vec<FitPoint>,
    /// Fixed physics and beam; its `mean_atoms` and `e_vac0` are ignored.
    pub base: PumpBase,
    pub window: (f64, f64),
    pub ranges: SearchRanges,
    pub weighting: Weighting,
    pub grid: usize,
    pub tolerance: f64,
    pub max_evaluations: usize,
    /// Detector counts per unit of `y`, for example `dwell · 1000` when `y`
    /// is in kcps. Enables the Poisson-normalized misfit statistic.
    pub counts_per_unit: Option<f64>,
    pub poor_fit_threshold: f64,
    pub poor_reduced_chi2: f64,
}

impl FitProblem {
    pub fn new(points: Vec<FitPoint>, base: PumpBase) -> Self {
        FitProblem {
            points,
            base,
            window: (DEFAULT_U_MIN, DEFAULT_U_MAX),
            ranges: SearchRanges::default(),
            weighting: Weighting::Uniform,
            grid: DEFAULT_GRID,
            tolerance: DEFAULT_TOLERANCE,
            max_evaluations: DEFAULT_MAX_EVALUATIONS,
            counts_per_unit: None,
            poor_fit_threshold: DEFAULT_POOR_FIT,
            poor_reduced_chi2: DEFAULT_POOR_REDUCED_CHI2,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ranges.mean_atoms;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::invalid("mean_atoms range", format!("need 0 < lo < hi, got ({lo}, {hi})")));
        }
        let (lo, hi) = self.ranges.e_vac0;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::invalid("e_vac0 range", format!("need 0 < lo < hi, got ({lo}, {hi})")));
        }
        if self.grid < 2 {
            return Err(Error::invalid("grid", "need at least 2 points per axis"));
        }
        if self.points.iter().any(|p| !(0.0..=1.0).contains(&p.u) || !p.y.is_finite()) {
            return Err(Error::invalid("points", "u must lie in [0, 1] and y must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub mean_atoms: f64,
    /// V/m
    pub e_vac0: f64,
    pub scale: f64,
    pub sigma_mean_atoms: f64,
    /// V/m
    pub sigma_e_vac0: f64,
    /// Zero when the scale was held.
    pub sigma_scale: f64,
    /// With a held scale: uncertainties of (⟨N⟩, E_vac0) including the
    /// propagated uncertainty of the held scale.
    pub sigma_with_scale: Option<(f64, f64)>,
    pub scale_held: bool,
    pub chi2: f64,
    pub points_used: usize,
    pub dof: usize,
    /// Unweighted `χ² / dof`, in squared data units.
    pub chi2_per_dof: f64,
    /// `Σ (y − S n)² / var / dof` with Poisson variances, when counts per
    /// unit are known.
    pub reduced_chi2: Option<f64>,
    /// `sqrt(χ²/dof) / rms(y)`.
    pub relative_misfit: f64,
    pub poor_fit: bool,
    pub edge: bool,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

/// Points with `u_min <= u <= u_max`.
pub fn validity_filter(points: &[FitPoint], u_min: f64, u_max: f64) -> Vec<FitPoint> {
    points
        .iter()
        .copied()
        .filter(|p| p.u >= u_min && p.u <= u_max)
        .collect()
}

/// Velocity-averaged steady-state ⟨n⟩ at `g = g₀ √u` on the x = 0 slice.
pub fn model_curve(mean_atoms: f64, e_vac0: f64, us: &[f64], base: &PumpBase) -> Result<Vec<f64>> {
    let b = base.with_mean_atoms(mean_atoms).with_e_vac0(e_vac0);
    let g0 = b.params.peak_coupling();
    us.iter()
        .map(|&u| {
            let pump = AveragedPump::velocity_averaged(&b, g0 * u.max(0.0).sqrt())?;
            Ok(kinetics::steady_state(&pump)?.mean())
        })
        .collect()
}

/// Closed-form minimizer `S* = Σ y n / Σ n²`.
pub fn optimal_scale(y: &[f64], n: &[f64]) -> Result<f64> {
    weighted_scale(y, n, None)
}

fn weighted_scale(y: &[f64], n: &[f64], w: Option<&[f64]>) -> Result<f64> {
    let wt = |i: usize| w.map_or(1.0, |w| w[i]);
    let nn: f64 = n.iter().enumerate().map(|(i, v)| wt(i) * v * v).sum();
    if !(nn > 0.0) {
        return Err(Error::FitRefused("model is identically zero".into()));
    }
    let yn: f64 = y.iter().zip(n).enumerate().map(|(i, (a, b))| wt(i) * a * b).sum();
    Ok(yn / nn)
}

pub fn chi_square(y: &[f64], n: &[f64], scale: f64) -> f64 {
    y.iter().zip(n).map(|(a, b)| (a - scale * b).powi(2)).sum()
}

struct Objective<'a> {
    us: Vec<f64>,
    ys: Vec<f64>,
    weights: Option<Vec<f64>>,
    base: &'a PumpBase,
    held_scale: Option<f64>,
    evaluations: usize,
}

impl<'a> Objective<'a> {
    fn new(points: &[FitPoint], base: &'a PumpBase, weighting: Weighting, held_scale: Option<f64>) -> Self {
        let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
        let weights = match weighting {
            Weighting::Uniform => None,
            Weighting::Poisson => {
                let floor = 1e-12 * ys.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
                Some(ys.iter().map(|y| 1.0 / y.max(floor)).collect())
            }
        };
        Objective {
            us: points.iter().map(|p| p.u).collect(),
            ys,
            weights,
            base,
            held_scale,
            evaluations: 0,
        }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// `(χ², S)` at the given parameters; model failures map to `+∞`.
    fn eval(&mut self, mean_atoms: f64, e_vac0: f64) -> (f64, f64) {
        self.evaluations += 1;
        let Ok(n) = model_curve(mean_atoms, e_vac0, &self.us, self.base) else {
            return (f64::INFINITY, 0.0);
        };
        let scale = match self.held_scale {
            Some(s) => s,
            None => weighted_scale(&self.ys, &n, self.weights.as_deref()).unwrap_or(0.0),
        };
        let chi2 = self
            .ys
            .iter()
            .zip(&n)
            .enumerate()
            .map(|(i, (y, m))| self.weight(i) * (y - scale * m).powi(2))
            .sum();
        (chi2, scale)
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

struct Minimum {
    x: [f64; 2],
    f: f64,
}

/// Nelder–Mead in two dimensions on a box. Vertices are clamped into the
/// box. Stops when both the spread of values and the simplex diameter fall
/// below `tol` (relative).
fn nelder_mead(
    mut f: impl FnMut([f64; 2]) -> f64,
    start: [f64; 2],
    step: [f64; 2],
    lo: [f64; 2],
    hi: [f64; 2],
    tol: f64,
    max_evals: usize,
    evals: &mut usize,
) -> Result<Minimum> {
    let clamp = |x: [f64; 2]| [x[0].clamp(lo[0], hi[0]), x[1].clamp(lo[1], hi[1])];
    let mut pts = vec![clamp(start), clamp([start[0] + step[0], start[1]]), clamp([start[0], start[1] + step[1]])];
    if pts[1] == pts[0] {
        pts[1] = clamp([start[0] - step[0], start[1]]);
    }
    if pts[2] == pts[0] {
        pts[2] = clamp([start[0], start[1] - step[1]]);
    }
    let mut vals: Vec<f64> = pts.iter().map(|&p| f(p)).collect();
    *evals += 3;
    loop {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i]).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();

        let spread = (vals[2] - vals[0]).abs();
        let fscale = vals[0].abs().max(f64::MIN_POSITIVE);
        let diam = (1..3)
            .map(|i| (pts[i][0] - pts[0][0]).abs().max((pts[i][1] - pts[0][1]).abs()))
            .fold(0.0, f64::max);
        if (spread <= tol * fscale || vals[0] == 0.0 && spread == 0.0) && diam <= tol {
            return Ok(Minimum { x: pts[0], f: vals[0] });
        }
        if diam <= 1e-3 * tol && spread.is_finite() {
            return Ok(Minimum { x: pts[0], f: vals[0] });
        }
        if *evals >= max_evals {
            return Err(Error::NotConverged { evaluations: *evals });
        }

        let c = [(pts[0][0] + pts[1][0]) / 2.0, (pts[0][1] + pts[1][1]) / 2.0];
        let along = |t: f64| clamp([c[0] + t * (pts[2][0] - c[0]), c[1] + t * (pts[2][1] - c[1])]);
        let xr = along(-1.0);
        let fr = f(xr);
        *evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(xe);
            *evals += 1;
            if fe < fr {
                pts[2] = xe;
                vals[2] = fe;
            } else {
                pts[2] = xr;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            pts[2] = xr;
            vals[2] = fr;
        } else {
            let (xc, fc) = if fr < vals[2] {
                let x = along(-0.5);
                (x, f(x))
            } else {
                let x = along(0.5);
                (x, f(x))
            };
            *evals += 1;
            if fc < vals[2].min(fr) {
                pts[2] = xc;
                vals[2] = fc;
            } else {
                for i in 1..3 {
                    pts[i] = [
                        (pts[0][0] + pts[i][0]) / 2.0,
                        (pts[0][1] + pts[i][1]) / 2.0,
                    ];
                    vals[i] = f(pts[i]);
                    *evals += 1;
                }
            }
        }
    }
}

struct Search {
    mean_atoms: f64,
    e_vac0: f64,
    chi2: f64,
    scale: f64,
    edge: bool,
}

fn search(problem: &FitProblem, obj: &mut Objective) -> Result<Search> {
    let (n_lo, n_hi) = problem.ranges.mean_atoms;
    let (e_lo, e_hi) = problem.ranges.e_vac0;
    let ns = log_grid(n_lo, n_hi, problem.grid);
    let es = log_grid(e_lo, e_hi, problem.grid);
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for (i, &n) in ns.iter().enumerate() {
        for (j, &e) in es.iter().enumerate() {
            let (chi2, _) = obj.eval(n, e);
            if chi2 < best.0 {
                best = (chi2, i, j);
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::FitRefused("model could not be evaluated anywhere on the search grid".into()));
    }
    let lo = [n_lo.ln(), e_lo.ln()];
    let hi = [n_hi.ln(), e_hi.ln()];
    let cell = [
        (hi[0] - lo[0]) / (problem.grid - 1) as f64,
        (hi[1] - lo[1]) / (problem.grid - 1) as f64,
    ];
    let mut x = [ns[best.1].ln(), es[best.2].ln()];
    let mut fbest = best.0;
    let mut step = cell;
    let mut evals = obj.evaluations;
    // restart from the last optimum until it stops moving
    for _ in 0..5 {
        let m = nelder_mead(
            |p| obj.eval(p[0].exp(), p[1].exp()).0,
            x,
            step,
            lo,
            hi,
            problem.tolerance,
            problem.max_evaluations,
            &mut evals,
        )?;
        let moved = (m.x[0] - x[0]).abs().max((m.x[1] - x[1]).abs());
        let improved = m.f < fbest;
        if improved {
            x = m.x;
            fbest = m.f;
        }
        if !improved || moved <= problem.tolerance {
            break;
        }
        step = [cell[0] * 0.1, cell[1] * 0.1];
    }
    obj.evaluations = evals;
    let (chi2, scale) = obj.eval(x[0].exp(), x[1].exp());
    let margin = 1e-3;
    let edge = (0..2).any(|k| x[k] - lo[k] < margin * cell[k] * 10.0 || hi[k] - x[k] < margin * cell[k] * 10.0);
    Ok(Search {
        mean_atoms: x[0].exp(),
        e_vac0: x[1].exp(),
        chi2,
        scale,
        edge,
    })
}

/// Jacobian of the model `S n_i(⟨N⟩, E)` by central differences, columns
/// `(⟨N⟩, E, S)`. Rows are scaled by `sqrt(w_i)`.
fn jacobian(obj: &Objective, mean_atoms: f64, e_vac0: f64, scale: f64) -> Result<Vec<[f64; 3]>> {
    let h_n = 1e-5 * mean_atoms;
    let h_e = 1e-5 * e_vac0;
    let curve = |n: f64, e: f64| model_curve(n, e, &obj.us, obj.base);
    let (np, nm) = (curve(mean_atoms + h_n, e_vac0)?, curve(mean_atoms - h_n, e_vac0)?);
    let (ep, em) = (curve(mean_atoms, e_vac0 + h_e)?, curve(mean_atoms, e_vac0 - h_e)?);
    let n0 = curve(mean_atoms, e_vac0)?;
    Ok((0..obj.us.len())
        .map(|i| {
            let sw = obj.weight(i).sqrt();
            [
                sw * scale * (np[i] - nm[i]) / (2.0 * h_n),
                sw * scale * (ep[i] - em[i]) / (2.0 * h_e),
                sw * n0[i],
            ]
        })
        .collect())
}

fn normal_matrix(j: &[[f64; 3]], cols: &[usize]) -> Vec<Vec<f64>> {
    cols.iter()
        .map(|&a| cols.iter().map(|&b| j.iter().map(|r| r[a] * r[b]).sum()).collect())
        .collect()
}

fn prepare(problem: &FitProblem) -> Result<Vec<FitPoint>> {
    problem.validate()?;
    let used = validity_filter(&problem.points, problem.window.0, problem.window.1);
    if used.len() < 3 {
        return Err(Error::FitRefused(format!(
            "{} points inside the validity window [{}, {}], need at least 3",
            used.len(),
            problem.window.0,
            problem.window.1
        )));
    }
    if used.iter().all(|p| p.y == 0.0) {
        return Err(Error::FitRefused("all data inside the window are zero".into()));
    }
    Ok(used)
}

fn finish(
    problem: &FitProblem,
    used: &[FitPoint],
    obj: &Objective,
    s: &Search,
    held: Option<f64>,
) -> Result<FitResult> {
    let m = used.len();
    let p = if held.is_some() { 2 } else { 3 };
    let mut warnings = Vec::new();
    let dof = m.saturating_sub(p);
    if dof == 0 {
        warnings.push("no degrees of freedom; uncertainties use one".into());
    }
    let s2 = s.chi2 / dof.max(1) as f64;
    let j = jacobian(obj, s.mean_atoms, s.e_vac0, s.scale)?;
    let cols: &[usize] = if held.is_some() { &[0, 1] } else { &[0, 1, 2] };
    let cov = linalg::invert(&normal_matrix(&j, cols))
        .ok_or_else(|| Error::FitRefused("parameters are not identifiable from these data".into()))?;
    let sig = |k: usize| (s2 * cov[k][k]).max(0.0).sqrt();
    let sigma_scale = if held.is_some() { 0.0 } else { sig(2) };

    let ys: Vec<f64> = used.iter().map(|p| p.y).collect();
    let rms_y = (ys.iter().map(|y| y * y).sum::<f64>() / m as f64).sqrt();
    let rms_res = if matches!(problem.weighting, Weighting::Uniform) {
        s2.sqrt()
    } else {
        let n = model_curve(s.mean_atoms, s.e_vac0, &obj.us, obj.base)?;
        (chi_square(&ys, &n, s.scale) / dof.max(1) as f64).sqrt()
    };
    let relative_misfit = if rms_y > 0.0 { rms_res / rms_y } else { 0.0 };
    let n_fit = model_curve(s.mean_atoms, s.e_vac0, &obj.us, obj.base)?;
    let chi2_plain = chi_square(&ys, &n_fit, s.scale);
    let reduced_chi2 = problem.counts_per_unit.map(|c| {
        let floor = 1.0 / c;
        ys.iter()
            .zip(&n_fit)
            .map(|(y, n)| (y - s.scale * n).powi(2) * c / (s.scale * n).max(*y).max(floor))
            .sum::<f64>()
            / dof.max(1) as f64
    });
    let mut poor_fit = match reduced_chi2 {
        Some(r) => r > problem.poor_reduced_chi2,
        None => relative_misfit > problem.poor_fit_threshold,
    };
    if poor_fit {
        warnings.push(match reduced_chi2 {
            Some(r) => format!("poor fit: Poisson-normalized chi2/dof = {r:.3e}"),
            None => format!("poor fit: rms residual is {:.1}% of the rms signal", 100.0 * relative_misfit),
        });
    }
    let (y_min, y_max) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if y_max - y_min <= FLAT_DATA * y_max.abs().max(y_min.abs()) {
        poor_fit = true;
        warnings.push("degenerate data: no variation with u inside the window".into());
    }
    if s.edge {
        warnings.push("minimum lies at the edge of the search range".into());
    }
    let params = obj.base.params.with_e_vac0(s.e_vac0);
    let floor = params.kappa.max(params.gamma);
    let weak = used
        .iter()
        .filter(|p| params.peak_coupling() * p.u.sqrt() <= floor)
        .count();
    if weak > 0 {
        warnings.push(format!(
            "{weak} of {m} points violate g > max(kappa, gamma) at the fitted field"
        ));
    }
    Ok(FitResult {
        mean_atoms: s.mean_atoms,
        e_vac0: s.e_vac0,
        scale: s.scale,
        sigma_mean_atoms: sig(0),
        sigma_e_vac0: sig(1),
        sigma_scale,
        sigma_with_scale: None,
        scale_held: held.is_some(),
        chi2: s.chi2,
        points_used: m,
        dof,
        chi2_per_dof: chi2_plain / dof.max(1) as f64,
        reduced_chi2,
        relative_misfit,
        poor_fit,
        edge: s.edge,
        evaluations: obj.evaluations,
        warnings,
    })
}

/// Three-parameter fit with the scale eliminated analytically.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    let used = prepare(problem)?;
    let mut obj = Objective::new(&used, &problem.base, problem.weighting, None);
    let s = search(problem, &mut obj)?;
    finish(problem, &used, &obj, &s, None)
}

/// Two-parameter fit with the scale held at `scale`. With `scale_sigma`
/// the uncertainty of the held scale is also propagated into
/// [`FitResult::sigma_with_scale`].
pub fn fit_fixed_scale(problem: &FitProblem, scale: f64, scale_sigma: Option<f64>) -> Result<FitResult> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("scale", format!("must be > 0, got {scale}")));
    }
    let used = prepare(problem)?;
    let mut obj = Objective::new(&used, &problem.base, problem.weighting, Some(scale));
    let s = search(problem, &mut obj)?;
    let mut result = finish(problem, &used, &obj, &s, Some(scale))?;
    if let Some(sigma_s) = scale_sigma {
        // dθ/dS = (JᵀJ)⁻¹ Jᵀ n for the two free parameters
        let j = jacobian(&obj, s.mean_atoms, s.e_vac0, scale)?;
        let cov = linalg::invert(&normal_matrix(&j, &[0, 1]))
            .ok_or_else(|| Error::FitRefused("parameters are not identifiable from these data".into()))?;
        let jtn: Vec<f64> = (0..2).map(|a| j.iter().map(|r| r[a] * r[2]).sum()).collect();
        let d: Vec<f64> = (0..2).map(|a| (0..2).map(|b| cov[a][b] * jtn[b]).sum()).collect();
        result.sigma_with_scale = Some((
            result.sigma_mean_atoms.hypot(d[0] * sigma_s),
            result.sigma_e_vac0.hypot(d[1] * sigma_s),
        ));
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    /// Closed-form estimate.
    pub mean_atoms: f64,
    pub sigma: f64,
    /// Estimate from the 1D numeric minimizer.
    pub mean_atoms_numeric: f64,
    pub chi2: f64,
    pub points_used: usize,
}

/// Velocity-averaged linear-law output per unit ⟨N⟩, in units of ⟨n⟩:
/// `ξ₁ / (κ ⟨N⟩)` at `g = g₀ √u`.
fn linear_law_coefficients(us: &[f64], e_vac0: f64, base: &PumpBase) -> Result<Vec<f64>> {
    let b = base.with_mean_atoms(1.0).with_e_vac0(e_vac0);
    let g0 = b.params.peak_coupling();
    us.iter()
        .map(|&u| {
            let pump = AveragedPump::velocity_averaged(&b, g0 * u.max(0.0).sqrt())?;
            Ok(linear_regime_output(&pump) / pump.kappa())
        })
        .collect()
}

/// One-parameter fit of ⟨N⟩ with the field and scale held, using the
/// linear law `n_i = ⟨N⟩ a_i`. The closed form `Σ y a / (S Σ a²)` is
/// cross-checked by a golden-section search with a final parabolic step.
pub fn fit_linear_regime_n(problem: &FitProblem, e_vac0: f64, scale: f64) -> Result<LinearFit> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("scale", format!("must be > 0, got {scale}")));
    }
    let used = prepare(problem)?;
    let us: Vec<f64> = used.iter().map(|p| p.u).collect();
    let ys: Vec<f64> = used.iter().map(|p| p.y).collect();
    let a: Vec<f64> = linear_law_coefficients(&us, e_vac0, &problem.base)?
        .into_iter()
        .map(|v| scale * v)
        .collect();
    let closed = optimal_scale(&ys, &a)?;
    let chi2 = |n: f64| chi_square(&ys, &a, n);

    let (lo, hi) = problem.ranges.mean_atoms;
    let numeric = golden_parabolic(chi2, 0.0, 2.0 * hi.max(closed.abs()), 1e-6);
    let m = used.len();
    let s2 = chi2(closed) / m.saturating_sub(1).max(1) as f64;
    let aa: f64 = a.iter().map(|v| v * v).sum();
    if closed < lo || closed > hi {
        return Err(Error::FitRefused(format!(
            "linear-regime estimate {closed:e} lies outside the search range [{lo}, {hi}]"
        )));
    }
    Ok(LinearFit {
        mean_atoms: closed,
        sigma: (s2 / aa).sqrt(),
        mean_atoms_numeric: numeric,
        chi2: chi2(closed),
        points_used: m,
    })
}

/// Golden-section search on `[a, b]` down to relative width `tol`, then one
/// parabolic step through the final bracket.
fn golden_parabolic(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a) > tol * (c.abs() + d.abs()).max(f64::MIN_POSITIVE) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let (x0, x2) = (a, b);
    let x1 = 0.5 * (a + b);
    let (f0, f1, f2) = (f(x0), f(x1), f(x2));
    let denom = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0);
    if denom == 0.0 {
        return x1;
    }
    let num = (x1 - x0).powi(2) * (f1 - f2) - (x1 - x2).powi(2) * (f1 - f0);
    x1 - 0.5 * num / denom
}

/// Fit result at the report boundary, field in V/cm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub mean_atoms: f64,
    pub sigma_mean_atoms: f64,
    pub e_vac0_v_per_cm: f64,
    pub sigma_e_vac0_v_per_cm: f64,
    pub scale: f64,
    pub sigma_scale: f64,
    pub scale_held: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_mean_atoms_with_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_e_vac0_v_per_cm_with_scale: Option<f64>,
    pub chi2: f64,
    pub points_used: usize,
    pub dof: usize,
    pub chi2_per_dof: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_chi2: Option<f64>,
    pub relative_misfit: f64,
    pub poor_fit: bool,
    pub edge: bool,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

impl From<&FitResult> for FitReport {
    fn from(r: &FitResult) -> Self {
        FitReport {
            mean_atoms: r.mean_atoms,
            sigma_mean_atoms: r.sigma_mean_atoms,
            e_vac0_v_per_cm: r.e_vac0 / V_PER_CM_TO_V_PER_M,
            sigma_e_vac0_v_per_cm: r.sigma_e_vac0 / V_PER_CM_TO_V_PER_M,
            scale: r.scale,
            sigma_scale: r.sigma_scale,
            scale_held: r.scale_held,
            sigma_mean_atoms_with_scale: r.sigma_with_scale.map(|s| s.0),
            sigma_e_vac0_v_per_cm_with_scale: r.sigma_with_scale.map(|s| s.1 / V_PER_CM_TO_V_PER_M),
            chi2: r.chi2,
            points_used: r.points_used,
            dof: r.dof,
            chi2_per_dof: r.chi2_per_dof,
            reduced_chi2: r.reduced_chi2,
            relative_misfit: r.relative_misfit,
            poor_fit: r.poor_fit,
            edge: r.edge,
            evaluations: r.evaluations,
            warnings: r.warnings.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::VelocityDistribution;
    use crate::kinetics::{steady_state_product, PumpParams};
    use crate::physics::{interaction_time, PhysicalParams};
    use proptest::prelude::*;

    fn params() -> PhysicalParams {
        PhysicalParams {
            wavelength: 791.1e-9,
            waist: 20e-6,
            kappa: 1.885e6,
            dipole: 2.086e-29,
            e_vac0: 86.0,
            gamma: 3.1e5,
            rho_ee0: 0.86,
        }
    }

    fn base() -> PumpBase {
        PumpBase::new(params(), 1.5, VelocityDistribution::truncated_gaussian(670.0, 67.0, 9).unwrap()).unwrap()
    }

    fn scan_us() -> Vec<f64> {
        let k = params().wavenumber();
        let q = params().wavelength / 4.0;
        (0..41).map(|i| (k * q * i as f64 / 40.0).cos().powi(2)).collect()
    }

    fn synthetic(mean_atoms: f64, e_vac0: f64, scale: f64) -> Vec<FitPoint> {
        let us = scan_us();
        let n = model_curve(mean_atoms, e_vac0, &us, &base()).unwrap();
        us.iter().zip(n).map(|(&u, n)| FitPoint { u, y: scale * n }).collect()
    }

    #[test]
    fn validity_filter_examples() {
        let pts: Vec<FitPoint> = [0.4, 0.5, 0.9, 1.0].iter().map(|&u| FitPoint { u, y: 1.0 }).collect();
        let kept: Vec<f64> = validity_filter(&pts, 0.5, 1.0).iter().map(|p| p.u).collect();
        assert_eq!(kept, vec![0.5, 0.9, 1.0]);
        let low: Vec<FitPoint> = [0.1, 0.2, 0.3, 0.45].iter().map(|&u| FitPoint { u, y: 1.0 }).collect();
        assert!(validity_filter(&low, 0.5, 1.0).is_empty());
        assert!(matches!(fit(&FitProblem::new(low, base())), Err(Error::FitRefused(_))));
    }

    #[test]
    fn validity_filter_on_scan_grid() {
        let pts: Vec<FitPoint> = scan_us().into_iter().map(|u| FitPoint { u, y: 1.0 }).collect();
        let kept = validity_filter(&pts, 0.5, 1.0);
        let expected = pts.iter().filter(|p| p.u >= 0.5).count();
        assert_eq!(kept.len(), expected);
        assert!((20..=21).contains(&expected));
    }

    #[test]
    fn model_curve_examples() {
        let b = base();
        let n = model_curve(1.5, 86.0, &[0.0, 0.5, 1.0], &b).unwrap();
        assert_eq!(n[0], 0.0);
        assert!(n[1] > 0.0 && n[2] > 0.0);
        assert!(model_curve(0.0, 86.0, &[0.2, 0.7, 1.0], &b).unwrap().iter().all(|v| *v == 0.0));

        let delta = PumpBase::new(params(), 1.5, VelocityDistribution::delta(670.0).unwrap()).unwrap();
        let tau = interaction_time(670.0, &params()).unwrap();
        for u in [0.3, 0.6, 1.0] {
            let n = model_curve(1.5, 86.0, &[u], &delta).unwrap()[0];
            let pump = PumpParams::new(1.5, tau, params().peak_coupling() * f64::sqrt(u), params().kappa).unwrap();
            let reference = steady_state_product(&pump, 80).mean();
            assert!((n - reference).abs() < 1e-12 * reference);
        }
    }

    #[test]
    fn optimal_scale_examples() {
        let n = [0.5, 1.0, 2.0];
        let y = [1.0, 2.0, 4.0];
        assert!((optimal_scale(&y, &n).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(chi_square(&y, &n, 2.0), 0.0);
        assert_eq!(optimal_scale(&[1.0, -1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(optimal_scale(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn noiseless_round_trip() {
        let e = 0.86 * V_PER_CM_TO_V_PER_M;
        let r = fit(&FitProblem::new(synthetic(1.5, e, 270.0), base())).unwrap();
        assert!((r.mean_atoms / 1.5 - 1.0).abs() < 5e-3, "{r:?}");
        assert!((r.e_vac0 / e - 1.0).abs() < 5e-3, "{r:?}");
        assert!((r.scale / 270.0 - 1.0).abs() < 5e-3, "{r:?}");
        assert!(!r.poor_fit && !r.edge);
        assert!(r.sigma_mean_atoms >= 0.0 && r.sigma_e_vac0 >= 0.0 && r.sigma_scale >= 0.0);
    }

    #[test]
    fn fixed_scale_round_trip_and_consistency() {
        let e = 0.88 * V_PER_CM_TO_V_PER_M;
        let problem = FitProblem::new(synthetic(1.1, e, 270.0), base());
        let r = fit_fixed_scale(&problem, 270.0, Some(49.0)).unwrap();
        assert!((r.mean_atoms / 1.1 - 1.0).abs() < 1e-2, "{r:?}");
        assert!((r.e_vac0 / e - 1.0).abs() < 1e-2, "{r:?}");
        assert_eq!(r.sigma_scale, 0.0);
        let (sn, se) = r.sigma_with_scale.unwrap();
        assert!(sn >= r.sigma_mean_atoms && se >= r.sigma_e_vac0);

        let free = fit(&problem).unwrap();
        let held = fit_fixed_scale(&problem, free.scale, None).unwrap();
        assert!((held.mean_atoms / free.mean_atoms - 1.0).abs() < 1e-4);
        assert!((held.e_vac0 / free.e_vac0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn wrong_fixed_scale_is_flagged() {
        let e = 0.88 * V_PER_CM_TO_V_PER_M;
        let mut problem = FitProblem::new(synthetic(1.1, e, 270.0), base());
        // 0.15 s dwell with y in kcps
        problem.counts_per_unit = Some(150.0);
        let r = fit_fixed_scale(&problem, 2700.0, None).unwrap();
        assert!(r.chi2_per_dof > 1.0);
        assert!(r.poor_fit, "{r:?}");
        assert!((r.e_vac0 / e - 1.0).abs() > 0.01);
    }

    #[test]
    fn flat_data_is_flagged() {
        let pts: Vec<FitPoint> = scan_us().into_iter().map(|u| FitPoint { u, y: 100.0 }).collect();
        let r = fit(&FitProblem::new(pts, base())).unwrap();
        assert!(r.poor_fit, "{r:?}");
        assert!(r.warnings.iter().any(|w| w.contains("degenerate")));
    }

    #[test]
    fn linear_regime_round_trip() {
        let e = 0.86 * V_PER_CM_TO_V_PER_M;
        let b = base();
        let us: Vec<f64> = (0..=20).map(|i| 0.5 + 0.025 * i as f64).collect();
        let a = linear_law_coefficients(&us, e, &b).unwrap();
        let pts: Vec<FitPoint> = us.iter().zip(&a).map(|(&u, a)| FitPoint { u, y: 270.0 * 0.05 * a }).collect();
        let problem = FitProblem::new(pts.clone(), b.clone());
        let r = fit_linear_regime_n(&problem, e, 270.0).unwrap();
        assert!((r.mean_atoms / 0.05 - 1.0).abs() < 1e-6);
        assert!((r.mean_atoms_numeric / r.mean_atoms - 1.0).abs() < 1e-8, "{r:?}");

        let doubled: Vec<FitPoint> = pts.iter().map(|p| FitPoint { u: p.u, y: 2.0 * p.y }).collect();
        let r2 = fit_linear_regime_n(&FitProblem::new(doubled, b), e, 270.0).unwrap();
        assert!((r2.mean_atoms / r.mean_atoms - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_uses_volts_per_centimetre() {
        let e = 0.86 * V_PER_CM_TO_V_PER_M;
        let r = fit(&FitProblem::new(synthetic(1.5, e, 270.0), base())).unwrap();
        let rep = FitReport::from(&r);
        assert!((rep.e_vac0_v_per_cm - 0.86).abs() < 0.005);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn analytic_scale_is_profile_optimal(
            data in prop::collection::vec((0.0f64..10.0, 0.01f64..5.0), 3..30),
            s in -100.0f64..100.0,
        ) {
            let y: Vec<f64> = data.iter().map(|d| d.0).collect();
            let n: Vec<f64> = data.iter().map(|d| d.1).collect();
            let best = optimal_scale(&y, &n).unwrap();
            prop_assert!(chi_square(&y, &n, best) <= chi_square(&y, &n, s) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn optimal_scale_matches_grid(
            data in prop::collection::vec((0.01f64..5.0, -1e-3f64..1e-3), 3..30),
            s0 in 0.1f64..90.0,
        ) {
            let n: Vec<f64> = data.iter().map(|d| d.0).collect();
            let y: Vec<f64> = data.iter().map(|d| s0 * d.0 * (1.0 + d.1)).collect();
            let s = optimal_scale(&y, &n).unwrap();
            // zoomed brute-force scan
            let (mut lo, mut hi) = (-100.0f64, 100.0f64);
            for _ in 0..14 {
                let grid: Vec<f64> = (0..=100).map(|i| lo + (hi - lo) * i as f64 / 100.0).collect();
                let best = grid.iter().copied().min_by(|a, b| chi_square(&y, &n, *a).total_cmp(&chi_square(&y, &n, *b))).unwrap();
                let w = (hi - lo) / 50.0;
                lo = best - w;
                hi = best + w;
            }
            prop_assert!((0.5 * (lo + hi) - s).abs() < 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn rescaling_data_rescales_only_the_scale() {
        let e = 0.86 * V_PER_CM_TO_V_PER_M;
        let pts = synthetic(1.5, e, 270.0);
        let a = fit(&FitProblem::new(pts.clone(), base())).unwrap();
        let scaled: Vec<FitPoint> = pts.iter().map(|p| FitPoint { u: p.u, y: 3.0 * p.y }).collect();
        let b = fit(&FitProblem::new(scaled, base())).unwrap();
        assert_eq!(a.mean_atoms, b.mean_atoms);
        assert_eq!(a.e_vac0, b.e_vac0);
        assert!((b.scale / a.scale - 3.0).abs() < 1e-12);
    }
}
