//! Synthetic-control weights: least squares over the unit simplex.
//!
//! Every pre-treatment outcome is a predictor with equal weight, so the
//! problem is
//!
//! ```text
//! minimize  sum_t (y_t - sum_j w_j x_jt)^2   subject to  w >= 0, sum_j w_j = 1
//! ```
//!
//! where `y` is the treated series and `x_j` the donors over the
//! pre-treatment window. The solver runs accelerated projected gradient
//! (or away-step Frank-Wolfe when projection is switched off) from uniform
//! weights and periodically hands its support to an active-set refinement
//! that solves the equality-constrained subproblem exactly. A solution is
//! returned only with a KKT certificate.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::MonthKey;
use crate::panel::{slice, validate_panel, Panel, PriceSeries, StudyDesign};
use crate::simplex::project_into;

/// Weights at or below this are treated as zero when reporting supports.
pub const POSITIVE_WEIGHT_THRESHOLD: f64 = 1e-8;

/// Weights below this are clamped to zero and the rest renormalized.
pub const CLAMP_THRESHOLD: f64 = 1e-10;

const POLISH_EVERY: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    ProjectedGradient,
    FrankWolfe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Absolute objective-change tolerance (index points squared).
    pub tolerance: f64,
    pub kkt_tol: f64,
    pub max_iters: usize,
    pub method: SolverMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            kkt_tol: 1e-7,
            max_iters: 100_000,
            method: SolverMethod::ProjectedGradient,
        }
    }
}

/// Donor weights on the unit simplex, keyed by donor id.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector {
    weights: BTreeMap<String, f64>,
}

impl WeightVector {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty weight vector".into()));
        }
        if let Some((id, w)) = weights.iter().find(|(_, w)| !w.is_finite() || **w < -1e-12) {
            return Err(Error::InvalidArgument(format!("weight {w} for {id} is negative")));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector { weights })
    }

    pub fn uniform<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        let w = 1.0 / ids.len() as f64;
        Self::new(ids.iter().map(|id| (id.as_ref().to_string(), w)).collect())
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.weights.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Ids with weight above [`POSITIVE_WEIGHT_THRESHOLD`], sorted.
    pub fn positive_ids(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, w)| *w > POSITIVE_WEIGHT_THRESHOLD)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub method: SolverMethod,
    pub iterations: usize,
    pub active_set_iterations: usize,
    pub kkt_residual: f64,
}

/// A fitted synthetic control over the full study window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScmFit {
    pub weights: WeightVector,
    pub actual: PriceSeries,
    pub synthetic: PriceSeries,
    /// Actual minus synthetic, index points.
    pub gap: BTreeMap<MonthKey, f64>,
    pub design: StudyDesign,
    pub pre_rmspe: f64,
    /// Sum of squared pre-treatment residuals.
    pub objective_value: f64,
    pub diagnostics: SolverDiagnostics,
}

impl ScmFit {
    pub fn gap_at(&self, month: MonthKey) -> Result<f64> {
        self.gap.get(&month).copied().ok_or_else(|| Error::Coverage {
            series: format!("{} gap", self.actual.id()),
            missing: vec![month],
        })
    }

    pub fn actual_at(&self, month: MonthKey) -> Result<f64> {
        self.actual.value(month)
    }

    pub fn synthetic_at(&self, month: MonthKey) -> Result<f64> {
        self.synthetic.value(month)
    }
}

/// Raw solution of the simplex-constrained least-squares problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexLsSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Fits donor weights on the pre-treatment window and builds the synthetic
/// and gap series over `[pre_start, eval_end]`.
pub fn fit_weights(panel: &Panel, opts: &SolverOptions) -> Result<ScmFit> {
    let report = validate_panel(panel);
    if !report.is_empty() {
        return Err(Error::Validation(report));
    }
    let d = panel.design;
    let y = slice(&panel.treated, d.pre_start, d.pre_end)?;
    let columns = panel
        .donors
        .iter()
        .map(|s| slice(s, d.pre_start, d.pre_end))
        .collect::<Result<Vec<_>>>()?;
    let solution = solve_simplex_least_squares(&columns, &y, opts)?;

    let weights = WeightVector::new(
        panel
            .donors
            .iter()
            .zip(&solution.weights)
            .map(|(s, w)| (s.id().to_string(), *w))
            .collect(),
    )?;
    build_fit(panel, weights, solution.diagnostics)
}

/// Assembles synthetic, gap and diagnostics for given weights.
pub(crate) fn build_fit(
    panel: &Panel,
    weights: WeightVector,
    diagnostics: SolverDiagnostics,
) -> Result<ScmFit> {
    let d = panel.design;
    let mut synthetic = BTreeMap::new();
    let mut gap = BTreeMap::new();
    for month in d.months() {
        let s = synthetic_value(panel, &weights, month)?;
        synthetic.insert(month, s);
        gap.insert(month, panel.treated.value(month)? - s);
    }
    let objective_value: f64 = d.pre_months().map(|m| gap[&m] * gap[&m]).sum();
    let pre_rmspe = (objective_value / d.pre_len() as f64).sqrt();
    let synthetic = PriceSeries::new(
        format!("{}_synthetic", panel.treated.id()),
        format!("Synthetic {}", panel.treated.label()),
        synthetic,
    )?;
    let actual = panel.treated.restricted(d.pre_start, d.eval_end)?;
    Ok(ScmFit {
        weights,
        actual,
        synthetic,
        gap,
        design: d,
        pre_rmspe,
        objective_value,
        diagnostics,
    })
}

/// `sum_j w_j * donor_j(t)`. `weights` must be keyed exactly by the panel's
/// donor ids.
pub fn synthetic_value(panel: &Panel, weights: &WeightVector, month: MonthKey) -> Result<f64> {
    let donor_ids: BTreeSet<&str> = panel.donors.iter().map(|d| d.id()).collect();
    let weight_ids: BTreeSet<&str> = weights.iter().map(|(id, _)| id).collect();
    if donor_ids != weight_ids {
        let extra: Vec<&&str> = weight_ids.difference(&donor_ids).collect();
        let missing: Vec<&&str> = donor_ids.difference(&weight_ids).collect();
        return Err(Error::InvalidArgument(format!(
            "weight keys do not match donors (unknown: {extra:?}, missing: {missing:?})"
        )));
    }
    panel.donors.iter().try_fold(0.0, |acc, donor| {
        let w = weights.get(donor.id()).expect("keys checked above");
        Ok(acc + w * donor.value(month)?)
    })
}

/// Root mean squared gap over `[from, to]`.
pub fn rmspe(fit: &ScmFit, from: MonthKey, to: MonthKey) -> Result<f64> {
    if to < from {
        return Err(Error::InvalidArgument(format!("empty RMSPE window {from}..{to}")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for month in MonthKey::range_inclusive(from, to) {
        let g = fit.gap_at(month)?;
        sum += g * g;
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

/// Solves `min ||y - X w||^2` over the unit simplex. `columns[j]` is donor
/// `j`'s pre-period vector; all columns have `y.len()` entries.
pub fn solve_simplex_least_squares(
    columns: &[Vec<f64>],
    y: &[f64],
    opts: &SolverOptions,
) -> Result<SimplexLsSolution> {
    if columns.is_empty() {
        return Err(Error::InvalidArgument("no donor columns".into()));
    }
    if y.is_empty() || columns.iter().any(|c| c.len() != y.len()) {
        return Err(Error::InvalidArgument(
            "column length does not match target".into(),
        ));
    }
    if y.iter().chain(columns.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite solver input".into()));
    }
    let problem = Problem::new(columns, y);
    match opts.method {
        SolverMethod::ProjectedGradient => problem.accelerated_projected_gradient(opts),
        SolverMethod::FrankWolfe => problem.away_step_frank_wolfe(opts),
    }
}

struct Problem<'a> {
    columns: &'a [Vec<f64>],
    y: &'a [f64],
    gram: Vec<Vec<f64>>,
    xty: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(columns: &'a [Vec<f64>], y: &'a [f64]) -> Self {
        let j = columns.len();
        let mut gram = vec![vec![0.0; j]; j];
        for a in 0..j {
            for b in a..j {
                let v = dot(&columns[a], &columns[b]);
                gram[a][b] = v;
                gram[b][a] = v;
            }
        }
        let xty = columns.iter().map(|c| dot(c, y)).collect();
        Problem {
            columns,
            y,
            gram,
            xty,
        }
    }

    fn dim(&self) -> usize {
        self.columns.len()
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.y.to_vec();
        for (col, &wj) in self.columns.iter().zip(w) {
            if wj != 0.0 {
                for (ri, xi) in r.iter_mut().zip(col) {
                    *ri -= wj * xi;
                }
            }
        }
        r
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.residual(w).iter().map(|r| r * r).sum()
    }

    /// Gradient from the residual form, used for certificates.
    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let r = self.residual(w);
        self.columns.iter().map(|c| -2.0 * dot(c, &r)).collect()
    }

    /// Gradient from the Gram form, used inside iterations.
    fn gradient_gram(&self, w: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = 2.0 * (dot(&self.gram[j], w) - self.xty[j]);
        }
    }

    /// Largest eigenvalue of the Gram matrix by power iteration.
    fn gram_spectral_norm(&self) -> f64 {
        let n = self.dim();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let u: Vec<f64> = self.gram.iter().map(|row| dot(row, &v)).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v = u.into_iter().map(|x| x / norm).collect();
            let converged = (norm - lambda).abs() <= 1e-13 * norm;
            lambda = norm;
            if converged {
                break;
            }
        }
        lambda
    }

    fn kkt_residual(&self, w: &[f64]) -> f64 {
        kkt_residual(w, &self.gradient(w))
    }

    fn accelerated_projected_gradient(&self, opts: &SolverOptions) -> Result<SimplexLsSolution> {
        let n = self.dim();
        let lipschitz = 2.0 * self.gram_spectral_norm();
        let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

        let mut w = vec![1.0 / n as f64; n];
        let mut z = w.clone();
        let mut f_w = self.objective(&w);
        let mut t = 1.0f64;
        let mut grad = vec![0.0; n];
        let mut moved = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut scratch = Vec::with_capacity(n);
        let mut active_iters = 0;

        for iter in 1..=opts.max_iters {
            self.gradient_gram(&z, &mut grad);
            for ((m, zi), gi) in moved.iter_mut().zip(&z).zip(&grad) {
                *m = zi - step * gi;
            }
            project_into(&moved, &mut next, &mut scratch);
            let f_next = self.objective(&next);

            // Function-value restart keeps the iteration monotone.
            if f_next > f_w {
                t = 1.0;
                z.copy_from_slice(&w);
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            for i in 0..n {
                z[i] = next[i] + momentum * (next[i] - w[i]);
            }
            t = t_next;
            let improvement = f_w - f_next;
            w.copy_from_slice(&next);
            f_w = f_next;

            if iter % POLISH_EVERY == 0 || (improvement <= opts.tolerance && iter % 5 == 0) {
                if let Some(sol) = self.finish(&w, iter, &mut active_iters, opts) {
                    return Ok(sol);
                }
            }
        }
        self.finish(&w, opts.max_iters, &mut active_iters, opts)
            .ok_or_else(|| self.non_convergence(&w, opts.max_iters))
    }

    fn away_step_frank_wolfe(&self, opts: &SolverOptions) -> Result<SimplexLsSolution> {
        let n = self.dim();
        let mut w = vec![1.0 / n as f64; n];
        let mut active_iters = 0;
        for iter in 1..=opts.max_iters {
            let r = self.residual(&w);
            let g: Vec<f64> = self.columns.iter().map(|c| -2.0 * dot(c, &r)).collect();
            let toward = argmin(&g);
            let away = (0..n)
                .filter(|&j| w[j] > 0.0)
                .max_by(|&a, &b| g[a].total_cmp(&g[b]))
                .expect("simplex point has support");
            let gw = dot(&g, &w);
            let fw_gap = gw - g[toward];
            let away_gap = g[away] - gw;

            let mut dir = vec![0.0; n];
            let max_step = if fw_gap >= away_gap {
                for (j, dj) in dir.iter_mut().enumerate() {
                    *dj = -w[j];
                }
                dir[toward] += 1.0;
                1.0
            } else {
                dir.copy_from_slice(&w);
                dir[away] -= 1.0;
                let wa = w[away];
                if wa < 1.0 {
                    wa / (1.0 - wa)
                } else {
                    f64::INFINITY
                }
            };
            // Exact line search on ||r - gamma * X dir||^2.
            let mut xd = vec![0.0; r.len()];
            for (col, dj) in self.columns.iter().zip(&dir) {
                if *dj != 0.0 {
                    for (a, x) in xd.iter_mut().zip(col) {
                        *a += dj * x;
                    }
                }
            }
            let denom = dot(&xd, &xd);
            let gamma = if denom > 0.0 {
                (dot(&r, &xd) / denom).clamp(0.0, max_step)
            } else {
                0.0
            };
            for (wj, dj) in w.iter_mut().zip(&dir) {
                *wj = (*wj + gamma * dj).max(0.0);
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);

            let stalled = gamma * denom.sqrt() <= opts.tolerance;
            if iter % POLISH_EVERY == 0 || stalled {
                if let Some(sol) = self.finish(&w, iter, &mut active_iters, opts) {
                    return Ok(SimplexLsSolution {
                        diagnostics: SolverDiagnostics {
                            method: SolverMethod::FrankWolfe,
                            ..sol.diagnostics
                        },
                        ..sol
                    });
                }
            }
        }
        self.finish(&w, opts.max_iters, &mut active_iters, opts)
            .map(|sol| SimplexLsSolution {
                diagnostics: SolverDiagnostics {
                    method: SolverMethod::FrankWolfe,
                    ..sol.diagnostics
                },
                ..sol
            })
            .ok_or_else(|| self.non_convergence(&w, opts.max_iters))
    }

    /// Tries to certify the current iterate, first after active-set
    /// refinement, then as-is.
    fn finish(
        &self,
        w: &[f64],
        iterations: usize,
        active_iters: &mut usize,
        opts: &SolverOptions,
    ) -> Option<SimplexLsSolution> {
        let (refined, used) = self.active_set_refine(w, opts);
        *active_iters += used;
        let candidates = refined.into_iter().chain(std::iter::once(clamp_weights(w)));
        for cand in candidates {
            let kkt = self.kkt_residual(&cand);
            if kkt <= opts.kkt_tol {
                return Some(SimplexLsSolution {
                    objective: self.objective(&cand),
                    weights: cand,
                    diagnostics: SolverDiagnostics {
                        method: SolverMethod::ProjectedGradient,
                        iterations,
                        active_set_iterations: *active_iters,
                        kkt_residual: kkt,
                    },
                });
            }
        }
        None
    }

    fn non_convergence(&self, w: &[f64], iterations: usize) -> Error {
        let w = clamp_weights(w);
        Error::NonConvergence {
            iterations,
            kkt_residual: self.kkt_residual(&w),
            objective: self.objective(&w),
            best_weights: w,
        }
    }

    /// Primal active-set method started from the support of `start`.
    /// Returns the clamped refined point and the number of iterations used.
    fn active_set_refine(&self, start: &[f64], opts: &SolverOptions) -> (Option<Vec<f64>>, usize) {
        let n = self.dim();
        let mut w = clamp_weights(start);
        let mut free: Vec<bool> = w.iter().map(|&x| x > 0.0).collect();
        let max_iters = 10 * n + 50;
        for iter in 1..=max_iters {
            let idx: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
            let Some(v) = self.equality_ls(&idx) else {
                return (None, iter);
            };
            if v.iter().all(|&x| x >= 0.0) {
                w.iter_mut().for_each(|x| *x = 0.0);
                for (&j, &x) in idx.iter().zip(&v) {
                    w[j] = x;
                }
                let g = self.gradient(&w);
                let floor = idx.iter().map(|&j| g[j]).fold(f64::INFINITY, f64::min);
                let entering = (0..n)
                    .filter(|&j| !free[j])
                    .min_by(|&a, &b| g[a].total_cmp(&g[b]));
                match entering {
                    Some(j) if g[j] < floor - 0.1 * opts.kkt_tol => free[j] = true,
                    _ => return (Some(clamp_weights(&w)), iter),
                }
            } else {
                // Step toward v until the first free coordinate hits zero.
                let mut alpha = 1.0f64;
                for (&j, &vj) in idx.iter().zip(&v) {
                    if vj < 0.0 {
                        alpha = alpha.min(w[j] / (w[j] - vj));
                    }
                }
                for (&j, &vj) in idx.iter().zip(&v) {
                    w[j] += alpha * (vj - w[j]);
                }
                let mut dropped = false;
                for (&j, &vj) in idx.iter().zip(&v) {
                    if vj < 0.0 && w[j] <= 1e-15 * (1.0 + start[j].abs()) {
                        w[j] = 0.0;
                        free[j] = false;
                        dropped = true;
                    }
                }
                if !dropped {
                    // Numerical corner: drop the most negative target.
                    let (k, _) = idx
                        .iter()
                        .zip(&v)
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .expect("nonempty support");
                    w[*k] = 0.0;
                    free[*k] = false;
                }
                let s: f64 = w.iter().sum();
                if s <= 0.0 {
                    return (None, iter);
                }
                w.iter_mut().for_each(|x| *x /= s);
            }
        }
        (None, max_iters)
    }

    /// Least squares restricted to donors `idx` with weights summing to one
    /// (no sign constraint). Eliminates the sum constraint against the first
    /// donor and solves the reduced problem by SVD; singular directions get
    /// the minimum-norm solution.
    fn equality_ls(&self, idx: &[usize]) -> Option<Vec<f64>> {
        let (&base, rest) = idx.split_first()?;
        if rest.is_empty() {
            return Some(vec![1.0]);
        }
        let rows = self.y.len();
        let xb = &self.columns[base];
        let design = DMatrix::from_fn(rows, rest.len(), |t, k| self.columns[rest[k]][t] - xb[t]);
        let rhs = DVector::from_fn(rows, |t, _| self.y[t] - xb[t]);
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        if smax == 0.0 {
            let mut v = vec![0.0; idx.len()];
            v[0] = 1.0;
            return Some(v);
        }
        let eps = smax * 1e-12 * rows.max(rest.len()) as f64;
        let coef = svd.solve(&rhs, eps).ok()?;
        let mut v = Vec::with_capacity(idx.len());
        v.push(1.0 - coef.iter().sum::<f64>());
        v.extend(coef.iter().copied());
        v.iter().all(|x| x.is_finite()).then_some(v)
    }
}

/// Largest excess of a supported coordinate's partial derivative over the
/// smallest partial derivative. Zero at an optimum of a convex objective
/// over the simplex.
pub fn kkt_residual(weights: &[f64], gradient: &[f64]) -> f64 {
    let floor = gradient.iter().copied().fold(f64::INFINITY, f64::min);
    weights
        .iter()
        .zip(gradient)
        .filter(|(w, _)| **w > POSITIVE_WEIGHT_THRESHOLD)
        .map(|(_, g)| g - floor)
        .fold(0.0, f64::max)
}

/// Zeroes weights below [`CLAMP_THRESHOLD`] and renormalizes.
fn clamp_weights(w: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = w
        .iter()
        .map(|&x| if x < CLAMP_THRESHOLD { 0.0 } else { x })
        .collect();
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|x| *x /= s);
    } else {
        let k = argmax(w);
        out[k] = 1.0;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len())
        .min_by(|&a, &b| v[a].total_cmp(&v[b]))
        .expect("nonempty")
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len())
        .max_by(|&a, &b| v[a].total_cmp(&v[b]))
        .expect("nonempty")
}
