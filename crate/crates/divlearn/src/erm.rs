//! Two-stage empirical risk minimization: joint training over heads and the
//! shared representation, head-only test-phase fitting with the representation
//! frozen, population excess risk, and the learn-in-isolation baseline.
//!
//! The optimizer is full-batch projected gradient descent with a backtracking
//! (halving) line search and an Armijo acceptance test on the projected step,
//! accelerated by exact per-task head solves every ten iterations. Restarts
//! run from keyed streams and the lowest-risk restart wins, ties broken by
//! restart index.

use crate::envs::{Family, NormCaps, TaskDataset, TaskEnvironment};
use crate::models::{
    self, accumulate_grad, HeadGrad, HeadParams, LossId, ModelError, RepGrad,
    RepresentationParams,
};
use crate::numlin::{self, dot, norm2, Matrix, NumlinError};
use crate::rng::{purpose, KeyedRng};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErmError {
    #[error("empty dataset")]
    EmptyData,
    #[error("optimization diverged (risk became non-finite)")]
    Diverged,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numlin(#[from] NumlinError),
}

/// Optimizer configuration for the ERM oracle.
#[derive(Debug, Clone)]
pub struct OptConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// Per-iteration multiplier applied to the base trial step.
    pub step_decay: f64,
    /// Stop when the projected-gradient norm falls below this.
    pub tol_grad: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Record a per-iteration (iter, risk, step, grad_norm) trace.
    pub trace: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iters: 5000,
            step_size: 1.0,
            step_decay: 1.0,
            tol_grad: 1e-7,
            restarts: 5,
            seed: 0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TracePoint {
    pub iter: usize,
    pub risk: f64,
    pub step: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub rep: RepresentationParams,
    pub heads: Vec<HeadParams>,
    pub final_empirical_risk: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

/// Hypothesis-class description shared by training, testing, and the
/// isolation baseline.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub family: Family,
    pub d: usize,
    pub r: usize,
    pub caps: NormCaps,
    pub nn_hidden: Vec<usize>,
    pub nn_caps: Vec<f64>,
    pub link_knots: usize,
}

impl TaskEnvironment {
    pub fn class_spec(&self) -> ClassSpec {
        let (nn_hidden, nn_caps) = match &self.rep_truth {
            RepresentationParams::TanhMlp { weights, caps } => (
                weights[..weights.len() - 1].iter().map(|w| w.rows()).collect(),
                caps.clone(),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        ClassSpec {
            family: self.family,
            d: self.d,
            r: self.r,
            caps: self.caps,
            nn_hidden,
            nn_caps,
            link_knots: models::DEFAULT_LINK_KNOTS,
        }
    }
}

impl ClassSpec {
    /// Loss the optimizer descends. Index models train against the squared
    /// risk (the link projection is exact for it); their reported population
    /// risks stay ℓ1.
    pub fn working_loss(&self) -> LossId {
        match self.family {
            Family::IndexModel => LossId::Squared,
            f => f.loss(),
        }
    }

    pub fn head_cap(&self) -> f64 {
        self.caps.c1
    }
}

/// Mean empirical risk of (rep, heads) over a set of task datasets.
pub fn empirical_risk(
    datasets: &[TaskDataset],
    rep: &RepresentationParams,
    heads: &[HeadParams],
    loss: LossId,
) -> Result<f64, ErmError> {
    let total: usize = datasets.iter().map(|d| d.y.len()).sum();
    if total == 0 {
        return Err(ErmError::EmptyData);
    }
    let mut sum = 0.0;
    for (ds, head) in datasets.iter().zip(heads.iter()) {
        for i in 0..ds.y.len() {
            let pred = models::predict(rep, head, ds.x.row(i))?;
            sum += models::loss_value(loss, pred, ds.y[i])?;
        }
    }
    Ok(sum / total as f64)
}

fn batch_gradient(
    datasets: &[TaskDataset],
    rep: &RepresentationParams,
    heads: &[HeadParams],
    loss: LossId,
) -> Result<(f64, RepGrad, Vec<HeadGrad>), ErmError> {
    let total: usize = datasets.iter().map(|d| d.y.len()).sum();
    let scale = 1.0 / total as f64;
    let mut rep_acc = RepGrad::zeros_like(rep);
    let mut head_accs: Vec<HeadGrad> = heads.iter().map(HeadGrad::zeros_like).collect();
    let mut risk = 0.0;
    for (k, ds) in datasets.iter().enumerate() {
        for i in 0..ds.y.len() {
            risk += accumulate_grad(
                loss,
                rep,
                &heads[k],
                ds.x.row(i),
                ds.y[i],
                scale,
                &mut rep_acc,
                &mut head_accs[k],
            )?;
        }
    }
    Ok((risk * scale, rep_acc, head_accs))
}

fn param_distance_sq(
    rep_a: &RepresentationParams,
    heads_a: &[HeadParams],
    rep_b: &RepresentationParams,
    heads_b: &[HeadParams],
) -> f64 {
    let mut d = match (rep_a, rep_b) {
        (
            RepresentationParams::LinearSubspace { b: a },
            RepresentationParams::LinearSubspace { b },
        ) => {
            let diff = a.add_scaled(b, -1.0).frobenius_norm();
            diff * diff
        }
        (
            RepresentationParams::TanhMlp { weights: wa, .. },
            RepresentationParams::TanhMlp { weights: wb, .. },
        ) => wa
            .iter()
            .zip(wb.iter())
            .map(|(a, b)| {
                let f = a.add_scaled(b, -1.0).frobenius_norm();
                f * f
            })
            .sum(),
        (
            RepresentationParams::UnitDirection { b: a, .. },
            RepresentationParams::UnitDirection { b, .. },
        ) => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => panic!("comparing mismatched representation variants"),
    };
    for (ha, hb) in heads_a.iter().zip(heads_b.iter()) {
        match (ha, hb) {
            (HeadParams::LinearHead { alpha: a, .. }, HeadParams::LinearHead { alpha: b, .. }) => {
                d += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            (
                HeadParams::MonotoneLink { values: a, .. },
                HeadParams::MonotoneLink { values: b, .. },
            ) => {
                d += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            _ => panic!("comparing mismatched head variants"),
        }
    }
    d
}

fn init_params(
    class: &ClassSpec,
    datasets: &[TaskDataset],
    rng: &mut KeyedRng,
) -> Result<(RepresentationParams, Vec<HeadParams>), ErmError> {
    let rep = match class.family {
        Family::LinearLogistic | Family::LinearRegression => {
            let g = Matrix::from_fn(class.d, class.r, |_, _| rng.normal());
            RepresentationParams::LinearSubspace { b: numlin::qr_orthonormalize(&g)? }
        }
        Family::NnRegression => {
            let mut widths = vec![class.d];
            widths.extend_from_slice(&class.nn_hidden);
            widths.push(class.r);
            let weights = (0..widths.len() - 1)
                .map(|k| {
                    let fan = widths[k] as f64;
                    Matrix::from_fn(widths[k + 1], widths[k], |_, _| rng.normal() / fan.sqrt())
                })
                .collect();
            models::project_rep(&RepresentationParams::TanhMlp {
                weights,
                caps: class.nn_caps.clone(),
            })?
        }
        Family::IndexModel => {
            let dir = rng.unit_vector(class.d);
            RepresentationParams::UnitDirection {
                b: dir.iter().map(|v| v * class.caps.w).collect(),
                cap: class.caps.w,
            }
        }
    };
    let heads = match class.family {
        Family::IndexModel => {
            // links initialized by direct projection onto the class given b
            datasets
                .iter()
                .map(|ds| {
                    let zs: Vec<(f64, f64)> = (0..ds.y.len())
                        .map(|i| {
                            let z = models::rep_forward(&rep, ds.x.row(i)).expect("dims")[0];
                            (z, ds.y[i])
                        })
                        .collect();
                    let knots = models::quantile_knots(&zs, class.link_knots);
                    models::fit_link(&zs, Some(&knots)).map_err(ErmError::from)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            let scale = 0.3 * class.head_cap() / (class.r as f64).sqrt();
            datasets
                .iter()
                .map(|_| HeadParams::LinearHead {
                    alpha: (0..class.r).map(|_| scale * rng.normal()).collect(),
                    cap: class.head_cap(),
                })
                .collect()
        }
    };
    Ok((rep, heads))
}

/// Feature matrix h(x_i) stacked over a dataset.
pub fn features_matrix(
    rep: &RepresentationParams,
    ds: &TaskDataset,
) -> Result<Matrix, ErmError> {
    let r = rep.dim_out();
    let mut m = Matrix::zeros(ds.y.len(), r);
    for i in 0..ds.y.len() {
        let h = models::rep_forward(rep, ds.x.row(i))?;
        m.row_mut(i).copy_from_slice(&h);
    }
    Ok(m)
}

/// Spectral ridge-path solver for min ‖Hα − y‖² subject to ‖α‖ ≤ cap,
/// reusable across right-hand sides through the cached eigendecomposition of
/// the Gram matrix HᵀH.
pub struct GramSolver {
    spec: crate::numlin::Spectrum,
    base_ridge: f64,
}

impl GramSolver {
    pub fn from_gram(gram: &Matrix) -> Result<Self, ErmError> {
        let spec = numlin::symmetric_eig(gram)?;
        // tiny ridge only when the Gram is singular
        let base_ridge = if spec.min_eigenvalue() <= 1e-12 * spec.max_eigenvalue().max(1.0) {
            1e-10 * spec.max_eigenvalue().max(1.0)
        } else {
            0.0
        };
        Ok(GramSolver { spec, base_ridge })
    }

    pub fn from_features(features: &Matrix) -> Result<Self, ErmError> {
        let p = features.cols();
        let mut gram = Matrix::zeros(p, p);
        for i in 0..features.rows() {
            let row = features.row(i);
            for a in 0..p {
                for b in a..p {
                    gram.set(a, b, gram.get(a, b) + row[a] * row[b]);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram.set(a, b, gram.get(b, a));
            }
        }
        GramSolver::from_gram(&gram)
    }

    fn solve_at(&self, proj: &[f64], lambda: f64) -> Vec<f64> {
        let coeffs: Vec<f64> = proj
            .iter()
            .zip(self.spec.eigenvalues.iter())
            .map(|(&c, &l)| {
                let denom = l.max(0.0) + lambda;
                if denom > 1e-14 {
                    c / denom
                } else {
                    0.0
                }
            })
            .collect();
        self.spec.eigenvectors.matvec(&coeffs)
    }

    /// Solve against the right-hand side Hᵀy, bisecting the Lagrange
    /// multiplier of the ridge path when the unconstrained solution leaves
    /// the ball.
    pub fn solve_ball(&self, hty: &[f64], cap: f64) -> Vec<f64> {
        let proj = self.spec.eigenvectors.tr_matvec(hty);
        let alpha = self.solve_at(&proj, self.base_ridge);
        if norm2(&alpha) <= cap {
            return alpha;
        }
        let lo0 = self.base_ridge;
        let mut hi = self.base_ridge.max(1e-8);
        while norm2(&self.solve_at(&proj, hi)) > cap {
            hi *= 4.0;
            if hi > 1e20 {
                break;
            }
        }
        let mut lo = lo0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm2(&self.solve_at(&proj, mid)) > cap {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 * hi.max(1.0) {
                break;
            }
        }
        self.solve_at(&proj, hi)
    }
}

/// Exact solution of min ‖Hα − y‖² subject to ‖α‖ ≤ cap.
pub fn ball_constrained_least_squares(
    features: &Matrix,
    y: &[f64],
    cap: f64,
) -> Result<Vec<f64>, ErmError> {
    let solver = GramSolver::from_features(features)?;
    Ok(solver.solve_ball(&features.tr_matvec(y), cap))
}

/// Damped Newton for the logistic head with ball projection. Targets may be
/// soft labels in [0, 1]; the objective is mean(log(1+e^z) − target·z).
pub fn logistic_head_newton(
    features: &Matrix,
    targets: &[f64],
    cap: f64,
    init: &[f64],
    max_iters: usize,
) -> Result<Vec<f64>, ErmError> {
    let m = features.rows();
    let r = features.cols();
    if m == 0 {
        return Err(ErmError::EmptyData);
    }
    let obj = |alpha: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            let z = dot(features.row(i), alpha);
            s += (-z.abs()).exp().ln_1p() + z.max(0.0) - targets[i] * z;
        }
        s / m as f64
    };
    let project = |alpha: Vec<f64>| -> Vec<f64> {
        let n = norm2(&alpha);
        if n > cap {
            alpha.into_iter().map(|v| v * cap / n).collect()
        } else {
            alpha
        }
    };
    let mut alpha = project(init.to_vec());
    let mut f = obj(&alpha);
    for _ in 0..max_iters {
        let mut grad = vec![0.0; r];
        let mut hess = Matrix::zeros(r, r);
        for i in 0..m {
            let row = features.row(i);
            let z = dot(row, &alpha);
            let p = models::sigmoid(z);
            let g = (p - targets[i]) / m as f64;
            let w = (p * (1.0 - p)).max(1e-10) / m as f64;
            for a in 0..r {
                grad[a] += g * row[a];
                for b in a..r {
                    hess.set(a, b, hess.get(a, b) + w * row[a] * row[b]);
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                hess.set(a, b, hess.get(b, a));
            }
            hess.set(a, a, hess.get(a, a) + 1e-12);
        }
        let gnorm = norm2(&grad);
        if gnorm < 1e-12 {
            break;
        }
        let dir = numlin::least_squares(&hess, &grad, 1e-12)?;
        let mut tau = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = project(numlin::axpy(&alpha, &dir, -tau));
            let fc = obj(&cand);
            if fc <= f - 1e-4 * tau * dot(&grad, &dir).max(0.0) && fc <= f {
                let displacement = numlin::axpy(&cand, &alpha, -1.0);
                alpha = cand;
                let improved = f - fc;
                f = fc;
                moved = true;
                if improved < 1e-14 && norm2(&displacement) < 1e-12 {
                    return Ok(alpha);
                }
                break;
            }
            tau *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(alpha)
}

/// Exact (or near-exact) per-task head refit with the representation frozen.
fn exact_head_solve(
    ds: &TaskDataset,
    rep: &RepresentationParams,
    head: &HeadParams,
    class: &ClassSpec,
) -> Result<HeadParams, ErmError> {
    match class.family {
        Family::LinearRegression | Family::NnRegression => {
            let feats = features_matrix(rep, ds)?;
            let alpha = ball_constrained_least_squares(&feats, &ds.y, class.head_cap())?;
            Ok(HeadParams::LinearHead { alpha, cap: class.head_cap() })
        }
        Family::LinearLogistic => {
            let feats = features_matrix(rep, ds)?;
            let init = match head {
                HeadParams::LinearHead { alpha, .. } => alpha.clone(),
                _ => vec![0.0; class.r],
            };
            let alpha =
                logistic_head_newton(&feats, &ds.y, class.head_cap(), &init, 50)?;
            Ok(HeadParams::LinearHead { alpha, cap: class.head_cap() })
        }
        Family::IndexModel => {
            let zs: Vec<(f64, f64)> = (0..ds.y.len())
                .map(|i| {
                    let z = models::rep_forward(rep, ds.x.row(i)).expect("dims")[0];
                    (z, ds.y[i])
                })
                .collect();
            let prior = match head {
                HeadParams::MonotoneLink { knots, .. } => Some(knots.clone()),
                _ => None,
            };
            Ok(models::fit_link(&zs, prior.as_deref())?)
        }
    }
}

const ARMIJO: f64 = 1e-4;
const HEAD_SOLVE_PERIOD: usize = 10;
const MIN_STEP: f64 = 1e-16;

fn run_descent(
    datasets: &[TaskDataset],
    class: &ClassSpec,
    opt: &OptConfig,
    mut rep: RepresentationParams,
    mut heads: Vec<HeadParams>,
) -> Result<FitResult, ErmError> {
    let loss = class.working_loss();
    let mut risk = empirical_risk(datasets, &rep, &heads, loss)?;
    if !risk.is_finite() {
        return Err(ErmError::Diverged);
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_used = 0;
    let mut last_step = opt.step_size;

    for iter in 0..opt.max_iters {
        iterations_used = iter + 1;

        if iter % HEAD_SOLVE_PERIOD == 0 {
            let mut new_heads = Vec::with_capacity(heads.len());
            for (k, ds) in datasets.iter().enumerate() {
                new_heads.push(exact_head_solve(ds, &rep, &heads[k], class)?);
            }
            let new_risk = empirical_risk(datasets, &rep, &new_heads, loss)?;
            if new_risk <= risk {
                heads = new_heads;
                risk = new_risk;
            }
        }

        let (_, rep_grad, head_grads) = batch_gradient(datasets, &rep, &heads, loss)?;
        let grad_norm_sq: f64 =
            rep_grad.norm_sq() + head_grads.iter().map(HeadGrad::norm_sq).sum::<f64>();
        let grad_norm = grad_norm_sq.sqrt();

        // projected-gradient stationarity probe at unit step
        let probe_rep = models::project_rep(&rep.step(&rep_grad, 1.0))?;
        let probe_heads: Vec<HeadParams> = heads
            .iter()
            .zip(head_grads.iter())
            .map(|(h, g)| models::project_head(&h.step(g, 1.0)))
            .collect();
        let pg_norm = param_distance_sq(&probe_rep, &probe_heads, &rep, &heads).sqrt();
        if pg_norm < opt.tol_grad {
            converged = true;
            if opt.trace {
                trace.push(TracePoint { iter, risk, step: 0.0, grad_norm });
            }
            break;
        }

        let base = (opt.step_size * opt.step_decay.powi(iter as i32)).min(last_step * 4.0);
        let mut step = base.max(MIN_STEP);
        let mut accepted = false;
        while step >= MIN_STEP {
            let cand_rep = models::project_rep(&rep.step(&rep_grad, step))?;
            let cand_heads: Vec<HeadParams> = heads
                .iter()
                .zip(head_grads.iter())
                .map(|(h, g)| models::project_head(&h.step(g, step)))
                .collect();
            let cand_risk = empirical_risk(datasets, &cand_rep, &cand_heads, loss)?;
            if !cand_risk.is_finite() {
                step *= 0.5;
                continue;
            }
            let dist_sq = param_distance_sq(&cand_rep, &cand_heads, &rep, &heads);
            if cand_risk <= risk - ARMIJO / step * dist_sq {
                rep = cand_rep;
                heads = cand_heads;
                risk = cand_risk;
                last_step = step;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if opt.trace {
            trace.push(TracePoint {
                iter,
                risk,
                step: if accepted { last_step } else { 0.0 },
                grad_norm,
            });
        }
        if !accepted {
            // no productive direction at machine-size steps
            converged = pg_norm < opt.tol_grad.max(1e-10);
            break;
        }
    }

    // final exact head pass so returned heads are stationary given the rep
    let mut new_heads = Vec::with_capacity(heads.len());
    for (k, ds) in datasets.iter().enumerate() {
        new_heads.push(exact_head_solve(ds, &rep, &heads[k], class)?);
    }
    let new_risk = empirical_risk(datasets, &rep, &new_heads, loss)?;
    if new_risk <= risk {
        heads = new_heads;
        risk = new_risk;
    }

    Ok(FitResult { rep, heads, final_empirical_risk: risk, iterations_used, converged, trace })
}

/// Joint ERM over (f_1..f_t, h) on the training tasks; the lowest-risk restart
/// is returned.
pub fn train_phase_erm(
    datasets: &[TaskDataset],
    class: &ClassSpec,
    opt: &OptConfig,
) -> Result<FitResult, ErmError> {
    if datasets.is_empty() || datasets.iter().any(|d| d.y.is_empty()) {
        return Err(ErmError::EmptyData);
    }
    let mut best: Option<FitResult> = None;
    let mut diverged = 0usize;
    for restart in 0..opt.restarts.max(1) {
        let mut rng = KeyedRng::new(opt.seed, &[purpose::INIT, restart as u64]);
        let (rep0, heads0) = init_params(class, datasets, &mut rng)?;
        match run_descent(datasets, class, opt, rep0, heads0) {
            Ok(result) => {
                let better = match &best {
                    None => true,
                    Some(b) => result.final_empirical_risk < b.final_empirical_risk,
                };
                if better {
                    best = Some(result);
                }
            }
            Err(ErmError::Diverged) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(b) => Ok(b),
        None if diverged > 0 => Err(ErmError::Diverged),
        None => Err(ErmError::EmptyData),
    }
}

/// Head-only ERM on the new task with the representation frozen.
pub fn test_phase_erm(
    dataset0: &TaskDataset,
    rep: &RepresentationParams,
    class: &ClassSpec,
    _opt: &OptConfig,
) -> Result<HeadParams, ErmError> {
    if dataset0.y.is_empty() {
        return Err(ErmError::EmptyData);
    }
    if class.family == Family::IndexModel {
        // fresh quantile knot grid for the new task
        let zs: Vec<(f64, f64)> = (0..dataset0.y.len())
            .map(|i| {
                let z = models::rep_forward(rep, dataset0.x.row(i)).expect("dims")[0];
                (z, dataset0.y[i])
            })
            .collect();
        let knots = models::quantile_knots(&zs, class.link_knots);
        return Ok(models::fit_link(&zs, Some(&knots))?);
    }
    let placeholder = HeadParams::LinearHead { alpha: vec![0.0; class.r], cap: class.head_cap() };
    exact_head_solve(dataset0, rep, &placeholder, class)
}

#[derive(Debug, Clone, Copy)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of the population excess risk of (head, rep) on the
/// new task, relative to the ground truth, with common random numbers
/// cancelling shared sampling noise.
pub fn population_excess_risk(
    env: &TaskEnvironment,
    rep: &RepresentationParams,
    head: &HeadParams,
    n_eval: usize,
    seed: u64,
) -> Result<RiskEstimate, ErmError> {
    let truth_head = env.head(0).map_err(|_| ErmError::EmptyData)?;
    let mut rng = KeyedRng::new(env.seed, &[purpose::EVAL, seed]);
    let noise_half_width = env.noise_scale * 3.0_f64.sqrt();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_eval {
        let (x, _) = env.covariates.sample(&mut rng);
        let pred_true = models::predict(&env.rep_truth, truth_head, &x)?;
        let y = match env.family {
            Family::LinearLogistic => {
                if rng.uniform() < models::sigmoid(pred_true) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => pred_true + rng.uniform_in(-noise_half_width, noise_half_width),
        };
        let pred = models::predict(rep, head, &x)?;
        let diff = models::loss_value(env.loss, pred, y)?
            - models::loss_value(env.loss, pred_true, y)?;
        sum += diff;
        sum_sq += diff * diff;
    }
    let n = n_eval as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(RiskEstimate { mean, stderr: (var / n).sqrt() })
}

/// Single-task ERM over the full composed class on the test samples only.
pub fn isolation_baseline(
    dataset0: &TaskDataset,
    class: &ClassSpec,
    opt: &OptConfig,
) -> Result<(HeadParams, RepresentationParams), ErmError> {
    if dataset0.y.is_empty() {
        return Err(ErmError::EmptyData);
    }
    let solo = vec![TaskDataset {
        task_id: dataset0.task_id,
        x: dataset0.x.clone(),
        y: dataset0.y.clone(),
    }];
    let fit = train_phase_erm(&solo, class, opt)?;
    Ok((fit.heads.into_iter().next().expect("one head"), fit.rep))
}

/// Worst relative disagreement between analytic gradients and central finite
/// differences over random instances of a family. Nondifferentiable
/// configurations (absolute-loss ties, link kinks) are skipped.
pub fn finite_difference_audit(family: Family, loss: LossId, trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0_f64;
    let eps = 1e-5;
    let mut done = 0usize;
    let mut attempt = 0u64;
    while done < trials {
        attempt += 1;
        let mut rng = KeyedRng::new(seed, &[purpose::DRAW, attempt]);
        let d = 3 + rng.below(3);
        let r = 1 + rng.below(2.min(d));
        let (rep, head) = match family {
            Family::LinearLogistic | Family::LinearRegression => {
                let b = numlin::qr_orthonormalize(&Matrix::from_fn(d, r, |_, _| rng.normal()))
                    .expect("generic matrix has full rank");
                (
                    RepresentationParams::LinearSubspace { b },
                    HeadParams::LinearHead { alpha: rng.normal_vec(r), cap: 100.0 },
                )
            }
            Family::NnRegression => {
                let w1 = Matrix::from_fn(4, d, |_, _| 0.5 * rng.normal());
                let w2 = Matrix::from_fn(r, 4, |_, _| 0.5 * rng.normal());
                (
                    RepresentationParams::TanhMlp { weights: vec![w1, w2], caps: vec![8.0, 8.0] },
                    HeadParams::LinearHead { alpha: rng.normal_vec(r), cap: 100.0 },
                )
            }
            Family::IndexModel => {
                let knots: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
                let raw: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
                let link = models::project_head(&HeadParams::MonotoneLink {
                    knots: knots.clone(),
                    values: raw,
                });
                (
                    RepresentationParams::UnitDirection { b: rng.unit_vector(d), cap: 1.0 },
                    link,
                )
            }
        };
        let x = rng.normal_vec(d);
        let pred = match models::predict(&rep, &head, &x) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let y = match loss {
            LossId::Logistic => {
                if rng.uniform() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
            _ => rng.normal(),
        };
        // documented exclusions: absolute-loss ties and link kinks, where the
        // loss is nondifferentiable and central differences straddle a corner
        if loss == LossId::Absolute && (y - pred).abs() < 1e-6 {
            continue;
        }
        if let (
            RepresentationParams::UnitDirection { b, .. },
            HeadParams::MonotoneLink { knots, .. },
        ) = (&rep, &head)
        {
            let z = dot(b, &x);
            if knots.iter().any(|k| (z - k).abs() < 1e-3)
                || z < knots[0]
                || z > knots[knots.len() - 1]
            {
                continue;
            }
        }
        let grads = models::grad_params(loss, &rep, &head, &x, y).expect("compatible variants");
        let eval = |r: &RepresentationParams, h: &HeadParams| {
            models::loss_value(loss, models::predict(r, h, &x).expect("dims"), y).expect("label")
        };
        let rep_flat: Vec<f64> = match &grads.rep {
            RepGrad::Dense { mats } => mats.iter().flat_map(|m| m.data().to_vec()).collect(),
            RepGrad::Vector { v } => v.clone(),
        };
        for (idx, &g) in rep_flat.iter().enumerate() {
            let mut e = RepGrad::zeros_like(&rep);
            match &mut e {
                RepGrad::Dense { mats } => {
                    let mut off = idx;
                    for m in mats.iter_mut() {
                        if off < m.data().len() {
                            m.data_mut()[off] = 1.0;
                            break;
                        }
                        off -= m.data().len();
                    }
                }
                RepGrad::Vector { v } => v[idx] = 1.0,
            }
            let fd = (eval(&rep.step(&e, -eps), &head) - eval(&rep.step(&e, eps), &head))
                / (2.0 * eps);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
        }
        for (idx, &g) in grads.head.v.iter().enumerate() {
            let mut e = HeadGrad::zeros_like(&head);
            e.v[idx] = 1.0;
            let fd = (eval(&rep, &head.step(&e, -eps)) - eval(&rep, &head.step(&e, eps)))
                / (2.0 * eps);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
        }
        done += 1;
    }
    worst
}
