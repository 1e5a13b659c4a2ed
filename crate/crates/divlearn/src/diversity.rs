//! Task-averaged and worst-case representation differences, the (ν, ε)
//! diversity certificate, and the GLM curvature bounds.
//!
//! For linear-Gaussian regression both differences have closed forms through
//! the generalized Schur complement of the joint feature covariance:
//! d̄ = tr(Λ_sc·C) with C = AᵀA/t, and d = c2·σ1(Λ_sc). Everything else is
//! estimated by Monte Carlo over fresh covariate draws, with the conditional
//! label law integrated exactly so no label noise enters the estimates. The
//! Monte Carlo sup over the new-task class ascends from random sphere starts
//! and is therefore a lower bound on the true sup; closed form and Monte
//! Carlo coincide at the default new-task radius c2 = 1.

use crate::envs::{EnvError, Family, TaskEnvironment};
use crate::erm::{ball_constrained_least_squares, logistic_head_newton, ErmError};
use crate::models::{self, HeadParams, ModelError, RepresentationParams};
use crate::numlin::{self, dot, norm2, Matrix, NumlinError, Spectrum};
use crate::rng::{purpose, KeyedRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DivError {
    #[error("closed forms need a linear-Gaussian regression environment")]
    NotLinearGaussian,
    #[error("method unsupported for this family: {0}")]
    MethodUnsupported(String),
    #[error("empty sample set")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Erm(#[from] ErmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numlin(#[from] NumlinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMethod {
    ClosedForm,
    MonteCarlo,
}

impl DiffMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DiffMethod::ClosedForm => "closed_form",
            DiffMethod::MonteCarlo => "monte_carlo",
        }
    }
}

/// Monte Carlo value with its standard error (zero for closed forms).
#[derive(Debug, Clone, Copy)]
pub struct McValue {
    pub value: f64,
    pub stderr: f64,
}

/// Joint feature covariance blocks and their generalized Schur complement.
#[derive(Debug, Clone)]
pub struct SchurGap {
    /// Full 2r×2r block covariance [[F_ĥĥ, F_ĥh⋆], [F_h⋆ĥ, F_h⋆h⋆]].
    pub lambda: Matrix,
    /// F_h⋆h⋆ − F_h⋆ĥ (F_ĥĥ)⁺ F_ĥh⋆.
    pub lambda_sc: Matrix,
    pub sigma1: f64,
    /// tr(Λ_sc · AᵀA/t).
    pub trace_weighted: f64,
}

const PINV_REL_TOL: f64 = 1e-10;

/// Pseudo-inverse of a symmetric PSD matrix via its spectrum, dropping
/// eigenvalues below 1e-10 relative to the largest.
fn sym_pinv(spec: &Spectrum) -> Matrix {
    let n = spec.eigenvalues.len();
    let cutoff = PINV_REL_TOL * spec.max_eigenvalue().max(0.0);
    let mut out = Matrix::zeros(n, n);
    for k in 0..n {
        let l = spec.eigenvalues[k];
        if l <= cutoff || l <= 0.0 {
            continue;
        }
        let v = spec.eigenvectors.col(k);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, out.get(i, j) + v[i] * v[j] / l);
            }
        }
    }
    out
}

fn subspace_of(rep: &RepresentationParams) -> Option<&Matrix> {
    match rep {
        RepresentationParams::LinearSubspace { b } => Some(b),
        _ => None,
    }
}

/// Exact Schur-complement gap for a linear-Gaussian regression environment.
pub fn schur_gap(
    env: &TaskEnvironment,
    rep_hat: &RepresentationParams,
) -> Result<SchurGap, DivError> {
    if env.family != Family::LinearRegression {
        return Err(DivError::NotLinearGaussian);
    }
    let b_hat = subspace_of(rep_hat).ok_or(DivError::NotLinearGaussian)?;
    let b_star = subspace_of(&env.rep_truth).ok_or(DivError::NotLinearGaussian)?;
    let sigma = &env.covariates.sigma;
    let f_hh = b_hat.transpose().matmul(&sigma.matmul(b_hat));
    let f_hs = b_hat.transpose().matmul(&sigma.matmul(b_star));
    let f_ss = b_star.transpose().matmul(&sigma.matmul(b_star));
    let r_hat = f_hh.rows();
    let r_star = f_ss.rows();
    let mut lambda = Matrix::zeros(r_hat + r_star, r_hat + r_star);
    for i in 0..r_hat {
        for j in 0..r_hat {
            lambda.set(i, j, f_hh.get(i, j));
        }
        for j in 0..r_star {
            lambda.set(i, r_hat + j, f_hs.get(i, j));
            lambda.set(r_hat + j, i, f_hs.get(i, j));
        }
    }
    for i in 0..r_star {
        for j in 0..r_star {
            lambda.set(r_hat + i, r_hat + j, f_ss.get(i, j));
        }
    }
    let spec_hh = numlin::symmetric_eig(&f_hh)?;
    let pinv = sym_pinv(&spec_hh);
    let lambda_sc = f_ss.add_scaled(&f_hs.transpose().matmul(&pinv.matmul(&f_hs)), -1.0);
    let spec_sc = numlin::symmetric_eig(&lambda_sc)?;
    let sigma1 = spec_sc.max_eigenvalue().max(0.0);
    let a = env.head_matrix().ok_or(DivError::NotLinearGaussian)?;
    let c = a.transpose().matmul(&a).scale(1.0 / env.t as f64);
    let trace_weighted = lambda_sc.matmul(&c).trace();
    Ok(SchurGap { lambda, lambda_sc, sigma1, trace_weighted })
}

/// Conditional-mean features for the Monte Carlo estimators: candidate
/// features ĥ(x_i) stacked, plus the true predictor value z⋆_i per sample.
struct McBatch {
    hat_feats: Matrix,
    true_preds: Vec<f64>,
}

fn mc_batch(
    env: &TaskEnvironment,
    rep_hat: &RepresentationParams,
    truth_head: &HeadParams,
    n_eval: usize,
    rng: &mut KeyedRng,
) -> Result<McBatch, DivError> {
    let r_hat = rep_hat.dim_out();
    let mut hat_feats = Matrix::zeros(n_eval, r_hat);
    let mut true_preds = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let (x, _) = env.covariates.sample(rng);
        let h = models::rep_forward(rep_hat, &x)?;
        hat_feats.row_mut(i).copy_from_slice(&h);
        true_preds.push(models::predict(&env.rep_truth, truth_head, &x)?);
    }
    Ok(McBatch { hat_feats, true_preds })
}

/// Expected |Δ + η| − |η| for η uniform on [−a, a].
fn l1_noise_gap(delta: f64, a: f64) -> f64 {
    if a <= 0.0 {
        delta.abs()
    } else if delta.abs() >= a {
        delta.abs() - a / 2.0
    } else {
        delta * delta / (2.0 * a)
    }
}

fn kl_bernoulli_logits(z_true: f64, z_cand: f64) -> f64 {
    // E_y[ℓ(z_cand, y) − ℓ(z_true, y)] under y ~ Bern(σ(z_true))
    let p = models::sigmoid(z_true);
    let l1 = models::loss_value(models::LossId::Logistic, z_cand, 1.0).expect("label");
    let l0 = models::loss_value(models::LossId::Logistic, z_cand, 0.0).expect("label");
    let t1 = models::loss_value(models::LossId::Logistic, z_true, 1.0).expect("label");
    let t0 = models::loss_value(models::LossId::Logistic, z_true, 0.0).expect("label");
    p * (l1 - t1) + (1.0 - p) * (l0 - t0)
}

/// Inner infimum over f′ ∈ F on a sampled batch plus per-sample excess
/// differences; returns (mean, variance of per-sample diffs).
fn inner_inf_difference(
    env: &TaskEnvironment,
    batch: &McBatch,
    cap: f64,
) -> Result<(f64, f64), DivError> {
    let n = batch.true_preds.len();
    let diffs: Vec<f64> = match env.family {
        Family::LinearRegression | Family::NnRegression => {
            let alpha =
                ball_constrained_least_squares(&batch.hat_feats, &batch.true_preds, cap)?;
            (0..n)
                .map(|i| {
                    let p = dot(batch.hat_feats.row(i), &alpha);
                    let d = p - batch.true_preds[i];
                    d * d
                })
                .collect()
        }
        Family::LinearLogistic => {
            let soft: Vec<f64> =
                batch.true_preds.iter().map(|&z| models::sigmoid(z)).collect();
            let init = vec![0.0; batch.hat_feats.cols()];
            let alpha = logistic_head_newton(&batch.hat_feats, &soft, cap, &init, 80)?;
            (0..n)
                .map(|i| kl_bernoulli_logits(batch.true_preds[i], dot(batch.hat_feats.row(i), &alpha)))
                .collect()
        }
        Family::IndexModel => {
            let a = env.noise_scale * 3.0_f64.sqrt();
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|i| (batch.hat_feats.get(i, 0), batch.true_preds[i]))
                .collect();
            let link = models::fit_link(&pairs, None)?;
            let (knots, values) = match &link {
                HeadParams::MonotoneLink { knots, values } => (knots, values),
                _ => unreachable!(),
            };
            pairs
                .iter()
                .map(|&(z, m)| l1_noise_gap(models::link_eval(knots, values, z) - m, a))
                .collect()
        }
    };
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    Ok((mean, var))
}

/// Task-averaged representation difference d̄(h′; h⋆) over the training heads.
pub fn task_avg_difference(
    env: &TaskEnvironment,
    rep_hat: &RepresentationParams,
    n_eval: usize,
    seed: u64,
    method: DiffMethod,
) -> Result<McValue, DivError> {
    match method {
        DiffMethod::ClosedForm => {
            let gap = schur_gap(env, rep_hat)?;
            Ok(McValue { value: gap.trace_weighted, stderr: 0.0 })
        }
        DiffMethod::MonteCarlo => {
            let mut total = 0.0;
            let mut var_sum = 0.0;
            for j in 1..=env.t {
                let mut rng = KeyedRng::new(env.seed, &[purpose::SAMPLE, seed, j as u64]);
                let batch = mc_batch(env, rep_hat, env.head(j)?, n_eval, &mut rng)?;
                let (mean, var) = inner_inf_difference(env, &batch, env.caps.c1)?;
                total += mean;
                var_sum += var / n_eval as f64;
            }
            let t = env.t as f64;
            Ok(McValue { value: total / t, stderr: (var_sum / (t * t)).sqrt() })
        }
    }
}

/// Value function over new-task heads α₀ for the worst-case sup, with the
/// inner infimum solved on a fixed batch of true features. For squared loss
/// the value collapses to a quadratic in α₀ through the cached Gram blocks of
/// [Ĥ H⋆], making each evaluation O(r²); logistic re-solves the soft-label
/// Newton fit per evaluation.
struct SupObjective<'a> {
    env: &'a TaskEnvironment,
    hat_feats: &'a Matrix,
    star_feats: &'a Matrix,
    cap_inner: f64,
    quad: Option<QuadSup>,
}

struct QuadSup {
    solver: crate::erm::GramSolver,
    g_hh: Matrix,
    g_hs: Matrix,
    g_ss: Matrix,
}

impl<'a> SupObjective<'a> {
    fn new(
        env: &'a TaskEnvironment,
        hat_feats: &'a Matrix,
        star_feats: &'a Matrix,
        cap_inner: f64,
    ) -> Result<Self, DivError> {
        let quad = if matches!(env.family, Family::LinearRegression | Family::NnRegression) {
            let n = hat_feats.rows();
            let rh = hat_feats.cols();
            let rs = star_feats.cols();
            let mut g_hh = Matrix::zeros(rh, rh);
            let mut g_hs = Matrix::zeros(rh, rs);
            let mut g_ss = Matrix::zeros(rs, rs);
            for i in 0..n {
                let h = hat_feats.row(i);
                let s = star_feats.row(i);
                for a in 0..rh {
                    for b in a..rh {
                        g_hh.set(a, b, g_hh.get(a, b) + h[a] * h[b]);
                    }
                    for b in 0..rs {
                        g_hs.set(a, b, g_hs.get(a, b) + h[a] * s[b]);
                    }
                }
                for a in 0..rs {
                    for b in a..rs {
                        g_ss.set(a, b, g_ss.get(a, b) + s[a] * s[b]);
                    }
                }
            }
            for a in 0..rh {
                for b in 0..a {
                    g_hh.set(a, b, g_hh.get(b, a));
                }
            }
            for a in 0..rs {
                for b in 0..a {
                    g_ss.set(a, b, g_ss.get(b, a));
                }
            }
            let solver = crate::erm::GramSolver::from_gram(&g_hh)?;
            Some(QuadSup { solver, g_hh, g_hs, g_ss })
        } else {
            None
        };
        Ok(SupObjective { env, hat_feats, star_feats, cap_inner, quad })
    }

    fn value(&self, alpha0: &[f64]) -> Result<f64, DivError> {
        if let Some(q) = &self.quad {
            let n = self.hat_feats.rows() as f64;
            let hty = q.g_hs.matvec(alpha0);
            let alpha = q.solver.solve_ball(&hty, self.cap_inner);
            let val = dot(&alpha, &q.g_hh.matvec(&alpha)) - 2.0 * dot(&alpha, &hty)
                + dot(alpha0, &q.g_ss.matvec(alpha0));
            return Ok((val / n).max(0.0));
        }
        let n = self.hat_feats.rows();
        let true_preds: Vec<f64> =
            (0..n).map(|i| dot(self.star_feats.row(i), alpha0)).collect();
        let batch = McBatch { hat_feats: self.hat_feats.clone(), true_preds };
        let (mean, _) = inner_inf_difference(self.env, &batch, self.cap_inner)?;
        Ok(mean)
    }

    fn value_and_stderr(&self, alpha0: &[f64]) -> Result<(f64, f64), DivError> {
        let n = self.hat_feats.rows();
        let true_preds: Vec<f64> =
            (0..n).map(|i| dot(self.star_feats.row(i), alpha0)).collect();
        let batch = McBatch { hat_feats: self.hat_feats.clone(), true_preds };
        let (mean, var) = inner_inf_difference(self.env, &batch, self.cap_inner)?;
        Ok((mean, (var / n as f64).sqrt()))
    }
}

/// Worst-case representation difference d(h′; h⋆) over the new-task class.
///
/// Closed form returns c2·σ1(Λ_sc) as the diversity lemma states it. The
/// Monte Carlo route runs multi-start projected gradient ascent over α₀ on
/// the radius-c2 sphere (index models instead enumerate the hull vertices)
/// and reports the best value found, a lower bound on the sup.
pub fn worst_case_difference(
    env: &TaskEnvironment,
    rep_hat: &RepresentationParams,
    c2: f64,
    n_eval: usize,
    seed: u64,
    method: DiffMethod,
    starts: usize,
) -> Result<McValue, DivError> {
    match method {
        DiffMethod::ClosedForm => {
            let gap = schur_gap(env, rep_hat)?;
            Ok(McValue { value: c2 * gap.sigma1, stderr: 0.0 })
        }
        DiffMethod::MonteCarlo => {
            if env.family == Family::IndexModel {
                // sup over the hull occurs at its generating links
                let mut best = McValue { value: f64::NEG_INFINITY, stderr: 0.0 };
                for j in 1..=env.t {
                    let mut rng = KeyedRng::new(env.seed, &[purpose::SAMPLE, seed, j as u64]);
                    let batch = mc_batch(env, rep_hat, env.head(j)?, n_eval, &mut rng)?;
                    let (mean, var) = inner_inf_difference(env, &batch, env.caps.c1)?;
                    if mean > best.value {
                        best = McValue { value: mean, stderr: (var / n_eval as f64).sqrt() };
                    }
                }
                return Ok(best);
            }
            let mut rng = KeyedRng::new(env.seed, &[purpose::SAMPLE, seed, 0]);
            let r_star = env.rep_truth.dim_out();
            let mut hat_feats = Matrix::zeros(n_eval, rep_hat.dim_out());
            let mut star_feats = Matrix::zeros(n_eval, r_star);
            for i in 0..n_eval {
                let (x, _) = env.covariates.sample(&mut rng);
                hat_feats
                    .row_mut(i)
                    .copy_from_slice(&models::rep_forward(rep_hat, &x)?);
                star_feats
                    .row_mut(i)
                    .copy_from_slice(&models::rep_forward(&env.rep_truth, &x)?);
            }
            let obj = SupObjective::new(env, &hat_feats, &star_feats, env.caps.c1)?;
            let fd_h = 1e-4 * c2;
            let mut best_alpha: Option<Vec<f64>> = None;
            let mut best_value = f64::NEG_INFINITY;
            for start in 0..starts.max(1) {
                let mut srng =
                    KeyedRng::new(env.seed, &[purpose::START, seed, start as u64]);
                let mut alpha: Vec<f64> =
                    srng.unit_vector(r_star).iter().map(|v| v * c2).collect();
                let mut val = obj.value(&alpha)?;
                let mut step = 0.5 * c2;
                for _ in 0..60 {
                    // central-difference gradient of the value function
                    let mut grad = vec![0.0; r_star];
                    for k in 0..r_star {
                        let mut up = alpha.clone();
                        up[k] += fd_h;
                        let mut dn = alpha.clone();
                        dn[k] -= fd_h;
                        grad[k] = (obj.value(&up)? - obj.value(&dn)?) / (2.0 * fd_h);
                    }
                    if norm2(&grad) < 1e-12 {
                        break;
                    }
                    let mut improved = false;
                    while step > 1e-10 * c2 {
                        let cand_raw = numlin::axpy(&alpha, &grad, step);
                        let nr = norm2(&cand_raw);
                        let cand: Vec<f64> =
                            cand_raw.iter().map(|v| v * c2 / nr.max(1e-300)).collect();
                        let cv = obj.value(&cand)?;
                        if cv > val + 1e-15 {
                            alpha = cand;
                            val = cv;
                            improved = true;
                            step *= 1.5;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !improved {
                        break;
                    }
                }
                if val > best_value {
                    best_value = val;
                    best_alpha = Some(alpha);
                }
            }
            let alpha = best_alpha.expect("at least one start");
            let (value, stderr) = obj.value_and_stderr(&alpha)?;
            Ok(McValue { value, stderr })
        }
    }
}

/// Per-sample diversity report; `nu_implied` is the largest ν for which
/// d_worst ≤ d_avg/ν + ε holds at this sample.
#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub nu_tilde: f64,
    pub d_avg: f64,
    pub d_worst: f64,
    pub stderr_avg: f64,
    pub stderr_worst: f64,
    pub nu_implied: f64,
    pub epsilon_used: f64,
    pub method: DiffMethod,
    pub certified: bool,
}

#[derive(Debug, Clone)]
pub struct CertificateOutcome {
    pub reports: Vec<DiversityReport>,
    /// min over samples of the implied ν — any finite sample only bounds the
    /// uniform-over-H quantity of the definition from above, never proves it.
    pub nu_certified: f64,
    /// ν̃/c2 for squared-loss linear heads, 1/t for index models, absent for
    /// logistic where the lemma's constant is unquantified.
    pub nu_theory: Option<f64>,
    pub epsilon_used: f64,
}

/// Evaluate both representation differences for each candidate h′ and check
/// the diversity inequality of the certificate.
pub fn diversity_certificate(
    env: &TaskEnvironment,
    rep_hat_samples: &[RepresentationParams],
    epsilon: f64,
    n_eval: usize,
    seed: u64,
) -> Result<CertificateOutcome, DivError> {
    if rep_hat_samples.is_empty() {
        return Err(DivError::Empty);
    }
    let nu_tilde = crate::envs::diversity_parameter(env)?.nu_tilde;
    let closed = env.family == Family::LinearRegression
        && rep_hat_samples.iter().all(|r| subspace_of(r).is_some());
    let nu_theory = match env.family {
        Family::LinearRegression | Family::NnRegression => Some(nu_tilde / env.caps.c2),
        Family::IndexModel => Some(1.0 / env.t as f64),
        Family::LinearLogistic => None,
    };
    let mut reports = Vec::with_capacity(rep_hat_samples.len());
    let mut nu_certified = f64::INFINITY;
    for (idx, rep_hat) in rep_hat_samples.iter().enumerate() {
        let sample_seed = seed.wrapping_add(idx as u64);
        let (d_avg, d_worst, method) = if closed {
            let gap = schur_gap(env, rep_hat)?;
            (
                McValue { value: gap.trace_weighted, stderr: 0.0 },
                McValue { value: env.caps.c2 * gap.sigma1, stderr: 0.0 },
                DiffMethod::ClosedForm,
            )
        } else if env.family == Family::IndexModel {
            // shared per-task estimates keep the mean/max comparison exact
            let mut means = Vec::with_capacity(env.t);
            let mut vars = Vec::with_capacity(env.t);
            for j in 1..=env.t {
                let mut rng =
                    KeyedRng::new(env.seed, &[purpose::SAMPLE, sample_seed, j as u64]);
                let batch = mc_batch(env, rep_hat, env.head(j)?, n_eval, &mut rng)?;
                let (mean, var) = inner_inf_difference(env, &batch, env.caps.c1)?;
                means.push(mean);
                vars.push(var / n_eval as f64);
            }
            let t = env.t as f64;
            let avg = means.iter().sum::<f64>() / t;
            let avg_se = (vars.iter().sum::<f64>() / (t * t)).sqrt();
            let (worst_idx, worst) = means
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .expect("t >= 1");
            (
                McValue { value: avg, stderr: avg_se },
                McValue { value: *worst, stderr: vars[worst_idx].sqrt() },
                DiffMethod::MonteCarlo,
            )
        } else {
            let avg = task_avg_difference(env, rep_hat, n_eval, sample_seed, DiffMethod::MonteCarlo)?;
            let worst = worst_case_difference(
                env,
                rep_hat,
                env.caps.c2,
                n_eval,
                sample_seed,
                DiffMethod::MonteCarlo,
                32,
            )?;
            (avg, worst, DiffMethod::MonteCarlo)
        };
        let slack = d_worst.value - epsilon;
        let nu_implied = if slack <= 1e-12 {
            f64::INFINITY
        } else {
            d_avg.value / slack
        };
        let certified = match nu_theory {
            Some(nu) => {
                let tol = 1e-9 * d_avg.value.abs()
                    + 3.0 * (d_avg.stderr + d_worst.stderr)
                    + 1e-12;
                d_worst.value <= d_avg.value / nu + epsilon + tol
            }
            None => true,
        };
        nu_certified = nu_certified.min(nu_implied);
        reports.push(DiversityReport {
            nu_tilde,
            d_avg: d_avg.value,
            d_worst: d_worst.value,
            stderr_avg: d_avg.stderr,
            stderr_worst: d_worst.stderr,
            nu_implied,
            epsilon_used: epsilon,
            method,
            certified,
        });
    }
    Ok(CertificateOutcome { reports, nu_certified, nu_theory, epsilon_used: epsilon })
}

/// Curvature coefficients bracketing the pointwise Bernoulli KL for the
/// logistic link: KL lies between lower·Δ²/2 and upper·Δ²/2 with
/// lower = ¼·exp(−max(|z_hat|, |z_true|)) and upper = ¼.
pub fn glm_curvature_bounds(z_hat: f64, z_true: f64) -> (f64, f64) {
    let lower = 0.25 * (-z_hat.abs().max(z_true.abs())).exp();
    (lower, 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_environment, EnvOptions};

    fn linear_env(d: usize, r: usize, t: usize, seed: u64) -> TaskEnvironment {
        let mut opts = EnvOptions::default();
        opts.kappa = 2.0;
        make_environment(Family::LinearRegression, d, r, t, seed, &opts).unwrap()
    }

    fn subspace(cols: &[&[f64]]) -> RepresentationParams {
        let d = cols[0].len();
        let m = Matrix::from_fn(d, cols.len(), |i, j| cols[j][i]);
        RepresentationParams::LinearSubspace { b: m }
    }

    fn random_subspace(d: usize, r: usize, seed: u64) -> RepresentationParams {
        let mut rng = KeyedRng::new(seed, &[0xb5]);
        let g = Matrix::from_fn(d, r, |_, _| rng.normal());
        RepresentationParams::LinearSubspace { b: numlin::qr_orthonormalize(&g).unwrap() }
    }

    #[test]
    fn schur_gap_zero_at_truth() {
        let env = linear_env(6, 2, 8, 3);
        let gap = schur_gap(&env, &env.rep_truth).unwrap();
        assert!(gap.lambda_sc.max_abs() < 1e-10);
        assert!(gap.sigma1 < 1e-10);
    }

    #[test]
    fn schur_gap_orthogonal_directions() {
        let mut env = linear_env(2, 1, 2, 5);
        env.rep_truth = subspace(&[&[1.0, 0.0]]);
        let rep_hat = subspace(&[&[0.0, 1.0]]);
        let gap = schur_gap(&env, &rep_hat).unwrap();
        assert!((gap.lambda_sc.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schur_gap_sin_squared() {
        let theta = 0.6_f64;
        let mut env = linear_env(2, 1, 2, 7);
        env.rep_truth = subspace(&[&[1.0, 0.0]]);
        let rep_hat = subspace(&[&[theta.cos(), theta.sin()]]);
        let gap = schur_gap(&env, &rep_hat).unwrap();
        let expected = theta.sin() * theta.sin();
        assert!((gap.lambda_sc.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn schur_gap_psd_on_random_pairs() {
        for seed in 0..20 {
            let env = linear_env(6, 2, 8, 100 + seed);
            let rep_hat = random_subspace(6, 2, seed);
            let gap = schur_gap(&env, &rep_hat).unwrap();
            let spec = numlin::symmetric_eig(&gap.lambda_sc).unwrap();
            assert!(spec.min_eigenvalue() >= -1e-10, "Λ_sc eigenvalue {}", spec.min_eigenvalue());
        }
    }

    #[test]
    fn avg_difference_zero_at_truth() {
        let env = linear_env(5, 2, 4, 11);
        let cf = task_avg_difference(&env, &env.rep_truth, 0, 0, DiffMethod::ClosedForm).unwrap();
        assert!(cf.value.abs() < 1e-12);
        let mc =
            task_avg_difference(&env, &env.rep_truth, 20_000, 0, DiffMethod::MonteCarlo).unwrap();
        assert!(mc.value.abs() <= 3.0 * mc.stderr + 1e-9, "mc {} se {}", mc.value, mc.stderr);
    }

    #[test]
    fn avg_difference_sin_squared_instance() {
        let theta = 0.5_f64;
        let mut env = linear_env(2, 1, 1, 13);
        env.rep_truth = subspace(&[&[1.0, 0.0]]);
        env.heads_truth[0] = HeadParams::LinearHead { alpha: vec![1.0], cap: 2.0 };
        let rep_hat = subspace(&[&[theta.cos(), theta.sin()]]);
        let expected = theta.sin() * theta.sin();
        let cf = task_avg_difference(&env, &rep_hat, 0, 0, DiffMethod::ClosedForm).unwrap();
        assert!((cf.value - expected).abs() < 1e-12);
        let mc = task_avg_difference(&env, &rep_hat, 200_000, 1, DiffMethod::MonteCarlo).unwrap();
        assert!(
            (mc.value - expected).abs() <= (0.02 * expected).max(3.0 * mc.stderr),
            "mc {} expected {expected}",
            mc.value
        );
    }

    #[test]
    fn logistic_rotation_invariance() {
        let mut opts = EnvOptions::default();
        opts.kappa = 2.0;
        let env = make_environment(Family::LinearLogistic, 5, 2, 3, 17, &opts).unwrap();
        let b = subspace_of(&env.rep_truth).unwrap();
        // rotate the basis inside its own span
        let phi = 0.7_f64;
        let q = Matrix::from_rows(&[
            vec![phi.cos(), -phi.sin()],
            vec![phi.sin(), phi.cos()],
        ]);
        let rep_rot = RepresentationParams::LinearSubspace { b: b.matmul(&q) };
        let mc = task_avg_difference(&env, &rep_rot, 50_000, 2, DiffMethod::MonteCarlo).unwrap();
        assert!(mc.value.abs() <= 3.0 * mc.stderr + 1e-8, "mc {} se {}", mc.value, mc.stderr);
    }

    #[test]
    fn worst_case_zero_at_truth() {
        let env = linear_env(5, 2, 4, 19);
        let cf = worst_case_difference(&env, &env.rep_truth, 1.0, 0, 0, DiffMethod::ClosedForm, 0)
            .unwrap();
        assert!(cf.value.abs() < 1e-10);
    }

    #[test]
    fn worst_case_sin_squared_instance() {
        let theta = 0.5_f64;
        let mut env = linear_env(2, 1, 1, 23);
        env.rep_truth = subspace(&[&[1.0, 0.0]]);
        env.heads_truth[0] = HeadParams::LinearHead { alpha: vec![1.0], cap: 2.0 };
        let rep_hat = subspace(&[&[theta.cos(), theta.sin()]]);
        let expected = theta.sin() * theta.sin();
        let cf =
            worst_case_difference(&env, &rep_hat, 1.0, 0, 0, DiffMethod::ClosedForm, 0).unwrap();
        assert!((cf.value - expected).abs() < 1e-12);
        let mc =
            worst_case_difference(&env, &rep_hat, 1.0, 100_000, 1, DiffMethod::MonteCarlo, 8)
                .unwrap();
        assert!(
            (mc.value - expected).abs() <= (0.02 * expected).max(3.0 * mc.stderr),
            "mc {} expected {expected}",
            mc.value
        );
    }

    #[test]
    fn mc_worst_case_lower_bounds_closed_form() {
        for seed in 0..10 {
            let env = linear_env(5, 2, 6, 300 + seed);
            let rep_hat = random_subspace(5, 2, 40 + seed);
            let cf = worst_case_difference(&env, &rep_hat, 1.0, 0, 0, DiffMethod::ClosedForm, 0)
                .unwrap();
            let mc =
                worst_case_difference(&env, &rep_hat, 1.0, 40_000, seed, DiffMethod::MonteCarlo, 16)
                    .unwrap();
            assert!(
                mc.value <= cf.value + 3.0 * mc.stderr,
                "mc {} exceeds cf {} (seed {seed})",
                mc.value,
                cf.value
            );
        }
    }

    #[test]
    fn certificate_vacuous_at_truth() {
        let env = linear_env(5, 2, 4, 29);
        let out =
            diversity_certificate(&env, &[env.rep_truth.clone()], 0.0, 0, 0).unwrap();
        assert!(out.reports[0].certified);
        assert!(out.nu_certified.is_infinite());
    }

    #[test]
    fn certificate_holds_on_random_linear_samples() {
        let env = linear_env(6, 2, 8, 31);
        let samples: Vec<RepresentationParams> =
            (0..20).map(|k| random_subspace(6, 2, 500 + k)).collect();
        let out = diversity_certificate(&env, &samples, 0.0, 0, 0).unwrap();
        let nu = out.nu_theory.unwrap();
        for rep in &out.reports {
            assert!(rep.certified, "closed-form certificate failed");
            assert!(rep.d_worst * nu <= rep.d_avg * (1.0 + 1e-9) + 1e-12);
        }
        assert!(out.nu_certified >= nu - 1e-9);
    }

    #[test]
    fn certificate_index_hull_bound() {
        let mut opts = EnvOptions::default();
        opts.noise_scale = 0.05;
        let env = make_environment(Family::IndexModel, 4, 1, 3, 37, &opts).unwrap();
        let samples: Vec<RepresentationParams> = (0..5)
            .map(|k| {
                let mut rng = KeyedRng::new(900 + k, &[1]);
                RepresentationParams::UnitDirection { b: rng.unit_vector(4), cap: 1.0 }
            })
            .collect();
        let out = diversity_certificate(&env, &samples, 0.0, 4000, 3).unwrap();
        for rep in &out.reports {
            assert!(rep.certified);
        }
        assert!(out.nu_certified >= 1.0 / 3.0 - 1e-9);
    }

    #[test]
    fn sup_dominates_average_when_heads_in_f0() {
        let env = linear_env(5, 2, 5, 41);
        let rep_hat = random_subspace(5, 2, 77);
        let avg = task_avg_difference(&env, &rep_hat, 30_000, 5, DiffMethod::MonteCarlo).unwrap();
        let worst =
            worst_case_difference(&env, &rep_hat, env.caps.c2, 30_000, 5, DiffMethod::MonteCarlo, 16)
                .unwrap();
        assert!(
            worst.value >= avg.value - 3.0 * (avg.stderr + worst.stderr),
            "worst {} avg {}",
            worst.value,
            avg.value
        );
    }

    #[test]
    fn closed_forms_rotation_invariant() {
        let env = linear_env(6, 2, 8, 43);
        let rep_hat = random_subspace(6, 2, 88);
        let b = subspace_of(&rep_hat).unwrap();
        let phi = 1.1_f64;
        let q = Matrix::from_rows(&[
            vec![phi.cos(), -phi.sin()],
            vec![phi.sin(), phi.cos()],
        ]);
        let rep_rot = RepresentationParams::LinearSubspace { b: b.matmul(&q) };
        let a1 = task_avg_difference(&env, &rep_hat, 0, 0, DiffMethod::ClosedForm).unwrap();
        let a2 = task_avg_difference(&env, &rep_rot, 0, 0, DiffMethod::ClosedForm).unwrap();
        assert!((a1.value - a2.value).abs() < 1e-10);
        let w1 = worst_case_difference(&env, &rep_hat, 1.0, 0, 0, DiffMethod::ClosedForm, 0)
            .unwrap();
        let w2 = worst_case_difference(&env, &rep_rot, 1.0, 0, 0, DiffMethod::ClosedForm, 0)
            .unwrap();
        assert!((w1.value - w2.value).abs() < 1e-10);
    }

    #[test]
    fn glm_bounds_at_zero() {
        let (lo, hi) = glm_curvature_bounds(0.0, 0.0);
        assert_eq!(lo, 0.25);
        assert_eq!(hi, 0.25);
        // Φ″(0) = 1/4 for Φ(t) = log(1+e^t)
        let h = 1e-5;
        let phi = |t: f64| (1.0 + t.exp()).ln();
        let second = (phi(h) - 2.0 * phi(0.0) + phi(-h)) / (h * h);
        assert!((second - 0.25).abs() < 1e-5);
    }

    fn bernoulli_kl(p: f64, q: f64) -> f64 {
        let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
        term(p, q) + term(1.0 - p, 1.0 - q)
    }

    #[test]
    fn glm_bounds_bracket_kl_pointwise() {
        for i in 0..21 {
            for j in 0..21 {
                let z_true = -5.0 + 0.5 * i as f64;
                let z_hat = -5.0 + 0.5 * j as f64;
                let kl = bernoulli_kl(models::sigmoid(z_true), models::sigmoid(z_hat));
                let d2 = (z_hat - z_true) * (z_hat - z_true);
                let (lo, hi) = glm_curvature_bounds(z_hat, z_true);
                assert!(kl >= lo * d2 / 2.0 - 1e-12, "lower failed at ({z_hat},{z_true})");
                assert!(kl <= hi * d2 / 2.0 + 1e-12, "upper failed at ({z_hat},{z_true})");
            }
        }
    }

    #[test]
    fn empty_sample_set_rejected() {
        let env = linear_env(4, 1, 2, 47);
        assert!(matches!(
            diversity_certificate(&env, &[], 0.0, 10, 0),
            Err(DivError::Empty)
        ));
    }
}
