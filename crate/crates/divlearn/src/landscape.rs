//! Burer–Monteiro factorized recovery of the stacked head/feature matrix
//! M⋆ = A B⋆ᵀ from uniform-task linear measurements, with incoherence
//! monitoring and subspace-angle diagnostics on the extracted features.
//!
//! Data is generated in the natural per-task model y = ⟨e_j x ᵀ, M⋆⟩ + σ·ε;
//! the objective applies the √t rescaling internally, which matches the
//! rescaled measurement model up to a global factor of t on the data term.

use crate::numlin::{self, dot, Matrix, NumlinError};
use crate::rng::{purpose, KeyedRng};
use crate::erm::OptConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("optimization diverged")]
    Diverged,
    #[error("factor V is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Numlin(#[from] NumlinError),
}

/// Factor pair (U, V) parameterizing M = UVᵀ.
#[derive(Debug, Clone)]
pub struct FactoredParams {
    pub u: Matrix,
    pub v: Matrix,
}

/// One uniform-task measurement: task index, covariate vector, response.
#[derive(Debug, Clone)]
pub struct SensingSample {
    pub task: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Measurement set for the factored recovery problem.
#[derive(Debug, Clone)]
pub struct SensingData {
    pub t: usize,
    pub d: usize,
    pub samples: Vec<SensingSample>,
}

/// Draw n samples from the natural uniform-task model for ground truth
/// M⋆ = head_matrix · B⋆ᵀ with noise ε ~ N(0, 1) scaled by `noise`.
pub fn uniform_task_samples(
    m_star: &Matrix,
    n: usize,
    noise: f64,
    seed: u64,
) -> SensingData {
    let t = m_star.rows();
    let d = m_star.cols();
    let mut rng = KeyedRng::new(seed, &[purpose::SAMPLE]);
    let samples = (0..n)
        .map(|_| {
            let task = rng.below(t);
            let x = rng.normal_vec(d);
            let y = dot(m_star.row(task), &x) + noise * rng.normal();
            SensingSample { task, x, y }
        })
        .collect();
    SensingData { t, d, samples }
}

/// Objective value and analytic gradients of
/// f(U, V) = (2/n) Σ t·(y_i − u_{j_i}ᵀ(Vᵀx_i))² + ½‖UᵀU − VᵀV‖_F².
pub fn bm_objective_grad(
    params: &FactoredParams,
    data: &SensingData,
    t: usize,
) -> Result<(f64, Matrix, Matrix), LandscapeError> {
    let (tu, r) = (params.u.rows(), params.u.cols());
    let dv = params.v.rows();
    if tu != t || params.v.cols() != r {
        return Err(LandscapeError::DimMismatch(format!(
            "U is {tu}x{r}, V is {dv}x{}, t = {t}",
            params.v.cols()
        )));
    }
    let n = data.samples.len();
    if n == 0 {
        return Err(LandscapeError::DimMismatch("no samples".into()));
    }
    let tf = t as f64;
    let mut value = 0.0;
    let mut grad_u = Matrix::zeros(tu, r);
    let mut grad_v = Matrix::zeros(dv, r);
    let scale = 2.0 / n as f64;
    for s in &data.samples {
        if s.task >= t || s.x.len() != dv {
            return Err(LandscapeError::DimMismatch("sample out of range".into()));
        }
        let w = params.v.tr_matvec(&s.x); // Vᵀx
        let resid = dot(params.u.row(s.task), &w) - s.y;
        value += scale * tf * resid * resid;
        let gu = scale * tf * 2.0 * resid;
        {
            let row = grad_u.row_mut(s.task);
            for (o, &wk) in row.iter_mut().zip(w.iter()) {
                *o += gu * wk;
            }
        }
        let urow = params.u.row(s.task);
        for i in 0..dv {
            let xi = gu * s.x[i];
            if xi == 0.0 {
                continue;
            }
            let row = grad_v.row_mut(i);
            for (o, &uk) in row.iter_mut().zip(urow.iter()) {
                *o += xi * uk;
            }
        }
    }
    // balancing regularizer ½‖UᵀU − VᵀV‖²: ∂U = 2UΔ, ∂V = −2VΔ
    let delta = params
        .u
        .transpose()
        .matmul(&params.u)
        .add_scaled(&params.v.transpose().matmul(&params.v), -1.0);
    let f = delta.frobenius_norm();
    value += 0.5 * f * f;
    grad_u = grad_u.add_scaled(&params.u.matmul(&delta), 2.0);
    grad_v = grad_v.add_scaled(&params.v.matmul(&delta), -2.0);
    Ok((value, grad_u, grad_v))
}

fn objective_only(params: &FactoredParams, data: &SensingData, t: usize) -> f64 {
    let n = data.samples.len() as f64;
    let tf = t as f64;
    let mut value = 0.0;
    for s in &data.samples {
        let w = params.v.tr_matvec(&s.x);
        let resid = dot(params.u.row(s.task), &w) - s.y;
        value += 2.0 / n * tf * resid * resid;
    }
    let delta = params
        .u
        .transpose()
        .matmul(&params.u)
        .add_scaled(&params.v.transpose().matmul(&params.v), -1.0);
    let f = delta.frobenius_norm();
    value + 0.5 * f * f
}

/// Backtracking gradient descent on the factored objective from a small
/// random init; best restart wins. The trace (recorded when `opt.trace` is
/// set) follows the winning restart.
pub fn bm_fit_traced(
    data: &SensingData,
    t: usize,
    d: usize,
    r: usize,
    opt: &OptConfig,
) -> Result<(FactoredParams, Vec<crate::erm::TracePoint>), LandscapeError> {
    if data.samples.is_empty() {
        return Err(LandscapeError::DimMismatch("no samples".into()));
    }
    let mut best: Option<(f64, FactoredParams, Vec<crate::erm::TracePoint>)> = None;
    for restart in 0..opt.restarts.max(1) {
        let mut rng = KeyedRng::new(opt.seed, &[purpose::INIT, restart as u64]);
        let init_scale = 1e-2 / ((d * r) as f64).sqrt();
        let mut params = FactoredParams {
            u: Matrix::from_fn(t, r, |_, _| init_scale * rng.normal()),
            v: Matrix::from_fn(d, r, |_, _| init_scale * rng.normal()),
        };
        let mut value = objective_only(&params, data, t);
        if !value.is_finite() {
            continue;
        }
        let mut trace = Vec::new();
        let mut last_step = opt.step_size;
        for iter in 0..opt.max_iters {
            let (val, gu, gv) = bm_objective_grad(&params, data, t)?;
            value = val;
            let gnorm = (gu.frobenius_norm().powi(2) + gv.frobenius_norm().powi(2)).sqrt();
            if gnorm < opt.tol_grad {
                break;
            }
            let base = (opt.step_size * opt.step_decay.powi(iter as i32)).min(last_step * 4.0);
            let mut step = base.max(1e-18);
            let mut accepted = false;
            while step >= 1e-18 {
                let cand = FactoredParams {
                    u: params.u.add_scaled(&gu, -step),
                    v: params.v.add_scaled(&gv, -step),
                };
                let cv = objective_only(&cand, data, t);
                if cv.is_finite() && cv <= value - 1e-4 * step * gnorm * gnorm {
                    params = cand;
                    value = cv;
                    last_step = step;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if opt.trace {
                trace.push(crate::erm::TracePoint {
                    iter,
                    risk: value,
                    step: if accepted { last_step } else { 0.0 },
                    grad_norm: gnorm,
                });
            }
            if !accepted {
                break;
            }
        }
        let better = match &best {
            None => true,
            Some((bv, _, _)) => value < *bv,
        };
        if better {
            best = Some((value, params, trace));
        }
    }
    best.map(|(_, p, tr)| (p, tr)).ok_or(LandscapeError::Diverged)
}

/// Backtracking gradient descent on the factored objective; best restart wins.
pub fn bm_fit(
    data: &SensingData,
    t: usize,
    d: usize,
    r: usize,
    opt: &OptConfig,
) -> Result<FactoredParams, LandscapeError> {
    bm_fit_traced(data, t, d, r, opt).map(|(p, _)| p)
}

/// Orthonormal basis of the column space of V.
pub fn extract_features(params: &FactoredParams) -> Result<Matrix, LandscapeError> {
    numlin::qr_orthonormalize(&params.v).map_err(|e| match e {
        NumlinError::RankDeficient(_) => LandscapeError::RankDeficient,
        other => LandscapeError::Numlin(other),
    })
}

/// Membership report for the incoherence set W.
#[derive(Debug, Clone)]
pub struct IncoherenceReport {
    pub max_row_u_sq: f64,
    pub op_norm_u_sq: f64,
    pub op_norm_v_sq: f64,
    pub row_threshold: f64,
    pub op_threshold: f64,
    pub in_set: bool,
}

/// Evaluate the three constraints of W: max_i ‖e_iᵀU‖² ≤ C0·κ̄·r·σ⋆1/t,
/// ‖U‖² ≤ C0·σ⋆1, ‖V‖² ≤ C0·σ⋆1.
pub fn incoherence_report(
    params: &FactoredParams,
    c0: f64,
    kappa_bar: f64,
    sigma1_star: f64,
    t: usize,
    r: usize,
) -> Result<IncoherenceReport, LandscapeError> {
    let max_row_u_sq = (0..params.u.rows())
        .map(|i| dot(params.u.row(i), params.u.row(i)))
        .fold(0.0_f64, f64::max);
    let gram_u = params.u.transpose().matmul(&params.u);
    let gram_v = params.v.transpose().matmul(&params.v);
    let op_norm_u_sq = numlin::symmetric_eig(&gram_u)?.max_eigenvalue().max(0.0);
    let op_norm_v_sq = numlin::symmetric_eig(&gram_v)?.max_eigenvalue().max(0.0);
    let row_threshold = c0 * kappa_bar * r as f64 * sigma1_star / t as f64;
    let op_threshold = c0 * sigma1_star;
    let in_set = max_row_u_sq <= row_threshold
        && op_norm_u_sq <= op_threshold
        && op_norm_v_sq <= op_threshold;
    Ok(IncoherenceReport {
        max_row_u_sq,
        op_norm_u_sq,
        op_norm_v_sq,
        row_threshold,
        op_threshold,
        in_set,
    })
}

/// Imbalance ‖UᵀU − VᵀV‖_F of a factor pair.
pub fn balance_gap(params: &FactoredParams) -> f64 {
    params
        .u
        .transpose()
        .matmul(&params.u)
        .add_scaled(&params.v.transpose().matmul(&params.v), -1.0)
        .frobenius_norm()
}

/// Singular values of a ground-truth M⋆ (descending), via its Gram spectrum.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>, LandscapeError> {
    let gram = m.transpose().matmul(m);
    let spec = numlin::symmetric_eig(&gram)?;
    Ok(spec.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect())
}

/// Balanced ground-truth factors U⋆ = X√D, V⋆ = Y√D from the rank-r SVD of
/// M⋆, for incoherence checks on the truth.
pub fn balanced_truth_factors(m: &Matrix, r: usize) -> Result<FactoredParams, LandscapeError> {
    let gram = m.transpose().matmul(m);
    let spec = numlin::symmetric_eig(&gram)?;
    let t = m.rows();
    let d = m.cols();
    let mut u = Matrix::zeros(t, r);
    let mut v = Matrix::zeros(d, r);
    for k in 0..r.min(spec.eigenvalues.len()) {
        let lambda = spec.eigenvalues[k].max(0.0);
        if lambda <= 1e-24 {
            continue;
        }
        let sing = lambda.sqrt();
        let y = spec.eigenvectors.col(k);
        let my = m.matvec(&y);
        for i in 0..t {
            u.set(i, k, my[i] / sing * sing.sqrt());
        }
        for i in 0..d {
            v.set(i, k, y[i] * sing.sqrt());
        }
    }
    Ok(FactoredParams { u, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_environment, EnvOptions, Family};
    use crate::numlin::subspace_sine;

    fn truth_matrix(t: usize, d: usize, r: usize, seed: u64) -> Matrix {
        let env = make_environment(
            Family::LinearRegression,
            d,
            r,
            t,
            seed,
            &EnvOptions { kappa: 2.0, ..EnvOptions::default() },
        )
        .unwrap();
        let a = env.head_matrix().unwrap();
        let b = match &env.rep_truth {
            crate::models::RepresentationParams::LinearSubspace { b } => b.clone(),
            _ => unreachable!(),
        };
        a.matmul(&b.transpose())
    }

    #[test]
    fn objective_zero_at_zero_on_zero_data() {
        let data = SensingData {
            t: 2,
            d: 3,
            samples: vec![SensingSample { task: 0, x: vec![1.0, 0.0, 0.0], y: 0.0 }],
        };
        let params = FactoredParams { u: Matrix::zeros(2, 2), v: Matrix::zeros(3, 2) };
        let (v, gu, gv) = bm_objective_grad(&params, &data, 2).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(gu.max_abs(), 0.0);
        assert_eq!(gv.max_abs(), 0.0);
    }

    #[test]
    fn objective_zero_at_balanced_truth() {
        let m = truth_matrix(3, 5, 2, 7);
        let truth = balanced_truth_factors(&m, 2).unwrap();
        // balancing holds for the SVD factors
        assert!(balance_gap(&truth) < 1e-10);
        let data = uniform_task_samples(&m, 200, 0.0, 3);
        let (v, _, _) = bm_objective_grad(&truth, &data, 3).unwrap();
        assert!(v < 1e-18, "objective at truth {v}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = KeyedRng::new(5, &[77]);
        for _ in 0..20 {
            let (t, d, r) = (3, 4, 2);
            let m = truth_matrix(t, d, r, 11);
            let data = uniform_task_samples(&m, 12, 0.3, rng.below(1000) as u64);
            let params = FactoredParams {
                u: Matrix::from_fn(t, r, |_, _| 0.5 * rng.normal()),
                v: Matrix::from_fn(d, r, |_, _| 0.5 * rng.normal()),
            };
            let (_, gu, gv) = bm_objective_grad(&params, &data, t).unwrap();
            let eps = 1e-5;
            let mut worst = 0.0_f64;
            for i in 0..t {
                for j in 0..r {
                    let mut up = params.clone();
                    up.u.set(i, j, up.u.get(i, j) + eps);
                    let mut dn = params.clone();
                    dn.u.set(i, j, dn.u.get(i, j) - eps);
                    let fd = (objective_only(&up, &data, t) - objective_only(&dn, &data, t))
                        / (2.0 * eps);
                    let g = gu.get(i, j);
                    worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
                }
            }
            for i in 0..d {
                for j in 0..r {
                    let mut up = params.clone();
                    up.v.set(i, j, up.v.get(i, j) + eps);
                    let mut dn = params.clone();
                    dn.v.set(i, j, dn.v.get(i, j) - eps);
                    let fd = (objective_only(&up, &data, t) - objective_only(&dn, &data, t))
                        / (2.0 * eps);
                    let g = gv.get(i, j);
                    worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
                }
            }
            assert!(worst <= 1e-4, "fd error {worst}");
        }
    }

    #[test]
    fn objective_invariant_under_joint_rotation() {
        let m = truth_matrix(3, 4, 2, 13);
        let data = uniform_task_samples(&m, 30, 0.2, 9);
        let mut rng = KeyedRng::new(8, &[3]);
        let params = FactoredParams {
            u: Matrix::from_fn(3, 2, |_, _| rng.normal()),
            v: Matrix::from_fn(4, 2, |_, _| rng.normal()),
        };
        let phi = 0.9_f64;
        let q = Matrix::from_rows(&[
            vec![phi.cos(), -phi.sin()],
            vec![phi.sin(), phi.cos()],
        ]);
        let rotated = FactoredParams { u: params.u.matmul(&q), v: params.v.matmul(&q) };
        let a = objective_only(&params, &data, 3);
        let b = objective_only(&rotated, &data, 3);
        assert!((a - b).abs() < 1e-10 * a.max(1.0));
    }

    #[test]
    fn accepted_steps_never_increase_objective() {
        let m = truth_matrix(4, 6, 2, 19);
        let data = uniform_task_samples(&m, 120, 0.2, 3);
        let opt = OptConfig {
            max_iters: 400,
            step_size: 0.5,
            restarts: 1,
            trace: true,
            seed: 5,
            ..OptConfig::default()
        };
        let (_, trace) = bm_fit_traced(&data, 4, 6, 2, &opt).unwrap();
        assert!(trace.len() > 5);
        for w in trace.windows(2) {
            assert!(w[1].risk <= w[0].risk + 1e-15, "{} -> {}", w[0].risk, w[1].risk);
        }
    }

    #[test]
    fn noiseless_fit_recovers_truth() {
        let (t, d, r) = (6, 12, 2);
        let m = truth_matrix(t, d, r, 17);
        let n = 8 * t.max(d) * r;
        let mut errs = Vec::new();
        for seed in 0..10 {
            let data = uniform_task_samples(&m, n, 0.0, 100 + seed);
            let opt = OptConfig {
                max_iters: 2000,
                step_size: 0.5,
                restarts: 1,
                tol_grad: 1e-10,
                seed,
                ..OptConfig::default()
            };
            let fit = bm_fit(&data, t, d, r, &opt).unwrap();
            let recon = fit.u.matmul(&fit.v.transpose());
            let err = recon.add_scaled(&m, -1.0).frobenius_norm() / m.frobenius_norm();
            errs.push(err);
            // balancing at the solution
            let sigma1 = singular_values(&m).unwrap()[0];
            assert!(
                balance_gap(&fit) <= 1e-4 * sigma1.max(1.0),
                "imbalance {} vs sigma1 {sigma1}",
                balance_gap(&fit)
            );
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errs[errs.len() / 2];
        assert!(median <= 1e-3, "median relative error {median}");
    }

    #[test]
    fn overparameterized_rank_still_interpolates() {
        let (t, d, r_true) = (4, 6, 1);
        let m = truth_matrix(t, d, r_true, 23);
        let data = uniform_task_samples(&m, 8 * t.max(d) * 2, 0.0, 5);
        let opt = OptConfig {
            max_iters: 2500,
            step_size: 0.5,
            restarts: 2,
            tol_grad: 1e-11,
            seed: 3,
            ..OptConfig::default()
        };
        let fit = bm_fit(&data, t, d, 2, &opt).unwrap();
        let val = objective_only(&fit, &data, t);
        assert!(val < 1e-6, "objective {val}");
    }

    #[test]
    fn extract_features_span_invariance() {
        let m = truth_matrix(4, 6, 2, 29);
        let truth = balanced_truth_factors(&m, 2).unwrap();
        let b_star = numlin::qr_orthonormalize(&truth.v).unwrap();
        // V·R for invertible R spans the same space
        let r_mix = Matrix::from_rows(&[vec![2.0, 0.3], vec![-0.4, 1.1]]);
        let mixed = FactoredParams { u: truth.u.clone(), v: truth.v.matmul(&r_mix) };
        let b_hat = extract_features(&mixed).unwrap();
        assert!(subspace_sine(&b_hat, &b_star).unwrap() < 1e-10);
        // orthonormal V is returned unchanged
        let ortho = FactoredParams { u: truth.u.clone(), v: b_star.clone() };
        let same = extract_features(&ortho).unwrap();
        assert!(same.add_scaled(&b_star, -1.0).max_abs() < 1e-12);
    }

    #[test]
    fn incoherence_zero_factors_inside() {
        let params = FactoredParams { u: Matrix::zeros(3, 2), v: Matrix::zeros(4, 2) };
        let rep = incoherence_report(&params, 10.0, 2.0, 1.0, 3, 2).unwrap();
        assert!(rep.in_set);
    }

    #[test]
    fn incoherence_flags_huge_row() {
        let mut u = Matrix::zeros(3, 2);
        u.set(0, 0, 100.0);
        let params = FactoredParams { u, v: Matrix::zeros(4, 2) };
        let rep = incoherence_report(&params, 10.0, 2.0, 1.0, 3, 2).unwrap();
        assert!(!rep.in_set);
        assert!(rep.max_row_u_sq > rep.row_threshold);
    }

    #[test]
    fn incoherence_truth_factors_inside_with_generous_constant() {
        for seed in 0..10 {
            let (t, d, r) = (5, 8, 2);
            let m = truth_matrix(t, d, r, 300 + seed);
            let truth = balanced_truth_factors(&m, r).unwrap();
            let svs = singular_values(&m).unwrap();
            let kappa_bar = svs[0] / svs[r - 1].max(1e-12);
            let rep =
                incoherence_report(&truth, 10.0, kappa_bar, svs[0], t, r).unwrap();
            assert!(rep.in_set, "seed {seed}: truth outside W");
        }
    }
}
