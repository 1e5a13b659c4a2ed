//! Config-driven experiment runners with deterministic CSV output.
//!
//! Every runner maps a grid × trials job list onto worker threads, with each
//! job keyed by its index so output is byte-identical regardless of thread
//! count (wall-clock columns aside). Failures inside a job land in the row's
//! `error` column instead of aborting the run.

pub mod config;
pub mod summarize;

pub use config::{load_config, parse_config, ExperimentConfig, ExperimentKind};
pub use summarize::{summarize, SummaryTable};

use crate::complexity::{self, FunctionClass};
use crate::diversity;
use crate::envs::{
    self, diversity_parameter, make_environment, sample_task_dataset, EnvOptions, Family,
    TaskEnvironment,
};
use crate::erm::{
    isolation_baseline, population_excess_risk, test_phase_erm, train_phase_erm, OptConfig,
};
use crate::landscape;
use crate::models::RepresentationParams;
use crate::numlin::{self, norm2, Matrix};
use crate::rng::{derive_seed, KeyedRng};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("unknown config key '{key}' at line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("config kind is '{got}' but the subcommand expects '{expected}'")]
    KindMismatch { expected: String, got: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("io error: {0}")]
    Io(String),
}

/// What a runner produced: the output path plus row/error counts for the
/// process exit code.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_path: String,
    pub rows: usize,
    pub error_rows: usize,
}

/// 17-significant-digit float formatting used in every CSV cell.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn env_options(cfg: &ExperimentConfig) -> EnvOptions {
    EnvOptions {
        kappa: cfg.kappa,
        noise_scale: cfg.noise,
        caps: envs::NormCaps { c1: cfg.c1, c2: cfg.c2, w: cfg.w_cap },
        sigma: None,
        bound_radius: cfg.bound_radius,
        nn_hidden: cfg.nn_hidden.clone(),
        nn_caps: cfg.nn_caps.clone(),
        ..EnvOptions::default()
    }
}

fn opt_config(cfg: &ExperimentConfig, seed: u64, trace: bool) -> OptConfig {
    OptConfig {
        max_iters: cfg.max_iters,
        step_size: cfg.step_size,
        step_decay: cfg.step_decay,
        tol_grad: cfg.tol_grad,
        restarts: cfg.restarts,
        seed,
        trace,
    }
}

/// Sine of the angle between fitted and true representations, where defined.
fn rep_sine(fitted: &RepresentationParams, truth: &RepresentationParams) -> Option<f64> {
    match (fitted, truth) {
        (
            RepresentationParams::LinearSubspace { b: bh },
            RepresentationParams::LinearSubspace { b: bt },
        ) => numlin::subspace_sine(bh, bt).ok(),
        (
            RepresentationParams::UnitDirection { b: bh, .. },
            RepresentationParams::UnitDirection { b: bt, .. },
        ) => {
            let (nh, nt) = (norm2(bh), norm2(bt));
            if nh <= 1e-12 || nt <= 1e-12 {
                return None;
            }
            let mh = Matrix::column(&bh.iter().map(|v| v / nh).collect::<Vec<_>>());
            let mt = Matrix::column(&bt.iter().map(|v| v / nt).collect::<Vec<_>>());
            numlin::subspace_sine(&mh, &mt).ok()
        }
        _ => None,
    }
}

/// Run `count` jobs over `threads` workers; job i owns output slot i.
fn run_jobs<F>(count: usize, threads: usize, job: F) -> Vec<String>
where
    F: Fn(usize) -> String + Sync,
{
    if threads <= 1 || count <= 1 {
        return (0..count).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; count]);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(count) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= count {
                    break;
                }
                let row = job(idx);
                slots.lock().expect("worker panicked").as_mut_slice()[idx] = Some(row);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|s| s.expect("every job filled its slot"))
        .collect()
}

fn write_csv(path: &str, header: &str, rows: &[String]) -> Result<(), HarnessError> {
    let mut file =
        std::fs::File::create(path).map_err(|e| HarnessError::Io(format!("{path}: {e}")))?;
    writeln!(file, "{header}").map_err(|e| HarnessError::Io(e.to_string()))?;
    for row in rows {
        writeln!(file, "{row}").map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    Ok(())
}

fn count_error_rows(rows: &[String]) -> usize {
    rows.iter()
        .flat_map(|block| block.lines())
        .filter(|line| !line.ends_with(','))
        .count()
}

struct SweepRow {
    nu_tilde: f64,
    transfer: (f64, f64),
    isolation: (f64, f64),
    sin_theta: Option<f64>,
    train_risk_final: f64,
}

#[allow(clippy::too_many_arguments)]
fn sweep_pipeline(
    cfg: &ExperimentConfig,
    grid_idx: usize,
    trial: usize,
    t: usize,
    n: usize,
    m: usize,
    env_seed: u64,
    trace_path: Option<&str>,
) -> Result<SweepRow, String> {
    let env = make_environment(cfg.family, cfg.d, cfg.r, t, env_seed, &env_options(cfg))
        .map_err(|e| e.to_string())?;
    let class = env.class_spec();
    let datasets: Vec<_> = (1..=t)
        .map(|j| sample_task_dataset(&env, j, n, 0))
        .collect::<Result<_, _>>()
        .map_err(|e: envs::EnvError| e.to_string())?;
    let opt = opt_config(
        cfg,
        derive_seed(cfg.seed, &[11, grid_idx as u64, trial as u64]),
        trace_path.is_some(),
    );
    let fit = train_phase_erm(&datasets, &class, &opt).map_err(|e| e.to_string())?;
    if let Some(path) = trace_path {
        let rows: Vec<String> = fit
            .trace
            .iter()
            .map(|p| {
                format!(
                    "{},{},{},{}",
                    p.iter,
                    fmt_float(p.risk),
                    fmt_float(p.step),
                    fmt_float(p.grad_norm)
                )
            })
            .collect();
        write_csv(path, "iter,risk,step,grad_norm", &rows).map_err(|e| e.to_string())?;
    }
    let ds0 = sample_task_dataset(&env, 0, m, 0).map_err(|e| e.to_string())?;
    let head0 = test_phase_erm(&ds0, &fit.rep, &class, &opt).map_err(|e| e.to_string())?;
    let transfer = population_excess_risk(&env, &fit.rep, &head0, cfg.n_eval, 1)
        .map_err(|e| e.to_string())?;
    let (iso_head, iso_rep) =
        isolation_baseline(&ds0, &class, &opt).map_err(|e| e.to_string())?;
    let isolation = population_excess_risk(&env, &iso_rep, &iso_head, cfg.n_eval, 2)
        .map_err(|e| e.to_string())?;
    let nu = diversity_parameter(&env).map_err(|e| e.to_string())?.nu_tilde;
    Ok(SweepRow {
        nu_tilde: nu,
        transfer: (transfer.mean, transfer.stderr),
        isolation: (isolation.mean, isolation.stderr),
        sin_theta: rep_sine(&fit.rep, &env.rep_truth),
        train_risk_final: fit.final_empirical_risk,
    })
}

pub const SWEEP_HEADER: &str = "experiment_id,family,d,r,t,n,m,trial,seed,nu_tilde,\
transfer_excess_risk,transfer_stderr,isolation_excess_risk,isolation_stderr,sin_theta,\
train_risk_final,wall_ms,error";

/// Transfer-vs-isolation sweep over the (t, n, m) grid.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let mut points = Vec::new();
    for &t in &cfg.effective_t_grid() {
        for &n in &cfg.n_grid {
            for &m in &cfg.m_grid {
                points.push((t, n, m));
            }
        }
    }
    let count = points.len() * cfg.trials;
    let trace_base = format!("{}.trace.csv", cfg.out);
    let rows = run_jobs(count, cfg.threads, |idx| {
        let grid_idx = idx / cfg.trials;
        let trial = idx % cfg.trials;
        let (t, n, m) = points[grid_idx];
        let env_seed = derive_seed(cfg.seed, &[10, grid_idx as u64, trial as u64]);
        let started = std::time::Instant::now();
        let trace_path = if cfg.trace && idx == 0 { Some(trace_base.as_str()) } else { None };
        let outcome = sweep_pipeline(cfg, grid_idx, trial, t, n, m, env_seed, trace_path);
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let (row, err) = match outcome {
            Ok(r) => (r, String::new()),
            Err(e) => (
                SweepRow {
                    nu_tilde: f64::NAN,
                    transfer: (f64::NAN, f64::NAN),
                    isolation: (f64::NAN, f64::NAN),
                    sin_theta: None,
                    train_risk_final: f64::NAN,
                },
                e.replace(',', ";"),
            ),
        };
        format!(
            "sweep_g{grid_idx:03}_t{trial:03},{family},{d},{r},{t},{n},{m},{trial},{env_seed},{nu},{te},{ts},{ie},{is},{sin},{tr},{wall},{err}",
            family = cfg.family.as_str(),
            d = cfg.d,
            r = cfg.r,
            nu = fmt_float(row.nu_tilde),
            te = fmt_float(row.transfer.0),
            ts = fmt_float(row.transfer.1),
            ie = fmt_float(row.isolation.0),
            is = fmt_float(row.isolation.1),
            sin = fmt_float(row.sin_theta.unwrap_or(f64::NAN)),
            tr = fmt_float(row.train_risk_final),
            wall = fmt_float(wall_ms),
        )
    });
    write_csv(&cfg.out, SWEEP_HEADER, &rows)?;
    Ok(RunOutcome {
        out_path: cfg.out.clone(),
        rows: rows.len(),
        error_rows: count_error_rows(&rows),
    })
}

/// Random candidate representation from the environment's class.
fn random_candidate(env: &TaskEnvironment, rng: &mut KeyedRng) -> RepresentationParams {
    match &env.rep_truth {
        RepresentationParams::LinearSubspace { .. } => {
            let g = Matrix::from_fn(env.d, env.r, |_, _| rng.normal());
            RepresentationParams::LinearSubspace {
                b: numlin::qr_orthonormalize(&g).expect("generic matrix has full rank"),
            }
        }
        RepresentationParams::TanhMlp { weights, caps } => {
            let raw: Vec<Matrix> = weights
                .iter()
                .map(|w| Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.normal()))
                .collect();
            crate::models::project_rep(&RepresentationParams::TanhMlp {
                weights: raw,
                caps: caps.clone(),
            })
            .expect("finite weights")
        }
        RepresentationParams::UnitDirection { cap, .. } => {
            let dir = rng.unit_vector(env.d);
            RepresentationParams::UnitDirection {
                b: dir.iter().map(|v| v * cap).collect(),
                cap: *cap,
            }
        }
    }
}

pub const DIVERSITY_HEADER: &str = "experiment_id,family,d,r,t,trial,sample_id,method,d_avg,\
d_worst,stderr_avg,stderr_worst,nu_implied,nu_tilde,nu_theory,certified,wall_ms,error";

/// Diversity-certificate audit: per trial, a fresh environment and a batch of
/// random candidate representations.
pub fn run_diversity_audit(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let rows = run_jobs(cfg.trials, cfg.threads, |trial| {
        let env_seed = derive_seed(cfg.seed, &[20, trial as u64]);
        let started = std::time::Instant::now();
        let result = (|| -> Result<Vec<String>, String> {
            let env =
                make_environment(cfg.family, cfg.d, cfg.r, cfg.t, env_seed, &env_options(cfg))
                    .map_err(|e| e.to_string())?;
            let mut rng = KeyedRng::new(cfg.seed, &[21, trial as u64]);
            let samples: Vec<RepresentationParams> =
                (0..cfg.rep_samples).map(|_| random_candidate(&env, &mut rng)).collect();
            let outcome = diversity::diversity_certificate(
                &env,
                &samples,
                cfg.epsilon,
                cfg.n_eval,
                derive_seed(cfg.seed, &[22, trial as u64]),
            )
            .map_err(|e| e.to_string())?;
            let wall_ms = started.elapsed().as_secs_f64() * 1e3 / cfg.rep_samples.max(1) as f64;
            Ok(outcome
                .reports
                .iter()
                .enumerate()
                .map(|(k, rep)| {
                    format!(
                        "diversity_t{trial:03},{family},{d},{r},{t},{trial},s{trial:03}_{k:03},{method},{da},{dw},{sa},{sw},{ni},{nt},{nth},{cert},{wall},",
                        family = cfg.family.as_str(),
                        d = cfg.d,
                        r = cfg.r,
                        t = cfg.t,
                        method = rep.method.as_str(),
                        da = fmt_float(rep.d_avg),
                        dw = fmt_float(rep.d_worst),
                        sa = fmt_float(rep.stderr_avg),
                        sw = fmt_float(rep.stderr_worst),
                        ni = fmt_float(rep.nu_implied),
                        nt = fmt_float(rep.nu_tilde),
                        nth = fmt_float(outcome.nu_theory.unwrap_or(f64::NAN)),
                        cert = rep.certified,
                        wall = fmt_float(wall_ms),
                    )
                })
                .collect())
        })();
        match result {
            Ok(lines) => lines.join("\n"),
            Err(e) => format!(
                "diversity_t{trial:03},{},{},{},{},{trial},,,NaN,NaN,NaN,NaN,NaN,NaN,NaN,false,{},{}",
                cfg.family.as_str(),
                cfg.d,
                cfg.r,
                cfg.t,
                fmt_float(started.elapsed().as_secs_f64() * 1e3),
                e.replace(',', ";"),
            ),
        }
    });
    write_csv(&cfg.out, DIVERSITY_HEADER, &rows)?;
    Ok(RunOutcome {
        out_path: cfg.out.clone(),
        rows: rows.iter().map(|b| b.lines().count()).sum(),
        error_rows: count_error_rows(&rows),
    })
}

pub const COMPLEXITY_HEADER: &str = "experiment_id,family,class,dataset_id,n,trial,mean,stderr,\
draws,is_lower_bound,closed_form_bound,dominated,wall_ms,error";

/// Complexity audit: Monte Carlo estimates against the closed-form bounds on
/// the pooled design (representation class) and per-task designs (head class).
pub fn run_complexity_audit(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let count = cfg.n_grid.len() * cfg.trials;
    let rows = run_jobs(count, cfg.threads, |idx| {
        let grid_idx = idx / cfg.trials;
        let trial = idx % cfg.trials;
        let n = cfg.n_grid[grid_idx];
        let env_seed = derive_seed(cfg.seed, &[30, grid_idx as u64, trial as u64]);
        let started = std::time::Instant::now();
        let id = format!("complexity_g{grid_idx:03}_t{trial:03}");
        let result = (|| -> Result<Vec<String>, String> {
            let env =
                make_environment(cfg.family, cfg.d, cfg.r, cfg.t, env_seed, &env_options(cfg))
                    .map_err(|e| e.to_string())?;
            let datasets: Vec<_> = (1..=cfg.t)
                .map(|j| sample_task_dataset(&env, j, n, 0))
                .collect::<Result<_, _>>()
                .map_err(|e: envs::EnvError| e.to_string())?;
            let designs: Vec<&Matrix> = datasets.iter().map(|ds| &ds.x).collect();
            let bounds = complexity::linear_closed_forms(cfg.r, cfg.c1, &designs, None)
                .map_err(|e| e.to_string())?;
            let pooled_rows: Vec<Vec<f64>> = datasets
                .iter()
                .flat_map(|ds| (0..ds.x.rows()).map(move |i| ds.x.row(i).to_vec()))
                .collect();
            let pooled = Matrix::from_rows(&pooled_rows);
            let mut lines = Vec::new();
            let mut emit = |class: &str,
                            dataset_id: &str,
                            est: complexity::ComplexityEstimate,
                            bound: f64| {
                let dominated = est.mean <= bound + 3.0 * est.stderr;
                let wall = started.elapsed().as_secs_f64() * 1e3;
                lines.push(format!(
                    "{id},{family},{class},{dataset_id},{n},{trial},{mean},{se},{draws},{lb},{bound},{dominated},{wall},",
                    family = cfg.family.as_str(),
                    mean = fmt_float(est.mean),
                    se = fmt_float(est.stderr),
                    draws = est.draws,
                    lb = est.is_lower_bound,
                    bound = fmt_float(bound),
                    wall = fmt_float(wall),
                ));
            };
            let h_est = complexity::mc_gaussian_complexity(
                &FunctionClass::SubspaceFeatures { r: cfg.r },
                &pooled,
                cfg.mc_draws,
                derive_seed(cfg.seed, &[31, idx as u64]),
            )
            .map_err(|e| e.to_string())?;
            emit("subspace_h", "pooled", h_est, bounds.gauss_h_bound);
            for (j, ds) in datasets.iter().enumerate() {
                // head class acts on induced features, the worst of which is
                // the top-r eigenprojection of the task design
                let feats = complexity::top_r_feature_projection(&ds.x, cfg.r)
                    .map_err(|e| e.to_string())?;
                let est = complexity::mc_gaussian_complexity(
                    &FunctionClass::LinearBall { radius: cfg.c1 },
                    &feats,
                    cfg.mc_draws,
                    derive_seed(cfg.seed, &[32, idx as u64, j as u64]),
                )
                .map_err(|e| e.to_string())?;
                emit("linear_ball_f", &format!("task_{}", j + 1), est, bounds.gauss_f_bounds[j]);
            }
            Ok(lines)
        })();
        match result {
            Ok(lines) => lines.join("\n"),
            Err(e) => format!(
                "{id},{},,,{n},{trial},NaN,NaN,0,false,NaN,false,{},{}",
                cfg.family.as_str(),
                fmt_float(started.elapsed().as_secs_f64() * 1e3),
                e.replace(',', ";"),
            ),
        }
    });
    write_csv(&cfg.out, COMPLEXITY_HEADER, &rows)?;
    Ok(RunOutcome {
        out_path: cfg.out.clone(),
        rows: rows.iter().map(|b| b.lines().count()).sum(),
        error_rows: count_error_rows(&rows),
    })
}

pub const LANDSCAPE_HEADER: &str = "experiment_id,d,r,t,n,trial,seed,sin_theta,balance_gap,\
sigma1_star,in_set,final_objective,wall_ms,error";

/// Burer–Monteiro recovery sweep over the n grid.
pub fn run_landscape(cfg: &ExperimentConfig) -> Result<RunOutcome, HarnessError> {
    let count = cfg.n_grid.len() * cfg.trials;
    let trace_base = format!("{}.trace.csv", cfg.out);
    let rows = run_jobs(count, cfg.threads, |idx| {
        let grid_idx = idx / cfg.trials;
        let trial = idx % cfg.trials;
        let n = cfg.n_grid[grid_idx];
        let env_seed = derive_seed(cfg.seed, &[40, grid_idx as u64, trial as u64]);
        let started = std::time::Instant::now();
        let id = format!("landscape_g{grid_idx:03}_t{trial:03}");
        let result = (|| -> Result<String, String> {
            // ground truth always comes from the linear-regression family
            let env = make_environment(
                Family::LinearRegression,
                cfg.d,
                cfg.r,
                cfg.t,
                env_seed,
                &env_options(cfg),
            )
            .map_err(|e| e.to_string())?;
            let a = env.head_matrix().expect("linear family");
            let b_star = match &env.rep_truth {
                RepresentationParams::LinearSubspace { b } => b.clone(),
                _ => unreachable!("linear family"),
            };
            let m_star = a.matmul(&b_star.transpose());
            let data = landscape::uniform_task_samples(
                &m_star,
                n,
                cfg.noise,
                derive_seed(cfg.seed, &[41, grid_idx as u64, trial as u64]),
            );
            let trace_this = cfg.trace && idx == 0;
            let opt = opt_config(cfg, derive_seed(cfg.seed, &[42, idx as u64]), trace_this);
            let (fit, trace) = landscape::bm_fit_traced(&data, cfg.t, cfg.d, cfg.r, &opt)
                .map_err(|e| e.to_string())?;
            if trace_this {
                let rows: Vec<String> = trace
                    .iter()
                    .map(|p| {
                        format!(
                            "{},{},{},{}",
                            p.iter,
                            fmt_float(p.risk),
                            fmt_float(p.step),
                            fmt_float(p.grad_norm)
                        )
                    })
                    .collect();
                write_csv(&trace_base, "iter,risk,step,grad_norm", &rows)
                    .map_err(|e| e.to_string())?;
            }
            let b_hat = landscape::extract_features(&fit).map_err(|e| e.to_string())?;
            let sin = numlin::subspace_sine(&b_hat, &b_star).map_err(|e| e.to_string())?;
            let gap = landscape::balance_gap(&fit);
            let svs = landscape::singular_values(&m_star).map_err(|e| e.to_string())?;
            let sigma1 = svs[0];
            let kappa_bar = sigma1 / svs[cfg.r - 1].max(1e-12);
            let report = landscape::incoherence_report(&fit, 10.0, kappa_bar, sigma1, cfg.t, cfg.r)
                .map_err(|e| e.to_string())?;
            let (value, _, _) =
                landscape::bm_objective_grad(&fit, &data, cfg.t).map_err(|e| e.to_string())?;
            let wall = started.elapsed().as_secs_f64() * 1e3;
            Ok(format!(
                "{id},{d},{r},{t},{n},{trial},{env_seed},{sin},{gap},{s1},{inset},{obj},{wall},",
                d = cfg.d,
                r = cfg.r,
                t = cfg.t,
                sin = fmt_float(sin),
                gap = fmt_float(gap),
                s1 = fmt_float(sigma1),
                inset = report.in_set,
                obj = fmt_float(value),
                wall = fmt_float(wall),
            ))
        })();
        match result {
            Ok(line) => line,
            Err(e) => format!(
                "{id},{},{},{},{n},{trial},{env_seed},NaN,NaN,NaN,false,NaN,{},{}",
                cfg.d,
                cfg.r,
                cfg.t,
                fmt_float(started.elapsed().as_secs_f64() * 1e3),
                e.replace(',', ";"),
            ),
        }
    });
    write_csv(&cfg.out, LANDSCAPE_HEADER, &rows)?;
    Ok(RunOutcome {
        out_path: cfg.out.clone(),
        rows: rows.len(),
        error_rows: count_error_rows(&rows),
    })
}
