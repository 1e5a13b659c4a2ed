//! Ground-truth multitask environments and per-task dataset sampling.
//!
//! An environment holds a shared true representation, t training heads plus
//! one held-out test head, a common covariate law, and a noise model. All
//! sampling is driven by keyed streams, so a fixed seed reproduces every
//! dataset bit for bit.

use crate::models::{
    self, HeadParams, LossId, RepresentationParams,
};
use crate::numlin::{self, norm2, Matrix, NumlinError};
use crate::rng::{purpose, KeyedRng};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("bad options: {0}")]
    BadOptions(String),
    #[error("task id {0} out of range (t = {1})")]
    BadTaskId(usize, usize),
    #[error("feature Gram condition not met after {0} resampling attempts")]
    GramConditionUnmet(usize),
    #[error("snapshot parse error at line {line}: {msg}")]
    SnapshotParse { line: usize, msg: String },
    #[error(transparent)]
    Numlin(#[from] NumlinError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    LinearLogistic,
    LinearRegression,
    NnRegression,
    IndexModel,
}

impl Family {
    pub fn loss(self) -> LossId {
        match self {
            Family::LinearLogistic => LossId::Logistic,
            Family::LinearRegression | Family::NnRegression => LossId::Squared,
            Family::IndexModel => LossId::Absolute,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::LinearLogistic => "LinearLogistic",
            Family::LinearRegression => "LinearRegression",
            Family::NnRegression => "NnRegression",
            Family::IndexModel => "IndexModel",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "LinearLogistic" => Some(Family::LinearLogistic),
            "LinearRegression" => Some(Family::LinearRegression),
            "NnRegression" => Some(Family::NnRegression),
            "IndexModel" => Some(Family::IndexModel),
            _ => None,
        }
    }

    pub fn has_linear_heads(self) -> bool {
        !matches!(self, Family::IndexModel)
    }
}

/// Norm caps for the hypothesis classes: c1 bounds heads in F, c2 bounds the
/// new-task class F₀, w bounds the index-model direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCaps {
    pub c1: f64,
    pub c2: f64,
    pub w: f64,
}

impl Default for NormCaps {
    fn default() -> Self {
        NormCaps { c1: 2.0, c2: 1.0, w: 1.0 }
    }
}

/// Common covariate law: N(0, Σ), optionally resampled until ‖x‖ ≤ D.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    pub dim: usize,
    pub sigma: Matrix,
    pub bound_radius: Option<f64>,
    chol: Matrix,
    identity_chol: bool,
}

impl CovariateModel {
    pub fn new(sigma: Matrix, bound_radius: Option<f64>) -> Result<Self, EnvError> {
        let dim = sigma.rows();
        if sigma.cols() != dim {
            return Err(EnvError::BadDims("covariance must be square".into()));
        }
        let chol = cholesky(&sigma)
            .ok_or_else(|| EnvError::BadOptions("covariance not positive definite".into()))?;
        let identity_chol = chol == Matrix::identity(dim);
        Ok(CovariateModel { dim, sigma, bound_radius, chol, identity_chol })
    }

    pub fn isotropic(dim: usize) -> Self {
        CovariateModel {
            dim,
            sigma: Matrix::identity(dim),
            bound_radius: None,
            chol: Matrix::identity(dim),
            identity_chol: true,
        }
    }

    /// One draw; rejection-resamples until inside the bound when one is set.
    /// Returns the sample and the number of rejected proposals.
    pub fn sample(&self, rng: &mut KeyedRng) -> (Vec<f64>, usize) {
        let mut rejected = 0;
        loop {
            let g = rng.normal_vec(self.dim);
            let x = if self.identity_chol { g } else { self.chol.matvec(&g) };
            match self.bound_radius {
                Some(d) if norm2(&x) > d => rejected += 1,
                _ => return (x, rejected),
            }
        }
    }
}

/// Lower-triangular Cholesky factor, or None if not positive definite.
fn cholesky(s: &Matrix) -> Option<Matrix> {
    let n = s.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Ground-truth environment: representation, t training heads, one test head,
/// covariate and noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEnvironment {
    pub family: Family,
    pub covariates: CovariateModel,
    pub rep_truth: RepresentationParams,
    /// Training heads f⋆_1..f⋆_t followed by the test head f⋆_0.
    pub heads_truth: Vec<HeadParams>,
    pub noise_scale: f64,
    pub loss: LossId,
    pub caps: NormCaps,
    pub d: usize,
    pub r: usize,
    pub t: usize,
    pub seed: u64,
    /// Resampling attempts consumed to satisfy the NN feature Gram condition.
    pub gram_attempts: usize,
}

#[derive(Debug, Clone)]
pub struct EnvOptions {
    /// Condition-number target for AᵀA/t (linear-head families, r ≥ 2).
    /// Infinite means heads keep their natural random conditioning.
    pub kappa: f64,
    pub noise_scale: f64,
    pub caps: NormCaps,
    pub sigma: Option<Matrix>,
    pub bound_radius: Option<f64>,
    /// Hidden layer widths for NnRegression (input d and output r are implied).
    pub nn_hidden: Vec<usize>,
    /// Per-layer max-row-ℓ1 caps M(1)..M(K); must cover hidden layers + output.
    pub nn_caps: Vec<f64>,
    /// Lower bound demanded of σ_r(E[h(x)h(x)ᵀ]) during NN truth construction.
    pub nn_gram_min: f64,
    pub nn_gram_attempts: usize,
    pub link_knots: usize,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            kappa: 3.0,
            noise_scale: 0.1,
            caps: NormCaps::default(),
            sigma: None,
            bound_radius: None,
            nn_hidden: vec![8],
            nn_caps: vec![2.0, 2.0],
            nn_gram_min: 1e-3,
            nn_gram_attempts: 50,
            link_knots: models::DEFAULT_LINK_KNOTS,
        }
    }
}

/// Diversity parameter ν̃ of an environment. For index models the value is
/// the hull lower bound 1/t rather than a spectral quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityParam {
    pub nu_tilde: f64,
    pub hull_lower_bound: bool,
}

/// Per-task dataset: design matrix and responses.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub x: Matrix,
    pub y: Vec<f64>,
}

pub fn make_environment(
    family: Family,
    d: usize,
    r: usize,
    t: usize,
    seed: u64,
    options: &EnvOptions,
) -> Result<TaskEnvironment, EnvError> {
    if d < r || r == 0 || t == 0 {
        return Err(EnvError::BadDims(format!("need d >= r >= 1 and t >= 1, got d={d} r={r} t={t}")));
    }
    if family == Family::IndexModel && r != 1 {
        return Err(EnvError::BadDims("index models have r = 1".into()));
    }
    if options.kappa < 1.0 {
        return Err(EnvError::BadOptions("kappa must be >= 1".into()));
    }
    if options.noise_scale < 0.0 {
        return Err(EnvError::BadOptions("noise scale must be nonnegative".into()));
    }
    let covariates = match &options.sigma {
        Some(s) => {
            if s.rows() != d {
                return Err(EnvError::BadDims("covariance dimension != d".into()));
            }
            CovariateModel::new(s.clone(), options.bound_radius)?
        }
        None => {
            let mut c = CovariateModel::isotropic(d);
            c.bound_radius = options.bound_radius;
            c
        }
    };

    let mut rng = KeyedRng::new(seed, &[purpose::ENV]);
    let (rep_truth, gram_attempts) = match family {
        Family::LinearLogistic | Family::LinearRegression => {
            let g = Matrix::from_fn(d, r, |_, _| rng.normal());
            (RepresentationParams::LinearSubspace { b: numlin::qr_orthonormalize(&g)? }, 0)
        }
        Family::NnRegression => build_nn_truth(d, r, options, &covariates, seed)?,
        Family::IndexModel => {
            let dir = rng.unit_vector(d);
            let b = dir.iter().map(|v| v * options.caps.w).collect();
            (RepresentationParams::UnitDirection { b, cap: options.caps.w }, 0)
        }
    };

    let heads_truth = match family {
        Family::IndexModel => {
            build_index_links(&rep_truth, &covariates, t, options.link_knots, seed)?
        }
        _ => build_linear_heads(r, t, options, seed)?,
    };

    Ok(TaskEnvironment {
        family,
        covariates,
        rep_truth,
        heads_truth,
        noise_scale: options.noise_scale,
        loss: family.loss(),
        caps: options.caps,
        d,
        r,
        t,
        seed,
        gram_attempts,
    })
}

/// Training heads drawn Gaussian, spectrally reshaped so σ1/σr of AᵀA/t hits
/// the requested condition number, then globally rescaled into the c2 ball.
/// The test head is drawn from the radius-c2 ball.
fn build_linear_heads(
    r: usize,
    t: usize,
    options: &EnvOptions,
    seed: u64,
) -> Result<Vec<HeadParams>, EnvError> {
    let mut rng = KeyedRng::new(seed, &[purpose::ENV, 1]);
    let scale = 1.0 / (r as f64).sqrt();
    let mut a = Matrix::from_fn(t, r, |_, _| rng.normal() * scale);

    if options.kappa.is_finite() && r >= 2 && t >= r {
        a = reshape_condition(&a, options.kappa)?;
    }
    // global rescale keeps the spectrum shape while respecting ‖α⋆_j‖ ≤ c2
    let max_row = (0..t).map(|j| norm2(a.row(j))).fold(0.0_f64, f64::max);
    if max_row > options.caps.c2 {
        a = a.scale(options.caps.c2 / max_row);
    }
    let mut heads: Vec<HeadParams> = (0..t)
        .map(|j| HeadParams::LinearHead { alpha: a.row(j).to_vec(), cap: options.caps.c2 })
        .collect();

    let mut alpha0: Vec<f64> = (0..r).map(|_| rng.normal() * scale).collect();
    let n0 = norm2(&alpha0);
    if n0 > options.caps.c2 {
        alpha0 = alpha0.iter().map(|v| v * options.caps.c2 / n0).collect();
    }
    heads.push(HeadParams::LinearHead { alpha: alpha0, cap: options.caps.c2 });
    Ok(heads)
}

/// Rebuild A = UΣVᵀ with a geometric singular-value profile whose extreme
/// ratio is exactly √kappa (so the Gram ratio is exactly kappa).
fn reshape_condition(a: &Matrix, kappa: f64) -> Result<Matrix, EnvError> {
    let t = a.rows();
    let r = a.cols();
    let gram = a.transpose().matmul(a);
    let spec = numlin::symmetric_eig(&gram)?;
    let l1 = spec.max_eigenvalue().max(1e-30);
    // target Gram eigenvalues: geometric from l1 down to l1/kappa
    let targets: Vec<f64> = (0..r)
        .map(|i| l1 * kappa.powf(-(i as f64) / (r as f64 - 1.0)))
        .collect();
    let mut out = Matrix::zeros(t, r);
    for (i, &li_target) in targets.iter().enumerate() {
        let v = spec.eigenvectors.col(i);
        let li = spec.eigenvalues[i];
        let u = if li > 1e-24 {
            let av = a.matvec(&v);
            let s = li.sqrt();
            av.iter().map(|x| x / s).collect::<Vec<f64>>()
        } else {
            // direction lost to rank deficiency cannot be reshaped
            return Err(EnvError::BadOptions(
                "head matrix rank deficient; cannot reach requested conditioning".into(),
            ));
        };
        let s_target = li_target.sqrt();
        for row in 0..t {
            for col in 0..r {
                out.set(row, col, out.get(row, col) + s_target * u[row] * v[col]);
            }
        }
    }
    Ok(out)
}

fn build_nn_truth(
    d: usize,
    r: usize,
    options: &EnvOptions,
    covariates: &CovariateModel,
    seed: u64,
) -> Result<(RepresentationParams, usize), EnvError> {
    let mut widths = vec![d];
    widths.extend_from_slice(&options.nn_hidden);
    widths.push(r);
    let layers = widths.len() - 1;
    if options.nn_caps.len() != layers {
        return Err(EnvError::BadOptions(format!(
            "nn_caps must list {layers} caps (one per layer)"
        )));
    }
    for attempt in 0..options.nn_gram_attempts {
        let mut rng = KeyedRng::new(seed, &[purpose::ENV, 2, attempt as u64]);
        let weights: Vec<Matrix> = (0..layers)
            .map(|k| Matrix::from_fn(widths[k + 1], widths[k], |_, _| rng.normal()))
            .collect();
        let rep = models::project_rep(&RepresentationParams::TanhMlp {
            weights,
            caps: options.nn_caps.clone(),
        })?;
        // Monte Carlo check of σ_r(E[h(x)h(x)ᵀ])
        let mut gram = Matrix::zeros(r, r);
        let draws = 2000;
        let mut grng = KeyedRng::new(seed, &[purpose::ENV, 3, attempt as u64]);
        for _ in 0..draws {
            let (x, _) = covariates.sample(&mut grng);
            let h = models::rep_forward(&rep, &x)?;
            for i in 0..r {
                for j in 0..r {
                    gram.set(i, j, gram.get(i, j) + h[i] * h[j] / draws as f64);
                }
            }
        }
        let spec = numlin::symmetric_eig(&gram)?;
        if spec.min_eigenvalue() >= options.nn_gram_min {
            return Ok((rep, attempt + 1));
        }
    }
    Err(EnvError::GramConditionUnmet(options.nn_gram_attempts))
}

/// Random monotone 1-Lipschitz links on a shared knot grid spanning the range
/// of b⋆ᵀx, plus a test link drawn from their convex hull.
fn build_index_links(
    rep: &RepresentationParams,
    covariates: &CovariateModel,
    t: usize,
    knot_count: usize,
    seed: u64,
) -> Result<Vec<HeadParams>, EnvError> {
    let b = match rep {
        RepresentationParams::UnitDirection { b, .. } => b,
        _ => return Err(EnvError::BadOptions("index links need a direction".into())),
    };
    // std of b⋆ᵀx under N(0, Σ)
    let sb = covariates.sigma.matvec(b);
    let var = numlin::dot(b, &sb).max(1e-12);
    let spread = 3.0 * var.sqrt();
    let knots: Vec<f64> = (0..knot_count)
        .map(|i| -spread + 2.0 * spread * i as f64 / (knot_count - 1) as f64)
        .collect();

    let mut rng = KeyedRng::new(seed, &[purpose::ENV, 4]);
    let mut heads = Vec::with_capacity(t + 1);
    for _ in 0..t {
        let mut v = Vec::with_capacity(knot_count);
        let mut cur = rng.uniform_in(0.0, 0.4);
        v.push(cur);
        for k in 1..knot_count {
            let slope = rng.uniform();
            cur = (cur + slope * (knots[k] - knots[k - 1])).min(1.0);
            v.push(cur);
        }
        heads.push(HeadParams::MonotoneLink { knots: knots.clone(), values: v });
    }
    // test link: convex combination with Dirichlet(1,..,1) weights
    let mut lambdas: Vec<f64> = (0..t).map(|_| -rng.uniform().max(1e-12).ln()).collect();
    let s: f64 = lambdas.iter().sum();
    for l in &mut lambdas {
        *l /= s;
    }
    let values: Vec<f64> = (0..knot_count)
        .map(|k| {
            heads
                .iter()
                .zip(lambdas.iter())
                .map(|(h, &l)| match h {
                    HeadParams::MonotoneLink { values, .. } => l * values[k],
                    _ => unreachable!(),
                })
                .sum()
        })
        .collect();
    heads.push(HeadParams::MonotoneLink { knots, values });
    Ok(heads)
}

impl TaskEnvironment {
    /// Head for task j: j = 0 is the held-out test task, 1..=t are training.
    pub fn head(&self, j: usize) -> Result<&HeadParams, EnvError> {
        if j > self.t {
            return Err(EnvError::BadTaskId(j, self.t));
        }
        if j == 0 {
            Ok(&self.heads_truth[self.t])
        } else {
            Ok(&self.heads_truth[j - 1])
        }
    }

    /// Stack of training heads as the t×r matrix A (linear-head families).
    pub fn head_matrix(&self) -> Option<Matrix> {
        if !self.family.has_linear_heads() {
            return None;
        }
        let rows: Vec<Vec<f64>> = self.heads_truth[..self.t]
            .iter()
            .map(|h| match h {
                HeadParams::LinearHead { alpha, .. } => alpha.clone(),
                _ => unreachable!("linear-head family carries linear heads"),
            })
            .collect();
        Some(Matrix::from_rows(&rows))
    }
}

/// Draw a dataset of n samples from task j of the environment. Deterministic
/// in (env.seed, j, n, seed).
pub fn sample_task_dataset(
    env: &TaskEnvironment,
    j: usize,
    n: usize,
    seed: u64,
) -> Result<TaskDataset, EnvError> {
    if n == 0 {
        return Err(EnvError::BadDims("need n >= 1 samples".into()));
    }
    let head = env.head(j)?;
    let mut rng = KeyedRng::new(env.seed, &[purpose::DATASET, j as u64, seed]);
    let mut x = Matrix::zeros(n, env.d);
    let mut y = Vec::with_capacity(n);
    let mut rejected = 0usize;
    let noise_half_width = env.noise_scale * 3.0_f64.sqrt();
    for i in 0..n {
        let (xi, rej) = env.covariates.sample(&mut rng);
        rejected += rej;
        let pred = models::predict(&env.rep_truth, head, &xi)?;
        let yi = match env.family {
            Family::LinearLogistic => {
                let p = models::sigmoid(pred);
                if rng.uniform() < p {
                    1.0
                } else {
                    0.0
                }
            }
            // bounded noise, uniform on [−σ√3, σ√3] (variance σ²)
            _ => pred + rng.uniform_in(-noise_half_width, noise_half_width),
        };
        x.row_mut(i).copy_from_slice(&xi);
        y.push(yi);
    }
    if env.covariates.bound_radius.is_some() {
        let acc = n as f64 / (n + rejected) as f64;
        log::debug!("task {j}: truncation acceptance rate {acc:.4} over {n} samples");
    }
    Ok(TaskDataset { task_id: j, x, y })
}

/// ν̃ = σ_r(AᵀA/t) for linear-head families; the hull bound 1/t for index
/// models (flagged).
pub fn diversity_parameter(env: &TaskEnvironment) -> Result<DiversityParam, EnvError> {
    match env.head_matrix() {
        Some(a) => {
            let gram = a.transpose().matmul(&a).scale(1.0 / env.t as f64);
            let spec = numlin::symmetric_eig(&gram)?;
            Ok(DiversityParam { nu_tilde: spec.min_eigenvalue(), hull_lower_bound: false })
        }
        None => Ok(DiversityParam { nu_tilde: 1.0 / env.t as f64, hull_lower_bound: true }),
    }
}

// ---------------------------------------------------------------------------
// Snapshot format: versioned key = value lines with fenced matrices.
// ---------------------------------------------------------------------------

const SNAPSHOT_HEADER: &str = "divlearn-env v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_matrix(out: &mut String, name: &str, m: &Matrix) {
    out.push_str(&format!("begin matrix {name} {} {}\n", m.rows(), m.cols()));
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out.push_str("end matrix\n");
}

impl TaskEnvironment {
    pub fn write_snapshot(&self) -> String {
        let mut out = String::new();
        out.push_str(SNAPSHOT_HEADER);
        out.push('\n');
        out.push_str(&format!("family = {}\n", self.family.as_str()));
        out.push_str(&format!("d = {}\n", self.d));
        out.push_str(&format!("r = {}\n", self.r));
        out.push_str(&format!("t = {}\n", self.t));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("noise_scale = {}\n", fmt_f64(self.noise_scale)));
        out.push_str(&format!("c1 = {}\n", fmt_f64(self.caps.c1)));
        out.push_str(&format!("c2 = {}\n", fmt_f64(self.caps.c2)));
        out.push_str(&format!("w_cap = {}\n", fmt_f64(self.caps.w)));
        out.push_str(&format!("gram_attempts = {}\n", self.gram_attempts));
        match self.covariates.bound_radius {
            Some(dd) => out.push_str(&format!("bound_radius = {}\n", fmt_f64(dd))),
            None => out.push_str("bound_radius = none\n"),
        }
        push_matrix(&mut out, "sigma", &self.covariates.sigma);
        match &self.rep_truth {
            RepresentationParams::LinearSubspace { b } => push_matrix(&mut out, "rep_b", b),
            RepresentationParams::UnitDirection { b, .. } => {
                push_matrix(&mut out, "rep_dir", &Matrix::column(b))
            }
            RepresentationParams::TanhMlp { weights, caps } => {
                out.push_str(&format!(
                    "nn_caps = {}\n",
                    caps.iter().map(|&c| fmt_f64(c)).collect::<Vec<_>>().join(",")
                ));
                for (k, w) in weights.iter().enumerate() {
                    push_matrix(&mut out, &format!("rep_w{k}"), w);
                }
            }
        }
        for (idx, h) in self.heads_truth.iter().enumerate() {
            match h {
                HeadParams::LinearHead { alpha, .. } => {
                    push_matrix(&mut out, &format!("head{idx}"), &Matrix::column(alpha))
                }
                HeadParams::MonotoneLink { knots, values } => {
                    let m = Matrix::from_rows(&[knots.clone(), values.clone()]);
                    push_matrix(&mut out, &format!("link{idx}"), &m);
                }
            }
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<TaskEnvironment, EnvError> {
        let mut lines = text.lines().enumerate().peekable();
        let perr = |line: usize, msg: &str| EnvError::SnapshotParse { line: line + 1, msg: msg.into() };
        match lines.next() {
            Some((_, l)) if l.trim() == SNAPSHOT_HEADER => {}
            Some((i, l)) => return Err(perr(i, &format!("expected header, got '{l}'"))),
            None => return Err(perr(0, "empty snapshot")),
        }
        let mut kv: std::collections::BTreeMap<String, String> = Default::default();
        let mut matrices: Vec<(String, Matrix)> = Vec::new();
        while let Some((i, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("begin matrix ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(perr(i, "matrix fence needs name, rows, cols"));
                }
                let name = parts[0].to_string();
                let rows: usize =
                    parts[1].parse().map_err(|_| perr(i, "bad matrix row count"))?;
                let cols: usize =
                    parts[2].parse().map_err(|_| perr(i, "bad matrix col count"))?;
                let mut m = Matrix::zeros(rows, cols);
                for rr in 0..rows {
                    let (li, row_line) =
                        lines.next().ok_or_else(|| perr(i, "matrix truncated"))?;
                    let vals: Vec<&str> = row_line.split_whitespace().collect();
                    if vals.len() != cols {
                        return Err(perr(li, "matrix row width mismatch"));
                    }
                    for (cc, v) in vals.iter().enumerate() {
                        m.set(rr, cc, v.parse().map_err(|_| perr(li, "bad float"))?);
                    }
                }
                match lines.next() {
                    Some((_, l)) if l.trim() == "end matrix" => {}
                    Some((li, _)) => return Err(perr(li, "missing 'end matrix'")),
                    None => return Err(perr(i, "missing 'end matrix'")),
                }
                matrices.push((name, m));
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(perr(i, "expected 'key = value' or matrix fence"));
            }
        }
        let get = |k: &str| -> Result<&String, EnvError> {
            kv.get(k).ok_or(EnvError::SnapshotParse { line: 0, msg: format!("missing key {k}") })
        };
        let parse_f = |k: &str| -> Result<f64, EnvError> {
            get(k)?.parse().map_err(|_| EnvError::SnapshotParse { line: 0, msg: format!("bad float for {k}") })
        };
        let parse_u = |k: &str| -> Result<usize, EnvError> {
            get(k)?.parse().map_err(|_| EnvError::SnapshotParse { line: 0, msg: format!("bad integer for {k}") })
        };
        let family = Family::parse(get("family")?)
            .ok_or(EnvError::SnapshotParse { line: 0, msg: "unknown family".into() })?;
        let d = parse_u("d")?;
        let r = parse_u("r")?;
        let t = parse_u("t")?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| EnvError::SnapshotParse { line: 0, msg: "bad seed".into() })?;
        let caps = NormCaps { c1: parse_f("c1")?, c2: parse_f("c2")?, w: parse_f("w_cap")? };
        let bound_radius = match get("bound_radius")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| EnvError::SnapshotParse {
                line: 0,
                msg: "bad bound_radius".into(),
            })?),
        };
        let find = |name: &str| -> Result<&Matrix, EnvError> {
            matrices
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or(EnvError::SnapshotParse { line: 0, msg: format!("missing matrix {name}") })
        };
        let covariates = CovariateModel::new(find("sigma")?.clone(), bound_radius)?;
        let rep_truth = match family {
            Family::LinearLogistic | Family::LinearRegression => {
                RepresentationParams::LinearSubspace { b: find("rep_b")?.clone() }
            }
            Family::IndexModel => RepresentationParams::UnitDirection {
                b: find("rep_dir")?.col(0),
                cap: caps.w,
            },
            Family::NnRegression => {
                let nn_caps: Vec<f64> = get("nn_caps")?
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| EnvError::SnapshotParse { line: 0, msg: "bad nn_caps".into() })?;
                let mut weights = Vec::new();
                for k in 0.. {
                    match matrices.iter().find(|(n, _)| n == &format!("rep_w{k}")) {
                        Some((_, m)) => weights.push(m.clone()),
                        None => break,
                    }
                }
                if weights.is_empty() {
                    return Err(EnvError::SnapshotParse { line: 0, msg: "missing NN weights".into() });
                }
                RepresentationParams::TanhMlp { weights, caps: nn_caps }
            }
        };
        let mut heads_truth = Vec::with_capacity(t + 1);
        for idx in 0..=t {
            if family == Family::IndexModel {
                let m = find(&format!("link{idx}"))?;
                heads_truth.push(HeadParams::MonotoneLink {
                    knots: m.row(0).to_vec(),
                    values: m.row(1).to_vec(),
                });
            } else {
                let m = find(&format!("head{idx}"))?;
                heads_truth.push(HeadParams::LinearHead { alpha: m.col(0), cap: caps.c2 });
            }
        }
        Ok(TaskEnvironment {
            family,
            covariates,
            rep_truth,
            heads_truth,
            noise_scale: parse_f("noise_scale")?,
            loss: family.loss(),
            caps,
            d,
            r,
            t,
            seed,
            gram_attempts: parse_u("gram_attempts")?,
        })
    }
}
