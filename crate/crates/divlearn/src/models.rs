//! Hypothesis classes for every model family: forward maps, losses, analytic
//! gradients, constraint projections, and monotone-link fitting.
//!
//! Three representation families are supported: a linear subspace map
//! `h(x) = Bᵀx` with orthonormal `B`, a tanh multilayer perceptron with a
//! linear final layer and per-layer max-row-ℓ1 weight caps, and a single
//! direction `h(x) = bᵀx`. Heads are either linear maps with a norm cap or
//! monotone 1-Lipschitz piecewise-linear links with values in [0, 1].

use crate::numlin::{self, dot, norm2, Matrix, NumlinError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("incompatible representation/head variants")]
    IncompatibleVariants,
    #[error("logistic loss needs labels in {{0,1}}, got {0}")]
    BadLabel(f64),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Numlin(#[from] NumlinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Logistic,
    Squared,
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepresentationParams {
    /// `h(x) = Bᵀx` with orthonormal columns, d×r.
    LinearSubspace { b: Matrix },
    /// `h(x) = W_K tanh(W_{K-1} tanh(... W_1 x))`, final layer linear.
    /// `caps[k]` bounds the max row ℓ1 norm of `weights[k]`.
    TanhMlp { weights: Vec<Matrix>, caps: Vec<f64> },
    /// `h(x) = bᵀx` (scalar feature), with ‖b‖ ≤ cap.
    UnitDirection { b: Vec<f64>, cap: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    /// `f(z) = αᵀz` with ‖α‖ ≤ cap.
    LinearHead { alpha: Vec<f64>, cap: f64 },
    /// Piecewise-linear monotone 1-Lipschitz link on a sorted knot grid,
    /// values in [0, 1], constant extrapolation beyond the end knots.
    MonotoneLink { knots: Vec<f64>, values: Vec<f64> },
}

impl RepresentationParams {
    pub fn dim_in(&self) -> usize {
        match self {
            RepresentationParams::LinearSubspace { b } => b.rows(),
            RepresentationParams::TanhMlp { weights, .. } => weights[0].cols(),
            RepresentationParams::UnitDirection { b, .. } => b.len(),
        }
    }

    pub fn dim_out(&self) -> usize {
        match self {
            RepresentationParams::LinearSubspace { b } => b.cols(),
            RepresentationParams::TanhMlp { weights, .. } => {
                weights.last().expect("empty MLP").rows()
            }
            RepresentationParams::UnitDirection { .. } => 1,
        }
    }

    /// `self − step · grad`; shapes must match.
    pub fn step(&self, grad: &RepGrad, step: f64) -> RepresentationParams {
        match (self, grad) {
            (RepresentationParams::LinearSubspace { b }, RepGrad::Dense { mats }) => {
                RepresentationParams::LinearSubspace { b: b.add_scaled(&mats[0], -step) }
            }
            (RepresentationParams::TanhMlp { weights, caps }, RepGrad::Dense { mats }) => {
                let weights = weights
                    .iter()
                    .zip(mats.iter())
                    .map(|(w, g)| w.add_scaled(g, -step))
                    .collect();
                RepresentationParams::TanhMlp { weights, caps: caps.clone() }
            }
            (RepresentationParams::UnitDirection { b, cap }, RepGrad::Vector { v }) => {
                RepresentationParams::UnitDirection { b: numlin::axpy(b, v, -step), cap: *cap }
            }
            _ => panic!("rep/grad variant mismatch"),
        }
    }
}

impl HeadParams {
    pub fn step(&self, grad: &HeadGrad, step: f64) -> HeadParams {
        match (self, grad) {
            (HeadParams::LinearHead { alpha, cap }, HeadGrad { v }) => {
                HeadParams::LinearHead { alpha: numlin::axpy(alpha, v, -step), cap: *cap }
            }
            (HeadParams::MonotoneLink { knots, values }, HeadGrad { v }) => HeadParams::MonotoneLink {
                knots: knots.clone(),
                values: numlin::axpy(values, v, -step),
            },
        }
    }
}

/// Gradient with respect to representation parameters, mirroring the variant
/// shape of the representation it was computed for.
#[derive(Debug, Clone)]
pub enum RepGrad {
    Dense { mats: Vec<Matrix> },
    Vector { v: Vec<f64> },
}

impl RepGrad {
    pub fn zeros_like(rep: &RepresentationParams) -> RepGrad {
        match rep {
            RepresentationParams::LinearSubspace { b } => {
                RepGrad::Dense { mats: vec![Matrix::zeros(b.rows(), b.cols())] }
            }
            RepresentationParams::TanhMlp { weights, .. } => RepGrad::Dense {
                mats: weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            },
            RepresentationParams::UnitDirection { b, .. } => {
                RepGrad::Vector { v: vec![0.0; b.len()] }
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            RepGrad::Dense { mats } => mats.iter().map(|m| {
                let f = m.frobenius_norm();
                f * f
            }).sum(),
            RepGrad::Vector { v } => dot(v, v),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        match self {
            RepGrad::Dense { mats } => {
                for m in mats {
                    for x in m.data_mut() {
                        *x *= s;
                    }
                }
            }
            RepGrad::Vector { v } => {
                for x in v {
                    *x *= s;
                }
            }
        }
    }
}

/// Gradient with respect to head parameters (linear coefficients or link
/// values at the knots).
#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub v: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &HeadParams) -> HeadGrad {
        let n = match head {
            HeadParams::LinearHead { alpha, .. } => alpha.len(),
            HeadParams::MonotoneLink { values, .. } => values.len(),
        };
        HeadGrad { v: vec![0.0; n] }
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.v, &self.v)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.v {
            *x *= s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub rep: RepGrad,
    pub head: HeadGrad,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Apply the representation to one input vector. `UnitDirection` yields a
/// single-entry vector.
pub fn rep_forward(rep: &RepresentationParams, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != rep.dim_in() {
        return Err(ModelError::DimMismatch(format!(
            "rep_forward: input has {} entries, representation expects {}",
            x.len(),
            rep.dim_in()
        )));
    }
    match rep {
        RepresentationParams::LinearSubspace { b } => Ok(b.tr_matvec(x)),
        RepresentationParams::TanhMlp { weights, .. } => {
            let mut a = x.to_vec();
            for (k, w) in weights.iter().enumerate() {
                let mut z = w.matvec(&a);
                if k + 1 < weights.len() {
                    for zi in &mut z {
                        *zi = zi.tanh();
                    }
                }
                a = z;
            }
            Ok(a)
        }
        RepresentationParams::UnitDirection { b, .. } => Ok(vec![dot(b, x)]),
    }
}

/// Evaluate a piecewise-linear link: linear interpolation between knots,
/// constant extrapolation beyond the end knots.
pub fn link_eval(knots: &[f64], values: &[f64], z: f64) -> f64 {
    debug_assert_eq!(knots.len(), values.len());
    let k = knots.len();
    if z <= knots[0] {
        return values[0];
    }
    if z >= knots[k - 1] {
        return values[k - 1];
    }
    let idx = match knots.binary_search_by(|p| p.partial_cmp(&z).expect("finite knots")) {
        Ok(i) => return values[i],
        Err(i) => i - 1,
    };
    let w = (z - knots[idx]) / (knots[idx + 1] - knots[idx]);
    values[idx] * (1.0 - w) + values[idx + 1] * w
}

fn link_segment(knots: &[f64], z: f64) -> LinkSegment {
    let k = knots.len();
    if z <= knots[0] {
        return LinkSegment::Below;
    }
    if z >= knots[k - 1] {
        return LinkSegment::Above;
    }
    match knots.binary_search_by(|p| p.partial_cmp(&z).expect("finite knots")) {
        Ok(i) => LinkSegment::Inside(i.min(k - 2), if i == k - 1 { 1.0 } else { 0.0 }),
        Err(i) => {
            let idx = i - 1;
            LinkSegment::Inside(idx, (z - knots[idx]) / (knots[idx + 1] - knots[idx]))
        }
    }
}

enum LinkSegment {
    Below,
    Above,
    Inside(usize, f64),
}

/// Composite prediction `f(h(x))` for a compatible rep/head pair.
pub fn predict(
    rep: &RepresentationParams,
    head: &HeadParams,
    x: &[f64],
) -> Result<f64, ModelError> {
    match (rep, head) {
        (
            RepresentationParams::LinearSubspace { .. } | RepresentationParams::TanhMlp { .. },
            HeadParams::LinearHead { alpha, .. },
        ) => {
            let h = rep_forward(rep, x)?;
            if h.len() != alpha.len() {
                return Err(ModelError::DimMismatch(format!(
                    "predict: features {} vs head {}",
                    h.len(),
                    alpha.len()
                )));
            }
            Ok(dot(alpha, &h))
        }
        (RepresentationParams::UnitDirection { b, .. }, HeadParams::MonotoneLink { knots, values }) => {
            if b.len() != x.len() {
                return Err(ModelError::DimMismatch("predict: direction/input".into()));
            }
            Ok(link_eval(knots, values, dot(b, x)))
        }
        _ => Err(ModelError::IncompatibleVariants),
    }
}

/// Pointwise loss. The logistic branch uses the overflow-safe form
/// `log(1+exp(−|z|)) + max(z, 0) − y·z`.
pub fn loss_value(loss: LossId, pred: f64, y: f64) -> Result<f64, ModelError> {
    match loss {
        LossId::Logistic => {
            if y != 0.0 && y != 1.0 {
                return Err(ModelError::BadLabel(y));
            }
            Ok((-pred.abs()).exp().ln_1p() + pred.max(0.0) - y * pred)
        }
        LossId::Squared => Ok((y - pred) * (y - pred)),
        LossId::Absolute => Ok((y - pred).abs()),
    }
}

/// dℓ/dpred. The absolute loss takes subgradient 0 at a tie.
pub fn loss_grad_pred(loss: LossId, pred: f64, y: f64) -> f64 {
    match loss {
        LossId::Logistic => sigmoid(pred) - y,
        LossId::Squared => 2.0 * (pred - y),
        LossId::Absolute => {
            let d = y - pred;
            if d == 0.0 {
                0.0
            } else {
                -d.signum()
            }
        }
    }
}

/// Accumulate `scale · ∇ℓ(f(h(x)), y)` into the gradient buffers and return
/// the loss value at the point. This is the hot path for full-batch ERM.
pub fn accumulate_grad(
    loss: LossId,
    rep: &RepresentationParams,
    head: &HeadParams,
    x: &[f64],
    y: f64,
    scale: f64,
    rep_acc: &mut RepGrad,
    head_acc: &mut HeadGrad,
) -> Result<f64, ModelError> {
    match (rep, head) {
        (RepresentationParams::LinearSubspace { b }, HeadParams::LinearHead { alpha, .. }) => {
            let h = b.tr_matvec(x);
            let pred = dot(alpha, &h);
            let lv = loss_value(loss, pred, y)?;
            let g = scale * loss_grad_pred(loss, pred, y);
            if let RepGrad::Dense { mats } = rep_acc {
                let gb = &mut mats[0];
                for i in 0..x.len() {
                    let xi = g * x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    let row = gb.row_mut(i);
                    for (o, &ak) in row.iter_mut().zip(alpha.iter()) {
                        *o += xi * ak;
                    }
                }
            } else {
                unreachable!("accumulator shape");
            }
            for (o, &hk) in head_acc.v.iter_mut().zip(h.iter()) {
                *o += g * hk;
            }
            Ok(lv)
        }
        (RepresentationParams::TanhMlp { weights, .. }, HeadParams::LinearHead { alpha, .. }) => {
            // forward with cached post-activations
            let mut acts: Vec<Vec<f64>> = Vec::with_capacity(weights.len() + 1);
            acts.push(x.to_vec());
            for (k, w) in weights.iter().enumerate() {
                let mut z = w.matvec(acts.last().expect("nonempty"));
                if k + 1 < weights.len() {
                    for zi in &mut z {
                        *zi = zi.tanh();
                    }
                }
                acts.push(z);
            }
            let h = acts.last().expect("nonempty").clone();
            if h.len() != alpha.len() {
                return Err(ModelError::DimMismatch("accumulate_grad: head width".into()));
            }
            let pred = dot(alpha, &h);
            let lv = loss_value(loss, pred, y)?;
            let g = scale * loss_grad_pred(loss, pred, y);
            for (o, &hk) in head_acc.v.iter_mut().zip(h.iter()) {
                *o += g * hk;
            }
            // backprop through the linear final layer and tanh hidden layers
            let mut delta: Vec<f64> = alpha.iter().map(|&a| g * a).collect();
            if let RepGrad::Dense { mats } = rep_acc {
                for k in (0..weights.len()).rev() {
                    let input = &acts[k];
                    let gm = &mut mats[k];
                    for (i, &di) in delta.iter().enumerate() {
                        if di == 0.0 {
                            continue;
                        }
                        let row = gm.row_mut(i);
                        for (o, &aj) in row.iter_mut().zip(input.iter()) {
                            *o += di * aj;
                        }
                    }
                    if k > 0 {
                        let mut next = weights[k].tr_matvec(&delta);
                        // act[k] holds tanh outputs of layer k, so 1 − a² is its derivative
                        for (nj, &aj) in next.iter_mut().zip(acts[k].iter()) {
                            *nj *= 1.0 - aj * aj;
                        }
                        delta = next;
                    }
                }
            } else {
                unreachable!("accumulator shape");
            }
            Ok(lv)
        }
        (RepresentationParams::UnitDirection { b, .. }, HeadParams::MonotoneLink { knots, values }) => {
            let z = dot(b, x);
            let (pred, slope, seg) = match link_segment(knots, z) {
                LinkSegment::Below => (values[0], 0.0, None),
                LinkSegment::Above => (values[values.len() - 1], 0.0, None),
                LinkSegment::Inside(i, w) => {
                    let pred = values[i] * (1.0 - w) + values[i + 1] * w;
                    let slope = (values[i + 1] - values[i]) / (knots[i + 1] - knots[i]);
                    (pred, slope, Some((i, w)))
                }
            };
            let lv = loss_value(loss, pred, y)?;
            let g = scale * loss_grad_pred(loss, pred, y);
            if let RepGrad::Vector { v } = rep_acc {
                if slope != 0.0 {
                    for (o, &xi) in v.iter_mut().zip(x.iter()) {
                        *o += g * slope * xi;
                    }
                }
            } else {
                unreachable!("accumulator shape");
            }
            match seg {
                Some((i, w)) => {
                    head_acc.v[i] += g * (1.0 - w);
                    head_acc.v[i + 1] += g * w;
                }
                None => {
                    let idx = if z <= knots[0] { 0 } else { values.len() - 1 };
                    head_acc.v[idx] += g;
                }
            }
            Ok(lv)
        }
        _ => Err(ModelError::IncompatibleVariants),
    }
}

/// Value and weight gradients of the linear functional coeffsᵀh(x) of a tanh
/// MLP output, accumulated into `acc` (one matrix per layer).
pub fn mlp_functional_grad(
    weights: &[Matrix],
    x: &[f64],
    coeffs: &[f64],
    acc: &mut [Matrix],
) -> f64 {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(weights.len() + 1);
    acts.push(x.to_vec());
    for (k, w) in weights.iter().enumerate() {
        let mut z = w.matvec(acts.last().expect("nonempty"));
        if k + 1 < weights.len() {
            for zi in &mut z {
                *zi = zi.tanh();
            }
        }
        acts.push(z);
    }
    let value = dot(coeffs, acts.last().expect("nonempty"));
    let mut delta = coeffs.to_vec();
    for k in (0..weights.len()).rev() {
        let input = &acts[k];
        for (i, &di) in delta.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            let row = acc[k].row_mut(i);
            for (o, &aj) in row.iter_mut().zip(input.iter()) {
                *o += di * aj;
            }
        }
        if k > 0 {
            let mut next = weights[k].tr_matvec(&delta);
            for (nj, &aj) in next.iter_mut().zip(acts[k].iter()) {
                *nj *= 1.0 - aj * aj;
            }
            delta = next;
        }
    }
    value
}

/// Gradient of the pointwise loss with respect to all representation and head
/// parameters.
pub fn grad_params(
    loss: LossId,
    rep: &RepresentationParams,
    head: &HeadParams,
    x: &[f64],
    y: f64,
) -> Result<Gradients, ModelError> {
    let mut rep_acc = RepGrad::zeros_like(rep);
    let mut head_acc = HeadGrad::zeros_like(head);
    accumulate_grad(loss, rep, head, x, y, 1.0, &mut rep_acc, &mut head_acc)?;
    Ok(Gradients { rep: rep_acc, head: head_acc })
}

/// Upper bound on the ∞→2 operator norm: the ℓ2 norm of the vector of row ℓ1
/// norms. Exact when all rows peak on a common sign pattern.
pub fn inf_to_two_upper(w: &Matrix) -> f64 {
    (0..w.rows())
        .map(|i| {
            let rho: f64 = w.row(i).iter().map(|a| a.abs()).sum();
            rho * rho
        })
        .sum::<f64>()
        .sqrt()
}

/// Project a representation back onto its class constraints.
pub fn project_rep(rep: &RepresentationParams) -> Result<RepresentationParams, ModelError> {
    match rep {
        RepresentationParams::LinearSubspace { b } => {
            Ok(RepresentationParams::LinearSubspace { b: numlin::qr_orthonormalize(b)? })
        }
        RepresentationParams::TanhMlp { weights, caps } => {
            let last = weights.len() - 1;
            let mut out = Vec::with_capacity(weights.len());
            for (k, w) in weights.iter().enumerate() {
                let mut wk = w.clone();
                for i in 0..wk.rows() {
                    let rho: f64 = wk.row(i).iter().map(|a| a.abs()).sum();
                    if rho > caps[k] {
                        let s = caps[k] / rho;
                        for a in wk.row_mut(i) {
                            *a *= s;
                        }
                    }
                }
                if k == last {
                    let bound = inf_to_two_upper(&wk);
                    if bound > caps[k] {
                        log::debug!(
                            "final-layer ∞→2 bound {bound:.3e} above cap {:.3e}; rescaling globally",
                            caps[k]
                        );
                        wk = wk.scale(caps[k] / bound);
                    }
                }
                out.push(wk);
            }
            Ok(RepresentationParams::TanhMlp { weights: out, caps: caps.clone() })
        }
        RepresentationParams::UnitDirection { b, cap } => {
            let n = norm2(b);
            let b = if n > *cap {
                b.iter().map(|x| x * cap / n).collect()
            } else {
                b.clone()
            };
            Ok(RepresentationParams::UnitDirection { b, cap: *cap })
        }
    }
}

/// Project a head back onto its class constraints.
pub fn project_head(head: &HeadParams) -> HeadParams {
    match head {
        HeadParams::LinearHead { alpha, cap } => {
            let n = norm2(alpha);
            let alpha = if n > *cap {
                alpha.iter().map(|x| x * cap / n).collect()
            } else {
                alpha.clone()
            };
            HeadParams::LinearHead { alpha, cap: *cap }
        }
        HeadParams::MonotoneLink { knots, values } => {
            let projected = project_link_values(knots, values);
            HeadParams::MonotoneLink { knots: knots.clone(), values: projected }
        }
    }
}

/// Project a full parameter set (representation plus heads).
pub fn project_constraints(
    rep: &RepresentationParams,
    heads: &[HeadParams],
) -> Result<(RepresentationParams, Vec<HeadParams>), ModelError> {
    let rep = project_rep(rep)?;
    let heads = heads.iter().map(project_head).collect();
    Ok((rep, heads))
}

/// Weighted pool-adjacent-violators: nondecreasing fit minimizing weighted
/// squared error.
fn pava(targets: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = targets.len();
    let mut level: Vec<f64> = Vec::with_capacity(n);
    let mut wsum: Vec<f64> = Vec::with_capacity(n);
    let mut count: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        level.push(targets[i]);
        wsum.push(weights[i].max(1e-12));
        count.push(1);
        while level.len() > 1 && level[level.len() - 2] > level[level.len() - 1] {
            let (l2, w2, c2) =
                (level.pop().expect("nonempty"), wsum.pop().expect("nonempty"), count.pop().expect("nonempty"));
            let last = level.len() - 1;
            let merged_w = wsum[last] + w2;
            level[last] = (level[last] * wsum[last] + l2 * w2) / merged_w;
            wsum[last] = merged_w;
            count[last] += c2;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (l, c) in level.iter().zip(count.iter()) {
        for _ in 0..*c {
            out.push(*l);
        }
    }
    out
}

/// Enforce monotonicity, the 1-Lipschitz slope cap, and the [0,1] value box on
/// a knot-value vector.
fn project_link_values(knots: &[f64], values: &[f64]) -> Vec<f64> {
    let mut v = pava(values, &vec![1.0; values.len()]);
    for k in 1..v.len() {
        let dz = knots[k] - knots[k - 1];
        v[k] = v[k].min(v[k - 1] + dz).max(v[k - 1]);
    }
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }
    v
}

const FIT_LINK_TOL: f64 = 1e-10;
const FIT_LINK_SWEEP_CAP: usize = 5000;
pub const DEFAULT_LINK_KNOTS: usize = 33;

/// Squared-loss projection of sample pairs onto the class of monotone,
/// 1-Lipschitz, [0,1]-valued piecewise-linear links on a knot grid.
///
/// Initialization pools weighted knot targets through PAVA and clips slopes
/// and values; cyclic coordinate descent then refines each knot value inside
/// the box its neighbours allow, until objective decrease per sweep falls
/// below 1e-10.
pub fn fit_link(
    pairs: &[(f64, f64)],
    prior_knots: Option<&[f64]>,
) -> Result<HeadParams, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::Empty);
    }
    if pairs.iter().any(|(z, _)| !z.is_finite()) {
        return Err(ModelError::DimMismatch("fit_link: non-finite z".into()));
    }
    let knots = match prior_knots {
        Some(k) => {
            let mut k = k.to_vec();
            k.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
            k.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            k
        }
        None => quantile_knots(pairs, DEFAULT_LINK_KNOTS),
    };
    if knots.is_empty() {
        return Err(ModelError::Empty);
    }
    if knots.len() == 1 {
        let mean = pairs.iter().map(|(_, y)| y).sum::<f64>() / pairs.len() as f64;
        return Ok(HeadParams::MonotoneLink { knots, values: vec![mean.clamp(0.0, 1.0)] });
    }

    let kn = knots.len();
    // weights of each sample on its two adjacent knots
    let mut touch: Vec<(usize, f64, f64)> = Vec::with_capacity(pairs.len()); // (left knot, w_right, y)
    for &(z, y) in pairs {
        match link_segment(&knots, z) {
            LinkSegment::Below => touch.push((0, 0.0, y)),
            LinkSegment::Above => touch.push((kn - 2, 1.0, y)),
            LinkSegment::Inside(i, w) => touch.push((i, w, y)),
        }
    }

    // initialization: weighted mean target per knot, PAVA, clip
    let mut tw = vec![0.0; kn];
    let mut ty = vec![0.0; kn];
    for &(i, w, y) in &touch {
        tw[i] += 1.0 - w;
        ty[i] += (1.0 - w) * y;
        tw[i + 1] += w;
        ty[i + 1] += w * y;
    }
    let mut targets = vec![0.0; kn];
    let mut last_seen = 0.5;
    for k in 0..kn {
        if tw[k] > 1e-12 {
            last_seen = ty[k] / tw[k];
        }
        targets[k] = last_seen;
    }
    let mut v = pava(&targets, &tw.iter().map(|w| w.max(1e-12)).collect::<Vec<_>>());
    for k in 1..kn {
        let dz = knots[k] - knots[k - 1];
        v[k] = v[k].min(v[k - 1] + dz).max(v[k - 1]);
    }
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }

    // per-knot sample lists for coordinate updates
    let mut per_knot: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); kn]; // (other knot, own weight, y)
    for &(i, w, y) in &touch {
        per_knot[i].push((i + 1, 1.0 - w, y));
        per_knot[i + 1].push((i, w, y));
    }

    let objective = |v: &[f64]| -> f64 {
        touch
            .iter()
            .map(|&(i, w, y)| {
                let p = v[i] * (1.0 - w) + v[i + 1] * w;
                (y - p) * (y - p)
            })
            .sum()
    };

    let mut obj = objective(&v);
    for sweep in 0..FIT_LINK_SWEEP_CAP {
        // alternate sweep direction to move information both ways
        let order: Vec<usize> = if sweep % 2 == 0 {
            (0..kn).collect()
        } else {
            (0..kn).rev().collect()
        };
        for &k in &order {
            let mut num = 0.0;
            let mut den = 0.0;
            for &(other, w_own, y) in &per_knot[k] {
                let resid = y - v[other] * (1.0 - w_own);
                num += w_own * resid;
                den += w_own * w_own;
            }
            let mut lo = 0.0_f64;
            let mut hi = 1.0_f64;
            if k > 0 {
                lo = lo.max(v[k - 1]);
                hi = hi.min(v[k - 1] + (knots[k] - knots[k - 1]));
            }
            if k + 1 < kn {
                hi = hi.min(v[k + 1]);
                lo = lo.max(v[k + 1] - (knots[k + 1] - knots[k]));
            }
            let target = if den > 1e-12 { num / den } else { v[k] };
            if lo <= hi {
                v[k] = target.clamp(lo, hi);
            }
        }
        let new_obj = objective(&v);
        let drop = obj - new_obj;
        obj = new_obj;
        if drop < FIT_LINK_TOL {
            break;
        }
    }
    let values = project_link_values(&knots, &v);
    Ok(HeadParams::MonotoneLink { knots, values })
}

/// Empirical quantile grid over the observed z values.
pub fn quantile_knots(pairs: &[(f64, f64)], count: usize) -> Vec<f64> {
    let mut zs: Vec<f64> = pairs.iter().map(|(z, _)| *z).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).expect("finite z"));
    let n = zs.len();
    let mut knots: Vec<f64> = (0..count)
        .map(|k| {
            let q = k as f64 / (count - 1).max(1) as f64;
            zs[((q * (n - 1) as f64).round() as usize).min(n - 1)]
        })
        .collect();
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    knots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::subspace_sine;
    use crate::rng::KeyedRng;

    fn first_two_cols() -> RepresentationParams {
        RepresentationParams::LinearSubspace {
            b: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]),
        }
    }

    #[test]
    fn forward_linear_subspace() {
        let h = rep_forward(&first_two_cols(), &[3.0, 5.0, 7.0]).unwrap();
        assert_eq!(h, vec![3.0, 5.0]);
    }

    #[test]
    fn forward_zero_mlp_is_zero() {
        let rep = RepresentationParams::TanhMlp {
            weights: vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)],
            caps: vec![1.0, 1.0],
        };
        let h = rep_forward(&rep, &[1.0, -2.0, 3.0]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    /// Independent high-precision oracle for tanh via its exponential
    /// definition evaluated with argument splitting.
    fn tanh_series(x: f64) -> f64 {
        // tanh x = (e^{2x} − 1)/(e^{2x} + 1), with exp from its power series
        let mut term = 1.0_f64;
        let mut sum = 1.0_f64;
        for k in 1..60 {
            term *= 2.0 * x / k as f64;
            sum += term;
        }
        (sum - 1.0) / (sum + 1.0)
    }

    #[test]
    fn forward_scalar_chain_matches_series_oracle() {
        let rep = RepresentationParams::TanhMlp {
            weights: vec![
                Matrix::from_rows(&[vec![1.0]]),
                Matrix::from_rows(&[vec![1.0]]),
            ],
            caps: vec![1.0, 1.0],
        };
        let h = rep_forward(&rep, &[0.5]).unwrap();
        assert!((h[0] - tanh_series(0.5)).abs() < 1e-14);
        assert!((h[0] - 0.46211715726000974_f64).abs() < 1e-12);
    }

    #[test]
    fn predict_linear_head() {
        let rep = first_two_cols();
        let head = HeadParams::LinearHead { alpha: vec![1.0, -1.0], cap: 10.0 };
        // h(x) = (2, 5)
        let p = predict(&rep, &head, &[2.0, 5.0, 9.0]).unwrap();
        assert_eq!(p, -3.0);
    }

    #[test]
    fn predict_identity_ramp_link() {
        let rep = RepresentationParams::UnitDirection { b: vec![1.0], cap: 1.0 };
        let head = HeadParams::MonotoneLink { knots: vec![0.0, 1.0], values: vec![0.0, 1.0] };
        assert!((predict(&rep, &head, &[0.25]).unwrap() - 0.25).abs() < 1e-15);
        // constant extrapolation beyond the last knot
        assert_eq!(predict(&rep, &head, &[4.0]).unwrap(), 1.0);
        assert_eq!(predict(&rep, &head, &[-2.0]).unwrap(), 0.0);
    }

    #[test]
    fn incompatible_variants_rejected() {
        let rep = RepresentationParams::UnitDirection { b: vec![1.0], cap: 1.0 };
        let head = HeadParams::LinearHead { alpha: vec![1.0], cap: 1.0 };
        assert!(matches!(predict(&rep, &head, &[1.0]), Err(ModelError::IncompatibleVariants)));
    }

    #[test]
    fn logistic_loss_values() {
        let l = loss_value(LossId::Logistic, 0.0, 1.0).unwrap();
        assert!((l - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(loss_value(LossId::Squared, 2.0, 5.0).unwrap(), 9.0);
        // stable at large negative margin: oracle via ln_1p directly
        let l = loss_value(LossId::Logistic, 30.0, 0.0).unwrap();
        let oracle = 30.0 + (-30.0_f64).exp().ln_1p();
        assert!((l - oracle).abs() < 1e-12);
        assert!(l.is_finite());
        assert!(matches!(loss_value(LossId::Logistic, 0.0, 0.5), Err(ModelError::BadLabel(_))));
    }

    #[test]
    fn logistic_stable_form_equals_textbook_form() {
        for i in 0..200 {
            let z = -20.0 + 40.0 * (i as f64) / 199.0;
            for y in [0.0, 1.0] {
                let stable = loss_value(LossId::Logistic, z, y).unwrap();
                // 1 − σ(z) = σ(−z) keeps the textbook form evaluable at |z| = 20
                let textbook = -y * sigmoid(z).ln() - (1.0 - y) * sigmoid(-z).ln();
                assert!(
                    (stable - textbook).abs() < 1e-12 * (1.0 + textbook.abs()),
                    "z={z} y={y}"
                );
            }
        }
    }

    #[test]
    fn squared_linear_head_gradient_analytic() {
        let rep = first_two_cols();
        let head = HeadParams::LinearHead { alpha: vec![0.5, -1.5], cap: 10.0 };
        let x = [2.0, 5.0, 9.0];
        let y = 1.0;
        let g = grad_params(LossId::Squared, &rep, &head, &x, y).unwrap();
        let h = rep_forward(&rep, &x).unwrap();
        let pred = dot(&[0.5, -1.5], &h);
        for (gi, hi) in g.head.v.iter().zip(h.iter()) {
            assert!((gi - 2.0 * (pred - y) * hi).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_mlp_gradients_vanish_for_zero_target() {
        let rep = RepresentationParams::TanhMlp {
            weights: vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)],
            caps: vec![1.0, 1.0],
        };
        let head = HeadParams::LinearHead { alpha: vec![0.0, 0.0], cap: 1.0 };
        let g = grad_params(LossId::Squared, &rep, &head, &[1.0, 2.0, 3.0], 0.0).unwrap();
        assert!(g.rep.norm_sq() == 0.0 && g.head.norm_sq() == 0.0);
    }

    fn fd_check(
        loss: LossId,
        rep: &RepresentationParams,
        head: &HeadParams,
        x: &[f64],
        y: f64,
    ) -> f64 {
        let eps = 1e-5;
        let g = grad_params(loss, rep, head, x, y).unwrap();
        let mut worst = 0.0_f64;
        let eval = |r: &RepresentationParams, h: &HeadParams| {
            loss_value(loss, predict(r, h, x).unwrap(), y).unwrap()
        };
        // perturb representation entries through the step interface
        let flat = |g: &RepGrad| -> Vec<f64> {
            match g {
                RepGrad::Dense { mats } => mats.iter().flat_map(|m| m.data().to_vec()).collect(),
                RepGrad::Vector { v } => v.clone(),
            }
        };
        let gr = flat(&g.rep);
        for (idx, &gi) in gr.iter().enumerate() {
            let mut e = RepGrad::zeros_like(rep);
            match &mut e {
                RepGrad::Dense { mats } => {
                    let mut off = idx;
                    for m in mats.iter_mut() {
                        let len = m.data().len();
                        if off < len {
                            m.data_mut()[off] = 1.0;
                            break;
                        }
                        off -= len;
                    }
                }
                RepGrad::Vector { v } => v[idx] = 1.0,
            }
            let plus = eval(&rep.step(&e, -eps), head);
            let minus = eval(&rep.step(&e, eps), head);
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((gi - fd).abs() / gi.abs().max(fd.abs()).max(1.0));
        }
        let gh = &g.head.v;
        for (idx, &gi) in gh.iter().enumerate() {
            let mut e = HeadGrad::zeros_like(head);
            e.v[idx] = 1.0;
            let plus = eval(rep, &head.step(&e, -eps));
            let minus = eval(rep, &head.step(&e, eps));
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((gi - fd).abs() / gi.abs().max(fd.abs()).max(1.0));
        }
        worst
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = KeyedRng::new(5, &[101]);
        for trial in 0..20 {
            let w1 = Matrix::from_fn(4, 3, |_, _| 0.4 * rng.normal());
            let w2 = Matrix::from_fn(3, 4, |_, _| 0.4 * rng.normal());
            let w3 = Matrix::from_fn(2, 3, |_, _| 0.4 * rng.normal());
            let rep = RepresentationParams::TanhMlp {
                weights: vec![w1, w2, w3],
                caps: vec![4.0, 4.0, 4.0],
            };
            let head = HeadParams::LinearHead { alpha: rng.normal_vec(2), cap: 10.0 };
            let x = rng.normal_vec(3);
            let y = rng.normal();
            let worst = fd_check(LossId::Squared, &rep, &head, &x, y);
            assert!(worst <= 1e-4, "trial {trial}: worst fd error {worst}");
        }
    }

    #[test]
    fn link_gradient_matches_finite_differences() {
        let mut rng = KeyedRng::new(6, &[202]);
        let knots: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        for _ in 0..20 {
            let raw: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
            let values = project_link_values(&knots, &raw);
            let head = HeadParams::MonotoneLink { knots: knots.clone(), values };
            let b = rng.unit_vector(4);
            let rep = RepresentationParams::UnitDirection { b: b.clone(), cap: 1.0 };
            let x = rng.normal_vec(4);
            let z = dot(&b, &x);
            // stay away from kinks so central differences see one segment
            if knots.iter().any(|k| (z - k).abs() < 1e-3) || z < knots[0] || z > knots[8] {
                continue;
            }
            let y = rng.uniform();
            let worst = fd_check(LossId::Squared, &rep, &head, &x, y);
            assert!(worst <= 1e-4, "worst fd error {worst}");
        }
    }

    #[test]
    fn projection_rescales_head() {
        let head = HeadParams::LinearHead { alpha: vec![2.0, 0.0], cap: 1.0 };
        let p = project_head(&head);
        if let HeadParams::LinearHead { alpha, .. } = p {
            assert!((alpha[0] - 1.0).abs() < 1e-15 && alpha[1] == 0.0);
        } else {
            panic!("variant changed");
        }
    }

    #[test]
    fn projection_idempotent() {
        let mut rng = KeyedRng::new(9, &[303]);
        let b = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let rep = RepresentationParams::LinearSubspace { b };
        let once = project_rep(&rep).unwrap();
        let twice = project_rep(&once).unwrap();
        if let (
            RepresentationParams::LinearSubspace { b: b1 },
            RepresentationParams::LinearSubspace { b: b2 },
        ) = (&once, &twice)
        {
            assert!(b1.add_scaled(b2, -1.0).max_abs() < 1e-12);
        }
        let head = HeadParams::LinearHead { alpha: vec![0.3, 0.1], cap: 1.0 };
        assert_eq!(project_head(&head), head);
    }

    #[test]
    fn projection_of_perturbed_basis_stays_close() {
        let mut rng = KeyedRng::new(11, &[404]);
        let b0 = numlin::qr_orthonormalize(&Matrix::from_fn(6, 2, |_, _| rng.normal())).unwrap();
        let raw = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let noise = raw.scale(1.0 / raw.frobenius_norm());
        let rep = RepresentationParams::LinearSubspace { b: b0.add_scaled(&noise, 1e-3) };
        let proj = project_rep(&rep).unwrap();
        if let RepresentationParams::LinearSubspace { b } = proj {
            assert!(numlin::orthonormal_defect(&b) < 1e-10);
            assert!(subspace_sine(&b, &b0).unwrap() < 2e-3);
        }
    }

    #[test]
    fn mlp_output_norm_bounded_by_final_layer() {
        let mut rng = KeyedRng::new(13, &[505]);
        for _ in 0..10 {
            let w1 = Matrix::from_fn(6, 4, |_, _| rng.normal());
            let w2 = Matrix::from_fn(3, 6, |_, _| rng.normal());
            let rep = project_rep(&RepresentationParams::TanhMlp {
                weights: vec![w1, w2],
                caps: vec![2.0, 2.0],
            })
            .unwrap();
            let (weights, exact) = if let RepresentationParams::TanhMlp { weights, .. } = &rep {
                // exact ∞→2 norm by sign enumeration (small width)
                let w = &weights[1];
                let cols = w.cols();
                let mut best = 0.0_f64;
                for mask in 0..(1u32 << cols) {
                    let u: Vec<f64> = (0..cols)
                        .map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 })
                        .collect();
                    best = best.max(norm2(&w.matvec(&u)));
                }
                (weights.clone(), best)
            } else {
                unreachable!()
            };
            let _ = weights;
            for _ in 0..20 {
                let x = rng.normal_vec(4).iter().map(|v| 10.0 * v).collect::<Vec<_>>();
                let h = rep_forward(&rep, &x).unwrap();
                assert!(norm2(&h) <= exact + 1e-9);
            }
        }
    }

    #[test]
    fn fit_link_identity_ramp_fixed_point() {
        let knots: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let pairs: Vec<(f64, f64)> = knots.iter().map(|&z| (z, z)).collect();
        let link = fit_link(&pairs, Some(&knots)).unwrap();
        if let HeadParams::MonotoneLink { values, .. } = link {
            for (v, k) in values.iter().zip(knots.iter()) {
                assert!((v - k).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_link_constant() {
        let pairs: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 0.7)).collect();
        let link = fit_link(&pairs, None).unwrap();
        if let HeadParams::MonotoneLink { values, .. } = link {
            assert!(values.iter().all(|v| (v - 0.7).abs() < 1e-9));
        }
    }

    /// Brute-force grid DP over discretized knot values (step 1e-3), the
    /// independent oracle for the link projection objective.
    fn link_dp_oracle(knots: &[f64], pairs: &[(f64, f64)]) -> f64 {
        let step = 1e-3;
        let levels = 1001usize;
        let kn = knots.len();
        // cost of assigning value-level pairs across one segment
        let seg_cost = |k: usize, va: f64, vb: f64| -> f64 {
            pairs
                .iter()
                .filter_map(|&(z, y)| {
                    let inside = if k == 0 { z <= knots[1] } else if k == kn - 2 {
                        z > knots[k]
                    } else {
                        z > knots[k] && z <= knots[k + 1]
                    };
                    if !inside {
                        return None;
                    }
                    let zc = z.clamp(knots[k], knots[k + 1]);
                    let w = (zc - knots[k]) / (knots[k + 1] - knots[k]);
                    let p = va * (1.0 - w) + vb * w;
                    Some((y - p) * (y - p))
                })
                .sum()
        };
        let mut best = vec![0.0_f64; levels];
        for k in 0..kn - 1 {
            let dz = knots[k + 1] - knots[k];
            let max_up = (dz / step).floor() as usize;
            let mut next = vec![f64::INFINITY; levels];
            for vb in 0..levels {
                let lo = vb.saturating_sub(max_up);
                for va in lo..=vb {
                    let c = best[va] + seg_cost(k, va as f64 * step, vb as f64 * step);
                    if c < next[vb] {
                        next[vb] = c;
                    }
                }
            }
            best = next;
        }
        best.into_iter().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn fit_link_matches_grid_dp_oracle() {
        let knots = vec![0.0, 0.4, 1.0, 1.5];
        let pairs = vec![
            (0.05, 0.9),
            (0.3, 0.1),
            (0.55, 0.4),
            (0.8, 0.85),
            (1.2, 0.3),
            (1.45, 0.95),
        ];
        let link = fit_link(&pairs, Some(&knots)).unwrap();
        let obj = if let HeadParams::MonotoneLink { knots, values } = &link {
            pairs
                .iter()
                .map(|&(z, y)| {
                    let p = link_eval(knots, values, z);
                    (y - p) * (y - p)
                })
                .sum::<f64>()
        } else {
            unreachable!()
        };
        let oracle = link_dp_oracle(&knots, &pairs);
        assert!(
            obj <= oracle + 1e-4,
            "coordinate descent objective {obj} vs grid oracle {oracle}"
        );
    }

    #[test]
    fn fit_link_output_always_feasible() {
        let mut rng = KeyedRng::new(21, &[606]);
        for _ in 0..20 {
            let pairs: Vec<(f64, f64)> = (0..40)
                .map(|_| (rng.normal() * 2.0, rng.normal() * 0.8 + 0.5))
                .collect();
            let link = fit_link(&pairs, None).unwrap();
            if let HeadParams::MonotoneLink { knots, values } = link {
                for v in &values {
                    assert!((0.0..=1.0).contains(v));
                }
                for k in 1..values.len() {
                    let slope = (values[k] - values[k - 1]) / (knots[k] - knots[k - 1]);
                    assert!(slope >= -1e-12 && slope <= 1.0 + 1e-9, "slope {slope}");
                }
            }
        }
    }

    #[test]
    fn fit_link_empty_rejected() {
        assert!(matches!(fit_link(&[], None), Err(ModelError::Empty)));
    }
}
