//! Training objectives with exact gradients.
//!
//! Every loss takes two `N×D` batches (the two views) and returns the value
//! plus the gradient with respect to each batch. Composite objectives act on
//! representations `Y` and/or embeddings `Z`; see [`LossKind`].

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::nn::{l2_normalize, l2_normalize_backward, NnError};
use crate::scalar::{cast, count, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{what} needs at least {need} rows, got {got}")]
    TooFewRows { what: &'static str, need: usize, got: usize },
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("batch contains non-finite values")]
    NonFinite,
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("unknown loss {0:?} (expected one of infonce, barlow, vicreg, comp1, comp2, reg_y, reg_z)")]
    UnknownLoss(String),
}

fn check_pair<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch(a.dim(), b.dim()));
    }
    check_finite(a)?;
    check_finite(b)
}

fn check_finite<T: Scalar>(a: &Array2<T>) -> Result<(), LossError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

fn need_rows<T>(a: &Array2<T>, need: usize, what: &'static str) -> Result<(), LossError> {
    if a.nrows() < need {
        Err(LossError::TooFewRows { what, need, got: a.nrows() })
    } else {
        Ok(())
    }
}

/// One weighted component of a loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct Term<T> {
    pub name: String,
    pub weight: T,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics<T> {
    pub terms: Vec<Term<T>>,
    /// Mean over dimensions of the per-dimension std of the first batch.
    pub mean_std: Option<T>,
    /// Cross-correlation or covariance matrix, when the loss computes one.
    pub matrix: Option<Array2<T>>,
}

impl<T: Scalar> Diagnostics<T> {
    pub fn weighted_sum(&self) -> T {
        self.terms.iter().fold(T::zero(), |s, t| s + t.weight * t.value)
    }

    fn term(name: &str, weight: T, value: T) -> Term<T> {
        Term {
            name: name.to_string(),
            weight,
            value,
        }
    }

    fn scaled(self, prefix: &str, factor: T) -> Vec<Term<T>> {
        self.terms
            .into_iter()
            .map(|t| Term {
                name: format!("{prefix}{}", t.name),
                weight: t.weight * factor,
                value: t.value,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad_a: Array2<T>,
    pub grad_b: Array2<T>,
    pub diagnostics: Diagnostics<T>,
}

/// Mean over dimensions of the population std of each column.
pub fn mean_dim_std<T: Scalar>(a: &Array2<T>) -> T {
    let n: T = count(a.nrows().max(1));
    let mean = a.sum_axis(Axis(0)) / n;
    let var = (a - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
    var.mapv(|v| v.sqrt()).mean().unwrap_or_else(T::zero)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `Σ_j exp(a_i·b_j/τ)`.
    #[default]
    CrossView,
    /// `Σ_j exp(a_i·a_j/τ)`.
    WithinView,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceConfig {
    pub tau: f64,
    pub denominator: Denominator,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            denominator: Denominator::CrossView,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub eps_var: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 1.0,
            nu: 0.04,
            eps_var: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarlowConfig {
    pub lambda: f64,
    pub eps_std: f64,
}

impl Default for BarlowConfig {
    fn default() -> Self {
        Self { lambda: 0.05, eps_std: 1e-8 }
    }
}

fn row_softmax<T: Scalar>(s: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let mut p = s.clone();
    let mut lse = Array1::zeros(s.nrows());
    for (mut row, l) in p.axis_iter_mut(Axis(0)).zip(lse.iter_mut()) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        *l = max + sum.ln();
    }
    (p, lse)
}

fn zero_row(e: NnError) -> LossError {
    match e {
        NnError::ZeroRow(i) => LossError::ZeroRow(i),
        other => LossError::Config(other.to_string()),
    }
}

/// Temperature-scaled contrastive loss over l2-normalized rows; row `i` of
/// `b` is the positive for row `i` of `a`, all other rows are negatives.
pub fn info_nce<T: Scalar>(a: &Array2<T>, b: &Array2<T>, cfg: &InfoNceConfig) -> Result<LossOutput<T>, LossError> {
    check_pair(a, b)?;
    need_rows(a, 2, "InfoNCE")?;
    if !(cfg.tau > 0.0) {
        return Err(LossError::Config("tau must be positive".into()));
    }
    let (u, nu) = l2_normalize(a).map_err(zero_row)?;
    let (v, nv) = l2_normalize(b).map_err(zero_row)?;
    let n: T = count(a.nrows());
    let inv_tau: T = cast(1.0 / cfg.tau);
    let pos: Array1<T> = (&u * &v).sum_axis(Axis(1)) * inv_tau;

    let (du, dv, value) = match cfg.denominator {
        Denominator::CrossView => {
            let s = u.dot(&v.t()) * inv_tau;
            let (p, lse) = row_softmax(&s);
            let value = (&lse - &pos).sum() / n;
            let mut ds = p;
            for i in 0..ds.nrows() {
                ds[[i, i]] -= T::one();
            }
            ds.mapv_inplace(|x| x * inv_tau / n);
            (ds.dot(&v), ds.t().dot(&u), value)
        }
        Denominator::WithinView => {
            let w = u.dot(&u.t()) * inv_tau;
            let (q, lse) = row_softmax(&w);
            let value = (&lse - &pos).sum() / n;
            let dw = q * (inv_tau / n);
            let du = (&dw + &dw.t()).dot(&u) - &v * (inv_tau / n);
            let dv = &u * (-inv_tau / n);
            (du, dv, value)
        }
    };
    let grad_a = l2_normalize_backward(&u, &nu, &du);
    let grad_b = l2_normalize_backward(&v, &nv, &dv);
    Ok(LossOutput {
        value,
        grad_a,
        grad_b,
        diagnostics: Diagnostics {
            terms: vec![Diagnostics::term("infonce", T::one(), value)],
            mean_std: Some(mean_dim_std(a)),
            matrix: None,
        },
    })
}

struct Standardized<T> {
    xhat: Array2<T>,
    centered: Array2<T>,
    sigma: Array1<T>,
    scale: Array1<T>,
}

fn standardize<T: Scalar>(x: &Array2<T>, eps: T) -> Standardized<T> {
    let n: T = count(x.nrows());
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean;
    let sigma = (centered.mapv(|v| v * v).sum_axis(Axis(0)) / n).mapv(|v| v.sqrt());
    let scale = sigma.mapv(|s| s + eps);
    let xhat = &centered / &scale;
    Standardized {
        xhat,
        centered,
        sigma,
        scale,
    }
}

fn standardize_backward<T: Scalar>(st: &Standardized<T>, g: &Array2<T>) -> Array2<T> {
    let n: T = count(g.nrows());
    let gmean = g.sum_axis(Axis(0)) / n;
    let gc = (g * &st.centered).sum_axis(Axis(0));
    let mut out = (g - &gmean) / &st.scale;
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let sigma = st.sigma[j];
        if sigma > T::zero() {
            let k = gc[j] / (n * sigma * st.scale[j] * st.scale[j]);
            col.scaled_add(-k, &st.centered.column(j));
        }
    }
    out
}

/// Drives the batch-standardized cross-correlation matrix toward identity.
pub fn barlow_twins<T: Scalar>(a: &Array2<T>, b: &Array2<T>, cfg: &BarlowConfig) -> Result<LossOutput<T>, LossError> {
    check_pair(a, b)?;
    need_rows(a, 2, "Barlow Twins")?;
    if !(cfg.lambda >= 0.0) {
        return Err(LossError::Config("lambda must be non-negative".into()));
    }
    let eps: T = cast(cfg.eps_std);
    let lambda: T = cast(cfg.lambda);
    let two: T = cast(2.0);
    let n: T = count(a.nrows());
    let sa = standardize(a, eps);
    let sb = standardize(b, eps);
    let c = sa.xhat.t().dot(&sb.xhat) / n;

    let mut on = T::zero();
    let mut off = T::zero();
    let mut dc = Array2::zeros(c.raw_dim());
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            on += (T::one() - v) * (T::one() - v);
            dc[[i, j]] = -two * (T::one() - v);
        } else {
            off += v * v;
            dc[[i, j]] = two * lambda * v;
        }
    }
    let value = on + lambda * off;
    let d_ahat = sb.xhat.dot(&dc.t()) / n;
    let d_bhat = sa.xhat.dot(&dc) / n;
    Ok(LossOutput {
        value,
        grad_a: standardize_backward(&sa, &d_ahat),
        grad_b: standardize_backward(&sb, &d_bhat),
        diagnostics: Diagnostics {
            terms: vec![
                Diagnostics::term("on_diagonal", T::one(), on),
                Diagnostics::term("off_diagonal", lambda, off),
            ],
            mean_std: Some(mean_dim_std(a)),
            matrix: Some(c),
        },
    })
}

/// `s = (1/N)·Σ‖a_i − b_i‖²`. Returns the value and the gradient w.r.t. `a`
/// (the gradient w.r.t. `b` is its negation).
pub fn vicreg_invariance<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<(T, Array2<T>), LossError> {
    check_pair(a, b)?;
    need_rows(a, 1, "invariance")?;
    let n: T = count(a.nrows());
    let diff = a - b;
    let value = diff.mapv(|v| v * v).sum() / n;
    Ok((value, diff * (cast::<T>(2.0) / n)))
}

/// Hinge on per-dimension std: `(1/D)·Σ_j max(0, 1 − sqrt(Var(a^j) + eps))`,
/// with unbiased variance.
pub fn vicreg_variance<T: Scalar>(a: &Array2<T>, eps_var: f64) -> Result<(T, Array2<T>), LossError> {
    check_finite(a)?;
    need_rows(a, 2, "variance")?;
    let (nr, d) = a.dim();
    let n1: T = count(nr - 1);
    let dd: T = count(d);
    let mean = a.sum_axis(Axis(0)) / count::<T>(nr);
    let centered = a - &mean;
    let std = (centered.mapv(|v| v * v).sum_axis(Axis(0)) / n1).mapv(|v| (v + cast(eps_var)).sqrt());
    let mut value = T::zero();
    let mut grad = Array2::zeros(a.raw_dim());
    for (j, &s) in std.iter().enumerate() {
        if s < T::one() {
            value += T::one() - s;
            let k = -T::one() / (dd * s * n1);
            grad.column_mut(j).assign(&(&centered.column(j) * k));
        }
    }
    Ok((value / dd, grad))
}

/// Off-diagonal covariance penalty `(1/D)·Σ_{i≠j} C_ij²` with unbiased `C`.
/// Also returns `C`.
pub fn vicreg_covariance<T: Scalar>(a: &Array2<T>) -> Result<(T, Array2<T>, Array2<T>), LossError> {
    check_finite(a)?;
    need_rows(a, 2, "covariance")?;
    let (nr, d) = a.dim();
    let n1: T = count(nr - 1);
    let dd: T = count(d);
    let mean = a.sum_axis(Axis(0)) / count::<T>(nr);
    let centered = a - &mean;
    let c = centered.t().dot(&centered) / n1;
    let mut off = c.clone();
    for i in 0..d {
        off[[i, i]] = T::zero();
    }
    let value = off.mapv(|v| v * v).sum() / dd;
    let grad = centered.dot(&off) * (cast::<T>(4.0) / (dd * n1));
    Ok((value, grad, c))
}

/// `λ·s(A,B) + μ·(v(A)+v(B)) + ν·(c(A)+c(B))`. Inputs are used as-is.
pub fn vicreg<T: Scalar>(a: &Array2<T>, b: &Array2<T>, w: &VicregWeights) -> Result<LossOutput<T>, LossError> {
    check_pair(a, b)?;
    need_rows(a, 2, "VICReg")?;
    if !(w.lambda >= 0.0 && w.mu >= 0.0 && w.nu >= 0.0 && w.eps_var > 0.0) {
        return Err(LossError::Config("VICReg weights must be non-negative and eps_var positive".into()));
    }
    let (lambda, mu, nu): (T, T, T) = (cast(w.lambda), cast(w.mu), cast(w.nu));
    let (s, gs) = vicreg_invariance(a, b)?;
    let (va, gva) = vicreg_variance(a, w.eps_var)?;
    let (vb, gvb) = vicreg_variance(b, w.eps_var)?;
    let (ca, gca, cov_a) = vicreg_covariance(a)?;
    let (cb, gcb, _) = vicreg_covariance(b)?;
    let value = lambda * s + mu * (va + vb) + nu * (ca + cb);
    let grad_a = &gs * lambda + &gva * mu + &gca * nu;
    let grad_b = &gs * (-lambda) + &gvb * mu + &gcb * nu;
    Ok(LossOutput {
        value,
        grad_a,
        grad_b,
        diagnostics: Diagnostics {
            terms: vec![
                Diagnostics::term("invariance", lambda, s),
                Diagnostics::term("variance", mu, va + vb),
                Diagnostics::term("covariance", nu, ca + cb),
            ],
            mean_std: Some(mean_dim_std(a)),
            matrix: Some(cov_a),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    InfoNce,
    Barlow,
    Vicreg,
    /// `vicreg(Y,Y') + infonce(Z,Z')`
    Comp1,
    /// `infonce(Y,Y') + vicreg(Z,Z')`
    Comp2,
    /// `infonce(Y,Y') + α·vicreg(Y,Y')`
    RegY,
    /// `infonce(Z,Z') + α·vicreg(Z,Z')`
    RegZ,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::InfoNce,
        LossKind::Barlow,
        LossKind::Vicreg,
        LossKind::Comp1,
        LossKind::Comp2,
        LossKind::RegY,
        LossKind::RegZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::Barlow => "barlow",
            LossKind::Vicreg => "vicreg",
            LossKind::Comp1 => "comp1",
            LossKind::Comp2 => "comp2",
            LossKind::RegY => "reg_y",
            LossKind::RegZ => "reg_z",
        }
    }

    pub fn uses_representations(self) -> bool {
        matches!(self, LossKind::Comp1 | LossKind::Comp2 | LossKind::RegY)
    }

    pub fn uses_embeddings(self) -> bool {
        !matches!(self, LossKind::RegY)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LossError::UnknownLoss(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub infonce: InfoNceConfig,
    pub vicreg: VicregWeights,
    pub barlow: BarlowConfig,
    /// Weight of the VICReg regularizer in `reg_y` / `reg_z`.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Vicreg,
            infonce: InfoNceConfig::default(),
            vicreg: VicregWeights::default(),
            barlow: BarlowConfig::default(),
            alpha: 0.1,
        }
    }
}

/// Loss over both network stages. Gradients are `None` for a stage the
/// loss does not touch.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedLoss<T> {
    pub value: T,
    pub grad_y: Option<(Array2<T>, Array2<T>)>,
    pub grad_z: Option<(Array2<T>, Array2<T>)>,
    pub diagnostics: Diagnostics<T>,
}

fn single<T: Scalar>(out: LossOutput<T>, prefix: &str) -> (T, (Array2<T>, Array2<T>), Diagnostics<T>) {
    let d = Diagnostics {
        terms: out.diagnostics.clone().scaled(prefix, T::one()),
        ..out.diagnostics
    };
    (out.value, (out.grad_a, out.grad_b), d)
}

/// Infonce on one pair plus `alpha`·vicreg on the same pair. With
/// `alpha == 0` this is InfoNCE exactly.
pub fn regularized<T: Scalar>(a: &Array2<T>, b: &Array2<T>, cfg: &LossConfig) -> Result<LossOutput<T>, LossError> {
    if !(cfg.alpha >= 0.0) {
        return Err(LossError::Config("alpha must be non-negative".into()));
    }
    let info = info_nce(a, b, &cfg.infonce)?;
    if cfg.alpha == 0.0 {
        return Ok(info);
    }
    let alpha: T = cast(cfg.alpha);
    let vic = vicreg(a, b, &cfg.vicreg)?;
    let mut terms = info.diagnostics.terms;
    terms.extend(vic.diagnostics.clone().scaled("vicreg.", alpha));
    Ok(LossOutput {
        value: info.value + alpha * vic.value,
        grad_a: info.grad_a + &(vic.grad_a * alpha),
        grad_b: info.grad_b + &(vic.grad_b * alpha),
        diagnostics: Diagnostics {
            terms,
            mean_std: info.diagnostics.mean_std,
            matrix: vic.diagnostics.matrix,
        },
    })
}

/// Evaluates the configured loss. `y` is required by losses acting on
/// representations and `z` by those acting on embeddings.
pub fn evaluate<T: Scalar>(
    cfg: &LossConfig,
    y: Option<(&Array2<T>, &Array2<T>)>,
    z: Option<(&Array2<T>, &Array2<T>)>,
) -> Result<StagedLoss<T>, LossError> {
    let kind = cfg.kind;
    fn need<'a, T>(p: Option<(&'a Array2<T>, &'a Array2<T>)>, kind: LossKind, stage: &str) -> Result<(&'a Array2<T>, &'a Array2<T>), LossError> {
        p.ok_or_else(|| LossError::Config(format!("loss {kind} needs the {stage} pair")))
    }
    let staged = |value, grad_y, grad_z, diagnostics| StagedLoss {
        value,
        grad_y,
        grad_z,
        diagnostics,
    };
    Ok(match cfg.kind {
        LossKind::InfoNce | LossKind::Barlow | LossKind::Vicreg | LossKind::RegZ => {
            let (a, b) = need(z, kind, "embedding")?;
            let out = match cfg.kind {
                LossKind::InfoNce => info_nce(a, b, &cfg.infonce)?,
                LossKind::Barlow => barlow_twins(a, b, &cfg.barlow)?,
                LossKind::Vicreg => vicreg(a, b, &cfg.vicreg)?,
                _ => regularized(a, b, cfg)?,
            };
            let (v, g, d) = single(out, "");
            staged(v, None, Some(g), d)
        }
        LossKind::RegY => {
            let (a, b) = need(y, kind, "representation")?;
            let (v, g, d) = single(regularized(a, b, cfg)?, "");
            staged(v, Some(g), None, d)
        }
        LossKind::Comp1 | LossKind::Comp2 => {
            let (ya, yb) = need(y, kind, "representation")?;
            let (za, zb) = need(z, kind, "embedding")?;
            let (oy, oz, py, pz) = if cfg.kind == LossKind::Comp1 {
                (vicreg(ya, yb, &cfg.vicreg)?, info_nce(za, zb, &cfg.infonce)?, "y.vicreg.", "z.")
            } else {
                (info_nce(ya, yb, &cfg.infonce)?, vicreg(za, zb, &cfg.vicreg)?, "y.", "z.vicreg.")
            };
            let (vy, gy, dy) = single(oy, py);
            let (vz, gz, dz) = single(oz, pz);
            let mut terms = dy.terms;
            terms.extend(dz.terms);
            let diagnostics = Diagnostics {
                terms,
                mean_std: dz.mean_std,
                matrix: dy.matrix.or(dz.matrix),
            };
            staged(vy + vz, Some(gy), Some(gz), diagnostics)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_gradient};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    /// Checks both input gradients of `f` against central differences.
    fn check(f: impl Fn(&Array2<f64>, &Array2<f64>) -> LossOutput<f64>, a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        let out = f(a, b);
        let na = numeric_gradient(a, |x| f(x, b).value);
        let nb = numeric_gradient(b, |x| f(a, x).value);
        let ea = max_rel_error(&out.grad_a, &na);
        let eb = max_rel_error(&out.grad_b, &nb);
        assert!(ea < tol && eb < tol, "relative errors {ea:e}, {eb:e} exceed {tol:e}");
    }

    #[test]
    fn infonce_closed_form() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let out = info_nce(&a, &a, &InfoNceConfig::default()).unwrap();
        let expected = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((out.value - expected).abs() < 1e-13);
        assert!(out.value > 6.1e-7 && out.value < 6.3e-7);
        // Scaling rows changes nothing.
        let scaled = array![[3.0, 0.0], [0.0, 0.5]];
        let out2 = info_nce(&scaled, &a, &InfoNceConfig::default()).unwrap();
        assert!((out2.value - expected).abs() < 1e-13);
    }

    #[test]
    fn infonce_errors() {
        let one = array![[1.0, 0.0]];
        assert!(matches!(info_nce(&one, &one, &InfoNceConfig::default()), Err(LossError::TooFewRows { .. })));
        let z = array![[1.0, 0.0], [0.0, 0.0]];
        let ok = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(info_nce(&z, &ok, &InfoNceConfig::default()).unwrap_err(), LossError::ZeroRow(1));
        assert!(matches!(info_nce(&ok, &array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]], &InfoNceConfig::default()), Err(LossError::ShapeMismatch(..))));
    }

    #[test]
    fn infonce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for denominator in [Denominator::CrossView, Denominator::WithinView] {
            let cfg = InfoNceConfig { tau: 0.07, denominator };
            for (n, d) in [(8, 16), (4, 8)] {
                let a = random(&mut rng, n, d);
                let b = random(&mut rng, n, d);
                check(|x, y| info_nce(x, y, &cfg).unwrap(), &a, &b, 1e-6);
            }
        }
    }

    #[test]
    fn infonce_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 6, 5);
        let b = random(&mut rng, 6, 5);
        let perm = [3, 0, 5, 1, 4, 2];
        let pa = a.select(Axis(0), &perm);
        let pb = b.select(Axis(0), &perm);
        let cfg = InfoNceConfig::default();
        let v1 = info_nce(&a, &b, &cfg).unwrap().value;
        let v2 = info_nce(&pa, &pb, &cfg).unwrap().value;
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn barlow_examples() {
        let a = array![[1.0f64, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let out = barlow_twins(&a, &a, &BarlowConfig::default()).unwrap();
        assert!(out.value.abs() < 1e-14);
        let c = out.diagnostics.matrix.unwrap();
        assert!((c[[0, 0]] - 1.0).abs() < 1e-7 && c[[0, 1]].abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random(&mut rng, 8, 4);
        let out = barlow_twins(&r, &r, &BarlowConfig::default()).unwrap();
        let c = out.diagnostics.matrix.as_ref().unwrap();
        let mut off = 0.0;
        for ((i, j), v) in c.indexed_iter() {
            if i == j {
                assert!((v - 1.0).abs() < 1e-7);
            } else {
                off += v * v;
            }
        }
        assert!((out.value - 0.05 * off).abs() < 1e-6);
    }

    #[test]
    fn barlow_gradients_and_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (n, d) in [(8, 16), (4, 8)] {
            let a = random(&mut rng, n, d);
            let b = random(&mut rng, n, d);
            check(|x, y| barlow_twins(x, y, &BarlowConfig::default()).unwrap(), &a, &b, 1e-5);
        }
        let a = random(&mut rng, 8, 4);
        let b = random(&mut rng, 8, 4);
        let scales = array![2.0, 0.5, 7.0, 1.3];
        let shifts = array![1.0, -3.0, 0.2, 10.0];
        let a2 = &a * &scales + &shifts;
        let v1 = barlow_twins(&a, &b, &BarlowConfig::default()).unwrap().value;
        let v2 = barlow_twins(&a2, &b, &BarlowConfig::default()).unwrap().value;
        assert!((v1 - v2).abs() < 1e-6);
    }

    #[test]
    fn variance_examples() {
        let same = Array2::from_elem((5, 3), 0.7f64);
        let (v, _) = vicreg_variance(&same, 1e-4).unwrap();
        assert!((v - 0.99).abs() < 1e-12);
        let spread = array![[3.0f64, -4.0], [-3.0, 4.0], [3.0, 4.0], [-3.0, -4.0]];
        let (v, g) = vicreg_variance(&spread, 1e-4).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(matches!(vicreg_variance(&array![[1.0, 2.0]], 1e-4), Err(LossError::TooFewRows { .. })));
    }

    #[test]
    fn variance_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        while checked < 6 {
            let scale = rng.random_range(0.2..2.0);
            let a = random(&mut rng, 8, 16) * scale;
            let n1 = 7.0;
            let mean = a.mean_axis(Axis(0)).unwrap();
            let near_kink = (&a - &mean).mapv(|v| v * v).sum_axis(Axis(0)).iter().any(|ss| {
                let s = (ss / n1 + 1e-4).sqrt();
                (1.0 - 1e-3..=1.0 + 1e-3).contains(&s)
            });
            if near_kink {
                continue;
            }
            let (_, g) = vicreg_variance(&a, 1e-4).unwrap();
            let num = numeric_gradient(&a, |x| vicreg_variance(x, 1e-4).unwrap().0);
            let e = max_rel_error(&g, &num);
            assert!(e < 1e-5, "{e:e}");
            checked += 1;
        }
    }

    #[test]
    fn invariance_examples() {
        let (s, g) = vicreg_invariance(&array![[0.0, 0.0]], &array![[3.0, 4.0]]).unwrap();
        assert_eq!(s, 25.0);
        assert_eq!(g, array![[-6.0, -8.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random(&mut rng, 8, 16);
        let (s, g) = vicreg_invariance(&a, &a).unwrap();
        assert_eq!(s, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let b = random(&mut rng, 8, 16);
        let (_, g) = vicreg_invariance(&a, &b).unwrap();
        let num = numeric_gradient(&a, |x| vicreg_invariance(x, &b).unwrap().0);
        assert!(max_rel_error(&g, &num) < 1e-8);
    }

    #[test]
    fn covariance_examples() {
        let sym = array![[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        assert_eq!(vicreg_covariance(&sym).unwrap().0, 0.0);
        let (c, _, m) = vicreg_covariance(&array![[1.0, 1.0], [-1.0, -1.0]]).unwrap();
        assert_eq!(m, array![[2.0, 2.0], [2.0, 2.0]]);
        assert_eq!(c, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for (n, d) in [(8, 16), (4, 8)] {
            let a = random(&mut rng, n, d);
            let (_, g, _) = vicreg_covariance(&a).unwrap();
            let num = numeric_gradient(&a, |x| vicreg_covariance(x).unwrap().0);
            assert!(max_rel_error(&g, &num) < 1e-5);
        }
    }

    #[test]
    fn vicreg_examples_and_gradients() {
        let w = VicregWeights::default();
        let collapsed = Array2::from_elem((6, 4), 0.3);
        let out = vicreg(&collapsed, &collapsed, &w).unwrap();
        assert!((out.value - 2.0 * (1.0 - 1e-4f64.sqrt())).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random(&mut rng, 8, 16) * 0.5;
        let b = random(&mut rng, 8, 16) * 0.5;
        let no_cov = VicregWeights { nu: 0.0, ..w };
        let full = vicreg(&a, &b, &w).unwrap().value;
        let part = vicreg(&a, &b, &no_cov).unwrap().value;
        let ca = vicreg_covariance(&a).unwrap().0;
        let cb = vicreg_covariance(&b).unwrap().0;
        assert!((full - part - 0.04 * (ca + cb)).abs() < 1e-12);

        for (n, d) in [(8, 16), (4, 8)] {
            let a = random(&mut rng, n, d) * 0.4;
            let b = random(&mut rng, n, d) * 0.4;
            check(|x, y| vicreg(x, y, &w).unwrap(), &a, &b, 1e-5);
        }
    }

    #[test]
    fn vicreg_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = random(&mut rng, 8, 6);
        let b = random(&mut rng, 8, 6);
        let shift = array![1.0, -2.0, 0.5, 3.0, 0.0, -0.7];
        let w = VicregWeights::default();
        let v1 = vicreg(&a, &b, &w).unwrap().value;
        let v2 = vicreg(&(&a + &shift), &(&b + &shift), &w).unwrap().value;
        assert!((v1 - v2).abs() < 1e-10);
        let no_inv = VicregWeights { lambda: 0.0, ..w };
        let v3 = vicreg(&(&a + &shift), &b, &no_inv).unwrap().value;
        assert!((vicreg(&a, &b, &no_inv).unwrap().value - v3).abs() < 1e-10);
    }

    fn all_losses() -> Vec<LossConfig> {
        LossKind::ALL
            .into_iter()
            .map(|kind| LossConfig { kind, ..Default::default() })
            .collect()
    }

    #[test]
    fn diagnostics_reproduce_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let y = (random(&mut rng, 8, 6), random(&mut rng, 8, 6));
        let z = (random(&mut rng, 8, 10), random(&mut rng, 8, 10));
        for cfg in all_losses() {
            let out = evaluate(&cfg, Some((&y.0, &y.1)), Some((&z.0, &z.1))).unwrap();
            let sum = out.diagnostics.weighted_sum();
            assert!((sum - out.value).abs() < 1e-10, "{}: {sum} vs {}", cfg.kind, out.value);
            assert_eq!(out.grad_y.is_some(), cfg.kind.uses_representations());
            assert_eq!(out.grad_z.is_some(), cfg.kind.uses_embeddings());
        }
    }

    #[test]
    fn composites_are_sums_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let y = (random(&mut rng, 8, 6), random(&mut rng, 8, 6));
        let z = (random(&mut rng, 8, 10), random(&mut rng, 8, 10));
        let cfg = LossConfig::default();
        let info_z = info_nce(&z.0, &z.1, &cfg.infonce).unwrap();
        let vic_y = vicreg(&y.0, &y.1, &cfg.vicreg).unwrap();
        let c1 = evaluate(&LossConfig { kind: LossKind::Comp1, ..cfg }, Some((&y.0, &y.1)), Some((&z.0, &z.1))).unwrap();
        assert_eq!(c1.value, vic_y.value + info_z.value);
        assert_eq!(c1.grad_y.as_ref().unwrap().0, vic_y.grad_a);
        assert_eq!(c1.grad_z.as_ref().unwrap().1, info_z.grad_b);

        let alpha0 = LossConfig { kind: LossKind::RegZ, alpha: 0.0, ..cfg };
        let r0 = evaluate(&alpha0, None, Some((&z.0, &z.1))).unwrap();
        assert_eq!(r0.value, info_z.value);
        assert_eq!(r0.grad_z.unwrap(), (info_z.grad_a.clone(), info_z.grad_b.clone()));

        let vic_z = vicreg(&z.0, &z.1, &cfg.vicreg).unwrap();
        let rz = evaluate(&LossConfig { kind: LossKind::RegZ, ..cfg }, None, Some((&z.0, &z.1))).unwrap();
        assert_eq!(rz.value, info_z.value + 0.1 * vic_z.value);
    }

    #[test]
    fn regularized_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig::default();
        for (n, d) in [(8, 16), (4, 8)] {
            let a = random(&mut rng, n, d) * 0.4;
            let b = random(&mut rng, n, d) * 0.4;
            check(|x, y| regularized(x, y, &cfg).unwrap(), &a, &b, 1e-5);
        }
    }

    #[test]
    fn one_small_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for cfg in all_losses() {
            for _ in 0..5 {
                let y = (random(&mut rng, 8, 6), random(&mut rng, 8, 6));
                let z = (random(&mut rng, 8, 10), random(&mut rng, 8, 10));
                let out = evaluate(&cfg, Some((&y.0, &y.1)), Some((&z.0, &z.1))).unwrap();
                let step = |p: &(Array2<f64>, Array2<f64>), g: &Option<(Array2<f64>, Array2<f64>)>| match g {
                    Some((ga, gb)) => (&p.0 - &(ga * 1e-3), &p.1 - &(gb * 1e-3)),
                    None => p.clone(),
                };
                let y2 = step(&y, &out.grad_y);
                let z2 = step(&z, &out.grad_z);
                let after = evaluate(&cfg, Some((&y2.0, &y2.1)), Some((&z2.0, &z2.1))).unwrap();
                assert!(after.value < out.value, "{}: {} -> {}", cfg.kind, out.value, after.value);
            }
        }
    }

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!(matches!("vicrge".parse::<LossKind>(), Err(LossError::UnknownLoss(_))));
    }

    #[test]
    fn f32_smoke() {
        let a = array![[1.0f32, 0.2], [0.1, 1.0], [0.5, -0.4]];
        let b = array![[0.9f32, 0.1], [0.0, 1.1], [0.6, -0.5]];
        let out = evaluate(&LossConfig::default(), None, Some((&a, &b))).unwrap();
        assert!(out.value.is_finite());
    }
}
