//! Central finite-difference gradient checks.
//!
//! The relative error of one gradient tensor is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`, taken over
//! the coordinates that have a numeric estimate. Element-wise ratios are
//! avoided because entries that are zero up to rounding make them
//! meaningless.

use ndarray::{Array, Array1, Array2, ArrayD, Axis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureMatrix;
use crate::losses::{
    barlow_twins, evaluate, info_nce, vicreg, vicreg_covariance, vicreg_invariance, vicreg_variance, BarlowConfig,
    Denominator, InfoNceConfig, LossConfig, LossKind, VicregWeights,
};
use crate::nn::{l2_normalize, relu_backward, softmax_cross_entropy, BatchNorm, Linear, Mode, Model, ModelConfig, SapLayer};
use crate::objective::forward_backward;

pub const STEP: f64 = 1e-5;
/// Acceptance threshold for every check in [`run_suite`].
pub const TOLERANCE: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient<D: Dimension>(x: &Array<f64, D>, mut f: impl FnMut(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut probe = x.clone();
    let mut grad = Array::zeros(x.raw_dim());
    for ((idx, g), &orig) in grad.iter_mut().enumerate().zip(x.iter()) {
        set(&mut probe, idx, orig + STEP);
        let up = f(&probe);
        set(&mut probe, idx, orig - STEP);
        let down = f(&probe);
        set(&mut probe, idx, orig);
        *g = (up - down) / (2.0 * STEP);
    }
    grad
}

fn set<D: Dimension>(a: &mut Array<f64, D>, idx: usize, v: f64) {
    *a.iter_mut().nth(idx).unwrap() = v;
}

/// Like [`numeric_gradient`], but `f` also reports a discrete activation
/// pattern (ReLU signs, hinge states). Coordinates whose ±h probes see
/// different patterns straddle a kink and are reported as `None`.
pub fn numeric_gradient_masked<D: Dimension>(
    x: &Array<f64, D>,
    mut f: impl FnMut(&Array<f64, D>) -> (f64, Vec<bool>),
) -> Vec<Option<f64>> {
    let mut probe = x.clone();
    let origs: Vec<f64> = x.iter().copied().collect();
    origs
        .iter()
        .enumerate()
        .map(|(idx, &orig)| {
            set(&mut probe, idx, orig + STEP);
            let (up, pu) = f(&probe);
            set(&mut probe, idx, orig - STEP);
            let (down, pd) = f(&probe);
            set(&mut probe, idx, orig);
            (pu == pd).then(|| (up - down) / (2.0 * STEP))
        })
        .collect()
}

/// Relative error of one tensor (see module docs).
pub fn max_rel_error<D: Dimension>(analytic: &Array<f64, D>, numeric: &Array<f64, D>) -> f64 {
    let a: Vec<f64> = analytic.iter().copied().collect();
    let n: Vec<Option<f64>> = numeric.iter().map(|&v| Some(v)).collect();
    max_rel_error_masked(&a, &n)
}

/// Relative error over the coordinates that have a numeric estimate.
pub fn max_rel_error_masked(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (&a, n) in analytic.iter().zip(numeric) {
        if let Some(n) = *n {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

/// Outcome of one named gradient check (possibly over several tensors and
/// random instances).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the probe straddled a kink.
    pub skipped: usize,
}

impl CheckResult {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0
    }

    fn add<'a>(&mut self, analytic: impl IntoIterator<Item = &'a f64>, numeric: &[Option<f64>]) {
        let a: Vec<f64> = analytic.into_iter().copied().collect();
        self.max_rel_error = self.max_rel_error.max(max_rel_error_masked(&a, numeric));
        let n = numeric.iter().filter(|v| v.is_some()).count();
        self.checked += n;
        self.skipped += numeric.len() - n;
    }
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Per-column "std below one" flags: the variance hinge's on/off pattern.
fn hinge_pattern(x: &Array2<f64>, eps_var: f64) -> Vec<bool> {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    (x - &mean)
        .mapv(|v| v * v)
        .sum_axis(Axis(0))
        .iter()
        .map(|ss| (ss / (n - 1.0) + eps_var).sqrt() < 1.0)
        .collect()
}

const SHAPES: [(usize, usize); 2] = [(4, 8), (8, 16)];

/// Checks a two-input function `f(a, b) -> (value, grad_a, grad_b)`.
fn check_pair(
    name: &str,
    rng: &mut ChaCha8Rng,
    scale: f64,
    f: impl Fn(&Array2<f64>, &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>),
    pattern: impl Fn(&Array2<f64>, &Array2<f64>) -> Vec<bool>,
) -> CheckResult {
    let mut res = CheckResult::new(name);
    for shape in SHAPES {
        let a = random(rng, shape, scale);
        let b = random(rng, shape, scale);
        let (_, ga, gb) = f(&a, &b);
        let na = numeric_gradient_masked(&a, |x| (f(x, &b).0, pattern(x, &b)));
        let nb = numeric_gradient_masked(&b, |x| (f(&a, x).0, pattern(&a, x)));
        res.add(&ga, &na);
        res.add(&gb, &nb);
    }
    res
}

/// Every objective against central differences on random batches.
pub fn check_losses(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = VicregWeights::default();
    let eps = w.eps_var;
    let none = |_: &Array2<f64>, _: &Array2<f64>| Vec::new();
    let hinge = move |a: &Array2<f64>, b: &Array2<f64>| {
        let mut p = hinge_pattern(a, eps);
        p.extend(hinge_pattern(b, eps));
        p
    };
    let mut out = Vec::new();
    for (name, denominator) in [("infonce", Denominator::CrossView), ("infonce_within_view", Denominator::WithinView)] {
        let cfg = InfoNceConfig { tau: 0.07, denominator };
        out.push(check_pair(name, &mut rng, 1.0, |a, b| {
            let o = info_nce(a, b, &cfg).unwrap();
            (o.value, o.grad_a, o.grad_b)
        }, none));
    }
    out.push(check_pair("barlow", &mut rng, 1.0, |a, b| {
        let o = barlow_twins(a, b, &BarlowConfig::default()).unwrap();
        (o.value, o.grad_a, o.grad_b)
    }, none));
    out.push(check_pair("vicreg.invariance", &mut rng, 1.0, |a, b| {
        let (v, g) = vicreg_invariance(a, b).unwrap();
        (v, g.clone(), -g)
    }, none));
    out.push(check_pair("vicreg.variance", &mut rng, 1.5, |a, _| {
        let (v, g) = vicreg_variance(a, eps).unwrap();
        (v, g, Array2::zeros(a.raw_dim()))
    }, hinge));
    out.push(check_pair("vicreg.covariance", &mut rng, 1.0, |a, _| {
        let (v, g, _) = vicreg_covariance(a).unwrap();
        (v, g, Array2::zeros(a.raw_dim()))
    }, none));
    out.push(check_pair("vicreg", &mut rng, 1.5, |a, b| {
        let o = vicreg(a, b, &w).unwrap();
        (o.value, o.grad_a, o.grad_b)
    }, hinge));

    for kind in [LossKind::Comp1, LossKind::Comp2, LossKind::RegY, LossKind::RegZ] {
        let cfg = LossConfig { kind, ..Default::default() };
        let mut res = CheckResult::new(kind.name());
        for (n, d) in SHAPES {
            let mut inputs = [(n, d / 2), (n, d / 2), (n, d), (n, d)].map(|s| random(&mut rng, s, 1.5));
            let eval = |x: &[Array2<f64>; 4]| evaluate(&cfg, Some((&x[0], &x[1])), Some((&x[2], &x[3]))).unwrap();
            let pattern = |x: &[Array2<f64>; 4]| x.iter().flat_map(|m| hinge_pattern(m, eps)).collect::<Vec<_>>();
            let out = eval(&inputs);
            let analytic = [
                out.grad_y.as_ref().map(|g| g.0.clone()),
                out.grad_y.as_ref().map(|g| g.1.clone()),
                out.grad_z.as_ref().map(|g| g.0.clone()),
                out.grad_z.as_ref().map(|g| g.1.clone()),
            ];
            for (k, an) in analytic.iter().enumerate() {
                let an = an.clone().unwrap_or_else(|| Array2::zeros(inputs[k].raw_dim()));
                let base = inputs[k].clone();
                let num = numeric_gradient_masked(&base, |x| {
                    inputs[k].assign(x);
                    let r = (eval(&inputs).value, pattern(&inputs));
                    r
                });
                inputs[k].assign(&base);
                res.add(&an, &num);
            }
        }
        out.push(res);
    }
    out
}

/// Layer backward passes against central differences of a random linear
/// functional `Σ R∘layer(x)` of the layer output.
pub fn check_layers(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut res = CheckResult::new("linear");
    for (n, d) in SHAPES {
        let layer = Linear::<f64>::new(d, d / 2 + 1, &mut rng);
        let x = random(&mut rng, (n, d), 1.0);
        let r = random(&mut rng, (n, d / 2 + 1), 1.0);
        let (mut gw, mut gb) = (ArrayD::zeros(layer.weight.raw_dim().into_dyn()), ArrayD::zeros(layer.bias.raw_dim().into_dyn()));
        let dx = layer.backward(&x, &r, &mut gw, &mut gb, true).unwrap();
        res.add(&dx, &numeric_gradient_masked(&x, |v| ((layer.forward(v) * &r).sum(), vec![])));
        res.add(&gw, &numeric_gradient_masked(&layer.weight, |w| {
            let l = Linear { weight: w.clone(), bias: layer.bias.clone() };
            ((l.forward(&x) * &r).sum(), vec![])
        }));
        res.add(&gb, &numeric_gradient_masked(&layer.bias, |b| {
            let l = Linear { weight: layer.weight.clone(), bias: b.clone() };
            ((l.forward(&x) * &r).sum(), vec![])
        }));
    }
    out.push(res);

    let mut res = CheckResult::new("relu");
    for (n, d) in SHAPES {
        let x = random(&mut rng, (n, d), 1.0);
        let r = random(&mut rng, (n, d), 1.0);
        let mut g = r.clone();
        relu_backward(&mut g, &x);
        res.add(&g, &numeric_gradient_masked(&x, |v| {
            ((v.mapv(|e| e.max(0.0)) * &r).sum(), v.iter().map(|&e| e > 0.0).collect())
        }));
    }
    out.push(res);

    let mut res = CheckResult::new("batchnorm");
    for (n, d) in SHAPES {
        let mut bn = BatchNorm::<f64>::new(d, 0.1, 1e-5);
        bn.gamma = Array1::from_shape_fn(d, |_| rng.random_range(0.5..1.5));
        bn.beta = Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5));
        let x = random(&mut rng, (n, d), 1.0);
        let r = random(&mut rng, (n, d), 1.0);
        for mode in [Mode::Train, Mode::Eval] {
            let value = |bn: &BatchNorm<f64>, x: &Array2<f64>| (bn.clone().forward(x, mode).unwrap().0 * &r).sum();
            let (_, cache) = bn.clone().forward(&x, mode).unwrap();
            let (mut gg, mut gb) = (ArrayD::zeros(vec![d]), ArrayD::zeros(vec![d]));
            let dx = bn.backward(&cache, &r, &mut gg, &mut gb);
            res.add(&dx, &numeric_gradient_masked(&x, |v| (value(&bn, v), vec![])));
            res.add(&gg, &numeric_gradient_masked(&bn.gamma, |g| {
                (value(&BatchNorm { gamma: g.clone(), ..bn.clone() }, &x), vec![])
            }));
            res.add(&gb, &numeric_gradient_masked(&bn.beta, |b| {
                (value(&BatchNorm { beta: b.clone(), ..bn.clone() }, &x), vec![])
            }));
        }
    }
    out.push(res);

    let mut res = CheckResult::new("sap");
    for (n, d) in SHAPES {
        let frames = 5;
        let sap = SapLayer::<f64>::new(d, d, &mut rng);
        let h = random(&mut rng, (n * frames, d), 1.0);
        let r = random(&mut rng, (n, d), 1.0);
        let value = |s: &SapLayer<f64>, h: &Array2<f64>| ((s.pool_segments(h, frames).0 * &r).sum(), vec![]);
        let (_, cache) = sap.pool_segments(&h, frames);
        let mut g = [sap.attn_weight.raw_dim().into_dyn(), sap.attn_bias.raw_dim().into_dyn(), sap.context.raw_dim().into_dyn()]
            .map(ArrayD::<f64>::zeros);
        let [gw, gb, gc] = &mut g;
        let dh = sap.backward_segments(&h, &cache, &r, (gw, gb, gc));
        res.add(&dh, &numeric_gradient_masked(&h, |v| value(&sap, v)));
        res.add(&g[0], &numeric_gradient_masked(&sap.attn_weight, |w| {
            value(&SapLayer { attn_weight: w.clone(), ..sap.clone() }, &h)
        }));
        res.add(&g[1], &numeric_gradient_masked(&sap.attn_bias, |b| {
            value(&SapLayer { attn_bias: b.clone(), ..sap.clone() }, &h)
        }));
        res.add(&g[2], &numeric_gradient_masked(&sap.context, |c| {
            value(&SapLayer { context: c.clone(), ..sap.clone() }, &h)
        }));
    }
    out.push(res);

    let mut res = CheckResult::new("l2_normalize");
    for (n, d) in SHAPES {
        let x = random(&mut rng, (n, d), 1.0);
        let r = random(&mut rng, (n, d), 1.0);
        let (u, norms) = l2_normalize(&x).unwrap();
        let g = crate::nn::l2_normalize_backward(&u, &norms, &r);
        res.add(&g, &numeric_gradient_masked(&x, |v| ((l2_normalize(v).unwrap().0 * &r).sum(), vec![])));
    }
    out.push(res);

    let mut res = CheckResult::new("softmax_cross_entropy");
    for (n, d) in SHAPES {
        let x = random(&mut rng, (n, d), 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
        let (_, g) = softmax_cross_entropy(&x, &labels).unwrap();
        res.add(&g, &numeric_gradient_masked(&x, |v| (softmax_cross_entropy(v, &labels).unwrap().0, vec![])));
    }
    out.push(res);
    out
}

fn flat_params(m: &Model<f64>) -> Array1<f64> {
    m.params().iter().flat_map(|p| p.iter().copied()).collect()
}

fn set_flat(m: &mut Model<f64>, v: &Array1<f64>) {
    let mut it = v.iter();
    for mut p in m.params_mut() {
        p.iter_mut().for_each(|x| *x = *it.next().unwrap());
    }
}

/// Whole-model check (N=4, T=8, rep_dim=8): gradients of every objective
/// with respect to every parameter, through encoder, pooling and projector.
pub fn check_model(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        n_mels: 6,
        encoder_hidden: vec![10],
        rep_dim: 8,
        proj_dim: 12,
        ..Default::default()
    };
    let base = Model::<f64>::new(config, &mut rng).unwrap();
    let views: Vec<Vec<FeatureMatrix<f64>>> = (0..2)
        .map(|_| {
            (0..4)
                .map(|_| FeatureMatrix {
                    values: random(&mut rng, (8, 6), 1.5),
                    normalized: true,
                })
                .collect()
        })
        .collect();
    let eps = VicregWeights::default().eps_var;

    LossKind::ALL
        .into_iter()
        .map(|kind| {
            let cfg = LossConfig { kind, ..Default::default() };
            let mut m = base.clone();
            let step = forward_backward(&mut m, &views[0], &views[1], &cfg).unwrap();
            let analytic: Vec<f64> = step.grads.tensors.iter().flat_map(|t| t.iter().copied()).collect();
            let theta = flat_params(&base);
            let numeric = numeric_gradient_masked(&theta, |t| {
                let mut m = base.clone();
                set_flat(&mut m, t);
                let (ya, ca) = m.encoder_forward(&views[0]).unwrap();
                let (yb, cb) = m.encoder_forward(&views[1]).unwrap();
                let mut pattern = ca.activation_pattern();
                pattern.extend(cb.activation_pattern());
                pattern.extend(hinge_pattern(&ya, eps));
                pattern.extend(hinge_pattern(&yb, eps));
                let (za, pa) = m.projector_forward(&ya, Mode::Train).unwrap();
                let (zb, pb) = m.projector_forward(&yb, Mode::Train).unwrap();
                pattern.extend(pa.activation_pattern());
                pattern.extend(pb.activation_pattern());
                pattern.extend(hinge_pattern(&za, eps));
                pattern.extend(hinge_pattern(&zb, eps));
                let v = evaluate(&cfg, Some((&ya, &yb)), Some((&za, &zb))).unwrap().value;
                (v, pattern)
            });
            let mut res = CheckResult::new(&format!("model/{}", kind.name()));
            res.add(&analytic, &numeric);
            res
        })
        .collect()
}

/// Losses, layers and the whole model.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut all = check_losses(seed);
    all.extend(check_layers(seed.wrapping_add(1)));
    all.extend(check_model(seed.wrapping_add(2)));
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_suite_passes() {
        for r in run_suite(1) {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let g = numeric_gradient(&x, |v| v.mapv(|e| e * e).sum());
        assert!(max_rel_error(&(&x * 2.0), &g) < 1e-9);
    }

    #[test]
    fn kinks_are_masked() {
        let x = array![1e-6, 1.0];
        let g = numeric_gradient_masked(&x, |v| (v.mapv(|e| e.max(0.0)).sum(), v.iter().map(|&e| e > 0.0).collect()));
        assert_eq!(g[0], None);
        assert!((g[1].unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rel_error_definition() {
        assert_eq!(max_rel_error(&array![3.0, 0.0], &array![3.0, 4.0]), 4.0 / 5.0);
        assert_eq!(max_rel_error(&array![2.0], &array![1.0]), 0.5);
        assert_eq!(max_rel_error(&array![0.0], &array![0.0]), 0.0);
        assert_eq!(max_rel_error_masked(&[1.0, 9.0], &[Some(1.0), None]), 0.0);
    }
}
