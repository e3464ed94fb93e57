//! One forward/backward pass of the two-view objective through the model.

use ndarray::Array2;

use crate::features::FeatureMatrix;
use crate::losses::{evaluate, LossConfig, StagedLoss};
use crate::nn::{Mode, Model, ModelGrads};
use crate::scalar::Scalar;
use crate::Error;

/// Result of [`forward_backward`].
#[derive(Debug, Clone)]
pub struct PairStep<T> {
    pub loss: StagedLoss<T>,
    pub grads: ModelGrads<T>,
    pub y: (Array2<T>, Array2<T>),
    /// Embeddings, when the loss uses the projector.
    pub z: Option<(Array2<T>, Array2<T>)>,
}

/// Encodes both views (each view is its own batch-norm batch), evaluates the
/// configured loss and backpropagates it to every parameter. Running
/// statistics of the projector are updated.
pub fn forward_backward<T: Scalar>(
    model: &mut Model<T>,
    view_a: &[FeatureMatrix<T>],
    view_b: &[FeatureMatrix<T>],
    cfg: &LossConfig,
) -> Result<PairStep<T>, Error> {
    let (ya, ca) = model.encoder_forward(view_a)?;
    let (yb, cb) = model.encoder_forward(view_b)?;
    let mut grads = model.zero_grads();

    let proj = if cfg.kind.uses_embeddings() {
        let (za, pa) = model.projector_forward(&ya, Mode::Train)?;
        let (zb, pb) = model.projector_forward(&yb, Mode::Train)?;
        Some((za, zb, pa, pb))
    } else {
        None
    };
    let loss = evaluate(cfg, Some((&ya, &yb)), proj.as_ref().map(|(za, zb, _, _)| (za, zb)))?;
    if !loss.value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{:?}", loss.diagnostics.terms)));
    }

    let (mut gya, mut gyb) = match &loss.grad_y {
        Some((a, b)) => (a.clone(), b.clone()),
        None => (Array2::zeros(ya.raw_dim()), Array2::zeros(yb.raw_dim())),
    };
    let z = match (proj, &loss.grad_z) {
        (Some((za, zb, pa, pb)), Some((gza, gzb))) => {
            gya += &model.projector_backward(&pa, gza, &mut grads)?;
            gyb += &model.projector_backward(&pb, gzb, &mut grads)?;
            Some((za, zb))
        }
        (Some((za, zb, _, _)), None) => Some((za, zb)),
        _ => None,
    };
    model.encoder_backward(&ca, &gya, &mut grads)?;
    model.encoder_backward(&cb, &gyb, &mut grads)?;
    Ok(PairStep {
        loss,
        grads,
        y: (ya, yb),
        z,
    })
}
