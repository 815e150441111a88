//! Exponential moving averages for target-network parameters.

use super::{same_shape, Result, Scalar, Tensor, TensorError};

/// new_target = tau * target + (1 - tau) * online, elementwise.
pub fn ema_update<E: Scalar>(target: &Tensor<E>, online: &Tensor<E>, tau: E) -> Result<Tensor<E>> {
    same_shape("ema_update", target.shape(), online.shape())?;
    let inv = E::one() - tau;
    let data = target
        .data()
        .iter()
        .zip(online.data())
        .map(|(&t, &o)| tau * t + inv * o)
        .collect();
    Ok(Tensor::from_parts(target.shape().to_vec(), data))
}

/// EMA over a whole named parameter list. Names and order must agree
/// pairwise, so a target network can never silently track the wrong
/// online tensors.
pub fn ema_update_named<E: Scalar>(
    targets: &mut [(String, Tensor<E>)],
    onlines: &[(String, Tensor<E>)],
    tau: E,
) -> Result<()> {
    if targets.len() != onlines.len() {
        return Err(TensorError::StructureMismatch {
            detail: format!(
                "target has {} tensors, online has {}",
                targets.len(),
                onlines.len()
            ),
        });
    }
    for ((tname, t), (oname, o)) in targets.iter_mut().zip(onlines) {
        if tname != oname {
            return Err(TensorError::StructureMismatch {
                detail: format!("name {tname:?} paired with {oname:?}"),
            });
        }
        *t = ema_update(t, o, tau)?;
    }
    Ok(())
}
