use std::collections::BTreeMap;

use crate::error::{Result, WssError};
use crate::model::{NetworkParams, Tensor};

/// Momentum SGD with L2 weight decay folded into the velocity:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_matches(grads)?;
    params.check_matches(velocity)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.data.iter().any(|v| !v.is_finite())) {
        return Err(WssError::NonFiniteGradient(name.clone()));
    }
    let (lr, momentum, weight_decay) = (lr as f32, momentum as f32, weight_decay as f32);
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name].data;
        let v = &mut velocity.get_mut(name).unwrap().data;
        for ((pv, &gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
