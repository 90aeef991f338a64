use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{adam_step_filtered, AdamConfig, AdamState, ParamFilter, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::scalar::Scalar;

/// One Adam update of the parameters in `group` on the scalar built by
/// `loss`; everything else in `store` stays bitwise unchanged apart from
/// batch-norm buffers when `update_buffers` is set. Returns the loss before
/// the update. Group members the loss never binds get zero gradients.
pub fn descend<E: Scalar>(
    store: &mut ParamStore<E>,
    group: &ParamFilter,
    adam: &AdamConfig,
    update_buffers: bool,
    loss: impl FnOnce(&mut Tape<'_, E>) -> Result<Var>,
) -> Result<f64> {
    step(store, group, adam, None, update_buffers, loss)
}

/// [`descend`] with moments held in `state` instead of the store.
pub fn descend_with<E: Scalar>(
    store: &mut ParamStore<E>,
    group: &ParamFilter,
    adam: &AdamConfig,
    state: &mut AdamState<E>,
    update_buffers: bool,
    loss: impl FnOnce(&mut Tape<'_, E>) -> Result<Var>,
) -> Result<f64> {
    step(store, group, adam, Some(state), update_buffers, loss)
}

fn step<E: Scalar>(
    store: &mut ParamStore<E>,
    group: &ParamFilter,
    adam: &AdamConfig,
    state: Option<&mut AdamState<E>>,
    update_buffers: bool,
    loss: impl FnOnce(&mut Tape<'_, E>) -> Result<Var>,
) -> Result<f64> {
    let (value, grads, buffers) = {
        let mut tape = Tape::with_params(store, group.clone());
        let l = loss(&mut tape)?;
        let value = tape.value(l).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        tape.backward(l)?;
        (value, tape.param_grads(), tape.take_buffer_updates())
    };
    let mut grads = grads;
    for (name, entry) in store.iter() {
        if entry.kind == ParamKind::Trainable && group.accepts(name) && !grads.contains_key(name) {
            grads.insert(name.to_string(), Tensor::zeros(entry.value.shape()));
        }
    }
    match state {
        Some(s) => s.apply(store, &grads, adam, group)?,
        None => adam_step_filtered(store, &grads, adam, group)?,
    }
    if update_buffers {
        store.apply_buffer_updates(buffers)?;
    }
    Ok(value)
}
