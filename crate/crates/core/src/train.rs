//! Training objective and a single optimizer step.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::FlexModel;
use crate::optim::AdamW;
use crate::policy::{LayoutMode, SequenceLayout};
use crate::worldsim::Clip;

/// Loss-bearing rows of `layout` and the waypoint id each must predict.
///
/// Interleaved layouts contribute one span per timestep; non-interleaved
/// layouts only the final one. `targets[k-1]` holds the `H` ids of timestep `k`.
pub fn loss_targets(layout: &SequenceLayout, targets: &[Vec<u32>]) -> Result<(Vec<usize>, Vec<usize>)> {
    let h = layout.config.horizon;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for k in layout.supervised_steps() {
        let t = targets
            .get(k - 1)
            .ok_or_else(|| Error::Layout(format!("no targets for timestep {k} ({} given)", targets.len())))?;
        if t.len() != h {
            return Err(Error::Layout(format!("timestep {k}: {} targets for horizon {h}", t.len())));
        }
        rows.extend(layout.loss_rows(k)?);
        ids.extend(t.iter().map(|&i| i as usize));
    }
    Ok((rows, ids))
}

/// Mean cross-entropy over every supervised future position of `logits`
/// (`[total_len, V]`).
pub fn interleaved_loss(tape: &mut Tape, logits: Var, layout: &SequenceLayout, targets: &[Vec<u32>]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != layout.total_len {
        return Err(Error::Layout(format!("logits {:?} for a {}-position layout", shape, layout.total_len)));
    }
    let (rows, ids) = loss_targets(layout, targets)?;
    let picked = tape.gather_rows(logits, &rows)?;
    tape.cross_entropy(picked, &ids)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub grad_norm: f32,
}

/// Mean loss over `clips` and its gradient accumulated into `store`.
pub fn batch_gradients(model: &FlexModel, store: &mut ParamStore, clips: &[&Clip]) -> Result<f32> {
    if clips.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    store.zero_grads();
    let scale = 1.0 / clips.len() as f32;
    let mut total = 0.0f64;
    for clip in clips {
        let grads = {
            let mut tape = Tape::new(store);
            let loss = model.loss(&mut tape, clip)?;
            total += tape.item(loss) as f64;
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled)?;
            tape.param_grads()
        };
        store.accumulate(&grads)?;
    }
    Ok((total * scale as f64) as f32)
}

/// Forward, backward and one AdamW update. A non-finite loss aborts before
/// any parameter changes.
pub fn train_step(
    model: &FlexModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    clips: &[&Clip],
    lr: f32,
) -> Result<StepStats> {
    let loss = batch_gradients(model, store, clips)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: opt.step, value: loss });
    }
    let grad_norm = store
        .iter()
        .filter_map(|(_, p)| p.value.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    opt.step(store, lr)?;
    Ok(StepStats { loss, grad_norm })
}

/// Whether a layout's loss covers every timestep.
pub fn is_interleaved(layout: &SequenceLayout) -> bool {
    layout.mode == LayoutMode::Interleaved
}
