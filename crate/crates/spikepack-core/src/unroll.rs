//! Time-distributed network execution.
//!
//! `unroll` replays the static layer list once per time step on a shared
//! tape, threading LIF state between steps so backward runs through the
//! full temporal graph. `analog_forward` runs the same topology once with
//! ReLU in place of the spiking neurons, which is what the conversion
//! pretraining stage uses.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lif::{lif_step, time_slice};
use crate::model::{Layer, NetSpec, Readout};
use crate::tape::{SpikeMode, Tape, TensorId};
use crate::tensor::{numel_of, Tensor};

/// Handles into the tape left behind by one unrolled forward pass.
pub struct Unrolled {
    /// Combined classifier output, [N, K].
    pub logits: TensorId,
    /// Raw per-step head outputs.
    pub step_logits: Vec<TensorId>,
    /// spikes[l][t]: spike node of spiking weighted layer l at step t.
    pub spikes: Vec<Vec<TensorId>>,
}

/// Spikes and their loss gradients for one layer, shaped [N, T, ...].
/// `delta` is filled from the tape after a backward pass.
pub struct ActivityRecord {
    pub y: Tensor,
    pub delta: Tensor,
}

/// Register weighted-layer tensors carved out of one flat parameter
/// vector, in `shapes` order. Lets a whole network hang off a single
/// input node, which is what end-to-end gradient checking needs.
pub fn slice_weights(
    tape: &mut Tape,
    theta: TensorId,
    shapes: &[Vec<usize>],
) -> Result<Vec<TensorId>> {
    let total: usize = shapes.iter().map(|s| numel_of(s)).sum();
    let have = tape.value(theta).len();
    if total != have {
        return Err(Error::Dimension {
            op: "slice_weights",
            detail: alloc::format!("shapes want {total} parameters, vector holds {have}"),
        });
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let n = numel_of(shape);
        let idx: Vec<usize> = (offset..offset + n).collect();
        let flat = tape.gather1d(theta, &idx)?;
        out.push(tape.reshape(flat, shape.clone())?);
        offset += n;
    }
    Ok(out)
}

/// Run the network over an [N, T, C, H, W] input sequence. `weights` are
/// tape nodes aligned with `net.weight_shapes()`; they may be plain
/// inputs or the output of an effective-weight subgraph.
pub fn unroll(
    tape: &mut Tape,
    net: &NetSpec,
    weights: &[TensorId],
    x_seq: &Tensor,
    mode: SpikeMode,
) -> Result<Unrolled> {
    net.validate()?;
    let n_weighted = net.weighted_layers().len();
    if weights.len() != n_weighted {
        return Err(Error::Contract(alloc::format!(
            "network has {n_weighted} weighted layers, got {} weight tensors",
            weights.len()
        )));
    }
    let shape = x_seq.shape();
    if shape.len() != 5 {
        return Err(Error::Dimension {
            op: "unroll",
            detail: alloc::format!("input must be [N, T, C, H, W], got {shape:?}"),
        });
    }
    let t_steps = shape[1];
    if t_steps == 0 {
        return Err(Error::Contract("unroll needs at least one time step".into()));
    }
    if (shape[2], shape[3], shape[4]) != net.input {
        return Err(Error::Dimension {
            op: "unroll",
            detail: alloc::format!("input planes {:?} do not match network {:?}", &shape[2..], net.input),
        });
    }

    let n_spiking = n_weighted - 1;
    let mut states: Vec<Option<(TensorId, TensorId)>> = vec![None; n_spiking];
    let mut spikes: Vec<Vec<TensorId>> = vec![Vec::new(); n_spiking];
    let mut step_logits = Vec::with_capacity(t_steps);

    for t in 0..t_steps {
        let mut cur = tape.constant(time_slice(x_seq, t)?);
        let mut widx = 0;
        for layer in &net.layers {
            match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let y = tape.conv2d(cur, weights[widx], stride, pad)?;
                    cur = spike_after(tape, net, y, widx, &mut states, &mut spikes, mode)?;
                    widx += 1;
                }
                Layer::Pool => {
                    cur = tape.avg_pool2(cur)?;
                }
                Layer::Dense { .. } => {
                    cur = flatten(tape, cur)?;
                    let y = tape.matmul(cur, weights[widx])?;
                    if widx == n_weighted - 1 {
                        step_logits.push(y);
                        cur = y;
                    } else {
                        cur = spike_after(tape, net, y, widx, &mut states, &mut spikes, mode)?;
                    }
                    widx += 1;
                }
            }
        }
    }

    let mut acc = step_logits[0];
    for &l in step_logits.iter().skip(1) {
        acc = tape.add(acc, l)?;
    }
    let logits = match net.readout {
        Readout::Sum => acc,
        Readout::Mean => tape.scale(acc, 1.0 / t_steps as f64),
    };
    Ok(Unrolled { logits, step_logits, spikes })
}

fn spike_after(
    tape: &mut Tape,
    net: &NetSpec,
    y: TensorId,
    widx: usize,
    states: &mut [Option<(TensorId, TensorId)>],
    spikes: &mut [Vec<TensorId>],
    mode: SpikeMode,
) -> Result<TensorId> {
    let (u_prev, s_prev) = match states[widx] {
        Some(pair) => pair,
        None => {
            let zshape = tape.shape(y).to_vec();
            let u0 = tape.constant(Tensor::zeros(zshape.clone()));
            let s0 = tape.constant(Tensor::zeros(zshape));
            (u0, s0)
        }
    };
    let (s, u) = lif_step(tape, y, u_prev, s_prev, &net.lif, mode)?;
    states[widx] = Some((u, s));
    spikes[widx].push(s);
    Ok(s)
}

fn flatten(tape: &mut Tape, cur: TensorId) -> Result<TensorId> {
    let s = tape.shape(cur).to_vec();
    if s.len() == 2 {
        return Ok(cur);
    }
    if s.len() == 4 {
        return tape.reshape(cur, vec![s[0], s[1] * s[2] * s[3]]);
    }
    Err(Error::Dimension { op: "flatten", detail: alloc::format!("unexpected rank {}", s.len()) })
}

/// Single static pass with ReLU activations instead of LIF neurons; the
/// head stays linear. Input is [N, C, H, W].
pub fn analog_forward(
    tape: &mut Tape,
    net: &NetSpec,
    weights: &[TensorId],
    x: &Tensor,
) -> Result<TensorId> {
    net.validate()?;
    let n_weighted = net.weighted_layers().len();
    if weights.len() != n_weighted {
        return Err(Error::Contract(alloc::format!(
            "network has {n_weighted} weighted layers, got {} weight tensors",
            weights.len()
        )));
    }
    let shape = x.shape();
    if shape.len() != 4 || (shape[1], shape[2], shape[3]) != net.input {
        return Err(Error::Dimension {
            op: "analog_forward",
            detail: alloc::format!("input must be [N, {:?}], got {shape:?}", net.input),
        });
    }
    let mut cur = tape.constant(x.clone());
    let mut widx = 0;
    for layer in &net.layers {
        match *layer {
            Layer::Conv { stride, pad, .. } => {
                let y = tape.conv2d(cur, weights[widx], stride, pad)?;
                cur = tape.relu(y);
                widx += 1;
            }
            Layer::Pool => {
                cur = tape.avg_pool2(cur)?;
            }
            Layer::Dense { .. } => {
                cur = flatten(tape, cur)?;
                let y = tape.matmul(cur, weights[widx])?;
                cur = if widx == n_weighted - 1 { y } else { tape.relu(y) };
                widx += 1;
            }
        }
    }
    Ok(cur)
}

/// Assemble [N, T, ...] spike values and gradients per spiking layer.
/// Call after `Tape::backward`, otherwise every delta reads as zero.
pub fn collect_activity(tape: &Tape, un: &Unrolled) -> Vec<ActivityRecord> {
    let mut out = Vec::with_capacity(un.spikes.len());
    for steps in &un.spikes {
        let t_steps = steps.len();
        let step_shape = tape.shape(steps[0]).to_vec();
        let n = step_shape[0];
        let rest: usize = step_shape[1..].iter().product();
        let mut shape = Vec::with_capacity(step_shape.len() + 1);
        shape.push(n);
        shape.push(t_steps);
        shape.extend_from_slice(&step_shape[1..]);
        let mut y = vec![0.0; n * t_steps * rest];
        let mut delta = vec![0.0; n * t_steps * rest];
        for (t, &id) in steps.iter().enumerate() {
            let val = tape.value(id);
            let grad = tape.grad(id);
            for b in 0..n {
                let dst = (b * t_steps + t) * rest;
                let src = b * rest;
                y[dst..dst + rest].copy_from_slice(&val[src..src + rest]);
                delta[dst..dst + rest].copy_from_slice(&grad[src..src + rest]);
            }
        }
        out.push(ActivityRecord {
            y: Tensor::new(shape.clone(), y).expect("record shape consistent"),
            delta: Tensor::new(shape, delta).expect("record shape consistent"),
        });
    }
    out
}
