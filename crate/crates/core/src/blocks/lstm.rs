//! Convolutional LSTM cells: the bottlenecked depthwise-separable cell used
//! for local aggregation and the standard full-convolution cell used as a
//! comparison variant.

use super::params::{conv_specs, Ctx, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Hidden and cell maps of one LSTM layer; both `[C_lstm, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(cx: &mut Ctx<'_, T>, channels: usize, h: usize, w: usize) -> Self {
        let h_map = cx.g.constant(Tensor::zeros(&[channels, h, w]));
        let c_map = cx.g.constant(Tensor::zeros(&[channels, h, w]));
        LstmState { h: h_map, c: c_map }
    }
}

/// Parameters of a bottleneck cell named `prefix`: pointwise bottleneck over
/// `concat(x, h)`, a shared 3×3 depthwise stage and a pointwise stage
/// emitting the four gates.
pub fn bottleneck_specs(prefix: &str, c_in: usize, c_lstm: usize) -> Vec<ParamSpec> {
    let mut specs = conv_specs(&format!("{prefix}.bottleneck"), c_in + c_lstm, c_lstm, 1);
    specs.push(ParamSpec::weight(format!("{prefix}.gates_dw.w"), &[c_lstm, 1, 3, 3]));
    specs.push(ParamSpec::weight(format!("{prefix}.gates_pw.w"), &[4 * c_lstm, c_lstm, 1, 1]));
    specs.push(gate_bias(&format!("{prefix}.gates_pw.b"), c_lstm));
    specs
}

/// Specs of [`run_local_lstm`]: the cell plus an output projection back to
/// `c_in` channels when the widths differ.
pub fn local_lstm_specs(prefix: &str, c_in: usize, c_lstm: usize) -> Vec<ParamSpec> {
    let mut specs = bottleneck_specs(prefix, c_in, c_lstm);
    if c_lstm != c_in {
        specs.extend(conv_specs(&format!("{prefix}.out"), c_lstm, c_in, 1));
    }
    specs
}

/// Standard ConvLSTM layer: one 3×3 convolution over `concat(x, h)`.
pub fn conv_lstm_specs(prefix: &str, c_in: usize, c_hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.gates.w"), &[4 * c_hidden, c_in + c_hidden, 3, 3]),
        gate_bias(&format!("{prefix}.gates.b"), c_hidden),
    ]
}

// gate order i, f, o, g; forget bias starts at 1
fn gate_bias(name: &str, c: usize) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape: vec![4 * c], init: Init::ForgetGate { channels: c } }
}

/// Splits stacked gate pre-activations and applies the LSTM update.
fn gate_update<T: Scalar>(cx: &mut Ctx<'_, T>, z: Var, c_prev: Var, c: usize) -> Result<LstmState> {
    let zi = cx.g.narrow(z, 0, 0, c)?;
    let zf = cx.g.narrow(z, 0, c, c)?;
    let zo = cx.g.narrow(z, 0, 2 * c, c)?;
    let zg = cx.g.narrow(z, 0, 3 * c, c)?;
    let i = cx.g.sigmoid(zi);
    let f = cx.g.sigmoid(zf);
    let o = cx.g.sigmoid(zo);
    let gg = cx.g.tanh(zg);
    let keep = cx.g.mul(f, c_prev)?;
    let write = cx.g.mul(i, gg)?;
    let c_new = cx.g.add(keep, write)?;
    let tc = cx.g.tanh(c_new);
    let h_new = cx.g.mul(o, tc)?;
    Ok(LstmState { h: h_new, c: c_new })
}

fn check_spatial<T: Scalar>(cx: &Ctx<'_, T>, x: Var, state: &LstmState) -> Result<()> {
    let (xs, hs) = (cx.g.shape(x), cx.g.shape(state.h));
    if xs.len() != 3 || hs.len() != 3 || xs[1..] != hs[1..] {
        return Err(Error::shape("lstm", format!("input {xs:?} vs state {hs:?} (spatial axes 1, 2)")));
    }
    Ok(())
}

/// One bottleneck cell step.
pub fn bottleneck_lstm_step<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    prefix: &str,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    check_spatial(cx, x, &state)?;
    let c = cx.g.shape(state.h)[0];
    let xh = cx.g.concat(&[x, state.h], 0)?;
    let pre = cx.pointwise(&format!("{prefix}.bottleneck"), xh)?;
    let b = cx.g.silu(pre);
    let dw = cx.p(&format!("{prefix}.gates_dw.w"))?;
    let pw = cx.p(&format!("{prefix}.gates_pw.w"))?;
    let pb = cx.p(&format!("{prefix}.gates_pw.b"))?;
    let z = cx.g.depthwise_separable_conv(b, dw, pw, pb, 1, 1)?;
    gate_update(cx, z, state.c, c)
}

/// One standard ConvLSTM step.
pub fn conv_lstm_step<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    prefix: &str,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    check_spatial(cx, x, &state)?;
    let c = cx.g.shape(state.h)[0];
    let xh = cx.g.concat(&[x, state.h], 0)?;
    let z = cx.conv3x3(&format!("{prefix}.gates"), xh, 1)?;
    gate_update(cx, z, state.c, c)
}

/// Runs a zero-initialised bottleneck cell over `clip` (oldest first) and
/// returns the final hidden map, projected back to the input width if needed.
pub fn run_local_lstm<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    prefix: &str,
    clip: &[Var],
    c_lstm: usize,
) -> Result<Var> {
    let first = *clip.first().ok_or_else(|| Error::Contract("empty LSTM clip".into()))?;
    let shape = cx.g.shape(first).to_vec();
    let (c_in, h, w) = (shape[0], shape[1], shape[2]);
    for &f in clip {
        if cx.g.shape(f) != shape.as_slice() {
            return Err(Error::shape("run_local_lstm", format!("{:?} vs {shape:?}", cx.g.shape(f))));
        }
    }
    let mut state = LstmState::zeros(cx, c_lstm, h, w);
    for &f in clip {
        state = bottleneck_lstm_step(cx, prefix, f, state)?;
    }
    if c_lstm == c_in {
        Ok(state.h)
    } else {
        cx.pointwise(&format!("{prefix}.out"), state.h)
    }
}

/// Stacked standard ConvLSTM layers with hidden width equal to the input
/// width, each zero-initialised and run over the whole clip.
pub fn run_stacked_conv_lstm<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    prefix: &str,
    clip: &[Var],
    layers: usize,
) -> Result<Var> {
    let first = *clip.first().ok_or_else(|| Error::Contract("empty LSTM clip".into()))?;
    let shape = cx.g.shape(first).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut states: Vec<LstmState> = (0..layers).map(|_| LstmState::zeros(cx, c, h, w)).collect();
    for &f in clip {
        let mut x = f;
        for (l, st) in states.iter_mut().enumerate() {
            *st = conv_lstm_step(cx, &format!("{prefix}.{l}"), x, *st)?;
            x = st.h;
        }
    }
    Ok(states.last().map(|s| s.h).unwrap_or(first))
}
