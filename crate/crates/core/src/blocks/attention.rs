//! Non-local reads with exponentiated dot-product similarity.
//!
//! Every read normalises `exp(k_i · k_j)` over the attended positions, which
//! is a softmax over the similarity row; the softmax kernel subtracts the row
//! maximum first, so large keys never overflow.

use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Key map `[C_k, H, W]` and value map `[C_v, H, W]` of one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

/// Which projection pair to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Self-read of the local aggregator.
    Local,
    /// Query side of the global memory read.
    Query,
    /// Stored-frame side of the global memory read.
    Memory,
    /// Clip-wide non-local comparison variant.
    Clip,
}

impl Projection {
    pub fn prefix(self) -> &'static str {
        match self {
            Projection::Local => "ela.kv",
            Projection::Query => "aga.query",
            Projection::Memory => "aga.memory",
            Projection::Clip => "nl.kv",
        }
    }
}

/// Memory-side keys carry no bias: it would shift every score of a row
/// equally and cancel in the softmax.
pub fn key_value_specs(which: Projection, c: usize, c_k: usize, c_v: usize) -> Vec<ParamSpec> {
    let p = which.prefix();
    let mut specs = conv_specs(&format!("{p}.key"), c, c_k, 1);
    if which == Projection::Memory {
        specs.truncate(1);
    }
    specs.extend(conv_specs(&format!("{p}.value"), c, c_v, 1));
    specs
}

/// Fusion convolution mapping `concat(v, retrieved)` back to `C` channels.
pub fn fusion_specs(prefix: &str, c_v: usize, c: usize) -> Vec<ParamSpec> {
    conv_specs(&format!("{prefix}.fuse"), 2 * c_v, c, 1)
}

/// `F_sim(x, y) = exp(x · y)`.
pub fn sim<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>().exp()
}

pub fn project_key_value<T: Scalar>(cx: &mut Ctx<'_, T>, f: Var, which: Projection) -> Result<KeyValue> {
    let p = which.prefix();
    let k = cx.pointwise(&format!("{p}.key"), f)?;
    let v = cx.pointwise(&format!("{p}.value"), f)?;
    Ok(KeyValue { k, v })
}

fn flatten<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    cx.g.reshape(x, &[s[0], s[1] * s[2]])
}

/// Reads `values [C_v, M]` at the query positions of `q_keys [C_k, N]`
/// against `keys [C_k, M]`; returns `[C_v, N]`.
fn attend<T: Scalar>(cx: &mut Ctx<'_, T>, q_keys: Var, keys: Var, values: Var) -> Result<Var> {
    let qt = cx.g.transpose(q_keys)?;
    let scores = cx.g.matmul(qt, keys)?;
    let weights = cx.g.softmax(scores, 1)?;
    let wt = cx.g.transpose(weights)?;
    cx.g.matmul(values, wt)
}

fn fuse<T: Scalar>(cx: &mut Ctx<'_, T>, prefix: &str, v: Var, retrieved: Var, hw: (usize, usize)) -> Result<Var> {
    let cv = cx.g.shape(retrieved)[0];
    let r = cx.g.reshape(retrieved, &[cv, hw.0, hw.1])?;
    let cat = cx.g.concat(&[v, r], 0)?;
    cx.pointwise(&format!("{prefix}.fuse"), cat)
}

/// Self-attention read of one feature map: every position gathers the values
/// of all positions weighted by key similarity, and the result is fused with
/// the position's own value.
pub fn self_attend<T: Scalar>(cx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
    let (_, h, w) = cx.g.value(f).dims3("self_attend")?;
    let kv = project_key_value(cx, f, Projection::Local)?;
    let k = flatten(cx, kv.k)?;
    let v = flatten(cx, kv.v)?;
    let retrieved = attend(cx, k, k, v)?;
    fuse(cx, "ela", kv.v, retrieved, (h, w))
}

/// Cross-frame read against stored feature maps. Each memory frame gets its
/// own softmax; the per-frame reads are averaged. Memory maps enter the graph
/// as constants.
pub fn memory_read<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    f_local: Var,
    memory: &[&Tensor<T>],
) -> Result<Var> {
    if memory.is_empty() {
        return Err(Error::Contract("memory_read needs at least one memory frame".into()));
    }
    let shape = cx.g.shape(f_local).to_vec();
    let (_, h, w) = cx.g.value(f_local).dims3("memory_read")?;
    let q = project_key_value(cx, f_local, Projection::Query)?;
    let qk = flatten(cx, q.k)?;
    let mut total: Option<Var> = None;
    for m in memory {
        if m.shape() != shape.as_slice() {
            return Err(Error::shape("memory_read", format!("memory {:?} vs query {shape:?}", m.shape())));
        }
        let mv = cx.g.constant((*m).clone());
        let kv = project_key_value(cx, mv, Projection::Memory)?;
        let mk = flatten(cx, kv.k)?;
        let mval = flatten(cx, kv.v)?;
        let r = attend(cx, qk, mk, mval)?;
        total = Some(match total {
            None => r,
            Some(t) => cx.g.add(t, r)?,
        });
    }
    let sum = total.expect("memory is non-empty");
    let mean = cx.g.scale(sum, T::one() / T::of(memory.len() as f64));
    fuse(cx, "aga", q.v, mean, (h, w))
}

/// Clip-wide non-local read: the current frame's positions attend jointly
/// over every position of every clip frame (the current frame last).
pub fn clip_attend<T: Scalar>(cx: &mut Ctx<'_, T>, clip: &[Var]) -> Result<Var> {
    let current = *clip.last().ok_or_else(|| Error::Contract("empty clip".into()))?;
    let (_, h, w) = cx.g.value(current).dims3("clip_attend")?;
    let mut keys = Vec::with_capacity(clip.len());
    let mut values = Vec::with_capacity(clip.len());
    let mut current_kv = None;
    for &f in clip {
        let kv = project_key_value(cx, f, Projection::Clip)?;
        keys.push(flatten(cx, kv.k)?);
        values.push(flatten(cx, kv.v)?);
        current_kv = Some(kv);
    }
    let cur = current_kv.expect("clip is non-empty");
    let q = flatten(cx, cur.k)?;
    let all_k = cx.g.concat(&keys, 1)?;
    let all_v = cx.g.concat(&values, 1)?;
    let retrieved = attend(cx, q, all_k, all_v)?;
    fuse(cx, "nl", cur.v, retrieved, (h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_reference_values() {
        assert_eq!(sim(&[1.0f64, 0.0], &[0.0, 3.0]), 1.0);
        assert!((sim(&[1.0f64], &[1.0]) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(sim(&[1.0f64, 2.0], &[2.0, -1.0]), 1.0);
    }
}
