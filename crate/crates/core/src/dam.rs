//! Dual Attention Module: position attention over the `N = H*W` positions and
//! channel attention over the `C` channels, each behind a zero-initialized
//! residual weight, summed and mixed by a 1x1 convolution.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

pub const DEFAULT_MAX_POSITIONS: usize = 4096;

#[derive(Clone, Debug)]
pub struct DamWeights {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub fuse: Conv2d,
    /// Largest `N` for which the dense `N x N` map may be built.
    pub max_positions: usize,
}

/// Width of the query/key projections for `channels` input channels.
pub fn reduced_width(channels: usize) -> usize {
    (channels / 8).max(1)
}

impl DamWeights {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mut rng = store.rng_for(name);
        let r = reduced_width(channels);
        Ok(DamWeights {
            query: Conv2d::pointwise(store, &format!("{name}.query"), channels, r, &mut rng)?,
            key: Conv2d::pointwise(store, &format!("{name}.key"), channels, r, &mut rng)?,
            value: Conv2d::pointwise(store, &format!("{name}.value"), channels, channels, &mut rng)?,
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(Shape::scalar()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(Shape::scalar()))?,
            fuse: Conv2d::pointwise(store, &format!("{name}.fuse"), channels, channels, &mut rng)?,
            max_positions: DEFAULT_MAX_POSITIONS,
        })
    }

    /// `fuse = 0.5 * I`: with `gamma = beta = 0` the whole module then maps
    /// its input to itself, since `E + M = 2A`.
    pub fn set_identity_fuse(&self, store: &mut ParamStore) {
        self.fuse.set_identity(store, 0.5);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    /// `(B,1,N,N)` for position attention, `(B,1,C,C)` for channel attention.
    /// Row `j` holds the weights query `j` assigns to every key.
    pub map: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DamOutput {
    pub output: Var,
    pub position: Attended,
    pub channel: Attended,
}

/// `E_j = gamma * sum_i S_ji D_i + A_j` with `S = softmax_rows(B^T C)`.
pub fn position_attention<T: Float>(tape: &mut Tape<T>, bind: &Binding, a: Var, w: &DamWeights) -> Result<Attended> {
    let s = tape.shape(a);
    let [b, c, h, wd] = s.0;
    let n = h * wd;
    if n > w.max_positions {
        return Err(Error::shape(
            "position_attention",
            "N",
            format!("{h}x{wd} = {n} positions exceeds the dense attention cap {}", w.max_positions),
        ));
    }
    let q = w.query.forward(tape, bind, a)?;
    let r = tape.shape(q).c();
    let q = tape.reshape(q, Shape::new(b, 1, r, n))?;
    let q = tape.transpose_last2(q); // (B,1,N,r)
    let k = w.key.forward(tape, bind, a)?;
    let k = tape.reshape(k, Shape::new(b, 1, r, n))?;
    let logits = tape.batched_matmul(q, k)?; // (B,1,N,N)
    let map = tape.softmax_lastdim(logits)?;
    let v = w.value.forward(tape, bind, a)?;
    let v = tape.reshape(v, Shape::new(b, 1, c, n))?;
    let v = tape.transpose_last2(v); // (B,1,N,C)
    let out = tape.batched_matmul(map, v)?;
    let out = tape.transpose_last2(out);
    let out = tape.reshape(out, s)?;
    let scaled = tape.mul(out, bind.var(w.gamma))?;
    let output = tape.add(scaled, a)?;
    Ok(Attended { output, map })
}

/// `M_j = beta * sum_i X_ji A_i + A_j` with `X = softmax_rows(A A^T)` over
/// channel vectors of length `N`.
pub fn channel_attention<T: Float>(tape: &mut Tape<T>, bind: &Binding, a: Var, w: &DamWeights) -> Result<Attended> {
    let s = tape.shape(a);
    let [b, c, h, wd] = s.0;
    let flat = tape.reshape(a, Shape::new(b, 1, c, h * wd))?;
    let flat_t = tape.transpose_last2(flat);
    let logits = tape.batched_matmul(flat, flat_t)?; // (B,1,C,C)
    let map = tape.softmax_lastdim(logits)?;
    let out = tape.batched_matmul(map, flat)?;
    let out = tape.reshape(out, s)?;
    let scaled = tape.mul(out, bind.var(w.beta))?;
    let output = tape.add(scaled, a)?;
    Ok(Attended { output, map })
}

/// `fuse(E + M)`, shape preserving.
pub fn dam_forward<T: Float>(tape: &mut Tape<T>, bind: &Binding, a: Var, w: &DamWeights) -> Result<DamOutput> {
    let position = position_attention(tape, bind, a, w)?;
    let channel = channel_attention(tape, bind, a, w)?;
    let sum = tape.add(position.output, channel.output)?;
    let output = w.fuse.forward(tape, bind, sum)?;
    Ok(DamOutput {
        output,
        position,
        channel,
    })
}
