//! Feature Aggregation Module: a channel gate from pooled statistics,
//! followed by a spatial gate from per-pixel channel statistics.
//!
//! ```text
//! R' = sigmoid(GAvgPool(F) + GMaxPool(F))            (B,C,1,1)
//! F_channel = R' * F
//! T' = sigmoid(conv7x7(concat(Mean_c, Max_c)))        (B,1,H,W)
//! F_spatial = T' * F_channel
//! ```

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::Result;
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::Float;

pub const SPATIAL_KERNEL: usize = 7;

/// Gated features together with the gate that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Gated {
    pub output: Var,
    /// Probabilities in (0,1): `(B,C,1,1)` for the channel gate,
    /// `(B,1,H,W)` for the spatial gate.
    pub gate: Var,
}

pub fn channel_aggregate<T: Float>(tape: &mut Tape<T>, f: Var) -> Result<Gated> {
    let avg = tape.global_avg_pool(f)?;
    let max = tape.global_max_pool(f)?;
    let sum = tape.add(avg, max)?;
    let gate = tape.sigmoid(sum);
    let output = tape.mul(f, gate)?;
    Ok(Gated { output, gate })
}

#[derive(Clone, Debug)]
pub struct Fam {
    pub spatial_conv: Conv2d,
}

impl Fam {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let mut rng = store.rng_for(name);
        let spatial_conv = Conv2d::new(
            store,
            &format!("{name}.spatial_conv"),
            2,
            1,
            SPATIAL_KERNEL,
            ConvGeom::same(SPATIAL_KERNEL, 1),
            true,
            &mut rng,
        )?;
        Ok(Fam { spatial_conv })
    }

    pub fn spatial_aggregate<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, f_channel: Var) -> Result<Gated> {
        let mean = tape.channel_mean(f_channel)?;
        let max = tape.channel_max(f_channel)?;
        let stats = tape.concat_channels(&[mean, max])?;
        let logits = self.spatial_conv.forward(tape, bind, stats)?;
        let gate = tape.sigmoid(logits);
        let output = tape.mul(f_channel, gate)?;
        Ok(Gated { output, gate })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let ch = channel_aggregate(tape, x)?;
        Ok(self.spatial_aggregate(tape, bind, ch.output)?.output)
    }
}
