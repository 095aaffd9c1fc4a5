//! Fusion decoder and the binary cross-entropy loss.

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::{Float, Tensor};

/// Probability clamp used by the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct SegmentationMap {
    /// `(B,1,H,W)` at input resolution.
    pub logits: Var,
    pub probabilities: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub width: usize,
    pub refine1: Conv2d,
    pub refine2: Conv2d,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let mut rng = store.rng_for(name);
        let g = ConvGeom::same(3, 1);
        Ok(Decoder {
            width,
            refine1: Conv2d::new(store, &format!("{name}.refine1"), 2 * width, width, 3, g, true, &mut rng)?,
            refine2: Conv2d::new(store, &format!("{name}.refine2"), width, width, 3, g, true, &mut rng)?,
            head: Conv2d::pointwise(store, &format!("{name}.head"), width, 1, &mut rng)?,
        })
    }

    /// Upsample `high` to the resolution of `low`, concatenate, refine with
    /// two 3x3 conv+relu layers, project to one channel and resize to
    /// `out_h x out_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        high: Var,
        low: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<SegmentationMap> {
        let (sh, sl) = (tape.shape(high), tape.shape(low));
        if sh.b() != sl.b() {
            return Err(Error::shape("decode", "B", format!("high stream {sh} vs low stream {sl}")));
        }
        for (s, which) in [(sh, "high"), (sl, "low")] {
            if s.c() != self.width {
                return Err(Error::shape(
                    "decode",
                    "C",
                    format!("{which} stream has {} channels, decoder width is {}", s.c(), self.width),
                ));
            }
        }
        if sh.h() > sl.h() || sh.w() > sl.w() {
            return Err(Error::shape(
                "decode",
                "H",
                format!("high stream {sh} is finer than low stream {sl}"),
            ));
        }
        let up = tape.bilinear_upsample(high, sl.h(), sl.w())?;
        let cat = tape.concat_channels(&[up, low])?;
        let r = self.refine1.forward(tape, bind, cat)?;
        let r = tape.relu(r);
        let r = self.refine2.forward(tape, bind, r)?;
        let r = tape.relu(r);
        let small = self.head.forward(tape, bind, r)?;
        let logits = tape.bilinear_upsample(small, out_h, out_w)?;
        let probabilities = tape.sigmoid(logits);
        Ok(SegmentationMap { logits, probabilities })
    }
}

/// Mean binary cross-entropy of the map's probabilities against a binary target.
pub fn bce_loss<T: Float>(tape: &mut Tape<T>, pred: &SegmentationMap, target: &Tensor<T>) -> Result<Var> {
    tape.bce_with_logits(pred.logits, target, BCE_EPS)
}
