//! Difference Elimination Module: coarse-to-fine multiplicative fusion of
//! adjacent aggregated levels.
//!
//! `D3 = F3`, `D2 = F2 * conv(up2(D3))`, `D1 = F1 * conv(up2(D2))`.

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::Float;

/// Fused maps, each at the resolution of the matching input level.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub d1: Var,
    pub d2: Var,
    pub d3: Var,
}

#[derive(Clone, Debug)]
pub struct Dem {
    /// Applied to the upsampled `D3` before gating `F2`.
    pub conv2: Conv2d,
    /// Applied to the upsampled `D2` before gating `F1`.
    pub conv1: Conv2d,
}

fn check_halving(fine: (usize, usize, usize), coarse: (usize, usize, usize), level: &str) -> Result<()> {
    let (cf, hf, wf) = fine;
    let (cc, hc, wc) = coarse;
    if cf != cc {
        return Err(Error::shape(
            "dem_fuse",
            "C",
            format!("{level}: channel widths differ ({cf} vs {cc})"),
        ));
    }
    if hc * 2 != hf {
        return Err(Error::shape(
            "dem_fuse",
            "H",
            format!("{level}: coarse height {hc} is not half of {hf}"),
        ));
    }
    if wc * 2 != wf {
        return Err(Error::shape(
            "dem_fuse",
            "W",
            format!("{level}: coarse width {wc} is not half of {wf}"),
        ));
    }
    Ok(())
}

impl Dem {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let mut rng = store.rng_for(name);
        let g = ConvGeom::same(3, 1);
        Ok(Dem {
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, g, true, &mut rng)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, 3, g, true, &mut rng)?,
        })
    }

    fn lift<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, conv: &Conv2d, coarse: Var, fine: Var) -> Result<Var> {
        let s = tape.shape(fine);
        let up = tape.bilinear_upsample(coarse, s.h(), s.w())?;
        let c = conv.forward(tape, bind, up)?;
        tape.mul(fine, c)
    }

    pub fn fuse<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, f1: Var, f2: Var, f3: Var) -> Result<FusedFeatures> {
        let dims = |v: Var, tape: &Tape<T>| {
            let s = tape.shape(v);
            (s.c(), s.h(), s.w())
        };
        let (s1, s2, s3) = (dims(f1, tape), dims(f2, tape), dims(f3, tape));
        if tape.shape(f1).b() != tape.shape(f2).b() || tape.shape(f2).b() != tape.shape(f3).b() {
            return Err(Error::shape("dem_fuse", "B", "batch sizes differ across levels"));
        }
        check_halving(s1, s2, "level 1/2")?;
        check_halving(s2, s3, "level 2/3")?;
        let d3 = f3;
        let d2 = self.lift(tape, bind, &self.conv2, d3, f2)?;
        let d1 = self.lift(tape, bind, &self.conv1, d2, f1)?;
        Ok(FusedFeatures { d1, d2, d3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn ones_through_identity_cascade() {
        let mut store = ParamStore::new(0);
        let dem = Dem::new(&mut store, "dem", 3).unwrap();
        dem.conv1.set_identity(&mut store, 1.0);
        dem.conv2.set_identity(&mut store, 1.0);
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let f1 = tape.constant(Tensor::ones(Shape::new(1, 3, 8, 8)));
        let f2 = tape.constant(Tensor::ones(Shape::new(1, 3, 4, 4)));
        let f3 = tape.constant(Tensor::ones(Shape::new(1, 3, 2, 2)));
        let out = dem.fuse(&mut tape, &bind, f1, f2, f3).unwrap();
        for v in [out.d1, out.d2, out.d3] {
            assert!(tape.value(v).data().iter().all(|&x| x == 1.0));
        }
        assert_eq!(tape.shape(out.d1), Shape::new(1, 3, 8, 8));
    }

    #[test]
    fn non_halving_pyramid_rejected() {
        let mut store = ParamStore::new(0);
        let dem = Dem::new(&mut store, "dem", 2).unwrap();
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let f1 = tape.constant(Tensor::ones(Shape::new(1, 2, 8, 8)));
        let f2 = tape.constant(Tensor::ones(Shape::new(1, 2, 3, 4)));
        let f3 = tape.constant(Tensor::ones(Shape::new(1, 2, 2, 2)));
        assert!(matches!(
            dem.fuse(&mut tape, &bind, f1, f2, f3),
            Err(Error::Shape { dim: "H", .. })
        ));
    }
}
