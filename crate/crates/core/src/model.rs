//! The assembled network and its ablation switches.
//!
//! ```text
//! image -> encoder -> X1..X4 -> reduce_i (1x1 to the common width)
//! low:  X1..X3 -> fam1..3 -> dem -> D1 -> rfb1
//! high: X4 -> rfb4 -> dam
//! decoder(high, low) -> logits at input resolution
//! ```
//! A disabled module is an identity pass-through and owns no parameters.

use crate::autodiff::{Tape, Var};
use crate::dam::{dam_forward, DamWeights};
use crate::decoder::{Decoder, SegmentationMap};
use crate::dem::Dem;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::rfb::{Rfb, RfbConfig};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Common width every level is projected to before the modules.
    pub decoder_width: usize,
    /// Channels inside each dilated RFB branch.
    pub rfb_branch_width: usize,
    pub enable_fam: bool,
    pub enable_dem: bool,
    pub enable_rfb: bool,
    pub enable_dam: bool,
    pub tile_size: usize,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_width: 16,
            rfb_branch_width: 8,
            enable_fam: true,
            enable_dem: true,
            enable_rfb: true,
            enable_dam: true,
            tile_size: 64,
            threshold: 0.5,
        }
    }
}

/// Named points on the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    Fam,
    FamRfb,
    Full,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [Ablation::Baseline, Ablation::Fam, Ablation::FamRfb, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Fam => "+fam",
            Ablation::FamRfb => "+fam+rfb",
            Ablation::Full => "full",
        }
    }

    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        let (fam, rfb, rest) = match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Fam => (true, false, false),
            Ablation::FamRfb => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        cfg.enable_fam = fam;
        cfg.enable_rfb = rfb;
        cfg.enable_dem = rest;
        cfg.enable_dam = rest;
        cfg
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            decoder_width: 64,
            rfb_branch_width: 32,
            tile_size: 512,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_width == 0 {
            return Err(Error::config("model.decoder_width", "must be >= 1"));
        }
        if self.rfb_branch_width == 0 {
            return Err(Error::config("model.rfb_branch_width", "must be >= 1"));
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(32) {
            return Err(Error::config(
                "model.tile_size",
                format!("{} must be a positive multiple of 32", self.tile_size),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(
                "model.threshold",
                format!("{} must lie strictly between 0 and 1", self.threshold),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FaNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub reduce: [Conv2d; 4],
    pub fam: Option<[Fam; 3]>,
    pub dem: Option<Dem>,
    pub rfb_low: Option<Rfb>,
    pub rfb_high: Option<Rfb>,
    pub dam: Option<DamWeights>,
    pub decoder: Decoder,
}

/// Intermediate streams of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub map: SegmentationMap,
    pub high: Var,
    pub low: Var,
}

impl FaNet {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.decoder_width;
        let encoder = Encoder::new(store, config.encoder.clone())?;
        let mut rng = store.rng_for("reduce");
        let ch = config.encoder.channels;
        let mut reduce = Vec::with_capacity(4);
        for (i, &c) in ch.iter().enumerate() {
            reduce.push(Conv2d::pointwise(store, &format!("reduce{}", i + 1), c, w, &mut rng)?);
        }
        let fam = if config.enable_fam {
            Some([Fam::new(store, "fam1")?, Fam::new(store, "fam2")?, Fam::new(store, "fam3")?])
        } else {
            None
        };
        let dem = if config.enable_dem {
            Some(Dem::new(store, "dem", w)?)
        } else {
            None
        };
        let (rfb_low, rfb_high) = if config.enable_rfb {
            let rc = RfbConfig::new(w, config.rfb_branch_width);
            (Some(Rfb::new(store, "rfb1", rc.clone())?), Some(Rfb::new(store, "rfb4", rc)?))
        } else {
            (None, None)
        };
        let dam = if config.enable_dam {
            Some(DamWeights::new(store, "dam", w)?)
        } else {
            None
        };
        let decoder = Decoder::new(store, "decoder", w)?;
        Ok(FaNet {
            config,
            encoder,
            reduce: [reduce[0], reduce[1], reduce[2], reduce[3]],
            fam,
            dem,
            rfb_low,
            rfb_high,
            dam,
            decoder,
        })
    }

    pub fn forward_streams<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, image: Var) -> Result<Forward> {
        let s = tape.shape(image);
        let enc = self.encoder.forward(tape, bind, image)?;
        let mut x = [enc.features.x(1); 4];
        for (i, conv) in self.reduce.iter().enumerate() {
            x[i] = conv.forward(tape, bind, enc.features.x(i + 1))?;
        }
        let mut f = [x[0], x[1], x[2]];
        if let Some(fams) = &self.fam {
            for (fi, fam) in f.iter_mut().zip(fams) {
                *fi = fam.forward(tape, bind, *fi)?;
            }
        }
        let mut low = match &self.dem {
            Some(dem) => dem.fuse(tape, bind, f[0], f[1], f[2])?.d1,
            None => f[0],
        };
        let mut high = x[3];
        if let Some(rfb) = &self.rfb_low {
            low = rfb.forward(tape, bind, low)?;
        }
        if let Some(rfb) = &self.rfb_high {
            high = rfb.forward(tape, bind, high)?;
        }
        if let Some(dam) = &self.dam {
            high = dam_forward(tape, bind, high, dam)?.output;
        }
        let map = self.decoder.decode(tape, bind, high, low, s.h(), s.w())?;
        Ok(Forward { map, high, low })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, image: Var) -> Result<SegmentationMap> {
        Ok(self.forward_streams(tape, bind, image)?.map)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn every_ablation_keeps_output_shape() {
        let img = Tensor::uniform(Shape::new(2, 3, 64, 64), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut cfgs: Vec<ModelConfig> = Ablation::LADDER.iter().map(|a| a.apply(ModelConfig::default())).collect();
        cfgs.push(ModelConfig {
            enable_fam: false,
            enable_rfb: false,
            enable_dam: false,
            ..ModelConfig::default()
        });
        for cfg in cfgs {
            let mut store = ParamStore::new(1);
            let net = FaNet::new(&mut store, cfg).unwrap();
            let mut tape = Tape::<f32>::new();
            let bind = store.bind_frozen(&mut tape);
            let x = tape.constant(img.clone());
            let map = net.forward(&mut tape, &bind, x).unwrap();
            assert_eq!(tape.shape(map.probabilities), Shape::new(2, 1, 64, 64));
            assert!(tape.value(map.probabilities).data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn disabled_modules_own_no_parameters() {
        let mut store = ParamStore::new(1);
        FaNet::new(&mut store, Ablation::Baseline.apply(ModelConfig::default())).unwrap();
        for (_, p) in store.iter() {
            for prefix in ["fam", "dem", "rfb", "dam"] {
                assert!(!p.name.starts_with(prefix), "{}", p.name);
            }
        }
    }

    #[test]
    fn shared_modules_initialize_identically_across_ablations() {
        let mut a = ParamStore::new(4);
        let mut b = ParamStore::new(4);
        FaNet::new(&mut a, Ablation::Baseline.apply(ModelConfig::default())).unwrap();
        FaNet::new(&mut b, ModelConfig::default()).unwrap();
        for (_, p) in a.iter() {
            let q = b.get(b.find(&p.name).unwrap());
            assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
        }
    }

    #[test]
    fn invalid_threshold_names_field() {
        let cfg = ModelConfig {
            threshold: 1.0,
            ..ModelConfig::default()
        };
        let err = FaNet::new(&mut ParamStore::new(0), cfg).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.threshold"));
    }
}
