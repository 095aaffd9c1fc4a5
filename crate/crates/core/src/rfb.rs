//! Receptive Field Block: a 1x1 shortcut branch plus four reduce-then-dilate
//! branches whose concatenation is projected back and added to the shortcut.

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfbConfig {
    /// Input and output channel count.
    pub width: usize,
    /// Channels inside each dilated branch.
    pub branch_width: usize,
    pub kernel: usize,
    /// Dilations of branches 2..=5.
    pub dilations: [usize; 4],
}

impl RfbConfig {
    pub fn new(width: usize, branch_width: usize) -> Self {
        RfbConfig {
            width,
            branch_width,
            kernel: 3,
            dilations: [1, 3, 5, 7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.branch_width == 0 {
            return Err(Error::config("rfb.width", "must be >= 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("rfb.kernel", "must be odd to keep padding symmetric"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::config("rfb.dilations", "must be >= 1"));
        }
        if !self.dilations[1..].windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(
                "rfb.dilations",
                format!("must strictly increase over branches 3..5, got {:?}", self.dilations),
            ));
        }
        Ok(())
    }

    /// Largest offset reached from a pixel through the widest branch.
    pub fn reach(&self) -> usize {
        self.dilations.iter().max().copied().unwrap_or(1) * (self.kernel - 1) / 2
    }
}

#[derive(Clone, Debug)]
pub struct RfbBranch {
    pub reduce: Conv2d,
    pub dilated: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Rfb {
    pub config: RfbConfig,
    pub shortcut: Conv2d,
    pub branches: Vec<RfbBranch>,
    pub fuse: Conv2d,
}

impl Rfb {
    pub fn new(store: &mut ParamStore, name: &str, config: RfbConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = store.rng_for(name);
        let (w, bw, k) = (config.width, config.branch_width, config.kernel);
        let shortcut = Conv2d::pointwise(store, &format!("{name}.branch1"), w, w, &mut rng)?;
        let mut branches = Vec::with_capacity(4);
        for (i, &d) in config.dilations.iter().enumerate() {
            let prefix = format!("{name}.branch{}", i + 2);
            let reduce = Conv2d::pointwise(store, &format!("{prefix}.reduce"), w, bw, &mut rng)?;
            let dilated = Conv2d::new(store, &format!("{prefix}.conv"), bw, bw, k, ConvGeom::same(k, d), true, &mut rng)?;
            branches.push(RfbBranch { reduce, dilated });
        }
        let fuse = Conv2d::pointwise(store, &format!("{name}.fuse"), 4 * bw, w, &mut rng)?;
        Ok(Rfb {
            config,
            shortcut,
            branches,
            fuse,
        })
    }

    /// `relu(fuse(concat(b2..b5)) + b1(x))`, shape preserving.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != self.config.width {
            return Err(Error::shape(
                "rfb_forward",
                "C",
                format!("input has {c} channels, block is configured for {}", self.config.width),
            ));
        }
        let short = self.shortcut.forward(tape, bind, x)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let r = br.reduce.forward(tape, bind, x)?;
            let r = tape.relu(r);
            outs.push(br.dilated.forward(tape, bind, r)?);
        }
        let cat = tape.concat_channels(&outs)?;
        let fused = self.fuse.forward(tape, bind, cat)?;
        let sum = tape.add(fused, short)?;
        Ok(tape.relu(sum))
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        self.shortcut.set_zero(store);
        self.fuse.set_zero(store);
        for br in &self.branches {
            br.reduce.set_zero(store);
            br.dilated.set_zero(store);
        }
    }
}
