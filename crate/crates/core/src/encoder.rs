//! Miniature pyramid encoder: overlapping strided-convolution patch
//! embeddings produce four levels at strides 4, 8, 16 and 32, and one level
//! additionally runs a spatial-reduction-attention transformer block.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, LayerNorm, ParamStore};
use crate::tensor::{Float, Shape};

pub const PAPER_CHANNELS: [usize; 4] = [64, 128, 320, 512];
pub const DESK_CHANNELS: [usize; 4] = [16, 32, 48, 64];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    /// Level (1..=4) carrying the transformer block.
    pub attention_level: usize,
    pub sr_ratio: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: DESK_CHANNELS,
            attention_level: 3,
            sr_ratio: 2,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            channels: PAPER_CHANNELS,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("encoder.channels", "every level needs at least one channel"));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "encoder.channels",
                format!("must strictly increase across levels, got {:?}", self.channels),
            ));
        }
        if !(1..=4).contains(&self.attention_level) {
            return Err(Error::config("encoder.attention_level", "must be in 1..=4"));
        }
        if self.sr_ratio == 0 {
            return Err(Error::config("encoder.sr_ratio", "must be >= 1"));
        }
        if self.num_heads == 0 || !self.channels[self.attention_level - 1].is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "encoder.num_heads",
                format!(
                    "{} channels at level {} are not divisible by {} heads",
                    self.channels[self.attention_level - 1],
                    self.attention_level,
                    self.num_heads
                ),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("encoder.mlp_ratio", "must be >= 1"));
        }
        Ok(())
    }

    /// Spatial size of level `i` (1-based) for an input side of `n`.
    pub fn level_size(n: usize, level: usize) -> usize {
        n >> (level + 1)
    }
}

/// Encoder outputs `X1..X4`; level `i` is `(B, C_i, H/2^(i+1), W/2^(i+1))`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

impl PyramidFeatures {
    /// 1-based access, `x(1)` is the finest level.
    pub fn x(&self, level: usize) -> Var {
        self.levels[level - 1]
    }
}

#[derive(Clone, Debug)]
pub struct SraWeights {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub proj: Conv2d,
    pub reduce: Option<(Conv2d, LayerNorm)>,
    pub sr_ratio: usize,
    pub num_heads: usize,
}

impl SraWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        sr_ratio: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let query = Conv2d::pointwise(store, &format!("{name}.query"), channels, channels, rng)?;
        let key = Conv2d::pointwise(store, &format!("{name}.key"), channels, channels, rng)?;
        let value = Conv2d::pointwise(store, &format!("{name}.value"), channels, channels, rng)?;
        let proj = Conv2d::pointwise(store, &format!("{name}.proj"), channels, channels, rng)?;
        let reduce = if sr_ratio > 1 {
            let conv = Conv2d::new(
                store,
                &format!("{name}.sr"),
                channels,
                channels,
                sr_ratio,
                ConvGeom::new(sr_ratio, 0, 1),
                true,
                rng,
            )?;
            Some((conv, LayerNorm::new(store, &format!("{name}.sr_norm"), channels)?))
        } else {
            None
        };
        Ok(SraWeights {
            query,
            key,
            value,
            proj,
            reduce,
            sr_ratio,
            num_heads,
        })
    }
}

/// Multi-head self-attention whose keys and values come from a
/// `sr_ratio`-strided reduction of the input. Returns the projected output
/// (same shape as `x`) and the attention map `(B, heads, N, N_kv)`.
pub fn spatial_reduction_attention<T: Float>(
    tape: &mut Tape<T>,
    bind: &Binding,
    x: Var,
    w: &SraWeights,
) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    let [b, c, h, wd] = s.0;
    if h % w.sr_ratio != 0 {
        return Err(Error::shape(
            "spatial_reduction_attention",
            "H",
            format!("height {h} not divisible by sr_ratio {}", w.sr_ratio),
        ));
    }
    if wd % w.sr_ratio != 0 {
        return Err(Error::shape(
            "spatial_reduction_attention",
            "W",
            format!("width {wd} not divisible by sr_ratio {}", w.sr_ratio),
        ));
    }
    if c % w.num_heads != 0 {
        return Err(Error::shape(
            "spatial_reduction_attention",
            "C",
            format!("{c} channels not divisible by {} heads", w.num_heads),
        ));
    }
    let heads = w.num_heads;
    let d = c / heads;
    let n = h * wd;

    let kv_src = match &w.reduce {
        Some((conv, norm)) => {
            let r = conv.forward(tape, bind, x)?;
            norm.forward(tape, bind, r)?
        }
        None => x,
    };
    let m = tape.shape(kv_src).plane();

    let q = w.query.forward(tape, bind, x)?;
    let q = tape.reshape(q, Shape::new(b, heads, d, n))?;
    let q = tape.transpose_last2(q);
    let k = w.key.forward(tape, bind, kv_src)?;
    let k = tape.reshape(k, Shape::new(b, heads, d, m))?;
    let v = w.value.forward(tape, bind, kv_src)?;
    let v = tape.reshape(v, Shape::new(b, heads, d, m))?;
    let v = tape.transpose_last2(v);

    let logits = tape.batched_matmul(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_lastdim(logits)?;
    let out = tape.batched_matmul(attn, v)?; // (B, heads, N, d)
    let out = tape.transpose_last2(out);
    let out = tape.reshape(out, s)?;
    let out = w.proj.forward(tape, bind, out)?;
    Ok((out, attn))
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SraWeights,
    pub norm2: LayerNorm,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = channels * cfg.mlp_ratio;
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            attn: SraWeights::new(store, &format!("{name}.attn"), channels, cfg.sr_ratio, cfg.num_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            fc1: Conv2d::pointwise(store, &format!("{name}.mlp.fc1"), channels, hidden, rng)?,
            fc2: Conv2d::pointwise(store, &format!("{name}.mlp.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<(Var, Var)> {
        let n = self.norm1.forward(tape, bind, x)?;
        let (a, attn) = spatial_reduction_attention(tape, bind, n, &self.attn)?;
        let x = tape.add(x, a)?;
        let n = self.norm2.forward(tape, bind, x)?;
        let hdn = self.fc1.forward(tape, bind, n)?;
        let hdn = tape.relu(hdn);
        let m = self.fc2.forward(tape, bind, hdn)?;
        Ok((tape.add(x, m)?, attn))
    }
}

pub struct EncoderOutput {
    pub features: PyramidFeatures,
    /// Attention map of the transformer block, `(B, heads, N, N_kv)`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv2d,
    embeds: [Conv2d; 4],
    block: TransformerBlock,
}

fn patch_embed_geom() -> ConvGeom {
    // reflection padding is applied explicitly before each embedding
    ConvGeom::new(2, 0, 1)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = store.rng_for("encoder");
        let ch = config.channels;
        let g = patch_embed_geom();
        let stem = Conv2d::new(store, "encoder.stem", 3, ch[0], 3, g, true, &mut rng)?;
        let embed = |store: &mut ParamStore, i: usize, c_in: usize, rng: &mut ChaCha8Rng| {
            Conv2d::new(store, &format!("encoder.embed{}", i + 1), c_in, ch[i], 3, g, true, rng)
        };
        let e1 = embed(store, 0, ch[0], &mut rng)?;
        let e2 = embed(store, 1, ch[0], &mut rng)?;
        let e3 = embed(store, 2, ch[1], &mut rng)?;
        let e4 = embed(store, 3, ch[2], &mut rng)?;
        let level = config.attention_level;
        let block = TransformerBlock::new(store, &format!("encoder.block{level}"), ch[level - 1], &config, &mut rng)?;
        Ok(Encoder {
            config,
            stem,
            embeds: [e1, e2, e3, e4],
            block,
        })
    }

    pub fn check_input(shape: Shape) -> Result<()> {
        if shape.c() != 3 {
            return Err(Error::shape("encode", "C", format!("expected 3 image channels, got {}", shape.c())));
        }
        if !shape.h().is_multiple_of(32) || shape.h() == 0 {
            return Err(Error::config(
                "input.height",
                format!("{} must be a positive multiple of 32", shape.h()),
            ));
        }
        if !shape.w().is_multiple_of(32) || shape.w() == 0 {
            return Err(Error::config(
                "input.width",
                format!("{} must be a positive multiple of 32", shape.w()),
            ));
        }
        Ok(())
    }

    fn embed<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, conv: &Conv2d, x: Var) -> Result<Var> {
        let p = tape.pad_reflect(x, 1);
        let y = conv.forward(tape, bind, p)?;
        Ok(tape.relu(y))
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, image: Var) -> Result<EncoderOutput> {
        Self::check_input(tape.shape(image))?;
        let level = self.config.attention_level;
        let sr = self.config.sr_ratio;
        let side = EncoderConfig::level_size(tape.shape(image).h(), level);
        let side_w = EncoderConfig::level_size(tape.shape(image).w(), level);
        if !side.is_multiple_of(sr) || !side_w.is_multiple_of(sr) {
            return Err(Error::config(
                "encoder.sr_ratio",
                format!("level {level} is {side}x{side_w}, not divisible by sr_ratio {sr}"),
            ));
        }
        let mut x = self.embed(tape, bind, &self.stem, image)?;
        let mut levels = Vec::with_capacity(4);
        let mut attention = None;
        for (i, conv) in self.embeds.iter().enumerate() {
            x = self.embed(tape, bind, conv, x)?;
            if i + 1 == level {
                let (y, attn) = self.block.forward(tape, bind, x)?;
                x = y;
                attention = Some(attn);
            }
            levels.push(x);
        }
        Ok(EncoderOutput {
            features: PyramidFeatures {
                levels: [levels[0], levels[1], levels[2], levels[3]],
            },
            attention: attention.expect("attention level is validated"),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn encode(store: &ParamStore, enc: &Encoder, img: Tensor<f32>) -> (Vec<Shape>, Tensor<f32>) {
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let x = tape.constant(img);
        let out = enc.forward(&mut tape, &bind, x).unwrap();
        let shapes = out.features.levels.iter().map(|&v| tape.shape(v)).collect();
        (shapes, tape.value(out.attention).clone())
    }

    #[test]
    fn paper_channels_at_64() {
        let mut store = ParamStore::new(1);
        let enc = Encoder::new(&mut store, EncoderConfig::paper()).unwrap();
        let img = Tensor::uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (shapes, _) = encode(&store, &enc, img);
        assert_eq!(
            shapes,
            vec![
                Shape::new(1, 64, 16, 16),
                Shape::new(1, 128, 8, 8),
                Shape::new(1, 320, 4, 4),
                Shape::new(1, 512, 2, 2)
            ]
        );
    }

    #[test]
    fn desk_channels_at_32() {
        let mut store = ParamStore::new(2);
        let enc = Encoder::new(&mut store, EncoderConfig::default()).unwrap();
        let img = Tensor::uniform(Shape::new(2, 3, 32, 32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (shapes, _) = encode(&store, &enc, img);
        assert_eq!(
            shapes,
            vec![
                Shape::new(2, 16, 8, 8),
                Shape::new(2, 32, 4, 4),
                Shape::new(2, 48, 2, 2),
                Shape::new(2, 64, 1, 1)
            ]
        );
    }

    #[test]
    fn constant_image_gives_uniform_attention() {
        let mut store = ParamStore::new(3);
        let enc = Encoder::new(&mut store, EncoderConfig::default()).unwrap();
        let (_, attn) = encode(&store, &enc, Tensor::full(Shape::new(1, 3, 64, 64), 0.6));
        let n_kv = attn.shape().w();
        assert_eq!(n_kv, 4);
        for &a in attn.data() {
            assert!((a as f64 - 1.0 / n_kv as f64).abs() <= 1e-6, "{a}");
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let mut store = ParamStore::new(4);
        let enc = Encoder::new(&mut store, EncoderConfig::default()).unwrap();
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 48, 64)));
        match enc.forward(&mut tape, &bind, x) {
            Err(Error::Config { reason, .. }) => assert!(reason.contains("multiple of 32")),
            other => panic!("expected config error, got {:?}", other.err()),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.channels = [16, 16, 48, 64];
        assert!(c.validate().is_err());
        assert!(EncoderConfig::paper().validate().is_ok());
    }

    fn sra_store(channels: usize, sr: usize, heads: usize) -> (ParamStore, SraWeights) {
        let mut store = ParamStore::new(5);
        let mut rng = store.rng_for("sra");
        let w = SraWeights::new(&mut store, "sra", channels, sr, heads, &mut rng).unwrap();
        (store, w)
    }

    #[test]
    fn zero_query_key_gives_position_mean() {
        let (mut store, w) = sra_store(4, 1, 1);
        w.query.set_zero(&mut store);
        w.key.set_zero(&mut store);
        w.value.set_identity(&mut store, 1.0);
        w.proj.set_identity(&mut store, 1.0);
        let x = Tensor::uniform(Shape::new(2, 4, 4, 4), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (out, _) = spatial_reduction_attention(&mut tape, &bind, xv, &w).unwrap();
        let out = tape.value(out);
        for b in 0..2 {
            for c in 0..4 {
                let mean: f64 = (0..16).map(|i| x.at(b, c, i / 4, i % 4) as f64).sum::<f64>() / 16.0;
                for i in 0..16 {
                    assert!((out.at(b, c, i / 4, i % 4) as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sra_rows_normalised_and_shape_kept() {
        for sr in [1, 2] {
            let (store, w) = sra_store(8, sr, 2);
            let x = Tensor::uniform(Shape::new(1, 8, 8, 8), -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(sr as u64));
            let mut tape = Tape::<f32>::new();
            let bind = store.bind_frozen(&mut tape);
            let xv = tape.constant(x);
            let (out, attn) = spatial_reduction_attention(&mut tape, &bind, xv, &w).unwrap();
            assert_eq!(tape.shape(out), Shape::new(1, 8, 8, 8));
            let a = tape.value(attn);
            assert_eq!(a.shape(), Shape::new(1, 2, 64, 64 / (sr * sr)));
            for row in a.data().chunks(a.shape().w()) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn sra_indivisible_is_shape_error() {
        let (store, w) = sra_store(4, 2, 1);
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::zeros(Shape::new(1, 4, 5, 4)));
        assert!(matches!(
            spatial_reduction_attention(&mut tape, &bind, xv, &w),
            Err(Error::Shape { dim: "H", .. })
        ));
    }

    #[test]
    fn gradients_reach_every_encoder_parameter() {
        let mut store = ParamStore::new(6);
        let enc = Encoder::new(&mut store, EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(Shape::new(2, 3, 64, 64), 0.0, 1.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(img);
        let out = enc.forward(&mut tape, &bind, x).unwrap();
        let mut total = None;
        for &lv in &out.features.levels {
            let proj = Tensor::uniform(tape.shape(lv), -1.0, 1.0, &mut rng);
            let l = crate::gradcheck::project(&mut tape, lv, &proj).unwrap();
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l).unwrap(),
            });
        }
        let grads = tape.backward(total.unwrap()).unwrap();
        store.accumulate_grads(&grads, &bind);
        for (_, p) in store.iter() {
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("{} has no grad", p.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{} grad is all zero", p.name);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn shape_contract(h in prop::sample::select(vec![32usize, 64, 96]), w in prop::sample::select(vec![32usize, 64, 96]), b in 1usize..3) {
            let mut store = ParamStore::new(7);
            let mut cfg = EncoderConfig::default();
            cfg.sr_ratio = 1;
            let enc = Encoder::new(&mut store, cfg.clone()).unwrap();
            let (shapes, _) = encode(&store, &enc, Tensor::full(Shape::new(b, 3, h, w), 0.5));
            for (i, s) in shapes.iter().enumerate() {
                prop_assert_eq!(*s, Shape::new(b, cfg.channels[i], h >> (i + 2), w >> (i + 2)));
            }
        }
    }
}
