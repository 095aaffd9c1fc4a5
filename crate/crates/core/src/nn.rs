//! Named parameters and the layers shared by every module.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with a hierarchical name such as `fam1.spatial_conv.weight`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    /// Each module derives its initialization stream from `seed` and its own
    /// name prefix, so enabling or disabling one module never shifts the
    /// initial weights of another.
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn rng_for(&self, prefix: &str) -> ChaCha8Rng {
        // FNV-1a over the prefix, mixed with the model seed
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in prefix.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17))
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind<T: Float>(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.param(p.value.cast())).collect(),
        }
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen<T: Float>(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.constant(p.value.cast())).collect(),
        }
    }

    /// Add this pass's gradients into each parameter's `grad`. Parameters the
    /// loss does not reach keep their previous gradient (or none).
    pub fn accumulate_grads(&mut self, grads: &Gradients<f32>, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            let Some(g) = grads.raw(v) else { continue };
            match &mut p.grad {
                Some(existing) => {
                    for (e, &d) in existing.data_mut().iter_mut().zip(g) {
                        *e += d;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(p.value.shape(), g.to_vec()).expect("grad shape"));
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Kaiming-uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let fan_in = (shape.c() * shape.h() * shape.w()).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(Shape::new(c_out, c_in, kernel, kernel), rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, geom })
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 1, ConvGeom::new(1, 0, 1), true, rng)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, bind.var(self.weight), self.bias.map(|b| bind.var(b)), self.geom)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape().b()
    }

    /// Overwrite as `scale * identity` (1x1 or centred odd kernel) with zero bias.
    pub fn set_identity(&self, store: &mut ParamStore, scale: f32) {
        let w = store.value_mut(self.weight);
        let [co, ci, kh, kw] = w.shape().0;
        w.data_mut().fill(0.0);
        for c in 0..co.min(ci) {
            w.set(c, c, kh / 2, kw / 2, scale);
        }
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Channel-wise layer normalization with affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Ok(LayerNorm {
            weight: store.add(format!("{name}.weight"), Tensor::ones(shape))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(shape))?,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm_channels(x, bind.var(self.weight), bind.var(self.bias), self.eps)
    }
}
