//! Finite-difference checks of whole modules: every parameter group and the
//! module input, on small random shapes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{analytic_gradients, compare, project, CheckOptions, GraphFn, GroupReport};
use crate::autodiff::{Tape, Var};
use crate::dam::{dam_forward, DamWeights};
use crate::decoder::{bce_loss, Decoder};
use crate::dem::Dem;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::nn::{Binding, ParamStore};
use crate::rfb::{Rfb, RfbConfig};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    All,
    Encoder,
    Fam,
    Dem,
    Rfb,
    Dam,
    Decoder,
}

impl Selector {
    pub const MODULES: [Selector; 6] = [
        Selector::Encoder,
        Selector::Fam,
        Selector::Dem,
        Selector::Rfb,
        Selector::Dam,
        Selector::Decoder,
    ];

    pub fn modules(self) -> Vec<Selector> {
        match self {
            Selector::All => Self::MODULES.to_vec(),
            one => vec![one],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Selector::All => "all",
            Selector::Encoder => "encoder",
            Selector::Fam => "fam",
            Selector::Dem => "dem",
            Selector::Rfb => "rfb",
            Selector::Dam => "dam",
            Selector::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Selector::All]
            .into_iter()
            .chain(Self::MODULES)
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown module {s:?}; expected one of all, encoder, fam, dem, rfb, dam, decoder"
                ))
            })
    }
}

/// One row of the pass/fail table.
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: Selector,
    pub seed: u64,
    pub report: GroupReport,
    pub passed: bool,
}

impl fmt::Display for ModuleCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} seed={} {:<40} rel_err={:.3e} coords={:<3} kinks={:<3} {}",
            self.module.name(),
            self.seed,
            self.report.name,
            self.report.max_rel_error,
            self.report.coords_checked,
            self.report.coords_skipped,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Graph over `data` inputs followed by every parameter of `store`.
struct Case<M> {
    module: M,
    n_data: usize,
    projections: Vec<Tensor<f32>>,
}

/// Biases are redrawn away from their zero initialization: a zero bias
/// behind a ReLU that zeroed a whole window puts the check exactly on a kink.
fn inputs_for(
    data: Vec<(String, Tensor<f32>)>,
    store: &ParamStore,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, Tensor<f32>)> {
    let mut all = data;
    for (_, p) in store.iter() {
        let value = if p.name.ends_with(".bias") {
            Tensor::uniform(p.value.shape(), -0.2, 0.2, rng)
        } else {
            p.value.clone()
        };
        all.push((p.name.clone(), value));
    }
    all
}

impl<M> Case<M> {
    fn split(&self, inputs: &[Var]) -> (Vec<Var>, Binding) {
        (
            inputs[..self.n_data].to_vec(),
            Binding::from_vars(inputs[self.n_data..].to_vec()),
        )
    }
}

impl GraphFn for Case<Encoder> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let out = self.module.forward(tape, &bind, data[0])?;
        let mut total = None;
        for (&level, r) in out.features.levels.iter().zip(&self.projections) {
            let p = project(tape, level, r)?;
            total = Some(match total {
                Some(t) => tape.add(t, p)?,
                None => p,
            });
        }
        Ok(total.expect("four levels"))
    }
}

impl GraphFn for Case<Fam> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let y = self.module.forward(tape, &bind, data[0])?;
        project(tape, y, &self.projections[0])
    }
}

impl GraphFn for Case<Dem> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let out = self.module.fuse(tape, &bind, data[0], data[1], data[2])?;
        let a = project(tape, out.d1, &self.projections[0])?;
        let b = project(tape, out.d2, &self.projections[1])?;
        tape.add(a, b)
    }
}

impl GraphFn for Case<Rfb> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let y = self.module.forward(tape, &bind, data[0])?;
        project(tape, y, &self.projections[0])
    }
}

impl GraphFn for Case<DamWeights> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let y = dam_forward(tape, &bind, data[0], &self.module)?.output;
        project(tape, y, &self.projections[0])
    }
}

impl GraphFn for Case<Decoder> {
    fn eval<T: Float>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (data, bind) = self.split(inputs);
        let map = self.module.decode(tape, &bind, data[0], data[1], 16, 16)?;
        bce_loss(tape, &map, &self.projections[0].cast())
    }
}

fn run_case<G: GraphFn>(
    graph: &G,
    inputs: &[(String, Tensor<f32>)],
    opts: &CheckOptions,
    corrupt: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupReport>> {
    let plain: Vec<Tensor<f32>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut analytic = analytic_gradients(graph, &plain)?;
    if let Some(name) = corrupt {
        let i = inputs
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Usage(format!("no parameter group named {name}")))?;
        analytic[i] = analytic[i].map(|g| 1.5 * g + 0.01);
    }
    compare(graph, inputs, &analytic, opts, rng)
}

/// Check one module at one seed. `corrupt` names a group whose analytic
/// gradient is deliberately falsified before comparison.
pub fn check_module(module: Selector, seed: u64, opts: &CheckOptions, corrupt: Option<&str>) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut store = ParamStore::new(seed);
    let x = |s: &str| s.to_string();
    match module {
        Selector::All => Err(Error::Usage("select a single module".into())),
        Selector::Encoder => {
            let cfg = EncoderConfig {
                channels: [4, 6, 8, 10],
                ..EncoderConfig::default()
            };
            let enc = Encoder::new(&mut store, cfg.clone())?;
            let img = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
            let projections = (1..=4)
                .map(|l| {
                    let n = EncoderConfig::level_size(32, l);
                    random(Shape::new(1, cfg.channels[l - 1], n, n), &mut rng)
                })
                .collect();
            let inputs = inputs_for(vec![(x("input"), img)], &store, &mut rng);
            let case = Case {
                module: enc,
                n_data: 1,
                projections,
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
        Selector::Fam => {
            let fam = Fam::new(&mut store, "fam1")?;
            let s = Shape::new(2, 3, 4, 4);
            let inputs = inputs_for(vec![(x("input"), random(s, &mut rng))], &store, &mut rng);
            let case = Case {
                module: fam,
                n_data: 1,
                projections: vec![random(s, &mut rng)],
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
        Selector::Dem => {
            let dem = Dem::new(&mut store, "dem", 3)?;
            let shapes = [Shape::new(1, 3, 8, 8), Shape::new(1, 3, 4, 4), Shape::new(1, 3, 2, 2)];
            let data = shapes
                .iter()
                .enumerate()
                .map(|(i, &s)| (format!("f{}", i + 1), random(s, &mut rng)))
                .collect();
            let inputs = inputs_for(data, &store, &mut rng);
            let case = Case {
                module: dem,
                n_data: 3,
                projections: vec![random(shapes[0], &mut rng), random(shapes[1], &mut rng)],
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
        Selector::Rfb => {
            let rfb = Rfb::new(&mut store, "rfb1", RfbConfig::new(4, 2))?;
            let s = Shape::new(1, 4, 8, 8);
            let inputs = inputs_for(vec![(x("input"), random(s, &mut rng))], &store, &mut rng);
            let case = Case {
                module: rfb,
                n_data: 1,
                projections: vec![random(s, &mut rng)],
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
        Selector::Dam => {
            let dam = DamWeights::new(&mut store, "dam", 4)?;
            // nonzero residual weights so the attention paths carry gradient
            store.value_mut(dam.gamma).data_mut()[0] = rng.gen_range(0.5..1.0);
            store.value_mut(dam.beta).data_mut()[0] = rng.gen_range(-1.0..-0.5);
            let s = Shape::new(1, 4, 3, 3);
            let inputs = inputs_for(vec![(x("input"), random(s, &mut rng))], &store, &mut rng);
            let case = Case {
                module: dam,
                n_data: 1,
                projections: vec![random(s, &mut rng)],
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
        Selector::Decoder => {
            let dec = Decoder::new(&mut store, "decoder", 3)?;
            let high = random(Shape::new(1, 3, 2, 2), &mut rng);
            let low = random(Shape::new(1, 3, 8, 8), &mut rng);
            let target = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_| f32::from(rng.gen_bool(0.5)));
            let inputs = inputs_for(vec![(x("high"), high), (x("low"), low)], &store, &mut rng);
            let case = Case {
                module: dec,
                n_data: 2,
                projections: vec![target],
            };
            run_case(&case, &inputs, opts, corrupt, &mut rng)
        }
    }
}

/// Every group of every selected module at every seed.
pub fn run_selector(selector: Selector, seeds: &[u64], opts: &CheckOptions) -> Result<Vec<ModuleCheck>> {
    let mut rows = Vec::new();
    for module in selector.modules() {
        for &seed in seeds {
            for report in check_module(module, seed, opts, None)? {
                let passed = report.passed(opts.tolerance);
                rows.push(ModuleCheck {
                    module,
                    seed,
                    report,
                    passed,
                });
            }
        }
    }
    Ok(rows)
}
