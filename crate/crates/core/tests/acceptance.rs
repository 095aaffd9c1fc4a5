//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `FANET_ACCEPTANCE_SKIP_TRAINING=1` reports criteria 6 and 7 as SKIP
//! instead of running the roughly half-hour training ladder.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fanet::autodiff::Tape;
use fanet::checkpoint::Checkpoint;
use fanet::config::RunConfig;
use fanet::dam::{channel_attention, dam_forward, position_attention, DamWeights};
use fanet::data::synth::{generate_split, SynthSpec};
use fanet::data::Sample;
use fanet::dem::Dem;
use fanet::encoder::{Encoder, EncoderConfig, PAPER_CHANNELS};
use fanet::fam::Fam;
use fanet::gradcheck::{run_selector, CheckOptions, Selector};
use fanet::metrics::{report, ConfusionCounts, MetricsReport};
use fanet::model::{Ablation, FaNet, ModelConfig};
use fanet::nn::{Conv2d, ParamStore};
use fanet::rfb::{Rfb, RfbConfig};
use fanet::train::Trainer;
use fanet::{Shape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Nested-loop f64 reference implementations on single images (C,H,W).

#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Map {
        Map {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    fn of(t: &Tensor<f32>, b: usize) -> Map {
        let [_, c, h, w] = t.shape().0;
        let mut m = Map::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    m.set(ci, y, x, t.at(b, ci, y, x) as f64);
                }
            }
        }
        m
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.v[(c * self.h + y) * self.w + x] = v;
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            v: self.v.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Map {
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    fn concat(parts: &[Map]) -> Map {
        let mut out = Map::zeros(parts.iter().map(|p| p.c).sum(), parts[0].h, parts[0].w);
        out.v = parts.iter().flat_map(|p| p.v.iter().copied()).collect();
        out
    }

    fn max_abs_diff(&self, t: &Tensor<f32>, b: usize) -> f64 {
        let other = Map::of(t, b);
        assert_eq!((self.c, self.h, self.w), (other.c, other.h, other.w));
        self.v.iter().zip(&other.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Stride-1 zero-padded convolution reading the layer's weights from `store`.
fn conv_ref(x: &Map, store: &ParamStore, conv: &Conv2d) -> Map {
    let w = &store.get(conv.weight).value;
    let bias = conv.bias.map(|b| &store.get(b).value);
    let [co, ci, kh, kw] = w.shape().0;
    assert_eq!(ci, x.c);
    let (p, d) = (conv.geom.padding as isize, conv.geom.dilation as isize);
    let mut out = Map::zeros(co, x.h, x.w);
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
                for i in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = y as isize - p + ky as isize * d;
                            let sx = xx as isize - p + kx as isize * d;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += w.at(o, i, ky, kx) as f64 * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(o, y, xx, acc);
            }
        }
    }
    out
}

/// Half-pixel bilinear resize, source coordinates clamped at the low edge.
fn upsample_ref(x: &Map, oh: usize, ow: usize) -> Map {
    let tap = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Map::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            let (y0, y1, ly) = tap(y, x.h, oh);
            for xx in 0..ow {
                let (x0, x1, lx) = tap(xx, x.w, ow);
                let top = x.at(c, y0, x0) * (1.0 - lx) + x.at(c, y0, x1) * lx;
                let bot = x.at(c, y1, x0) * (1.0 - lx) + x.at(c, y1, x1) * lx;
                out.set(c, y, xx, top * (1.0 - ly) + bot * ly);
            }
        }
    }
    out
}

fn fam_ref(f: &Map, store: &ParamStore, fam: &Fam) -> Map {
    let n = (f.h * f.w) as f64;
    let mut fc = f.clone();
    for c in 0..f.c {
        let (mut sum, mut max) = (0.0, f64::NEG_INFINITY);
        for y in 0..f.h {
            for x in 0..f.w {
                sum += f.at(c, y, x);
                max = max.max(f.at(c, y, x));
            }
        }
        let gate = sigmoid(sum / n + max);
        for y in 0..f.h {
            for x in 0..f.w {
                fc.set(c, y, x, gate * f.at(c, y, x));
            }
        }
    }
    let mut stats = Map::zeros(2, f.h, f.w);
    for y in 0..f.h {
        for x in 0..f.w {
            let vals: Vec<f64> = (0..f.c).map(|c| fc.at(c, y, x)).collect();
            stats.set(0, y, x, vals.iter().sum::<f64>() / f.c as f64);
            stats.set(1, y, x, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    let gate = conv_ref(&stats, store, &fam.spatial_conv).map(sigmoid);
    let mut out = fc.clone();
    for c in 0..f.c {
        for y in 0..f.h {
            for x in 0..f.w {
                out.set(c, y, x, gate.at(0, y, x) * fc.at(c, y, x));
            }
        }
    }
    out
}

fn softmax_rows(m: &mut [Vec<f64>]) {
    for row in m {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - top).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - top).exp() / z);
    }
}

/// Returns `(E, M, fuse(E + M))`.
fn dam_ref(a: &Map, store: &ParamStore, w: &DamWeights) -> (Map, Map, Map) {
    let n = a.h * a.w;
    let pos = |i: usize| (i / a.w, i % a.w);
    let q = conv_ref(a, store, &w.query);
    let k = conv_ref(a, store, &w.key);
    let v = conv_ref(a, store, &w.value);
    let gamma = store.get(w.gamma).value.data()[0] as f64;
    let beta = store.get(w.beta).value.data()[0] as f64;

    let mut s = vec![vec![0.0; n]; n];
    for (j, row) in s.iter_mut().enumerate() {
        let (yj, xj) = pos(j);
        for (i, cell) in row.iter_mut().enumerate() {
            let (yi, xi) = pos(i);
            *cell = (0..q.c).map(|r| q.at(r, yj, xj) * k.at(r, yi, xi)).sum();
        }
    }
    softmax_rows(&mut s);
    let mut e = Map::zeros(a.c, a.h, a.w);
    for c in 0..a.c {
        for (j, row) in s.iter().enumerate() {
            let (yj, xj) = pos(j);
            let att: f64 = row.iter().enumerate().map(|(i, sji)| sji * v.at(c, pos(i).0, pos(i).1)).sum();
            e.set(c, yj, xj, gamma * att + a.at(c, yj, xj));
        }
    }

    let mut x = vec![vec![0.0; a.c]; a.c];
    for (ca, row) in x.iter_mut().enumerate() {
        for (cb, cell) in row.iter_mut().enumerate() {
            *cell = (0..n).map(|i| a.at(ca, pos(i).0, pos(i).1) * a.at(cb, pos(i).0, pos(i).1)).sum();
        }
    }
    softmax_rows(&mut x);
    let mut m = Map::zeros(a.c, a.h, a.w);
    for (ca, row) in x.iter().enumerate() {
        for i in 0..n {
            let (y, xx) = pos(i);
            let att: f64 = row.iter().enumerate().map(|(cb, xab)| xab * a.at(cb, y, xx)).sum();
            m.set(ca, y, xx, beta * att + a.at(ca, y, xx));
        }
    }
    let out = conv_ref(&e.zip(&m, |p, q| p + q), store, &w.fuse);
    (e, m, out)
}

fn dem_ref(f1: &Map, f2: &Map, f3: &Map, store: &ParamStore, dem: &Dem) -> (Map, Map) {
    let c2 = conv_ref(&upsample_ref(f3, f2.h, f2.w), store, &dem.conv2);
    let d2 = f2.zip(&c2, |a, b| a * b);
    let c1 = conv_ref(&upsample_ref(&d2, f1.h, f1.w), store, &dem.conv1);
    (f1.zip(&c1, |a, b| a * b), d2)
}

fn rfb_ref(x: &Map, store: &ParamStore, rfb: &Rfb) -> Map {
    let short = conv_ref(x, store, &rfb.shortcut);
    let branches: Vec<Map> = rfb
        .branches
        .iter()
        .map(|br| conv_ref(&conv_ref(x, store, &br.reduce).map(|v| v.max(0.0)), store, &br.dilated))
        .collect();
    let fused = conv_ref(&Map::concat(&branches), store, &rfb.fuse);
    fused.zip(&short, |a, b| (a + b).max(0.0))
}

/// Replace every parameter, biases and residual scales included, with
/// uniform noise so no term of a reference is trivially zero.
fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        p.value = Tensor::uniform(p.value.shape(), -0.5, 0.5, r);
    }
}

fn run<T>(store: &ParamStore, f: impl FnOnce(&mut Tape<f32>, &fanet::nn::Binding) -> T) -> T {
    let mut tape = Tape::<f32>::new();
    let bind = store.bind_frozen(&mut tape);
    f(&mut tape, &bind)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let rows = run_selector(Selector::All, &[0, 1, 2], &CheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{} seed {} rel_err {:.2e}", r.module, r.report.name, r.seed, r.report.max_rel_error))
        .collect();
    let worst = rows.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} groups x 3 seeds, worst rel_err {worst:.2e} <= 1e-3, {elapsed:.1?}",
        rows.len() / 3
    ))
}

fn criterion_2() -> Outcome {
    let mut r = rng(20);
    for seed in 0..5 {
        let mut store = ParamStore::new(seed);
        let w = DamWeights::new(&mut store, "dam", 8).map_err(|e| e.to_string())?;
        let x = Tensor::uniform(Shape::new(2, 8, 3, 5), -3.0, 3.0, &mut r);
        let (e, m) = run(&store, |tape, bind| {
            let a = tape.constant(x.clone());
            let e = position_attention(tape, bind, a, &w).unwrap().output;
            let m = channel_attention(tape, bind, a, &w).unwrap().output;
            (tape.value(e).clone(), tape.value(m).clone())
        });
        ensure(e.data() == x.data(), "E differs from its input with gamma = 0")?;
        ensure(m.data() == x.data(), "M differs from its input with beta = 0")?;
    }

    let base = ModelConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let image = Tensor::uniform(Shape::new(2, 3, 64, 64), 0.0, 1.0, &mut r);
        let forward = |cfg: ModelConfig, identity: bool| -> Tensor<f32> {
            let mut store = ParamStore::new(seed);
            let net = FaNet::new(&mut store, cfg).unwrap();
            if identity {
                net.dam.as_ref().expect("dam enabled").set_identity_fuse(&mut store);
            }
            run(&store, |tape, bind| {
                let x = tape.constant(image.clone());
                let map = net.forward(tape, bind, x).unwrap();
                tape.value(map.probabilities).clone()
            })
        };
        let with = forward(base.clone(), true);
        let without = forward(
            ModelConfig {
                enable_dam: false,
                ..base.clone()
            },
            false,
        );
        worst = worst.max(with.max_abs_diff(&without));
    }
    ensure(worst < 1e-6, format!("toggling DAM moved the output by {worst:.3e}"))?;
    Ok(format!("E = M = input bit-exactly; DAM toggle max-abs {worst:.2e} < 1e-6"))
}

fn criterion_3() -> Outcome {
    let mut r = rng(30);
    let mut worst = [0.0f64; 4];
    for trial in 0..25u64 {
        let b = r.gen_range(1..=2);
        let c = r.gen_range(2..=9);
        let h = r.gen_range(2..=7);
        let w = r.gen_range(2..=7);
        let x = Tensor::uniform(Shape::new(b, c, h, w), -2.0, 2.0, &mut r);

        let mut store = ParamStore::new(trial);
        let fam = Fam::new(&mut store, "fam").unwrap();
        let dam = DamWeights::new(&mut store, "dam", c).unwrap();
        let dem = Dem::new(&mut store, "dem", c).unwrap();
        let rfb = Rfb::new(&mut store, "rfb", RfbConfig::new(c, r.gen_range(1..=4))).unwrap();
        randomize(&mut store, &mut r);

        let f1 = Tensor::uniform(Shape::new(b, c, 4 * h, 4 * w), -1.0, 1.0, &mut r);
        let f2 = Tensor::uniform(Shape::new(b, c, 2 * h, 2 * w), -1.0, 1.0, &mut r);
        let f3 = Tensor::uniform(Shape::new(b, c, h, w), -1.0, 1.0, &mut r);

        let (yf, (ye, ym, yd), (d1, d2), yr) = run(&store, |tape, bind| {
            let xv = tape.constant(x.clone());
            let yf = fam.forward(tape, bind, xv).unwrap();
            let e = position_attention(tape, bind, xv, &dam).unwrap().output;
            let m = channel_attention(tape, bind, xv, &dam).unwrap().output;
            let yd = dam_forward(tape, bind, xv, &dam).unwrap().output;
            let (v1, v2, v3) = (tape.constant(f1.clone()), tape.constant(f2.clone()), tape.constant(f3.clone()));
            let fused = dem.fuse(tape, bind, v1, v2, v3).unwrap();
            let yr = rfb.forward(tape, bind, xv).unwrap();
            let get = |v| tape.value(v).clone();
            (get(yf), (get(e), get(m), get(yd)), (get(fused.d1), get(fused.d2)), get(yr))
        });

        for bi in 0..b {
            let xm = Map::of(&x, bi);
            worst[0] = worst[0].max(fam_ref(&xm, &store, &fam).max_abs_diff(&yf, bi));
            let (e, m, out) = dam_ref(&xm, &store, &dam);
            worst[1] = worst[1]
                .max(e.max_abs_diff(&ye, bi))
                .max(m.max_abs_diff(&ym, bi))
                .max(out.max_abs_diff(&yd, bi));
            let (r1, r2) = dem_ref(&Map::of(&f1, bi), &Map::of(&f2, bi), &Map::of(&f3, bi), &store, &dem);
            worst[2] = worst[2].max(r1.max_abs_diff(&d1, bi)).max(r2.max_abs_diff(&d2, bi));
            worst[3] = worst[3].max(rfb_ref(&xm, &store, &rfb).max_abs_diff(&yr, bi));
        }
    }
    let names = ["FAM", "DAM", "DEM", "RFB"];
    for (n, w) in names.iter().zip(worst) {
        ensure(w <= 1e-5, format!("{n} differs from its reference by {w:.3e}"))?;
    }
    Ok(format!(
        "25 inputs; max-abs FAM {:.1e}, DAM {:.1e}, DEM {:.1e}, RFB {:.1e} (<= 1e-5)",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn criterion_4() -> Outcome {
    let encode = |cfg: EncoderConfig, n: usize| -> Result<Vec<Shape>, String> {
        let mut store = ParamStore::new(0);
        let enc = Encoder::new(&mut store, cfg).map_err(|e| e.to_string())?;
        let img = Tensor::uniform(Shape::new(1, 3, n, n), 0.0, 1.0, &mut rng(n as u64));
        run(&store, |tape, bind| {
            let x = tape.constant(img);
            let out = enc.forward(tape, bind, x).map_err(|e| e.to_string())?;
            Ok(out.features.levels.iter().map(|&v| tape.shape(v)).collect())
        })
    };
    let expect = |ch: [usize; 4], n: usize| -> Vec<Shape> {
        (1..=4).map(|i| Shape::new(1, ch[i - 1], n >> (i + 1), n >> (i + 1))).collect()
    };
    for n in [32, 64, 96] {
        let cfg = EncoderConfig::default();
        let ch = cfg.channels;
        let got = encode(cfg, n)?;
        ensure(got == expect(ch, n), format!("{n}x{n}: got {got:?}"))?;
    }
    let got = encode(EncoderConfig::paper(), 64)?;
    ensure(got == expect(PAPER_CHANNELS, 64), format!("paper channels at 64: got {got:?}"))?;
    ensure(encode(EncoderConfig::default(), 48).is_err(), "48x48 input was accepted")?;
    Ok("32/64/96 give H/2^(i+1) at every level; channels 64/128/320/512 verified at 64".into())
}

fn criterion_5() -> Outcome {
    let counts = |tp, fp, fn_, tn| ConfusionCounts { tp, fp, fn_, tn };
    let r = report(counts(1, 1, 1, 0));
    ensure(
        (r.precision, r.recall, r.f1, r.iou) == (0.5, 0.5, 0.5, 1.0 / 3.0),
        format!("tp=fp=fn=1 gave {r:?}"),
    )?;
    let r = report(counts(7, 0, 0, 9));
    ensure((r.precision, r.recall, r.f1, r.iou) == (1.0, 1.0, 1.0, 1.0), "perfect prediction")?;
    let c = ConfusionCounts::from_masks(&[1, 1, 0, 0, 1, 0], &[1, 0, 1, 0, 1, 0]).map_err(|e| e.to_string())?;
    ensure(c == counts(2, 1, 1, 2), format!("hand-counted masks gave {c:?}"))?;
    let r = report(counts(0, 0, 0, 5));
    ensure(r.iou == 0.0 && r.degenerate.iou && r.degenerate.precision, "empty masks not flagged")?;

    let mut g = rng(50);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = counts(g.gen_range(1..100_000), g.gen_range(0..100_000), g.gen_range(0..100_000), g.gen_range(0..100_000));
        let r = report(c);
        worst = worst.max((r.iou - r.f1 / (2.0 - r.f1)).abs());
    }
    ensure(worst < 1e-12, format!("iou vs f1/(2-f1) off by {worst:.3e}"))?;

    let row = [0.7335, 0.8463, 0.8645, 0.8287];
    let r = MetricsReport {
        iou: row[0],
        f1: row[1],
        precision: row[2],
        recall: row[3],
        ..report(counts(1, 0, 0, 0))
    };
    let text = r.to_text();
    let back = MetricsReport::parse_text_metrics(&text).map_err(|e| e.to_string())?;
    let shown: Vec<&str> = text.lines().take(4).map(|l| l.split_once('=').unwrap().1).collect();
    ensure(shown == ["73.35", "84.63", "86.45", "82.87"], format!("formatted as {shown:?}"))?;
    ensure(
        back.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12),
        format!("parsed back as {back:?}"),
    )?;
    Ok(format!("hand counts exact; identity max error {worst:.1e} over 1e4 counts; 73.35/84.63/86.45/82.87 round-trips"))
}

struct RunResult {
    train_iou: f64,
    test_iou: f64,
    elapsed: Duration,
}

fn ladder_config(ablation: Ablation, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ablation.apply(cfg.model);
    cfg.train.epochs = 300;
    cfg.train.decay_every = 0;
    cfg.train.seed = seed;
    cfg
}

fn train_and_score(cfg: RunConfig, train: &[Sample], test: &[Sample]) -> Result<RunResult, String> {
    let start = Instant::now();
    let epochs = cfg.train.epochs;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    for _ in 0..epochs {
        t.train_epoch(train, None).map_err(|e| e.to_string())?;
    }
    Ok(RunResult {
        train_iou: t.evaluate(train).map_err(|e| e.to_string())?.iou,
        test_iou: t.evaluate(test).map_err(|e| e.to_string())?.iou,
        elapsed: start.elapsed(),
    })
}

fn synthetic_benchmark() -> (Vec<Sample>, Vec<Sample>) {
    let spec = SynthSpec::default();
    assert_eq!((spec.canvas, spec.train_images, spec.test_images), (64, 64, 8));
    assert!(spec.occluders.1 > 0);
    generate_split(&spec).expect("default synthetic spec")
}

fn criterion_6(data: &(Vec<Sample>, Vec<Sample>)) -> (Outcome, Option<f64>) {
    let r = match train_and_score(ladder_config(Ablation::Full, 0), &data.0, &data.1) {
        Ok(r) => r,
        Err(e) => return (Err(e), None),
    };
    let msg = format!(
        "full model, 300 epochs, lr 1e-4: train IoU {:.4} (>= 0.90), held-out IoU {:.4} (>= 0.80), {:.0?}",
        r.train_iou, r.test_iou, r.elapsed
    );
    let ok = r.train_iou >= 0.90 && r.test_iou >= 0.80 && r.elapsed <= Duration::from_secs(1800);
    (if ok { Ok(msg) } else { Err(msg) }, Some(r.test_iou))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7(data: &(Vec<Sample>, Vec<Sample>), full_seed0: Option<f64>) -> Outcome {
    let mut medians = Vec::new();
    let mut detail = Vec::new();
    for ablation in Ablation::LADDER {
        let mut scores = Vec::new();
        for seed in 0..3 {
            let iou = match (ablation, seed, full_seed0) {
                (Ablation::Full, 0, Some(v)) => v,
                _ => train_and_score(ladder_config(ablation, seed), &data.0, &data.1)?.test_iou,
            };
            scores.push(iou);
        }
        let m = median(scores.clone());
        detail.push(format!(
            "{} {:.4} [{}]",
            ablation.name(),
            m,
            scores.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(" ")
        ));
        medians.push(m);
    }
    let ordered = medians.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let msg = format!("held-out IoU medians: {}", detail.join(", "));
    if ordered {
        Ok(msg)
    } else {
        Err(format!("{msg}; ladder drops by more than 0.01"))
    }
}

fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.train.decay_every = 2;
    cfg.synth.train_images = 8;
    cfg.synth.test_images = 2;
    cfg
}

fn trajectory(t: &mut Trainer, data: &[Sample], epochs: usize) -> Result<Vec<f32>, String> {
    let mut losses = Vec::new();
    for _ in 0..epochs {
        losses.extend(t.train_epoch(data, None).map_err(|e| e.to_string())?.batch_losses);
    }
    Ok(losses)
}

fn criterion_8() -> Outcome {
    let cfg = small_run_config(8);
    let (train, _) = generate_split(&cfg.synth).map_err(|e| e.to_string())?;
    let (again, _) = generate_split(&cfg.synth).map_err(|e| e.to_string())?;
    ensure(
        train.iter().zip(&again).all(|(a, b)| a.image == b.image && a.mask == b.mask),
        "synthetic data differs between generations",
    )?;

    let fresh = || Trainer::new(cfg.clone()).map_err(|e| e.to_string());
    let mut a = fresh()?;
    let mut b = fresh()?;
    let la = trajectory(&mut a, &train, 4)?;
    let lb = trajectory(&mut b, &train, 4)?;
    ensure(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()), "repeated runs diverge")?;
    ensure(a.checkpoint() == b.checkpoint(), "repeated runs end with different state")?;

    let mut head = fresh()?;
    let mut resumed_losses = trajectory(&mut head, &train, 2)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    head.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let mut tail = Trainer::from_checkpoint(Checkpoint::load(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    resumed_losses.extend(trajectory(&mut tail, &train, 2)?);
    ensure(
        la.len() == resumed_losses.len() && la.iter().zip(&resumed_losses).all(|(x, y)| x.to_bits() == y.to_bits()),
        "resumed loss trajectory differs from the uninterrupted one",
    )?;
    ensure(tail.checkpoint() == a.checkpoint(), "resumed run ends with different weights")?;
    Ok(format!("{} batch losses bit-identical across reruns and a save/resume at epoch 2", la.len()))
}

fn criterion_9() -> Outcome {
    let mut r = rng(90);
    let shape = Shape::new(2, 1, 6, 7);
    let logits = Tensor::<f64>::uniform(shape, -4.0, 4.0, &mut r);
    let target = Tensor::<f64>::from_fn(shape, |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    let mut tape = Tape::<f64>::new();
    let z = tape.param(logits.clone());
    let loss = tape.bce_with_logits(z, &target, fanet::decoder::BCE_EPS).map_err(|e| e.to_string())?;
    let grad = tape.backward(loss).map_err(|e| e.to_string())?.get(z).ok_or("no gradient for logits")?;
    let n = shape.numel() as f64;
    let worst = logits
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data())
        .map(|((&z, &t), &g)| (g - (sigmoid(z) - t) / n).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("gradient off the closed form by {worst:.3e}"))?;

    let mut tape = Tape::<f32>::new();
    let z = tape.constant(Tensor::zeros(shape));
    let t = Tensor::<f32>::from_fn(shape, |[b, _, y, x]| ((b + y + x) % 2) as f32);
    let loss = tape.bce_with_logits(z, &t, fanet::decoder::BCE_EPS).map_err(|e| e.to_string())?;
    let l = tape.value(loss).data()[0] as f64;
    ensure((l - std::f64::consts::LN_2).abs() <= 1e-6, format!("p = 0.5 gave loss {l}"))?;
    Ok(format!("dL/dz vs (p - t)/count max-abs {worst:.1e}; p = 0.5 loss {l:.7}"))
}

fn main() -> ExitCode {
    let skip_training = std::env::var("FANET_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let mut results: Vec<(u32, Option<Outcome>)> = vec![
        (1, Some(criterion_1())),
        (2, Some(criterion_2())),
        (3, Some(criterion_3())),
        (4, Some(criterion_4())),
        (5, Some(criterion_5())),
    ];
    if skip_training {
        results.push((6, None));
        results.push((7, None));
    } else {
        let data = synthetic_benchmark();
        let (six, full_seed0) = criterion_6(&data);
        results.push((6, Some(six)));
        results.push((7, Some(criterion_7(&data, full_seed0))));
    }
    results.push((8, Some(criterion_8())));
    results.push((9, Some(criterion_9())));

    let mut failures = 0;
    for (n, outcome) in &results {
        match outcome {
            Some(Ok(msg)) => println!("criterion {n}: PASS  {msg}"),
            Some(Err(msg)) => {
                failures += 1;
                println!("criterion {n}: FAIL  {msg}");
            }
            None => println!("criterion {n}: SKIP  FANET_ACCEPTANCE_SKIP_TRAINING=1"),
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
