use std::fs::File;
use std::path::Path;
use std::process::{Command, Output};

use fanet::data::png_io::write_rgb;
use fanet::tensor::load_ftns;
use fanet::{Shape, Tensor};

fn fanet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fanet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("FANET_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

const TINY: &str = "\
synth.train_images=4
synth.test_images=2
train.epochs=1
";

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&fanet(&[], d)), 1);
    assert_eq!(code(&fanet(&["--help"], d)), 0);
    assert_eq!(code(&fanet(&["gradcheck", "unet"], d)), 1);
    assert_eq!(code(&fanet(&["gradcheck", "fam", "--seed", "0"], d)), 0);

    write(d, "typo.cfg", "train.lrr=1e-4\n");
    let out = fanet(&["synth", "--config", "typo.cfg"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lrr"));

    let out = fanet(&["eval", "--checkpoint", "missing.ckpt", "--manifest", "missing.tsv"], d);
    assert_eq!(code(&out), 3);

    write(d, "junk.ckpt", "not a checkpoint");
    write(d, "m.tsv", "");
    assert_eq!(code(&fanet(&["eval", "--checkpoint", "junk.ckpt", "--manifest", "m.tsv"], d)), 3);

    let out = Command::new(env!("CARGO_BIN_EXE_fanet"))
        .args(["gradcheck", "fam"])
        .env("FANET_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "tiny.cfg", TINY);
    assert_eq!(code(&fanet(&["synth", "--config", "tiny.cfg", "--out", "data"], d)), 0);
    let out = fanet(&["train", "--config", "tiny.cfg", "--manifest", "data/manifest.tsv", "--out", "run"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.ckpt", "last.ckpt", "train_log.tsv"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }

    let eval = |out_dir: &str| {
        let out = fanet(
            &["eval", "--checkpoint", "run/last.ckpt", "--manifest", "data/manifest.tsv", "--out", out_dir],
            d,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(d.join(out_dir).join("report.json")).unwrap(),
            String::from_utf8(out.stdout).unwrap(),
        )
    };
    let (a, text) = eval("eval1");
    let (b, _) = eval("eval2");
    assert_eq!(a, b, "eval is not deterministic");
    assert!(text.starts_with("iou="));

    // a config describing a different model is refused
    write(d, "other.cfg", "model.decoder_width=8\n");
    let out = fanet(
        &["eval", "--checkpoint", "run/last.ckpt", "--manifest", "data/manifest.tsv", "--config", "other.cfg"],
        d,
    );
    assert_eq!(code(&out), 1);

    let image = Tensor::uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, &mut rand::thread_rng());
    write_rgb(&d.join("tile.png"), &image).unwrap();
    let out = fanet(&["predict", "--checkpoint", "run/last.ckpt", "--out", "pred", "tile.png"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(d.join("pred/mask.png")).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (64, 64));
    assert!(buf[..info.buffer_size()].iter().all(|&v| v == 0 || v == 255));

    let out = fanet(&["predict", "--checkpoint", "run/last.ckpt", "--threshold", "1.5", "tile.png"], d);
    assert_eq!(code(&out), 1);
}

#[test]
fn untrained_model_maps_gray_to_a_flat_interior() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let size = 1024;
    write(d, "flat.cfg", &format!("train.epochs=0\nmodel.tile_size={size}\nsynth.train_images=1\nsynth.canvas=64\n"));
    let out = fanet(&["train", "--config", "flat.cfg", "--out", "run"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    write_rgb(&d.join("gray.png"), &Tensor::full(Shape::new(1, 3, size, size), 0.5)).unwrap();
    let out = fanet(&["predict", "--checkpoint", "run/last.ckpt", "--out", "pred", "gray.png"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let p = load_ftns(&d.join("pred/probabilities.ftns")).unwrap();
    assert_eq!(p.shape(), Shape::new(1, 1, size, size));

    // zero padding reaches at most ~9 cells of the 1/32 grid plus the fine
    // stream's margin; everything further than 384 pixels from a border is interior
    let margin = 384;
    let centre = p.at(0, 0, size / 2, size / 2);
    for y in margin..size - margin {
        for x in margin..size - margin {
            let v = p.at(0, 0, y, x);
            assert!((v - centre).abs() <= 1e-6, "({y},{x}): {v} vs {centre}");
        }
    }
}
