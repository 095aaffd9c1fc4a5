//! Synthetic overhead scenes: bright rectangular roofs on a textured ground,
//! partly hidden by dark elliptical trees and shadows that appear in the
//! image but not in the mask.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{sample_rng, Manifest, ManifestEntry, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub canvas: usize,
    /// Inclusive range of buildings per image.
    pub buildings: (usize, usize),
    /// Inclusive range of building side lengths in pixels.
    pub size: (usize, usize),
    pub rotation: bool,
    pub occluders: (usize, usize),
    /// Inclusive range of occluder radii in pixels.
    pub occluder_radius: (usize, usize),
    pub occluder_opacity: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            canvas: 64,
            buildings: (1, 4),
            size: (12, 28),
            rotation: false,
            occluders: (0, 2),
            occluder_radius: (3, 7),
            occluder_opacity: 0.6,
            noise: 0.03,
            seed: 0,
            train_images: 64,
            test_images: 8,
        }
    }
}

fn check_range(field: &str, r: (usize, usize)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::config(field, format!("empty range {}..={}", r.0, r.1)));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::config("synth.canvas", "must be >= 1"));
        }
        check_range("synth.buildings", self.buildings)?;
        check_range("synth.size", self.size)?;
        check_range("synth.occluders", self.occluders)?;
        check_range("synth.occluder_radius", self.occluder_radius)?;
        if self.size.0 == 0 || self.size.1 > self.canvas {
            return Err(Error::config(
                "synth.size",
                format!("sides must lie in 1..={}", self.canvas),
            ));
        }
        if !(0.0..=1.0).contains(&self.occluder_opacity) {
            return Err(Error::config("synth.occluder_opacity", "must lie in [0,1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synth.noise", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A possibly rotated rectangle. A pixel belongs to it when its centre does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub angle: f64,
    pub shade: f64,
}

impl Building {
    /// Axis-aligned rectangle covering pixel columns `x0..x0+w` and rows `y0..y0+h`.
    pub fn axis_aligned(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Building {
            cx: x0 as f64 + w as f64 / 2.0,
            cy: y0 as f64 + h as f64 / 2.0,
            half_w: w as f64 / 2.0,
            half_h: h as f64 / 2.0,
            angle: 0.0,
            shade: 0.85,
        }
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        let (dx, dy) = (px as f64 + 0.5 - self.cx, py as f64 + 0.5 - self.cy);
        let (u, v) = if self.angle == 0.0 {
            (dx, dy)
        } else {
            let (s, c) = self.angle.sin_cos();
            (c * dx + s * dy, -s * dx + c * dy)
        };
        u >= -self.half_w && u < self.half_w && v >= -self.half_h && v < self.half_h
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Ground colour drawn over the scene, e.g. dark green for trees.
    pub color: [f64; 3],
}

impl Occluder {
    fn contains(&self, px: usize, py: usize) -> bool {
        let dx = (px as f64 + 0.5 - self.cx) / self.rx;
        let dy = (py as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub buildings: Vec<Building>,
    pub occluders: Vec<Occluder>,
}

fn draw_scene(spec: &SynthSpec, rng: &mut impl Rng) -> Scene {
    let n = spec.canvas;
    let count = rng.gen_range(spec.buildings.0..=spec.buildings.1);
    let mut buildings = Vec::with_capacity(count);
    for _ in 0..count {
        let w = rng.gen_range(spec.size.0..=spec.size.1);
        let h = rng.gen_range(spec.size.0..=spec.size.1);
        let x0 = rng.gen_range(0..=n - w);
        let y0 = rng.gen_range(0..=n - h);
        let mut b = Building::axis_aligned(x0, y0, w, h);
        if spec.rotation {
            b.angle = rng.gen_range(-0.6..0.6);
        }
        b.shade = rng.gen_range(0.72..0.95);
        buildings.push(b);
    }
    let count = rng.gen_range(spec.occluders.0..=spec.occluders.1);
    let mut occluders = Vec::with_capacity(count);
    for _ in 0..count {
        let rx = rng.gen_range(spec.occluder_radius.0..=spec.occluder_radius.1).max(1) as f64;
        let ry = rng.gen_range(spec.occluder_radius.0..=spec.occluder_radius.1).max(1) as f64;
        // anchor on a building edge when there is one, so occlusion actually happens
        let (cx, cy) = match buildings.get(rng.gen_range(0..buildings.len().max(1))) {
            Some(b) => (
                b.cx + rng.gen_range(-1.0..=1.0) * b.half_w,
                b.cy + rng.gen_range(-1.0..=1.0) * b.half_h,
            ),
            None => (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64)),
        };
        let color = if rng.gen_bool(0.5) {
            [0.10, 0.28, 0.08] // tree
        } else {
            [0.08, 0.08, 0.10] // shadow
        };
        occluders.push(Occluder { cx, cy, rx, ry, color });
    }
    Scene { buildings, occluders }
}

/// Render `scene`; the mask ignores occluders.
pub fn render(spec: &SynthSpec, scene: &Scene, rng: &mut impl Rng) -> Sample {
    let n = spec.canvas;
    let base = [
        rng.gen_range(0.30..0.42),
        rng.gen_range(0.36..0.48),
        rng.gen_range(0.26..0.36),
    ];
    let (fx, fy, phase) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.3));
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut image = Tensor::zeros(Shape::new(1, 3, n, n));
    let mut mask = Tensor::zeros(Shape::new(1, 1, n, n));
    for y in 0..n {
        for x in 0..n {
            let texture = 0.05 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
            let mut px = base.map(|c| c + texture);
            if let Some(b) = scene.buildings.iter().rev().find(|b| b.contains(x, y)) {
                px = [b.shade, b.shade * 0.97, b.shade * 0.93];
                mask.set(0, 0, y, x, 1.0);
            }
            for o in &scene.occluders {
                if o.contains(x, y) {
                    let a = spec.occluder_opacity;
                    for (c, oc) in px.iter_mut().zip(o.color) {
                        *c = (1.0 - a) * *c + a * oc;
                    }
                }
            }
            for (c, v) in px.iter().enumerate() {
                let v = v + noise.sample(rng);
                image.set(0, c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Sample { image, mask }
}

/// Image `index` of the stream defined by `spec.seed`.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> Sample {
    let mut rng = sample_rng(spec.seed, index);
    let scene = draw_scene(spec, &mut rng);
    render(spec, &scene, &mut rng)
}

/// In-memory train and test sets; test images continue the training stream.
pub fn generate_split(spec: &SynthSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let train = (0..spec.train_images as u64).map(|i| generate_sample(spec, i)).collect();
    let test = (0..spec.test_images as u64)
        .map(|i| generate_sample(spec, spec.train_images as u64 + i))
        .collect();
    Ok((train, test))
}

/// Write PNG pairs under `dir/images` and `dir/masks` plus `dir/manifest.tsv`.
pub fn generate_synthetic(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    let (train, test) = generate_split(spec)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Manifest::default();
    let all = train
        .iter()
        .map(|s| (s, Split::Train))
        .chain(test.iter().map(|s| (s, Split::Test)));
    for (i, (s, split)) in all.enumerate() {
        let image = dir.join("images").join(format!("{i:05}.png"));
        let mask = dir.join("masks").join(format!("{i:05}.png"));
        super::png_io::write_rgb(&image, &s.image)?;
        super::png_io::write_mask(&mask, &s.mask)?;
        manifest.entries.push(ManifestEntry { image, mask, split });
    }
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
