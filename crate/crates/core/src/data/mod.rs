//! Dataset ingestion: manifests, tiling, batching, augmentation and the
//! synthetic building generator.

pub mod augment;
pub mod png_io;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One image with its mask: `(1,3,H,W)` in `[0,1]` and `(1,1,H,W)` in `{0,1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (si, sm) = (image.shape(), mask.shape());
        if si.b() != 1 || si.c() != 3 {
            return Err(Error::shape("sample", "C", format!("image must be (1,3,H,W), got {si}")));
        }
        if sm.b() != 1 || sm.c() != 1 {
            return Err(Error::shape("sample", "C", format!("mask must be (1,1,H,W), got {sm}")));
        }
        if si.h() != sm.h() || si.w() != sm.w() {
            return Err(Error::Validation(format!("image {si} and mask {sm} differ in size")));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation("mask is not binary".into()));
        }
        Ok(Sample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }
}

/// Stack samples into `(B,3,S,S)` images and `(B,1,S,S)` masks.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Crop `[y0, y0+h) x [x0, x0+w)` from every plane.
pub fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.b(), s.c(), h, w), |[b, c, y, x]| t.at(b, c, y0 + y, x0 + x))
}

/// Top-left corners of the non-overlapping `size x size` grid that fits in
/// `h x w`; partial tiles at the right and bottom are dropped.
pub fn tile_origins(h: usize, w: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if size == 0 {
        return out;
    }
    for ty in 0..h / size {
        for tx in 0..w / size {
            out.push((ty * size, tx * size));
        }
    }
    out
}

/// Write each `(B,C,size,size)` tile back at its origin in an `h x w` canvas.
/// Where tiles overlap, the later tile wins.
pub fn stitch(tiles: &[Tensor<f32>], origins: &[(usize, usize)], h: usize, w: usize) -> Result<Tensor<f32>> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Validation("nothing to stitch".into()))?
        .shape();
    if tiles.len() != origins.len() {
        return Err(Error::Validation(format!("{} tiles for {} origins", tiles.len(), origins.len())));
    }
    let mut out = Tensor::zeros(Shape::new(first.b(), first.c(), h, w));
    for (t, &(y0, x0)) in tiles.iter().zip(origins) {
        let s = t.shape();
        if s.b() != first.b() || s.c() != first.c() || y0 + s.h() > h || x0 + s.w() > w {
            return Err(Error::shape("stitch", "H", format!("tile {s} at ({y0},{x0}) leaves the {h}x{w} canvas")));
        }
        for b in 0..s.b() {
            for c in 0..s.c() {
                for y in 0..s.h() {
                    for x in 0..s.w() {
                        out.set(b, c, y0 + y, x0 + x, t.at(b, c, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tile(sample: &Sample, size: usize) -> Vec<Sample> {
    let origins = tile_origins(sample.height(), sample.width(), size);
    if origins.is_empty() {
        log::warn!(
            "{}x{} image is smaller than one {size}x{size} tile; skipped",
            sample.height(),
            sample.width()
        );
    }
    origins
        .into_iter()
        .map(|(y, x)| Sample {
            image: crop(&sample.image, y, x, size, size),
            mask: crop(&sample.mask, y, x, size, size),
        })
        .collect()
}

/// Independent random stream for item `index` under `seed`, so the value a
/// sample sees never depends on the order samples are processed in.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// `image<TAB>mask<TAB>split` records. Relative paths resolve against the
/// manifest's directory; blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 3 tab-separated fields, found {}", no + 1, fields.len()),
                ));
            }
            let split = Split::parse(fields[2].trim()).ok_or_else(|| {
                Error::format(origin, format!("line {}: unknown split {:?}", no + 1, fields[2]))
            })?;
            entries.push(ManifestEntry {
                image: base.join(fields[0]),
                mask: base.join(fields[1]),
                split,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Paths are written relative to `base` when they lie beneath it.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.mask), e.split))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Read every entry of `split` and cut it into `tile_size` tiles.
pub fn load_tiles(manifest: &Manifest, split: Split, tile_size: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for e in manifest.split(split) {
        let image = png_io::read_rgb(&e.image)?;
        let mask = png_io::read_mask(&e.mask)?;
        let sample = Sample::new(image, mask).map_err(|err| match err {
            Error::Validation(r) => Error::Validation(format!("{}: {r}", e.image.display())),
            other => other,
        })?;
        out.extend(tile(&sample, tile_size));
    }
    Ok(out)
}
