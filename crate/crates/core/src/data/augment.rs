//! Random horizontal flip (image and mask together) and random Gaussian blur
//! (image only).

use rand::Rng;

use super::{sample_rng, Sample};
use crate::tensor::Tensor;

pub const BLUR_SIGMA: (f64, f64) = (0.1, 2.0);

/// Decisions drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub blur_sigma: Option<f64>,
}

impl AugmentPlan {
    pub fn draw(rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(0.5);
        let blur = rng.gen_bool(0.5);
        let sigma = rng.gen_range(BLUR_SIGMA.0..=BLUR_SIGMA.1);
        AugmentPlan {
            flip,
            blur_sigma: blur.then_some(sigma),
        }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let mut out = sample.clone();
        if self.flip {
            out.image = flip_horizontal(&out.image);
            out.mask = flip_horizontal(&out.mask);
        }
        if let Some(sigma) = self.blur_sigma {
            out.image = gaussian_blur(&out.image, sigma);
        }
        out
    }
}

/// Augment sample `index` of an epoch; a pure function of `(seed, index)`.
pub fn augment(sample: &Sample, seed: u64, index: u64) -> Sample {
    AugmentPlan::draw(&mut sample_rng(seed, index)).apply(sample)
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let mut out = t.clone();
    let w = t.shape().w().max(1);
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Normalized taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable blur of every plane with reflected borders.
pub fn gaussian_blur(t: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let mut out = t.clone();
    let mut tmp = vec![0.0f64; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = reflect(x as i64 + j as i64 - r, w);
                    acc += kv * plane[y * w + sx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as i64 + j as i64 - r, h);
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Shape;

    fn random_sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| f32::from(rng.gen_bool(0.4)));
        Sample { image, mask }
    }

    #[test]
    fn flip_is_involution() {
        let s = random_sample(1);
        assert_eq!(flip_horizontal(&flip_horizontal(&s.image)), s.image);
    }

    #[test]
    fn blur_keeps_constant_image() {
        let t = Tensor::full(Shape::new(1, 3, 9, 7), 0.37f32);
        for sigma in [0.1, 0.7, 2.0] {
            assert_eq!(gaussian_blur(&t, sigma), t);
        }
    }

    #[test]
    fn kernel_radius_and_mass() {
        assert_eq!(gaussian_kernel(0.1).len(), 3);
        assert_eq!(gaussian_kernel(2.0).len(), 13);
        assert!((gaussian_kernel(1.3).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn augmentation_is_seed_determined_and_label_preserving() {
        let s = random_sample(2);
        let mut saw_flip = false;
        let mut saw_blur = false;
        for i in 0..32 {
            let a = augment(&s, 5, i);
            assert_eq!(a, augment(&s, 5, i));
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let plan = AugmentPlan::draw(&mut sample_rng(5, i));
            saw_flip |= plan.flip;
            saw_blur |= plan.blur_sigma.is_some();
            let expect_mask = if plan.flip { flip_horizontal(&s.mask) } else { s.mask.clone() };
            assert_eq!(a.mask, expect_mask);
        }
        assert!(saw_flip && saw_blur);
    }
}
