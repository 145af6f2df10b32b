use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;

/// Paired augmentation. Flips and crops act identically on both images and the
/// label; photometric jitter touches images only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPolicy {
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
    /// Side of a random square crop; `None` keeps the full image.
    pub crop: Option<usize>,
    /// Additive brightness jitter amplitude.
    pub brightness: f64,
    /// Multiplicative contrast jitter amplitude around 1.
    pub contrast: f64,
    /// Saturation jitter amplitude around 1.
    pub saturation: f64,
    /// Draw photometric parameters independently for the two images.
    pub independent_photometric: bool,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop: None,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            independent_photometric: true,
        }
    }
}

impl AugPolicy {
    /// No-op policy.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop: None,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            independent_photometric: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Photometric {
    brightness: f32,
    contrast: f32,
    saturation: f32,
}

impl Photometric {
    fn draw(policy: &AugPolicy, rng: &mut impl Rng) -> Self {
        let mut jitter = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) as f32 } else { 0.0 };
        Self {
            brightness: jitter(policy.brightness),
            contrast: 1.0 + jitter(policy.contrast),
            saturation: 1.0 + jitter(policy.saturation),
        }
    }

    fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0 && self.saturation == 1.0
    }

    fn apply(&self, image: &mut [f32], hw: usize) {
        if self.is_identity() {
            return;
        }
        let mean = image.iter().sum::<f32>() / image.len().max(1) as f32;
        for p in 0..hw {
            let gray = (image[p] + image[hw + p] + image[2 * hw + p]) / 3.0;
            for c in 0..3 {
                let v = &mut image[c * hw + p];
                let saturated = gray + self.saturation * (*v - gray);
                *v = ((saturated - mean) * self.contrast + mean + self.brightness).clamp(0.0, 1.0);
            }
        }
    }
}

fn flip_planes<V: Copy>(data: &mut [V], planes: usize, h: usize, w: usize, horizontal: bool) {
    for c in 0..planes {
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        if horizontal {
            plane.chunks_mut(w).for_each(|row| row.reverse());
        } else {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Random geometric and photometric transform of one sample.
pub fn augment(sample: &Sample, policy: &AugPolicy, rng: &mut impl Rng) -> Sample {
    let mut out = match policy.crop {
        Some(size) if size < sample.height || size < sample.width => {
            let ch = size.min(sample.height);
            let cw = size.min(sample.width);
            let top = rng.gen_range(0..=sample.height - ch);
            let left = rng.gen_range(0..=sample.width - cw);
            sample.crop(top, left, ch, cw, sample.id.clone())
        }
        _ => sample.clone(),
    };
    let (h, w) = (out.height, out.width);
    for horizontal in [true, false] {
        if policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob.min(1.0)) {
            flip_planes(&mut out.x0, 3, h, w, horizontal);
            flip_planes(&mut out.x1, 3, h, w, horizontal);
            flip_planes(&mut out.label, 1, h, w, horizontal);
        }
    }
    let first = Photometric::draw(policy, rng);
    let second = if policy.independent_photometric {
        Photometric::draw(policy, rng)
    } else {
        first
    };
    first.apply(&mut out.x0, h * w);
    second.apply(&mut out.x1, h * w);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        synth_generate(&SynthSpec {
            size: 24,
            min_object_size: 4,
            max_object_size: 8,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap()
        .sample
    }

    #[test]
    fn null_policy_is_identity() {
        let s = sample();
        let policy = AugPolicy {
            crop: Some(24),
            ..AugPolicy::identity()
        };
        assert_eq!(augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(1)), s);
    }

    #[test]
    fn double_flip_is_involution() {
        let s = sample();
        let policy = AugPolicy {
            flip_prob: 1.0,
            ..AugPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let once = augment(&s, &policy, &mut rng);
        assert_ne!(once, s);
        assert_eq!(augment(&once, &policy, &mut rng), s);
    }

    #[test]
    fn reproducible_and_congruent() {
        let mut s = sample();
        // marker: unique changed pixel with a unique color in both images
        s.label.iter_mut().for_each(|v| *v = 0);
        let (h, w) = (s.height, s.width);
        let (my, mx) = (5, 17);
        s.label[my * w + mx] = 1;
        for c in 0..3 {
            s.x0[(c * h + my) * w + mx] = 2.0f32.powi(-9);
            s.x1[(c * h + my) * w + mx] = 2.0f32.powi(-9);
        }
        let policy = AugPolicy {
            crop: Some(16),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            flip_prob: 0.5,
            ..AugPolicy::default()
        };
        for seed in 0..20 {
            let a = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert!(a.label.iter().all(|&v| v <= 1));
            if let Some(p) = a.label.iter().position(|&v| v == 1) {
                for c in 0..3 {
                    assert_eq!(a.x0[c * 256 + p], 2.0f32.powi(-9));
                    assert_eq!(a.x1[c * 256 + p], 2.0f32.powi(-9));
                }
            }
        }
    }

    #[test]
    fn photometric_never_touches_labels() {
        let s = sample();
        let policy = AugPolicy {
            flip_prob: 0.0,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            ..AugPolicy::default()
        };
        let a = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.label, s.label);
        assert_ne!(a.x0, s.x0);
        a.validate().unwrap();
    }

    #[test]
    fn paired_jitter_matches_streams_when_requested() {
        let mut s = sample();
        s.x1 = s.x0.clone();
        let policy = AugPolicy {
            independent_photometric: false,
            ..AugPolicy::default()
        };
        let a = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.x0, a.x1);
        let independent = augment(&s, &AugPolicy::default(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_ne!(independent.x0, independent.x1);
    }
}
