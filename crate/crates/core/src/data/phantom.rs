//! Nested-ellipse "lens" phantoms: capsule ⊃ cortex ⊃ nucleus on a dark
//! background, rendered as a grey image replicated over three channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Mask, Sample};
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

/// Base intensity per class id: background, capsule, cortex, nucleus.
pub const CLASS_INTENSITY: [f32; NUM_CLASSES] = [0.1, 0.9, 0.45, 0.7];

const CENTER_JITTER: f64 = 0.10;
const SEMI_AXIS: (f64, f64) = (0.30, 0.45);
const CAPSULE_RATIO: (f64, f64) = (0.04, 0.08);
const CORTEX_RATIO: (f64, f64) = (0.15, 0.25);
const MAX_ROTATION_DEG: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self {
            count,
            size,
            seed,
            noise_sigma: 0.05,
        }
    }
}

/// Outer (capsule) ellipse plus the two inner boundaries as fractions of its
/// semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub capsule: f64,
    pub cortex: f64,
}

impl Ellipse {
    fn sample(r: &mut rng::Rng, size: usize) -> Self {
        let s = size as f64;
        let jitter = CENTER_JITTER * s;
        Self {
            cx: s / 2.0 + r.random_range(-jitter..=jitter),
            cy: s / 2.0 + r.random_range(-jitter..=jitter),
            a: r.random_range(SEMI_AXIS.0..=SEMI_AXIS.1) * s,
            b: r.random_range(SEMI_AXIS.0..=SEMI_AXIS.1) * s,
            angle: r.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians(),
            capsule: r.random_range(CAPSULE_RATIO.0..=CAPSULE_RATIO.1),
            cortex: r.random_range(CORTEX_RATIO.0..=CORTEX_RATIO.1),
        }
    }

    /// Normalized radius of `(x, y)`: 1 on the outer boundary.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (sin, cos) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    pub fn class_at(&self, x: f64, y: f64) -> u8 {
        let rho = self.radius(x, y);
        if rho <= 1.0 - self.capsule - self.cortex {
            3
        } else if rho <= 1.0 - self.capsule {
            2
        } else if rho <= 1.0 {
            1
        } else {
            0
        }
    }
}

/// Renders one phantom; pixel classes are decided at pixel centres.
pub fn render_phantom(e: &Ellipse, size: usize, noise_sigma: f64, r: &mut rng::Rng) -> Sample {
    let plane = size * size;
    let mut ids = Vec::with_capacity(plane);
    for row in 0..size {
        for col in 0..size {
            ids.push(e.class_at(col as f64 + 0.5, row as f64 + 0.5));
        }
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut image = vec![0.0f32; 3 * plane];
    for (p, &id) in ids.iter().enumerate() {
        let n = if noise_sigma > 0.0 { noise.sample(r) } else { 0.0 };
        let v = (f64::from(CLASS_INTENSITY[id as usize]) + n).clamp(0.0, 1.0) as f32;
        for c in 0..3 {
            image[c * plane + p] = v;
        }
    }
    Sample {
        image: Tensor::new(vec![3, size, size], image).expect("consistent shape"),
        mask: Mask { side: size, ids },
    }
}

/// Deterministic phantom set; sample `i` uses its own random stream.
pub fn gen_phantom(spec: &PhantomSpec) -> Vec<Sample> {
    (0..spec.count)
        .map(|i| {
            let mut r = rng::indexed_stream(spec.seed, "phantom", i as u64);
            let e = Ellipse::sample(&mut r, spec.size);
            render_phantom(&e, spec.size, spec.noise_sigma, &mut r)
        })
        .collect()
}

/// Per-pixel nearest-intensity classifier on channel 0: thresholds sit at the
/// midpoints between sorted class intensities.
pub fn threshold_segment(image: &Tensor<f32>) -> Mask {
    let s = image.shape();
    let side = s[1];
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| CLASS_INTENSITY[a].total_cmp(&CLASS_INTENSITY[b]));
    let cuts: Vec<f32> = order
        .windows(2)
        .map(|w| 0.5 * (CLASS_INTENSITY[w[0]] + CLASS_INTENSITY[w[1]]))
        .collect();
    let ids = image.data()[..side * side]
        .iter()
        .map(|&v| order[cuts.iter().filter(|&&c| v > c).count()] as u8)
        .collect();
    Mask { side, ids }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::new(4, 32, 9);
        assert_eq!(gen_phantom(&spec), gen_phantom(&spec));
        let other = PhantomSpec::new(4, 32, 10);
        assert_ne!(gen_phantom(&spec), gen_phantom(&other));
    }

    #[test]
    fn values_and_ids_in_range() {
        for s in gen_phantom(&PhantomSpec::new(8, 64, 1)) {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.ids().iter().all(|&id| (id as usize) < NUM_CLASSES));
            let present: Vec<bool> = (0..4u8).map(|c| s.mask.ids().contains(&c)).collect();
            assert_eq!(present, vec![true; 4]);
        }
    }

    #[test]
    fn noiseless_threshold_recovers_mask() {
        let mut spec = PhantomSpec::new(6, 64, 3);
        spec.noise_sigma = 0.0;
        for s in gen_phantom(&spec) {
            assert_eq!(threshold_segment(&s.image), s.mask);
        }
    }

    #[test]
    fn regions_are_nested() {
        let mut r = rng::stream(5, "test");
        for _ in 0..20 {
            let e = Ellipse::sample(&mut r, 64);
            let s = render_phantom(&e, 64, 0.05, &mut r);
            let inner = Ellipse {
                a: e.a * (1.0 - e.capsule),
                b: e.b * (1.0 - e.capsule),
                ..e
            };
            for row in 0..64 {
                for col in 0..64 {
                    let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                    let id = s.mask.at(row, col);
                    if id == 3 {
                        assert!(inner.radius(x, y) <= 1.0);
                    }
                    if id >= 1 {
                        assert!(e.radius(x, y) <= 1.0);
                    }
                }
            }
        }
    }
}
