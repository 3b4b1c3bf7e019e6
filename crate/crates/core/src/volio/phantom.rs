//! Synthetic short-axis cardiac phantom: a bright blood-pool ellipsoid inside
//! a myocardial shell, with a dimmer crescent hugging it where a second
//! ellipsoid pokes out of the shell. Geometry jitters per seed, the image gets
//! a mild blur and noise, labels stay crisp.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::metrics::LabelVolume;
use crate::rng::{derive, Stream};
use crate::volio::Volume;
use crate::{Error, Result};

const LVBP_INTENSITY: f64 = 0.9;
const LVM_INTENSITY: f64 = 0.7;
const RV_INTENSITY: f64 = 0.45;
const NOISE_SIGMA: f64 = 0.02;

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        let mut q = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi[a];
            q += t * t;
        }
        q <= 1.0
    }
}

/// Separable Gaussian blur on a channel-innermost host buffer, replicate
/// borders, kernel radius ceil(3 sigma). Weights renormalized to sum 1 so
/// constants pass through unchanged.
pub(crate) fn gaussian_blur(
    data: &mut [f64],
    extents: [usize; 3],
    channels: usize,
    sigma: f64,
) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        weights.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let [w, h, d] = extents;
    let idx = |c: usize, x: usize, y: usize, z: usize| c + channels * (x + w * (y + h * z));
    let mut out = vec![0.0; data.len()];
    for (axis, extent) in [(0usize, w), (1, h), (2, d)] {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..channels {
                        let mut acc = 0.0;
                        for (ki, wt) in weights.iter().enumerate() {
                            let off = ki as isize - radius;
                            let mut p = [x as isize, y as isize, z as isize];
                            p[axis] = (p[axis] + off).clamp(0, extent as isize - 1);
                            acc += wt
                                * data[idx(c, p[0] as usize, p[1] as usize, p[2] as usize)];
                        }
                        out[idx(c, x, y, z)] = acc;
                    }
                }
            }
        }
        data.copy_from_slice(&out);
    }
}

/// Build one phantom. Same seed, same bytes.
pub fn generate_phantom(
    seed: u64,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
) -> Result<(Volume, LabelVolume)> {
    let [w, h, d] = shape;
    if w < 16 || h < 16 {
        return Err(Error::usage(format!(
            "shape {shape:?} cannot contain the phantom structures (needs at least 16 voxels in x and y)"
        )));
    }
    if d < 8 {
        return Err(Error::usage(format!(
            "shape {shape:?} cannot contain the phantom structures (needs at least 8 voxels in z)"
        )));
    }

    let mut rng = derive(seed, Stream::Phantom);
    let center = [
        w as f64 / 2.0 + rng.random_range(-1.0..=1.0) * w as f64 / 16.0,
        h as f64 / 2.0 + rng.random_range(-1.0..=1.0) * h as f64 / 16.0,
        d as f64 / 2.0 + rng.random_range(-1.0..=1.0) * d as f64 / 16.0,
    ];
    let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..=1.1));

    // The +2 keeps the z shell thick enough at the minimum depth that every
    // unit step off the inner ellipsoid still lands inside the outer one.
    let outer = Ellipsoid {
        center,
        semi: [
            0.22 * w as f64 * scale[0],
            0.22 * h as f64 * scale[1],
            0.45 * d as f64 / 2.0 * scale[2] + 2.0,
        ],
    };
    let inner = Ellipsoid {
        center,
        semi: std::array::from_fn(|a| 0.55 * outer.semi[a]),
    };
    let rv = Ellipsoid {
        center: [center[0] - 1.45 * outer.semi[0], center[1], center[2]],
        semi: [0.55 * outer.semi[0], 1.1 * outer.semi[1], 0.9 * outer.semi[2]],
    };

    let voxels = w * h * d;
    let mut labels = vec![0u8; voxels];
    let mut image = vec![0.0f64; voxels];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = x + w * (y + h * z);
                // RV keeps only the part poking out of the shell: a crescent.
                let (label, intensity) = if inner.contains(x, y, z) {
                    (1u8, LVBP_INTENSITY)
                } else if outer.contains(x, y, z) {
                    (2, LVM_INTENSITY)
                } else if rv.contains(x, y, z) {
                    (3, RV_INTENSITY)
                } else {
                    (0, 0.0)
                };
                labels[i] = label;
                image[i] = intensity;
            }
        }
    }

    gaussian_blur(&mut image, shape, 1, 1.0);
    for v in &mut image {
        let noise: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + NOISE_SIGMA * noise).clamp(0.0, 1.0);
    }

    let data: Vec<f32> = image.iter().map(|&v| v as f32).collect();
    let volume = Volume::new(shape, 1, spacing_mm, data)?;
    let labels = LabelVolume::new(shape, spacing_mm, labels)?;
    Ok((volume, labels))
}
