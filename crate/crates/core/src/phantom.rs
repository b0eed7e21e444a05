//! Synthetic four-modality tumor phantoms: three nested ellipsoids (edema ⊃
//! core ⊃ enhancing) whose visibility differs per modality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::MODALITIES;
use crate::segloss::LabelVolume;
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
pub const MIN_EXTENT: usize = 8;
pub const DEFAULT_DIMS: [usize; 3] = [16, 16, 16];

/// Region contrast per modality, indexed `[modality][class]` with classes
/// background, edema, core, enhancing.
pub const CONTRAST: [[f64; 4]; MODALITIES] = [
    [0.0, 1.0, 0.7, 0.5],
    [0.0, 0.5, 0.9, 0.9],
    [0.0, 0.0, 0.0, 1.0],
    [0.0, 0.1, 0.2, 0.3],
];

/// Tissue level added everywhere before noise.
pub const BASE_LEVEL: [f64; MODALITIES] = [0.2, 0.3, 0.25, 0.4];

const EDEMA_AXIS: (f64, f64) = (0.26, 0.36);
const CORE_SCALE: (f64, f64) = (0.55, 0.75);
const ENHANCING_SCALE: (f64, f64) = (0.45, 0.65);
/// Fraction of the remaining slack a child centre may use.
const OFFSET_SLACK: f64 = 0.8;
const EDGE_MARGIN: f64 = 0.5;

/// Axis-aligned ellipsoid in voxel-index coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
}

impl Ellipsoid {
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    /// A child scaled by `s` whose centre offset keeps it strictly inside.
    fn nested(&self, rng: &mut impl Rng, s: f64) -> Ellipsoid {
        let u = loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                break u;
            }
        };
        let reach = (1.0 - s) * OFFSET_SLACK;
        Ellipsoid {
            center: std::array::from_fn(|i| self.center[i] + u[i] * reach * self.axes[i]),
            axes: self.axes.map(|a| a * s),
        }
    }
}

/// The three nested tumor regions of one phantom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anatomy {
    pub edema: Ellipsoid,
    pub core: Ellipsoid,
    pub enhancing: Ellipsoid,
}

impl Anatomy {
    pub fn class_at(&self, p: [f64; 3]) -> u8 {
        if self.enhancing.contains(p) {
            3
        } else if self.core.contains(p) {
            2
        } else if self.edema.contains(p) {
            1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Four `[1, D, H, W]` volumes in canonical modality order.
    pub volumes: Vec<Tensor>,
    pub labels: LabelVolume,
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::config(format!(
            "phantom extents {dims:?} too small; each must be at least {MIN_EXTENT}"
        )));
    }
    Ok(())
}

pub fn draw_anatomy(rng: &mut impl Rng, dims: [usize; 3]) -> Result<Anatomy> {
    check_dims(dims)?;
    let axes: [f64; 3] = std::array::from_fn(|i| rng.random_range(EDEMA_AXIS.0..EDEMA_AXIS.1) * dims[i] as f64);
    let center: [f64; 3] = std::array::from_fn(|i| {
        let lo = axes[i] + EDGE_MARGIN;
        let hi = dims[i] as f64 - 1.0 - EDGE_MARGIN - axes[i];
        rng.random_range(lo..=hi)
    });
    let edema = Ellipsoid { center, axes };
    let s_core = rng.random_range(CORE_SCALE.0..CORE_SCALE.1);
    let core = edema.nested(rng, s_core);
    let s_enh = rng.random_range(ENHANCING_SCALE.0..ENHANCING_SCALE.1);
    let enhancing = core.nested(rng, s_enh);
    Ok(Anatomy { edema, core, enhancing })
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    for x in v {
        *x = (*x - mean) * inv;
    }
}

/// One phantom, a pure function of `(seed, dims)`.
pub fn generate_phantom(seed: u64, dims: [usize; 3]) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = draw_anatomy(&mut rng, dims)?;
    let [d, h, w] = dims;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.push(anatomy.class_at([z as f64, y as f64, x as f64]));
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let volumes = (0..MODALITIES)
        .map(|m| {
            let mut v: Vec<f64> = labels
                .iter()
                .map(|&c| BASE_LEVEL[m] + CONTRAST[m][c as usize] + noise.sample(&mut rng))
                .collect();
            standardize(&mut v);
            Tensor::new(vec![1, d, h, w], v).expect("dims match")
        })
        .collect();
    Ok(Sample {
        id: format!("phantom-{seed}"),
        volumes,
        labels: LabelVolume::new(dims, labels)?,
    })
}

/// `|mean(region) − mean(background)| / std(background)` of one volume, or
/// `None` when either set is empty.
pub fn contrast_to_noise(volume: &Tensor, labels: &LabelVolume, class: u8) -> Option<f64> {
    let (mut region, mut bg) = (Vec::new(), Vec::new());
    for (&v, &l) in volume.data().iter().zip(labels.data()) {
        if l == class {
            region.push(v);
        } else if l == 0 {
            bg.push(v);
        }
    }
    if region.is_empty() || bg.len() < 2 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (mr, mb) = (mean(&region), mean(&bg));
    let sd = (bg.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / bg.len() as f64).sqrt();
    Some((mr - mb).abs() / sd)
}
