//! Synthetic flow fields: each class is a Gaussian-windowed motion blob at a
//! grid cell with a fixed direction. Blobs off the centre column are paired
//! with a mirrored twin (mirrored cell, mirrored direction), so every class
//! signature is symmetric under horizontal flipping, like a face.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::LabelsSection;
use crate::error::{Error, Result};
use crate::model::{make_triplet, FlowTriplet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub label: String,
    /// `(row, col)` of the blob on the region grid.
    pub cell: [usize; 2],
    /// Motion direction in degrees (0 = +u, 90 = +v).
    pub angle_deg: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Cells per side of the region grid.
    pub grid: usize,
    /// Blob standard deviation as a fraction of the cell extent.
    pub sigma: f64,
    pub classes: Vec<ClassSignature>,
    /// Standard deviation of additive Gaussian noise on `u` and `v`.
    pub noise: f64,
    /// Maximum per-subject blob offset in pixels.
    pub jitter: f64,
    pub subjects: usize,
}

/// One labelled sample; `label` indexes `SyntheticSpec::classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub flow: FlowTriplet,
    pub label: usize,
    pub subject: String,
}

fn sig(label: &str, cell: [usize; 2], angle_deg: f64) -> ClassSignature {
    ClassSignature {
        label: label.into(),
        cell,
        angle_deg,
        amplitude: 1.0,
    }
}

impl SyntheticSpec {
    /// Three classes in disjoint regions, and the matching label space.
    pub fn three_class(size: usize) -> (Self, LabelsSection) {
        let spec = SyntheticSpec {
            size,
            grid: 4,
            sigma: 0.3,
            classes: vec![
                sig("anger", [1, 0], 30.0),
                sig("happiness", [3, 0], -45.0),
                sig("surprise", [0, 1], -90.0),
            ],
            noise: 0.0,
            jitter: 0.0,
            subjects: 6,
        };
        let labels = LabelsSection {
            full: vec!["anger".into(), "happiness".into(), "surprise".into()],
            coarse_map: vec!["negative".into(), "positive".into(), "surprise".into()],
            fine: vec!["anger".into()],
        };
        (spec, labels)
    }

    /// Seven classes in label order of [`LabelsSection::dfme`]. The four
    /// negative classes share one region and differ only by direction,
    /// `angle_gap` degrees apart.
    pub fn confusable_negatives(size: usize, angle_gap: f64, noise: f64) -> (Self, LabelsSection) {
        let brow = [1, 1];
        let spec = SyntheticSpec {
            size,
            grid: 4,
            sigma: 0.3,
            classes: vec![
                sig("anger", brow, 20.0),
                sig("contempt", [2, 0], 0.0),
                sig("disgust", brow, 20.0 + angle_gap),
                sig("fear", brow, 20.0 + 2.0 * angle_gap),
                sig("happiness", [3, 0], -45.0),
                sig("sadness", brow, 20.0 + 3.0 * angle_gap),
                sig("surprise", [0, 1], -90.0),
            ],
            noise,
            jitter: 1.0,
            subjects: 10,
        };
        (spec, LabelsSection::dfme())
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.grid == 0 || self.size % self.grid != 0 || self.subjects == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic size {} must be a positive multiple of grid {}, with at least one subject",
                self.size, self.grid
            )));
        }
        for c in &self.classes {
            if c.cell[0] >= self.grid || c.cell[1] >= self.grid {
                return Err(Error::InvalidArgument(format!(
                    "class `{}` cell outside the grid",
                    c.label
                )));
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.cell == b.cell && a.angle_deg == b.angle_deg {
                    return Err(Error::InvalidArgument(format!(
                        "classes `{}` and `{}` share a signature",
                        a.label, b.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Blob centres `(row, col, angle_rad)`: the class cell plus its mirror.
    pub fn blobs(&self, class: usize) -> Vec<(f64, f64, f64)> {
        let c = &self.classes[class];
        let cs = (self.size / self.grid) as f64;
        let theta = c.angle_deg * PI / 180.0;
        let centre = |cell: usize| (cell as f64 + 0.5) * cs;
        let mut out = vec![(centre(c.cell[0]), centre(c.cell[1]), theta)];
        let mirror = self.grid - 1 - c.cell[1];
        if mirror != c.cell[1] {
            out.push((centre(c.cell[0]), centre(mirror), PI - theta));
        }
        out
    }

    /// Pixels of the class cell and its mirror, as a mask.
    pub fn region_mask(&self, class: usize) -> Vec<bool> {
        let cs = self.size / self.grid;
        let c = &self.classes[class].cell;
        let cols = [c[1], self.grid - 1 - c[1]];
        (0..self.size * self.size)
            .map(|p| {
                let (r, col) = (p / self.size / cs, p % self.size / cs);
                r == c[0] && cols.contains(&col)
            })
            .collect()
    }
}

/// Subject offsets are drawn first, then samples class by class.
pub fn synth_dataset(spec: &SyntheticSpec, n_per_class: usize, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let offsets: Vec<(f64, f64)> = (0..spec.subjects)
        .map(|_| {
            if spec.jitter > 0.0 {
                (
                    rng.random_range(-spec.jitter..=spec.jitter),
                    rng.random_range(-spec.jitter..=spec.jitter),
                )
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = spec.size;
    let sigma = spec.sigma * (n / spec.grid) as f64;
    let mut out = Vec::with_capacity(spec.classes.len() * n_per_class);
    for (class, c) in spec.classes.iter().enumerate() {
        let blobs = spec.blobs(class);
        for i in 0..n_per_class {
            let subject = (class * n_per_class + i) % spec.subjects;
            let (dy, dx) = offsets[subject];
            let mut u = vec![0f32; n * n];
            let mut v = vec![0f32; n * n];
            for (p, (up, vp)) in u.iter_mut().zip(v.iter_mut()).enumerate() {
                let (r, col) = ((p / n) as f64 + 0.5, (p % n) as f64 + 0.5);
                let (mut su, mut sv) = (0.0, 0.0);
                for &(cr, cc, theta) in &blobs {
                    let d2 = (r - cr - dy).powi(2) + (col - cc - dx).powi(2);
                    let g = c.amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    su += g * theta.cos();
                    sv += g * theta.sin();
                }
                if spec.noise > 0.0 {
                    su += noise.sample(rng);
                    sv += noise.sample(rng);
                }
                *up = su as f32;
                *vp = sv as f32;
            }
            let flow = make_triplet(Tensor::new(vec![n, n], u)?, Tensor::new(vec![n, n], v)?)?;
            out.push(Sample {
                flow,
                label: class,
                subject: format!("s{subject:02}"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_signatures_are_rejected() {
        let (mut spec, _) = SyntheticSpec::three_class(32);
        spec.classes[1] = spec.classes[0].clone();
        spec.classes[1].label = "twin".into();
        assert!(synth_dataset(&spec, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn subjects_cycle() {
        let (spec, _) = SyntheticSpec::three_class(32);
        let data = synth_dataset(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(data.len(), 12);
        assert_eq!(data[0].subject, "s00");
        assert_eq!(data[7].subject, "s01");
    }
}
