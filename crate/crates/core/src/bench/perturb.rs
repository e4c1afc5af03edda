//! Random box perturbations: translation, scaling and discarding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::scene::{BoundingBox, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Translate,
    Scale,
    Discard,
}

impl PerturbMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translate" => Some(Self::Translate),
            "scale" => Some(Self::Scale),
            "discard" => Some(Self::Discard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    pub mode: PerturbMode,
    /// Translate: max shift as a fraction of box size. Discard: drop probability.
    #[serde(default)]
    pub magnitude: f64,
    /// Scale: factor interval.
    #[serde(default = "unit_interval")]
    pub scale_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

fn unit_interval() -> [f64; 2] {
    [1.0, 1.0]
}

impl PerturbSpec {
    pub fn translate(fraction: f64, seed: u64) -> Self {
        Self {
            mode: PerturbMode::Translate,
            magnitude: fraction,
            scale_range: unit_interval(),
            seed,
        }
    }

    pub fn scale(lo: f64, hi: f64, seed: u64) -> Self {
        Self {
            mode: PerturbMode::Scale,
            magnitude: 0.0,
            scale_range: [lo, hi],
            seed,
        }
    }

    pub fn discard(probability: f64, seed: u64) -> Self {
        Self {
            mode: PerturbMode::Discard,
            magnitude: probability,
            scale_range: unit_interval(),
            seed,
        }
    }

    /// Builds a spec from a single magnitude; for scaling `mag` gives the
    /// interval `[1 − mag, 1 + mag]`.
    pub fn from_magnitude(mode: PerturbMode, mag: f64, seed: u64) -> Self {
        match mode {
            PerturbMode::Translate => Self::translate(mag, seed),
            PerturbMode::Scale => Self::scale(1.0 - mag, 1.0 + mag, seed),
            PerturbMode::Discard => Self::discard(mag, seed),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidPerturbation(m.to_string()));
        match self.mode {
            PerturbMode::Translate if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) => {
                bad("translation fraction must be a finite non-negative number")
            }
            PerturbMode::Scale => {
                let [lo, hi] = self.scale_range;
                if !(lo > 0.0 && hi.is_finite()) {
                    bad("scale interval must be positive")
                } else if lo > hi {
                    bad("inverted scale interval")
                } else {
                    Ok(())
                }
            }
            PerturbMode::Discard if !(0.0..=1.0).contains(&self.magnitude) => bad("drop probability must be in [0, 1]"),
            _ => Ok(()),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies `spec` to every box independently; deterministic given the seed.
pub fn perturb_boxes(boxes: &[BoundingBox], spec: &PerturbSpec) -> Result<Vec<BoundingBox>, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        match spec.mode {
            PerturbMode::Translate => {
                let f = spec.magnitude;
                let size = b.size();
                let d: [f64; 3] = std::array::from_fn(|k| uniform(&mut rng, -f, f) * size[k]);
                out.push(if d == [0.0; 3] { *b } else { b.translated(d) });
            }
            PerturbMode::Scale => {
                let s = uniform(&mut rng, spec.scale_range[0], spec.scale_range[1]);
                out.push(if s == 1.0 { *b } else { b.scaled(s) });
            }
            PerturbMode::Discard => {
                if rng.random::<f64>() >= spec.magnitude {
                    out.push(*b);
                }
            }
        }
    }
    Ok(out)
}

/// Copy of `scene` with perturbed boxes; points, tags and ground truth are kept.
pub fn perturb_scene(scene: &Scene, spec: &PerturbSpec) -> Result<Scene, BenchError> {
    Ok(Scene {
        boxes: perturb_boxes(&scene.boxes, spec)?,
        ..scene.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes() -> Vec<BoundingBox> {
        (0..5)
            .map(|i| BoundingBox::new([i as f64, 0.0, 0.0], [i as f64 + 0.5, 1.0, 2.0], 0).unwrap())
            .collect()
    }

    #[test]
    fn identities() {
        let b = boxes();
        assert_eq!(perturb_boxes(&b, &PerturbSpec::translate(0.0, 3)).unwrap(), b);
        assert_eq!(perturb_boxes(&b, &PerturbSpec::scale(1.0, 1.0, 3)).unwrap(), b);
        assert_eq!(perturb_boxes(&b, &PerturbSpec::discard(0.0, 3)).unwrap(), b);
        assert!(perturb_boxes(&b, &PerturbSpec::discard(1.0, 3)).unwrap().is_empty());
    }

    #[test]
    fn translate_keeps_size_and_scale_keeps_center() {
        let b = boxes();
        for (orig, t) in b.iter().zip(perturb_boxes(&b, &PerturbSpec::translate(0.2, 1)).unwrap()) {
            for k in 0..3 {
                assert!((orig.size()[k] - t.size()[k]).abs() < 1e-9);
                assert!((t.center()[k] - orig.center()[k]).abs() <= 0.2 * orig.size()[k] + 1e-12);
            }
        }
        for (orig, s) in b.iter().zip(perturb_boxes(&b, &PerturbSpec::scale(0.8, 1.2, 1)).unwrap()) {
            for k in 0..3 {
                assert!((orig.center()[k] - s.center()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverted_interval_rejected() {
        assert!(matches!(
            perturb_boxes(&boxes(), &PerturbSpec::scale(1.2, 0.8, 0)),
            Err(BenchError::InvalidPerturbation(_))
        ));
    }
}
