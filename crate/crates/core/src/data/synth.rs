use serde::{Deserialize, Serialize};

use super::{FeatureStore, ImageFeatures, Split};
use crate::error::{Error, Result};
use crate::rng::SaffRng;
use crate::tensor::Tensor;

/// Synthetic stand-in for backbone features.
///
/// Each class has a prototype `μ_c ~ N(0, I)`. In every image, `⌈ρ·P⌉` patches
/// at random positions are `μ_c + σ_s·ξ`; the rest are background patches
/// `μ_bg + σ_b·ξ` around one background mean shared by all classes, so they
/// carry no class information. The class token is `μ_c + σ_s·ξ`.
///
/// Classes are assigned to splits in label order: train first, then val,
/// then test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub images_per_class: usize,
    pub n_patches: usize,
    pub dim: usize,
    pub relevant_fraction: f64,
    pub signal_noise: f64,
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 25,
            val_classes: 0,
            test_classes: 5,
            images_per_class: 30,
            n_patches: 9,
            dim: 16,
            relevant_fraction: 0.3,
            signal_noise: 0.5,
            background_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Relevant patches per image, `⌈ρ·P⌉`.
    pub fn relevant_patches(&self) -> usize {
        // guard against 0.3 * 10 = 3.0000000000000004
        (self.relevant_fraction * self.n_patches as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let rho = self.relevant_fraction;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("relevant_fraction {rho} must lie in (0, 1]")));
        }
        if rho * (self.n_patches as f64) < 1.0 - 1e-9 {
            return Err(Error::Config("relevant_fraction · n_patches must be at least 1".into()));
        }
        if self.n_patches == 0 || self.dim == 0 || self.n_classes == 0 || self.images_per_class == 0 {
            return Err(Error::Config("synthetic store dimensions must be positive".into()));
        }
        if self.val_classes + self.test_classes > self.n_classes {
            return Err(Error::Config(format!(
                "{} val + {} test classes exceed {} classes",
                self.val_classes, self.test_classes, self.n_classes
            )));
        }
        for (name, v) in [("signal_noise", self.signal_noise), ("background_noise", self.background_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, class: usize) -> Split {
        let train = self.n_classes - self.val_classes - self.test_classes;
        if class < train {
            Split::Train
        } else if class < train + self.val_classes {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Rounds through `f32` so the store survives a save/load cycle unchanged.
fn storable(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let (p, d) = (cfg.n_patches, cfg.dim);
    let mut rng = SaffRng::new(cfg.seed);
    let gaussian = |rng: &mut SaffRng| -> Vec<f64> { (0..d).map(|_| rng.normal()).collect() };

    let background: Vec<f64> = gaussian(&mut rng);
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes).map(|_| gaussian(&mut rng)).collect();
    let n_relevant = cfg.relevant_patches();

    let mut images = Vec::with_capacity(cfg.n_classes * cfg.images_per_class);
    for (label, mu) in prototypes.iter().enumerate() {
        for _ in 0..cfg.images_per_class {
            let mut relevant = vec![false; p];
            for pos in rng.choose_distinct(p, n_relevant) {
                relevant[pos] = true;
            }
            let mut patches = Vec::with_capacity(p * d);
            for &is_relevant in &relevant {
                let (center, spread) = if is_relevant {
                    (mu, cfg.signal_noise)
                } else {
                    (&background, cfg.background_noise)
                };
                for c in center {
                    patches.push(storable(c + spread * rng.normal()));
                }
            }
            let token = mu.iter().map(|c| storable(c + cfg.signal_noise * rng.normal())).collect();
            images.push(ImageFeatures {
                label,
                patches: Tensor::from_parts(vec![p, d], patches),
                class_token: Tensor::from_parts(vec![d], token),
            });
        }
    }

    Ok(FeatureStore {
        n_patches: p,
        dim: d,
        class_names: (0..cfg.n_classes).map(|c| format!("class_{c:03}")).collect(),
        class_splits: (0..cfg.n_classes).map(|c| cfg.split_of(c)).collect(),
        images,
    })
}
