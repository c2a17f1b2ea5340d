//! Class-conditional Gaussian fixtures standing in for real embeddings.
//!
//! The target domain is the source domain with one constant offset per
//! class (random direction, fixed magnitude) plus optional fresh noise.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Length of each class's target offset.
    pub shift: f64,
    pub seed: u64,
    /// Standard deviation of class means around the origin.
    pub spread: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Standard deviation of extra noise added to target samples.
    pub target_noise: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, dim: usize, shift: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            dim,
            shift,
            seed,
            spread: 3.0,
            noise: 1.0,
            target_noise: 0.0,
        }
    }
}

fn gaussian(rng: &mut Pcg32, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Generates a labeled (source, target) pair of domains.
pub fn synth_domains(cfg: &SynthConfig) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.dim == 0 {
        return Err(Error::Config("synth sizes must be positive".into()));
    }
    for (name, v) in [
        ("shift", cfg.shift),
        ("spread", cfg.spread),
        ("noise", cfg.noise),
        ("target_noise", cfg.target_noise),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("synth {name} must be finite and >= 0")));
        }
    }
    let mut rng = Pcg32::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian(&mut rng, cfg.dim, cfg.spread))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let dir = gaussian(&mut rng, cfg.dim, 1.0);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|v| cfg.shift * v / norm).collect()
        })
        .collect();

    let n = cfg.classes * cfg.per_class;
    let mut source = Vec::with_capacity(n * cfg.dim);
    let mut target = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, (mean, offset)) in means.iter().zip(&offsets).enumerate() {
        for _ in 0..cfg.per_class {
            let x: Vec<f64> = mean
                .iter()
                .zip(gaussian(&mut rng, cfg.dim, cfg.noise))
                .map(|(m, e)| m + e)
                .collect();
            source.extend(x.iter().map(|&v| v as f32));
            if cfg.target_noise > 0.0 {
                let jitter = gaussian(&mut rng, cfg.dim, cfg.target_noise);
                target.extend(x.iter().zip(offset).zip(jitter).map(|((v, o), j)| (v + o + j) as f32));
            } else {
                target.extend(x.iter().zip(offset).map(|(v, o)| (v + o) as f32));
            }
            labels.push(c as u32);
        }
    }
    let class_names: Vec<String> = (0..cfg.classes).map(|c| format!("class_{c:03}")).collect();
    let ids = |domain: &str| -> Vec<String> {
        (0..n)
            .map(|i| format!("{domain}/{}/{:05}", class_names[i / cfg.per_class], i % cfg.per_class))
            .collect()
    };
    let source = EmbeddingSet::new(
        "source",
        cfg.dim,
        source,
        Some(labels.clone()),
        ids("source"),
        Some(class_names.clone()),
    )?;
    let target = EmbeddingSet::new(
        "target",
        cfg.dim,
        target,
        Some(labels),
        ids("target"),
        Some(class_names),
    )?;
    Ok((source, target))
}
