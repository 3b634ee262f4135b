//! Synthetic layers with known functional structure, and the multi-domain
//! calibration data that goes with them.
//!
//! Expert layout for `D` domains with `s` specialists each and `g`
//! generalists: experts `d*s .. (d+1)*s` specialise in domain `d`, the last
//! `g` experts are generalists.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::invalid;
use crate::matrix::Matrix;
use crate::moe::{CalibrationCache, ExpertTransform, MoeLayer};
use crate::{Error, Result};

const CENTROID_STREAM: u64 = 1;
const WEIGHT_STREAM: u64 = 2;
/// Router logit per unit of projection on a domain direction.
const ROUTER_GAIN: f64 = 1.0;

/// Parameters of the planted expert structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub n_domains: usize,
    pub specialists_per_domain: usize,
    pub n_generalists: usize,
    /// Relative parameter perturbation between near-duplicate experts.
    pub duplicate_noise: f32,
    /// Euclidean distance between any two domain centroids.
    pub domain_separation: f32,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_domains: 3,
            specialists_per_domain: 2,
            n_generalists: 2,
            duplicate_noise: 0.05,
            domain_separation: 12.0,
            seed: 0,
        }
    }
}

impl PlantedSpec {
    pub fn n_experts(&self) -> usize {
        self.n_domains * self.specialists_per_domain + self.n_generalists
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 {
            return Err(invalid("n_domains must be at least 1"));
        }
        if self.n_experts() == 0 {
            return Err(invalid("planted spec yields zero experts"));
        }
        if !(self.duplicate_noise.is_finite() && self.duplicate_noise >= 0.0) {
            return Err(invalid("duplicate_noise must be finite and >= 0"));
        }
        if !(self.domain_separation.is_finite() && self.domain_separation > 0.0) {
            return Err(invalid("domain_separation must be finite and > 0"));
        }
        Ok(())
    }

    /// Planted domain of every expert; `None` for generalists.
    pub fn specialist_domains(&self) -> Vec<Option<usize>> {
        (0..self.n_experts())
            .map(|i| {
                let d = i / self.specialists_per_domain.max(1);
                (i < self.n_domains * self.specialists_per_domain).then_some(d)
            })
            .collect()
    }

    /// Domain centroids, `n_domains × hidden_dim`, pairwise
    /// `domain_separation` apart.
    pub fn domain_centroids(&self, hidden_dim: usize) -> Result<Matrix> {
        let dirs = self.domain_directions(hidden_dim)?;
        let scale = self.domain_separation as f64 / core::f64::consts::SQRT_2;
        let data = dirs.iter().flatten().map(|&v| (v * scale) as f32).collect();
        Matrix::from_vec(self.n_domains, hidden_dim, data)
    }

    fn domain_directions(&self, hidden_dim: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if self.n_domains > hidden_dim {
            return Err(invalid(alloc::format!(
                "{} domains need hidden_dim >= {0}, got {hidden_dim}",
                self.n_domains
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(CENTROID_STREAM);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(self.n_domains);
        while dirs.len() < self.n_domains {
            let mut v: Vec<f64> = (0..hidden_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            for u in &dirs {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                dirs.push(v);
            }
        }
        Ok(dirs)
    }
}

/// Shape of the layer to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub n_experts: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub top_k: usize,
}

/// A generated layer plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLayer {
    pub layer: MoeLayer,
    /// Planted domain per expert, `None` for generalists.
    pub specialist_domain: Vec<Option<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn perturbed(
    rng: &mut ChaCha8Rng,
    base: &[f64],
    rows: usize,
    cols: usize,
    std: f64,
) -> Result<Matrix> {
    let noise = gaussian(rng, rows, cols, std);
    let data = base
        .iter()
        .zip(noise)
        .map(|(b, n)| (b + n) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Builds a layer whose specialists are near-copies of a per-domain target
/// map and whose router sends domain-`d` inputs to domain-`d` specialists.
/// Generalists average the domain maps and receive a moderate logit
/// everywhere.
pub fn generate_layer(spec: &PlantedSpec, shape: LayerShape) -> Result<PlantedLayer> {
    spec.validate()?;
    if shape.n_experts != spec.n_experts() {
        return Err(Error::DimensionMismatch {
            what: "planted expert count (domains × specialists + generalists)",
            expected: spec.n_experts(),
            found: shape.n_experts,
        });
    }
    if shape.hidden_dim == 0 || shape.ff_dim == 0 {
        return Err(invalid("hidden_dim and ff_dim must be at least 1"));
    }
    let (h, ff) = (shape.hidden_dim, shape.ff_dim);
    let dirs = spec.domain_directions(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(WEIGHT_STREAM);

    let in_std = 1.0 / libm::sqrt(h as f64);
    let out_std = 1.0 / libm::sqrt(ff as f64);
    let targets: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_domains)
        .map(|_| {
            (
                gaussian(&mut rng, ff, h, in_std),
                gaussian(&mut rng, h, ff, out_std),
            )
        })
        .collect();
    let avg = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; pick(&targets[0]).len()];
        for t in &targets {
            acc.iter_mut().zip(pick(t)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= spec.n_domains as f64);
        acc
    };
    let general_in = avg(|t| &t.0);
    let general_out = avg(|t| &t.1);

    let noise = spec.duplicate_noise as f64;
    let domains = spec.specialist_domains();
    let mut experts = Vec::with_capacity(shape.n_experts);
    let mut router = Matrix::zeros(shape.n_experts, h);
    let general_dir: Vec<f64> = (0..h)
        .map(|j| 0.5 * ROUTER_GAIN * dirs.iter().map(|u| u[j]).sum::<f64>())
        .collect();
    for (i, domain) in domains.iter().enumerate() {
        let (w_in, w_out, base_row) = match *domain {
            Some(d) => (
                &targets[d].0,
                &targets[d].1,
                dirs[d].iter().map(|v| ROUTER_GAIN * v).collect(),
            ),
            None => (&general_in, &general_out, general_dir.clone()),
        };
        experts.push(ExpertTransform::new(
            perturbed(&mut rng, w_in, ff, h, noise * in_std)?,
            perturbed(&mut rng, w_out, h, ff, noise * out_std)?,
        )?);
        let row_noise = gaussian(&mut rng, 1, h, noise * ROUTER_GAIN / libm::sqrt(h as f64));
        for (j, (b, n)) in base_row.iter().zip(row_noise).enumerate() {
            router.set(i, j, (b + n) as f32);
        }
    }
    Ok(PlantedLayer {
        layer: MoeLayer::new(router, experts, shape.top_k)?,
        specialist_domain: domains,
    })
}

/// Draws `tokens_per_domain` unit-variance Gaussian tokens around every
/// domain centroid, interleaved round-robin, and runs the layer over them.
pub fn generate_calibration(
    layer: &MoeLayer,
    spec: &PlantedSpec,
    tokens_per_domain: usize,
    seed: u64,
) -> Result<CalibrationCache> {
    if tokens_per_domain < 1 {
        return Err(invalid("tokens_per_domain must be at least 1"));
    }
    generate_calibration_with_counts(layer, spec, &vec![tokens_per_domain; spec.n_domains], seed)
}

/// Like [`generate_calibration`] with a token count per domain. Zero counts
/// are allowed, which gives single-domain or unbalanced caches.
pub fn generate_calibration_with_counts(
    layer: &MoeLayer,
    spec: &PlantedSpec,
    counts: &[usize],
    seed: u64,
) -> Result<CalibrationCache> {
    if counts.len() != spec.n_domains {
        return Err(Error::DimensionMismatch {
            what: "per-domain token counts",
            expected: spec.n_domains,
            found: counts.len(),
        });
    }
    if layer.n_experts() != spec.n_experts() {
        return Err(Error::DimensionMismatch {
            what: "layer expert count for planted spec",
            expected: spec.n_experts(),
            found: layer.n_experts(),
        });
    }
    let h = layer.hidden_dim();
    let centroids = spec.domain_centroids(h)?;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(invalid("calibration needs at least one token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = counts.to_vec();
    let mut data = Vec::with_capacity(total * h);
    let mut source = Vec::with_capacity(total);
    while source.len() < total {
        for d in 0..spec.n_domains {
            if remaining[d] == 0 {
                continue;
            }
            remaining[d] -= 1;
            source.push(d);
            for &c in centroids.row(d) {
                let z: f64 = rng.sample(StandardNormal);
                data.push((c as f64 + z) as f32);
            }
        }
    }
    let inputs = Matrix::from_vec(total, h, data)?;
    CalibrationCache::build(layer, inputs, Some(source))
}
