//! Expert scoring: reconstruction loss, activation variability (KL to
//! uniform, in bits), activation frequency and per-domain performance.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::sq_dist_f32;
use crate::moe::{CalibrationCache, ForwardTable, KeptMask, MoeLayer};
use crate::{Error, Result};

/// Evaluates the summed squared reconstruction error of retained subsets
/// against the cached unpruned outputs.
#[derive(Debug, Clone)]
pub struct LossEvaluator<'a> {
    cache: &'a CalibrationCache,
    table: ForwardTable,
    n_experts: usize,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(cache: &'a CalibrationCache, layer: &MoeLayer) -> Result<Self> {
        cache.check_layer(layer)?;
        Ok(Self {
            cache,
            table: ForwardTable::new(layer, cache.inputs())?,
            n_experts: layer.n_experts(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn table(&self) -> &ForwardTable {
        &self.table
    }

    /// `Σ_t ‖pruned(x_t) − z_t‖²` over all cached tokens.
    pub fn loss(&self, kept: &[usize]) -> Result<f64> {
        let mask = KeptMask::new(self.n_experts, kept)?;
        Ok(self.loss_masked(&mask))
    }

    pub fn loss_masked(&self, mask: &KeptMask) -> f64 {
        (0..self.cache.n_tokens())
            .map(|t| self.token_error(t, mask))
            .sum()
    }

    pub fn token_error(&self, t: usize, mask: &KeptMask) -> f64 {
        let out = self.table.output_masked(t, mask);
        sq_dist_f32(&out, self.cache.outputs_full().row(t))
    }
}

/// Summed squared reconstruction loss of the layer restricted to `kept`.
pub fn reconstruction_loss(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    kept: &[usize],
) -> Result<f64> {
    LossEvaluator::new(cache, layer)?.loss(kept)
}

/// Activation variability per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityScores {
    /// KL divergence in bits between the expert's normalised activation
    /// distribution over tokens and the uniform distribution.
    pub scores: Vec<f64>,
    /// Column sums of the gate probabilities.
    pub z: Vec<f64>,
    pub n_total: usize,
}

impl VariabilityScores {
    /// Indices sorted by descending score, ties to the lower index.
    pub fn ranking(&self, pool: &[usize]) -> Vec<usize> {
        let mut v = pool.to_vec();
        v.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        v
    }
}

/// `S(i) = Σ_t q_ti · log2(q_ti · N)` with `q_ti = p_ti / Z_i`.
///
/// Terms with `p_ti = 0` contribute nothing. Scores are clamped to
/// `[0, log2 N]`, the exact range of the divergence, to absorb rounding.
pub fn variability_scores(cache: &CalibrationCache) -> Result<VariabilityScores> {
    let gates = cache.gate_probs();
    let n_total = cache.n_tokens();
    let n = n_total as f64;
    let max_bits = libm::log2(n);
    let mut z = vec![0.0f64; gates.cols()];
    for row in gates.iter_rows() {
        z.iter_mut().zip(row).for_each(|(z, &p)| *z += p as f64);
    }
    if let Some(expert) = z.iter().position(|&z| z <= 0.0) {
        return Err(Error::ZeroMass { expert });
    }
    let mut scores = vec![0.0f64; gates.cols()];
    for row in gates.iter_rows() {
        for ((s, &p), &zi) in scores.iter_mut().zip(row).zip(&z) {
            if p > 0.0 {
                let q = p as f64 / zi;
                *s += q * libm::log2(q * n);
            }
        }
    }
    scores.iter_mut().for_each(|s| *s = s.clamp(0.0, max_bits));
    Ok(VariabilityScores { scores, z, n_total })
}

/// Per-token top-k membership of `row`, ties to the lower index.
pub(crate) fn top_k_of(row: &[f32], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    idx
}

/// Number of tokens for which each expert is among the top-k gate
/// probabilities.
pub fn activation_frequency(cache: &CalibrationCache, top_k: usize) -> Result<Vec<usize>> {
    let n = cache.n_experts();
    if top_k == 0 || top_k > n {
        return Err(crate::error::invalid(alloc::format!(
            "top_k must lie in [1, {n}], got {top_k}"
        )));
    }
    let mut counts = vec![0usize; n];
    for row in cache.gate_probs().iter_rows() {
        for i in top_k_of(row, top_k) {
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Mean single-expert reconstruction error per domain for each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    pub candidates: Vec<usize>,
    /// `errors[i][k]`: candidate `i`, domain `k`.
    pub errors: Vec<Vec<f64>>,
    pub domain_sizes: Vec<usize>,
}

impl PerformanceMatrix {
    pub fn n_domains(&self) -> usize {
        self.domain_sizes.len()
    }
}

/// `errors[i][k] = mean_{t: label_t = k} ‖E_{cand_i}(x_t) − z_t‖²`.
pub fn performance_matrix(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    candidates: &[usize],
    labels: &[usize],
    n_domains: usize,
) -> Result<PerformanceMatrix> {
    cache.check_layer(layer)?;
    if labels.len() != cache.n_tokens() {
        return Err(Error::DimensionMismatch {
            what: "domain labels",
            expected: cache.n_tokens(),
            found: labels.len(),
        });
    }
    for &i in candidates {
        layer.check_index(i)?;
    }
    let mut sizes = vec![0usize; n_domains];
    for &l in labels {
        if l >= n_domains {
            return Err(crate::error::invalid(alloc::format!(
                "domain label {l} out of range for {n_domains} domains"
            )));
        }
        sizes[l] += 1;
    }
    if let Some(domain) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyDomain { domain });
    }
    let mut errors = vec![vec![0.0f64; n_domains]; candidates.len()];
    for (t, (x, z)) in cache
        .inputs()
        .iter_rows()
        .zip(cache.outputs_full().iter_rows())
        .enumerate()
    {
        let k = labels[t];
        for (row, &i) in errors.iter_mut().zip(candidates) {
            let out = layer.forward_single(i, x)?;
            row[k] += sq_dist_f32(&out, z);
        }
    }
    for row in &mut errors {
        row.iter_mut()
            .zip(&sizes)
            .for_each(|(e, &s)| *e /= s as f64);
    }
    Ok(PerformanceMatrix {
        candidates: candidates.to_vec(),
        errors,
        domain_sizes: sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::planted::{generate_calibration, generate_layer, LayerShape, PlantedSpec};
    use approx::assert_abs_diff_eq;

    fn cache_from_gates(rows: &[Vec<f32>]) -> CalibrationCache {
        let g = Matrix::from_rows(rows).unwrap();
        let n = g.rows();
        CalibrationCache::from_parts(Matrix::zeros(n, 1), Matrix::zeros(n, 1), g, None, None)
            .unwrap()
    }

    #[test]
    fn constant_column_scores_zero() {
        let rows: Vec<Vec<f32>> = (0..10).map(|_| vec![0.25, 0.75]).collect();
        let s = variability_scores(&cache_from_gates(&rows)).unwrap();
        assert!(s.scores[0] < 1e-12 && s.scores[1] < 1e-12);
        assert_abs_diff_eq!(s.z[0], 2.5, epsilon = 1e-9);
    }

    #[test]
    fn one_hot_column_scores_log2_n() {
        let mut rows: Vec<Vec<f32>> = (0..1024).map(|_| vec![0.0, 1.0]).collect();
        rows[17] = vec![1.0, 0.0];
        let s = variability_scores(&cache_from_gates(&rows)).unwrap();
        assert_abs_diff_eq!(s.scores[0], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_evaluated_quarter_bit() {
        // column (0.5, 0.25, 0.125, 0.125): 0.5·1 + 0.25·0 + 2·0.125·(−1) = 0.25
        let rows = vec![
            vec![0.5, 0.5],
            vec![0.25, 0.75],
            vec![0.125, 0.875],
            vec![0.125, 0.875],
        ];
        let s = variability_scores(&cache_from_gates(&rows)).unwrap();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.scores[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn never_activated_expert_is_an_error() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]];
        assert_eq!(
            variability_scores(&cache_from_gates(&rows)),
            Err(Error::ZeroMass { expert: 2 })
        );
    }

    #[test]
    fn frequency_tie_rule_and_full_k() {
        let rows: Vec<Vec<f32>> = (0..5).map(|_| vec![0.25; 4]).collect();
        let cache = cache_from_gates(&rows);
        assert_eq!(activation_frequency(&cache, 2).unwrap(), vec![5, 5, 0, 0]);
        assert_eq!(activation_frequency(&cache, 4).unwrap(), vec![5; 4]);
        assert!(activation_frequency(&cache, 0).is_err());
        assert!(activation_frequency(&cache, 5).is_err());
    }

    fn planted(noise: f32) -> (crate::PlantedLayer, PlantedSpec) {
        let spec = PlantedSpec {
            duplicate_noise: noise,
            ..PlantedSpec::default()
        };
        let shape = LayerShape {
            n_experts: 8,
            hidden_dim: 8,
            ff_dim: 16,
            top_k: 2,
        };
        (generate_layer(&spec, shape).unwrap(), spec)
    }

    #[test]
    fn full_set_loss_is_zero() {
        let (p, spec) = planted(0.05);
        let cache = generate_calibration(&p.layer, &spec, 30, 1).unwrap();
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(reconstruction_loss(&cache, &p.layer, &all).unwrap(), 0.0);
        assert!(reconstruction_loss(&cache, &p.layer, &[0, 2, 4]).unwrap() > 0.0);
        assert!(reconstruction_loss(&cache, &p.layer, &[]).is_err());
    }

    #[test]
    fn noiseless_specialists_are_best_on_their_domain() {
        let (p, spec) = planted(0.0);
        let cache = generate_calibration(&p.layer, &spec, 40, 2).unwrap();
        let labels = cache.source_domain().unwrap().to_vec();
        let cands: Vec<usize> = (0..8).collect();
        let perf = performance_matrix(&cache, &p.layer, &cands, &labels, 3).unwrap();
        assert_eq!(perf.domain_sizes, vec![40, 40, 40]);
        for (i, row) in perf.errors.iter().enumerate() {
            if let Some(d) = p.specialist_domain[i] {
                for k in 0..3 {
                    if k != d {
                        assert!(row[d] < row[k], "expert {i}: {row:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_domain_column_is_mean_error() {
        let (p, spec) = planted(0.05);
        let cache = generate_calibration(&p.layer, &spec, 10, 2).unwrap();
        let labels = vec![0; cache.n_tokens()];
        let perf = performance_matrix(&cache, &p.layer, &[1, 6], &labels, 1).unwrap();
        for (row, &i) in perf.errors.iter().zip(&[1usize, 6]) {
            let mut sum = 0.0;
            for t in 0..cache.n_tokens() {
                let out = p.layer.forward_single(i, cache.inputs().row(t)).unwrap();
                sum += sq_dist_f32(&out, cache.outputs_full().row(t));
            }
            assert_abs_diff_eq!(row[0], sum / cache.n_tokens() as f64, epsilon = 1e-9);
        }
        assert!(matches!(
            performance_matrix(&cache, &p.layer, &[1], &labels, 2),
            Err(Error::EmptyDomain { domain: 1 })
        ));
        assert!(performance_matrix(&cache, &p.layer, &[9], &labels, 1).is_err());
    }
}
