use alloc::vec;
use alloc::vec::Vec;

use crate::error::invalid;
use crate::metrics::PerformanceMatrix;
use crate::{Error, Result};

/// 1-based ranks with tied values sharing their average rank.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
///
/// Returns 0 when either vector is constant.
pub fn spearman_rho(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "spearman vector length",
            expected: u.len(),
            found: v.len(),
        });
    }
    if u.len() < 2 {
        return Err(invalid("spearman correlation needs at least two entries"));
    }
    if !u.iter().chain(v).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("spearman input"));
    }
    let ru = fractional_ranks(u);
    let rv = fractional_ranks(v);
    let mean = (u.len() + 1) as f64 / 2.0;
    let (mut cov, mut ss_u, mut ss_v) = (0.0, 0.0, 0.0);
    for (a, b) in ru.iter().zip(&rv) {
        let (da, db) = (a - mean, b - mean);
        cov += da * db;
        ss_u += da * da;
        ss_v += db * db;
    }
    if ss_u == 0.0 || ss_v == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / libm::sqrt(ss_u * ss_v)).clamp(-1.0, 1.0))
}

/// Pairwise performance similarity `(1 + ρ) / 2` between candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub candidate_ids: Vec<usize>,
    pub s: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// `1 − s`, the distance view of the similarity.
    pub fn distance(&self) -> Vec<Vec<f64>> {
        self.s
            .iter()
            .map(|row| row.iter().map(|v| 1.0 - v).collect())
            .collect()
    }
}

pub fn similarity_matrix(perf: &PerformanceMatrix) -> Result<SimilarityMatrix> {
    if perf.n_domains() < 2 {
        return Err(invalid("spearman correlation needs at least two domains"));
    }
    let c = perf.errors.len();
    let mut s = vec![vec![1.0; c]; c];
    for i in 0..c {
        for j in i + 1..c {
            let rho = spearman_rho(&perf.errors[i], &perf.errors[j])?;
            let v = 0.5 * (1.0 + rho);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    Ok(SimilarityMatrix {
        candidate_ids: perf.candidates.clone(),
        s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn fixtures() {
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(),
            -1.0
        );
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        // 1 − 6·4 / (4·15)
        assert!((rho - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(
            fractional_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
        assert_eq!(fractional_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_vector_is_neutral() {
        assert_eq!(
            spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn errors() {
        assert!(spearman_rho(&[1.0], &[2.0]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[2.0]).is_err());
        assert!(spearman_rho(&[1.0, f64::NAN], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn similarity_fixtures() {
        let perf = PerformanceMatrix {
            candidates: vec![4, 5, 6, 7],
            errors: vec![
                vec![1.0, 2.0, 3.0, 4.0],
                vec![1.0, 2.0, 3.0, 4.0],
                vec![4.0, 3.0, 2.0, 1.0],
                vec![2.0, 1.0, 4.0, 3.0],
            ],
            domain_sizes: vec![1; 4],
        };
        let sim = similarity_matrix(&perf).unwrap();
        assert_eq!(sim.candidate_ids, vec![4, 5, 6, 7]);
        assert_eq!(sim.s[0][1], 1.0);
        assert_eq!(sim.s[0][2], 0.0);
        assert!((sim.s[0][3] - 0.8).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(sim.s[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(sim.s[i][j], sim.s[j][i]);
            }
        }
        assert!((sim.distance()[0][3] - 0.2).abs() < 1e-12);
    }
}
