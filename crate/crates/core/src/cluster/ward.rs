use alloc::vec::Vec;

use crate::error::invalid;
use crate::matrix::sq_dist_f64;
use crate::metrics::PerformanceMatrix;
use crate::Result;

use super::SimilarityMatrix;

/// One agglomeration step. Clusters are named by their smallest expert id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Increase in total error sum of squares caused by the merge.
    pub cost: f64,
}

/// Disjoint groups of candidate experts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPartition {
    /// Expert ids, ascending within a group; groups ordered by smallest id.
    pub groups: Vec<Vec<usize>>,
    pub merge_trace: Vec<Merge>,
    /// `1 − similarity`, kept for diagnostics only. Empty when no
    /// similarity was supplied.
    pub distance: Vec<Vec<f64>>,
}

impl ExpertPartition {
    pub fn group_of(&self, expert: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&expert))
    }
}

struct Cluster {
    // positions into the candidate list
    members: Vec<usize>,
    sum: Vec<f64>,
}

impl Cluster {
    fn centroid(&self) -> Vec<f64> {
        let n = self.members.len() as f64;
        self.sum.iter().map(|s| s / n).collect()
    }
}

fn merge_cost(a: &Cluster, b: &Cluster) -> f64 {
    let (na, nb) = (a.members.len() as f64, b.members.len() as f64);
    na * nb / (na + nb) * sq_dist_f64(&a.centroid(), &b.centroid())
}

/// Total within-group error sum of squares of performance vectors.
pub fn partition_ess(perf: &PerformanceMatrix, groups: &[Vec<usize>]) -> f64 {
    groups
        .iter()
        .map(|g| {
            let rows: Vec<&Vec<f64>> = g
                .iter()
                .map(|id| {
                    let pos = perf
                        .candidates
                        .iter()
                        .position(|c| c == id)
                        .expect("id is a candidate");
                    &perf.errors[pos]
                })
                .collect();
            let k = perf.n_domains();
            let mu: Vec<f64> = (0..k)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect();
            rows.iter().map(|r| sq_dist_f64(r, &mu)).sum::<f64>()
        })
        .sum()
}

/// Bottom-up Ward clustering of the candidates' performance vectors.
///
/// Each step merges the pair with the smallest increase in error sum of
/// squares, `|a||b| / (|a| + |b|) · ‖μ_a − μ_b‖²`; equal costs go to the
/// lexicographically smallest pair of cluster names.
///
/// The similarity does not enter the merge cost; it is only carried into
/// the result as a distance matrix. With a single domain no rank
/// similarity exists, so it is optional.
pub fn ward_partition(
    perf: &PerformanceMatrix,
    sim: Option<&SimilarityMatrix>,
    target_groups: usize,
) -> Result<ExpertPartition> {
    let c = perf.candidates.len();
    if target_groups == 0 || target_groups > c {
        return Err(invalid(alloc::format!(
            "target_groups must lie in [1, {c}], got {target_groups}"
        )));
    }
    if sim.is_some_and(|s| s.candidate_ids != perf.candidates) {
        return Err(invalid(
            "similarity and performance matrices describe different candidates",
        ));
    }
    // sorted by smallest expert id so pair scans run in tie-break order
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&p| perf.candidates[p]);
    let mut clusters: Vec<Cluster> = order
        .into_iter()
        .map(|p| Cluster {
            members: alloc::vec![p],
            sum: perf.errors[p].clone(),
        })
        .collect();
    let name = |cl: &Cluster| {
        cl.members
            .iter()
            .map(|&p| perf.candidates[p])
            .min()
            .unwrap()
    };

    let mut merge_trace = Vec::with_capacity(c - target_groups);
    while clusters.len() > target_groups {
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let cost = merge_cost(&clusters[i], &clusters[j]);
                if cost < best.0 {
                    best = (cost, i, j);
                }
            }
        }
        let (cost, i, j) = best;
        merge_trace.push(Merge {
            a: name(&clusters[i]),
            b: name(&clusters[j]),
            cost: cost.max(0.0),
        });
        let absorbed = clusters.remove(j);
        let keep = &mut clusters[i];
        keep.members.extend(absorbed.members);
        keep.sum
            .iter_mut()
            .zip(&absorbed.sum)
            .for_each(|(s, v)| *s += v);
    }
    let groups = clusters
        .iter()
        .map(|cl| {
            let mut ids: Vec<usize> = cl.members.iter().map(|&p| perf.candidates[p]).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    Ok(ExpertPartition {
        groups,
        merge_trace,
        distance: sim.map(SimilarityMatrix::distance).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::similarity_matrix;
    use alloc::vec;

    fn perf(rows: Vec<Vec<f64>>, ids: Vec<usize>) -> PerformanceMatrix {
        let k = rows[0].len();
        PerformanceMatrix {
            candidates: ids,
            errors: rows,
            domain_sizes: vec![1; k],
        }
    }

    #[test]
    fn singleton_merge_cost() {
        let p = perf(vec![vec![0.0, 0.0], vec![2.0, 0.0]], vec![0, 1]);
        let sim = similarity_matrix(&p).unwrap();
        let part = ward_partition(&p, Some(&sim), 1).unwrap();
        assert_eq!(part.merge_trace.len(), 1);
        assert!((part.merge_trace[0].cost - 2.0).abs() < 1e-12);
        assert_eq!(part.groups, vec![vec![0, 1]]);
    }

    #[test]
    fn no_merges_when_target_is_candidate_count() {
        let p = perf(
            vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![3.0, 3.0]],
            vec![5, 2, 9],
        );
        let sim = similarity_matrix(&p).unwrap();
        let part = ward_partition(&p, Some(&sim), 3).unwrap();
        assert!(part.merge_trace.is_empty());
        assert_eq!(part.groups, vec![vec![2], vec![5], vec![9]]);
        assert!(ward_partition(&p, Some(&sim), 0).is_err());
        assert!(ward_partition(&p, Some(&sim), 4).is_err());
    }

    #[test]
    fn merge_costs_add_up_to_final_ess() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let t = i as f64;
                vec![libm::sin(t) * 4.0, libm::cos(t * 1.7), t * 0.3]
            })
            .collect();
        let p = perf(rows, (0..7).collect());
        let sim = similarity_matrix(&p).unwrap();
        for target in 1..=7 {
            let part = ward_partition(&p, Some(&sim), target).unwrap();
            let traced: f64 = part.merge_trace.iter().map(|m| m.cost).sum();
            let ess = partition_ess(&p, &part.groups);
            assert!(
                (traced - ess).abs() <= 1e-4 * ess.max(1e-12),
                "{traced} vs {ess}"
            );
            let mut all: Vec<usize> = part.groups.concat();
            all.sort_unstable();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn equal_costs_merge_smallest_names_first() {
        let p = perf(
            vec![
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![5.0, 5.0],
                vec![5.0, 5.0],
            ],
            vec![3, 1, 2, 0],
        );
        let sim = similarity_matrix(&p).unwrap();
        let part = ward_partition(&p, Some(&sim), 2).unwrap();
        assert_eq!(part.merge_trace[0].a, 0);
        assert_eq!(part.merge_trace[0].b, 2);
        assert_eq!(part.groups, vec![vec![0, 2], vec![1, 3]]);
    }
}
