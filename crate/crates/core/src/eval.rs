//! Held-out evaluation of pruning plans.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::sq_dist_f32;
use crate::moe::{CalibrationCache, ForwardTable, KeptMask, MoeLayer};
use crate::prune::{Method, PlanParams, PruningPlan};
use crate::{Error, Result};

/// Losses, coverage and activation heatmap of one plan on held-out data.
///
/// Losses are summed squared reconstruction errors, over all tokens for
/// `overall_loss` and over each domain's tokens for `per_domain_loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub params: PlanParams,
    pub kept: Vec<usize>,
    pub n_tokens: usize,
    pub overall_loss: f64,
    pub per_domain_loss: Vec<f64>,
    pub domain_sizes: Vec<usize>,
    pub worst_domain_loss: f64,
    /// Fraction of planted domains with at least one retained specialist.
    pub coverage: Option<f64>,
    /// `heatmap[domain][layer][slot]`: mean renormalised gate weight of the
    /// retained expert in `slot` over the domain's tokens.
    pub heatmap: Vec<Vec<Vec<f64>>>,
}

impl EvalReport {
    pub fn mean_domain_loss(&self) -> f64 {
        self.per_domain_loss.iter().sum::<f64>() / self.per_domain_loss.len() as f64
    }

    /// Overall loss divided by the number of held-out tokens.
    pub fn mean_token_loss(&self) -> f64 {
        self.overall_loss / self.n_tokens as f64
    }
}

/// Planted domains represented among `kept`, ascending.
pub fn covered_domains(kept: &[usize], specialist_domain: &[Option<usize>]) -> Vec<usize> {
    let mut d: Vec<usize> = kept
        .iter()
        .filter_map(|&i| specialist_domain.get(i).copied().flatten())
        .collect();
    d.sort_unstable();
    d.dedup();
    d
}

/// Scores `plan` on `heldout`, grouping tokens by their generator domain.
pub fn evaluate_plan(
    layer: &MoeLayer,
    plan: &PruningPlan,
    heldout: &CalibrationCache,
    specialist_domain: Option<&[Option<usize>]>,
) -> Result<EvalReport> {
    heldout.check_layer(layer)?;
    if plan.n_experts() != layer.n_experts() {
        return Err(Error::DimensionMismatch {
            what: "plan expert count",
            expected: layer.n_experts(),
            found: plan.n_experts(),
        });
    }
    let source = heldout
        .source_domain()
        .ok_or_else(|| crate::error::invalid("held-out cache has no source_domain labels"))?;
    let n_domains = source.iter().max().map_or(0, |&d| d + 1);
    let mut sizes = vec![0usize; n_domains];
    source.iter().for_each(|&d| sizes[d] += 1);
    if let Some(domain) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyDomain { domain });
    }

    let kept = plan.kept();
    let mask = KeptMask::new(layer.n_experts(), kept)?;
    let slot_of = |e: usize| {
        kept.iter()
            .position(|&k| k == e)
            .expect("routes stay in the kept set")
    };
    let table = ForwardTable::new(layer, heldout.inputs())?;

    let mut domain_sum = vec![0.0f64; n_domains];
    let mut weights = vec![vec![0.0f64; kept.len()]; n_domains];
    for (t, z) in heldout.outputs_full().iter_rows().enumerate() {
        let d = source[t];
        let routes = table.routes(t, &mask);
        for &(e, w) in &routes {
            weights[d][slot_of(e)] += w;
        }
        let out = table.output_masked(t, &mask);
        domain_sum[d] += sq_dist_f32(&out, z);
    }

    let overall_loss: f64 = domain_sum.iter().sum();
    let worst_domain_loss = domain_sum.iter().copied().fold(0.0, f64::max);
    let heatmap = weights
        .into_iter()
        .zip(&sizes)
        .map(|(row, &n)| vec![row.into_iter().map(|w| w / n as f64).collect()])
        .collect();
    let coverage = specialist_domain.map(|map| {
        let planted = map.iter().flatten().max().map_or(0, |&d| d + 1);
        if planted == 0 {
            0.0
        } else {
            covered_domains(kept, map).len() as f64 / planted as f64
        }
    });

    Ok(EvalReport {
        method: plan.method(),
        params: plan.params(),
        kept: kept.to_vec(),
        n_tokens: heldout.n_tokens(),
        overall_loss,
        per_domain_loss: domain_sum,
        domain_sizes: sizes,
        worst_domain_loss,
        coverage,
        heatmap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planted::{generate_calibration, generate_layer, LayerShape, PlantedSpec};
    use crate::prune::{prune_gvp, prune_random, SearchOptions};

    fn setup() -> (crate::PlantedLayer, CalibrationCache) {
        let spec = PlantedSpec::default();
        let p = generate_layer(
            &spec,
            LayerShape {
                n_experts: 8,
                hidden_dim: 8,
                ff_dim: 16,
                top_k: 2,
            },
        )
        .unwrap();
        let held = generate_calibration(&p.layer, &spec, 30, 99).unwrap();
        (p, held)
    }

    #[test]
    fn unpruned_plan_has_zero_loss() {
        let (p, held) = setup();
        let plan = prune_random(8, 8, 0).unwrap();
        let rep = evaluate_plan(&p.layer, &plan, &held, Some(&p.specialist_domain)).unwrap();
        assert_eq!(rep.overall_loss, 0.0);
        assert!(rep.per_domain_loss.iter().all(|&l| l == 0.0));
        assert_eq!(rep.coverage, Some(1.0));
        assert_eq!(rep.worst_domain_loss, 0.0);
    }

    #[test]
    fn heatmap_rows_are_distributions() {
        let (p, held) = setup();
        let plan = prune_gvp(&held, &p.layer, 4, 2, SearchOptions::default()).unwrap();
        let rep = evaluate_plan(&p.layer, &plan, &held, Some(&p.specialist_domain)).unwrap();
        assert_eq!(rep.heatmap.len(), 3);
        for dom in &rep.heatmap {
            assert_eq!(dom.len(), 1);
            assert_eq!(dom[0].len(), 4);
            let s: f64 = dom[0].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(dom[0].iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        let worst = rep.per_domain_loss.iter().copied().fold(0.0, f64::max);
        assert_eq!(rep.worst_domain_loss, worst);
    }

    #[test]
    fn report_ignores_token_order() {
        let (p, held) = setup();
        let plan = prune_random(8, 3, 5).unwrap();
        let a = evaluate_plan(&p.layer, &plan, &held, None).unwrap();
        let reversed = {
            let n = held.n_tokens();
            let rows = |m: &crate::Matrix| {
                let v: Vec<Vec<f32>> = (0..n).rev().map(|t| m.row(t).to_vec()).collect();
                crate::Matrix::from_rows(&v).unwrap()
            };
            let src: Vec<usize> = held
                .source_domain()
                .unwrap()
                .iter()
                .rev()
                .copied()
                .collect();
            CalibrationCache::from_parts(
                rows(held.inputs()),
                rows(held.outputs_full()),
                rows(held.gate_probs()),
                None,
                Some(src),
            )
            .unwrap()
        };
        let b = evaluate_plan(&p.layer, &plan, &reversed, None).unwrap();
        for (x, y) in a.per_domain_loss.iter().zip(&b.per_domain_loss) {
            assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
        assert_eq!(a.coverage, None);
    }

    #[test]
    fn coverage_counts_planted_domains() {
        let map = [Some(0), Some(0), Some(1), Some(1), None];
        assert_eq!(covered_domains(&[0, 1, 4], &map), vec![0]);
        assert_eq!(covered_domains(&[1, 2], &map), vec![0, 1]);
    }

    #[test]
    fn missing_source_domain_is_an_error() {
        let (p, held) = setup();
        let bare = CalibrationCache::from_parts(
            held.inputs().clone(),
            held.outputs_full().clone(),
            held.gate_probs().clone(),
            None,
            None,
        )
        .unwrap();
        let plan = prune_random(8, 3, 5).unwrap();
        assert!(evaluate_plan(&p.layer, &plan, &bare, None).is_err());
    }
}
