//! Expert pruning strategies.
//!
//! Each strategy returns a [`PruningPlan`]: the retained expert set for one
//! layer, a provenance tag per retained expert and whatever intermediate
//! results the strategy produced.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{
    kmeans_restarts, similarity_matrix, ward_partition, DomainLabeling, ExpertPartition,
    SimilarityMatrix, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS,
};
use crate::combin::{binomial, Combinations};
use crate::error::invalid;
use crate::metrics::{
    activation_frequency, performance_matrix, variability_scores, LossEvaluator, PerformanceMatrix,
    VariabilityScores,
};
use crate::moe::{CalibrationCache, MoeLayer};
use crate::{Error, Result};

/// Default cap on the number of subsets exhaustive search may evaluate.
pub const DEFAULT_BUDGET: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Random,
    Frequency,
    EnumExhaustive,
    EnumGreedy,
    Gvp,
    Mop,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Random,
        Method::Frequency,
        Method::EnumExhaustive,
        Method::EnumGreedy,
        Method::Gvp,
        Method::Mop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Frequency => "frequency",
            Method::EnumExhaustive => "enum_exhaustive",
            Method::EnumGreedy => "enum_greedy",
            Method::Gvp => "gvp",
            Method::Mop => "mop",
        }
    }

    /// Whether the method splits its budget into general and diversity slots.
    pub fn uses_m(self) -> bool {
        matches!(self, Method::Gvp | Method::Mop)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(alloc::format!("unknown pruning method `{s}`")))
    }
}

/// Subset search strategy for reconstruction-loss minimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exhaustive,
    Greedy,
}

impl SearchMode {
    /// Exhaustive when `C(n, k)` fits the budget, greedy otherwise.
    pub fn infer(n: usize, k: usize, budget: u64) -> Self {
        if binomial(n, k) <= budget as u128 {
            SearchMode::Exhaustive
        } else {
            SearchMode::Greedy
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    pub budget: u64,
    /// Fall back to greedy search for the general core when exhaustive
    /// search is over budget.
    pub greedy_fallback: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            greedy_fallback: true,
        }
    }
}

/// Why an expert was retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    General,
    Diversity,
    Baseline,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::General => "general",
            Provenance::Diversity => "diversity",
            Provenance::Baseline => "baseline",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Provenance::General),
            "diversity" => Ok(Provenance::Diversity),
            "baseline" => Ok(Provenance::Baseline),
            _ => Err(invalid(alloc::format!("unknown provenance `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanParams {
    pub r: usize,
    pub m: Option<usize>,
    /// Number of discovered domains (MoP only).
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

/// A subset examined during search and its reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetLoss {
    pub kept: Vec<usize>,
    pub loss: f64,
}

/// Intermediate results attached to a plan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Search mode of the reconstruction-loss stage, if any.
    pub search: Option<SearchMode>,
    pub losses: Vec<SubsetLoss>,
    pub frequency: Option<Vec<usize>>,
    pub scores: Option<VariabilityScores>,
    pub labeling: Option<DomainLabeling>,
    pub performance: Option<PerformanceMatrix>,
    pub similarity: Option<SimilarityMatrix>,
    pub partition: Option<ExpertPartition>,
}

/// The retained experts of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    n_experts: usize,
    kept: Vec<usize>,
    provenance: Vec<Provenance>,
    method: Method,
    params: PlanParams,
    pub diagnostics: Diagnostics,
}

impl PruningPlan {
    /// Builds a plan from `(expert, provenance)` pairs, checking every
    /// structural invariant. The retained set is stored in ascending order.
    pub fn new(
        n_experts: usize,
        mut entries: Vec<(usize, Provenance)>,
        method: Method,
        params: PlanParams,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.len() != params.r {
            return Err(invalid(alloc::format!(
                "plan keeps {} experts but r = {}",
                entries.len(),
                params.r
            )));
        }
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(invalid(alloc::format!("expert {} retained twice", w[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.iter().find(|e| e.0 >= n_experts) {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: n_experts,
            });
        }
        let count = |p| entries.iter().filter(|e| e.1 == p).count();
        if method.uses_m() {
            let m = params.m.ok_or_else(|| invalid("gvp/mop plans need m"))?;
            if count(Provenance::General) != m || count(Provenance::Diversity) != params.r - m {
                return Err(invalid(alloc::format!(
                    "expected {m} general and {} diversity experts",
                    params.r - m
                )));
            }
        } else if count(Provenance::Baseline) != params.r {
            return Err(invalid("baseline plans tag every expert `baseline`"));
        }
        if method == Method::Mop {
            if let Some(part) = &diagnostics.partition {
                let mut seen = alloc::vec![false; part.groups.len()];
                for &(i, p) in &entries {
                    if p != Provenance::Diversity {
                        continue;
                    }
                    let g = part.group_of(i).ok_or_else(|| {
                        invalid(alloc::format!("diversity expert {i} is in no group"))
                    })?;
                    if core::mem::replace(&mut seen[g], true) {
                        return Err(invalid(alloc::format!(
                            "two diversity experts share group {g}"
                        )));
                    }
                }
            }
        }
        let (kept, provenance) = entries.into_iter().unzip();
        Ok(Self {
            n_experts,
            kept,
            provenance,
            method,
            params,
            diagnostics,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn params(&self) -> PlanParams {
        self.params
    }

    pub fn tagged(&self, p: Provenance) -> Vec<usize> {
        self.kept
            .iter()
            .zip(&self.provenance)
            .filter(|(_, &q)| q == p)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = alloc::format!("{} kept {:?}", self.method, self.kept);
        for p in [Provenance::General, Provenance::Diversity] {
            let ids = self.tagged(p);
            if !ids.is_empty() {
                s.push_str(&alloc::format!(" {}={:?}", p.as_str(), ids));
            }
        }
        s
    }
}

fn check_r(n: usize, r: usize) -> Result<()> {
    if r == 0 || r > n {
        return Err(invalid(alloc::format!("r must lie in [1, {n}], got {r}")));
    }
    Ok(())
}

fn check_split(n: usize, r: usize, m: usize) -> Result<()> {
    check_r(n, r)?;
    if m >= r {
        return Err(invalid(alloc::format!(
            "m must be smaller than r ({r}), got {m}"
        )));
    }
    Ok(())
}

/// Default size of the general core: `⌈r / 2⌉`.
pub fn default_m(r: usize) -> usize {
    r.div_ceil(2)
}

fn baseline(kept: Vec<usize>) -> Vec<(usize, Provenance)> {
    kept.into_iter()
        .map(|i| (i, Provenance::Baseline))
        .collect()
}

/// Uniformly random `r`-subset of `n` experts.
pub fn prune_random(n: usize, r: usize, seed: u64) -> Result<PruningPlan> {
    check_r(n, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = rand::seq::index::sample(&mut rng, n, r).into_vec();
    PruningPlan::new(
        n,
        baseline(kept),
        Method::Random,
        PlanParams {
            r,
            m: None,
            k: None,
            seed: Some(seed),
        },
        Diagnostics::default(),
    )
}

/// Keeps the `r` experts most often in the per-token top-k.
pub fn prune_frequency(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    r: usize,
) -> Result<PruningPlan> {
    cache.check_layer(layer)?;
    let n = layer.n_experts();
    check_r(n, r)?;
    let counts = activation_frequency(cache, layer.top_k())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(r);
    PruningPlan::new(
        n,
        baseline(order),
        Method::Frequency,
        PlanParams {
            r,
            m: None,
            k: None,
            seed: None,
        },
        Diagnostics {
            frequency: Some(counts),
            ..Diagnostics::default()
        },
    )
}

fn evaluate_all(eval: &LossEvaluator<'_>, subsets: &[Vec<usize>]) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        subsets
            .par_iter()
            .map(|s| eval.loss(s).expect("subsets are valid"))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        subsets
            .iter()
            .map(|s| eval.loss(s).expect("subsets are valid"))
            .collect()
    }
}

/// First index of the minimum; earlier entries win ties.
fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

struct SearchResult {
    kept: Vec<usize>,
    loss: f64,
    trace: Vec<SubsetLoss>,
}

fn exhaustive(eval: &LossEvaluator<'_>, size: usize, budget: u64) -> Result<SearchResult> {
    let n = eval.n_experts();
    let subsets = binomial(n, size);
    if subsets > budget as u128 {
        return Err(Error::BudgetExceeded { subsets, budget });
    }
    let all: Vec<Vec<usize>> = Combinations::new(n, size).collect();
    let losses = evaluate_all(eval, &all);
    let best = argmin(&losses);
    let kept = all[best].clone();
    let loss = losses[best];
    let trace = all
        .into_iter()
        .zip(losses)
        .map(|(kept, loss)| SubsetLoss { kept, loss })
        .collect();
    Ok(SearchResult { kept, loss, trace })
}

fn greedy(eval: &LossEvaluator<'_>, size: usize) -> SearchResult {
    let mut current: Vec<usize> = (0..eval.n_experts()).collect();
    let mut trace = Vec::new();
    let mut loss = eval.loss(&current).expect("full set is valid");
    while current.len() > size {
        let trials: Vec<Vec<usize>> = (0..current.len())
            .map(|drop| {
                let mut s = current.clone();
                s.remove(drop);
                s
            })
            .collect();
        let losses = evaluate_all(eval, &trials);
        // trials are ordered by the removed index, so argmin keeps the lower index on ties
        let best = argmin(&losses);
        loss = losses[best];
        current = trials[best].clone();
        trace.extend(
            trials
                .into_iter()
                .zip(losses)
                .map(|(kept, loss)| SubsetLoss { kept, loss }),
        );
    }
    SearchResult {
        kept: current,
        loss,
        trace,
    }
}

fn search(
    eval: &LossEvaluator<'_>,
    size: usize,
    mode: SearchMode,
    budget: u64,
) -> Result<SearchResult> {
    match mode {
        SearchMode::Exhaustive => exhaustive(eval, size, budget),
        SearchMode::Greedy => Ok(greedy(eval, size)),
    }
}

/// Reconstruction-loss pruning, searching all `r`-subsets or greedily
/// removing one expert at a time.
pub fn prune_enum(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    r: usize,
    mode: SearchMode,
    opts: SearchOptions,
) -> Result<PruningPlan> {
    let n = layer.n_experts();
    check_r(n, r)?;
    let eval = LossEvaluator::new(cache, layer)?;
    let res = search(&eval, r, mode, opts.budget)?;
    let method = match mode {
        SearchMode::Exhaustive => Method::EnumExhaustive,
        SearchMode::Greedy => Method::EnumGreedy,
    };
    let mut trace = res.trace;
    if trace.is_empty() {
        trace.push(SubsetLoss {
            kept: res.kept.clone(),
            loss: res.loss,
        });
    }
    PruningPlan::new(
        n,
        baseline(res.kept),
        method,
        PlanParams {
            r,
            m: None,
            k: None,
            seed: None,
        },
        Diagnostics {
            search: Some(mode),
            losses: trace,
            ..Diagnostics::default()
        },
    )
}

struct GeneralCore {
    experts: Vec<usize>,
    mode: Option<SearchMode>,
    trace: Vec<SubsetLoss>,
}

/// The `m`-subset with the lowest reconstruction loss, exhaustive when
/// within budget.
fn general_core(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    m: usize,
    opts: SearchOptions,
) -> Result<GeneralCore> {
    if m == 0 {
        return Ok(GeneralCore {
            experts: Vec::new(),
            mode: None,
            trace: Vec::new(),
        });
    }
    let n = layer.n_experts();
    let mode = SearchMode::infer(n, m, opts.budget);
    if mode == SearchMode::Greedy && !opts.greedy_fallback {
        return Err(Error::BudgetExceeded {
            subsets: binomial(n, m),
            budget: opts.budget,
        });
    }
    let eval = LossEvaluator::new(cache, layer)?;
    let res = search(&eval, m, mode, opts.budget)?;
    Ok(GeneralCore {
        experts: res.kept,
        mode: Some(mode),
        trace: res.trace,
    })
}

fn candidates(n: usize, general: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !general.contains(i)).collect()
}

/// General core by reconstruction loss, then the `r − m` candidates with
/// the highest activation variability.
pub fn prune_gvp(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    r: usize,
    m: usize,
    opts: SearchOptions,
) -> Result<PruningPlan> {
    cache.check_layer(layer)?;
    let n = layer.n_experts();
    check_split(n, r, m)?;
    let core = general_core(cache, layer, m, opts)?;
    let scores = variability_scores(cache)?;
    let pool = candidates(n, &core.experts);
    let diversity = scores.ranking(&pool).into_iter().take(r - m);
    let entries = core
        .experts
        .iter()
        .map(|&i| (i, Provenance::General))
        .chain(diversity.map(|i| (i, Provenance::Diversity)))
        .collect();
    PruningPlan::new(
        n,
        entries,
        Method::Gvp,
        PlanParams {
            r,
            m: Some(m),
            k: None,
            seed: None,
        },
        Diagnostics {
            search: core.mode,
            losses: core.trace,
            scores: Some(scores),
            ..Diagnostics::default()
        },
    )
}

/// General core by reconstruction loss, then cluster-then-select:
/// discover `K = r − m` token domains with k-means, cluster the candidates
/// by their per-domain performance with Ward linkage into `K` groups, and
/// keep the most variable expert of each group.
pub fn prune_mop(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    r: usize,
    m: usize,
    kmeans_seed: u64,
    opts: SearchOptions,
) -> Result<PruningPlan> {
    cache.check_layer(layer)?;
    let n = layer.n_experts();
    check_split(n, r, m)?;
    let k = r - m;
    let core = general_core(cache, layer, m, opts)?;
    let scores = variability_scores(cache)?;
    let pool = candidates(n, &core.experts);

    let labeling = kmeans_restarts(
        cache.inputs(),
        k,
        kmeans_seed,
        DEFAULT_MAX_ITERS,
        DEFAULT_RESTARTS,
    )?;
    let perf = performance_matrix(cache, layer, &pool, &labeling.labels, k)?;
    let similarity = if k >= 2 {
        Some(similarity_matrix(&perf)?)
    } else {
        None
    };
    let partition = ward_partition(&perf, similarity.as_ref(), k)?;
    let representatives: Vec<usize> = partition
        .groups
        .iter()
        .map(|g| scores.ranking(g)[0])
        .collect();

    let entries = core
        .experts
        .iter()
        .map(|&i| (i, Provenance::General))
        .chain(representatives.iter().map(|&i| (i, Provenance::Diversity)))
        .collect();
    PruningPlan::new(
        n,
        entries,
        Method::Mop,
        PlanParams {
            r,
            m: Some(m),
            k: Some(k),
            seed: Some(kmeans_seed),
        },
        Diagnostics {
            search: core.mode,
            losses: core.trace,
            scores: Some(scores),
            labeling: Some(labeling),
            performance: Some(perf),
            similarity,
            partition: Some(partition),
            ..Diagnostics::default()
        },
    )
}

/// Method-agnostic dispatch used by harnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodConfig {
    pub method: Method,
    pub r: usize,
    /// Size of the general core; defaults to `⌈r/2⌉` for gvp/mop.
    pub m: Option<usize>,
    pub seed: u64,
}

pub fn run_method(
    cache: &CalibrationCache,
    layer: &MoeLayer,
    cfg: &MethodConfig,
    opts: SearchOptions,
) -> Result<PruningPlan> {
    let m = cfg.m.unwrap_or_else(|| default_m(cfg.r));
    match cfg.method {
        Method::Random => prune_random(layer.n_experts(), cfg.r, cfg.seed),
        Method::Frequency => prune_frequency(cache, layer, cfg.r),
        Method::EnumExhaustive => prune_enum(cache, layer, cfg.r, SearchMode::Exhaustive, opts),
        Method::EnumGreedy => prune_enum(cache, layer, cfg.r, SearchMode::Greedy, opts),
        Method::Gvp => prune_gvp(cache, layer, cfg.r, m, opts),
        Method::Mop => prune_mop(cache, layer, cfg.r, m, cfg.seed, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planted::{generate_calibration, generate_layer, LayerShape, PlantedSpec};
    use alloc::vec;

    fn fixture(seed: u64) -> (MoeLayer, CalibrationCache) {
        let spec = PlantedSpec {
            seed,
            ..PlantedSpec::default()
        };
        let shape = LayerShape {
            n_experts: 8,
            hidden_dim: 8,
            ff_dim: 16,
            top_k: 2,
        };
        let p = generate_layer(&spec, shape).unwrap();
        let cache = generate_calibration(&p.layer, &spec, 40, seed + 100).unwrap();
        (p.layer, cache)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("enumeration".parse::<Method>().is_err());
        assert_eq!(default_m(4), 2);
        assert_eq!(default_m(5), 3);
    }

    #[test]
    fn random_plans() {
        let all = prune_random(8, 8, 3).unwrap();
        assert_eq!(all.kept(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(
            prune_random(8, 4, 11).unwrap(),
            prune_random(8, 4, 11).unwrap()
        );
        assert!(prune_random(8, 0, 1).is_err());
        assert!(prune_random(8, 9, 1).is_err());
    }

    #[test]
    fn full_budget_keeps_everything() {
        let (layer, cache) = fixture(1);
        let opts = SearchOptions::default();
        for mode in [SearchMode::Exhaustive, SearchMode::Greedy] {
            let plan = prune_enum(&cache, &layer, 8, mode, opts).unwrap();
            assert_eq!(plan.kept().len(), 8);
            assert_eq!(plan.diagnostics.losses.last().unwrap().loss, 0.0);
        }
    }

    #[test]
    fn exhaustive_is_never_worse_than_greedy() {
        let (layer, cache) = fixture(2);
        let eval = LossEvaluator::new(&cache, &layer).unwrap();
        for r in [3, 6] {
            let ex = prune_enum(
                &cache,
                &layer,
                r,
                SearchMode::Exhaustive,
                SearchOptions::default(),
            )
            .unwrap();
            let gr = prune_enum(
                &cache,
                &layer,
                r,
                SearchMode::Greedy,
                SearchOptions::default(),
            )
            .unwrap();
            assert!(eval.loss(ex.kept()).unwrap() <= eval.loss(gr.kept()).unwrap());
            assert_eq!(ex.diagnostics.losses.len() as u128, binomial(8, r));
        }
    }

    #[test]
    fn budget_is_enforced() {
        let (layer, cache) = fixture(3);
        let opts = SearchOptions {
            budget: 10,
            greedy_fallback: false,
        };
        assert!(matches!(
            prune_enum(&cache, &layer, 4, SearchMode::Exhaustive, opts),
            Err(Error::BudgetExceeded {
                subsets: 70,
                budget: 10
            })
        ));
        assert!(prune_gvp(&cache, &layer, 4, 2, opts).is_err());
        let fallback = SearchOptions {
            budget: 10,
            greedy_fallback: true,
        };
        let plan = prune_gvp(&cache, &layer, 4, 2, fallback).unwrap();
        assert_eq!(plan.diagnostics.search, Some(SearchMode::Greedy));
    }

    #[test]
    fn gvp_edge_cases() {
        let (layer, cache) = fixture(4);
        let opts = SearchOptions::default();
        let scores = variability_scores(&cache).unwrap();
        let top = scores.ranking(&(0..8).collect::<Vec<_>>());

        let plan = prune_gvp(&cache, &layer, 4, 0, opts).unwrap();
        let mut want = top[..4].to_vec();
        want.sort_unstable();
        assert_eq!(plan.kept(), &want[..]);

        let plan = prune_gvp(&cache, &layer, 4, 3, opts).unwrap();
        let general = plan.tagged(Provenance::General);
        assert_eq!(general.len(), 3);
        let pool = candidates(8, &general);
        assert_eq!(
            plan.tagged(Provenance::Diversity),
            vec![scores.ranking(&pool)[0]]
        );

        assert!(prune_gvp(&cache, &layer, 4, 4, opts).is_err());
    }

    #[test]
    fn mop_structure() {
        let (layer, cache) = fixture(5);
        let plan = prune_mop(&cache, &layer, 4, 2, 0, SearchOptions::default()).unwrap();
        assert_eq!(plan.tagged(Provenance::General).len(), 2);
        assert_eq!(plan.tagged(Provenance::Diversity).len(), 2);
        let part = plan.diagnostics.partition.as_ref().unwrap();
        let scores = plan.diagnostics.scores.as_ref().unwrap();
        for d in plan.tagged(Provenance::Diversity) {
            let g = &part.groups[part.group_of(d).unwrap()];
            assert_eq!(scores.ranking(g)[0], d);
        }
        let gvp = prune_gvp(&cache, &layer, 4, 2, SearchOptions::default()).unwrap();
        assert_eq!(
            gvp.tagged(Provenance::General),
            plan.tagged(Provenance::General)
        );
    }

    #[test]
    fn mop_with_one_diversity_slot() {
        let (layer, cache) = fixture(6);
        let plan = prune_mop(&cache, &layer, 2, 1, 0, SearchOptions::default()).unwrap();
        assert_eq!(plan.kept().len(), 2);
        assert!(plan.diagnostics.similarity.is_none());
        assert_eq!(plan.diagnostics.partition.as_ref().unwrap().groups.len(), 1);
    }

    #[test]
    fn plan_invariants_are_checked() {
        let p = PlanParams {
            r: 2,
            m: Some(1),
            k: None,
            seed: None,
        };
        let d = Diagnostics::default;
        assert!(PruningPlan::new(
            4,
            vec![(0, Provenance::General), (0, Provenance::Diversity)],
            Method::Gvp,
            p,
            d()
        )
        .is_err());
        assert!(PruningPlan::new(
            4,
            vec![(0, Provenance::General), (1, Provenance::General)],
            Method::Gvp,
            p,
            d()
        )
        .is_err());
        assert!(PruningPlan::new(
            4,
            vec![(0, Provenance::General), (7, Provenance::Diversity)],
            Method::Gvp,
            p,
            d()
        )
        .is_err());
        assert!(PruningPlan::new(
            4,
            vec![(3, Provenance::General), (1, Provenance::Diversity)],
            Method::Gvp,
            p,
            d()
        )
        .is_ok());
        assert!(
            PruningPlan::new(4, vec![(1, Provenance::Baseline)], Method::Random, p, d()).is_err()
        );
    }
}
