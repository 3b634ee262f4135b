//! Layer, cache and plan encodings on top of [`crate::store`].

use std::path::Path;

use anyhow::{bail, Context};
use mop_core::moe::{CalibrationCache, ExpertTransform, MoeLayer};
use mop_core::prune::{Diagnostics, PlanParams, Provenance, SearchMode, SubsetLoss};
use mop_core::{Method, PruningPlan};
use serde::{Deserialize, Serialize};

use crate::store::{content, read_archive, write_archive, Archive, NamedArray};

pub const KIND_LAYER: &str = "layer";
pub const KIND_CACHE: &str = "calibration_cache";
pub const KIND_DIAGNOSTICS: &str = "plan_diagnostics";

/// A layer plus the planted domain of each expert when it came from the
/// generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub layer: MoeLayer,
    pub specialist_domain: Option<Vec<Option<usize>>>,
}

fn to_i32(v: impl IntoIterator<Item = usize>) -> Vec<i32> {
    v.into_iter()
        .map(|x| i32::try_from(x).expect("index fits in i32"))
        .collect()
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flat_map(|r| f32s(r)).collect()
}

pub fn layer_archive(model: &ModelArchive) -> Archive {
    let layer = &model.layer;
    let ff = layer.experts().first().map_or(0, ExpertTransform::ff_dim);
    let mut a = Archive::new()
        .meta("kind", KIND_LAYER)
        .meta("n_experts", layer.n_experts())
        .meta("hidden_dim", layer.hidden_dim())
        .meta("ff_dim", ff)
        .meta("top_k", layer.top_k());
    a.push(NamedArray::matrix("router", layer.router()));
    for (i, e) in layer.experts().iter().enumerate() {
        a.push(NamedArray::matrix(format!("expert_{i}_w_in"), e.w_in()));
        a.push(NamedArray::matrix(format!("expert_{i}_w_out"), e.w_out()));
    }
    if let Some(map) = &model.specialist_domain {
        let v = map
            .iter()
            .map(|d| d.map_or(-1, |d| i32::try_from(d).expect("domain fits in i32")))
            .collect();
        a.push(NamedArray::i32("planted_domain", vec![map.len()], v));
    }
    a
}

pub fn layer_from_archive(a: &Archive) -> anyhow::Result<ModelArchive> {
    check_kind(a, KIND_LAYER)?;
    let n: usize = a.meta_parse("n_experts")?;
    let top_k: usize = a.meta_parse("top_k")?;
    let router = a.matrix("router")?;
    let experts = (0..n)
        .map(|i| {
            let w_in = a.matrix(&format!("expert_{i}_w_in"))?;
            let w_out = a.matrix(&format!("expert_{i}_w_out"))?;
            ExpertTransform::new(w_in, w_out).with_context(|| format!("expert {i}"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let layer = MoeLayer::new(router, experts, top_k)?;
    let specialist_domain = if a.contains("planted_domain") {
        let (shape, v) = a.i32s("planted_domain")?;
        if shape != [n] {
            return Err(content(
                "planted_domain",
                format!("expected shape [{n}], found {shape:?}"),
            )
            .into());
        }
        Some(
            v.iter()
                .map(|&d| match d {
                    -1 => Ok(None),
                    d => usize::try_from(d)
                        .map(Some)
                        .map_err(|_| content("planted_domain", format!("invalid domain {d}"))),
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    Ok(ModelArchive {
        layer,
        specialist_domain,
    })
}

pub fn cache_archive(cache: &CalibrationCache) -> Archive {
    let mut a = Archive::new()
        .meta("kind", KIND_CACHE)
        .meta("n_tokens", cache.n_tokens())
        .meta("n_experts", cache.n_experts())
        .meta("hidden_dim", cache.hidden_dim());
    a.push(NamedArray::matrix("inputs", cache.inputs()));
    a.push(NamedArray::matrix("outputs_full", cache.outputs_full()));
    a.push(NamedArray::matrix("gate_probs", cache.gate_probs()));
    for (name, v) in [
        ("source_domain", cache.source_domain()),
        ("domain_labels", cache.domain_labels()),
    ] {
        if let Some(v) = v {
            a.push(NamedArray::i32(
                name,
                vec![v.len()],
                to_i32(v.iter().copied()),
            ));
        }
    }
    a
}

pub fn cache_from_archive(a: &Archive) -> anyhow::Result<CalibrationCache> {
    check_kind(a, KIND_CACHE)?;
    let optional = |name: &str| a.contains(name).then(|| a.indices(name)).transpose();
    let cache = CalibrationCache::from_parts(
        a.matrix("inputs")?,
        a.matrix("outputs_full")?,
        a.matrix("gate_probs")?,
        optional("domain_labels")?,
        optional("source_domain")?,
    )?;
    Ok(cache)
}

fn check_kind(a: &Archive, kind: &str) -> anyhow::Result<()> {
    let found = a.meta_str("kind")?;
    if found != kind {
        bail!("expected a {kind} archive, found `{found}`");
    }
    Ok(())
}

pub fn save_model(
    model: &ModelArchive,
    path: &Path,
    extra: &[(&str, String)],
) -> anyhow::Result<Archive> {
    save(layer_archive(model), path, extra)
}

pub fn load_model(path: &Path) -> anyhow::Result<ModelArchive> {
    let (_, a) = read_archive(path).with_context(|| format!("reading model {}", path.display()))?;
    layer_from_archive(&a).with_context(|| format!("decoding model {}", path.display()))
}

pub fn save_cache(
    cache: &CalibrationCache,
    path: &Path,
    extra: &[(&str, String)],
) -> anyhow::Result<Archive> {
    save(cache_archive(cache), path, extra)
}

pub fn load_cache(path: &Path) -> anyhow::Result<CalibrationCache> {
    let (_, a) = read_archive(path).with_context(|| format!("reading cache {}", path.display()))?;
    cache_from_archive(&a).with_context(|| format!("decoding cache {}", path.display()))
}

fn save(mut a: Archive, path: &Path, extra: &[(&str, String)]) -> anyhow::Result<Archive> {
    for (k, v) in extra {
        a.metadata.insert(k.to_string(), v.clone());
    }
    write_archive(&a, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(a)
}

/// JSON form of a [`PruningPlan`]. Bulky diagnostics go to a separate
/// archive; the examined subset losses stay here at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub method: String,
    pub n_experts: usize,
    pub r: usize,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub kept: Vec<usize>,
    pub provenance: Vec<String>,
    pub search: Option<String>,
    pub losses: Vec<LossRecord>,
    /// Expert groups found by the functional clustering stage.
    pub groups: Option<Vec<Vec<usize>>>,
    pub metadata: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossRecord {
    pub kept: Vec<usize>,
    pub loss: f64,
}

fn search_str(s: SearchMode) -> &'static str {
    match s {
        SearchMode::Exhaustive => "exhaustive",
        SearchMode::Greedy => "greedy",
    }
}

impl PlanRecord {
    pub fn from_plan(plan: &PruningPlan) -> Self {
        let p = plan.params();
        let d = &plan.diagnostics;
        Self {
            method: plan.method().as_str().to_string(),
            n_experts: plan.n_experts(),
            r: p.r,
            m: p.m,
            k: p.k,
            seed: p.seed,
            kept: plan.kept().to_vec(),
            provenance: plan
                .provenance()
                .iter()
                .map(|p| p.as_str().to_string())
                .collect(),
            search: d.search.map(|s| search_str(s).to_string()),
            losses: d
                .losses
                .iter()
                .map(|l| LossRecord {
                    kept: l.kept.clone(),
                    loss: l.loss,
                })
                .collect(),
            groups: d.partition.as_ref().map(|p| p.groups.clone()),
            metadata: Default::default(),
        }
    }

    /// Rebuilds the plan, re-checking its invariants. Only the subset losses
    /// and search mode come back as diagnostics.
    pub fn to_plan(&self) -> anyhow::Result<PruningPlan> {
        let method: Method = self.method.parse()?;
        if self.provenance.len() != self.kept.len() {
            bail!(
                "plan lists {} experts but {} provenance tags",
                self.kept.len(),
                self.provenance.len()
            );
        }
        let entries = self
            .kept
            .iter()
            .zip(&self.provenance)
            .map(|(&i, p)| Ok((i, p.parse::<Provenance>()?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let search = match self.search.as_deref() {
            None => None,
            Some("exhaustive") => Some(SearchMode::Exhaustive),
            Some("greedy") => Some(SearchMode::Greedy),
            Some(other) => bail!("unknown search mode `{other}`"),
        };
        let diagnostics = Diagnostics {
            search,
            losses: self
                .losses
                .iter()
                .map(|l| SubsetLoss {
                    kept: l.kept.clone(),
                    loss: l.loss,
                })
                .collect(),
            ..Diagnostics::default()
        };
        let params = PlanParams {
            r: self.r,
            m: self.m,
            k: self.k,
            seed: self.seed,
        };
        Ok(PruningPlan::new(
            self.n_experts,
            entries,
            method,
            params,
            diagnostics,
        )?)
    }
}

pub fn save_plan(record: &PlanRecord, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(record)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing plan {}", path.display()))
}

pub fn load_plan(path: &Path) -> anyhow::Result<PlanRecord> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading plan {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing plan {}", path.display()))
}

/// Archive of the numeric intermediates behind a plan. Empty when the
/// method produced none.
pub fn diagnostics_archive(plan: &PruningPlan) -> Archive {
    let d = &plan.diagnostics;
    let mut a = Archive::new()
        .meta("kind", KIND_DIAGNOSTICS)
        .meta("method", plan.method());
    if let Some(freq) = &d.frequency {
        a.push(NamedArray::i32(
            "frequency",
            vec![freq.len()],
            to_i32(freq.iter().copied()),
        ));
    }
    if let Some(s) = &d.scores {
        a.push(NamedArray::f32(
            "s_var",
            vec![s.scores.len()],
            f32s(&s.scores),
        ));
        a.push(NamedArray::f32(
            "activation_mass",
            vec![s.z.len()],
            f32s(&s.z),
        ));
    }
    if let Some(l) = &d.labeling {
        a.push(NamedArray::i32(
            "labels",
            vec![l.labels.len()],
            to_i32(l.labels.iter().copied()),
        ));
        let dim = l.centroids.first().map_or(0, Vec::len);
        a.push(NamedArray::f32(
            "centroids",
            vec![l.k(), dim],
            flat(&l.centroids),
        ));
        a = a
            .meta("wcss", l.wcss)
            .meta("kmeans_iterations", l.iterations_run);
    }
    if let Some(p) = &d.performance {
        let c = p.candidates.len();
        a.push(NamedArray::i32(
            "candidates",
            vec![c],
            to_i32(p.candidates.iter().copied()),
        ));
        a.push(NamedArray::f32(
            "perf_errors",
            vec![c, p.n_domains()],
            flat(&p.errors),
        ));
        a.push(NamedArray::i32(
            "domain_sizes",
            vec![p.n_domains()],
            to_i32(p.domain_sizes.iter().copied()),
        ));
    }
    if let Some(s) = &d.similarity {
        let c = s.candidate_ids.len();
        a.push(NamedArray::f32("similarity", vec![c, c], flat(&s.s)));
        a.push(NamedArray::f32(
            "distance_diag",
            vec![c, c],
            flat(&s.distance()),
        ));
    }
    if let Some(p) = &d.partition {
        let mut offsets = vec![0usize];
        let mut members = Vec::new();
        for g in &p.groups {
            members.extend_from_slice(g);
            offsets.push(members.len());
        }
        a.push(NamedArray::i32(
            "group_offsets",
            vec![offsets.len()],
            to_i32(offsets),
        ));
        a.push(NamedArray::i32(
            "group_members",
            vec![members.len()],
            to_i32(members),
        ));
        let t = p.merge_trace.len();
        a.push(NamedArray::i32(
            "merge_pairs",
            vec![t, 2],
            to_i32(p.merge_trace.iter().flat_map(|m| [m.a, m.b])),
        ));
        a.push(NamedArray::f32(
            "merge_costs",
            vec![t],
            p.merge_trace.iter().map(|m| m.cost as f32).collect(),
        ));
    }
    a
}

/// Reads the ragged group layout back from a diagnostics archive.
pub fn groups_from_archive(a: &Archive) -> anyhow::Result<Vec<Vec<usize>>> {
    let offsets = a.indices("group_offsets")?;
    let members = a.indices("group_members")?;
    if offsets.first() != Some(&0) || offsets.last() != Some(&members.len()) {
        return Err(content(
            "group_offsets",
            "offsets must run from 0 to the member count",
        )
        .into());
    }
    offsets
        .windows(2)
        .map(|w| {
            members
                .get(w[0]..w[1])
                .map(<[usize]>::to_vec)
                .ok_or_else(|| content("group_offsets", "offsets must be non-decreasing").into())
        })
        .collect()
}
