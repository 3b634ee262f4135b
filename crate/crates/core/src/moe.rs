//! Simulated mixture-of-experts layer.
//!
//! Every forward variant (full, single expert, retained subset) goes through
//! the same routing and mixing code so that restricting to the full expert
//! set reproduces the unpruned output bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{dot_f32_f64, Matrix};
use crate::{Error, Result};

/// Feed-forward expert `w_out · max(0, w_in · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTransform {
    w_in: Matrix,
    w_out: Matrix,
}

impl ExpertTransform {
    /// `w_in` is `ff_dim × hidden_dim`, `w_out` is `hidden_dim × ff_dim`.
    pub fn new(w_in: Matrix, w_out: Matrix) -> Result<Self> {
        if w_out.cols() != w_in.rows() {
            return Err(Error::DimensionMismatch {
                what: "expert w_out columns (ff_dim)",
                expected: w_in.rows(),
                found: w_out.cols(),
            });
        }
        if !w_in.is_finite() || !w_out.is_finite() {
            return Err(Error::NonFinite("expert weights"));
        }
        Ok(Self { w_in, w_out })
    }

    pub fn w_in(&self) -> &Matrix {
        &self.w_in
    }

    pub fn w_out(&self) -> &Matrix {
        &self.w_out
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn ff_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w_in
            .iter_rows()
            .map(|row| dot_f32_f64(row, x).max(0.0))
            .collect();
        self.w_out.matvec(&hidden)
    }
}

/// A single MoE layer: a linear router over `n_experts` plus the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    hidden_dim: usize,
    top_k: usize,
    router: Matrix,
    experts: Vec<ExpertTransform>,
}

impl MoeLayer {
    pub fn new(router: Matrix, experts: Vec<ExpertTransform>, top_k: usize) -> Result<Self> {
        let n = experts.len();
        let hidden_dim = router.cols();
        if hidden_dim == 0 {
            return Err(crate::error::invalid("hidden_dim must be at least 1"));
        }
        if router.rows() != n {
            return Err(Error::DimensionMismatch {
                what: "router rows",
                expected: n,
                found: router.rows(),
            });
        }
        if top_k == 0 || top_k > n {
            return Err(crate::error::invalid(alloc::format!(
                "top_k must lie in [1, {n}], got {top_k}"
            )));
        }
        if !router.is_finite() {
            return Err(Error::NonFinite("router"));
        }
        for e in &experts {
            if e.hidden_dim() != hidden_dim || e.w_out.rows() != hidden_dim {
                return Err(Error::DimensionMismatch {
                    what: "expert hidden_dim",
                    expected: hidden_dim,
                    found: e.hidden_dim(),
                });
            }
        }
        Ok(Self {
            hidden_dim,
            top_k,
            router,
            experts,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn experts(&self) -> &[ExpertTransform] {
        &self.experts
    }

    fn check_input(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                what: "input vector",
                expected: self.hidden_dim,
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input vector"));
        }
        Ok(x.iter().map(|&v| v as f64).collect())
    }

    pub(crate) fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.router.matvec(x)
    }

    /// Full softmax over all experts (no top-k masking).
    pub fn gate(&self, x: &[f32]) -> Result<Vec<f64>> {
        let x = self.check_input(x)?;
        Ok(softmax(&self.logits(&x)))
    }

    /// Top-k routed output of the unpruned layer.
    pub fn forward_full(&self, x: &[f32]) -> Result<Vec<f32>> {
        let x = self.check_input(x)?;
        let mask = KeptMask::all(self.n_experts());
        Ok(self.forward_masked(&x, &mask))
    }

    /// Output of expert `i` alone, with weight exactly one.
    pub fn forward_single(&self, i: usize, x: &[f32]) -> Result<Vec<f32>> {
        self.check_index(i)?;
        let x = self.check_input(x)?;
        Ok(self.experts[i]
            .apply(&x)
            .iter()
            .map(|&v| v as f32)
            .collect())
    }

    /// Output of the pruned layer in which only `kept` experts exist.
    ///
    /// The router is restricted to the kept logits, the top
    /// `min(top_k, |kept|)` of them are selected and renormalised.
    pub fn forward_subset(&self, kept: &[usize], x: &[f32]) -> Result<Vec<f32>> {
        let mask = KeptMask::new(self.n_experts(), kept)?;
        let x = self.check_input(x)?;
        Ok(self.forward_masked(&x, &mask))
    }

    fn forward_masked(&self, x: &[f64], mask: &KeptMask) -> Vec<f32> {
        let logits = self.logits(x);
        let routes = route(&logits, mask, self.top_k);
        let outputs: Vec<(f64, Vec<f64>)> = routes
            .iter()
            .map(|&(i, w)| (w, self.experts[i].apply(x)))
            .collect();
        mix(
            self.hidden_dim,
            outputs.iter().map(|(w, o)| (*w, o.as_slice())),
        )
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_experts() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_experts(),
            });
        }
        Ok(())
    }
}

/// Membership mask for a retained expert set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeptMask {
    kept: Vec<bool>,
    count: usize,
}

impl KeptMask {
    pub fn all(n: usize) -> Self {
        Self {
            kept: vec![true; n],
            count: n,
        }
    }

    pub fn new(n: usize, kept: &[usize]) -> Result<Self> {
        if kept.is_empty() {
            return Err(crate::error::invalid("retained expert set is empty"));
        }
        let mut mask = vec![false; n];
        for &i in kept {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if mask[i] {
                return Err(crate::error::invalid(alloc::format!(
                    "expert {i} listed twice in retained set"
                )));
            }
            mask[i] = true;
        }
        Ok(Self {
            kept: mask,
            count: kept.len(),
        })
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.kept[i]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Selects the top `min(top_k, |kept|)` kept experts and their renormalised
/// weights, in selection order.
///
/// Ordering by logit is ordering by restricted softmax probability; ties go
/// to the lower index. The renormalised weights are the softmax over the
/// selected logits, which equals renormalising the restricted probabilities.
pub(crate) fn route(logits: &[f64], mask: &KeptMask, top_k: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<usize> = (0..logits.len()).filter(|&i| mask.contains(i)).collect();
    cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    cand.truncate(top_k.min(mask.len()));
    let max = logits[cand[0]];
    let exps: Vec<f64> = cand.iter().map(|&i| libm::exp(logits[i] - max)).collect();
    let z: f64 = exps.iter().sum();
    cand.into_iter()
        .zip(exps)
        .map(|(i, e)| (i, e / z))
        .collect()
}

pub(crate) fn mix<'a>(dim: usize, parts: impl Iterator<Item = (f64, &'a [f64])>) -> Vec<f32> {
    let mut acc = vec![0.0f64; dim];
    for (w, out) in parts {
        for (a, &o) in acc.iter_mut().zip(out) {
            *a += w * o;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Per-token logits and expert outputs for a batch of inputs.
///
/// Subset evaluation then only needs routing and mixing, and produces
/// exactly what [`MoeLayer::forward_subset`] would.
#[derive(Debug, Clone)]
pub struct ForwardTable {
    n_experts: usize,
    hidden_dim: usize,
    top_k: usize,
    logits: Vec<f64>,
    // expert-major: outputs[i][t * hidden_dim ..]
    outputs: Vec<Vec<f64>>,
}

impl ForwardTable {
    pub fn new(layer: &MoeLayer, inputs: &Matrix) -> Result<Self> {
        if inputs.cols() != layer.hidden_dim() {
            return Err(Error::DimensionMismatch {
                what: "input columns",
                expected: layer.hidden_dim(),
                found: inputs.cols(),
            });
        }
        let n = layer.n_experts();
        let h = layer.hidden_dim();
        let mut logits = Vec::with_capacity(inputs.rows() * n);
        let mut outputs = vec![Vec::with_capacity(inputs.rows() * h); n];
        for row in inputs.iter_rows() {
            let x = layer.check_input(row)?;
            logits.extend(layer.logits(&x));
            for (i, e) in layer.experts().iter().enumerate() {
                outputs[i].extend(e.apply(&x));
            }
        }
        Ok(Self {
            n_experts: n,
            hidden_dim: h,
            top_k: layer.top_k(),
            logits,
            outputs,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.logits.len() / self.n_experts.max(1)
    }

    pub fn logits(&self, t: usize) -> &[f64] {
        &self.logits[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn expert_output(&self, i: usize, t: usize) -> &[f64] {
        &self.outputs[i][t * self.hidden_dim..(t + 1) * self.hidden_dim]
    }

    pub fn routes(&self, t: usize, mask: &KeptMask) -> Vec<(usize, f64)> {
        route(self.logits(t), mask, self.top_k)
    }

    pub fn output_masked(&self, t: usize, mask: &KeptMask) -> Vec<f32> {
        let routes = self.routes(t, mask);
        mix(
            self.hidden_dim,
            routes.iter().map(|&(i, w)| (w, self.expert_output(i, t))),
        )
    }

    pub fn output_single(&self, i: usize, t: usize) -> Vec<f32> {
        self.expert_output(i, t).iter().map(|&v| v as f32).collect()
    }
}

/// Cached calibration data: token inputs, unpruned outputs and the full
/// gate distribution per token.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCache {
    inputs: Matrix,
    outputs_full: Matrix,
    gate_probs: Matrix,
    domain_labels: Option<Vec<usize>>,
    source_domain: Option<Vec<usize>>,
}

impl CalibrationCache {
    /// Runs `layer` over `inputs` to fill the outputs and gate columns.
    pub fn build(
        layer: &MoeLayer,
        inputs: Matrix,
        source_domain: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = layer.n_experts();
        let h = layer.hidden_dim();
        let mut outputs = Matrix::zeros(inputs.rows(), h);
        let mut gates = Matrix::zeros(inputs.rows(), n);
        let all = KeptMask::all(n);
        for (t, row) in inputs.iter_rows().enumerate() {
            let x = layer.check_input(row)?;
            outputs
                .row_mut(t)
                .copy_from_slice(&layer.forward_masked(&x, &all));
            let probs = softmax(&layer.logits(&x));
            for (g, p) in gates.row_mut(t).iter_mut().zip(probs) {
                *g = p as f32;
            }
        }
        Self::from_parts(inputs, outputs, gates, None, source_domain)
    }

    /// Assembles a cache from stored arrays, checking every invariant.
    pub fn from_parts(
        inputs: Matrix,
        outputs_full: Matrix,
        gate_probs: Matrix,
        domain_labels: Option<Vec<usize>>,
        source_domain: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n_total = inputs.rows();
        if n_total == 0 {
            return Err(crate::error::invalid("calibration cache has no tokens"));
        }
        for (what, rows) in [
            ("outputs_full rows", outputs_full.rows()),
            ("gate_probs rows", gate_probs.rows()),
        ] {
            if rows != n_total {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n_total,
                    found: rows,
                });
            }
        }
        if outputs_full.cols() != inputs.cols() {
            return Err(Error::DimensionMismatch {
                what: "outputs_full columns",
                expected: inputs.cols(),
                found: outputs_full.cols(),
            });
        }
        if !inputs.is_finite() || !outputs_full.is_finite() || !gate_probs.is_finite() {
            return Err(Error::NonFinite("calibration cache"));
        }
        for (t, row) in gate_probs.iter_rows().enumerate() {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-5 {
                return Err(crate::error::invalid(alloc::format!(
                    "gate_probs row {t} is not a probability distribution (sum {sum})"
                )));
            }
        }
        for (what, v) in [
            ("domain_labels", &domain_labels),
            ("source_domain", &source_domain),
        ] {
            if let Some(v) = v {
                if v.len() != n_total {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: n_total,
                        found: v.len(),
                    });
                }
            }
        }
        Ok(Self {
            inputs,
            outputs_full,
            gate_probs,
            domain_labels,
            source_domain,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.inputs.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.gate_probs.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn outputs_full(&self) -> &Matrix {
        &self.outputs_full
    }

    pub fn gate_probs(&self) -> &Matrix {
        &self.gate_probs
    }

    pub fn domain_labels(&self) -> Option<&[usize]> {
        self.domain_labels.as_deref()
    }

    pub fn source_domain(&self) -> Option<&[usize]> {
        self.source_domain.as_deref()
    }

    pub fn set_domain_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.n_tokens() {
            return Err(Error::DimensionMismatch {
                what: "domain_labels",
                expected: self.n_tokens(),
                found: labels.len(),
            });
        }
        self.domain_labels = Some(labels);
        Ok(())
    }

    /// Checks that this cache was produced for `layer`'s shape.
    pub fn check_layer(&self, layer: &MoeLayer) -> Result<()> {
        if self.hidden_dim() != layer.hidden_dim() {
            return Err(Error::DimensionMismatch {
                what: "cache hidden_dim",
                expected: layer.hidden_dim(),
                found: self.hidden_dim(),
            });
        }
        if self.n_experts() != layer.n_experts() {
            return Err(Error::DimensionMismatch {
                what: "cache gate columns",
                expected: layer.n_experts(),
                found: self.n_experts(),
            });
        }
        Ok(())
    }

    /// Keeps only tokens for which `keep(t)` holds.
    pub fn select_tokens(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_tokens()).filter(|&t| keep(t)).collect();
        let take = |m: &Matrix| {
            let mut data = Vec::with_capacity(idx.len() * m.cols());
            for &t in &idx {
                data.extend_from_slice(m.row(t));
            }
            Matrix::from_vec(idx.len(), m.cols(), data)
        };
        let pick = |v: &Option<Vec<usize>>| v.as_ref().map(|v| idx.iter().map(|&t| v[t]).collect());
        Self::from_parts(
            take(&self.inputs)?,
            take(&self.outputs_full)?,
            take(&self.gate_probs)?,
            pick(&self.domain_labels),
            pick(&self.source_domain),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert_from(w_in: &[Vec<f32>], w_out: &[Vec<f32>]) -> ExpertTransform {
        ExpertTransform::new(
            Matrix::from_rows(w_in).unwrap(),
            Matrix::from_rows(w_out).unwrap(),
        )
        .unwrap()
    }

    fn identity_expert(h: usize) -> ExpertTransform {
        let eye: Vec<Vec<f32>> = (0..h)
            .map(|i| (0..h).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        expert_from(&eye, &eye)
    }

    fn scaled_identity(h: usize, s: f32) -> ExpertTransform {
        let eye: Vec<Vec<f32>> = (0..h)
            .map(|i| (0..h).map(|j| if i == j { s } else { 0.0 }).collect())
            .collect();
        let id: Vec<Vec<f32>> = (0..h)
            .map(|i| (0..h).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        expert_from(&eye, &id)
    }

    #[test]
    fn zero_router_gives_uniform_gate() {
        let layer = MoeLayer::new(
            Matrix::zeros(4, 3),
            (0..4).map(|_| identity_expert(3)).collect(),
            2,
        )
        .unwrap();
        let g = layer.gate(&[0.3, -1.0, 2.0]).unwrap();
        for p in g {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_is_shift_invariant() {
        // a constant extra input dimension with equal router weights adds c to every logit
        let router = Matrix::from_rows(&[
            vec![0.5, -1.0, 2.0],
            vec![1.5, 0.2, 2.0],
            vec![-0.7, 0.9, 2.0],
        ])
        .unwrap();
        let router0 = Matrix::from_rows(&[
            vec![0.5, -1.0, 0.0],
            vec![1.5, 0.2, 0.0],
            vec![-0.7, 0.9, 0.0],
        ])
        .unwrap();
        let experts: Vec<_> = (0..3).map(|_| identity_expert(3)).collect();
        let a = MoeLayer::new(router, experts.clone(), 1).unwrap();
        let b = MoeLayer::new(router0, experts, 1).unwrap();
        let x = [0.4, 1.1, 1.0];
        for (p, q) in a.gate(&x).unwrap().iter().zip(b.gate(&x).unwrap()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn top1_with_dominant_gate_returns_that_expert() {
        // logits (ln 9, 0) give probabilities (0.9, 0.1)
        let router =
            Matrix::from_rows(&[vec![libm::log(9.0) as f32, 0.0], vec![0.0, 0.0]]).unwrap();
        let layer = MoeLayer::new(
            router,
            vec![scaled_identity(2, 2.0), scaled_identity(2, 3.0)],
            1,
        )
        .unwrap();
        let x = [1.0, 0.5];
        let g = layer.gate(&x).unwrap();
        assert!((g[0] - 0.9).abs() < 1e-6);
        assert_eq!(
            layer.forward_full(&x).unwrap(),
            layer.forward_single(0, &x).unwrap()
        );
        assert_eq!(layer.forward_full(&x).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn top_k_all_is_dense_mixture() {
        let router =
            Matrix::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.8], vec![0.1, 0.1]]).unwrap();
        let experts = vec![
            scaled_identity(2, 1.0),
            scaled_identity(2, 2.0),
            scaled_identity(2, 4.0),
        ];
        let layer = MoeLayer::new(router, experts, 3).unwrap();
        let x = [0.7, 0.2];
        let g = layer.gate(&x).unwrap();
        let out = layer.forward_full(&x).unwrap();
        for d in 0..2 {
            let want: f64 = (0..3)
                .map(|i| g[i] * layer.forward_single(i, &x).unwrap()[d] as f64)
                .sum();
            assert!((out[d] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_expert_outputs_zero_and_identity_passes_positive_input() {
        let zero = ExpertTransform::new(Matrix::zeros(5, 3), Matrix::zeros(3, 5)).unwrap();
        let layer = MoeLayer::new(Matrix::zeros(2, 3), vec![zero, identity_expert(3)], 1).unwrap();
        assert_eq!(
            layer.forward_single(0, &[1.0, -2.0, 3.0]).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            layer.forward_single(1, &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(matches!(
            layer.forward_single(2, &[1.0, 2.0, 3.0]),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn degenerate_single_expert_layer() {
        let layer = MoeLayer::new(Matrix::zeros(1, 2), vec![scaled_identity(2, 1.5)], 1).unwrap();
        let x = [0.25, 4.0];
        assert_eq!(
            layer.forward_full(&x).unwrap(),
            layer.forward_single(0, &x).unwrap()
        );
    }

    #[test]
    fn subset_errors_and_singletons() {
        let router =
            Matrix::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.8], vec![0.1, 0.1]]).unwrap();
        let layer = MoeLayer::new(
            router,
            vec![
                scaled_identity(2, 1.0),
                scaled_identity(2, 2.0),
                scaled_identity(2, 4.0),
            ],
            2,
        )
        .unwrap();
        let x = [0.7, 0.2];
        assert!(layer.forward_subset(&[], &x).is_err());
        assert!(layer.forward_subset(&[0, 0], &x).is_err());
        assert!(layer.forward_subset(&[5], &x).is_err());
        for i in 0..3 {
            assert_eq!(
                layer.forward_subset(&[i], &x).unwrap(),
                layer.forward_single(i, &x).unwrap()
            );
        }
        assert_eq!(
            layer.forward_subset(&[2, 0, 1], &x).unwrap(),
            layer.forward_full(&x).unwrap()
        );
    }

    #[test]
    fn rejects_bad_layers_and_inputs() {
        assert!(MoeLayer::new(Matrix::zeros(2, 3), vec![identity_expert(3)], 1).is_err());
        assert!(MoeLayer::new(Matrix::zeros(1, 3), vec![identity_expert(3)], 2).is_err());
        assert!(MoeLayer::new(Matrix::zeros(1, 3), vec![identity_expert(3)], 0).is_err());
        let mut r = Matrix::zeros(1, 3);
        r.set(0, 0, f32::NAN);
        assert!(MoeLayer::new(r, vec![identity_expert(3)], 1).is_err());
        let layer = MoeLayer::new(Matrix::zeros(1, 3), vec![identity_expert(3)], 1).unwrap();
        assert!(layer.gate(&[f32::INFINITY, 0.0, 0.0]).is_err());
        assert!(layer.forward_full(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn cache_rejects_unnormalised_gates() {
        let inputs = Matrix::zeros(2, 2);
        let outputs = Matrix::zeros(2, 2);
        let gates = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.6]]).unwrap();
        assert!(CalibrationCache::from_parts(inputs, outputs, gates, None, None).is_err());
    }
}
