#![allow(dead_code)]

use mop_core::{CalibrationCache, ExpertTransform, Matrix, MoeLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f32, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Unstructured layer with Gaussian router and expert weights.
pub fn random_layer(seed: u64, n: usize, hidden: usize, ff: usize, top_k: usize) -> MoeLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let router = gaussian_matrix(&mut rng, n, hidden, 1.0);
    let experts = (0..n)
        .map(|_| {
            let w_in = gaussian_matrix(&mut rng, ff, hidden, 1.0 / (hidden as f32).sqrt());
            let w_out = gaussian_matrix(&mut rng, hidden, ff, 1.0 / (ff as f32).sqrt());
            ExpertTransform::new(w_in, w_out).unwrap()
        })
        .collect();
    MoeLayer::new(router, experts, top_k).unwrap()
}

pub fn random_inputs(seed: u64, tokens: usize, hidden: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    gaussian_matrix(&mut rng, tokens, hidden, 1.0)
}

pub fn random_cache(layer: &MoeLayer, seed: u64, tokens: usize) -> CalibrationCache {
    CalibrationCache::build(layer, random_inputs(seed, tokens, layer.hidden_dim()), None).unwrap()
}

pub fn relu_ffn(e: &ExpertTransform, x: &[f64]) -> Vec<f64> {
    let (w_in, w_out) = (e.w_in(), e.w_out());
    let mut hidden = vec![0.0; w_in.rows()];
    for (j, h) in hidden.iter_mut().enumerate() {
        let mut s = 0.0;
        for k in 0..w_in.cols() {
            s += w_in.get(j, k) as f64 * x[k];
        }
        *h = if s > 0.0 { s } else { 0.0 };
    }
    let mut out = vec![0.0; w_out.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, h) in hidden.iter().enumerate() {
            *o += w_out.get(i, j) as f64 * h;
        }
    }
    out
}

/// Reference pruned forward pass: full softmax, restrict to `kept`,
/// renormalise, take the top `min(top_k, |kept|)` by probability with
/// lower index on ties, renormalise again, mix.
pub fn reference_forward(layer: &MoeLayer, kept: &[usize], x: &[f32]) -> Vec<f64> {
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let n = layer.n_experts();
    let logits: Vec<f64> = (0..n)
        .map(|i| {
            (0..x.len())
                .map(|k| layer.router().get(i, k) as f64 * x[k])
                .sum()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();

    let zk: f64 = kept.iter().map(|&i| p[i]).sum();
    let mut restricted: Vec<(usize, f64)> = kept.iter().map(|&i| (i, p[i] / zk)).collect();
    restricted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    restricted.truncate(layer.top_k().min(kept.len()));
    let zs: f64 = restricted.iter().map(|r| r.1).sum();

    let mut out = vec![0.0; layer.hidden_dim()];
    for (i, w) in restricted {
        for (o, v) in out.iter_mut().zip(relu_ffn(&layer.experts()[i], &x)) {
            *o += w / zs * v;
        }
    }
    out
}

pub fn assert_close(got: &[f32], want: &[f64], rel: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        let tol = rel * w.abs().max(1.0);
        assert!((*g as f64 - w).abs() <= tol, "got {g}, want {w}");
    }
}
