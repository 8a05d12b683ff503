//! Independent straight-line oracles shared by the integration tests.
//!
//! Nothing here calls the model's matrix kernels: every quantity is computed
//! with plain nested loops over `Vec<Vec<f64>>`.

#![allow(dead_code)]

use onetrans_core::block::MixedBlockParams;
use onetrans_core::features::{BehaviorType, Request};
use onetrans_core::nn::Mlp;
use onetrans_core::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of<T: onetrans_core::Real>(m: &Matrix<T>) -> Rows {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn vec_mat(x: &[f64], w: &Rows) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One standard pre-norm Transformer layer's weights.
pub struct OracleLayer {
    pub heads: usize,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub wq: Rows,
    pub wk: Rows,
    pub wv: Rows,
    pub wo: Rows,
    pub ffn: OracleMlp,
}

pub struct OracleMlp {
    pub w1: Rows,
    pub b1: Vec<f64>,
    pub w2: Rows,
    pub b2: Vec<f64>,
}

impl OracleMlp {
    pub fn from_mlp<T: onetrans_core::Real>(m: &Mlp<T>) -> Self {
        Self {
            w1: rows_of(&m.w1),
            b1: rows_of(&m.b1).remove(0),
            w2: rows_of(&m.w2),
            b2: rows_of(&m.b2).remove(0),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = vec_mat(x, &self.w1)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| silu(a + b))
            .collect();
        vec_mat(&hidden, &self.w2)
            .iter()
            .zip(&self.b2)
            .map(|(a, b)| a + b)
            .collect()
    }
}

impl OracleLayer {
    /// The shared parameter set of a block.
    pub fn shared<T: onetrans_core::Real>(b: &MixedBlockParams<T>) -> Self {
        Self {
            heads: b.heads,
            g1: rows_of(&b.norm1).remove(0),
            g2: rows_of(&b.norm2).remove(0),
            wq: rows_of(&b.shared.wq),
            wk: rows_of(&b.shared.wk),
            wv: rows_of(&b.shared.wv),
            wo: rows_of(&b.shared.wo),
            ffn: OracleMlp::from_mlp(&b.shared.ffn),
        }
    }

    /// Causal layer over `x`, returning outputs for the last `keep` rows.
    pub fn forward(&self, x: &Rows, keep: usize) -> Rows {
        let n = x.len();
        let d = x[0].len();
        let dh = d / self.heads;
        let h: Rows = x.iter().map(|r| rms_norm(r, &self.g1)).collect();
        let q: Rows = h.iter().map(|r| vec_mat(r, &self.wq)).collect();
        let k: Rows = h.iter().map(|r| vec_mat(r, &self.wk)).collect();
        let v: Rows = h.iter().map(|r| vec_mat(r, &self.wv)).collect();
        let mut out = Vec::with_capacity(keep);
        for i in n - keep..n {
            let mut a = vec![0.0; d];
            for head in 0..self.heads {
                let cols = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in cols.clone() {
                        a[c] += ej / z * v[j][c];
                    }
                }
            }
            let z: Vec<f64> = vec_mat(&a, &self.wo).iter().zip(&x[i]).map(|(p, r)| p + r).collect();
            let f = self.ffn.apply(&rms_norm(&z, &self.g2));
            out.push(z.iter().zip(&f).map(|(p, q)| p + q).collect());
        }
        out
    }
}

/// Stack of causal layers; `counts[n + 1]` rows survive layer `n` (all rows
/// when `counts` is `None`).
pub fn transformer(x0: &Rows, layers: &[OracleLayer], counts: Option<&[usize]>) -> Rows {
    let mut x = x0.clone();
    for (n, layer) in layers.iter().enumerate() {
        let keep = counts.map_or(x.len(), |c| c[n + 1]);
        x = layer.forward(&x, keep);
    }
    x
}

/// Logits of heads applied to the flattened last `l_ns` rows.
pub fn heads<T: onetrans_core::Real>(heads: &[Mlp<T>], x: &Rows, l_ns: usize) -> Vec<f64> {
    let flat: Vec<f64> = x[x.len() - l_ns..].iter().flatten().copied().collect();
    heads
        .iter()
        .map(|h| OracleMlp::from_mlp(h).apply(&flat)[0])
        .collect()
}

/// `request` without its `delta` most recent events in timestamp-aware
/// merge order (ties broken by `intent_order`, then sequence, then event).
pub fn without_latest(request: &Request, delta: usize, intent_order: &[BehaviorType]) -> Request {
    let mut order = Vec::new();
    for (si, s) in request.sequences.iter().enumerate() {
        let intent = intent_order.iter().position(|&t| t == s.type_tag).unwrap();
        for (ei, e) in s.events.iter().enumerate() {
            order.push((e.timestamp.unwrap(), intent, si, ei));
        }
    }
    order.sort();
    let drop: Vec<(usize, usize)> = order[order.len() - delta..].iter().map(|o| (o.2, o.3)).collect();
    let mut out = request.clone();
    for (si, s) in out.sequences.iter_mut().enumerate() {
        let mut ei = 0;
        s.events.retain(|_| {
            let keep = !drop.contains(&(si, ei));
            ei += 1;
            keep
        });
    }
    out.request_id = format!("{}-prefix{delta}", request.request_id);
    out
}

/// Sorted median.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
