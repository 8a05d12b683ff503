//! One OneTrans block: pre-norm mixed causal attention and pre-norm mixed
//! FFN, each with a residual, plus the analytic backward pass.
//!
//! Rows are laid out S first, NS last. The first `n_shared` rows of any
//! input use the shared parameter set; row `n_shared + i` uses NS set `i`.

use rand::Rng;

use crate::config::AttentionKind;
use crate::error::{Error, Result};
use crate::nn::{uniform, Mlp, MlpCache};
use crate::numerics::flops::{self, Phase};
use crate::numerics::kernels::{rms_norm_rows, rms_norm_rows_backward, softmax_prefix_in_place};
use crate::numerics::{Matrix, Real};
use crate::params::impl_visit;

/// Projections and FFN for one token kind.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenParams<T: Real = f32> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn: Mlp<T>,
}

impl_visit!(TokenParams { wq, wk, wv, wo, ffn });

impl<T: Real> TokenParams<T> {
    pub fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: uniform(d, d, d, rng),
            wk: uniform(d, d, d, rng),
            wv: uniform(d, d, d, rng),
            wo: uniform(d, d, d, rng),
            ffn: Mlp::new(d, hidden, d, rng),
        }
    }

    fn weight(&self, p: Proj) -> &Matrix<T> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    fn weight_mut(&mut self, p: Proj) -> &mut Matrix<T> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

/// Shared set for S rows, one token-specific set per NS row. An empty `ns`
/// means every row uses the shared set.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBlockParams<T: Real = f32> {
    pub heads: usize,
    pub norm1: Matrix<T>,
    pub norm2: Matrix<T>,
    pub shared: TokenParams<T>,
    pub ns: Vec<TokenParams<T>>,
}

impl_visit!(MixedBlockParams {
    norm1,
    norm2,
    shared,
    ns
});

/// Saved activations of [`MixedBlockParams::forward`].
#[derive(Debug, Clone)]
pub struct BlockCache<T: Real> {
    x: Matrix<T>,
    n_shared: usize,
    q_start: usize,
    h: Matrix<T>,
    inv1: Vec<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    a: Matrix<T>,
    z: Matrix<T>,
    h2: Matrix<T>,
    inv2: Vec<T>,
    ffn: Vec<MlpCache<T>>,
}

impl<T: Real> BlockCache<T> {
    pub fn input(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.v
    }
}

/// Per-query key limits for the block's attention.
pub fn query_limits(kind: AttentionKind, q_start: usize, n_queries: usize, n_keys: usize) -> Vec<usize> {
    (0..n_queries)
        .map(|r| match kind {
            AttentionKind::Causal => q_start + r + 1,
            AttentionKind::Full => n_keys,
        })
        .collect()
}

/// Multi-head scaled dot-product attention before the output projection.
/// Query `r` attends to keys `[0, limits[r])`. Returns the concatenated
/// heads and each head's probability matrix.
pub fn attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    limits: &[usize],
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    if q.cols() != k.cols() || k.shape() != v.shape() || limits.len() != q.rows() || heads == 0 {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if !q.cols().is_multiple_of(heads) {
        return Err(Error::config(format!("width {} not divisible by {heads} heads", q.cols())));
    }
    if limits.iter().any(|&l| l > k.rows()) {
        return Err(Error::ShapeMismatch {
            op: "attention limits",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let dh = q.cols() / heads;
    let scale = T::one() / T::from_usize(dh).expect("head dim fits").sqrt();
    let mut out = Matrix::zeros(q.rows(), q.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.slice_cols(h * dh, (h + 1) * dh), k.slice_cols(h * dh, (h + 1) * dh), v.slice_cols(h * dh, (h + 1) * dh));
        let mut s = qh.matmul_t(&kh)?;
        for (r, &limit) in limits.iter().enumerate() {
            let row = s.row_mut(r);
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_prefix_in_place(row, limit)?;
        }
        out.set_cols(h * dh, &s.matmul(&vh)?);
        probs.push(s);
    }
    Ok((out, probs))
}

impl<T: Real> MixedBlockParams<T> {
    /// `n_ns` token-specific sets, or none for the shared-parameter ablation.
    pub fn new(d: usize, heads: usize, hidden: usize, n_ns: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            norm1: Matrix::filled(1, d, T::one()),
            norm2: Matrix::filled(1, d, T::one()),
            shared: TokenParams::new(d, hidden, rng),
            ns: (0..n_ns).map(|_| TokenParams::new(d, hidden, rng)).collect(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm1.cols()
    }

    /// Copies the shared set into every token-specific set.
    pub fn tie_token_specific(&mut self) {
        for s in &mut self.ns {
            *s = self.shared.clone();
        }
    }

    fn set_for(&self, row: usize, n_shared: usize) -> &TokenParams<T> {
        if row < n_shared || self.ns.is_empty() {
            &self.shared
        } else {
            &self.ns[row - n_shared]
        }
    }

    fn check_rows(&self, rows: usize, n_shared: usize) -> Result<()> {
        let ns_rows = rows.saturating_sub(n_shared);
        if n_shared > rows || (!self.ns.is_empty() && ns_rows > self.ns.len()) {
            return Err(Error::NsCountMismatch {
                expected: self.ns.len(),
                actual: ns_rows,
            });
        }
        Ok(())
    }

    /// Runs `f` on the shared rows as one batch and on each NS row alone,
    /// stacking the results in row order.
    fn per_group<R>(
        &self,
        x: &Matrix<T>,
        n_shared: usize,
        mut f: impl FnMut(&TokenParams<T>, &Matrix<T>) -> Result<(Matrix<T>, R)>,
    ) -> Result<(Matrix<T>, Vec<R>)> {
        self.check_rows(x.rows(), n_shared)?;
        let split = if self.ns.is_empty() { x.rows() } else { n_shared };
        let mut parts = Vec::new();
        let mut extras = Vec::new();
        if split > 0 {
            let (y, e) = f(&self.shared, &x.slice_rows(0, split))?;
            parts.push(y);
            extras.push(e);
        }
        for r in split..x.rows() {
            let (y, e) = f(self.set_for(r, n_shared), &x.slice_rows(r, r + 1))?;
            parts.push(y);
            extras.push(e);
        }
        if parts.is_empty() {
            return Ok((Matrix::zeros(0, self.d_model()), extras));
        }
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        Ok((Matrix::vstack(&refs)?, extras))
    }

    /// Mixed linear projection `p` of every row of `x`.
    pub fn project(&self, p: Proj, x: &Matrix<T>, n_shared: usize) -> Result<Matrix<T>> {
        Ok(self.per_group(x, n_shared, |set, rows| Ok((rows.matmul(set.weight(p))?, ())))?.0)
    }

    fn project_backward(
        &self,
        p: Proj,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        n_shared: usize,
        grads: &mut MixedBlockParams<T>,
    ) -> Result<Matrix<T>> {
        let split = if self.ns.is_empty() { x.rows() } else { n_shared };
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        if split > 0 {
            let (xs, dys) = (x.slice_rows(0, split), dy.slice_rows(0, split));
            xs.t_matmul_acc(&dys, grads.shared.weight_mut(p))?;
            let d = dys.matmul_t(self.shared.weight(p))?;
            dx.data_mut()[..d.len()].copy_from_slice(d.data());
        }
        for r in split..x.rows() {
            let (xr, dyr) = (x.slice_rows(r, r + 1), dy.slice_rows(r, r + 1));
            let i = r - n_shared;
            xr.t_matmul_acc(&dyr, grads.ns[i].weight_mut(p))?;
            let d = dyr.matmul_t(self.ns[i].weight(p))?;
            dx.row_mut(r).copy_from_slice(d.data());
        }
        Ok(dx)
    }

    /// Q, K, V for a full token sequence whose last `x.rows() - l_s` rows are
    /// NS-tokens.
    pub fn mixed_qkv(&self, x: &Matrix<T>, l_s: usize) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        self.check_exact(x.rows(), l_s)?;
        let _p = flops::phase(Phase::Attention);
        Ok((
            self.project(Proj::Q, x, l_s)?,
            self.project(Proj::K, x, l_s)?,
            self.project(Proj::V, x, l_s)?,
        ))
    }

    fn check_exact(&self, rows: usize, l_s: usize) -> Result<()> {
        let ns_rows = rows.checked_sub(l_s).ok_or(Error::NsCountMismatch {
            expected: self.ns.len(),
            actual: 0,
        })?;
        if !self.ns.is_empty() && ns_rows != self.ns.len() {
            return Err(Error::NsCountMismatch {
                expected: self.ns.len(),
                actual: ns_rows,
            });
        }
        Ok(())
    }

    /// Attention of every row with the given mask, followed by the mixed
    /// output projection.
    pub fn causal_attention(
        &self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        l_s: usize,
        kind: AttentionKind,
    ) -> Result<Matrix<T>> {
        let _p = flops::phase(Phase::Attention);
        let limits = query_limits(kind, 0, q.rows(), k.rows());
        let (a, _) = attention(q, k, v, self.heads, &limits)?;
        self.project(Proj::O, &a, l_s)
    }

    /// Row-wise `W2_i silu(W1_i x_i + b1_i) + b2_i`.
    pub fn mixed_ffn(&self, x: &Matrix<T>, l_s: usize) -> Result<Matrix<T>> {
        let _p = flops::phase(Phase::Ffn);
        Ok(self.per_group(x, l_s, |set, rows| set.ffn.forward(rows))?.0)
    }

    /// RMSNorm-ed rows for K/V; rows listed in `x` use `n_shared` as usual.
    pub fn keys_values(&self, x: &Matrix<T>, n_shared: usize) -> Result<(Matrix<T>, Matrix<T>)> {
        let _p = flops::phase(Phase::Attention);
        let (h, _) = rms_norm_rows(x, &self.norm1);
        Ok((self.project(Proj::K, &h, n_shared)?, self.project(Proj::V, &h, n_shared)?))
    }

    /// Block output for query rows `x_q` given precomputed keys/values.
    pub fn forward_queries(
        &self,
        x_q: &Matrix<T>,
        n_shared: usize,
        k: &Matrix<T>,
        v: &Matrix<T>,
        limits: &[usize],
    ) -> Result<Matrix<T>> {
        let z = {
            let _p = flops::phase(Phase::Attention);
            let (h, _) = rms_norm_rows(x_q, &self.norm1);
            let q = self.project(Proj::Q, &h, n_shared)?;
            let (a, _) = attention(&q, k, v, self.heads, limits)?;
            let mut z = self.project(Proj::O, &a, n_shared)?;
            z.add_assign(x_q);
            z
        };
        let _p = flops::phase(Phase::Ffn);
        let (h2, _) = rms_norm_rows(&z, &self.norm2);
        let (mut out, _) = self.per_group(&h2, n_shared, |set, rows| set.ffn.forward(rows))?;
        out.add_assign(&z);
        Ok(out)
    }

    /// Full block over `x` (`n_shared` S rows then NS rows) keeping only the
    /// last `retained` rows as queries.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        n_shared: usize,
        retained: usize,
        kind: AttentionKind,
    ) -> Result<(Matrix<T>, BlockCache<T>)> {
        let l = x.rows();
        let l_ns = l.saturating_sub(n_shared);
        if retained < l_ns || retained > l || retained == 0 {
            return Err(Error::RetainedOutOfRange {
                retained,
                min: l_ns.max(1),
                max: l,
            });
        }
        self.check_rows(l, n_shared)?;
        let q_start = l - retained;
        let q_shared = n_shared.saturating_sub(q_start);
        let (h, inv1, q, k, v, probs, a, z) = {
            let _p = flops::phase(Phase::Attention);
            let (h, inv1) = rms_norm_rows(x, &self.norm1);
            let k = self.project(Proj::K, &h, n_shared)?;
            let v = self.project(Proj::V, &h, n_shared)?;
            let q = self.project(Proj::Q, &h.slice_rows(q_start, l), q_shared)?;
            let limits = query_limits(kind, q_start, retained, l);
            let (a, probs) = attention(&q, &k, &v, self.heads, &limits)?;
            let mut z = self.project(Proj::O, &a, q_shared)?;
            z.add_assign(&x.slice_rows(q_start, l));
            (h, inv1, q, k, v, probs, a, z)
        };
        let _p = flops::phase(Phase::Ffn);
        let (h2, inv2) = rms_norm_rows(&z, &self.norm2);
        let (mut out, ffn) = self.per_group(&h2, q_shared, |set, rows| set.ffn.forward(rows))?;
        out.add_assign(&z);
        Ok((
            out,
            BlockCache {
                x: x.clone(),
                n_shared,
                q_start,
                h,
                inv1,
                q,
                k,
                v,
                probs,
                a,
                z,
                h2,
                inv2,
                ffn,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx`.
    pub fn backward(&self, cache: &BlockCache<T>, d_out: &Matrix<T>, grads: &mut MixedBlockParams<T>) -> Result<Matrix<T>> {
        let c = cache;
        if d_out.shape() != c.z.shape() {
            return Err(Error::ShapeMismatch {
                op: "block backward",
                left: d_out.shape(),
                right: c.z.shape(),
            });
        }
        let l = c.x.rows();
        let q_shared = c.n_shared.saturating_sub(c.q_start);
        let split = if self.ns.is_empty() { c.z.rows() } else { q_shared };

        // FFN and its residual.
        let mut dz = d_out.clone();
        let mut dh2 = Matrix::zeros(c.h2.rows(), c.h2.cols());
        {
            let _p = flops::phase(Phase::Ffn);
            let mut row = 0;
            for fc in &c.ffn {
                let (n, p, gp) = if row < split {
                    (split, &self.shared, &mut grads.shared)
                } else {
                    let i = row - q_shared;
                    (1, &self.ns[i], &mut grads.ns[i])
                };
                let dx = p.ffn.backward(fc, &d_out.slice_rows(row, row + n), &mut gp.ffn)?;
                dh2.data_mut()[row * dx.cols()..(row + n) * dx.cols()].copy_from_slice(dx.data());
                row += n;
            }
        }
        dz.add_assign(&rms_norm_rows_backward(&c.z, &self.norm2, &c.inv2, &dh2, &mut grads.norm2));

        let _p = flops::phase(Phase::Attention);
        let da = self.project_backward(Proj::O, &c.a, &dz, q_shared, grads)?;
        let heads = self.heads;
        let dh_w = c.q.cols() / heads;
        let scale = T::one() / T::from_usize(dh_w).expect("head dim fits").sqrt();
        let mut dq = Matrix::zeros(c.q.rows(), c.q.cols());
        let mut dk = Matrix::zeros(l, c.k.cols());
        let mut dv = Matrix::zeros(l, c.v.cols());
        for h in 0..heads {
            let cols = (h * dh_w, (h + 1) * dh_w);
            let (qh, kh, vh) = (c.q.slice_cols(cols.0, cols.1), c.k.slice_cols(cols.0, cols.1), c.v.slice_cols(cols.0, cols.1));
            let dah = da.slice_cols(cols.0, cols.1);
            let p = &c.probs[h];
            dv.set_cols(cols.0, &p.t_matmul(&dah)?);
            let mut ds = dah.matmul_t(&vh)?;
            for r in 0..ds.rows() {
                let (pr, dr) = (p.row(r), ds.row_mut(r));
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            dq.set_cols(cols.0, &ds.matmul(&kh)?);
            dk.set_cols(cols.0, &ds.t_matmul(&qh)?);
        }
        let mut dh = self.project_backward(Proj::K, &c.h, &dk, c.n_shared, grads)?;
        dh.add_assign(&self.project_backward(Proj::V, &c.h, &dv, c.n_shared, grads)?);
        let dhq = self.project_backward(Proj::Q, &c.h.slice_rows(c.q_start, l), &dq, q_shared, grads)?;
        for r in 0..dhq.rows() {
            for (a, &b) in dh.row_mut(c.q_start + r).iter_mut().zip(dhq.row(r)) {
                *a += b;
            }
        }
        let mut dx = rms_norm_rows_backward(&c.x, &self.norm1, &c.inv1, &dh, &mut grads.norm1);
        for r in 0..dz.rows() {
            for (a, &b) in dx.row_mut(c.q_start + r).iter_mut().zip(dz.row(r)) {
                *a += b;
            }
        }
        Ok(dx)
    }

    /// Multiply-adds of one forward over `l` rows keeping `retained`.
    pub fn flops(&self, l: usize, retained: usize) -> (u64, u64) {
        let d = self.d_model() as u64;
        let (l, lq) = (l as u64, retained as u64);
        let attention = 2 * l * d * d + 2 * lq * d * d + 2 * l * lq * d;
        let ffn = self.shared.ffn.flops(retained);
        (attention, ffn)
    }
}
