//! Two-layer perceptron used by tokenizers and task heads.

use rand::Rng;

use crate::error::Result;
use crate::numerics::kernels::{silu, silu_grad};
use crate::numerics::{Matrix, Real};
use crate::params::impl_visit;

/// `y = silu(x W1 + b1) W2 + b2`, or the single affine map `y = x W1 + b1`
/// when built as linear (`w2`/`b2` empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl_visit!(Mlp { w1, b1, w2, b2 });

/// Saved activations for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T: Real> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

pub(crate) fn uniform<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

impl<T: Real> Mlp<T> {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform(input, hidden, input, rng),
            b1: Matrix::zeros(1, hidden),
            w2: uniform(hidden, output, hidden, rng),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn linear(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: uniform(input, output, input, rng),
            b1: Matrix::zeros(1, output),
            w2: Matrix::zeros(0, 0),
            b2: Matrix::zeros(0, 0),
        }
    }

    pub fn is_linear(&self) -> bool {
        self.w2.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        if self.is_linear() {
            self.w1.cols()
        } else {
            self.w2.cols()
        }
    }

    /// Multiply-adds for `rows` input rows.
    pub fn flops(&self, rows: usize) -> u64 {
        (rows * (self.w1.len() + self.w2.len())) as u64
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, MlpCache<T>)> {
        let mut pre = x.matmul(&self.w1)?;
        pre.add_row_broadcast(&self.b1);
        if self.is_linear() {
            let cache = MlpCache {
                x: x.clone(),
                pre: Matrix::zeros(0, 0),
                act: Matrix::zeros(0, 0),
            };
            return Ok((pre, cache));
        }
        let act = pre.map(silu);
        let mut y = act.matmul(&self.w2)?;
        y.add_row_broadcast(&self.b2);
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache<T>, dy: &Matrix<T>, grads: &mut Mlp<T>) -> Result<Matrix<T>> {
        if self.is_linear() {
            cache.x.t_matmul_acc(dy, &mut grads.w1)?;
            accumulate_bias(&mut grads.b1, dy);
            return dy.matmul_t(&self.w1);
        }
        cache.act.t_matmul_acc(dy, &mut grads.w2)?;
        accumulate_bias(&mut grads.b2, dy);
        let mut dpre = dy.matmul_t(&self.w2)?;
        for (g, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= silu_grad(p);
        }
        cache.x.t_matmul_acc(&dpre, &mut grads.w1)?;
        accumulate_bias(&mut grads.b1, &dpre);
        dpre.matmul_t(&self.w1)
    }
}

pub(crate) fn accumulate_bias<T: Real>(bias: &mut Matrix<T>, dy: &Matrix<T>) {
    for i in 0..dy.rows() {
        for (b, &g) in bias.data_mut().iter_mut().zip(dy.row(i)) {
            *b += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use crate::params::{flatten, unflatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(mlp: Mlp<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Matrix<f64> = uniform(3, mlp.input_dim(), 1, &mut rng);
        let w: Matrix<f64> = uniform(3, mlp.output_dim(), 1, &mut rng);
        let loss = |m: &Mlp<f64>, x: &Matrix<f64>| -> f64 {
            let y = m.apply(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mlp.forward(&x).unwrap();
        let mut grads = zeros_like(&mlp);
        let dx = mlp.backward(&cache, &w, &mut grads).unwrap();

        let theta = flatten(&mlp);
        let fd = finite_diff_grad(
            |t| {
                let mut m = mlp.clone();
                unflatten(&mut m, t);
                loss(&m, &x)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, b) in flatten(&grads).iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        let fdx = finite_diff_grad(
            |t| loss(&mlp, &Matrix::new(3, mlp.input_dim(), t.to_vec()).unwrap()),
            x.data(),
            1e-5,
        )
        .unwrap();
        for (a, b) in dx.data().iter().zip(&fdx) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn two_layer_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mlp::<f64>::new(4, 6, 2, &mut rng);
        m.b1 = uniform(1, 6, 1, &mut rng);
        check(m);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(Mlp::<f64>::linear(3, 5, &mut rng));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::<f64>::new(4, 8, 4, &mut rng);
        let y = m.apply(&Matrix::zeros(2, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
