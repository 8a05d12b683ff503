//! Uniform traversal over parameter tensors, and sparse embedding gradients.

use std::collections::BTreeMap;

use crate::numerics::{Matrix, Real};

/// Visits every tensor in a fixed, deterministic order.
pub trait Visit<T: Real> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>));
}

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_owned()
    } else {
        format!("{path}.{field}")
    }
}

impl<T: Real> Visit<T> for Matrix<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        f(path, self)
    }
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f(path, self)
    }
}

impl<T: Real, V: Visit<T>> Visit<T> for Vec<V> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        for (i, v) in self.iter().enumerate() {
            v.visit(&join(path, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for (i, v) in self.iter_mut().enumerate() {
            v.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

impl<T: Real, V: Visit<T>> Visit<T> for Option<V> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        if let Some(v) = self {
            v.visit(path, f);
        }
    }
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        if let Some(v) = self {
            v.visit_mut(path, f);
        }
    }
}

macro_rules! impl_visit {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl<T: $crate::numerics::Real> $crate::params::Visit<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                path: &str,
                f: &mut dyn FnMut(&str, &'a $crate::numerics::Matrix<T>),
            ) {
                $( $crate::params::Visit::visit(&self.$field, &$crate::params::join(path, stringify!($field)), f); )+
            }
            fn visit_mut(
                &mut self,
                path: &str,
                f: &mut dyn FnMut(&str, &mut $crate::numerics::Matrix<T>),
            ) {
                $( $crate::params::Visit::visit_mut(&mut self.$field, &$crate::params::join(path, stringify!($field)), f); )+
            }
        }
    };
}
pub(crate) use impl_visit;

pub fn param_count<T: Real>(p: &impl Visit<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, m| n += m.len());
    n
}

pub fn tensors<T: Real>(p: &impl Visit<T>) -> Vec<&Matrix<T>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| out.push(m));
    out
}

pub fn names<T: Real>(p: &impl Visit<T>) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |n, _| out.push(n.to_owned()));
    out
}

/// Same structure, all zeros.
pub fn zeros_like<T: Real, P: Visit<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, m| m.fill(T::zero()));
    z
}

/// Calls `f(param, grad)` for corresponding tensors of two same-shaped sets.
pub fn zip_mut<T: Real, P: Visit<T>, G: Visit<T>>(
    params: &mut P,
    grads: &G,
    mut f: impl FnMut(&str, &mut Matrix<T>, &Matrix<T>),
) {
    let g = tensors(grads);
    let mut i = 0;
    params.visit_mut("", &mut |name, m| {
        f(name, m, g[i]);
        i += 1;
    });
    assert_eq!(i, g.len(), "parameter/gradient structure mismatch");
}

pub fn flatten<T: Real>(p: &impl Visit<T>) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| {
        out.extend(m.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)))
    });
    out
}

/// Inverse of [`flatten`]; `values` must hold exactly [`param_count`] entries.
pub fn unflatten<T: Real>(p: &mut impl Visit<T>, values: &[f64]) {
    let mut at = 0;
    p.visit_mut("", &mut |_, m| {
        for v in m.data_mut() {
            *v = T::from_f64_lossy(values[at]);
            at += 1;
        }
    });
    assert_eq!(at, values.len(), "flattened length mismatch");
}

pub fn sum_sq<T: Real>(p: &impl Visit<T>) -> T {
    let mut s = T::zero();
    p.visit("", &mut |_, m| s += m.sum_sq());
    s
}

pub fn scale<T: Real>(p: &mut impl Visit<T>, k: T) {
    p.visit_mut("", &mut |_, m| m.scale(k));
}

pub fn add_assign<T: Real, P: Visit<T>>(acc: &mut P, other: &P) {
    zip_mut(acc, other, |_, a, b| a.add_assign(b));
}

/// Row-sparse gradients for hashed embedding tables, keyed by table id and
/// bucket. Ordered maps keep accumulation and updates deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrads<T: Real> {
    pub tables: Vec<BTreeMap<usize, Vec<T>>>,
}

impl<T: Real> SparseGrads<T> {
    pub fn new(n_tables: usize) -> Self {
        Self {
            tables: vec![BTreeMap::new(); n_tables],
        }
    }

    pub fn add(&mut self, table: usize, row: usize, grad: &[T]) {
        let slot = self.tables[table]
            .entry(row)
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        for (s, &g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    pub fn merge(&mut self, other: &SparseGrads<T>) {
        for (t, rows) in other.tables.iter().enumerate() {
            for (&r, g) in rows {
                self.add(t, r, g);
            }
        }
    }

    pub fn sum_sq(&self) -> T {
        self.tables
            .iter()
            .flat_map(|t| t.values())
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn scale(&mut self, k: T) {
        for t in &mut self.tables {
            for g in t.values_mut() {
                for v in g {
                    *v *= k;
                }
            }
        }
    }

    pub fn clear(&mut self) {
        for t in &mut self.tables {
            t.clear();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(BTreeMap::is_empty)
    }
}
