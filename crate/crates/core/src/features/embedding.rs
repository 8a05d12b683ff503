use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// FNV-1a of the key bytes, reduced modulo the bucket count.
pub fn bucket_of(key: &str, bucket_count: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(key.as_bytes());
    (h.finish() % bucket_count as u64) as usize
}

/// Hashed embedding table: `bucket_count × dim` learnable rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T: Real = f32> {
    pub name: String,
    pub rows: Matrix<T>,
}

impl<T: Real> EmbeddingTable<T> {
    /// Rows drawn from `uniform(−1/√dim, 1/√dim)`; the stream depends on the
    /// seed and the table name only.
    pub fn new(name: &str, bucket_count: usize, dim: usize, seed: u64) -> Result<Self> {
        if bucket_count == 0 || dim == 0 {
            return Err(Error::config(format!(
                "embedding table `{name}` needs positive bucket count and dim"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_salt(name));
        let bound = 1.0 / (dim as f64).sqrt();
        let rows = Matrix::from_fn(bucket_count, dim, |_, _| {
            T::from_f64_lossy(rng.gen_range(-bound..bound))
        });
        Ok(Self {
            name: name.to_owned(),
            rows,
        })
    }

    pub fn bucket_count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn bucket(&self, key: &str) -> usize {
        bucket_of(key, self.bucket_count())
    }

    /// The row for `key`. Unseen keys hash like any other key.
    pub fn embed_feature(&self, key: &str) -> &[T] {
        self.rows.row(self.bucket(key))
    }
}

fn name_salt(name: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    h.finish()
}

/// Named set of tables. Iteration order is by table name.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T: Real = f32> {
    tables: Vec<EmbeddingTable<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Embeddings<T> {
    pub fn new<'a>(
        names: impl IntoIterator<Item = &'a str>,
        bucket_count: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut sorted: Vec<&str> = names.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut tables = Vec::with_capacity(sorted.len());
        let mut index = BTreeMap::new();
        for (i, name) in sorted.into_iter().enumerate() {
            tables.push(EmbeddingTable::new(name, bucket_count, dim, seed)?);
            index.insert(name.to_owned(), i);
        }
        Ok(Self { tables, index })
    }

    pub fn from_tables(tables: Vec<EmbeddingTable<T>>) -> Self {
        let index = tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Self { tables, index }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no embedding table named `{name}`")))
    }

    pub fn table(&self, id: usize) -> &EmbeddingTable<T> {
        &self.tables[id]
    }

    pub fn table_mut(&mut self, id: usize) -> &mut EmbeddingTable<T> {
        &mut self.tables[id]
    }

    pub fn tables(&self) -> &[EmbeddingTable<T>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable<T>] {
        &mut self.tables
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.rows.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Embeddings<U> {
        Embeddings {
            tables: self
                .tables
                .iter()
                .map(|t| EmbeddingTable {
                    name: t.name.clone(),
                    rows: t.rows.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> crate::params::Visit<T> for Embeddings<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Matrix<T>)) {
        for t in &self.tables {
            f(&crate::params::join(path, &t.name), &t.rows);
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for t in &mut self.tables {
            f(&crate::params::join(path, &t.name), &mut t.rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_row() {
        let t = EmbeddingTable::<f32>::new("item", 1024, 8, 7).unwrap();
        assert_eq!(t.embed_feature("item_42"), t.embed_feature("item_42"));
    }

    #[test]
    fn single_bucket_forces_collision() {
        let t = EmbeddingTable::<f32>::new("item", 1, 4, 7).unwrap();
        assert_eq!(t.embed_feature("a"), t.embed_feature("zzz"));
    }

    #[test]
    fn lookup_matches_rehash_oracle() {
        // Independent FNV-1a 64 over the key bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in "item_42".bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let t = EmbeddingTable::<f32>::new("item", 1 << 17, 8, 7).unwrap();
        let row = (h % (1u64 << 17)) as usize;
        assert_eq!(t.embed_feature("item_42"), t.rows.row(row));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EmbeddingTable::<f32>::new("cat", 64, 16, 3).unwrap();
        let b = EmbeddingTable::<f32>::new("cat", 64, 16, 3).unwrap();
        let other = EmbeddingTable::<f32>::new("cat", 64, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.rows.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn collection_is_name_ordered() {
        let e = Embeddings::<f32>::new(["zeta", "alpha", "zeta"], 4, 2, 0).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.id("alpha").unwrap(), 0);
        assert!(e.id("missing").is_err());
    }
}
