//! Per-layer key/value store with a shared logical length.
//!
//! Storage for `capacity` rows per layer is allocated up front. Rows are
//! written in two phases during a forward pass: [`KvCache::stage`] writes a
//! layer's new rows past the logical end (visible to that layer's attention
//! through [`KvCache::keys_through`]), and [`KvCache::commit`] advances the
//! logical length once every layer has been staged. A failed pass never
//! commits, so the visible contents stay consistent across layers.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{Real, Tensor2};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T = f32> {
    width: usize,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> KvCache<T> {
    /// Empty cache for `layers` layers of `width`-wide rows, at most
    /// `capacity` rows each.
    pub fn new(layers: usize, width: usize, capacity: usize) -> Self {
        Self {
            width,
            capacity,
            len: 0,
            keys: (0..layers).map(|_| vec![T::zero(); capacity * width]).collect(),
            values: (0..layers).map(|_| vec![T::zero(); capacity * width]).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    /// Logical length shared by all layers.
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keeps the first `keep` rows; rows stay bit-identical.
    pub fn truncate(&mut self, keep: usize) -> Result<()> {
        if keep > self.len {
            return Err(Error::Truncate { keep, len: self.len });
        }
        self.len = keep;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    /// Appends the same number of rows to every layer.
    pub fn append(&mut self, keys: &[Tensor2<T>], values: &[Tensor2<T>]) -> Result<()> {
        if keys.len() != self.layers() || values.len() != self.layers() {
            return Err(Error::Shape {
                op: "kv append",
                detail: alloc::format!(
                    "{} key / {} value tensors for {} layers",
                    keys.len(),
                    values.len(),
                    self.layers()
                ),
            });
        }
        let rows = keys.first().map_or(0, Tensor2::rows);
        for (k, v) in keys.iter().zip(values) {
            if k.shape() != (rows, self.width) || v.shape() != (rows, self.width) {
                return Err(Error::Shape {
                    op: "kv append",
                    detail: alloc::format!(
                        "expected {rows}x{} per layer, got {:?} / {:?}",
                        self.width,
                        k.shape(),
                        v.shape()
                    ),
                });
            }
        }
        self.ensure_room(rows)?;
        for (layer, (k, v)) in keys.iter().zip(values).enumerate() {
            self.stage(layer, k, v)?;
        }
        self.commit(rows)
    }

    pub fn ensure_room(&self, rows: usize) -> Result<()> {
        if self.len + rows > self.capacity {
            return Err(Error::Capacity { requested: self.len + rows, capacity: self.capacity });
        }
        Ok(())
    }

    /// Writes rows just past the logical end of one layer without making
    /// them visible to [`KvCache::keys`].
    pub fn stage(&mut self, layer: usize, keys: &Tensor2<T>, values: &Tensor2<T>) -> Result<()> {
        let rows = keys.rows();
        self.ensure_room(rows)?;
        let w = self.width;
        let range = self.len * w..(self.len + rows) * w;
        self.keys[layer][range.clone()].copy_from_slice(keys.data());
        self.values[layer][range].copy_from_slice(values.data());
        Ok(())
    }

    /// Makes `rows` staged rows visible in every layer.
    pub fn commit(&mut self, rows: usize) -> Result<()> {
        self.ensure_room(rows)?;
        self.len += rows;
        Ok(())
    }

    /// Committed keys of one layer, `len × width` row-major.
    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer][..self.len * self.width]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer][..self.len * self.width]
    }

    /// Keys including staged rows up to `end` (exclusive).
    pub fn keys_through(&self, layer: usize, end: usize) -> &[T] {
        &self.keys[layer][..end * self.width]
    }

    pub fn values_through(&self, layer: usize, end: usize) -> &[T] {
        &self.values[layer][..end * self.width]
    }

    /// Copies one committed row `(key, value)` out of a layer.
    pub fn row(&self, layer: usize, index: usize) -> Option<(&[T], &[T])> {
        if index >= self.len {
            return None;
        }
        let r = index * self.width..(index + 1) * self.width;
        Some((&self.keys[layer][r.clone()], &self.values[layer][r]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn rows(n: usize, w: usize, seed: u64) -> Tensor2<f32> {
        Tensor2::randn(n, w, 1.0, &mut SeededRng::new(seed))
    }

    fn append_same(cache: &mut KvCache<f32>, t: &Tensor2<f32>) -> Result<()> {
        let layers = cache.layers();
        let ks: Vec<_> = (0..layers).map(|_| t.clone()).collect();
        cache.append(&ks, &ks)
    }

    #[test]
    fn truncate_full_and_empty() {
        let mut c = KvCache::new(2, 3, 16);
        append_same(&mut c, &rows(10, 3, 1)).unwrap();
        let before = c.clone();
        c.truncate(10).unwrap();
        assert_eq!(c, before);
        c.truncate(0).unwrap();
        assert!(c.is_empty());
        assert!(c.keys(0).is_empty());
    }

    #[test]
    fn truncate_then_readback_is_bit_identical() {
        let mut c = KvCache::new(2, 4, 16);
        let stored = rows(10, 4, 2);
        append_same(&mut c, &stored).unwrap();
        c.truncate(4).unwrap();
        let expect = &stored.data()[..16];
        for layer in 0..2 {
            assert_eq!(c.keys(layer), expect);
            assert_eq!(c.values(layer), expect);
        }
    }

    #[test]
    fn truncate_past_length_rejected() {
        let mut c = KvCache::<f32>::new(1, 2, 8);
        append_same(&mut c, &rows(3, 2, 3)).unwrap();
        assert_eq!(c.truncate(4), Err(Error::Truncate { keep: 4, len: 3 }));
    }

    #[test]
    fn append_twice_keeps_first_rows() {
        let mut c = KvCache::new(3, 2, 8);
        let a = rows(1, 2, 4);
        append_same(&mut c, &a).unwrap();
        assert_eq!(c.len(), 1);
        let s = rows(3, 2, 5);
        let mut c = KvCache::new(3, 2, 8);
        append_same(&mut c, &s).unwrap();
        let first: Vec<f32> = c.keys(1).to_vec();
        append_same(&mut c, &rows(3, 2, 6)).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(&c.keys(1)[..6], first.as_slice());
    }

    #[test]
    fn append_past_capacity_rejected() {
        let mut c = KvCache::new(1, 2, 4);
        append_same(&mut c, &rows(4, 2, 7)).unwrap();
        let err = append_same(&mut c, &rows(1, 2, 8)).unwrap_err();
        assert_eq!(err, Error::Capacity { requested: 5, capacity: 4 });
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn staged_rows_stay_invisible_until_commit() {
        let mut c = KvCache::new(2, 2, 4);
        let r = rows(2, 2, 9);
        c.stage(0, &r, &r).unwrap();
        assert_eq!(c.len(), 0);
        assert_eq!(c.keys_through(0, 2), r.data());
        c.commit(2).unwrap();
        assert_eq!(c.keys(0), r.data());
    }
}
