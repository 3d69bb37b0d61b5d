//! Flat parameter storage with named segments.
//!
//! All weights of a model live in one contiguous buffer. Layers hold
//! [`ParamId`] handles and reshape their segment on demand. The flat layout
//! keeps the optimizer, checkpointing and finite-difference probing trivial.

use super::Scalar;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    data: Vec<F>,
    segments: Vec<Segment>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            data: Vec::new(),
            segments: Vec::new(),
        }
    }

    /// Reserves a zero-initialized segment and returns its handle.
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.resize(offset + len, F::zero());
        self.segments.push(Segment {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
        });
        ParamId(self.segments.len() - 1)
    }

    /// Fills a segment with samples from U(−bound, bound).
    pub fn init_uniform<R: Rng>(&mut self, id: ParamId, bound: f64, rng: &mut R) {
        for v in self.slice_mut(id) {
            *v = F::from_f64(rng.random_range(-bound..bound));
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn segment(&self, id: ParamId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.segments.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.segments.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn slice(&self, id: ParamId) -> &[F] {
        let seg = &self.segments[id.0];
        &self.data[seg.offset..seg.offset + seg.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [F] {
        let seg = &self.segments[id.0];
        let (off, len) = (seg.offset, seg.len());
        &mut self.data[off..off + len]
    }

    /// Views a segment as a matrix of the given dimensions.
    pub fn view2(&self, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        let s = self.slice(id);
        debug_assert_eq!(s.len(), rows * cols);
        ArrayView2::from_shape((rows, cols), s).expect("segment shape mismatch")
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(self.slice(id))
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the store to another scalar type (same layout). Widening
    /// `f32 → f64` is exact.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(Scalar::to_f64(v)))
                .collect(),
            segments: self.segments.clone(),
        }
    }
}

/// Gradient buffer matching a [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    data: Vec<F>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            data: vec![F::zero(); store.len()],
        }
    }

    pub fn reset(&mut self) {
        self.data.fill(F::zero());
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn slice(&self, store: &ParamStore<F>, id: ParamId) -> &[F] {
        let seg = store.segment(id);
        &self.data[seg.offset..seg.offset + seg.len()]
    }

    pub fn slice_mut(&mut self, store: &ParamStore<F>, id: ParamId) -> &mut [F] {
        let seg = store.segment(id);
        &mut self.data[seg.offset..seg.offset + seg.len()]
    }

    pub fn view2_mut(
        &mut self,
        store: &ParamStore<F>,
        id: ParamId,
        rows: usize,
        cols: usize,
    ) -> ArrayViewMut2<'_, F> {
        let s = self.slice_mut(store, id);
        debug_assert_eq!(s.len(), rows * cols);
        ArrayViewMut2::from_shape((rows, cols), s).expect("segment shape mismatch")
    }

    /// Scales every gradient entry, used for batch averaging.
    pub fn scale(&mut self, factor: F) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    /// Adds another gradient buffer elementwise.
    pub fn add_assign(&mut self, other: &Grads<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alloc_and_views() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.alloc("w", &[2, 3]);
        let b = store.alloc("b", &[3]);
        assert_eq!(store.len(), 9);
        assert_eq!(store.segment(a).offset, 0);
        assert_eq!(store.segment(b).offset, 6);
        assert_eq!(store.view2(a, 2, 3).dim(), (2, 3));
        assert_eq!(store.find("b"), Some(b));
    }

    #[test]
    fn uniform_init_is_seeded() {
        let mut s1: ParamStore<f32> = ParamStore::new();
        let mut s2: ParamStore<f32> = ParamStore::new();
        let id1 = s1.alloc("w", &[16]);
        let id2 = s2.alloc("w", &[16]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        s1.init_uniform(id1, 0.5, &mut r1);
        s2.init_uniform(id2, 0.5, &mut r2);
        assert_eq!(s1.data(), s2.data());
        assert!(s1.data().iter().all(|v| v.abs() <= 0.5));
        assert!(s1.data().iter().any(|v| *v != 0.0));
    }
}
