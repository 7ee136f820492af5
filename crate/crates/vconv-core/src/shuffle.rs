use alloc::vec::Vec;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frame-index permutation that rearranges consecutive chunks of
/// `chunk` frames (final chunk may be short) in uniformly random
/// order. Within a chunk, frame order is preserved.
pub fn chunk_permutation<R: Rng>(frames: usize, chunk: usize, rng: &mut R) -> Vec<usize> {
    let chunk = chunk.max(1);
    let n_chunks = frames.div_ceil(chunk);
    let mut order: Vec<usize> = (0..n_chunks).collect();
    // Fisher-Yates; uniform over chunk orderings.
    for i in (1..n_chunks).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut idx = Vec::with_capacity(frames);
    for &c in &order {
        let start = c * chunk;
        let end = (start + chunk).min(frames);
        idx.extend(start..end);
    }
    idx
}

/// Applies [`chunk_permutation`] to the time axis of a [C × T] tensor.
/// The multiset of frame columns is preserved exactly.
pub fn time_shuffle<T: Scalar, R: Rng>(x: &Tensor<T>, chunk: usize, rng: &mut R) -> Tensor<T> {
    assert_eq!(x.shape().len(), 2, "time_shuffle expects [C × T]");
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let idx = chunk_permutation(t, chunk, rng);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * t);
    for ch in 0..c {
        let row = &xd[ch * t..(ch + 1) * t];
        out.extend(idx.iter().map(|&i| row[i]));
    }
    Tensor::from_vec(&[c, t], out).expect("same element count")
}
