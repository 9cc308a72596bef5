//! Summation and chunked-parallel helpers.
//!
//! Every reduction runs over fixed-size chunks whose partial results are
//! combined in index order, so results are identical for any thread count.

use std::ops::Range;

use rayon::prelude::*;

/// Elements per parallel work item. A multiple of 8 so that chunk
/// boundaries coincide with packed-mask byte boundaries.
pub const CHUNK: usize = 1 << 14;

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Splits `0..len` into [`CHUNK`]-sized ranges and maps each in parallel,
/// returning results in range order.
pub fn map_chunks<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunks = len.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(len)))
        .collect()
}

/// Deterministic parallel sum of `term(i)` for `i in 0..len`.
pub fn sum_terms<F>(len: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let partial = map_chunks(len, |r| {
        let buf: Vec<f64> = r.map(&term).collect();
        pairwise_sum(&buf)
    });
    pairwise_sum(&partial)
}

/// Deterministic parallel sums of two terms evaluated together.
///
/// Both sums share one chunking and one pairwise tree, so identical term
/// sequences produce bit-identical sums.
pub fn sum_term_pairs<F>(len: usize, term: F) -> (f64, f64)
where
    F: Fn(usize) -> (f64, f64) + Sync + Send,
{
    let partial = map_chunks(len, |r| {
        let (a, b): (Vec<f64>, Vec<f64>) = r.map(&term).unzip();
        (pairwise_sum(&a), pairwise_sum(&b))
    });
    let (a, b): (Vec<f64>, Vec<f64>) = partial.into_iter().unzip();
    (pairwise_sum(&a), pairwise_sum(&b))
}

/// Fills `out[i] = f(i)` in parallel.
pub fn fill<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let start = c * CHUNK;
        for (j, slot) in chunk.iter_mut().enumerate() {
            *slot = f(start + j);
        }
    });
}

/// Correctly rounded sum of `values`: the float nearest the exact real
/// sum, ties to even. The result cannot depend on the order of `values`.
///
/// Follows Shewchuk's partials method as used by Python's `math.fsum`.
/// Non-finite inputs fall back to the plain sum.
pub fn rounded_sum(values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum();
    }
    let mut partials: Vec<f64> = Vec::with_capacity(4);
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: the remaining partials decide the rounding direction.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Sign of the exact real-number sum of `values`: -1, 0 or 1.
///
/// The rounded sum decides whenever it clears the worst-case error bound;
/// otherwise the sum is rebuilt as a non-overlapping expansion, which is
/// exact.
pub fn exact_sum_sign(values: &[f64]) -> i8 {
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    for &v in values {
        sum += v;
        abs_sum += v.abs();
    }
    let bound = (values.len() as f64) * f64::EPSILON * abs_sum;
    if sum.abs() > bound {
        return if sum > 0.0 { 1 } else { -1 };
    }
    let expansion = grow_expansion(values);
    match expansion.iter().rev().find(|&&c| c != 0.0) {
        Some(&top) if top > 0.0 => 1,
        Some(_) => -1,
        None => 0,
    }
}

/// Shewchuk's GROW-EXPANSION with zero elimination; components come out in
/// increasing magnitude and sum exactly to the input total.
fn grow_expansion(values: &[f64]) -> Vec<f64> {
    let mut expansion: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        let mut q = v;
        let mut next = Vec::with_capacity(expansion.len() + 1);
        for &e in &expansion {
            let (s, err) = two_sum(q, e);
            if err != 0.0 {
                next.push(err);
            }
            q = s;
        }
        if q != 0.0 {
            next.push(q);
        }
        expansion = next;
    }
    expansion
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}
