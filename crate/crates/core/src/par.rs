//! Reductions whose result is independent of the worker count.
//!
//! Floating-point sums are evaluated over fixed-size chunks in parallel and the
//! chunk partials are then added sequentially in index order.

use num_complex::Complex64;
use rayon::prelude::*;

pub const CHUNK: usize = 1 << 14;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partials.into_iter().sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `<a|b>` with `a` conjugated.
pub fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    debug_assert_eq!(a.len(), b.len());
    let partials: Vec<Complex64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p.conj() * q)
                .sum::<Complex64>()
        })
        .collect();
    partials.into_iter().sum()
}

pub fn cnorm(a: &[Complex64]) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .map(|x| x.iter().map(|p| p.norm_sqr()).sum::<f64>())
        .collect();
    partials.into_iter().sum::<f64>().sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| yc.iter_mut().zip(xc).for_each(|(p, q)| *p += alpha * q));
}

pub fn caxpy(alpha: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| yc.iter_mut().zip(xc).for_each(|(p, q)| *p += alpha * q));
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.par_chunks_mut(CHUNK)
        .for_each(|c| c.iter_mut().for_each(|p| *p *= alpha));
}

pub fn cscale(alpha: Complex64, x: &mut [Complex64]) {
    x.par_chunks_mut(CHUNK)
        .for_each(|c| c.iter_mut().for_each(|p| *p *= alpha));
}
