//! Small vector helpers shared across modules. Dimensions here are tiny
//! (state and action vectors), so everything stays on slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Overflow-safe Euclidean distance (hypot accumulation). Slower than
/// [`dist`]; used on diagnostic paths where inputs may be extreme.
#[inline]
pub fn dist_stable(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0_f64, |acc, (x, y)| acc.hypot(x - y))
}

/// `dst += c * src`.
#[inline]
pub fn add_scaled(dst: &mut [f64], c: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Rescales `v` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
#[inline]
pub fn clip_norm(v: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(v);
    if n > max_norm && n > 0.0 {
        let f = max_norm / n;
        for x in v.iter_mut() {
            *x *= f;
        }
    }
    n
}
