/// Smallest pivot magnitude accepted by [`solve`].
pub const MIN_PIVOT: f64 = 1e-14;

/// Thomas algorithm for `sub[k] x[k-1] + diag[k] x[k] + sup[k] x[k+1] = rhs[k]`.
///
/// `sub[0]` and `sup[n-1]` are ignored. `scratch` must have length `n`.
/// On a pivot smaller than [`MIN_PIVOT`] returns `Err((row, pivot))`.
pub fn solve(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
    x: &mut [f64],
    scratch: &mut [f64],
) -> Result<(), (usize, f64)> {
    let n = diag.len();
    debug_assert!(sub.len() == n && sup.len() == n && rhs.len() == n);
    debug_assert!(x.len() == n && scratch.len() == n);
    if n == 0 {
        return Ok(());
    }
    let mut pivot = diag[0];
    if pivot.abs() < MIN_PIVOT || !pivot.is_finite() {
        return Err((0, pivot));
    }
    scratch[0] = sup[0] / pivot;
    x[0] = rhs[0] / pivot;
    for k in 1..n {
        pivot = diag[k] - sub[k] * scratch[k - 1];
        if pivot.abs() < MIN_PIVOT || !pivot.is_finite() {
            return Err((k, pivot));
        }
        scratch[k] = sup[k] / pivot;
        x[k] = (rhs[k] - sub[k] * x[k - 1]) / pivot;
    }
    for k in (0..n - 1).rev() {
        x[k] -= scratch[k] * x[k + 1];
    }
    Ok(())
}
