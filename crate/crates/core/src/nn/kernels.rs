//! Dense row-major kernels. Reductions use four independent accumulators so
//! the compiler can vectorize them; the summation order is fixed, so results
//! are reproducible run to run.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[r, o] = b[o] + Σ_i w[o, i] x[r, i]` for every row of `x`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], n_in: usize, out: &mut [f64]) {
    let n_out = b.len();
    for (xr, or) in x.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        for (o, slot) in or.iter_mut().enumerate() {
            *slot = b[o] + dot(&w[o * n_in..(o + 1) * n_in], xr);
        }
    }
}

/// Accumulates `dw += dzᵀ x` and `db += Σ_r dz[r]`.
pub fn dense_param_grad(dz: &[f64], x: &[f64], n_in: usize, dw: &mut [f64], db: &mut [f64]) {
    let n_out = db.len();
    for (dzr, xr) in dz.chunks_exact(n_out).zip(x.chunks_exact(n_in)) {
        for (o, &g) in dzr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, &mut dw[o * n_in..(o + 1) * n_in]);
            }
            db[o] += g;
        }
    }
}

/// `dx = dz w`, overwriting `dx`.
pub fn dense_input_grad(dz: &[f64], w: &[f64], n_in: usize, n_out: usize, dx: &mut [f64]) {
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (dzr, dxr) in dz.chunks_exact(n_out).zip(dx.chunks_exact_mut(n_in)) {
        for (o, &g) in dzr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[o * n_in..(o + 1) * n_in], dxr);
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}
