//! Raw numeric kernels shared by the graph operations.

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape
/// `k×n`, all row-major. `trans_a` means `a` is stored `k×m`; `trans_b` means
/// `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // describe in-bounds row-major (or transposed) layouts of those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

/// `0.5 * (1 + tanh(u))` written as the logistic of `2u`, which needs one `exp`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// In-place numerically stable softmax of one row. Entries with
/// `valid[i] == false` get probability exactly zero. A row with no valid
/// entry becomes all zeros.
pub(crate) fn softmax_row(row: &mut [f64], valid: Option<&[bool]>) {
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in row.iter().enumerate() {
        if is_valid(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (i, x) in row.iter_mut().enumerate() {
        if is_valid(i) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}
