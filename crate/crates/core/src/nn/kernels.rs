//! Slice-level numeric kernels shared by the graph ops and the inference path.
//!
//! Reductions (mean, variance, softmax normalizer, log-sum-exp) accumulate in
//! `f64`; elementwise outputs are stored as `f32`.

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k` and
/// `b` logically `k×n`. `a_t`/`b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address: lhs m·k, rhs k·n, output m·n (row-major, unit column
    // stride).
    unsafe {
        matrixmultiply::sgemm(
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

/// Per-row layer normalization. Returns `(out, mean, rstd)` where the last two
/// hold one entry per row.
pub(crate) fn layer_norm_rows(
    x: &[f32],
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut out = vec![0.0f32; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let denom = (var + eps).sqrt();
        // Zero variance with eps = 0: every centred value is zero, so the
        // normalized row is zero and the output collapses to beta.
        let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            o[j] = (xhat * gamma[j] as f64 + beta[j] as f64) as f32;
        }
        means.push(mean as f32);
        rstds.push(rstd as f32);
    }
    (out, means, rstds)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via `erf`.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GeLU, `x·Φ(x)`.
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * normal_cdf(x)) as f32
}

/// d/dx of `x·Φ(x)`: `Φ(x) + x·φ(x)`.
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let x = x as f64;
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (normal_cdf(x) + x * pdf) as f32
}

/// Last-axis softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    if n == 0 {
        return out;
    }
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            let e = ((s - max) as f64).exp();
            *d = e as f32;
            sum += e;
        }
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (((s - max) as f64).exp() / sum) as f32;
        }
    }
    out
}

/// `log Σ exp(row)` in `f64`.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Permutes axes of a row-major array: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; nd];
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // Odometer over all but the last axis.
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Inverse of an axis permutation.
pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b with a stored as-is
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·bᵀ
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let axes = [2, 0, 1];
        let (out, out_shape) = permute(&data, &shape, &axes);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    let src = j * 12 + k * 4 + i;
                    assert_eq!(out[i * 6 + j * 3 + k], data[src]);
                }
            }
        }
        let (back, back_shape) = permute(&out, &out_shape, &invert_axes(&axes));
        assert_eq!(back_shape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }
}
