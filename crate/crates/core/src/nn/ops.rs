//! Forward-only versions of the differentiable primitives, for callers that
//! do not need a [`Graph`](super::Graph).

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `[m×k]·[k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Normalizes over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over last dim {d} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (out, _, _) = kernels::layer_norm_rows(x.data(), d, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), out)
}

/// Exact (erf-based) GeLU.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn softmax(x: &Tensor) -> Tensor {
    let data = kernels::softmax_rows(x.data(), x.last_dim());
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean (optionally class-weighted) negative log-likelihood.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], class_weights: Option<&[f32]>) -> Result<f32> {
    let mut g = super::Graph::inference();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels, class_weights)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let r = matmul(&Tensor::from_rows(&[&[1.0, 2.0]]), &Tensor::from_rows(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let err = matmul(&a, &Tensor::zeros(&[3, 1])).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let out = layer_norm(&Tensor::full(&[3], 1.0), &ones, &zeros, 1e-5).unwrap();
        close(out.data(), &[0.0, 0.0, 0.0], 0.0);

        let out = layer_norm(
            &Tensor::new(vec![2], vec![0.0, 2.0]).unwrap(),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            0.0,
        )
        .unwrap();
        close(out.data(), &[-1.0, 1.0], 1e-7);

        // Oracle: mean 2, var 2/3, (x-2)/sqrt(2/3+1e-5)·2 + 1.
        let var: f64 = 2.0 / 3.0;
        let expect: Vec<f32> = [1.0f64, 2.0, 3.0]
            .iter()
            .map(|x| ((x - 2.0) / (var + 1e-5).sqrt() * 2.0 + 1.0) as f32)
            .collect();
        close(&expect, &[-1.449, 1.0, 3.449], 1e-3);
        let out = layer_norm(
            &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            &Tensor::full(&[3], 2.0),
            &Tensor::full(&[3], 1.0),
            1e-5,
        )
        .unwrap();
        close(out.data(), &expect, 1e-4);

        assert!(layer_norm(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        let out = gelu(&Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 10.0).abs() < 1e-5);
        // 1·Φ(1), Φ(1) = 0.5·(1 + erf(1/√2)) = 0.841345
        assert!((out.data()[2] - 0.841_345).abs() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        close(s.data(), &[0.5, 0.5], 1e-7);
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        close(s.data(), &[0.5, 0.5], 1e-7);
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 3f32.ln()]).unwrap());
        close(s.data(), &[0.25, 0.75], 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&Tensor::from_rows(&[&[100.0, 0.0, 0.0]]), &[0], None).unwrap();
        assert!(l.abs() < 1e-6);
        let l = cross_entropy(&Tensor::zeros(&[2, 7]), &[3, 6], None).unwrap();
        assert!((l - 7f32.ln()).abs() < 1e-6);
        let l = cross_entropy(&Tensor::from_rows(&[&[0.0, 3f32.ln()]]), &[0], None).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &[3], None),
            Err(Error::Index(_))
        ));
        // Weighted mean: rows with labels 0 (nll ln2) and 1 (nll ln2·?)
        let logits = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 3f32.ln()]]);
        let w = [1.0, 3.0];
        let l = cross_entropy(&logits, &[0, 0], Some(&w)).unwrap();
        let expect = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((l as f64 - expect).abs() < 1e-6);
        let l = cross_entropy(&logits, &[0, 1], Some(&w)).unwrap();
        let expect = (2f64.ln() + 3.0 * (4.0f64 / 3.0).ln()) / 4.0;
        assert!((l as f64 - expect).abs() < 1e-6);
    }
}
