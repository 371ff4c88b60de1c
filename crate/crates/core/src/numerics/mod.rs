//! Dense tensors and a reverse-mode tape.
//!
//! The tape is generic over [`Scalar`] so the same recorded program can be
//! differentiated in `f64` (gradients) or in [`Dual`] (exact Hessian-vector
//! products by forward-over-reverse differentiation).

mod diff;
mod scalar;
mod tape;
mod tensor;

pub use diff::{flatten, gradient, hvp_exact, hvp_finite_difference, unflatten, Objective};
pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy: every position is masked")]
    AllMasked,
    #[error("tape already consumed by a non-retaining backward pass")]
    TapeConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of the loss value, independent of the backward pass.
    fn finite_difference<O: Objective>(obj: &O, params: &[Tensor], h: f64) -> Vec<Vec<f64>> {
        let value = |ps: &[Tensor]| {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let l = obj.loss(&mut tape, &vars).unwrap();
            tape.scalar(l)
        };
        let mut out = Vec::new();
        for (pi, p) in params.iter().enumerate() {
            let mut g = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[j] -= h;
                g.push((value(&plus) - value(&minus)) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    fn max_rel_err<O: Objective>(obj: &O, params: &[Tensor]) -> f64 {
        let (_, analytic) = gradient(obj, params).unwrap();
        let numeric = finite_difference(obj, params, 1e-5);
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            for (&x, &y) in a.data().iter().zip(n) {
                let denom = x.abs().max(y.abs()).max(1e-7);
                worst = worst.max((x - y).abs() / denom);
            }
        }
        worst
    }

    macro_rules! gradcheck {
        ($name:ident, $shapes:expr, $out_shape:expr, |$tape:ident, $p:ident| $body:expr) => {
            #[test]
            fn $name() {
                struct Obj {
                    weights: Tensor,
                }
                impl Objective for Obj {
                    fn loss<T: Scalar>(&self, $tape: &mut Tape<T>, $p: &[Var]) -> Result<Var, NumericsError> {
                        let out: Var = $body?;
                        let w = $tape.constant(self.weights.map(T::from_f64));
                        let prod = $tape.mul(out, w)?;
                        Ok($tape.sum(prod))
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let shapes: Vec<Vec<usize>> = $shapes;
                let params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let out_shape: Vec<usize> = $out_shape;
                let obj = Obj {
                    weights: random(&mut rng, &out_shape),
                };
                let err = max_rel_err(&obj, &params);
                assert!(err <= 1e-6, "max relative error {err:e}");
            }
        };
    }

    gradcheck!(grad_matmul, vec![vec![4, 5], vec![5, 3]], vec![4, 3], |t, p| t.matmul(p[0], p[1]));
    gradcheck!(grad_matmul_nt, vec![vec![4, 5], vec![3, 5]], vec![4, 3], |t, p| t.matmul_nt(p[0], p[1]));
    gradcheck!(grad_add, vec![vec![3, 4], vec![3, 4]], vec![3, 4], |t, p| t.add(p[0], p[1]));
    gradcheck!(grad_add_row, vec![vec![3, 4], vec![4]], vec![3, 4], |t, p| t.add_row(p[0], p[1]));
    gradcheck!(grad_mul, vec![vec![3, 4], vec![3, 4]], vec![3, 4], |t, p| t.mul(p[0], p[1]));
    gradcheck!(grad_scale, vec![vec![3, 4]], vec![3, 4], |t, p| Ok::<_, NumericsError>(t.scale(p[0], -1.7)));
    gradcheck!(grad_softmax, vec![vec![3, 6]], vec![3, 6], |t, p| t.softmax(p[0]));
    gradcheck!(grad_layer_norm, vec![vec![3, 6], vec![6], vec![6]], vec![3, 6], |t, p| t
        .layer_norm(p[0], p[1], p[2], 1e-5));
    gradcheck!(grad_gelu, vec![vec![3, 5]], vec![3, 5], |t, p| Ok::<_, NumericsError>(t.gelu(p[0])));
    gradcheck!(grad_embedding, vec![vec![6, 3]], vec![4, 3], |t, p| t.embedding(p[0], &[5, 0, 5, 2]));
    gradcheck!(grad_sigmoid, vec![vec![2, 5]], vec![2, 5], |t, p| Ok::<_, NumericsError>(t.sigmoid(p[0])));
    gradcheck!(grad_concat_rows, vec![vec![2, 3], vec![1, 3]], vec![3, 3], |t, p| t.concat_rows(&[p[0], p[1]]));
    gradcheck!(grad_concat_cols, vec![vec![2, 3], vec![2, 1]], vec![2, 4], |t, p| t.concat_cols(&[p[0], p[1]]));
    gradcheck!(grad_slice_rows, vec![vec![4, 3]], vec![2, 3], |t, p| t.slice_rows(p[0], 1, 3));
    gradcheck!(grad_slice_cols, vec![vec![3, 5]], vec![3, 2], |t, p| t.slice_cols(p[0], 2, 4));
    gradcheck!(grad_sum_cols, vec![vec![3, 5]], vec![3, 1], |t, p| t.sum_cols(p[0]));
    gradcheck!(grad_mean, vec![vec![3, 5]], vec![], |t, p| Ok::<_, NumericsError>(t.mean(p[0])));
    gradcheck!(grad_cross_entropy, vec![vec![4, 5]], vec![], |t, p| t
        .cross_entropy(p[0], &[Some(1), None, Some(4), Some(1)]));
    gradcheck!(grad_bce, vec![vec![5, 1]], vec![], |t, p| t
        .bce_with_logits(p[0], &[1.0, 0.0, 1.0, 0.0, 0.0]));

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::matrix(1, 8, vec![2.5; 8]).unwrap());
        let y = t.softmax(x).unwrap();
        assert!(t.value(y).data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.constant(random(&mut rng, &[4, 16]).map(|v| 3.0 * v + 1.0));
        let g = t.constant(Tensor::new(vec![16], vec![1.0; 16]).unwrap());
        let b = t.constant(Tensor::zeros(&[16]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        for row in t.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_square() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y, false).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        // f(w) = sum(w∘a) + sum(w∘b) has gradient a + b.
        let mut t = Tape::<f64>::new();
        let w = t.param(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let a = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let b = t.constant(Tensor::matrix(1, 3, vec![-4.0, 0.5, 0.25]).unwrap());
        let wa = t.mul(w, a).unwrap();
        let wb = t.mul(w, b).unwrap();
        let sa = t.sum(wa);
        let sb = t.sum(wb);
        let total = t.add(sa, sb).unwrap();
        let g = t.backward(total, false).unwrap();
        assert_eq!(g.get(w).unwrap(), &[-3.0, 2.5, 3.25]);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn backward_contracts() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(t.backward(x, false).unwrap_err(), NumericsError::NonScalarLoss(vec![2, 2]));
        let s = t.sum(x);
        t.backward(s, true).unwrap();
        t.backward(s, false).unwrap();
        assert_eq!(t.backward(s, false).unwrap_err(), NumericsError::TapeConsumed);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::zeros(&[2, 3]));
        let b = t.param(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch between [2, 3] and [2, 3]");
        let c = t.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(NumericsError::ShapeMismatch { .. })));
        assert_eq!(t.cross_entropy(a, &[None, None]).unwrap_err(), NumericsError::AllMasked);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[5, 7]);
        let w = random(&mut rng, &[7, 4]);
        let run = || {
            let mut t = Tape::<f64>::new();
            let xv = t.param(x.clone());
            let wv = t.param(w.clone());
            let h = t.matmul(xv, wv).unwrap();
            let s = t.softmax(h).unwrap();
            let l = t.cross_entropy(s, &[Some(0), Some(1), Some(2), Some(3), None]).unwrap();
            let g = t.backward(l, false).unwrap();
            (g.get(xv).unwrap().to_vec(), g.get(wv).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    struct Quadratic {
        diag: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn loss<T: Scalar>(&self, t: &mut Tape<T>, p: &[Var]) -> Result<Var, NumericsError> {
            let n = self.diag.len();
            let a = t.constant(Tensor::matrix(1, n, self.diag.iter().map(|&d| T::from_f64(0.5 * d)).collect())?);
            let ww = t.mul(p[0], p[0])?;
            let weighted = t.mul(ww, a)?;
            Ok(t.sum(weighted))
        }
    }

    #[test]
    fn hvp_of_quadratic_is_exact() {
        let q = Quadratic { diag: vec![3.0, 1.0] };
        let w = vec![Tensor::matrix(1, 2, vec![0.4, -1.1]).unwrap()];
        let v = vec![Tensor::matrix(1, 2, vec![2.0, -5.0]).unwrap()];
        let hv = hvp_exact(&q, &w, &v).unwrap();
        assert_eq!(hv[0].data(), &[6.0, -5.0]);
        let fd = hvp_finite_difference(&q, &w, &v).unwrap();
        assert!((fd[0].data()[0] - 6.0).abs() < 1e-6);
        let zero = vec![Tensor::zeros(&[1, 2])];
        assert!(hvp_exact(&q, &w, &zero).is_err());
    }

    struct Nonlinear;

    impl Objective for Nonlinear {
        fn loss<T: Scalar>(&self, t: &mut Tape<T>, p: &[Var]) -> Result<Var, NumericsError> {
            let h = t.matmul(p[0], p[1])?;
            let h = t.gelu(h);
            let n = t.layer_norm(h, p[2], p[3], 1e-5)?;
            let s = t.softmax(n)?;
            let l = t.cross_entropy(s, &[Some(1), Some(0), Some(2)])?;
            let z = t.sum_cols(h)?;
            let b = t.bce_with_logits(z, &[1.0, 0.0, 1.0])?;
            let b = t.scale(b, 0.3);
            t.add(l, b)
        }
    }

    #[test]
    fn exact_and_finite_difference_hvp_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[3]),
            random(&mut rng, &[3]),
        ];
        let v: Vec<Tensor> = params.iter().map(|p| random(&mut rng, p.shape())).collect();
        let exact = flatten(&hvp_exact(&Nonlinear, &params, &v).unwrap());
        let fd = flatten(&hvp_finite_difference(&Nonlinear, &params, &v).unwrap());
        let scale = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = exact.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "relative difference {}", diff / scale);
        let back = unflatten(&exact, &params).unwrap();
        assert_eq!(back[1].shape(), &[4, 3]);
    }
}
