//! Dense tensors with reverse-mode differentiation.
//!
//! Every learned stage of the matcher is composed from the primitives on
//! [`Tape`]. Values are `f64` throughout.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many, CoordSelection};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Normalization flavor for [`normalize`].
#[derive(Clone, Copy, Debug)]
pub enum NormMode {
    /// Plain standardization of each row.
    Instance,
    /// Standardization followed by a learnable per-feature gain and bias.
    Layer { gain: Var, bias: Var },
}

pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.matmul(a, b)
}

pub fn leaky_relu(tape: &mut Tape, x: Var, slope: f64) -> Var {
    tape.leaky_relu(x, slope)
}

/// Standardizes every row over its features; layer mode adds the affine map.
pub fn normalize(tape: &mut Tape, x: Var, mode: NormMode, epsilon: f64) -> Result<Var> {
    let y = tape.normalize_rows(x, epsilon);
    match mode {
        NormMode::Instance => Ok(y),
        NormMode::Layer { gain, bias } => {
            let scaled = tape.mul_row(y, gain)?;
            tape.add_row(scaled, bias)
        }
    }
}

pub fn row_softmax(tape: &mut Tape, x: Var) -> Var {
    tape.row_softmax(x)
}

pub fn backward(tape: &Tape, seed: Var) -> Result<Gradients> {
    tape.backward(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    /// Keeps sampled values at least `margin` away from zero.
    fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
        t.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
    }

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![2.0, -1.0, 0.0]));
        let y = leaky_relu(&mut t, x, 0.01);
        assert_eq!(t.value(y).data(), &[2.0, -0.01, 0.0]);
        // derivative at 0 is the positive-side value
        let s = t.sum(y);
        let g = t.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[1.0, 0.01, 1.0]);
    }

    #[test]
    fn normalize_cases() {
        let eps = 1e-5;
        for layer in [false, true] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::row(vec![5.0; 4]));
            let mode = if layer {
                NormMode::Layer {
                    gain: t.leaf(Tensor::row(vec![1.0; 4])),
                    bias: t.leaf(Tensor::row(vec![0.0; 4])),
                }
            } else {
                NormMode::Instance
            };
            let y = normalize(&mut t, x, mode, eps).unwrap();
            assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        }

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![-1.0, 1.0]));
        let y = normalize(&mut t, x, NormMode::Instance, eps).unwrap();
        let s = 1.0 / (1.0 + eps).sqrt();
        assert!((t.value(y).get(0, 0) + s).abs() < 1e-15);
        assert!((t.value(y).get(0, 1) - s).abs() < 1e-15);

        let mut t = Tape::new();
        let x = t.leaf(random(4, 8, 3));
        let y = normalize(&mut t, x, NormMode::Instance, eps).unwrap();
        let (xv, yv) = (t.value(x).clone(), t.value(y).clone());
        for r in 0..4 {
            let row = yv.row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let xr = xv.row_slice(r);
            let xm = xr.iter().sum::<f64>() / 8.0;
            let xvar = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - xvar / (xvar + eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap());
        let y = row_softmax(&mut t, x);
        let v = t.value(y);
        assert_eq!(v.row_slice(0), &[0.5, 0.5]);
        // exp(-1000) underflows to zero in any precision we could compare against
        assert!((v.get(1, 0) - 1.0).abs() < 1e-12 && v.get(1, 1).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.leaf(random(6, 9, 11).map(|v| v * 30.0));
        let y = row_softmax(&mut t, x);
        for r in 0..6 {
            let row = t.value(y).row_slice(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_simple_rules() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x).item(), 6.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.leaf(Tensor::scalar(5.0));
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!((g.get(x).item(), g.get(y).item()), (5.0, 2.0));

        // unused node gets a zero gradient; non-scalar seed is rejected
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let unused = t.leaf(Tensor::zeros(2, 2));
        let y = t.scale(x, 3.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(2, 2));
        assert!(t.backward(unused).is_err());
    }

    #[test]
    fn gradcheck_matmul_and_leaky() {
        let w = random(3, 3, 5);
        let err = gradient_check(
            |t, x| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(x, wv)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &random(3, 3, 6),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul gradcheck {err}");

        let err = gradient_check(
            |t, x| {
                let y = t.leaky_relu(x, 0.01);
                Ok(t.sum(y))
            },
            &away_from_zero(random(4, 4, 7), 1e-3),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "leaky gradcheck {err}");

        let err = gradient_check(|t, _x| Ok(t.leaf(Tensor::scalar(4.2))), &random(2, 2, 1), 1e-5)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every primitive against central differences.
    #[test]
    fn gradcheck_every_primitive() {
        type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Vec<Tensor>, Case)> = vec![
            ("transpose", vec![random(2, 3, 1)], Box::new(|t, v| {
                let y = t.transpose(v[0]);
                let w = t.leaf(random(3, 2, 9));
                let z = t.mul(y, w)?;
                Ok(t.sum(z))
            })),
            ("add_sub_mul", vec![random(3, 3, 2), random(3, 3, 3)], Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                let d = t.scale(c, 0.7);
                let e = t.add_scalar(d, 1.5);
                let f = t.mul(e, e)?;
                Ok(t.sum(f))
            })),
            ("broadcasts", vec![random(3, 4, 4), random(1, 4, 5), random(3, 1, 6)], Box::new(|t, v| {
                let a = t.add_row(v[0], v[1])?;
                let b = t.mul_row(a, v[1])?;
                let c = t.add_col(b, v[2])?;
                let d = t.mul_col(c, v[2])?;
                let e = t.mul(d, d)?;
                Ok(t.sum(e))
            })),
            ("div_col", vec![random(3, 4, 7), random(3, 1, 8).map(|v| v.abs() + 0.5)], Box::new(|t, v| {
                let a = t.div_col(v[0], v[1])?;
                let b = t.mul(a, a)?;
                Ok(t.sum(b))
            })),
            ("elementwise", vec![away_from_zero(random(3, 3, 9), 1e-3)], Box::new(|t, v| {
                let a = t.elu_plus_one(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.exp(v[0]);
                let d = t.ln(a);
                let e = t.clamp(v[0], -1.5, 1.5);
                let s = t.concat_cols(&[a, b, c, d, e])?;
                let w = t.leaf(random(3, 15, 10));
                let p = t.mul(s, w)?;
                Ok(t.sum(p))
            })),
            ("normalize_softmax_lse", vec![random(4, 5, 11)], Box::new(|t, v| {
                let a = t.normalize_rows(v[0], 1e-5);
                let b = t.row_softmax(v[0]);
                let c = t.logsumexp_rows(v[0]);
                let d = t.logsumexp_cols(v[0]);
                let w = t.leaf(random(4, 5, 12));
                let aw = t.mul(a, w)?;
                let bw = t.mul(b, w)?;
                let s1 = t.sum(aw);
                let s2 = t.sum(bw);
                let c2 = t.mul(c, c)?;
                let s3 = t.sum(c2);
                let d2 = t.mul(d, d)?;
                let s4 = t.sum(d2);
                let parts = t.concat_rows(&[s1, s2, s3, s4])?;
                Ok(t.sum(parts))
            })),
            ("reductions", vec![random(4, 3, 13)], Box::new(|t, v| {
                let a = t.sum_rows(v[0]);
                let b = t.sum_cols(v[0]);
                let a2 = t.mul(a, a)?;
                let b2 = t.mul(b, b)?;
                let s1 = t.sum(a2);
                let s2 = t.mean(b2);
                t.add(s1, s2)
            })),
            ("gather_scatter", vec![random(4, 3, 14)], Box::new(|t, v| {
                let g = t.gather_rows(v[0], &[3, 1, 1, 0])?;
                let h = t.gather_rows(v[0], &[2, 0])?;
                let s = t.scatter_rows(&[(g, vec![0, 2, 4, 5]), (h, vec![1, 3])], 6)?;
                let m = t.group_max(s, 2)?;
                let u = t.group_sum(s, 3)?;
                let r = t.reshape(u, 3, 2)?;
                let m2 = t.mul(m, m)?;
                let r2 = t.mul(r, r)?;
                let a = t.sum(m2);
                let b = t.sum(r2);
                t.add(a, b)
            })),
            ("distance_border_elements", vec![random(3, 4, 15), random(5, 4, 16), Tensor::scalar(0.3)], Box::new(|t, v| {
                let d = t.pairwise_distance(v[0], v[1])?;
                let z = t.append_border(d, v[2])?;
                let e = t.gather_elements(z, &[(0, 0), (3, 5), (2, 5), (3, 1), (1, 4)])?;
                let e2 = t.mul(e, e)?;
                Ok(t.sum(e2))
            })),
        ];
        for (name, points, f) in cases {
            let err = gradient_check_many(|t, v| f(t, v), &points, 1e-6, CoordSelection::All)
                .unwrap();
            assert!(err < 1e-7, "{name}: relative error {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(random(5, 4, 21));
            let w = t.leaf(random(4, 4, 22));
            let y = t.matmul(x, w).unwrap();
            let z = t.row_softmax(y);
            let n = t.normalize_rows(z, 1e-5);
            let s = t.sum(n);
            let sq = t.mul(s, s).unwrap();
            let g = t.backward(sq).unwrap();
            (g.get(x), g.get(w))
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }
}
