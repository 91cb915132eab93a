//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitive applications in the order they run. The
//! network, the penalties and the losses are all written against it, and
//! [`grad_check`] verifies any of them against central differences.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, max_relative_error, numeric_gradient, numeric_gradient_high_order, GradCheckReport,
};
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op} of a negative value")]
    Domain { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op} of an empty tensor")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("backward already ran on this tape")]
    DoubleBackward,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn branch_signature_tracks_piecewise_branches() {
        let sig = |xs: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::row(xs));
            let e = t.elu(x, 1.0);
            t.reduce_max(e).unwrap();
            t.branch_signature()
        };
        assert_eq!(sig(vec![0.5, -1.0, 2.0]), sig(vec![0.7, -0.2, 3.0]));
        assert_ne!(sig(vec![0.5, -1.0, 2.0]), sig(vec![-0.5, -1.0, 2.0]));
        assert_ne!(sig(vec![0.5, 1.0, 2.0]), sig(vec![0.5, 3.0, 2.0]));
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, -1.0]));
        t.exp(x);
        assert_eq!(t.branch_signature(), Tape::new().branch_signature());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let s = t.softmax(x, Axis::PerRow);
        for &v in t.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t
            .constant(Tensor::from_rows(&[vec![1.0, -2.0, 30.0], vec![-700.0, 0.5, 4.0]]).unwrap());
        let s = t.softmax(x, Axis::PerRow);
        let v = t.value(s);
        for r in 0..2 {
            let sum: f64 = v.row_slice(r).iter().sum();
            assert!(close(sum, 1.0, 1e-12));
        }
        let c = t.softmax(x, Axis::PerCol);
        let cv = t.value(c).transpose();
        for r in 0..3 {
            assert!(close(cv.row_slice(r).iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn masked_softmax_has_exact_zeros() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::from_rows(&[vec![0.3, 1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap(),
            true,
        );
        let mask = [false, true, true, false, false, true];
        let m = t.masked_fill(x, &mask, f64::NEG_INFINITY).unwrap();
        let s = t.softmax(m, Axis::PerRow);
        let v = t.value(s).clone();
        assert_eq!(v.get(0, 0), 1.0);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let p = t.mul(s, w).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        let gx = g.wrt(x).unwrap();
        assert!(gx.is_finite());
        assert_eq!(gx.get(0, 1), 0.0);
        assert_eq!(gx.get(1, 2), 0.0);
    }

    #[test]
    fn l2_norm_of_three_four() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![3.0, 4.0]));
        let n = t.l2_norm_rows(x);
        assert_eq!(t.value(n).data(), &[5.0]);
    }

    #[test]
    fn max_minus_min_composite() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![5.0, 3.0, 9.0, 4.0]), true);
        let mx = t.reduce_max(x).unwrap();
        let mn = t.reduce_min(x).unwrap();
        let d = t.sub(mx, mn).unwrap();
        assert_eq!(t.value(d).item(), 6.0);
        let g = t.backward(d).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn max_tie_routes_to_first_index() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![2.0, 7.0, 7.0]), true);
        let mx = t.reduce_max(x).unwrap();
        let g = t.backward(mx).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn derivative_of_square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![0.4, -1.3, 2.2, 0.0]), true);
        let s = t.softmax(x, Axis::PerRow);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        for &v in g.wrt(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let y = t.square(x);
        assert!(matches!(
            t.backward(y),
            Err(DiffError::NonScalarLoss { .. })
        ));
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.backward(s).err(), Some(DiffError::DoubleBackward));
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            t.matmul(a, b),
            Err(DiffError::ShapeMismatch { .. })
        ));
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(DiffError::ShapeMismatch { .. })));
        let neg = t.constant(Tensor::row(vec![-1.0]));
        assert!(matches!(t.log(neg), Err(DiffError::Domain { .. })));
        assert!(matches!(t.sqrt(neg), Err(DiffError::Domain { .. })));
    }

    #[test]
    fn gather_rows_is_a_pure_lookup() {
        let mut t = Tape::new();
        let w = t.leaf(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            true,
        );
        let e = t.gather_rows(w, &[2, 2, 0]).unwrap();
        assert_eq!(t.value(e).data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
        let s = t.sum(e);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let mut t2 = Tape::new();
        let w2 = t2.constant(Tensor::zeros(2, 2));
        assert!(t2.gather_rows(w2, &[2]).is_err());
    }

    #[test]
    fn xlogx_zero_convention() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(vec![0.0, 1.0, 0.5]), true);
        let h = t.xlogx(p).unwrap();
        assert_eq!(t.value(h).get(0, 0), 0.0);
        assert_eq!(t.value(h).get(0, 1), 0.0);
        let s = t.sum(h);
        let g = t.backward(s).unwrap();
        let gp = g.wrt(p).unwrap();
        assert_eq!(gp.get(0, 0), 0.0);
        assert!(gp.is_finite());
    }
}
