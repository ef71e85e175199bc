//! Complex tensors as (real, imaginary) pairs of tape variables.
//!
//! Gradients are taken with respect to the real and imaginary parts as two
//! independent real tensors, which is exact for the real-valued losses used
//! in training.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Result<Self> {
        re.check_same_tape(&im)?;
        let (sr, si) = (re.shape(), im.shape());
        if sr != si {
            return Err(Error::ShapeMismatch {
                op: "complex",
                lhs: sr,
                rhs: si,
            });
        }
        Ok(CVar { re, im })
    }

    /// Real tensor with an all-zero (constant) imaginary part.
    pub fn from_real(re: Var) -> Self {
        let im = re.tape().zeros(&re.shape());
        CVar { re, im }
    }

    pub fn constant(tape: &Tape, re: Tensor, im: Tensor) -> Result<Self> {
        CVar::new(tape.constant(re), tape.constant(im))
    }

    pub fn leaf(tape: &Tape, re: Tensor, im: Tensor) -> Result<Self> {
        CVar::new(tape.leaf(re), tape.leaf(im))
    }

    pub fn tape(&self) -> &Tape {
        self.re.tape()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.re.shape()
    }

    pub fn values(&self) -> (Tensor, Tensor) {
        (self.re.value(), self.im.value())
    }

    pub fn add(&self, other: &CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn sub(&self, other: &CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.re.sub(&other.re)?,
            im: self.im.sub(&other.im)?,
        })
    }

    /// `(a_r b_r − a_i b_i) + i(a_r b_i + a_i b_r)`, elementwise with
    /// broadcasting.
    pub fn mul(&self, other: &CVar) -> Result<CVar> {
        let re = self.re.mul(&other.re)?.sub(&self.im.mul(&other.im)?)?;
        let im = self.re.mul(&other.im)?.add(&self.im.mul(&other.re)?)?;
        Ok(CVar { re, im })
    }

    pub fn neg(&self) -> CVar {
        CVar {
            re: self.re.neg(),
            im: self.im.neg(),
        }
    }

    pub fn scale(&self, k: f64) -> CVar {
        CVar {
            re: self.re.scale(k),
            im: self.im.scale(k),
        }
    }

    /// Multiplies both parts by a real tensor (broadcasting).
    pub fn mul_real(&self, k: &Var) -> Result<CVar> {
        Ok(CVar {
            re: self.re.mul(k)?,
            im: self.im.mul(k)?,
        })
    }

    pub fn add_real(&self, k: &Var) -> Result<CVar> {
        Ok(CVar {
            re: self.re.add(k)?,
            im: self.im.clone(),
        })
    }

    /// Complex matrix product: `re = a_r·b_r − a_i·b_i`, `im = a_i·b_r + a_r·b_i`.
    pub fn matmul(&self, rhs: &CVar) -> Result<CVar> {
        let re = self.re.matmul(&rhs.re)?.sub(&self.im.matmul(&rhs.im)?)?;
        let im = self.im.matmul(&rhs.re)?.add(&self.re.matmul(&rhs.im)?)?;
        Ok(CVar { re, im })
    }

    /// Real matrix times complex matrix: `w·re + i w·im`.
    pub fn real_matmul(w: &Var, rhs: &CVar) -> Result<CVar> {
        Ok(CVar {
            re: w.matmul(&rhs.re)?,
            im: w.matmul(&rhs.im)?,
        })
    }

    /// `|z|²`
    pub fn abs_sq(&self) -> Var {
        let re2 = self.re.square();
        let im2 = self.im.square();
        re2.add(&im2).expect("parts share a shape")
    }

    pub fn sum(&self) -> CVar {
        CVar {
            re: self.re.sum(),
            im: self.im.sum(),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<CVar> {
        Ok(CVar {
            re: self.re.mean_axis(axis)?,
            im: self.im.mean_axis(axis)?,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: self.re.reshape(shape)?,
            im: self.im.reshape(shape)?,
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: self.re.permute(axes)?,
            im: self.im.permute(axes)?,
        })
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<CVar> {
        Ok(CVar {
            re: self.re.slice(axis, start, end)?,
            im: self.im.slice(axis, start, end)?,
        })
    }

    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<CVar> {
        Ok(CVar {
            re: self.re.pad(axis, before, after)?,
            im: self.im.pad(axis, before, after)?,
        })
    }

    pub fn roll(&self, axis: usize, shift: isize) -> Result<CVar> {
        Ok(CVar {
            re: self.re.roll(axis, shift)?,
            im: self.im.roll(axis, shift)?,
        })
    }

    pub fn gather(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: self.re.gather(idx.clone(), shape)?,
            im: self.im.gather(idx, shape)?,
        })
    }

    pub fn concat(xs: &[CVar], axis: usize) -> Result<CVar> {
        let re: Vec<Var> = xs.iter().map(|x| x.re.clone()).collect();
        let im: Vec<Var> = xs.iter().map(|x| x.im.clone()).collect();
        Ok(CVar {
            re: Var::concat(&re, axis)?,
            im: Var::concat(&im, axis)?,
        })
    }

    pub fn ensure_finite(&self, location: &str) -> Result<()> {
        self.re.ensure_finite(location)?;
        self.im.ensure_finite(location)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(tape: &Tape, re: &[f64], im: &[f64]) -> CVar {
        CVar::constant(tape, Tensor::from_vec(re.to_vec()), Tensor::from_vec(im.to_vec())).unwrap()
    }

    #[test]
    fn scalar_product() {
        let tape = Tape::new();
        let p = c(&tape, &[1.0], &[2.0]).mul(&c(&tape, &[3.0], &[4.0])).unwrap();
        assert_eq!(p.re.item(), -5.0);
        assert_eq!(p.im.item(), 10.0);
    }

    #[test]
    fn additive_identity() {
        let tape = Tape::new();
        let z = c(&tape, &[1.5, -2.0], &[0.25, 3.0]);
        let s = z.add(&c(&tape, &[0.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_eq!(s.re.value(), z.re.value());
        assert_eq!(s.im.value(), z.im.value());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let err = c(&tape, &[1.0, 2.0], &[0.0, 0.0])
            .add(&c(&tape, &[1.0, 2.0, 3.0], &[0.0; 3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn square_gradient_matches_finite_differences() {
        // Re(z²) = x² − y², gradient (2x, −2y).
        let report = gradcheck(
            |_, v| {
                let z = CVar::new(v[0].clone(), v[1].clone())?;
                Ok(z.mul(&z)?.re.sum())
            },
            &[Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![1.0])],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let tape = Tape::new();
        let z = CVar::leaf(&tape, Tensor::scalar(1.0), Tensor::scalar(1.0)).unwrap();
        z.mul(&z).unwrap().re.sum().backward().unwrap();
        assert!((z.re.grad().unwrap().data()[0] - 2.0).abs() < 1e-12);
        assert!((z.im.grad().unwrap().data()[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn multiplication_distributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let mut r = || CVar::constant(&tape, Tensor::randn([3, 4], 1.0, &mut rng), Tensor::randn([3, 4], 1.0, &mut rng)).unwrap();
        let (a, b, cc) = (r(), r(), r());
        let lhs = a.add(&b).unwrap().mul(&cc).unwrap();
        let rhs = a.mul(&cc).unwrap().add(&b.mul(&cc).unwrap()).unwrap();
        assert!(lhs.re.value().max_abs_diff(&rhs.re.value()) < 1e-10);
        assert!(lhs.im.value().max_abs_diff(&rhs.im.value()) < 1e-10);
    }

    #[test]
    fn real_inputs_give_exactly_zero_imaginary_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let a = CVar::from_real(tape.constant(Tensor::randn([2, 3], 1.0, &mut rng)));
        let b = CVar::from_real(tape.constant(Tensor::randn([3, 2], 1.0, &mut rng)));
        let p = a.matmul(&b).unwrap();
        assert!(p.im.value().data().iter().all(|&v| v == 0.0));
        let q = a.mul(&a).unwrap();
        assert!(q.im.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = CVar::constant(
            &tape,
            Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros([2, 2]),
        )
        .unwrap();
        let v = CVar::constant(
            &tape,
            Tensor::new([2, 1], vec![0.5, -1.0]).unwrap(),
            Tensor::new([2, 1], vec![2.0, 3.0]).unwrap(),
        )
        .unwrap();
        let out = eye.matmul(&v).unwrap();
        assert_eq!(out.re.value(), v.re.value());
        assert_eq!(out.im.value(), v.im.value());
    }
}
