use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a, T> {
    /// Normal with std `√(2 / fan_in)`, fan-in = product of all but the first extent.
    KaimingNormal,
    Zeros,
    /// Kronecker delta over channels of a `C × C × 1 × 1` conv weight.
    Identity1x1,
    CopyOf(&'a Tensor<T>),
}

pub fn kaiming_std(shape: &[usize]) -> f64 {
    let fan_in: usize = shape.iter().skip(1).product();
    libm::sqrt(2.0 / fan_in.max(1) as f64)
}

pub fn init<T: Element>(param: &mut Tensor<T>, scheme: Init<'_, T>, rng: &mut impl Rng) -> Result<()> {
    let shape = param.shape().to_vec();
    match scheme {
        Init::KaimingNormal => {
            if shape.len() < 2 {
                return Err(Error::InitShape {
                    scheme: "kaiming_normal",
                    shape,
                });
            }
            let std = kaiming_std(&shape);
            for v in param.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::of(z * std);
            }
        }
        Init::Zeros => param.data_mut().iter_mut().for_each(|v| *v = T::zero()),
        Init::Identity1x1 => {
            let square = shape.len() == 4 && shape[0] == shape[1] && shape[2] == 1 && shape[3] == 1;
            if !square {
                return Err(Error::InitShape {
                    scheme: "identity_1x1",
                    shape,
                });
            }
            let c = shape[0];
            for (i, v) in param.data_mut().iter_mut().enumerate() {
                *v = if i / c == i % c { T::one() } else { T::zero() };
            }
        }
        Init::CopyOf(other) => {
            if other.shape() != shape.as_slice() {
                return Err(Error::InitShape {
                    scheme: "copy_of",
                    shape,
                });
            }
            param.data_mut().copy_from_slice(other.data());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_and_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tensor::<f32>::ones(&[2, 3, 3]);
        init(&mut t, Init::Zeros, &mut r).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let mut w = Tensor::<f32>::full(&[3, 3, 1, 1], 7.0);
        init(&mut w, Init::Identity1x1, &mut r).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut bad = Tensor::<f32>::zeros(&[3, 2, 1, 1]);
        assert!(matches!(init(&mut bad, Init::Identity1x1, &mut r), Err(Error::InitShape { .. })));
    }

    #[test]
    fn copy_requires_matching_shape() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let src = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        let mut dst = Tensor::<f64>::zeros(&[2, 2]);
        init(&mut dst, Init::CopyOf(&src), &mut r).unwrap();
        assert_eq!(dst.data(), src.data());
        let mut wrong = Tensor::<f64>::zeros(&[4]);
        assert!(init(&mut wrong, Init::CopyOf(&src), &mut r).is_err());
    }

    #[test]
    fn kaiming_std_within_ten_percent() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut w = Tensor::<f64>::zeros(&[64, 32, 3, 3]);
        init(&mut w, Init::KaimingNormal, &mut r).unwrap();
        let sample = &w.data()[..10_000];
        let mean = sample.iter().sum::<f64>() / sample.len() as f64;
        let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sample.len() as f64;
        let want = libm::sqrt(2.0 / (32.0 * 9.0));
        assert!((libm::sqrt(var) - want).abs() / want < 0.1);
    }
}
