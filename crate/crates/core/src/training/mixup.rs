use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MIXUP_ALPHA: f64 = 0.8;

/// A mixed batch and the draws that produced it.
#[derive(Clone, Debug)]
pub struct MixedBatch<T: Real> {
    pub images: Tensor<T>,
    pub targets: Vec<T>,
    /// Partner of each sample in the batch permutation.
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
}

/// Draws `λ ~ Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// `x_i = λ_i x_i + (1 − λ_i) x_{p(i)}` and the same for targets.
pub fn mix_pairs<T: Real>(
    images: &Tensor<T>,
    targets: &[T],
    partners: &[usize],
    lambdas: &[f64],
) -> Result<(Tensor<T>, Vec<T>)> {
    let b = images.shape().first().copied().unwrap_or(0);
    if partners.len() != b || lambdas.len() != b || b == 0 || !targets.len().is_multiple_of(b) {
        return Err(Error::shape("mixup", format!("batch {b}, {} partners, {} targets", partners.len(), targets.len())));
    }
    let w = images.numel() / b;
    let c = targets.len() / b;
    let mut out = images.data().to_vec();
    let mut tgt = targets.to_vec();
    for i in 0..b {
        let (l, j) = (T::lit(lambdas[i]), partners[i]);
        let m = T::one() - l;
        for k in 0..w {
            out[i * w + k] = l * images.data()[i * w + k] + m * images.data()[j * w + k];
        }
        for k in 0..c {
            tgt[i * c + k] = l * targets[i * c + k] + m * targets[j * c + k];
        }
    }
    Ok((Tensor::new(images.shape(), out)?, tgt))
}

/// Mixes each sample with a partner from one random permutation of the
/// batch, drawing one `λ` per pair.
pub fn mixup<T: Real, R: Rng + ?Sized>(
    images: &Tensor<T>,
    targets: &[T],
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch<T>> {
    let b = images.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::invalid("mixup needs at least two samples"));
    }
    let mut partners: Vec<usize> = (0..b).collect();
    partners.shuffle(rng);
    let lambdas = (0..b).map(|_| sample_lambda(alpha, rng)).collect::<Result<Vec<_>>>()?;
    let (images, targets) = mix_pairs(images, targets, &partners, &lambdas)?;
    Ok(MixedBatch {
        images,
        targets,
        partners,
        lambdas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_one_is_identity() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        let y = vec![1.0, 0.0, 0.0, 1.0];
        let (xm, ym) = mix_pairs(&x, &y, &[1, 0], &[1.0, 1.0]).unwrap();
        assert_eq!(xm.data(), x.data());
        assert_eq!(ym, y);
    }

    #[test]
    fn mixed_targets_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_f64(&[4, 1], &[0.0, 0.25, 0.5, 1.0]).unwrap();
        let y = crate::training::one_hot(&[0, 1, 2, 0], 3).unwrap();
        let m = mixup(&x, &y, MIXUP_ALPHA, &mut rng).unwrap();
        for row in m.targets.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(mixup(&Tensor::<f64>::zeros(&[1, 2]), &[1.0], 0.8, &mut rng).is_err());
    }
}
