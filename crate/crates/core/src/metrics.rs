//! Trajectory and image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::procrustes::{solve_closed_form_with, PairedPoints, ScaleMode};
use crate::{Pose, Sim3};

pub use crate::splat::ssim_value as ssim;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AteAlignment {
    Rigid,
    #[default]
    Similarity,
}

#[derive(Clone, Copy, Debug)]
pub struct AteResult {
    pub rmse: f64,
    /// Maps estimated camera centers onto the reference.
    pub alignment: Sim3,
}

/// Frame ids must match one to one and in order.
pub fn check_pair(estimated: &[(usize, Pose)], reference: &[(usize, Pose)]) -> Result<()> {
    if estimated.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated poses vs {} reference poses",
            estimated.len(),
            reference.len()
        )));
    }
    if let Some(((a, _), (b, _))) = estimated.iter().zip(reference).find(|((a, _), (b, _))| a != b) {
        return Err(Error::DimensionMismatch(format!("frame id {a} does not match reference frame id {b}")));
    }
    if estimated.len() < 3 {
        return Err(Error::DimensionMismatch("ATE needs at least 3 poses".into()));
    }
    Ok(())
}

/// RMSE of camera-center distances after aligning the estimate to the reference.
pub fn ate(estimated: &[(usize, Pose)], reference: &[(usize, Pose)], mode: AteAlignment) -> Result<AteResult> {
    check_pair(estimated, reference)?;
    let est: Vec<_> = estimated.iter().map(|(_, p)| p.center()).collect();
    let gt: Vec<_> = reference.iter().map(|(_, p)| p.center()).collect();
    let scale = match mode {
        AteAlignment::Rigid => ScaleMode::Rigid,
        AteAlignment::Similarity => ScaleMode::Similarity,
    };
    let alignment = solve_closed_form_with(&PairedPoints::uniform(est.clone(), gt.clone())?, scale)?;
    let sq: f64 = est.iter().zip(&gt).map(|(e, g)| (alignment.apply(e) - g).norm_squared()).sum();
    Ok(AteResult {
        rmse: (sq / est.len() as f64).sqrt(),
        alignment,
    })
}

/// `10 log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sq / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Quat;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn trajectory(rng: &mut impl Rng, n: usize) -> Vec<(usize, Pose)> {
        (0..n)
            .map(|i| {
                let c = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0));
                let q = Quat::from_axis_angle(&Vector3::new(0.1, 1.0, 0.3), rng.random_range(-3.0..3.0));
                (i, Pose::from_center(&q, &c))
            })
            .collect()
    }

    #[test]
    fn ate_identity_and_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let gt = trajectory(&mut rng, 30);
        assert!(ate(&gt, &gt, AteAlignment::Similarity).unwrap().rmse < 1e-12);
        assert!(ate(&gt, &gt, AteAlignment::Rigid).unwrap().rmse < 1e-12);
        let g = Sim3::new(3.5, Quat::from_axis_angle(&Vector3::new(1.0, -1.0, 2.0), 2.0), Vector3::new(10.0, -4.0, 1.0)).unwrap();
        let moved: Vec<_> = gt.iter().map(|(i, p)| (*i, crate::geometry::transform_pose(&g, p))).collect();
        assert!(ate(&moved, &gt, AteAlignment::Similarity).unwrap().rmse < 1e-9);
        // Rigid alignment cannot absorb the scale.
        assert!(ate(&moved, &gt, AteAlignment::Rigid).unwrap().rmse > 1.0);
    }

    #[test]
    fn ate_of_isotropic_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let gt = trajectory(&mut rng, 1000);
        let sigma = 0.05;
        let normal = Normal::new(0.0, sigma).unwrap();
        let noisy: Vec<_> = gt
            .iter()
            .map(|(i, p)| {
                let c = p.center() + Vector3::from_fn(|_, _| normal.sample(&mut rng));
                (*i, Pose::from_center(&p.orientation(), &c))
            })
            .collect();
        let v = ate(&noisy, &gt, AteAlignment::Similarity).unwrap().rmse;
        assert!((v / (sigma * 3f64.sqrt()) - 1.0).abs() < 0.1);
    }

    #[test]
    fn ate_rejects_mismatched_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let gt = trajectory(&mut rng, 5);
        let mut est = gt.clone();
        est[2].0 = 9;
        assert!(matches!(ate(&est, &gt, AteAlignment::Similarity), Err(Error::DimensionMismatch(_))));
        assert!(ate(&gt[..4], &gt, AteAlignment::Similarity).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.4, 0.6, 0.8]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-10);
        assert!(psnr(&a, &Image::new(2, 2)).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let v: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
            let w: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
            let mse = v.iter().zip(&w).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 300.0;
            let direct = -10.0 * mse.log10();
            let (a, b) = (Image::from_vec(10, 10, v).unwrap(), Image::from_vec(10, 10, w).unwrap());
            assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-10);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
