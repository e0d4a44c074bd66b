//! Evaluation metrics: ADE, keyframe error, keyframe transition smoothness,
//! diversity and a feature-space Fréchet distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::motion_data::KeyframeMask;
use crate::rng;
use crate::scalar::Scalar;

fn row_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimum over samples of the mean per-frame L2 distance to `gt` on
/// non-keyframe frames.
pub fn ade<T: Scalar>(gt: &Matrix<T>, samples: &[Matrix<T>], mask: &KeyframeMask) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("ADE needs at least one sample".into()));
    }
    if mask.frames() != gt.rows() {
        return Err(Error::Shape("mask length differs from ground truth".into()));
    }
    let targets: Vec<usize> = (0..gt.rows()).filter(|&i| !mask.is_keyframe(i)).collect();
    if targets.is_empty() {
        return Err(Error::Precondition("ADE is undefined when every frame is a keyframe".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        if s.shape() != gt.shape() {
            return Err(Error::Shape(format!("sample {:?} vs ground truth {:?}", s.shape(), gt.shape())));
        }
        let mean = targets.iter().map(|&i| row_distance(s.row(i), gt.row(i))).sum::<f64>() / targets.len() as f64;
        best = best.min(mean);
    }
    Ok(best)
}

fn check_keyframes<T: Scalar>(gen: &Matrix<T>, keyframes: &Matrix<T>, mask: &KeyframeMask) -> Result<()> {
    if gen.shape() != keyframes.shape() || mask.frames() != gen.rows() {
        return Err(Error::Shape(format!(
            "generated {:?}, keyframes {:?}, mask over {} frames",
            gen.shape(),
            keyframes.shape(),
            mask.frames()
        )));
    }
    Ok(())
}

/// Mean L2 distance between generated frames and keyframes at keyframe indices.
pub fn k_err<T: Scalar>(gen: &Matrix<T>, keyframes: &Matrix<T>, mask: &KeyframeMask) -> Result<f64> {
    check_keyframes(gen, keyframes, mask)?;
    let idx = mask.keyframe_indices();
    Ok(idx.iter().map(|&i| row_distance(gen.row(i), keyframes.row(i))).sum::<f64>() / idx.len() as f64)
}

/// Mean over keyframes of the average L2 jump between the keyframe and its
/// generated neighbours (one-sided at the sequence ends).
pub fn k_trans<T: Scalar>(gen: &Matrix<T>, keyframes: &Matrix<T>, mask: &KeyframeMask) -> Result<f64> {
    check_keyframes(gen, keyframes, mask)?;
    let n = gen.rows();
    let idx = mask.keyframe_indices();
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let kf = keyframes.row(i);
            let mut sum = 0.0;
            let mut count = 0;
            if i > 0 {
                sum += row_distance(kf, gen.row(i - 1));
                count += 1;
            }
            if i + 1 < n {
                sum += row_distance(gen.row(i + 1), kf);
                count += 1;
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .sum();
    Ok(total / idx.len() as f64)
}

/// Hand-crafted motion descriptor of `2D + 2` values: per-channel mean,
/// per-channel standard deviation, mean speed, mean acceleration magnitude.
pub fn motion_features<T: Scalar>(x: &Matrix<T>) -> Vec<f64> {
    let (n, d) = x.shape();
    let v = |i: usize, j: usize| x[(i, j)].to_f64_lossy();
    let mut out = Vec::with_capacity(2 * d + 2);
    let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| v(i, j)).sum::<f64>() / n as f64).collect();
    out.extend(&means);
    out.extend((0..d).map(|j| ((0..n).map(|i| (v(i, j) - means[j]).powi(2)).sum::<f64>() / n as f64).sqrt()));
    let speed = if n > 1 {
        (1..n).map(|i| row_distance(x.row(i), x.row(i - 1))).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let accel = if n > 2 {
        (1..n - 1)
            .map(|i| {
                (0..d)
                    .map(|j| (v(i + 1, j) - 2.0 * v(i, j) + v(i - 1, j)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / (n - 2) as f64
    } else {
        0.0
    };
    out.push(speed);
    out.push(accel);
    out
}

/// Randomly splits the samples into two halves and averages the feature
/// distance of up to `pair_count` paired motions.
pub fn diversity<T: Scalar>(samples: &[Matrix<T>], pair_count: usize, seed: u64) -> Result<f64> {
    let feats: Vec<Vec<f64>> = samples.iter().map(motion_features).collect();
    diversity_of_features(&feats, pair_count, seed)
}

pub fn diversity_of_features(feats: &[Vec<f64>], pair_count: usize, seed: u64) -> Result<f64> {
    if feats.len() < 2 {
        return Err(Error::Input("diversity needs at least two samples".into()));
    }
    if pair_count == 0 {
        return Err(Error::Config("pair_count must be positive".into()));
    }
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0));
    let half = feats.len() / 2;
    let pairs = pair_count.min(half);
    let total: f64 = (0..pairs).map(|p| row_distance(&feats[order[p]], &feats[order[half + p]])).sum();
    Ok(total / pairs as f64)
}

fn gaussian_fit(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if feats.len() < 2 {
        return Err(Error::Input("Fréchet distance needs at least two motions per set".into()));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("feature sets differ in dimension".into()));
    }
    // Tr((Σ_A Σ_B)^{1/2}) = Tr((Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}), averaged over both orders
    let cross = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        let sx = psd_sqrt(x);
        psd_sqrt(&(&sx * y * &sx)).trace()
    };
    let tr = 0.5 * (cross(&cov_a, &cov_b) + cross(&cov_b, &cov_a));
    let fd = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr;
    Ok(fd.max(0.0))
}

/// Fréchet distance between two sets of motions in [`motion_features`] space.
pub fn frechet_feature_distance<T: Scalar>(a: &[Matrix<T>], b: &[Matrix<T>]) -> Result<f64> {
    let fa: Vec<Vec<f64>> = a.iter().map(motion_features).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(motion_features).collect();
    frechet_distance(&fa, &fb)
}

/// Aggregate metrics of one strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub ade: f64,
    pub k_err: f64,
    pub k_trans: f64,
    pub diversity: f64,
    pub frechet: f64,
}

impl MetricBundle {
    pub fn is_valid(&self) -> bool {
        [self.ade, self.k_err, self.k_trans, self.diversity, self.frechet]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ade_cases() {
        let gt = Matrix::<f64>::zeros(3, 4);
        let mask = KeyframeMask::new(3, vec![]).err();
        assert!(mask.is_some());
        let mask = KeyframeMask::new(4, vec![3]).unwrap();
        let gt4 = Matrix::<f64>::zeros(4, 4);
        let mut ones = Matrix::filled(4, 4, 1.0);
        ones.row_mut(3).iter_mut().for_each(|v| *v = 50.0);
        assert!((ade(&gt4, &[ones.clone()], &mask).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(ade(&gt4, &[ones, gt4.clone()], &mask).unwrap(), 0.0);
        assert!(matches!(ade(&gt, &[], &KeyframeMask::new(3, vec![0]).unwrap()), Err(Error::Input(_))));
    }

    #[test]
    fn k_err_cases() {
        let kf = m(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let gen = m(&[&[1.0, 0.0], &[9.0, 9.0], &[0.0, 3.0]]);
        let one = KeyframeMask::new(3, vec![0]).unwrap();
        assert_eq!(k_err(&gen, &kf, &one).unwrap(), 1.0);
        let two = KeyframeMask::new(3, vec![0, 2]).unwrap();
        assert_eq!(k_err(&gen, &kf, &two).unwrap(), 2.0);
        assert_eq!(k_err(&kf, &kf, &two).unwrap(), 0.0);
    }

    #[test]
    fn k_trans_cases() {
        let flat = Matrix::filled(5, 3, 0.4);
        let mask = KeyframeMask::new(5, vec![2]).unwrap();
        assert_eq!(k_trans(&flat, &flat, &mask).unwrap(), 0.0);
        let mut gen = flat.clone();
        gen[(3, 1)] += 1.0;
        assert!((k_trans(&gen, &flat, &mask).unwrap() - 0.5).abs() < 1e-15);
        let edge = KeyframeMask::new(5, vec![4]).unwrap();
        let mut gen = flat.clone();
        gen[(3, 0)] -= 2.0;
        assert!((k_trans(&gen, &flat, &edge).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn diversity_identical_is_zero_and_seeded() {
        let s = vec![Matrix::filled(6, 2, 1.0); 6];
        assert_eq!(diversity(&s, 3, 1).unwrap(), 0.0);
        let r: Vec<Matrix<f64>> = (0..8)
            .map(|i| rng::standard_normal(&mut rng::stream(i, 0), 6, 2))
            .collect();
        assert_eq!(diversity(&r, 4, 5).unwrap(), diversity(&r, 4, 5).unwrap());
    }

    #[test]
    fn diversity_matches_exhaustive_pairing_expectation() {
        // Two clusters at distance c: features {0, 0, c, c}.
        let c = 3.0f64;
        let feats = vec![vec![0.0], vec![0.0], vec![c], vec![c]];
        // Exhaustive: over all 24 orderings, pairs (o0,o2) and (o1,o3).
        let mut perms = Vec::new();
        permute(&mut vec![0, 1, 2, 3], 0, &mut perms);
        let exact: f64 = perms
            .iter()
            .map(|o| ((feats[o[0]][0] - feats[o[2]][0]).abs() + (feats[o[1]][0] - feats[o[3]][0]).abs()) / 2.0)
            .sum::<f64>()
            / perms.len() as f64;
        assert!((exact - 2.0 * c / 3.0).abs() < 1e-12);
        let trials = 20_000;
        let mc: f64 = (0..trials)
            .map(|s| diversity_of_features(&feats, 2, s).unwrap())
            .sum::<f64>()
            / trials as f64;
        assert!((mc - exact).abs() < 0.05, "{mc} vs {exact}");
    }

    fn permute(v: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == v.len() {
            out.push(v.clone());
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    #[test]
    fn frechet_identity_symmetry_and_gaussian_oracle() {
        let mut r = rng::stream(3, 0);
        let a: Vec<Vec<f64>> = (0..50).map(|_| rng::standard_normal::<f64>(&mut r, 1, 3).into_vec()).collect();
        let b: Vec<Vec<f64>> = (0..60).map(|_| rng::standard_normal::<f64>(&mut r, 1, 3).into_vec()).collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8);

        let n = 20_000;
        let x: Vec<Vec<f64>> = (0..n).map(|_| rng::standard_normal::<f64>(&mut r, 1, 1).into_vec()).collect();
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng::standard_normal::<f64>(&mut r, 1, 1)[(0, 0)] + 1.0])
            .collect();
        let fd = frechet_distance(&x, &y).unwrap();
        assert!((fd - 1.0).abs() < 0.1, "{fd}");
        assert!(matches!(frechet_distance(&x[..1], &y), Err(Error::Input(_))));
    }

    #[test]
    fn rank_deficient_sets_stay_finite() {
        let a = vec![vec![1.0, 2.0, 3.0]; 5];
        let b = vec![vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 3.0]];
        let fd = frechet_distance(&a, &b).unwrap();
        assert!(fd.is_finite() && fd >= 0.0);
    }

    #[test]
    fn feature_length() {
        let x = Matrix::<f32>::zeros(10, 19);
        assert_eq!(motion_features(&x).len(), 40);
    }
}
