use kfdiff::denoiser::{dilate_validity, masked_attention, TokenValidity};
use kfdiff::diffusion::{q_sample_with, simple_loss, DiffusionSchedule};
use kfdiff::guidance::{assemble, cfg_combine, dct_basis, transition_grad, transition_loss};
use kfdiff::metrics::{ade, frechet_distance, k_err};
use kfdiff::motion_data::KeyframeMask;
use kfdiff::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn mask_and_frames(max_n: usize, cols: usize) -> impl Strategy<Value = (KeyframeMask, Matrix<f64>)> {
    (3..max_n)
        .prop_flat_map(move |n| (Just(n), prop::collection::vec(any::<bool>(), n), matrix(n, cols)))
        .prop_map(|(n, flags, x)| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();
            if idx.is_empty() {
                idx.push(n / 2);
            }
            if idx.len() == n {
                idx.pop();
            }
            (KeyframeMask::new(n, idx).unwrap(), x)
        })
}

fn validity() -> impl Strategy<Value = TokenValidity> {
    (1usize..40)
        .prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(prop::bool::weighted(0.2), n)))
        .prop_map(|(v, p)| TokenValidity::new(v, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dilation_never_deactivates(v in validity(), k in 0usize..10) {
        let d = dilate_validity(&v, k);
        for i in 0..v.len() {
            prop_assert!(!v.valid[i] || d.valid[i]);
            prop_assert!(!(d.padding[i] && d.valid[i]));
        }
    }

    #[test]
    fn dilation_matches_neighbourhood_expansion(v in validity(), k in 0usize..10) {
        let d = dilate_validity(&v, k);
        let n = v.len();
        for i in 0..n {
            let near = (0..n).any(|j| v.valid[j] && i.abs_diff(j) <= k);
            prop_assert_eq!(d.valid[i], near && !v.padding[i]);
        }
    }

    #[test]
    fn invalid_keys_get_no_weight(
        q in matrix(5, 4), k in matrix(7, 4), v in matrix(7, 3),
        flags in prop::collection::vec(any::<bool>(), 7),
    ) {
        let mut flags = flags;
        flags[3] = true;
        let out = masked_attention(&q, &k, &v, &flags, None).unwrap();
        prop_assert!(out.output.is_finite());
        for i in 0..5 {
            let mut total = 0.0;
            for j in 0..7 {
                let w = out.weights.row(i)[j];
                if !flags[j] {
                    prop_assert!(w < 1e-8);
                }
                total += w;
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn simple_loss_ignores_keyframe_entries((mask, x0) in mask_and_frames(16, 3), seed in any::<u64>()) {
        let hat = x0.map(|v| 0.5 * v + 0.1);
        let mut noisy = hat.clone();
        let mut s = seed;
        for &i in mask.keyframe_indices() {
            for v in noisy.row_mut(i) {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = (s >> 11) as f64 * 1e-12 - 4e3;
            }
        }
        let a = simple_loss(&x0, &hat, &mask).unwrap();
        let b = simple_loss(&x0, &noisy, &mask).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mask_parts_recombine((mask, x) in mask_and_frames(20, 4)) {
        let m = mask.matrix::<f64>(4);
        for i in 0..x.rows() {
            let row = m.row(i);
            prop_assert!(row.iter().all(|&v| v == 1.0) || row.iter().all(|&v| v == 0.0));
        }
        prop_assert_eq!(mask.keyframe_part(&x).add(&mask.target_part(&x)), x);
    }

    #[test]
    fn transition_loss_is_non_negative((mask, x) in mask_and_frames(20, 3), l in 1usize..5, m in 1usize..4) {
        let m = m.min(2 * l + 1);
        prop_assert!(transition_loss(&x, &mask, l, m).unwrap() >= 0.0);
    }

    #[test]
    fn projection_contracts(g in matrix(9, 3), m in 1usize..9) {
        let w = dct_basis::<f64>(4, m).unwrap();
        let p = &w.projection;
        prop_assert!(p.sub(&p.transpose()).max_abs() < 1e-12);
        prop_assert!(p.matmul(p).sub(p).max_abs() < 1e-8);
        prop_assert!(p.matmul(&g).frobenius_sq() <= g.frobenius_sq() + 1e-12);
    }

    #[test]
    fn cfg_is_affine(c in matrix(4, 3), u in matrix(4, 3), s1 in -5.0f64..5.0, s2 in -5.0f64..5.0) {
        let a = cfg_combine(&c, &u, s1).unwrap().add(&cfg_combine(&c, &u, s2).unwrap());
        let b = cfg_combine(&c, &u, 0.5 * (s1 + s2)).unwrap().scale(2.0);
        prop_assert!(a.sub(&b).max_abs() < 1e-10);
        prop_assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn small_guided_step_descends((mask, mean) in mask_and_frames(20, 3), kf in matrix(20, 3)) {
        let kf = kf.slice_rows(0, mean.rows());
        let before = assemble(&mean, &kf, &mask);
        let g = transition_grad(&before, &mask, 4, 3).unwrap();
        prop_assume!(g.frobenius_sq() > 1e-12);
        let moved = mean.sub(&g.scale(1e-2));
        let l0 = transition_loss(&before, &mask, 4, 3).unwrap();
        let l1 = transition_loss(&assemble(&moved, &kf, &mask), &mask, 4, 3).unwrap();
        prop_assert!(l1 < l0);
    }

    #[test]
    fn ade_shrinks_with_more_samples(
        (mask, gt) in mask_and_frames(12, 2),
        extra in prop::collection::vec(matrix(12, 2), 1..4),
    ) {
        let n = gt.rows();
        let samples: Vec<Matrix<f64>> = extra.iter().map(|e| e.slice_rows(0, n)).collect();
        let mut prev = f64::INFINITY;
        for k in 1..=samples.len() {
            let a = ade(&gt, &samples[..k], &mask).unwrap();
            prop_assert!(a >= 0.0 && a <= prev);
            prev = a;
        }
        prop_assert_eq!(ade(&gt, std::slice::from_ref(&gt), &mask).unwrap(), 0.0);
        prop_assert_eq!(k_err(&gt, &gt, &mask).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric(a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..8),
                            b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..8)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab.is_finite() && ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn q_sample_closed_form_matches_chain(x0 in matrix(3, 2), eps in matrix(3, 2), t in 1usize..10) {
        let s = DiffusionSchedule::<f64>::cosine(10).unwrap();
        let ab = s.alpha_bar(t);
        let chained: f64 = (1..=t).map(|i| s.alpha(i)).product();
        prop_assert!((ab - chained).abs() < 1e-12);
        let x = q_sample_with(ab, &x0, &eps);
        prop_assert!(x.is_finite());
    }
}

#[test]
fn schedules_stay_finite() {
    for t in [10, 50, 100, 1000] {
        let s = DiffusionSchedule::<f64>::cosine(t).unwrap();
        assert!(s.is_finite());
        for step in 1..=t {
            let (c1, c2) = s.posterior_coefficients(step);
            let v = c1 + c2 * s.alpha_bar(step).sqrt();
            assert!(v > 0.0 && v <= 1.0001, "T={t} t={step} {v}");
        }
    }
}
