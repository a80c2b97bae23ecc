mod common;

use common::*;
use dualpath::flow::limb_directions;
use dualpath::metrics::{apd, mpd};
use dualpath::model::GaussianLatent;
use dualpath::motion::*;
use dualpath::objectives::{kl_diag_gauss, mse_recon};
use dualpath::sampler::{apply_head, min_pairwise_diversity, pairwise_sq_distances, sampler_kl, SamplerLossWeights};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn kl_closed_form_cases() {
    let unit = GaussianLatent::standard(1);
    let shifted = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
    assert!((kl_diag_gauss(&shifted, &unit).unwrap() - 0.5).abs() < 1e-12);
    let same = GaussianLatent::new(vec![0.3, -2.0], vec![0.1, -0.7]).unwrap();
    assert_eq!(kl_diag_gauss(&same, &same).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let mq = random_vec(&mut rng, 5, 2.0);
        let mp = random_vec(&mut rng, 5, 2.0);
        let lq = random_vec(&mut rng, 5, 1.5);
        let lp = random_vec(&mut rng, 5, 1.5);
        let sq: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let sp: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let got = kl_diag_gauss(&GaussianLatent::new(mq.clone(), lq).unwrap(), &GaussianLatent::new(mp.clone(), lp).unwrap())
            .unwrap();
        let want = kl_oracle(&mq, &sq, &mp, &sp);
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        assert!(got >= 0.0);
    }
    let a = GaussianLatent::standard(2);
    let b = GaussianLatent::standard(3);
    assert!(kl_diag_gauss(&a, &b).is_err());
}

#[test]
fn recon_is_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(&mut rng, 4, 6, 1.0);
    let y = random_matrix(&mut rng, 4, 6, 1.0);
    let want: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    assert!((mse_recon(&x, &y).unwrap() - want).abs() < 1e-12);
    assert_eq!(mse_recon(&x, &x).unwrap(), 0.0);
    assert!(mse_recon(&x, &random_matrix(&mut rng, 3, 6, 1.0)).is_err());
}

#[test]
fn apd_mpd_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 2..=8 {
        let seqs: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, 5, 9, 1.0)).collect();
        let cols = [0usize, 4, 8];
        assert!((apd(&seqs, None).unwrap() - apd_oracle(&seqs, None)).abs() < 1e-9);
        assert!((mpd(&seqs, None).unwrap() - mpd_oracle(&seqs, None)).abs() < 1e-9);
        assert!((apd(&seqs, Some(&cols)).unwrap() - apd_oracle(&seqs, Some(&cols))).abs() < 1e-9);
        assert!((mpd(&seqs, Some(&cols)).unwrap() - mpd_oracle(&seqs, Some(&cols))).abs() < 1e-9);
    }
    let one = random_matrix(&mut rng, 2, 3, 1.0);
    assert!(apd(std::slice::from_ref(&one), None).is_err());
    assert!(mpd(std::slice::from_ref(&one), None).is_err());
}

#[test]
fn min_pairwise_diversity_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 2..=8 {
        let seqs: Vec<Matrix> = (0..k).map(|_| random_matrix(&mut rng, 3, 6, 1.0)).collect();
        let want = mpd_oracle(&seqs, Some(&[1, 2, 5])).powi(2);
        assert!((min_pairwise_diversity(&seqs, Some(&[1, 2, 5])).unwrap() - want).abs() < 1e-9);
    }
    let a = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
    let b = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(min_pairwise_diversity(&[a.clone(), b], None).unwrap(), 1.0);
    assert!(min_pairwise_diversity(&[a], None).is_err());
}

#[test]
fn diversity_clip_boundaries() {
    let w = SamplerLossWeights::default();
    assert_eq!(w.div_clip, (0.0, 160.0));
    assert_eq!(w.clip(300.0), 160.0);
    assert_eq!(w.clip(160.0), 160.0);
    assert_eq!(w.clip(0.0), 0.0);
    assert_eq!(w.clip(12.5), 12.5);
}

#[test]
fn sampler_kl_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prior = GaussianLatent::new(random_vec(&mut rng, 4, 1.0), random_vec(&mut rng, 4, 0.5)).unwrap();
    let heads: Vec<(Vec<f64>, Vec<f64>)> = (0..5).map(|_| (random_vec(&mut rng, 4, 2.0), random_vec(&mut rng, 4, 1.0))).collect();
    let want: f64 = heads
        .iter()
        .map(|(a, b)| {
            let sd: Vec<f64> = a.iter().map(|v| v.abs().max(1e-4)).collect();
            kl_oracle(b, &sd, &prior.mean, &prior.std())
        })
        .sum();
    assert!((sampler_kl(&heads, &prior).unwrap() - want).abs() < 1e-9);

    let single = sampler_kl(&heads[..1], &prior).unwrap();
    let repeated = vec![heads[0].clone(); 4];
    assert!((sampler_kl(&repeated, &prior).unwrap() - 4.0 * single).abs() < 1e-9);

    let matching = vec![(prior.std(), prior.mean.clone()); 3];
    assert!(sampler_kl(&matching, &prior).unwrap().abs() < 1e-12);
    assert!(sampler_kl(&[(vec![1.0; 3], vec![0.0; 3])], &prior).is_err());
}

#[test]
fn affine_head_monte_carlo() {
    let a = vec![0.5, -2.0, 1.3];
    let b = vec![1.0, -0.5, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = apply_head(&a, &b, &eps);
        for i in 0..3 {
            sum[i] += z[i];
            sq[i] += z[i] * z[i];
        }
    }
    for i in 0..3 {
        let mean = sum[i] / n as f64;
        let std = (sq[i] / n as f64 - mean * mean).sqrt();
        assert!((mean - b[i]).abs() < 0.02 * a[i].abs(), "mean {mean}");
        assert!((std - a[i].abs()).abs() < 0.02 * a[i].abs(), "std {std}");
    }
    assert_eq!(apply_head(&a, &b, &[0.0; 3]), b);
    assert_eq!(apply_head(&[1.0; 3], &[0.0; 3], &[0.2, 0.4, -1.0]), vec![0.2, 0.4, -1.0]);
}

fn walker_sequence(rng: &mut ChaCha8Rng, frames: usize) -> MotionSequence {
    let sk = Skeleton::walker();
    let m = random_matrix(rng, frames, sk.dim(), 1.0);
    MotionSequence::new(sk, m, 25.0).unwrap()
}

#[test]
fn split_merge_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let seq = walker_sequence(&mut rng, 7);
    let split = BodySplit::lower_upper(&seq.skeleton).unwrap();
    let p1 = split_sequence(&seq, &split, Part::Part1).unwrap();
    let p2 = split_sequence(&seq, &split, Part::Part2).unwrap();
    assert_eq!(p1.cols() + p2.cols(), seq.skeleton.dim());
    for (i, &j) in split.part(Part::Part1).iter().enumerate() {
        for r in 0..7 {
            for k in 0..3 {
                assert_eq!(p1.get(r, 3 * i + k), seq.frames.get(r, 3 * j + k));
            }
        }
    }
    assert_eq!(merge_parts(&p1, &p2, &split).unwrap(), seq.frames);
    assert!(merge_parts(&p2, &p1, &split).is_err());
}

#[test]
fn body_split_validation() {
    assert!(BodySplit::new(vec![0, 1], vec![1, 2], 3).is_err());
    assert!(BodySplit::new(vec![0], vec![1], 3).is_err());
    assert!(BodySplit::new(vec![], vec![0, 1], 2).is_err());
    let s = BodySplit::new(vec![2, 0], vec![1], 3).unwrap();
    assert_eq!(s.part(Part::Part1), &[0, 2]);
    assert_eq!(s.columns(Part::Part2), vec![3, 4, 5]);
    assert!(serde_json::from_str::<BodySplit>(r#"{"part1":[0],"part2":[0]}"#).is_err());
}

#[test]
fn aux_sequence_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let seq = walker_sequence(&mut rng, 9);
    let aux = build_aux_sequence(&seq).unwrap();
    let (first, last) = (seq.frames.row(0), seq.frames.row(8));
    for t in 0..9 {
        for c in 0..seq.skeleton.dim() {
            let want = first[c] + (t as f64 / 8.0) * (last[c] - first[c]);
            assert!((aux.frames.get(t, c) - want).abs() < 1e-9);
        }
    }
    assert_eq!(aux.frames.row(0), first);
    assert_eq!(aux.frames.row(8), last);

    let short = walker_sequence(&mut rng, 2);
    assert_eq!(build_aux_sequence(&short).unwrap().frames, short.frames);
    let single = walker_sequence(&mut rng, 1);
    assert!(build_aux_sequence(&single).is_err());
}

#[test]
fn limb_directions_are_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let sk = Skeleton::walker();
    for _ in 0..100 {
        let pose = random_vec(&mut rng, sk.dim(), 1.0);
        let d = limb_directions(&pose, &sk).unwrap();
        for j in 0..sk.joint_count() {
            let n = (d.dirs[3 * j].powi(2) + d.dirs[3 * j + 1].powi(2) + d.dirs[3 * j + 2].powi(2)).sqrt();
            match sk.parent(j) {
                Some(p) => {
                    assert!((n - 1.0).abs() < 1e-9);
                    let bone: Vec<f64> = (0..3).map(|k| pose[3 * j + k] - pose[3 * p + k]).collect();
                    let len = bone.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for k in 0..3 {
                        assert!((d.dirs[3 * j + k] - bone[k] / len).abs() < 1e-9);
                    }
                }
                None => assert_eq!(n, 0.0),
            }
        }
    }
    let zero = vec![0.0; sk.dim()];
    assert!(limb_directions(&zero, &sk).unwrap().degenerate);
    assert!(limb_directions(&zero[1..], &sk).is_err());
}

#[test]
fn global_translation_removal() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let seq = walker_sequence(&mut rng, 4);
    let root = seq.skeleton.root_index();
    let out = remove_global_translation(&seq, root).unwrap();
    for r in 0..4 {
        for k in 0..3 {
            assert_eq!(out.frames.get(r, 3 * root + k), 0.0);
        }
        for j in 0..seq.skeleton.joint_count() {
            for k in 0..3 {
                let want = seq.frames.get(r, 3 * j + k) - seq.frames.get(r, 3 * root + k);
                assert!((out.frames.get(r, 3 * j + k) - want).abs() < 1e-12);
            }
        }
    }
    assert!(remove_global_translation(&seq, 99).is_err());
}

fn seq_strategy() -> impl Strategy<Value = Vec<Matrix>> {
    (2usize..7, 1usize..4).prop_flat_map(|(k, rows)| {
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, rows * 6), k)
            .prop_map(move |vs| vs.into_iter().map(|v| Matrix::from_vec(rows, 6, v).unwrap()).collect())
    })
}

proptest! {
    #[test]
    fn mpd_never_exceeds_apd(seqs in seq_strategy()) {
        prop_assert!(mpd(&seqs, None).unwrap() <= apd(&seqs, None).unwrap() + 1e-12);
    }

    #[test]
    fn metrics_ignore_order(seqs in seq_strategy(), shift in 0usize..6) {
        let mut rotated = seqs.clone();
        let n = rotated.len();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        prop_assert!((apd(&seqs, None).unwrap() - apd(&rotated, None).unwrap()).abs() < 1e-9);
        prop_assert!((mpd(&seqs, None).unwrap() - mpd(&rotated, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn squared_distances_split_over_parts(seqs in seq_strategy()) {
        let split = BodySplit::from_part1(vec![1], 2).unwrap();
        let c1 = split.columns(Part::Part1);
        let c2 = split.columns(Part::Part2);
        let full = pairwise_sq_distances(&seqs, None).unwrap();
        let d1 = pairwise_sq_distances(&seqs, Some(&c1)).unwrap();
        let d2 = pairwise_sq_distances(&seqs, Some(&c2)).unwrap();
        for i in 0..full.len() {
            prop_assert!((full[i] - d1[i] - d2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn merge_inverts_split(v in prop::collection::vec(-5.0f64..5.0, 12), p1 in prop::collection::btree_set(0usize..4, 1..4)) {
        let part1: Vec<usize> = p1.into_iter().collect();
        let split = BodySplit::from_part1(part1, 4).unwrap();
        let m = Matrix::from_vec(1, 12, v).unwrap();
        let a = m.select_columns(&split.columns(Part::Part1));
        let b = m.select_columns(&split.columns(Part::Part2));
        prop_assert_eq!(merge_parts(&a, &b, &split).unwrap(), m);
    }
}
