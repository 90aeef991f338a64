use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn mask(w: usize, h: usize, labels: &[u32]) -> SegMask {
    SegMask::new(w, h, labels.to_vec()).unwrap()
}

fn random_mask(rng: &mut impl Rng, w: usize, h: usize, labels: u32) -> SegMask {
    SegMask::new(w, h, (0..w * h).map(|_| rng.gen_range(0..labels)).collect()).unwrap()
}

fn pri_oracle(g: &SegMask, t: &SegMask) -> f64 {
    let n = g.len();
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let same_g = g.labels[i] == g.labels[j];
            let same_t = t.labels[i] == t.labels[j];
            agree += (same_g == same_t) as u64;
            total += 1;
        }
    }
    agree as f64 / total as f64
}

fn gce_oracle(g: &SegMask, t: &SegMask) -> f64 {
    let n = g.len();
    let region = |m: &SegMask, i: usize| -> Vec<usize> { (0..n).filter(|&j| m.labels[j] == m.labels[i]).collect() };
    let local = |a: &SegMask, b: &SegMask, i: usize| {
        let (ra, rb) = (region(a, i), region(b, i));
        ra.iter().filter(|p| !rb.contains(p)).count() as f64 / ra.len() as f64
    };
    let e1: f64 = (0..n).map(|i| local(g, t, i)).sum();
    let e2: f64 = (0..n).map(|i| local(t, g, i)).sum();
    e1.min(e2) / n as f64
}

fn entropy_oracle(g: &SegMask, t: &SegMask) -> f64 {
    let n = g.len() as f64;
    let mut labels_g: Vec<u32> = g.labels.clone();
    let mut labels_t: Vec<u32> = t.labels.clone();
    labels_g.sort_unstable();
    labels_g.dedup();
    labels_t.sort_unstable();
    labels_t.dedup();
    let p = |pred: &dyn Fn(usize) -> bool| (0..g.len()).filter(|&i| pred(i)).count() as f64 / n;
    let h = |ps: Vec<f64>| -ps.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let hg = h(labels_g.iter().map(|&a| p(&|i| g.labels[i] == a)).collect());
    let ht = h(labels_t.iter().map(|&b| p(&|i| t.labels[i] == b)).collect());
    let mut mi = 0.0;
    for &a in &labels_g {
        for &b in &labels_t {
            let pij = p(&|i| g.labels[i] == a && t.labels[i] == b);
            if pij > 0.0 {
                mi += pij * (pij / (p(&|i| g.labels[i] == a) * p(&|i| t.labels[i] == b))).ln();
            }
        }
    }
    hg + ht - 2.0 * mi
}

fn bde_oracle(b1: &[(usize, usize)], b2: &[(usize, usize)]) -> f64 {
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        a.iter()
            .map(|&(r, c)| {
                b.iter()
                    .map(|&(r2, c2)| {
                        let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / a.len() as f64
    };
    0.5 * (directed(b1, b2) + directed(b2, b1))
}

#[test]
fn confusion_examples() {
    let gt = mask(2, 2, &[1, 0, 1, 0]);
    let c = confusion(&gt, &gt, 1).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let pred = mask(2, 2, &[1, 1, 1, 1]);
    let c = confusion(&pred, &gt, 1).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 2, 0, 0));
    assert_eq!(iou(&c).unwrap(), 0.5);
    let swapped = confusion(&gt, &pred, 1).unwrap();
    assert_eq!((swapped.fp, swapped.fn_), (c.fn_, c.fp));
    assert_eq!(iou(&ConfusionCounts { tp: 1, ..Default::default() }).unwrap(), 1.0);
    assert!(iou(&ConfusionCounts { tn: 4, ..Default::default() }).is_err());
    assert!(confusion(&gt, &mask(4, 1, &[0; 4]), 1).is_err());
}

#[test]
fn components_are_eight_connected() {
    let m = mask(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
    let (_, sizes) = components(&m, 1);
    assert_eq!(sizes, [3]);
    let m = mask(3, 1, &[1, 0, 1]);
    assert_eq!(components(&m, 1).1, [1, 1]);
}

#[test]
fn iiou_examples() {
    let gt = mask(5, 1, &[1, 1, 0, 1, 1]);
    assert_eq!(iiou(&gt, &gt, 1).unwrap(), 1.0);
    // Left instance hit, right instance missed: iTP = 2, iFN = 2, FP = 0.
    let pred = mask(5, 1, &[1, 1, 0, 0, 0]);
    assert!((iiou(&pred, &gt, 1).unwrap() - 0.5).abs() < 1e-15);
    assert!(iiou(&pred, &mask(5, 1, &[0; 5]), 1).is_err());

    // Unequal sizes: the small instance counts as much as the large one.
    let gt = mask(6, 1, &[1, 0, 1, 1, 1, 1]);
    let pred = mask(6, 1, &[1, 0, 0, 0, 0, 0]);
    let (itp, ifn) = (2.5 * 1.0, 2.5 / 4.0 * 4.0);
    assert!((iiou(&pred, &gt, 1).unwrap() - itp / (itp + ifn)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn iiou_equals_iou_for_equal_instances(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Equal 2x2 squares spaced on a lattice so they never touch.
        let mut gt = SegMask::filled(12, 12, 0);
        for by in 0..4 {
            for bx in 0..4 {
                if rng.gen_bool(0.5) {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        gt.labels[(by * 3 + dy) * 12 + bx * 3 + dx] = 1;
                    }
                }
            }
        }
        prop_assume!(gt.labels.contains(&1));
        let pred = random_mask(&mut rng, 12, 12, 2);
        let a = iiou(&pred, &gt, 1).unwrap();
        let b = iou(&confusion(&pred, &gt, 1).unwrap()).unwrap();
        prop_assert!(a <= b + 1e-9);
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn partition_metric_examples() {
    let g = mask(3, 1, &[0, 0, 1]);
    let t = mask(3, 1, &[0, 1, 1]);
    assert!((pri(&g, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(pri(&g, &g).unwrap(), 1.0);
    assert!(pri(&mask(1, 1, &[0]), &mask(1, 1, &[0])).is_err());

    let g = mask(4, 1, &[0, 0, 1, 1]);
    let t = mask(4, 1, &[5, 5, 5, 5]);
    assert!((voi(&g, &t, LogBase::Natural).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((voi(&g, &t, LogBase::Two).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(voi(&g, &g, LogBase::Natural).unwrap(), 0.0);

    let t = mask(4, 1, &[0, 1, 2, 3]);
    assert_eq!(gce(&g, &t).unwrap(), 0.0);
    assert_eq!(gce(&t, &g).unwrap(), 0.0);
    assert_eq!(gce(&g, &g).unwrap(), 0.0);
}

#[test]
fn partition_metrics_match_oracles_exhaustively() {
    for (w, h) in [(1, 2), (2, 1), (2, 2), (3, 1), (3, 2), (2, 3), (3, 3)] {
        let n = w * h;
        let all: Vec<SegMask> = (0..1u32 << n)
            .map(|bits| SegMask::new(w, h, (0..n).map(|i| (bits >> i) & 1).collect()).unwrap())
            .collect();
        for g in &all {
            for t in &all {
                assert!((pri(g, t).unwrap() - pri_oracle(g, t)).abs() <= 1e-12);
                assert!((gce(g, t).unwrap() - gce_oracle(g, t)).abs() <= 1e-12);
                assert!((voi(g, t, LogBase::Natural).unwrap() - entropy_oracle(g, t)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn partition_metrics_match_oracles_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let labels = 2 + case % 4;
        let g = random_mask(&mut rng, 8, 8, labels);
        let t = random_mask(&mut rng, 8, 8, labels);
        assert!((pri(&g, &t).unwrap() - pri_oracle(&g, &t)).abs() <= 1e-12);
        assert!((gce(&g, &t).unwrap() - gce_oracle(&g, &t)).abs() <= 1e-12);
        assert!((voi(&g, &t, LogBase::Natural).unwrap() - entropy_oracle(&g, &t)).abs() <= 1e-12);
    }
}

#[test]
fn boundary_examples() {
    assert!(boundary_of(&SegMask::filled(4, 4, 3)).is_empty());
    let m = mask(2, 2, &[0, 1, 0, 1]);
    assert_eq!(boundary_of(&m), [(0, 0), (0, 1), (1, 0), (1, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_mask(&mut rng, 9, 7, 2);
    let complement = SegMask::new(9, 7, m.labels.iter().map(|v| 1 - v).collect()).unwrap();
    assert_eq!(boundary_of(&m), boundary_of(&complement));

    assert_eq!(bde(&[(0, 0)], &[(3, 4)]).unwrap(), 5.0);
    let b = boundary_of(&m);
    assert_eq!(bde(&b, &b).unwrap(), 0.0);
    assert!(bde(&[], &b).is_err());
    assert_eq!(bde_masks(&SegMask::filled(3, 3, 0), &SegMask::filled(3, 3, 1)).unwrap(), Some(0.0));
    assert_eq!(bde_masks(&m, &SegMask::filled(9, 7, 1)).unwrap(), None);
}

#[test]
fn bde_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let (h, w) = (rng.gen_range(1..50), rng.gen_range(1..50));
        let count = |rng: &mut ChaCha8Rng| rng.gen_range(1..=if case < 5 { 1000 } else { 60 });
        let mut pts = |n: usize| -> Vec<(usize, usize)> {
            (0..n).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect()
        };
        let n1 = count(&mut ChaCha8Rng::seed_from_u64(case));
        let n2 = count(&mut ChaCha8Rng::seed_from_u64(case + 1000));
        let (b1, b2) = (pts(n1), pts(n2));
        assert!((bde(&b1, &b2).unwrap() - bde_oracle(&b1, &b2)).abs() <= 1e-12);
    }
    for w in 1..=3 {
        for h in 1..=3 {
            let n = w * h;
            for x in 0..1u32 << n {
                for y in 0..1u32 << n {
                    let g = SegMask::new(w, h, (0..n).map(|i| (x >> i) & 1).collect()).unwrap();
                    let t = SegMask::new(w, h, (0..n).map(|i| (y >> i) & 1).collect()).unwrap();
                    let (bg, bt) = (boundary_of(&g), boundary_of(&t));
                    if !bg.is_empty() && !bt.is_empty() {
                        assert!((bde(&bg, &bt).unwrap() - bde_oracle(&bg, &bt)).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partition_metrics_ignore_label_names(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mask(&mut rng, 6, 5, 4);
        let t = random_mask(&mut rng, 6, 5, 4);
        let perm = [7u32, 2, 9, 0];
        let g2 = SegMask::new(6, 5, g.labels.iter().map(|&v| perm[v as usize]).collect()).unwrap();
        prop_assert_eq!(pri(&g, &t).unwrap(), pri(&g2, &t).unwrap());
        prop_assert!((voi(&g, &t, LogBase::Natural).unwrap() - voi(&g2, &t, LogBase::Natural).unwrap()).abs() < 1e-12);
        prop_assert!((gce(&g, &t).unwrap() - gce(&g2, &t).unwrap()).abs() < 1e-12);
        prop_assert_eq!(bde_masks(&g, &t).unwrap(), bde_masks(&g2, &t).unwrap());
        prop_assert!((voi(&g, &t, LogBase::Natural).unwrap() - voi(&t, &g, LogBase::Natural).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_mask(&mut rng, 7, 4, 3);
        let t = random_mask(&mut rng, 7, 4, 3);
        let p = pri(&g, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(voi(&g, &t, LogBase::Natural).unwrap() >= 0.0);
        let e = gce(&g, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        if let Some(b) = bde_masks(&g, &t).unwrap() {
            prop_assert!(b >= 0.0);
        }
        prop_assert_eq!(pri(&g, &g).unwrap(), 1.0);
        prop_assert_eq!(voi(&g, &g, LogBase::Natural).unwrap(), 0.0);
        prop_assert_eq!(gce(&g, &g).unwrap(), 0.0);
        prop_assert_eq!(bde_masks(&g, &g).unwrap(), Some(0.0));
    }
}

fn stats_1d(mean: f64, var: f64) -> GaussianStats {
    GaussianStats {
        mean: nalgebra::DVector::from_element(1, mean),
        cov: nalgebra::DMatrix::from_element(1, 1, var),
        n: 2,
    }
}

#[test]
fn gaussian_stats_examples() {
    let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
    assert_eq!((s.mean[0], s.cov[(0, 0)]), (1.0, 2.0));
    let s = gaussian_stats(&vec![vec![1.0, 2.0]; 3]).unwrap();
    assert!(s.cov.iter().all(|&v| v == 0.0));
    assert!(gaussian_stats(&[vec![1.0]]).is_err());
    let a = vec![vec![1.0, 0.5], vec![-2.0, 3.0], vec![0.25, 0.75]];
    let mut b = a.clone();
    b.rotate_left(1);
    let (sa, sb) = (gaussian_stats(&a).unwrap(), gaussian_stats(&b).unwrap());
    assert!((sa.cov - sb.cov).abs().max() < 1e-15);
}

#[test]
fn fid_closed_forms() {
    assert!(fid(&stats_1d(0.3, 2.0), &stats_1d(0.3, 2.0)).unwrap().abs() < 1e-9);
    assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
    assert!((fid(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
    let mut three = stats_1d(0.0, 1.0);
    three.mean = nalgebra::DVector::zeros(3);
    assert!(fid(&three, &stats_1d(0.0, 1.0)).is_err());
    let mut bad = stats_1d(0.0, -1.0);
    bad.n = 3;
    assert!(fid(&bad, &stats_1d(0.0, 1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn fid_is_symmetric(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..12).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0) * (1.0 + shift) + shift).collect()).collect()
        };
        let a = gaussian_stats(&sample(&mut rng, 0.0)).unwrap();
        let b = gaussian_stats(&sample(&mut rng, 0.7)).unwrap();
        let (x, y) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!(x >= 0.0);
    }
}

#[test]
fn pooled_embedding() {
    let img = Tensor::<f32>::full(&[3, 8, 8], 0.25);
    let e = embed_pooled(&[img.clone(), img]).unwrap();
    assert_eq!(e[0].len(), 48);
    assert!(e[0].iter().all(|&v| v == 0.25));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set: Vec<Tensor<f32>> = (0..6).map(|_| Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng)).collect();
    let f = embed_pooled(&set).unwrap();
    let s = gaussian_stats(&f).unwrap();
    assert!(fid(&s, &s).unwrap().abs() < 1e-9);
    assert!(embed_pooled(&[Tensor::zeros(&[3, 2, 2])]).is_err());
}

#[test]
fn report_on_identical_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items: Vec<EvalItem> = (0..3)
        .map(|i| {
            let m = random_mask(&mut rng, 8, 8, 2);
            EvalItem { id: format!("img{i}"), pred: m.clone(), gt: m }
        })
        .collect();
    let report = evaluate(&items, 1, None, serde_json::json!({"source": "test"})).unwrap();
    assert_eq!(report.aggregate.iou, Some(1.0));
    assert_eq!(report.aggregate.voi, 0.0);
    assert_eq!(report.aggregate.bde, Some(0.0));
    assert_eq!(report.aggregate.pri, 1.0);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["per_image", "aggregate", "fid", "config"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    for key in ["id", "iou", "pri", "voi", "gce", "bde"] {
        assert!(json["per_image"][0].get(key).is_some(), "{key}");
    }
    assert!(evaluate(&[], 1, None, serde_json::Value::Null).is_err());
}
