mod common;

use common::*;
use conta::metrics::{miou, MiouAccumulator};
use conta::{ClassMask, IGNORE};

#[test]
fn matches_pixel_loop_on_seeded_pairs() {
    let mut r = rng(41);
    for _ in 0..20 {
        let pred = random_mask(&mut r, 8, 8, 3, false);
        let gt = random_mask(&mut r, 8, 8, 3, true);
        let m = miou(&pred, &gt, 3).unwrap();
        let (per, mean) = miou_oracle(pred.values(), gt.values(), 3);
        assert_eq!(m.per_class, per);
        assert_eq!(m.mean, mean);
    }
}

#[test]
fn hand_case_two_of_six() {
    // gt: 4 class-1 pixels; pred hits 2 of them and adds 2 elsewhere
    #[rustfmt::skip]
    let gt = ClassMask::from_vec(4, 4, vec![
        1, 1, 0, 0,
        1, 1, 0, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ]).unwrap();
    #[rustfmt::skip]
    let pred = ClassMask::from_vec(4, 4, vec![
        1, 1, 1, 1,
        0, 0, 0, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ]).unwrap();
    let m = miou(&pred, &gt, 1).unwrap();
    assert_eq!(m.per_class[1], Some(2.0 / 6.0));
    // background: 10 shared of 14 in the union
    assert_eq!(m.per_class[0], Some(10.0 / 14.0));
}

#[test]
fn trivial_cases() {
    let gt = ClassMask::filled(4, 4, 1);
    assert_eq!(miou(&gt, &gt, 2).unwrap().mean, 1.0);
    let m = miou(&ClassMask::filled(4, 4, 0), &gt, 2).unwrap();
    assert_eq!(m.per_class, vec![Some(0.0), Some(0.0), None]);
    assert_eq!(m.mean, 0.0);
    assert!(miou(&ClassMask::filled(4, 3, 0), &gt, 2).is_err());
}

#[test]
fn ignored_ground_truth_pixels_do_not_count() {
    let gt = ClassMask::from_vec(1, 4, vec![1, IGNORE, IGNORE, 0]).unwrap();
    let pred = ClassMask::from_vec(1, 4, vec![1, 0, 1, 0]).unwrap();
    assert_eq!(miou(&pred, &gt, 1).unwrap().mean, 1.0);
}

#[test]
fn accumulation_is_dataset_level() {
    let mut r = rng(42);
    let pairs: Vec<(ClassMask, ClassMask)> = (0..5)
        .map(|_| (random_mask(&mut r, 6, 6, 2, false), random_mask(&mut r, 6, 6, 2, true)))
        .collect();
    let mut acc = MiouAccumulator::new(2);
    let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
    for (p, g) in &pairs {
        acc.add(p, g).unwrap();
        p_all.extend_from_slice(p.values());
        g_all.extend_from_slice(g.values());
    }
    let (per, mean) = miou_oracle(&p_all, &g_all, 2);
    let got = acc.result();
    assert_eq!(got.per_class, per);
    assert!((got.mean - mean).abs() < 1e-15);
}
