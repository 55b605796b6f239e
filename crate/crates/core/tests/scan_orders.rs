use merba::scan::{
    apply_scan, build_permutation, classify_relation, invert_scan, Permutation, Relation, ScanDirection,
};
use merba::Tensor;
use proptest::prelude::*;

fn perm(name: &str, h: usize, w: usize) -> Permutation {
    build_permutation(&name.parse().unwrap(), h, w).unwrap()
}

#[test]
fn vertical_raster_on_two_by_two_tokens() {
    // tokens A=1, B=2, C=3, D=4, each with two identical channels
    let window = Tensor::<f32>::from_f64(&[2, 2, 2], &[1., 1., 2., 2., 3., 3., 4., 4.]).unwrap();
    let seq = apply_scan(&window, &perm("b", 2, 2)).unwrap();
    assert_eq!(seq.shape(), &[4, 2]);
    assert_eq!(seq.data(), &[1., 1., 3., 3., 2., 2., 4., 4.]);
}

#[test]
fn identity_scan_is_a_flatten() {
    let window = Tensor::<f64>::from_fn(&[3, 4, 5], |i| i as f64 * 0.5);
    let seq = apply_scan(&window, &perm("a", 3, 4)).unwrap();
    assert_eq!(seq.data(), window.data());
}

#[test]
fn extent_mismatch_is_rejected() {
    let window = Tensor::<f64>::zeros(&[3, 3, 2]);
    assert!(apply_scan(&window, &perm("a", 3, 4)).is_err());
    let seq = Tensor::<f64>::zeros(&[8, 2]);
    assert!(invert_scan(&seq, &perm("a", 3, 3)).is_err());
    assert!(classify_relation(&perm("a", 3, 3), &perm("a", 3, 4)).is_err());
}

#[test]
fn production_orders_start_top_left() {
    for dir in ScanDirection::PRODUCTION {
        assert_eq!(build_permutation(&dir, 7, 7).unwrap().order()[0], 0, "{dir}");
    }
}

#[test]
fn no_production_pair_is_redundant() {
    for (i, p) in ScanDirection::PRODUCTION.iter().enumerate() {
        for q in &ScanDirection::PRODUCTION[i + 1..] {
            let rel = classify_relation(
                &build_permutation(p, 7, 7).unwrap(),
                &build_permutation(q, 7, 7).unwrap(),
            );
            assert_eq!(rel.unwrap(), Relation::Unrelated, "{p} vs {q}");
        }
    }
}

#[test]
fn ablation_variants_are_detected() {
    let a = perm("a", 7, 7);
    let b = perm("b", 7, 7);
    assert_eq!(classify_relation(&a, &perm("a_bi", 7, 7)).unwrap(), Relation::Reversal);
    assert_eq!(
        classify_relation(&a, &perm("a_sy", 7, 7)).unwrap(),
        Relation::ColumnMirror
    );
    assert_eq!(classify_relation(&b, &perm("b_bi", 7, 7)).unwrap(), Relation::Reversal);
    assert_eq!(
        classify_relation(&b, &perm("b_sy", 7, 7)).unwrap(),
        Relation::ColumnMirror
    );
    assert_eq!(classify_relation(&a, &a).unwrap(), Relation::Identical);
}

fn direction() -> impl Strategy<Value = ScanDirection> {
    prop::sample::select(vec!["a", "b", "c", "d", "a_bi", "a_sy", "b_bi", "b_sy", "c_sy", "d_bi"])
        .prop_map(|s| s.parse().unwrap())
}

proptest! {
    #[test]
    fn every_order_is_a_bijection(dir in direction(), h in 1usize..12, w in 1usize..12) {
        let p = build_permutation(&dir, h, w).unwrap();
        let mut sorted = p.order().to_vec();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..h * w).collect::<Vec<_>>());
    }

    #[test]
    fn zigzags_only_step_to_neighbors(h in 1usize..12, w in 1usize..12) {
        prop_assert_eq!(perm("c", h, w).non_adjacent_transitions(), 0);
        prop_assert_eq!(perm("d", h, w).non_adjacent_transitions(), 0);
    }

    #[test]
    fn rasters_jump_once_per_line(h in 2usize..12, w in 2usize..12) {
        prop_assert_eq!(perm("a", h, w).non_adjacent_transitions(), h - 1);
        prop_assert_eq!(perm("b", h, w).non_adjacent_transitions(), w - 1);
    }

    #[test]
    fn scan_round_trips_bit_exact(dir in direction(), h in 1usize..9, w in 1usize..9, d in 1usize..5, seed in any::<u32>()) {
        let p = build_permutation(&dir, h, w).unwrap();
        let window = Tensor::<f32>::from_fn(&[h, w, d], |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-9);
        let seq = apply_scan(&window, &p).unwrap();
        prop_assert_eq!(&invert_scan(&seq, &p).unwrap(), &window);
        let back = apply_scan(&invert_scan(&seq, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(back, seq);
    }
}
