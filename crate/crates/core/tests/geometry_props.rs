use lcm_core::geometry::{
    chamfer_l2, farthest_point_sample, hilbert_index, hilbert_order, knn_indices, order_by_axis, read_xyz,
    write_xyz, Axis, OrderingSpec,
};
use lcm_core::Tensor64;
use proptest::prelude::*;

fn cloud(max: usize) -> impl Strategy<Value = Tensor64> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * 3).prop_map(move |v| Tensor64::new(&[n, 3], v).unwrap())
    })
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut s = p.to_vec();
    s.sort_unstable();
    s == (0..n).collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_equals_full_sort(q in cloud(24), keys in cloud(24), kf in 0.0f64..1.0) {
        let m = keys.rows();
        let k = 1 + ((m - 1) as f64 * kf) as usize;
        let table = knn_indices(&q, &keys, k).unwrap();
        for i in 0..q.rows() {
            let mut all: Vec<usize> = (0..m).collect();
            all.sort_by(|&a, &b| d2(q.row(i), keys.row(a)).total_cmp(&d2(q.row(i), keys.row(b))).then(a.cmp(&b)));
            prop_assert_eq!(table.row(i), &all[..k]);
        }
    }

    #[test]
    fn fps_picks_the_farthest_remaining_point(pts in cloud(40), nf in 0.0f64..1.0) {
        let l = pts.rows();
        let n = 1 + ((l - 1) as f64 * nf) as usize;
        let (_, idx) = farthest_point_sample(&pts, n, 0).unwrap();
        prop_assert_eq!(idx[0], 0);
        for i in 1..n {
            let dist = |q: usize| idx[..i].iter().map(|&s| d2(pts.row(q), pts.row(s))).fold(f64::INFINITY, f64::min);
            let best = (0..l).map(dist).fold(0.0, f64::max);
            prop_assert_eq!(dist(idx[i]), best);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(a in cloud(12), b in cloud(12)) {
        let ab = chamfer_l2(&a, &b).unwrap();
        let ba = chamfer_l2(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn orderings_are_permutations(c in cloud(48), spec in "[XYZH]{1,4}") {
        let n = c.rows();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let p = order_by_axis(&c, axis);
            prop_assert!(is_permutation(&p, n));
            let col = match axis { Axis::X => 0, Axis::Y => 1, Axis::Z => 2 };
            prop_assert!(p.windows(2).all(|w| c.at(w[0], col) <= c.at(w[1], col)));
        }
        prop_assert!(is_permutation(&hilbert_order(&c, 8), n));
        let spec: OrderingSpec = spec.parse().unwrap();
        let perms = spec.permutations(&c);
        prop_assert_eq!(perms.len(), spec.kinds().len());
        prop_assert!(perms.iter().all(|p| is_permutation(p, n)));
    }

    #[test]
    fn xyz_round_trip_keeps_six_decimals(c in cloud(32)) {
        let mut buf = Vec::new();
        write_xyz(&c, &mut buf).unwrap();
        let back: Tensor64 = read_xyz(buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), c.shape());
        prop_assert!(back.max_abs_diff(&c) <= 5e-7 + 1e-15);
    }
}

#[test]
fn hilbert_curve_visits_every_cell_through_neighbors() {
    for bits in 1..=3u32 {
        let side = 1u32 << bits;
        let mut cells = vec![[0u32; 3]; (side * side * side) as usize];
        let mut seen = vec![false; cells.len()];
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    let h = hilbert_index([x, y, z], bits) as usize;
                    assert!(!seen[h], "index {h} repeated");
                    seen[h] = true;
                    cells[h] = [x, y, z];
                }
            }
        }
        for w in cells.windows(2) {
            let step: u32 = (0..3).map(|i| w[0][i].abs_diff(w[1][i])).sum();
            assert_eq!(step, 1, "bits {bits}: {:?} -> {:?}", w[0], w[1]);
        }
    }
}
