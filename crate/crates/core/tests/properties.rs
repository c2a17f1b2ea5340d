//! Invariants checked on generated inputs.

use proptest::prelude::*;
use protouda::distance::{DistanceMatrix, Metric};
use protouda::embeddings::Emb1;
use protouda::evaluate::mean_ci95;
use protouda::kmeans::{fit_kmeans_rows, KMeansConfig};
use protouda::mapping::closest_mapping;
use protouda::sinkhorn::{entropic_transport, sinkhorn_divergence, PointCloud, SinkhornParams};
use std::path::Path;

fn rows(max_rows: usize, dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop::collection::vec(-50.0f32..50.0, dim), 1..=max_rows)
        .prop_map(|r| r.concat())
}

fn cloud(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 1..=max_len).prop_map(|r| r.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emb1_round_trips_bitwise(
        dim in 1usize..6,
        seed_rows in prop::collection::vec(any::<u32>(), 1..20),
        with_labels in any::<bool>(),
    ) {
        let rows = seed_rows.len();
        let vectors: Vec<f32> = (0..rows * dim)
            .map(|i| f32::from_bits(seed_rows[i % rows].rotate_left(i as u32) & 0x3fff_ffff))
            .collect();
        let labels = with_labels.then(|| seed_rows.iter().map(|s| s % 1000).collect::<Vec<u32>>());
        let e = Emb1 { rows, dim, vectors, labels };
        let bytes = e.encode().unwrap();
        prop_assert_eq!(bytes.len(), 16 + rows * dim * 4 + if with_labels { rows * 4 } else { 0 });
        let back = Emb1::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back, e);
    }

    #[test]
    fn kmeans_model_is_consistent(data in rows(24, 2), k in 1usize..5, seed in 0u64..50) {
        let n = data.len() / 2;
        prop_assume!(k <= n);
        let cfg = KMeansConfig::new(k, seed);
        let model = fit_kmeans_rows(&data, 2, &cfg).unwrap();
        prop_assert_eq!(model.centroids.len(), k * 2);
        prop_assert_eq!(model.assignments.len(), n);
        for j in 0..k as u32 {
            prop_assert!(model.assignments.contains(&j), "cluster {} empty", j);
        }
        let recomputed: f64 = (0..n)
            .map(|i| {
                let c = model.centroid(model.assignments[i] as usize);
                (0..2).map(|d| (f64::from(data[i * 2 + d]) - f64::from(c[d])).powi(2)).sum::<f64>()
            })
            .sum();
        prop_assert!((recomputed - model.inertia).abs() <= 1e-9 * recomputed.max(1.0));
        prop_assert_eq!(fit_kmeans_rows(&data, 2, &cfg).unwrap(), model);
    }

    #[test]
    fn mapping_ignores_monotone_transforms(
        k_source in 1usize..8,
        k_target in 1usize..8,
        raw in prop::collection::vec(0.0f64..3.0, 64),
    ) {
        let values: Vec<f64> = raw.iter().cycle().take(k_source * k_target).copied().collect();
        let labels: Vec<u32> = (0..k_source as u32).collect();
        let make = |values: Vec<f64>| DistanceMatrix {
            k_source,
            k_target,
            values,
            metric: Metric::SinkhornW2,
            sinkhorn_params: None,
            converged_cells: 0,
        };
        let base = closest_mapping(&make(values.clone()), &labels).unwrap();
        let exp = closest_mapping(&make(values.iter().map(|v| v.exp()).collect()), &labels).unwrap();
        let affine = closest_mapping(&make(values.iter().map(|v| 3.0 * v + 1.0).collect()), &labels).unwrap();
        prop_assert_eq!(&base, &exp);
        prop_assert_eq!(&base, &affine);
    }

    #[test]
    fn ci_halfwidth_is_shift_invariant(values in prop::collection::vec(0.0f64..1.0, 2..8), shift in -1.0f64..1.0) {
        let (m, hw) = mean_ci95(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let (ms, hws) = mean_ci95(&shifted);
        prop_assert!(hw.unwrap() >= 0.0);
        prop_assert!((ms - m - shift).abs() < 1e-12);
        prop_assert!((hws.unwrap() - hw.unwrap()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_is_symmetric_and_vanishes_on_equal_clouds(
        dim in 1usize..4,
        a in cloud(6, 3),
        b in cloud(6, 3),
    ) {
        let a = PointCloud::from_f64_rows(a[..a.len() / 3 * dim].to_vec(), dim).unwrap();
        let b = PointCloud::from_f64_rows(b[..b.len() / 3 * dim].to_vec(), dim).unwrap();
        let params = SinkhornParams::default();
        let ab = sinkhorn_divergence(&a, &b, &params).unwrap();
        let ba = sinkhorn_divergence(&b, &a, &params).unwrap();
        prop_assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        prop_assert!(ab.value >= 0.0);
        let aa = sinkhorn_divergence(&a, &a, &params).unwrap();
        prop_assert!(aa.value <= 1e-8, "{}", aa.value);
        let t_ab = entropic_transport(&a, &b, &params).unwrap();
        let t_ba = entropic_transport(&b, &a, &params).unwrap();
        prop_assert_eq!(t_ab.f, t_ba.g);
    }

    #[test]
    fn sinkhorn_is_translation_invariant(
        a in cloud(5, 2),
        b in cloud(5, 2),
        shift in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let params = SinkhornParams::with_blur(1e-2);
        let moved = |v: &[f64]| -> Vec<f64> {
            v.chunks(2).flat_map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect()
        };
        let base = sinkhorn_divergence(
            &PointCloud::from_f64_rows(a.clone(), 2).unwrap(),
            &PointCloud::from_f64_rows(b.clone(), 2).unwrap(),
            &params,
        ).unwrap();
        let shifted = sinkhorn_divergence(
            &PointCloud::from_f64_rows(moved(&a), 2).unwrap(),
            &PointCloud::from_f64_rows(moved(&b), 2).unwrap(),
            &params,
        ).unwrap();
        prop_assert!((base.value - shifted.value).abs() <= 1e-6 * base.value.max(1e-3));
    }
}
