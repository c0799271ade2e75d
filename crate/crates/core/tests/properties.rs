//! Property-based invariants across modules.

use omnidistill::datagen::{decode_dataset, encode_dataset, generate, GeneratorConfig, OmniDataset, Split};
use omnidistill::distill::{decode_synthetic, encode_synthetic, SyntheticSet};
use omnidistill::eval::recall_from_embeddings;
use omnidistill::spectral::{decompose, DEFAULT_GAP_TOL};
use omnidistill::theory::estimate_lipschitz;
use omnidistill::Mat;
use proptest::prelude::*;

fn names(k: usize) -> Vec<String> {
    ["video", "text", "audio", "depth"][..k].iter().map(|s| s.to_string()).collect()
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v).unwrap())
}

fn blocks(k: usize, n: usize, d: usize) -> impl Strategy<Value = Vec<Mat<f64>>> {
    prop::collection::vec(mat(n, d), k)
}

fn unit_rows(k: usize, d: usize) -> impl Strategy<Value = Mat<f64>> {
    mat(k, d)
        .prop_filter("rows need nonzero norm", |m| (0..m.rows()).all(|i| m.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-3))
        .prop_map(|mut m| {
            for i in 0..m.rows() {
                let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                m.row_mut(i).iter_mut().for_each(|x| *x /= n);
            }
            m
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_invariant_to_joint_instance_permutation(
        emb in blocks(3, 12, 4),
        perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let ks = [1, 3, 12];
        let base = recall_from_embeddings(&names(3), &emb, &ks).unwrap();
        let permuted: Vec<Mat<f64>> = emb.iter().map(|m| m.select_rows(&perm)).collect();
        let again = recall_from_embeddings(&names(3), &permuted, &ks).unwrap();
        for (a, b) in base.average.iter().zip(&again.average) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn recall_is_invariant_to_positive_rescaling_of_a_modality(
        emb in blocks(2, 10, 3),
        scale in 0.1f64..10.0,
    ) {
        let ks = [1, 5];
        let base = recall_from_embeddings(&names(2), &emb, &ks).unwrap();
        let scaled = vec![emb[0].map(|x| x * scale), emb[1].clone()];
        let again = recall_from_embeddings(&names(2), &scaled, &ks).unwrap();
        prop_assert_eq!(base.average, again.average);
    }

    #[test]
    fn recall_is_monotone_in_cutoff_and_full_at_n(emb in blocks(3, 9, 3)) {
        let ks: Vec<usize> = (1..=9).collect();
        let r = recall_from_embeddings(&names(3), &emb, &ks).unwrap();
        prop_assert_eq!(r.pairs.len(), 6);
        for p in &r.pairs {
            for w in p.recall.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!((p.recall[8] - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_of_unit_rows_sums_to_k_and_is_ordered(z in unit_rows(3, 6)) {
        let s = decompose(&z, DEFAULT_GAP_TOL).unwrap();
        let total: f64 = s.eigenvalues.iter().sum();
        prop_assert!((total - 3.0).abs() < 1e-10);
        for w in s.sigmas.windows(2) {
            prop_assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        for u in &s.left_vectors {
            prop_assert!(u.iter().sum::<f64>() >= 0.0);
        }
        let norm: f64 = s.proxy.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn generated_rows_are_unit_norm(seed in 0u64..1000, n in 5usize..40, spread in 0.0f64..1.0) {
        let cfg = GeneratorConfig { n, num_classes: 5, within_class_spread: spread, seed, ..GeneratorConfig::default() };
        let ds = generate(&cfg, Split::Train).unwrap();
        for m in &ds.modalities {
            for i in 0..m.rows() {
                let norm: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_encoding_roundtrips_bit_exactly(emb in blocks(2, 5, 3), labelled in any::<bool>()) {
        let labels = (0..5).map(|i| labelled.then_some(i as u32)).collect();
        let ds = OmniDataset::new(names(2), emb, labels, None).unwrap();
        let back = decode_dataset(&encode_dataset(&ds)).unwrap();
        prop_assert_eq!(back.names, ds.names);
        prop_assert_eq!(back.labels, ds.labels);
        for (a, b) in back.modalities.iter().zip(&ds.modalities) {
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn synthetic_encoding_roundtrips_bit_exactly(
        emb in blocks(3, 4, 2),
        a in mat(4, 2),
        b in mat(4, 2),
        lr in 1e-4f64..1.0,
    ) {
        let syn = SyntheticSet { names: names(3), modalities: emb, sim_a: a, sim_b: b, sim_scale: 0.5, student_lr: lr };
        let back = decode_synthetic(&encode_synthetic(&syn)).unwrap();
        prop_assert_eq!(back, syn);
    }

    #[test]
    fn lipschitz_estimate_never_decreases_with_more_probes(
        a in mat(2, 2),
        states in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 2..5),
        extra in 1usize..8,
    ) {
        let field = |x: &[f64]| -> omnidistill::Result<Vec<f64>> {
            let y = a.matvec(x);
            Ok(y.iter().map(|v| v.sin() + 0.1 * v * v * v).collect())
        };
        let few = estimate_lipschitz(field, &states, 3, 7);
        let many = estimate_lipschitz(field, &states, 3 + extra, 7);
        if let (Ok(few), Ok(many)) = (few, many) {
            prop_assert!(many >= few);
            prop_assert!(few >= 0.0);
        }
    }
}
