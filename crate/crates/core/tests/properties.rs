mod common;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use common::*;
use deltaprint::adapter_io::{
    parse_adapter, reconstruct_delta, write_adapter, AdapterMetadata, AdapterWeights, Category, DeltaVector, LoraPair,
    ModuleKind, NamePattern, ScalePolicy, StorageDtype, SublayerKey,
};
use deltaprint::behavior_link::{AsrRow, AsrTable};
use deltaprint::classify::{fit, stratified_split, train_count};
use deltaprint::pca::pca_fit;
use deltaprint::spectral::{sublayer_columns, svd, FeatureColumn, FeatureMatrix};
use deltaprint::stats::{auc, spearman};
use deltaprint::synthgen::{gen_rank1_injection, PopulationSpec, HARMLESSNESS_SEED, HELPFULNESS_SEED};

fn vectors(rows: &[Vec<f64>]) -> Vec<DeltaVector> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| DeltaVector {
            adapter_id: format!("v{i:03}"),
            values: r.clone(),
            ordering_tag: "t".into(),
        })
        .collect()
}

fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = rng(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_recomposes_and_matches_eigenvalues(seed in any::<u64>(), d in 1usize..24, k in 1usize..24) {
        let m = gaussian_matrix(&mut rng(seed), d, k);
        let s = svd(&m).unwrap();
        prop_assert!((s.recompose() - &m).norm() <= 1e-10 * m.norm());
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        let oracle = singular_values_sq(&m);
        for (sig, lam) in s.sigma.iter().zip(&oracle) {
            prop_assert!((sig * sig - lam).abs() <= 1e-8 * oracle[0].max(1.0));
        }
    }

    #[test]
    fn low_rank_inputs_recompose(seed in any::<u64>(), d in 2usize..20, k in 2usize..20, rank in 1usize..4) {
        let mut r = rng(seed);
        let m = gaussian_matrix(&mut r, d, rank) * gaussian_matrix(&mut r, rank, k);
        let s = svd(&m).unwrap();
        prop_assert!((s.recompose() - &m).norm() <= 1e-10 * m.norm());
        let numeric_rank = (0..s.rank_p()).filter(|i| !s.is_null_direction(*i)).count();
        prop_assert_eq!(numeric_rank, rank.min(d).min(k));
    }

    #[test]
    fn auc_matches_pair_counting(seed in any::<u64>(), n in 2usize..50, levels in 2u32..12) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels))).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pair_count_auc(&scores, &labels)).abs() <= 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert_eq!(a + auc(&scores, &flipped).unwrap(), 1.0);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&negated, &labels).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn spearman_matches_counted_ranks(seed in any::<u64>(), n in 3usize..50, levels in 2u32..12) {
        let mut r = rng(seed);
        let mut x: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels))).collect();
        let mut y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        x[0] = -1.0;
        y[1] = 2.0;
        let rho = spearman(&x, &y).unwrap().rho;
        prop_assert!((rho - rank_spearman(&x, &y)).abs() <= 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        prop_assert!((spearman(&cubed, &y).unwrap().rho - rho).abs() <= 1e-12);
    }

    #[test]
    fn pca_ratios_are_rotation_invariant(seed in any::<u64>(), n in 4usize..10, d in 3usize..16) {
        let rows = random_rows(seed, n, d);
        let q = random_orthonormal(&mut rng(seed ^ 0x5eed), d, d);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| (q.transpose() * nalgebra::DVector::from_vec(r.clone())).iter().copied().collect())
            .collect();
        let a = pca_fit(&vectors(&rows)).unwrap();
        let b = pca_fit(&vectors(&rotated)).unwrap();
        prop_assert_eq!(a.n_components(), b.n_components());
        for (x, y) in a.explained_variance_ratio.iter().zip(&b.explained_variance_ratio) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        prop_assert!(a.explained_variance_ratio.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(a.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
        prop_assert!(a.n_components() < n);
    }

    #[test]
    fn pca_scores_are_centered(seed in any::<u64>(), n in 3usize..12, d in 2usize..30) {
        let model = pca_fit(&vectors(&random_rows(seed, n, d))).unwrap();
        for j in 0..model.n_components() {
            let sum: f64 = model.scores(j).unwrap().iter().sum();
            prop_assert!(sum.abs() <= 1e-8 * n as f64);
        }
    }

    #[test]
    fn pca_of_duplicated_vectors(seed in any::<u64>(), n in 3usize..8, d in 4usize..20) {
        let rows = random_rows(seed, n, d);
        let doubled: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let a = pca_fit(&vectors(&rows)).unwrap();
        let b = pca_fit(&vectors(&doubled)).unwrap();
        prop_assert_eq!(b.n, 2 * a.n);
        prop_assert_eq!(a.n_components(), b.n_components());
        for (j, (x, y)) in a.explained_variance_ratio.iter().zip(&b.explained_variance_ratio).enumerate() {
            prop_assert!((x - y).abs() <= 1e-9);
            let sa = a.scores(j).unwrap();
            let sb = b.scores(j).unwrap();
            prop_assert!(max_diff_up_to_sign(&sa, &sb[..n]) <= 1e-8);
            prop_assert!(max_diff_up_to_sign(&sb[..n], &sb[n..]) <= 1e-8);
        }
    }

    #[test]
    fn logreg_label_flip_negates_the_model(seed in any::<u64>(), n in 8usize..30, p in 1usize..6, lambda in 0.05f64..10.0) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, n, p);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let columns: Vec<FeatureColumn> = sublayer_columns(p, false)
            .into_iter()
            .chain(sublayer_columns(p, false))
            .take(p)
            .enumerate()
            .map(|(i, (family, name))| FeatureColumn {
                sublayer: SublayerKey::new(i, ModuleKind::Value),
                family,
                name,
            })
            .collect();
        let a = fit(&x, &labels, lambda, &columns).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = fit(&x, &flipped, lambda, &columns).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            prop_assert!((wa + wb).abs() <= 1e-6 * (1.0 + wa.abs()));
        }
        prop_assert!((a.bias + b.bias).abs() <= 1e-6 * (1.0 + a.bias.abs()));
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let sum = a.predict_proba(&row).unwrap() + b.predict_proba(&row).unwrap();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn stratified_split_is_deterministic(seed in any::<u64>(), sizes in prop::collection::vec(2usize..12, 1..4), ratio in 0.2f64..0.9) {
        let items: Vec<(String, String)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(s, n)| (0..*n).map(move |i| (format!("s{s}-{i:02}"), format!("stratum{s}"))))
            .collect();
        let a = stratified_split(&items, ratio, seed).unwrap();
        let mut shuffled = items.clone();
        shuffled.reverse();
        prop_assert_eq!(&a, &stratified_split(&shuffled, ratio, seed).unwrap());
        for (s, n) in sizes.iter().enumerate() {
            let prefix = format!("s{s}-");
            let train = a.train_ids.iter().filter(|id| id.starts_with(&prefix)).count();
            let test = a.test_ids.iter().filter(|id| id.starts_with(&prefix)).count();
            prop_assert_eq!(train, train_count(*n, ratio));
            prop_assert_eq!(train + test, *n);
        }
    }

    #[test]
    fn adapter_container_round_trips(seed in any::<u64>(), d in 1usize..10, k in 1usize..10, rank in 1usize..4, layers in 1usize..3) {
        let mut r = rng(seed);
        let mut factors = BTreeMap::new();
        for layer in 0..layers {
            for module in ModuleKind::ALL {
                factors.insert(
                    SublayerKey::new(layer, module),
                    LoraPair { a: gaussian_matrix(&mut r, rank, k), b: gaussian_matrix(&mut r, d, rank) },
                );
            }
        }
        let weights = AdapterWeights {
            adapter_id: "roundtrip".into(),
            rank,
            alpha: 16.0,
            factors,
            metadata: AdapterMetadata::new(Category::Healthy),
        };
        let pattern = NamePattern::default();
        let bytes = write_adapter(&weights, StorageDtype::F64, &pattern).unwrap();
        let back = parse_adapter(&bytes, "roundtrip", weights.metadata.clone(), None, &pattern).unwrap();
        prop_assert_eq!(&back, &weights);
        let delta = reconstruct_delta(&back, ScalePolicy::AlphaOverRank).unwrap();
        let key = SublayerKey::new(0, ModuleKind::Query);
        let pair = &weights.factors[&key];
        let expected = (&pair.b * &pair.a) * (16.0 / rank as f64);
        prop_assert!((&delta.deltas[&key] - expected).norm() <= 1e-12 * delta.deltas[&key].norm().max(1.0));
    }

    #[test]
    fn asr_table_round_trips(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let rows: Vec<AsrRow> = (0..n)
            .map(|i| AsrRow {
                adapter_id: format!("a{i:02}"),
                asr: r.random::<f64>(),
                n_prompts: r.random_range(1..500),
                judge_tag: "judge".into(),
            })
            .collect();
        let table = AsrTable { rows };
        prop_assert_eq!(AsrTable::parse(&table.to_csv()).unwrap(), table);
    }

    #[test]
    fn feature_matrix_csv_round_trips(seed in any::<u64>(), n in 1usize..6, k in 1usize..4) {
        let mut r = rng(seed);
        let columns: Vec<FeatureColumn> = [ModuleKind::Query, ModuleKind::Value]
            .into_iter()
            .flat_map(|module| {
                sublayer_columns(k, false).into_iter().map(move |(family, name)| FeatureColumn {
                    sublayer: SublayerKey::new(0, module),
                    family,
                    name,
                })
            })
            .collect();
        let values = DMatrix::from_fn(n, columns.len(), |_, _| r.random::<f64>() * 1e3 - 5e2);
        let labels: Vec<AdapterMetadata> = (0..n)
            .map(|i| {
                let mut m = AdapterMetadata::new(if i % 2 == 0 { Category::Healthy } else { Category::InvertedHelpfulness });
                m.intensity = (i % 2 == 1).then_some(i as u64 * 100);
                m
            })
            .collect();
        let matrix = FeatureMatrix { ids: (0..n).map(|i| format!("m{i}")).collect(), columns, values, labels };
        let back = FeatureMatrix::from_csv(&matrix.to_csv().unwrap(), &matrix.labels_json()).unwrap();
        prop_assert_eq!(back, matrix);
    }
}

#[test]
fn injection_deltas_are_exactly_rank_one() {
    let spec = PopulationSpec::default();
    for objective in [HARMLESSNESS_SEED, HELPFULNESS_SEED] {
        for i in 1..=6 {
            let coef = spec.base_scale * (spec.injection_offset + spec.injection_unit * f64::from(i));
            let w = gen_rank1_injection(&spec, objective, coef).unwrap();
            let delta = reconstruct_delta(&w, ScalePolicy::Unit).unwrap();
            for (key, m) in &delta.deltas {
                let s = svd(m).unwrap();
                assert!((s.recompose() - m).norm() <= 1e-10 * m.norm(), "{key} at coefficient {coef}");
                assert!((s.sigma[0] - coef).abs() <= 1e-9 * coef, "{key}: sigma1 {} vs {coef}", s.sigma[0]);
                assert!(s.is_null_direction(1), "{key}: sigma2 {}", s.sigma[1]);
            }
        }
    }
}
