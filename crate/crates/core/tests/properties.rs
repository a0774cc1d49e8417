use std::collections::BTreeSet;
use std::io::Write;

use ncart_core::data::load_csv;
use ncart_core::layers::{relu_fwd, sigmoid_fwd, softmax_fwd};
use ncart_core::metrics::{f1, roc_auc};
use ncart_core::odt::fit_table;
use ncart_core::train::{assign_folds, AdamState};
use ncart_core::{Dataset, Labels, Matrix, NcartConfig, NcartModel, Schema, SparseFn, Task};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(any::<bool>(), n).prop_filter("both labels", |l| l.contains(&true) && l.contains(&false)),
        )
    })
}

proptest! {
    #[test]
    fn auc_ignores_strictly_increasing_transforms((scores, labels) in labelled_scores(), scale in 0.01f64..10.0, offset in -5.0f64..5.0) {
        let base = roc_auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| scale * s + offset).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 10.0).tanh()).collect();
        prop_assert_eq!(roc_auc(&affine, &labels).unwrap(), base);
        prop_assert_eq!(roc_auc(&cubed, &labels).unwrap(), base);
        prop_assert_eq!(roc_auc(&squashed, &labels).unwrap(), base);
    }

    #[test]
    fn macro_f1_ignores_label_renaming(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let pred_p: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let labels_p: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let base = f1(&pred, &labels, 4).unwrap();
        let renamed = f1(&pred_p, &labels_p, 4).unwrap();
        prop_assert!((base - renamed).abs() < 1e-12, "{} vs {}", base, renamed);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn ordinal_codes_are_dense(values in prop::collection::vec(0u8..6, 1..30)) {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "color,y").unwrap();
        for (i, v) in values.iter().enumerate() {
            writeln!(file, "c{v},{}", i as f64 * 0.5).unwrap();
        }
        file.flush().unwrap();
        let data = load_csv(file.path(), "y", Task::Regression, &["color".into()], None).unwrap();
        let distinct: BTreeSet<u8> = values.iter().copied().collect();
        let codes: BTreeSet<usize> = (0..data.rows()).map(|r| data.x.row(r)[0] as usize).collect();
        prop_assert_eq!(codes, (0..distinct.len()).collect::<BTreeSet<_>>());
        let dict = &data.categories["color"];
        prop_assert_eq!(dict.len(), distinct.len());
        for (r, v) in values.iter().enumerate() {
            prop_assert_eq!(&dict[data.x.row(r)[0] as usize], &format!("c{v}"));
        }
    }

    #[test]
    fn odt_residual_is_unchanged_by_a_constant_shift(
        table in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(-20i32..20, c), r)),
        shift in -100i32..100,
    ) {
        let table: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let shifted: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| v + shift as f64).collect()).collect();
        let base = fit_table(&table).unwrap().residual;
        let moved = fit_table(&shifted).unwrap().residual;
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base), "{} vs {}", base, moved);
    }

    #[test]
    fn odt_residual_vanishes_exactly_on_additive_tables(
        a in prop::collection::vec(-20i32..20, 1..6),
        b in prop::collection::vec(-20i32..20, 1..6),
        bump in prop::option::of((0usize..6, 0usize..6, 1i32..10)),
    ) {
        let mut table: Vec<Vec<f64>> = a.iter().map(|&x| b.iter().map(|&y| (x + y) as f64).collect()).collect();
        let additive = match bump {
            Some((r, c, d)) if a.len() > 1 && b.len() > 1 => {
                table[r % a.len()][c % b.len()] += d as f64;
                false
            }
            _ => true,
        };
        let residual = fit_table(&table).unwrap().residual;
        if additive {
            prop_assert!(residual <= 1e-9, "additive table left residual {}", residual);
        } else {
            prop_assert!(residual > 0.5, "non-additive table fitted with residual {}", residual);
        }
    }

    #[test]
    fn fold_contents_do_not_depend_on_row_order(
        rows in prop::collection::vec((0usize..3, any::<u64>()), 10..60),
        k in 2usize..4,
        perm_seed in any::<u64>(),
    ) {
        let names: Vec<String> = (0..3).map(|c| c.to_string()).collect();
        prop_assume!((0..3).all(|c| {
            let n = rows.iter().filter(|r| r.0 == c).count();
            n == 0 || n >= k
        }));
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted: Vec<(usize, u64)> = order.iter().map(|&i| rows[i]).collect();

        for regression in [false, true] {
            let folds_of = |rs: &[(usize, u64)]| {
                let codes: Vec<usize> = rs.iter().map(|r| r.0).collect();
                let keys: Vec<u64> = rs.iter().map(|r| r.1).collect();
                let classes = (!regression).then_some((codes.as_slice(), names.as_slice()));
                assign_folds(classes, &keys, k).unwrap()
            };
            let base = folds_of(&rows);
            let moved = folds_of(&permuted);
            for (pos, &i) in order.iter().enumerate() {
                prop_assert_eq!(moved[pos], base[i]);
            }
        }
    }

    #[test]
    fn activations_stay_in_range(values in prop::collection::vec(-60.0f64..60.0, 1..24)) {
        let n = values.len();
        let m = Matrix::from_vec(1, n, values).unwrap();
        prop_assert!(sigmoid_fwd(&m).as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(relu_fwd(&m).as_slice().iter().all(|&v| v >= 0.0));
        let p = softmax_fwd(&m);
        prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn blobs(rows: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = Vec::new();
    let x = Matrix::from_fn(rows, 4, |r, c| {
        if c == 0 {
            codes.push(r % 3);
        }
        rng.gen_range(-1.0..1.0) + if c == r % 3 { 2.0 } else { 0.0 }
    });
    let schema = Schema {
        features: (0..4).map(|j| format!("f{j}")).collect(),
        target: "y".into(),
        categorical: vec![],
        task: Task::Multiclass,
    };
    let names = (0..3).map(|c| c.to_string()).collect();
    Dataset::from_parts(x, Labels::Classes { codes, names }, schema).unwrap()
}

fn small_model(sparse_fn: SparseFn, seed: u64) -> NcartModel {
    let config = NcartConfig {
        blocks: 2,
        trees: 8,
        sel_dim: 3,
        hidden: Some(8),
        sparse_fn,
        lr: 1e-2,
        ..NcartConfig::default()
    };
    NcartModel::init(&config, 4, 3, Task::Multiclass, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn full_batch_loss_falls_over_ten_steps(seed in 0u64..1000, entmax in any::<bool>()) {
        let data = blobs(60, seed);
        let sparse_fn = if entmax { SparseFn::Entmax } else { SparseFn::Sparsemax };
        let mut model = small_model(sparse_fn, seed);
        let mut adam = AdamState::for_model(&model, 1e-2);
        let mut losses = Vec::new();
        for _ in 0..=10 {
            let (loss, grads) = model.loss_and_grad(&data.x, data.targets()).unwrap();
            losses.push(loss);
            adam.update(model.params_mut(), &grads).unwrap();
        }
        prop_assert!(losses[10] < losses[0], "losses {:?}", losses);
    }

    #[test]
    fn selection_rows_stay_on_the_simplex_while_training(seed in 0u64..1000, entmax in any::<bool>()) {
        let data = blobs(30, seed);
        let sparse_fn = if entmax { SparseFn::Entmax } else { SparseFn::Sparsemax };
        let mut model = small_model(sparse_fn, seed);
        let mut adam = AdamState::for_model(&model, 5e-2);
        for _ in 0..20 {
            let (_, grads) = model.loss_and_grad(&data.x, data.targets()).unwrap();
            adam.update(model.params_mut(), &grads).unwrap();
            let last = model.blocks.last().unwrap();
            for a in last.selections.as_ref().unwrap() {
                let p = last.projection(a).unwrap();
                for r in 0..p.rows() {
                    let row = p.row(r);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
