mod common;

use std::collections::BTreeSet;

use fedclf::client::{client_update, rms_utility};
use fedclf::dataset::{
    emd, label_distribution, make_synthetic, partition, LabelDistribution, LabeledDataset, PartitionSpec, SplitMode,
};
use fedclf::model::{evaluate, init_params, EvalDetail, ShapeTag, TrainConfig};
use fedclf::selection::{rank, select, GlobalTrend, SelectorConfig, SelectorState, Strategy as Rule};
use fedclf::server::{aggregate, moving_average};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::Rng;

fn row_multiset(data: &LabeledDataset) -> Vec<(Vec<u64>, usize)> {
    let mut rows: Vec<(Vec<u64>, usize)> = (0..data.len())
        .map(|i| (data.row(i).iter().map(|v| v.to_bits()).collect(), data.label(i)))
        .collect();
    rows.sort();
    rows
}

fn split_mode() -> impl Strategy<Value = SplitMode> {
    prop_oneof![Just(SplitMode::Equal), Just(SplitMode::NonEqual)]
}

fn distribution(classes: usize) -> impl Strategy<Value = LabelDistribution> {
    vec(0.0f64..1.0, classes).prop_filter_map("all-zero weights", |w| {
        let total: f64 = w.iter().sum();
        (total > 1e-6).then(|| LabelDistribution::new(w.iter().map(|v| v / total).collect()).unwrap())
    })
}

/// Selector state in which every client has trained, with coarse utilities
/// so ties are common.
fn trained_state(strategy: Rule, utilities: &[u8], last: &[bool], seed: u64) -> SelectorState {
    let counts = vec![10; utilities.len()];
    let mut state =
        SelectorState::new(SelectorConfig::new(strategy, seed), &counts, vec![1.0; utilities.len()]).unwrap();
    for (id, rec) in state.records.iter_mut() {
        rec.last_loss_utility = Some(f64::from(utilities[*id]) * 0.25);
        rec.last_trained_round = Some(1);
    }
    state.sampled_once = state.records.keys().copied().collect();
    state.last_round_selected = last.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    state
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_conserves_rows_and_is_deterministic(
        per_class in 5usize..40,
        classes in 2usize..6,
        s in 1usize..30,
        clients in 1usize..12,
        mode in split_mode(),
        seed in any::<u64>(),
    ) {
        let data = make_synthetic(per_class * classes, 3, classes, seed ^ 0x5eed);
        let spec = PartitionSpec::new(s, mode, clients, seed);
        prop_assume!(data.len().div_ceil(s) >= clients);
        let parts = partition(&data, &spec).unwrap();
        prop_assert_eq!(parts.len(), clients);
        prop_assert!(parts.iter().enumerate().all(|(i, c)| c.client_id == i && c.n_k() > 0));

        let mut merged: Vec<(Vec<u64>, usize)> = parts.iter().flat_map(|c| row_multiset(&c.data)).collect();
        merged.sort();
        prop_assert_eq!(merged, row_multiset(&data));
        prop_assert_eq!(partition(&data, &spec).unwrap(), parts);
    }

    #[test]
    fn equal_mode_spread_is_at_most_one_shard(
        total in 50usize..400,
        s in 1usize..20,
        clients in 1usize..10,
        seed in any::<u64>(),
    ) {
        let data = make_synthetic(total, 2, 4, seed);
        prop_assume!(total.div_ceil(s) >= clients);
        let parts = partition(&data, &PartitionSpec::new(s, SplitMode::Equal, clients, seed)).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|c| c.n_k()).collect();
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        prop_assert!(spread <= s, "sizes {:?} spread {} > S={}", sizes, spread, s);
    }

    #[test]
    fn non_equal_mode_respects_the_floor(
        total in 200usize..1000,
        s in 1usize..10,
        clients in 2usize..20,
        min_fraction in 0.05f64..0.9,
        seed in any::<u64>(),
    ) {
        let data = make_synthetic(total, 2, 5, seed);
        let spec = PartitionSpec { min_fraction, ..PartitionSpec::new(s, SplitMode::NonEqual, clients, seed) };
        let parts = partition(&data, &spec).unwrap();
        let floor = min_fraction * total as f64 / clients as f64;
        prop_assert!(parts.iter().all(|c| c.n_k() as f64 >= floor));
        prop_assert_eq!(parts.iter().map(|c| c.n_k()).sum::<usize>(), total);
    }

    #[test]
    fn emd_is_a_bounded_metric(a in distribution(6), b in distribution(6), c in distribution(6)) {
        let ab = emd(&a, &b).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&ab));
        prop_assert_eq!(emd(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, emd(&b, &a).unwrap());
        if a != b {
            prop_assert!(ab > 0.0);
        }
        prop_assert!(ab <= emd(&a, &c).unwrap() + emd(&c, &b).unwrap() + 1e-12);
    }

    #[test]
    fn top_k_matches_a_full_sort(
        utilities in vec(0u8..8, 1..=20),
        last_seed in any::<u64>(),
        k_seed in any::<usize>(),
        loss_prev in 0.1f64..3.0,
        loss_prev2 in 0.1f64..3.0,
        fedclf in any::<bool>(),
    ) {
        let n = utilities.len();
        let mut rng = fedclf::seed::rng_from(last_seed);
        let last: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let strategy = if fedclf { Rule::FedClf } else { Rule::RawLoss };
        let mut state = trained_state(strategy, &utilities, &last, 3);
        let trend = GlobalTrend { acc_prev: 0.5, acc_prev2: 0.5, loss_prev, loss_prev2 };
        let k = 1 + k_seed % n;

        let factor = loss_prev / loss_prev2;
        let mut brute: Vec<(f64, usize)> = (0..n)
            .map(|id| {
                let raw = f64::from(utilities[id]) * 0.25;
                let u = if fedclf && !last[id] { raw * factor } else { raw };
                (u, id)
            })
            .collect();
        brute.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let want: BTreeSet<usize> = brute[..k].iter().map(|p| p.1).collect();

        let got = select(&mut state, 100, k, &trend).unwrap();
        prop_assert_eq!(got.ids.iter().copied().collect::<BTreeSet<_>>(), want);
        let util = |id: usize| brute.iter().find(|p| p.1 == id).unwrap().0;
        let min_in = got.ids.iter().map(|&id| util(id)).fold(f64::INFINITY, f64::min);
        let max_out = (0..n).filter(|id| !got.ids.contains(id)).map(util).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }

    #[test]
    fn unit_factor_makes_fedclf_equal_rawloss(
        utilities in vec(0u8..8, 2..=30),
        last_mask in any::<u64>(),
        level in 0.01f64..5.0,
        k_seed in any::<usize>(),
        seed in any::<u64>(),
    ) {
        let n = utilities.len();
        let last: Vec<bool> = (0..n).map(|i| last_mask >> (i % 64) & 1 == 1).collect();
        let k = 1 + k_seed % n;
        let trend = GlobalTrend { acc_prev: 0.3, acc_prev2: 0.7, loss_prev: level, loss_prev2: level };
        let a = select(&mut trained_state(Rule::FedClf, &utilities, &last, seed), 50, k, &trend).unwrap();
        let b = select(&mut trained_state(Rule::RawLoss, &utilities, &last, seed), 50, k, &trend).unwrap();
        prop_assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn factor_value_never_reorders_stale_clients(
        utilities in vec(0u8..8, 2..=30),
        last_mask in any::<u64>(),
        f1 in 0.05f64..5.0,
        f2 in 0.05f64..5.0,
    ) {
        let n = utilities.len();
        let last: Vec<bool> = (0..n).map(|i| last_mask >> (i % 64) & 1 == 1).collect();
        let state = trained_state(Rule::FedClf, &utilities, &last, 0);
        let stale_order = |f: f64| -> Vec<usize> {
            let trend = GlobalTrend { acc_prev: 0.5, acc_prev2: 0.5, loss_prev: f, loss_prev2: 1.0 };
            rank(&state, &trend).unwrap().into_iter().map(|(id, _)| id).filter(|&id| !last[id]).collect()
        };
        prop_assert_eq!(stale_order(f1), stale_order(f2));
    }

    #[test]
    fn selection_is_deterministic(utilities in vec(0u8..8, 2..=30), seed in any::<u64>(), r in 1usize..40) {
        let n = utilities.len();
        let last = vec![false; n];
        for strategy in [Rule::FedClf, Rule::Random, Rule::RawLoss] {
            let a = select(&mut trained_state(strategy, &utilities, &last, seed), r, 1 + n / 3, &GlobalTrend::neutral());
            let b = select(&mut trained_state(strategy, &utilities, &last, seed), r, 1 + n / 3, &GlobalTrend::neutral());
            prop_assert_eq!(a.unwrap(), b.unwrap());
        }
    }

    #[test]
    fn aggregate_matches_weighted_sum(seed in any::<u64>(), clients in 1usize..12) {
        let mut rng = fedclf::seed::rng_from(seed);
        let shape = ShapeTag::mlp(3, 4, 2).unwrap();
        let results: Vec<_> = (0..clients).map(|id| common::random_result(&mut rng, id * 3, shape)).collect();
        let got = aggregate(&results).unwrap();
        for (g, w) in got.values().iter().zip(common::weighted_average(&results)) {
            prop_assert!((g - w).abs() <= 1e-9);
        }
        let mut reversed = results.clone();
        reversed.reverse();
        prop_assert_eq!(aggregate(&reversed).unwrap(), got);
    }

    #[test]
    fn identical_clients_aggregate_to_their_common_update(seed in any::<u64>(), copies in 1usize..8) {
        let data = make_synthetic(40, 4, 3, seed);
        let global = init_params(ShapeTag::softmax(4, 3).unwrap(), seed);
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.1, batch_size: 8, rng_seed: seed };
        let results: Vec<_> = (0..copies)
            .map(|id| {
                let client = fedclf::dataset::ClientDataset { client_id: id, data: data.clone() };
                client_update(&client, &global, &cfg, false).unwrap()
            })
            .collect();
        let merged = aggregate(&results).unwrap();
        for (m, v) in merged.values().iter().zip(results[0].new_params.values()) {
            prop_assert!((m - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn moving_average_matches_window_mean(acc in vec(0.0f64..1.0, 1..120), n in 1usize..40) {
        for r in 1..=acc.len() {
            prop_assert!((moving_average(&acc, r, n) - common::window_mean(&acc, r, n)).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_rms_dominates_mean(seed in any::<u64>(), n in 1usize..60, mlp in any::<bool>()) {
        let data = make_synthetic(n, 3, 4, seed);
        let shape = if mlp { ShapeTag::mlp(3, 5, 4).unwrap() } else { ShapeTag::softmax(3, 4).unwrap() };
        let params = init_params(shape, seed.wrapping_add(1));
        let report = evaluate(&params, &data, EvalDetail::Losses).unwrap();
        let losses = report.per_sample_losses.unwrap();
        prop_assert!(losses.iter().all(|&l| l >= 0.0));
        prop_assert!(rms_utility(&losses) >= n as f64 * report.mean_loss * (1.0 - 1e-12));
        prop_assert!((label_distribution(&data).unwrap().probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
