use std::collections::BTreeMap;

use lcm_core::decoder::{SsmLayer, SsmMode};
use lcm_core::encoder::{neighbor_table, topk_attention_mask, Encoder, EncoderConfig, LocalAgg, TopKSpace};
use lcm_core::mpm::{Checkpoint, MaskSpec, ModelConfig, PretrainModel};
use lcm_core::nn::{Init, ParamStore};
use lcm_core::{Tape64, Tensor64};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Tensor64::new(&[rows, cols], v).unwrap())
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn tokens_and_perm(max: usize, d: usize) -> impl Strategy<Value = (Tensor64, Tensor64, Vec<usize>)> {
    (4..=max).prop_flat_map(move |n| (matrix(n, 3), matrix(n, d), permutation(n)))
}

fn permuted(t: &Tensor64, perm: &[usize]) -> Tensor64 {
    t.select_rows(perm).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn local_aggregation_commutes_with_permutation((centers, x, perm) in tokens_and_perm(20, 6), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let lal = LocalAgg::new(&mut Init::new(&mut store, seed), "lal", 6, 5).unwrap();
        store.randomize(seed, 0.5);
        let run = |c: &Tensor64, x: &Tensor64| {
            let mut tape = Tape64::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = lal.forward(&mut tape, &p, xv, &neighbor_table(c, 4).unwrap()).unwrap();
            tape.value(y).clone()
        };
        let base = run(&centers, &x);
        let moved = run(&permuted(&centers, &perm), &permuted(&x, &perm));
        prop_assert!(moved.max_abs_diff(&permuted(&base, &perm)) < 1e-12);
    }

    #[test]
    fn compact_encoder_commutes_with_permutation((centers, e0, perm) in tokens_and_perm(16, 16), seed in any::<u64>()) {
        let cfg = EncoderConfig { n_layers: 2, d: 16, d_h: 8, d_ffn: 24, k_local: 3, ..EncoderConfig::lcm_desk() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut Init::new(&mut store, seed), "encoder", &cfg).unwrap();
        let ep = e0.map(|v| 0.5 * v * v);
        let run = |c: &Tensor64, a: &Tensor64, b: &Tensor64| {
            let mut tape = Tape64::new();
            let p = store.bind(&mut tape);
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let y = enc.forward(&mut tape, &p, av, bv, c).unwrap();
            tape.value(y).clone()
        };
        let base = run(&centers, &e0, &ep);
        let moved = run(&permuted(&centers, &perm), &permuted(&e0, &perm), &permuted(&ep, &perm));
        prop_assert!(moved.max_abs_diff(&permuted(&base, &perm)) < 1e-10);
    }

    #[test]
    fn masking_partitions_patches(n in 2usize..200, r in 0.01f64..0.99, seed in any::<u64>()) {
        let spec = MaskSpec::new(r, seed);
        let want = (r * n as f64).round() as usize;
        match spec.partition(n) {
            Ok((vis, msk)) => {
                prop_assert_eq!(vis.len(), want);
                let mut all: Vec<usize> = vis.iter().chain(&msk).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(spec.partition(n).unwrap(), (vis, msk));
            }
            Err(_) => prop_assert!(want == 0 || want >= n),
        }
    }

    #[test]
    fn feature_topk_keeps_k_per_row(n in 1usize..20, kf in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((n - 1) as f64 * kf) as usize;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let logits = Tensor64::from_fn(&[n, n], |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
        let mask = topk_attention_mask(&logits, k, TopKSpace::Feature).unwrap();
        let mut tape = Tape64::new();
        let l = tape.constant(logits);
        let w = tape.softmax_rows(l, Some(&mask)).unwrap();
        let w = tape.value(w);
        for i in 0..n {
            prop_assert_eq!(mask.row(i).iter().filter(|&&m| m == 0.0).count(), k);
            prop_assert!(w.row(i).iter().filter(|&&v| v > 0.0).count() <= k);
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selective_scan_is_causal(x in matrix(12, 6), at in 0usize..12, bump in -2.0f64..2.0, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let ssm = SsmLayer::new(&mut Init::new(&mut store, seed), "ssm", 6, 5, 3).unwrap();
        let mut changed = x.clone().into_data();
        changed[at * 6] += bump;
        let changed = Tensor64::new(&[12, 6], changed).unwrap();
        for mode in [SsmMode::Selective, SsmMode::FrozenLinear] {
            let run = |x: &Tensor64| {
                let mut tape = Tape64::new();
                let p = store.bind(&mut tape);
                let xv = tape.constant(x.clone());
                let y = ssm.forward(&mut tape, &p, xv, mode).unwrap();
                tape.value(y).clone()
            };
            let (a, b) = (run(&x), run(&changed));
            prop_assert_eq!(&a.data()[..at * 6], &b.data()[..at * 6]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), epoch in 0u32..1000) {
        let cfg = ModelConfig::tiny();
        let mut model = PretrainModel::<f32>::new(&cfg, seed).unwrap();
        model.store.randomize(seed, 3.0);
        let meta = BTreeMap::from([("epoch".to_string(), epoch.to_string())]);
        let bytes = Checkpoint::new(&cfg, &meta, &model.store, None).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.header.get("epoch"), Some(&epoch.to_string()));
        let mut fresh = PretrainModel::<f32>::new(&back.model_config().unwrap(), seed ^ 1).unwrap();
        back.apply(&mut fresh.store, |_| true).unwrap();
        prop_assert!(fresh.store == model.store);
    }
}

#[test]
fn model_config_survives_key_value_round_trip() {
    for cfg in [ModelConfig::tiny(), ModelConfig::desk(), ModelConfig::lcm_paper(), ModelConfig::transformer_paper()] {
        let mut back = ModelConfig::tiny();
        for (k, v) in cfg.to_kv() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }
}
