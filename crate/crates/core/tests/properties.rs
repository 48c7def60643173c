//! Randomized invariants. Where the acceptance gate pins exact numbers on
//! fixed fixtures, these properties let proptest hunt for structural
//! counterexamples: mask algebra, selection bounds, serialization round
//! trips, and the config-hash contract.

use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use tlm_core::config::ExperimentConfig;
use tlm_core::mask::{
    build_allow_matrix, select_masked_tokens, expand_to_additive, AllowMatrix,
    AttentionMaskVector, MaskStrategy, MaskedSet, MASK_VALUE,
};
use tlm_core::params::ParamSet;
use tlm_core::rng::TrainRng;
use tlm_core::tasks::PAD;
use tlm_core::transformer::{Architecture, Model, ModelConfig, TokenBatch};

fn arb_allow(n: usize) -> impl Strategy<Value = AllowMatrix> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| {
        let mut m = AllowMatrix::new_all(n, n, false);
        for q in 0..n {
            for k in 0..n {
                if bits[q * n + k] {
                    m.set(q, k, true);
                }
            }
        }
        m
    })
}

proptest! {
    // Conjunction of connectivity constraints is symmetric: the padding,
    // causal, and masking restrictions can be applied in any order.
    #[test]
    fn conjoin_is_commutative(n in 1..=6usize, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let draw = |rng: &mut ChaCha8Rng| {
            let mut m = AllowMatrix::new_all(n, n, false);
            for q in 0..n {
                for k in 0..n {
                    if rng.random::<bool>() {
                        m.set(q, k, true);
                    }
                }
            }
            m
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let ab = a.conjoin(&b).unwrap();
        let ba = b.conjoin(&a).unwrap();
        for q in 0..n {
            for k in 0..n {
                prop_assert_eq!(ab.get(q, k), ba.get(q, k));
                prop_assert_eq!(ab.get(q, k), a.get(q, k) && b.get(q, k));
            }
        }
    }

    // However aggressive the masking, no query row ever ends up with an empty
    // key set: softmax over an all-forbidden row would be undefined.
    #[test]
    fn every_query_row_keeps_at_least_one_key(
        (n, real, masked, strategy, causal) in (2..=6usize).prop_flat_map(|n| {
            (1..=n).prop_flat_map(move |real| {
                (
                    Just(n),
                    Just(real),
                    prop::collection::vec(0..real, 0..=real),
                    prop::sample::select(vec![
                        MaskStrategy::None,
                        MaskStrategy::Siblings,
                        MaskStrategy::SelfMask,
                    ]),
                    any::<bool>(),
                )
            })
        })
    ) {
        let attn_m = AttentionMaskVector::with_prefix_real(real, n);
        let distinct: BTreeSet<usize> = masked.into_iter().collect();
        let set = MaskedSet::from_indices(distinct);
        let allow = build_allow_matrix(strategy, &set, &attn_m, causal).unwrap();
        for q in 0..n {
            let keys = (0..n).filter(|&k| allow.get(q, k)).count();
            prop_assert!(keys >= 1, "query {} lost every key under {:?}", q, strategy);
        }
    }

    // Selection stays inside the real prefix and never swallows a sequence
    // whole: at least one real token always survives unmasked.
    #[test]
    fn selection_respects_padding_and_leaves_a_survivor(
        n in 1..=10usize,
        frac in 0.0..1.0f64,
        rate in prop::sample::select(vec![0.0, 0.05, 0.2, 0.5, 0.9]),
        seed in any::<u64>(),
    ) {
        let real = ((n as f64 * frac) as usize).clamp(1, n);
        let attn_m = AttentionMaskVector::with_prefix_real(real, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = select_masked_tokens(&attn_m, rate, &mut rng).unwrap();
        prop_assert!(set.len() < real, "all {} real tokens got masked", real);
        for t in set.iter() {
            prop_assert!(t < real, "selected padding position {}", t);
        }
        if rate == 0.0 {
            prop_assert_eq!(set.len(), 0);
        }
        // Same seed, same draw.
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let set2 = select_masked_tokens(&attn_m, rate, &mut rng2).unwrap();
        prop_assert_eq!(set.iter().collect::<Vec<_>>(), set2.iter().collect::<Vec<_>>());
    }

    // Scheme strings survive the parse/display round trip regardless of the
    // order the atoms arrive in.
    #[test]
    fn scheme_parsing_canonicalizes_atom_order(
        atoms in prop::sample::subsequence(vec!["tlm", "att_dropout", "drophead"], 0..=3)
            .prop_shuffle()
    ) {
        let text = if atoms.is_empty() { "none".to_string() } else { atoms.join("+") };
        let scheme: tlm_core::regularizer::Scheme = text.parse().unwrap();
        let canonical = scheme.to_string();
        let reparsed: tlm_core::regularizer::Scheme = canonical.parse().unwrap();
        prop_assert_eq!(&scheme, &reparsed);
        for a in &atoms {
            prop_assert!(scheme.contains(a), "{} lost while parsing {}", a, text);
        }
        prop_assert_eq!(scheme.atoms().len(), atoms.len().max(1));
    }

    // The additive expansion is a pure broadcast: each (batch, head) copy
    // carries 0.0 where allowed and the masking constant where forbidden.
    #[test]
    fn additive_expansion_broadcasts_the_allow_matrix(
        n in 1..=5usize,
        batch in 1..=3usize,
        heads in 1..=3usize,
        seed in any::<u64>(),
    ) {
        let allow = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = AllowMatrix::new_all(n, n, false);
            for q in 0..n {
                for k in 0..n {
                    if rng.random::<bool>() {
                        m.set(q, k, true);
                    }
                }
            }
            m
        };
        let additive = expand_to_additive(&allow, batch, heads).unwrap();
        let vals = additive.values();
        prop_assert_eq!(vals.len(), batch * heads * n * n);
        for b in 0..batch {
            for h in 0..heads {
                for q in 0..n {
                    for k in 0..n {
                        let v = vals[((b * heads + h) * n + q) * n + k];
                        let expect = if allow.get(q, k) { 0.0 } else { MASK_VALUE };
                        prop_assert_eq!(v.to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    // Padded batches keep each row's ids in place and mark exactly the row's
    // length as real.
    #[test]
    fn token_batches_pad_to_the_longest_row(
        rows in prop::collection::vec(prop::collection::vec(4..8usize, 1..=5), 1..=3)
    ) {
        let batch = TokenBatch::from_rows(&rows, PAD).unwrap();
        let longest = rows.iter().map(|r| r.len()).max().unwrap();
        prop_assert_eq!(batch.batch, rows.len());
        prop_assert_eq!(batch.seq, longest);
        for (b, row) in rows.iter().enumerate() {
            prop_assert_eq!(batch.attn[b].real_count(), row.len());
            for t in 0..longest {
                let id = batch.ids[b * longest + t];
                if t < row.len() {
                    prop_assert_eq!(id, row[t]);
                } else {
                    prop_assert_eq!(id, PAD);
                }
            }
        }
    }

    // The grouping hash ignores identity fields (seed, run id, output
    // directory) and nothing else tested here; a substantive change moves it.
    #[test]
    fn config_hash_ignores_identity_fields_only(
        seed_a in any::<u64>(),
        seed_b in any::<u64>(),
        run_id in "[a-z0-9_]{0,12}",
        out_dir in "[a-z0-9_]{1,12}",
    ) {
        let base = ExperimentConfig::default();
        let mut tweaked = base.clone();
        tweaked.seed = seed_a;
        let mut other = base.clone();
        other.seed = seed_b;
        other.run_id = if run_id.is_empty() { None } else { Some(run_id) };
        other.out_dir = out_dir;
        prop_assert_eq!(tweaked.config_hash(), other.config_hash());
        let hash = base.config_hash();
        prop_assert_eq!(hash.len(), 16);
        prop_assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));

        let mut substantive = base.clone();
        substantive.rate = 0.37;
        prop_assert_ne!(substantive.config_hash(), hash);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    // A checkpoint written and read back reproduces the architecture and
    // every parameter bit.
    #[test]
    fn checkpoints_round_trip_bit_exactly(
        seed in any::<u64>(),
        heads in 1..=2usize,
        layers in 1..=2usize,
        seq2seq in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            arch: if seq2seq { Architecture::Seq2Seq } else { Architecture::Classifier },
            vocab: 8,
            d_emb: 4 * heads,
            heads,
            layers,
            max_len: 5,
            classes: 3,
            hidden_dropout: 0.0,
        };
        let rng = TrainRng::new(seed);
        let mut params = ParamSet::new();
        let _ = Model::new(cfg.clone(), &mut params, &rng).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        tlm_core::checkpoint::save(&path, &cfg, &params).unwrap();
        let (loaded_model, loaded) = tlm_core::checkpoint::load(&path).unwrap();

        prop_assert_eq!(&loaded_model.cfg, &cfg);
        prop_assert_eq!(loaded.len(), params.len());
        prop_assert_eq!(loaded.total_values(), params.total_values());
        for id in params.ids() {
            prop_assert_eq!(loaded.name(id), params.name(id));
            prop_assert_eq!(loaded.shape(id), params.shape(id));
            let a = params.data(id);
            let b = loaded.data(id);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
