mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{fd_max_rel_error, SimpleTree};
use storyvis::check::{primitive_inputs, random_triples, PRIMITIVES};
use storyvis::config::Config;
use storyvis::graph::{LeviGraph, VertexKind};
use storyvis::losses::kl_loss;
use storyvis::mask::{MaskOptions, MaskStack};
use storyvis::tensor::{Tape, Tensor, Var};
use storyvis::tensorfile::TensorFile;
use storyvis::tree::ConstituencyTree;

fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> storyvis::Result<Var> {
    let w = Tensor::randn(t.shape(x), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = t.constant(w);
    let y = t.mul(x, w)?;
    t.sum(y)
}

const CHAIN_OPS: [&str; 6] = ["tanh", "sigmoid", "softmax", "transpose", "log_sigmoid", "layer_norm"];

fn random_tree(seed: u64, n: usize) -> ConstituencyTree {
    ConstituencyTree::random(&mut ChaCha8Rng::seed_from_u64(seed), n, &["S", "NP", "VP", "PP"])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitive_gradients_match_differences(op in 0..PRIMITIVES.len(), seed in any::<u64>()) {
        let name = PRIMITIVES[op];
        let inputs = primitive_inputs(name, &mut ChaCha8Rng::seed_from_u64(seed));
        let err = fd_max_rel_error(
            |t, v| {
                let y = t.apply(name, v)?;
                weighted_sum(t, y, seed)
            },
            &inputs,
        );
        prop_assert!(err < 1e-4, "{name}: {err:.3e}");
    }

    #[test]
    fn three_op_chains_match_differences(
        ops in proptest::collection::vec(0..CHAIN_OPS.len(), 3),
        rows in 1usize..4,
        cols in 2usize..5,
        seed in any::<u64>(),
    ) {
        let x = Tensor::randn(&[rows, cols], 0.8, &mut ChaCha8Rng::seed_from_u64(seed));
        let err = fd_max_rel_error(
            |t, v| {
                let mut h = v[0];
                for &o in &ops {
                    // Two-column rows normalize to constant +-1 and carry no gradient.
                    if CHAIN_OPS[o] == "layer_norm" && t.shape(h)[1] < 3 {
                        continue;
                    }
                    h = t.apply(CHAIN_OPS[o], &[h])?;
                }
                weighted_sum(t, h, seed ^ 1)
            },
            &[x],
        );
        prop_assert!(err < 1e-4, "{ops:?}: {err:.3e}");
    }

    #[test]
    fn bracketed_round_trip(seed in any::<u64>(), n in 1usize..14) {
        let t = random_tree(seed, n);
        let text = t.to_bracketed();
        let back = ConstituencyTree::parse(&text).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.leaf_count(), n);
        prop_assert_eq!(back.height(), SimpleTree::parse(&text).height());
    }

    #[test]
    fn lca_is_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..14) {
        let t = random_tree(seed, n);
        for i in 0..n {
            prop_assert_eq!(t.lca_height(i, i).unwrap(), 1);
            for j in 0..n {
                let h = t.lca_height(i, j).unwrap();
                prop_assert_eq!(h, t.lca_height(j, i).unwrap());
                prop_assert!(h >= 1 && h <= t.height());
            }
        }
    }

    #[test]
    fn mask_stacks_are_well_formed(seed in any::<u64>(), n in 1usize..12, layers in 1usize..7, tm in 0usize..4) {
        let t = random_tree(seed, n);
        let stack = MaskStack::build(&t, layers, tm, MaskOptions::default()).unwrap();
        prop_assert_eq!(stack.validate(), Ok(()));
        let oracle = SimpleTree::parse(&t.to_bracketed());
        for l in 1..layers {
            let block = stack.caption_block(l - 1);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(block.get(i, j), oracle.visible(i, j, l));
                }
            }
        }
        let last = stack.caption_block(layers - 1);
        prop_assert!(last.data.iter().all(|&b| b));
    }

    #[test]
    fn levi_graph_shape(seed in any::<u64>()) {
        let triples = random_triples(&mut ChaCha8Rng::seed_from_u64(seed), 8);
        let g = LeviGraph::from_triples(&triples);
        let relations = g.vertices.iter().filter(|v| v.kind == VertexKind::Relation).count();
        prop_assert_eq!(relations, triples.len());
        prop_assert_eq!(g.edges.len(), 2 * triples.len());
        for &(a, b) in &g.edges {
            prop_assert_ne!(g.vertices[a].kind, g.vertices[b].kind);
        }
        let mask = g.attention_mask();
        prop_assert_eq!(mask.len(), g.len() * g.len());
    }

    #[test]
    fn kl_is_non_negative(
        mu in proptest::collection::vec(-4.0f64..4.0, 1..8),
        seed in any::<u64>(),
    ) {
        let lv = Tensor::randn(&[1, mu.len()], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row_vector(&mu).unwrap());
        let l = tape.constant(lv);
        let kl = kl_loss(&mut tape, m, l).unwrap();
        prop_assert!(tape.value(kl).item() >= 0.0);
    }

    #[test]
    fn config_round_trip(seed in 0..=i64::MAX as u64, steps in 0usize..10_000, mirror in any::<bool>()) {
        let mut c = Config::demo();
        c.seed = seed;
        c.train.steps = steps;
        c.data.mirror_augment = mirror;
        prop_assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn seeds_beyond_toml_integers_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let mut c = Config::demo();
        c.seed = seed;
        prop_assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_file_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
        let mut f = TensorFile::new(serde_json::json!({"note": "x"}));
        f.push("a", Tensor::new(vec![values.len()], values.clone()).unwrap());
        let magic = b"SVTEST01";
        let bytes = f.to_bytes(magic).unwrap();
        let back = TensorFile::from_bytes(&bytes, magic).unwrap();
        prop_assert_eq!(back.arrays[0].1.data(), values.as_slice());
        prop_assert_eq!(&back.meta, &f.meta);
    }
}
