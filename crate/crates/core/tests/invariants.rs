use graphmatch::checks::random_graph;
use graphmatch::encoder::{Arch, Encoder, EncoderConfig};
use graphmatch::graph::Graph;
use graphmatch::matcher::{match_pair, Matcher, MatcherConfig, Similarity};
use graphmatch::objectives::{anchor_loss_value, sample_anchors};
use graphmatch::tensor::{ParamSet, Tape};
use graphmatch::trainer::{Checkpoint, Mode, TrainMeta};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, arch: Arch, sim: Similarity, per_target: bool) -> (Encoder, Matcher, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(EncoderConfig {
        arch,
        ..EncoderConfig::gin(2, 6, 3, 2)
    })
    .unwrap();
    let matcher = Matcher::new(MatcherConfig {
        similarity: sim,
        target_normalize: per_target,
        ..MatcherConfig::new(6, 2)
    })
    .unwrap();
    let mut params = encoder.init_params(&mut rng);
    params.extend(matcher.init_params(&mut rng));
    (encoder, matcher, params)
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn arch() -> impl Strategy<Value = Arch> {
    prop_oneof![Just(Arch::Gin), Just(Arch::GcnMean)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matching_is_permutation_invariant_and_row_stochastic(
        seed in any::<u64>(),
        n1 in 1usize..7,
        n2 in 1usize..7,
        arch in arch(),
        cosine in any::<bool>(),
        per_target in any::<bool>(),
    ) {
        let sim = if cosine { Similarity::Cosine } else { Similarity::Dot };
        let (encoder, matcher, params) = model(seed, arch, sim, per_target);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let a = random_graph(&mut rng, n1, 3, 2, 0.5);
        let b = random_graph(&mut rng, n2, 3, 2, 0.5);
        let mut pa: Vec<usize> = (0..n1).collect();
        let mut pb: Vec<usize> = (0..n2).collect();
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        let run = |x: &Graph, y: &Graph| {
            let tape = Tape::new();
            let bound = params.bind_all(&tape);
            match_pair(&tape, &bound, &encoder, &matcher, x, y).map(|p| p.values(&tape))
        };
        let base = match run(&a, &b) {
            Ok(v) => v,
            Err(e) => {
                // an all-zero node row cannot be compared by cosine
                prop_assert!(cosine && e.to_string().contains("degenerate cosine input"), "{}", e);
                return Ok(());
            }
        };
        let moved = run(&a.permute_nodes(&pa).unwrap(), &b.permute_nodes(&pb).unwrap()).unwrap();
        prop_assert!(gap(base.zg1.data(), moved.zg1.data()) < 1e-9);
        prop_assert!(gap(base.zg2.data(), moved.zg2.data()) < 1e-9);
        for (v, &p) in pb.iter().enumerate() {
            prop_assert!(gap(base.z2.row_slice(v), moved.z2.row_slice(p)) < 1e-9);
        }
        let swapped = run(&b, &a).unwrap();
        prop_assert!(gap(base.zg1.data(), swapped.zg2.data()) < 1e-12);
        for att in [&base.a12, &base.a21] {
            for r in 0..att.rows() {
                let row = att.row_slice(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert_eq!(base.sim_op_count, 2 * (n1 * n2) as u64);
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..9, arch in arch()) {
        let (encoder, _, params) = model(seed, arch, Similarity::Dot, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(7));
        let g = random_graph(&mut rng, n, 3, 2, 0.4);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let h = tape.value(encoder.encode_nodes(&tape, &bound, &g).unwrap());
        let hp = tape.value(encoder.encode_nodes(&tape, &bound, &g.permute_nodes(&perm).unwrap()).unwrap());
        for (v, &p) in perm.iter().enumerate() {
            prop_assert!(gap(h.row_slice(v), hp.row_slice(p)) < 1e-9);
        }
        let zg = tape.value(encoder.encode_graph(&tape, &bound, &g).unwrap());
        let zgp = tape.value(encoder.encode_graph(&tape, &bound, &g.permute_nodes(&perm).unwrap()).unwrap());
        prop_assert!(gap(zg.data(), zgp.data()) < 1e-9);
    }

    #[test]
    fn anchor_loss_is_bounded_below_by_a_perfect_positive(
        sims in prop::collection::vec(-1.0f64..1.0, 3..12),
        positive in any::<prop::sample::Index>(),
        tau in 0.05f64..2.0,
    ) {
        let p = positive.index(sims.len());
        let loss = anchor_loss_value(&sims, p, tau).unwrap();
        prop_assert!(loss >= 0.0);
        let mut better = sims.clone();
        better[p] = 1.0;
        prop_assert!(anchor_loss_value(&better, p, tau).unwrap() <= loss + 1e-12);
        let uniform = anchor_loss_value(&vec![sims[0]; sims.len()], p, tau).unwrap();
        prop_assert!((uniform - (sims.len() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn sampled_anchors_are_sorted_distinct_and_replayable(views in 2usize..40, q in 1usize..40, seed in any::<u64>()) {
        prop_assume!(q <= views);
        let a = sample_anchors(views, q, seed).unwrap();
        prop_assert_eq!(a.len(), q);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|&i| i < views));
        prop_assert_eq!(a, sample_anchors(views, q, seed).unwrap());
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit(seed in any::<u64>(), epochs in 0usize..100) {
        let (encoder, matcher, params) = model(seed, Arch::Gin, Similarity::Cosine, true);
        let ckpt = Checkpoint {
            encoder: encoder.config().clone(),
            matcher: Some(matcher.config().clone()),
            meta: TrainMeta { mode: Mode::Cl, epochs, seed },
            params,
        };
        let text = ckpt.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
        for (name, t) in ckpt.params.iter() {
            let u = back.params.get(name).unwrap();
            prop_assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
