//! Randomized invariants across the generator, the model and the search.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use objdialog::config::{Ablation, ModelConfig};
use objdialog::data::{EncodedDialog, EncodedTurn, EOS};
use objdialog::model::Model;
use objdialog::nn::{ParamStore, Session};
use objdialog::search::{exhaustive, greedy};
use objdialog::synthworld::dataset::{family_of, is_lds};
use objdialog::synthworld::{build_splits, gen_dataset, oracle, Family, GenParams};
use objdialog::tensor::Tensor;

fn random_dialog(seed: u64, n: usize, f: usize, d: usize, vocab: usize, turns: usize) -> EncodedDialog {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * f * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let c = (0..f * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let mut present: Vec<bool> = (0..n * f).map(|_| r.random_bool(0.6)).collect();
    present[0] = true;
    let turns = (0..turns)
        .map(|_| EncodedTurn {
            question: (0..r.random_range(1..5)).map(|_| r.random_range(4..vocab)).collect(),
            answer: (0..r.random_range(0..4)).map(|_| r.random_range(4..vocab)).collect(),
        })
        .collect();
    EncodedDialog {
        id: "random".into(),
        n,
        f,
        d,
        x: Tensor::new(vec![n * f, d], x).unwrap(),
        present,
        c: Tensor::new(vec![f, d], c).unwrap(),
        frames_present: vec![true; f],
        turns,
    }
}

fn build(d: usize, vocab: usize, ablate: Vec<Ablation>, seed: u64) -> (Model, ParamStore<f64>) {
    let cfg = ModelConfig {
        d,
        heads: 2,
        decoder_stack: 1,
        dgcn_layers: 1,
        vocab_size: vocab,
        ablate,
    };
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, store)
}

fn ablation() -> impl Strategy<Value = Vec<Ablation>> {
    prop_oneof![
        Just(vec![]),
        Just(vec![Ablation::Recurrence]),
        Just(vec![Ablation::Objects]),
        Just(vec![Ablation::HistoryAttn]),
        Just(vec![Ablation::Pointer]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_answers_agree_with_the_oracle(seed in any::<u64>(), worlds in 1usize..4, turns in 2usize..9) {
        let p = GenParams { worlds, turns, seed, d: 16, ..GenParams::default() };
        let ds = gen_dataset(&p).unwrap();
        for s in &ds.samples {
            let world = ds.world(&s.world_id).unwrap();
            let qs: Vec<Vec<String>> = s.dialog.iter().map(|t| t.q.clone()).collect();
            for (t, turn) in s.dialog.iter().enumerate() {
                let reading = oracle::answer(world, &qs, t).unwrap();
                prop_assert_eq!(&reading.answer, &turn.a);
                prop_assert_eq!(reading.coref_distance, turn.coref_distance);
                let fam = family_of(turn);
                prop_assert_eq!(turn.fine_grained, matches!(fam, Family::Attribute | Family::Location));
                prop_assert_eq!(is_lds(turn), turn.coref_distance >= 3);
                if turn.coref_distance > 0 {
                    prop_assert_eq!(fam, Family::Coref);
                    prop_assert!(turn.coref_distance <= t);
                }
            }
        }
    }

    #[test]
    fn splits_partition_the_ids(count in 0usize..120, seed in any::<u64>()) {
        let ids: Vec<String> = (0..count).map(|i| format!("w{i:04}")).collect();
        let s = build_splits(&ids, seed);
        prop_assert_eq!(s.val.len(), count / 10);
        prop_assert_eq!(s.test.len(), count / 10);
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids);
    }

    #[test]
    fn answer_distributions_are_normalized(seed in any::<u64>(), ablate in ablation(), n in 1usize..4, f in 1usize..4) {
        let (model, store) = build(8, 9, ablate, seed);
        let dialog = random_dialog(seed ^ 1, n, f, 8, 9, 2);
        let s = Session::infer(&store);
        let fwd = model.forward(&s, &dialog, 0.0).unwrap();
        for turn in &fwd.turns {
            let p = s.value(turn.p_l);
            for i in 0..p.shape()[0] {
                let row = p.row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn absent_frames_do_not_reach_the_output(seed in any::<u64>(), ablate in ablation(), noise in -30.0f32..30.0) {
        let (model, store) = build(8, 9, ablate, seed);
        let dialog = random_dialog(seed ^ 2, 3, 3, 8, 9, 2);
        let mut noisy = dialog.clone();
        for (i, &p) in dialog.present.iter().enumerate() {
            if !p {
                for v in &mut noisy.x.data_mut()[i * 8..(i + 1) * 8] {
                    *v = noise;
                }
            }
        }
        for t in 0..2 {
            let tokens = [4, 5, EOS];
            let a = model.sequence_log_prob(&store, &dialog, t, &tokens).unwrap();
            let b = model.sequence_log_prob(&store, &noisy, t, &tokens).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn beam_search_sits_between_greedy_and_exhaustive(seed in any::<u64>()) {
        let (model, store) = build(8, 6, vec![], seed);
        let dialog = random_dialog(seed ^ 3, 2, 3, 8, 6, 2);
        let one = model.generate(&store, &dialog, &model.search_config(1, 2), 2).unwrap();
        let three = model.generate(&store, &dialog, &model.search_config(3, 2), 2).unwrap();
        for t in 0..2 {
            let search = model.search_config(1, 2);
            let g = model.with_scorer(&store, &dialog, t, |sc| greedy(&search, sc)).unwrap();
            let best = model.with_scorer(&store, &dialog, t, |sc| exhaustive(&search, sc)).unwrap();
            prop_assert_eq!(&one[t].tokens[..], g.answer(EOS));
            prop_assert!((one[t].log_prob - g.log_prob).abs() < 1e-9);
            prop_assert!(three[t].log_prob <= best.log_prob + 1e-9);
            // Three surviving hypotheses cover every length-2 path here.
            prop_assert!((three[t].log_prob - best.log_prob).abs() < 1e-9);
            let mut tokens = three[t].tokens.clone();
            if tokens.len() < 2 {
                tokens.push(EOS);
            }
            let rescored = model.sequence_log_prob(&store, &dialog, t, &tokens).unwrap();
            prop_assert!((rescored - three[t].log_prob).abs() < 1e-6);
        }
    }
}
