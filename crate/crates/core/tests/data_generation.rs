use paraformer::config::DependencyMode;
use paraformer::data::{make_batches, Dataset, PadPolicy, Split, Synthesizer};
use paraformer::seq::PAD;
use paraformer::SynthConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn frames_per_token_average_matches_range() {
    let cfg = SynthConfig {
        min_tokens: 1,
        max_tokens: 1,
        ..SynthConfig::default()
    };
    let s = Synthesizer::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws = 10_000;
    let frames: Vec<f64> = (0..draws)
        .map(|i| s.gen_utterance(i.to_string(), Split::Train, &mut rng).unwrap().num_frames() as f64)
        .collect();
    let mean = frames.iter().sum::<f64>() / draws as f64;
    // Uniform on {2, 3, 4, 5}: mean 3.5, variance 1.25.
    let sd = (1.25 / draws as f64).sqrt();
    assert!((mean - 3.5).abs() < 3.0 * sd, "mean {mean}");
    assert!(frames.iter().all(|&f| (2.0..=5.0).contains(&f)));
}

#[test]
fn bigram_mode_follows_successors() {
    let cfg = SynthConfig {
        bigram_strength: 0.9,
        ..SynthConfig::default()
    };
    let s = Synthesizer::new(&cfg).unwrap();
    let ds = Dataset::generate(&cfg).unwrap();
    let (mut hit, mut all) = (0, 0);
    for u in &ds.utterances {
        for w in u.tokens.windows(2) {
            hit += usize::from(s.successor(w[0]) == w[1]);
            all += 1;
        }
    }
    let rate = hit as f64 / all as f64;
    assert!((rate - 0.9).abs() < 0.02, "successor rate {rate}");

    let indep = Dataset::generate(&SynthConfig {
        dependency_mode: DependencyMode::Independent,
        ..cfg
    })
    .unwrap();
    let (mut hit, mut all) = (0, 0);
    for u in &indep.utterances {
        for w in u.tokens.windows(2) {
            hit += usize::from(s.successor(w[0]) == w[1]);
            all += 1;
        }
    }
    assert!((hit as f64 / all as f64) < 0.15);
}

#[test]
fn plain_uniform_draws_allow_repeats() {
    let cfg = SynthConfig {
        dependency_mode: DependencyMode::Independent,
        audible_boundaries: false,
        ..SynthConfig::default()
    };
    let ds = Dataset::generate(&cfg).unwrap();
    let repeats = ds
        .utterances
        .iter()
        .flat_map(|u| u.tokens.windows(2).map(|w| w[0] == w[1]).collect::<Vec<_>>())
        .filter(|&r| r)
        .count();
    assert!(repeats > 0);
    assert!(SynthConfig {
        acoustic_classes: 1,
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn splits_and_batches() {
    let ds = Dataset::generate(&SynthConfig {
        n_train: 30,
        n_dev: 5,
        n_test: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(ds.split(Split::Train).len(), 30);
    assert_eq!(ds.split(Split::Dev).len(), 5);
    assert_eq!(ds.split(Split::Test).len(), 7);
    let train = ds.split_owned(Split::Train);
    let batches = make_batches(&train, 8, PadPolicy::SortByLength).unwrap();
    assert_eq!(batches.iter().map(|b| b.len()).sum::<usize>(), 30);
    for b in &batches {
        for (i, &idx) in b.indices.iter().enumerate() {
            assert_eq!(b.target(i), &train[idx].tokens[..]);
            assert!(b.tokens[i][b.token_lens[i]..].iter().all(|&t| t == PAD));
        }
    }
}
