use super::*;

fn config(shared_weight: f64, len: usize) -> CorpusConfig {
    CorpusConfig {
        shared_weight,
        train_len: len,
        valid_len: 1000,
        test_len: 1000,
        ..CorpusConfig::default()
    }
}

fn hand_spec(transition: Vec<f64>, v: usize) -> Result<CategorySpec> {
    CategorySpec::new(v, vec![0], (1..v).collect(), 0.5, transition)
}

#[test]
fn rows_are_distributions_and_token_sets_disjoint() {
    for spec in CorpusConfig::default().category_specs(3).unwrap() {
        for s in 0..spec.vocab_size {
            assert!((spec.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(spec.shared.iter().all(|t| !spec.content.contains(t)));
        assert_eq!(spec.shared.len(), 16);
        assert_eq!(spec.content.len(), 12);
    }
}

#[test]
fn stationary_of_hand_chains() {
    let birth_death = hand_spec(vec![0.5, 0.5, 0.0, 0.25, 0.5, 0.25, 0.0, 0.5, 0.5], 3).unwrap();
    let pi = birth_death.stationary();
    for (a, b) in pi.iter().zip([0.25, 0.5, 0.25]) {
        assert!((a - b).abs() < 1e-12, "{pi:?}");
    }
    // Period two: plain power iteration would oscillate.
    let flip = hand_spec(vec![0.0, 1.0, 1.0, 0.0], 2).unwrap();
    let pi = flip.stationary();
    assert!((pi[0] - 0.5).abs() < 1e-12 && (pi[1] - 0.5).abs() < 1e-12);
}

#[test]
fn stationary_is_a_fixed_point() {
    for spec in CorpusConfig::default().category_specs(5).unwrap() {
        let pi = spec.stationary();
        let v = spec.vocab_size;
        for t in 0..v {
            let flow: f64 = (0..v).map(|s| pi[s] * spec.row(s)[t]).sum();
            assert!((flow - pi[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn absorbing_state_is_rejected() {
    let err = hand_spec(vec![1.0, 0.0, 0.5, 0.5], 2).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    assert!(hand_spec(vec![0.6, 0.6, 0.5, 0.5], 2).is_err());
}

#[test]
fn same_seed_same_streams() {
    let cfg = config(0.5, 3000);
    assert_eq!(generate(&cfg, 11).unwrap(), generate(&cfg, 11).unwrap());
    assert_ne!(generate(&cfg, 11).unwrap(), generate(&cfg, 12).unwrap());
}

#[test]
fn train_histograms_match_stationary() {
    let cfg = config(0.5, 100_000);
    let specs = cfg.category_specs(1).unwrap();
    for (spec, corpus) in specs.iter().zip(generate(&cfg, 1).unwrap()) {
        let tv = total_variation(&histogram(&corpus.train, 64), &spec.stationary());
        assert!(tv <= 0.05, "tv {tv}");
    }
}

#[test]
fn fully_shared_chains_give_equal_histograms() {
    let corpora = generate(&config(1.0, 100_000), 2).unwrap();
    let h0 = histogram(&corpora[0].train, 64);
    for c in &corpora[1..] {
        let tv = total_variation(&h0, &histogram(&c.train, 64));
        assert!(tv <= 0.02, "tv {tv}");
    }
}

#[test]
fn identical_specs_are_a_homogeneous_control() {
    let cfg = config(0.5, 100_000);
    let spec = cfg.category_specs(4).unwrap().remove(0);
    let specs = vec![spec; 4];
    let corpora = generate_from_specs(&specs, &cfg, 4).unwrap();
    assert_ne!(corpora[0].train, corpora[1].train);
    let h0 = histogram(&corpora[0].train, 64);
    for c in &corpora[1..] {
        assert!(total_variation(&h0, &histogram(&c.train, 64)) <= 0.02);
    }
}

#[test]
fn out_of_distribution_tests_follow_the_uniform_mixture() {
    let cfg = CorpusConfig {
        mode: SplitMode::OutOfDistribution,
        train_len: 1000,
        test_len: 100_000,
        valid_len: 1000,
        ..CorpusConfig::default()
    };
    let specs = cfg.category_specs(6).unwrap();
    let mut mixture = vec![0.0; 64];
    for s in &specs {
        for (m, p) in mixture.iter_mut().zip(s.stationary()) {
            *m += p / specs.len() as f64;
        }
    }
    for c in generate(&cfg, 6).unwrap() {
        let tv = total_variation(&histogram(&c.test, 64), &mixture);
        assert!(tv <= 0.05, "tv {tv}");
        assert_eq!(c.mode, SplitMode::OutOfDistribution);
    }
}

#[test]
fn heterogeneity_dial_is_monotone() {
    for seed in 0..3 {
        let mut previous = f64::INFINITY;
        for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let corpora = generate(&config(w, 20_000), seed).unwrap();
            let hists: Vec<_> = corpora.iter().map(|c| histogram(&c.train, 64)).collect();
            let mut total = 0.0;
            let mut pairs = 0;
            for i in 0..hists.len() {
                for j in i + 1..hists.len() {
                    total += js_divergence(&hists[i], &hists[j]);
                    pairs += 1;
                }
            }
            let mean = total / pairs as f64;
            assert!(mean <= previous, "seed {seed} w {w}: {mean} > {previous}");
            previous = mean;
        }
    }
}

#[test]
fn quantity_profiles() {
    assert_eq!(quantity_profile(1000, &[4, 1, 1, 4]).unwrap(), vec![4000, 1000, 1000, 4000]);
    assert_eq!(quantity_profile(10, &[1, 1]).unwrap(), vec![10, 10]);
    assert!(quantity_profile(10, &[1, 0]).is_err());
    let cfg = CorpusConfig {
        train_len: 500,
        train_scale: vec![4, 1, 1, 4],
        ..config(0.5, 500)
    };
    let lens: Vec<_> = generate(&cfg, 0).unwrap().iter().map(|c| c.train.len()).collect();
    assert_eq!(lens, vec![2000, 500, 500, 2000]);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(CorpusConfig {
        shared_weight: 1.5,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(CorpusConfig {
        clients: 0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(CorpusConfig {
        train_scale: vec![1, 2],
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(CorpusConfig {
        shared_tokens: 62,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn corpora_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(0.3, 2000);
    let corpora = generate(&cfg, 9).unwrap();
    let header = write_corpora(dir.path(), &corpora, &cfg, 9).unwrap();
    let (read_header, read) = read_corpora(dir.path()).unwrap();
    assert_eq!(header, read_header);
    assert_eq!(read, corpora);
    assert_eq!(read_header.spec_hash, cfg.content_hash());
    let bytes = std::fs::read(dir.path().join("client0.train.bin")).unwrap();
    assert_eq!(bytes.len(), 2000 * 4);
    assert_eq!(
        u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize,
        corpora[0].train[0]
    );
}
