//! End-to-end use of the public API: corpora, pretraining, every
//! federation method, persistence of corpora and checkpoints.

use comigs_core::data::{generate, read_corpora, write_corpora, ClientCorpus, CorpusConfig};
use comigs_core::federation::{comm_bytes_per_round, pretrain_base, run_experiment, Direction, FederationConfig, Method, Stage};
use comigs_core::model::{ModelConfig, PretrainConfig, TinyLm};
use comigs_core::params::{Checkpoint, ParamStore};
use comigs_core::trainer::TrainerConfig;

fn model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        blocks: 1,
        ..ModelConfig::default()
    }
}

fn corpora(seed: u64) -> (CorpusConfig, Vec<ClientCorpus>) {
    let cfg = CorpusConfig {
        train_len: 3000,
        valid_len: 400,
        test_len: 400,
        ..CorpusConfig::default()
    };
    let c = generate(&cfg, seed).unwrap();
    (cfg, c)
}

fn trainer() -> TrainerConfig {
    TrainerConfig {
        tau: 3,
        router_steps: 2,
        expert_lr: 1e-2,
        ..TrainerConfig::default()
    }
}

fn fed(method: Method) -> FederationConfig {
    FederationConfig {
        method,
        rounds: 3,
        local_iters: 6,
        score_tokens: 64,
        ..FederationConfig::default()
    }
}

#[test]
fn every_method_runs_and_trained_methods_improve_on_the_base() {
    let (_, corpora) = corpora(1);
    let pcfg = PretrainConfig {
        steps: 40,
        ..PretrainConfig::default()
    };
    let base = pretrain_base(&model(), &corpora, &pcfg, 1).unwrap();
    let pretrained = run_experiment(&fed(Method::Pretrained), &model(), &trainer(), &corpora, &base, 1).unwrap();
    let before = pretrained.final_metrics().mean_ppl();
    assert!(pretrained.channel.transfers().is_empty());
    for method in Method::ALL.into_iter().filter(|&m| m != Method::Pretrained) {
        let exp = run_experiment(&fed(method), &model(), &trainer(), &corpora, &base, 1).unwrap();
        let last = exp.final_metrics();
        assert_eq!((last.round, last.stage), (3, Stage::Local), "{method}");
        assert!(last.mean_ppl() < before, "{method}: {} vs pretrained {before}", last.mean_ppl());
        let up: usize = exp
            .channel
            .transfers()
            .iter()
            .filter(|t| t.direction == Direction::Up)
            .map(|t| t.bytes)
            .sum();
        let per_round = comm_bytes_per_round(&fed(method), &model()).unwrap().bytes_per_round / 2;
        // Every round uploads once per client.
        assert_eq!(up, per_round * 3 * corpora.len(), "{method}");
    }
}

#[test]
fn corpora_round_trip_through_disk() {
    let (cfg, corpora) = corpora(2);
    let dir = tempfile::tempdir().unwrap();
    let header = write_corpora(dir.path(), &corpora, &cfg, 2).unwrap();
    let (read_header, read) = read_corpora(dir.path()).unwrap();
    assert_eq!(header, read_header);
    assert_eq!(read, corpora);
}

#[test]
fn checkpoints_restore_identical_predictions() {
    let (_, corpora) = corpora(3);
    let base = TinyLm::base_only(&model(), 3).unwrap().params().clone();
    let exp = run_experiment(&fed(Method::Comigs1G1S), &model(), &trainer(), &corpora, &base, 3).unwrap();
    let trained = &exp.models[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("client0.json");
    trained.params().to_checkpoint().save(&path).unwrap();
    let store = ParamStore::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let mut restored = TinyLm::new(trained.config(), 99).unwrap();
    restored.params_mut().load_matching(&store, |_| true).unwrap();
    assert_eq!(restored.params(), trained.params());
    let test = &corpora[0].test;
    assert_eq!(restored.perplexity(test).unwrap(), trained.perplexity(test).unwrap());
}
