mod common;

use codeadapt::adapters::{AdapterKind, AdapterSet, AdapterStackPolicy, BottleneckAdapter, InvertibleAdapterPair, Phase};
use codeadapt::adapters::{invertible_forward, invertible_inverse};
use codeadapt::assembly::build_assembly;
use codeadapt::budget::{adapter_closed_form, parameter_budget, Component};
use codeadapt::config::{AdapterConfig, ModelConfig};
use codeadapt::corpus::generator::{generate_corpus, mini_language_vocab};
use codeadapt::eval::summarize::{summarize, Strategy};
use codeadapt::params::ParamStore;
use codeadapt::pipeline::{body_sequences, task_assembly, DownstreamTask};
use codeadapt::transformer::init_backbone;
use codeadapt::Tensor;
use common::{freeze_check, identity_deviation, invertible_round_trip_error, small_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fresh_adapters_leave_the_backbone_function_unchanged() {
    let worst = identity_deviation(100);
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn invertible_adapter_round_trips_ten_thousand_vectors() {
    let err = invertible_round_trip_error(10_000, 5);
    assert!(err < 1e-5, "reconstruction error {err:e}");
}

#[test]
fn task_training_never_touches_frozen_weights() {
    let r = freeze_check(2000);
    assert_eq!(r.steps, 2000);
    assert!(r.frozen_tensors > 0);
    assert!(r.changed.is_empty(), "changed: {:?}", r.changed);
    assert!(r.fingerprint_unchanged);
    assert!(r.task_adapters_moved);
}

#[test]
fn trainable_share_of_task_adapters_is_small() {
    let vocab = mini_language_vocab();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let adapter = AdapterConfig::default();
    let backbone = init_backbone(&config, 1).unwrap();
    let asm = task_assembly(&config, &adapter, &backbone, None, DownstreamTask::Retrieval, 2).unwrap();
    let report = parameter_budget(&asm, Phase::TAdapterTask);
    let h = config.hidden_size;
    let expected = adapter_closed_form(h, adapter.bottleneck_for(h), config.num_layers);
    assert_eq!(report.components[&Component::TaskAdapters].total, expected);
    assert_eq!(report.trainable, expected);
    assert!(report.trainable_fraction() < 0.10);
    assert_eq!(report.components[&Component::Backbone].trainable, 0);

    let full = parameter_budget(&asm, Phase::FullFinetune);
    assert_eq!(full.trainable, full.total);
}

#[test]
fn beam_of_one_is_greedy() {
    let vocab = mini_language_vocab();
    let config = small_config(vocab.len());
    let backbone = init_backbone(&config, 21).unwrap();
    let adapter = AdapterConfig {
        bottleneck: Some(4),
        ..AdapterConfig::default()
    };
    let asm = task_assembly(&config, &adapter, &backbone, None, DownstreamTask::Summarization, 22).unwrap();
    let corpus = generate_corpus(23, 10, 2).unwrap();
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    for code in body_sequences(&corpus, &idx, &vocab, config.max_seq_len) {
        let greedy = summarize(&asm, &code, 8, Strategy::Greedy).unwrap();
        let beam = summarize(&asm, &code, 8, Strategy::Beam(1)).unwrap();
        assert_eq!(greedy, beam);
    }
}

fn adapter_of(kind: AdapterKind, h: usize, d: usize, rng: &mut ChaCha8Rng) -> BottleneckAdapter {
    BottleneckAdapter::new(kind, h, d, rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mounted_adapter_count_matches_closed_form(half in 2usize..12, d_frac in 0.1f64..0.9, layers in 1usize..4) {
        let h = half * 2;
        let d = ((h as f64 * d_frac) as usize).clamp(1, h - 1);
        let config = ModelConfig {
            num_layers: layers,
            hidden_size: h,
            num_heads: 2,
            ffn_size: 2 * h,
            vocab_size: 12,
            max_seq_len: 8,
            dropout_rate: 0.0,
            decoder_layers: 1,
        };
        let backbone = init_backbone(&config, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = AdapterSet::default();
        for l in 0..layers {
            set.language.insert(l, adapter_of(AdapterKind::Language, h, d, &mut rng));
        }
        let asm = build_assembly(
            &config,
            &backbone,
            &set,
            &AdapterStackPolicy::language_only(layers),
            Phase::LAdapterMlm,
            ParamStore::new(),
        )
        .unwrap();
        let report = parameter_budget(&asm, Phase::LAdapterMlm);
        prop_assert_eq!(report.trainable, adapter_closed_form(h, d, layers));
        prop_assert_eq!(report.components[&Component::LanguageAdapters].total, adapter_closed_form(h, d, layers));
        let sum: usize = report.components.values().map(|c| c.total).sum();
        prop_assert_eq!(sum, report.total);
        prop_assert_eq!(report.total, asm.total_params());
    }

    #[test]
    fn invertible_round_trip_random_pairs(seed in 0u64..1000, half in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = InvertibleAdapterPair::random(2 * half, 5, &mut rng).unwrap();
        let x = Tensor::uniform(&[7, 2 * half], 3.0, &mut rng);
        let back = invertible_inverse(&pair, &invertible_forward(&pair, &x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-5);
    }
}
