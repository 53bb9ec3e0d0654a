//! Behavioral properties of the training loop: a small network memorizes
//! a tiny corpus, and the desk-scale run's loss actually comes down.

mod common;

use tsnet::net::{Model, NetworkConfig};
use tsnet::synth::{build_dataset, load_dataset, Split, SynthConfig};
use tsnet::train::{train, AdamState, TrainConfig};

#[test]
fn tiny_corpus_is_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_styles: 2,
        tsi_per_style: 1,
        lines_per_tsi: 12,
        word_len: (2, 4),
        words_per_line: (1, 1),
        ..SynthConfig::default()
    };
    build_dataset(&synth, 13, dir.path()).unwrap();
    let data = load_dataset(dir.path(), Split::Train).unwrap();

    let net = NetworkConfig {
        conv_channels: vec![4, 8],
        rnn_hidden: 16,
        rnn_scales: 2,
        embedding_dim: 4,
        ..NetworkConfig::default()
    };
    let mut model = Model::<f32>::new(net, 2).unwrap();
    let mut adam = AdamState::new();

    // Train in rounds so the test stops as soon as the corpus is learned.
    let mut start = 0u64;
    let mut best = f64::MAX;
    for stop in [300u64, 600, 1200, 2000] {
        let tc = TrainConfig {
            iterations: stop,
            batch_size: 8,
            eval_every: 100,
            eval_cap: data.samples.len(),
            seed: 4,
            augment: false,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &mut adam, start, &tc, &data, &[], |_| {}).unwrap();
        for row in &report.metrics {
            if let Some(cer) = row.train_cer {
                best = best.min(cer);
            }
        }
        if best == 0.0 {
            break;
        }
        start = stop;
    }
    assert_eq!(best, 0.0, "training CER never reached zero (best {best})");
}

#[test]
fn desk_scale_loss_decreases() {
    let fx = common::ensure_fixture();
    for path in [&fx.tsb_metrics, &fx.frn_metrics] {
        let csv = std::fs::read_to_string(path).unwrap();
        let losses: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(losses.len() >= 200, "metrics too short: {}", losses.len());
        let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(
            tail < head,
            "{}: mean loss rose from {head:.3} to {tail:.3}",
            path.display()
        );
    }
}
