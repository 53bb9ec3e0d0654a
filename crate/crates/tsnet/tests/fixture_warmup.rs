//! Pre-trains the shared fixture used by the heavier end-to-end suites.
//! The long warmup is ignored by default (hours on a small CPU); run it
//! explicitly with `cargo test --test fixture_warmup -- --ignored` to fill
//! the cache, otherwise the suites train on first use.

mod common;

use tsnet::net::NetworkConfig;
use tsnet::synth::{build_dataset, load_dataset, Split, SynthConfig};
use tsnet::train::{metrics_csv, train, AdamState, Checkpoint};

#[test]
#[ignore]
fn warm_fixture_cache() {
    let f = common::ensure_fixture();
    println!("fixture ready at {}", f.root.display());
    println!("tsb: {:.1} min, frn: {:.1} min", f.tsb_secs / 60.0, f.frn_secs / 60.0);
}

#[test]
fn chunked_training_equals_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_styles: 2,
        tsi_per_style: 1,
        lines_per_tsi: 6,
        word_len: (2, 3),
        words_per_line: (1, 1),
        ..SynthConfig::default()
    };
    build_dataset(&synth, 3, dir.path()).unwrap();
    let data = load_dataset(dir.path(), Split::Train).unwrap();
    let test = load_dataset(dir.path(), Split::Test).unwrap().samples;
    let net = NetworkConfig {
        conv_channels: vec![2, 2],
        rnn_hidden: 3,
        rnn_scales: 2,
        embedding_dim: 2,
        ..NetworkConfig::default()
    };
    let tc = tsnet::train::TrainConfig {
        batch_size: 4,
        iterations: 5,
        eval_every: 2,
        eval_cap: 4,
        seed: 5,
        ..tsnet::train::TrainConfig::default()
    };

    let root = dir.path().join("fx");
    std::fs::create_dir_all(&root).unwrap();
    let ckpt = common::ensure_trained(&root, "t", net.clone(), &tc, 2, &data, &test);
    let chunked = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(chunked.iteration, 5);
    let chunked_csv = std::fs::read_to_string(root.join("t_metrics.csv")).unwrap();

    let mut model = tsnet::net::Model::<f32>::new(net, common::MODEL_SEED).unwrap();
    let mut adam = AdamState::new();
    let report = train(&mut model, &mut adam, 0, &tc, &data, &test, |_| {}).unwrap();
    assert_eq!(chunked_csv, metrics_csv(&report.metrics));
    for ((n, a), (_, b)) in model
        .named_tensors()
        .iter()
        .zip(chunked.model.named_tensors().iter())
    {
        assert_eq!(a, b, "{n}");
    }

    // A second call reuses the final checkpoint without retraining.
    let again = common::ensure_trained(&root, "t",
        tsnet::net::NetworkConfig { conv_channels: vec![9], ..Default::default() }, &tc, 2, &data, &test);
    assert_eq!(again, ckpt);

    // Resume from a mid-run rolling checkpoint retraces the same tail.
    let root2 = dir.path().join("fx2");
    std::fs::create_dir_all(&root2).unwrap();
    let tc3 = tsnet::train::TrainConfig { iterations: 2, ..tc.clone() };
    let net2 = chunked.model.config.clone();
    let mut model2 = tsnet::net::Model::<f32>::new(net2.clone(), common::MODEL_SEED).unwrap();
    let mut adam2 = AdamState::new();
    let report2 = train(&mut model2, &mut adam2, 0, &tc3, &data, &test, |_| {}).unwrap();
    Checkpoint {
        model: model2,
        train_config: Some(tc.clone()),
        iteration: 2,
        adam: Some(adam2),
    }
    .save(&root2.join("t.ckpt.part"))
    .unwrap();
    std::fs::write(
        root2.join("t_metrics.csv"),
        metrics_csv(&report2.metrics),
    )
    .unwrap();
    let resumed = common::ensure_trained(&root2, "t", net2, &tc, 2, &data, &test);
    assert_eq!(
        std::fs::read_to_string(root2.join("t_metrics.csv")).unwrap(),
        chunked_csv
    );
    let a = std::fs::read(&resumed).unwrap();
    let b = std::fs::read(&ckpt).unwrap();
    assert_eq!(a, b);
}
