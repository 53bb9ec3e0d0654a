//! Shared end-to-end fixture: the canonical small dataset plus fully
//! trained style-head and baseline models, cached under the cargo tmp dir
//! so repeated test runs reuse one training. Training is chunked and
//! resumable; an interrupted run continues from its rolling checkpoint and
//! produces byte-identical results.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tsnet::net::{HeadMode, Model, NetworkConfig};
use tsnet::synth::{build_dataset, load_dataset, Dataset, Sample, Split, SynthConfig};
use tsnet::train::{train, AdamState, Checkpoint, MetricRow, TrainConfig, METRICS_HEADER};

pub const DATA_SEED: u64 = 7;
pub const MODEL_SEED: u64 = 1;
const CHUNK: u64 = 1000;
const FIXTURE_REV: u32 = 1;

pub fn synth_config() -> SynthConfig {
    SynthConfig::default()
}

/// Same generator and styles with one extra TSI per style; the extra TSIs
/// never seen in training serve as adaptation targets.
pub fn pool_config() -> SynthConfig {
    SynthConfig {
        tsi_per_style: 4,
        ..SynthConfig::default()
    }
}

pub fn net_config(head: HeadMode) -> NetworkConfig {
    NetworkConfig {
        head_mode: head,
        ..NetworkConfig::default()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig::default()
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn fixture_key() -> String {
    let blob = format!(
        "{FIXTURE_REV}|{DATA_SEED}|{MODEL_SEED}|{}|{}|{}|{}|{}",
        serde_json::to_string(&synth_config()).unwrap(),
        serde_json::to_string(&pool_config()).unwrap(),
        serde_json::to_string(&net_config(HeadMode::Tsb)).unwrap(),
        serde_json::to_string(&net_config(HeadMode::FrnBaseline)).unwrap(),
        serde_json::to_string(&train_config()).unwrap(),
    );
    format!("{:016x}", fnv64(blob.as_bytes()))
}

pub struct Fixture {
    pub root: PathBuf,
    pub data_dir: PathBuf,
    pub pool_dir: PathBuf,
    pub tsb_ckpt: PathBuf,
    pub frn_ckpt: PathBuf,
    pub tsb_metrics: PathBuf,
    pub frn_metrics: PathBuf,
    /// Accumulated training wall-clock seconds per head.
    pub tsb_secs: f64,
    pub frn_secs: f64,
    /// Worker threads the time was recorded under.
    pub tsb_threads: usize,
    pub frn_threads: usize,
}

impl Fixture {
    pub fn data(&self) -> Dataset {
        load_dataset(&self.data_dir, Split::Train).unwrap()
    }

    pub fn test(&self) -> Vec<Sample> {
        load_dataset(&self.data_dir, Split::Test).unwrap().samples
    }

    pub fn tsb(&self) -> Model<f32> {
        Checkpoint::load(&self.tsb_ckpt).unwrap().model
    }

    pub fn frn(&self) -> Model<f32> {
        Checkpoint::load(&self.frn_ckpt).unwrap().model
    }
}

fn ensure_dataset(dir: &Path, config: &SynthConfig, seed: u64) {
    if dir.join("meta.json").exists() {
        return;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).unwrap();
    }
    build_dataset(config, seed, dir).unwrap();
}

fn read_secs(path: &Path) -> f64 {
    fs::read_to_string(path)
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["secs"].as_f64())
        .unwrap_or(0.0)
}

fn read_threads(path: &Path) -> usize {
    fs::read_to_string(path)
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["threads"].as_u64())
        .map(|t| t as usize)
        .unwrap_or_else(rayon::current_num_threads)
}

fn write_secs(path: &Path, secs: f64) {
    let v = serde_json::json!({ "secs": secs, "threads": rayon::current_num_threads() });
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

/// Keeps only metric rows below `start` (after a resume the retraced tail
/// is appended fresh).
fn trim_metrics(path: &Path, start: u64) -> String {
    let mut kept = String::from(METRICS_HEADER);
    kept.push('\n');
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let iter: u64 = line.split(',').next().unwrap_or("").parse().unwrap_or(u64::MAX);
            if iter < start {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    kept
}

/// Trains `net` to `tc.iterations` in resumable chunks, producing
/// `<tag>.ckpt`, `<tag>_metrics.csv` and `<tag>_time.json` under `root`.
pub fn ensure_trained(
    root: &Path,
    tag: &str,
    net: NetworkConfig,
    tc: &TrainConfig,
    chunk: u64,
    data: &Dataset,
    test: &[Sample],
) -> PathBuf {
    let final_path = root.join(format!("{tag}.ckpt"));
    let part_path = root.join(format!("{tag}.ckpt.part"));
    let metrics_path = root.join(format!("{tag}_metrics.csv"));
    let time_path = root.join(format!("{tag}_time.json"));
    if final_path.exists() {
        return final_path;
    }

    let (mut model, mut adam, mut start) = if part_path.exists() {
        let ck = Checkpoint::load(&part_path).unwrap();
        let adam = ck.adam.expect("rolling checkpoint carries optimizer state");
        (ck.model, adam, ck.iteration)
    } else {
        (Model::<f32>::new(net, MODEL_SEED).unwrap(), AdamState::new(), 0)
    };
    let mut csv = trim_metrics(&metrics_path, start);
    let mut secs = if start > 0 { read_secs(&time_path) } else { 0.0 };

    while start < tc.iterations {
        let stop = (start + chunk).min(tc.iterations);
        let chunk_tc = TrainConfig {
            iterations: stop,
            ..tc.clone()
        };
        let t0 = Instant::now();
        let log = |row: &MetricRow| {
            if row.train_cer.is_some() {
                eprintln!("[{tag}] {}", row.csv_line());
            }
        };
        let report = train(&mut model, &mut adam, start, &chunk_tc, data, test, log).unwrap();
        secs += t0.elapsed().as_secs_f64();
        for row in &report.metrics {
            csv.push_str(&row.csv_line());
            csv.push('\n');
        }
        fs::write(&metrics_path, &csv).unwrap();
        write_secs(&time_path, secs);
        let ck = Checkpoint {
            model: model.clone(),
            train_config: Some(tc.clone()),
            iteration: stop,
            adam: Some(adam.clone()),
        };
        let tmp = part_path.with_extension("part.tmp");
        ck.save(&tmp).unwrap();
        fs::rename(&tmp, &part_path).unwrap();
        start = stop;
    }
    fs::rename(&part_path, &final_path).unwrap();
    final_path
}

/// Builds (or reuses) the full fixture: datasets plus both trained heads.
pub fn ensure_fixture() -> Fixture {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("tsnet-fixtures")
        .join(fixture_key());
    fs::create_dir_all(&root).unwrap();

    let data_dir = root.join("data");
    let pool_dir = root.join("pool");
    ensure_dataset(&data_dir, &synth_config(), DATA_SEED);
    ensure_dataset(&pool_dir, &pool_config(), DATA_SEED);

    let data = load_dataset(&data_dir, Split::Train).unwrap();
    let test = load_dataset(&data_dir, Split::Test).unwrap().samples;
    let tc = train_config();
    let tsb_ckpt = ensure_trained(&root, "tsb", net_config(HeadMode::Tsb), &tc, CHUNK, &data, &test);
    let frn_ckpt = ensure_trained(
        &root,
        "frn",
        net_config(HeadMode::FrnBaseline),
        &tc,
        CHUNK,
        &data,
        &test,
    );

    Fixture {
        tsb_secs: read_secs(&root.join("tsb_time.json")),
        frn_secs: read_secs(&root.join("frn_time.json")),
        tsb_threads: read_threads(&root.join("tsb_time.json")),
        frn_threads: read_threads(&root.join("frn_time.json")),
        data_dir,
        pool_dir,
        tsb_ckpt,
        frn_ckpt,
        tsb_metrics: root.join("tsb_metrics.csv"),
        frn_metrics: root.join("frn_metrics.csv"),
        root,
    }
}
