//! Joint training of the recognizer and style table with Adam, CER
//! evaluation under several TSI assignment modes, and checkpointing.

mod adam;
mod checkpoint;
mod editdist;

pub use adam::{adam_step, clip_grads, grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use editdist::{align, align_weighted, cer, edit_distance, AlignOp};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, greedy_decode, min_frames};
use crate::error::{Error, Result};
use crate::net::{forward_line, HeadMode, LineStyle, Model};
use crate::rng::{self, label};
use crate::synth::{mask_augment, Alphabet, Dataset, Sample};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Total iteration count; resuming continues toward the same total.
    pub iterations: u64,
    pub seed: u64,
    /// Masking augmentation on train batches.
    pub augment: bool,
    /// Probability that a line gets one masked span.
    pub mask_rate: f64,
    pub eval_every: u64,
    /// Periodic CER runs use at most this many lines per split.
    pub eval_cap: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            iterations: 20_000,
            seed: 0,
            augment: true,
            mask_rate: 0.5,
            eval_every: 1000,
            eval_cap: 200,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask_rate must be in [0,1]".into()));
        }
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: u64,
    pub loss: f64,
    pub train_cer: Option<f64>,
    pub test_cer: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,loss,train_cer,test_cer";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.iter,
            self.loss,
            opt(self.train_cer),
            opt(self.test_cer)
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    /// Samples whose label cannot fit the frame count (skipped).
    pub skipped_infeasible: u64,
    /// Samples dropped for a non-finite loss.
    pub skipped_nonfinite: u64,
    /// Whole steps abandoned because the reduced gradient was non-finite.
    pub aborted_steps: u64,
}

/// Registers every dataset TSI with the style table (ascending, idempotent).
pub fn register_dataset_tsis(model: &mut Model<f32>, dataset: &Dataset) -> Result<()> {
    if model.config.head_mode == HeadMode::Tsb {
        let table = model.style_table_mut()?;
        for tsi in 0..dataset.n_tsi() as u32 {
            if table.row_of(tsi).is_none() {
                table.register_tsi(tsi)?;
            }
        }
    }
    Ok(())
}

fn check_alphabet(model: &Model<f32>, alphabet: &Alphabet) -> Result<()> {
    if alphabet.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "alphabet {:?} implies {} classes (blank included) but the model has {}",
            alphabet.as_string(),
            alphabet.num_classes(),
            model.config.num_classes
        )));
    }
    Ok(())
}

enum SlotOutcome {
    Good {
        loss: f64,
        grads: Vec<(String, Tensor<f32>)>,
    },
    Infeasible,
    NonFinite,
}

fn line_style(model: &Model<f32>, tsi: u32) -> Result<LineStyle> {
    match model.config.head_mode {
        HeadMode::Tsb => Ok(LineStyle::Row(model.style_table()?.require_row(tsi)?)),
        HeadMode::FrnBaseline => Ok(LineStyle::Baseline),
    }
}

fn slot_pass(
    model: &Model<f32>,
    config: &TrainConfig,
    data: &Dataset,
    iter: u64,
    slot: usize,
    sample: &Sample,
) -> Result<SlotOutcome> {
    let image = if config.augment && config.mask_rate > 0.0 {
        let mut arng = rng::stream(config.seed, &[label::AUGMENT, iter, slot as u64]);
        mask_augment(&sample.image, data.meta.char_width, config.mask_rate, &mut arng)
    } else {
        sample.image.clone()
    };
    let mult = model.config.required_width_multiple();
    let padded = image.shape()[1].div_ceil(mult) * mult;
    if model.config.time_steps(padded) < min_frames(&sample.label) {
        return Ok(SlotOutcome::Infeasible);
    }
    let style = line_style(model, sample.tsi)?;
    let mut tape = Tape::new();
    let vars = model.vars(&mut tape, true);
    let logits = forward_line(&mut tape, &model.config, &vars, &image, style)?;
    let lp = tape.log_softmax(logits)?;
    let loss = ctc_loss(&mut tape, lp, &sample.label)?;
    let lv = f64::from(tape.value(loss).data()[0]);
    if !lv.is_finite() {
        return Ok(SlotOutcome::NonFinite);
    }
    tape.backward(loss)?;
    let grads = vars
        .named()
        .into_iter()
        .map(|(n, v)| (n, tape.grad_tensor(v)))
        .collect();
    Ok(SlotOutcome::Good { loss: lv, grads })
}

fn eval_subset(samples: &[Sample], cap: usize) -> Vec<&Sample> {
    if samples.len() <= cap {
        samples.iter().collect()
    } else {
        (0..cap).map(|i| &samples[i * samples.len() / cap]).collect()
    }
}

/// Runs iterations `start_iter..config.iterations`, updating `model` and
/// `adam` in place. Batch membership and augmentation derive from
/// per-iteration rng streams, so an interrupted run resumed from a
/// checkpoint retraces the original run exactly.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    start_iter: u64,
    config: &TrainConfig,
    data: &Dataset,
    test: &[Sample],
    mut on_metric: impl FnMut(&MetricRow),
) -> Result<TrainReport> {
    config.validate()?;
    check_alphabet(model, &data.alphabet)?;
    if data.samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    register_dataset_tsis(model, data)?;

    let mut report = TrainReport::default();
    for iter in start_iter..config.iterations {
        let n = data.samples.len();
        let k = config.batch_size.min(n);
        let mut brng = rng::stream(config.seed, &[label::BATCH, iter]);
        let picked = rand::seq::index::sample(&mut brng, n, k).into_vec();

        let outcomes: Vec<SlotOutcome> = picked
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| slot_pass(model, config, data, iter, slot, &data.samples[idx]))
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0f64;
        let mut good = 0usize;
        let mut acc: Vec<(String, Tensor<f32>)> = Vec::new();
        for outcome in outcomes {
            match outcome {
                SlotOutcome::Infeasible => report.skipped_infeasible += 1,
                SlotOutcome::NonFinite => report.skipped_nonfinite += 1,
                SlotOutcome::Good { loss, grads } => {
                    loss_sum += loss;
                    good += 1;
                    if acc.is_empty() {
                        acc = grads;
                    } else {
                        for ((an, a), (gn, g)) in acc.iter_mut().zip(grads) {
                            debug_assert_eq!(*an, gn);
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
        }

        let mean_loss = if good > 0 {
            loss_sum / good as f64
        } else {
            f64::NAN
        };
        if good > 0 {
            let inv = 1.0 / good as f32;
            for (_, g) in acc.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_grads(&mut acc, config.clip_norm);
            let mut params = model.named_tensors_mut();
            match adam_step(&mut params, &acc, adam, &config.adam()) {
                Ok(()) => {}
                Err(Error::Optim(_)) => report.aborted_steps += 1,
                Err(e) => return Err(e),
            }
        }

        let eval_now = (iter + 1) % config.eval_every == 0 || iter + 1 == config.iterations;
        let (train_cer, test_cer) = if eval_now {
            let tr = evaluate_refs(
                model,
                &eval_subset(&data.samples, config.eval_cap),
                &data.alphabet,
                TsiMode::Given,
            )?;
            let te = if test.is_empty() {
                None
            } else {
                Some(
                    evaluate_refs(
                        model,
                        &eval_subset(test, config.eval_cap),
                        &data.alphabet,
                        TsiMode::Given,
                    )?
                    .cer,
                )
            };
            (Some(tr.cer), te)
        } else {
            (None, None)
        };
        let row = MetricRow {
            iter,
            loss: mean_loss,
            train_cer,
            test_cer,
        };
        on_metric(&row);
        report.metrics.push(row);
    }
    Ok(report)
}

/// TSI assignment used during evaluation.
#[derive(Clone, Copy)]
pub enum TsiMode<'a> {
    /// Each line is scored with its own TSI.
    Given,
    /// TSI identities are deranged with the given seed (identity when fewer
    /// than two distinct TSI are present).
    Shuffled(u64),
    /// One embedding for every line, e.g. an adapted style vector.
    Fixed(&'a Tensor<f32>),
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub tsi: u32,
    /// TSI actually used for conditioning (None in fixed-embedding mode).
    pub eval_tsi: Option<u32>,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cer: f64,
    pub total_edits: usize,
    pub total_ref_len: usize,
    pub rows: Vec<SampleEval>,
}

pub fn evaluate(
    model: &Model<f32>,
    samples: &[Sample],
    alphabet: &Alphabet,
    mode: TsiMode,
) -> Result<EvalReport> {
    evaluate_refs(model, &samples.iter().collect::<Vec<_>>(), alphabet, mode)
}

pub fn evaluate_refs(
    model: &Model<f32>,
    samples: &[&Sample],
    alphabet: &Alphabet,
    mode: TsiMode,
) -> Result<EvalReport> {
    check_alphabet(model, alphabet)?;
    if matches!(mode, TsiMode::Fixed(_)) && model.config.head_mode != HeadMode::Tsb {
        return Err(Error::Config("fixed-embedding mode needs the style head".into()));
    }
    let shuffle: std::collections::BTreeMap<u32, u32> = match mode {
        TsiMode::Shuffled(seed) => {
            let tsis: Vec<u32> = samples
                .iter()
                .map(|s| s.tsi)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut targets = tsis.clone();
            if targets.len() >= 2 {
                let mut rng = rng::stream(seed, &[label::SHUFFLE_EVAL]);
                use rand::Rng;
                for i in (1..targets.len()).rev() {
                    let j = rng.gen_range(0..i);
                    targets.swap(i, j);
                }
            }
            tsis.into_iter().zip(targets).collect()
        }
        _ => Default::default(),
    };

    let rows: Vec<SampleEval> = samples
        .par_iter()
        .map(|sample| {
            let eval_tsi = match mode {
                TsiMode::Given => Some(sample.tsi),
                TsiMode::Shuffled(_) => Some(shuffle[&sample.tsi]),
                TsiMode::Fixed(_) => None,
            };
            let mut tape = Tape::inference();
            let style = match (&mode, model.config.head_mode) {
                (TsiMode::Fixed(e), _) => LineStyle::Embedding(tape.leaf(e, false)),
                (_, HeadMode::FrnBaseline) => LineStyle::Baseline,
                (_, HeadMode::Tsb) => {
                    LineStyle::Row(model.style_table()?.require_row(eval_tsi.expect("given"))?)
                }
            };
            let vars = model.vars(&mut tape, false);
            let logits = forward_line(&mut tape, &model.config, &vars, &sample.image, style)?;
            let hyp = greedy_decode(tape.value(logits))?;
            Ok(SampleEval {
                tsi: sample.tsi,
                eval_tsi,
                reference: sample.text.clone(),
                hypothesis: alphabet.text_of_classes(&hyp)?,
                edits: edit_distance(&sample.label, &hyp),
            })
        })
        .collect::<Result<_>>()?;

    let total_edits: usize = rows.iter().map(|r| r.edits).sum();
    let total_ref_len: usize = samples.iter().map(|s| s.label.len()).sum();
    Ok(EvalReport {
        cer: cer(&[(total_edits, total_ref_len)]),
        total_edits,
        total_ref_len,
        rows,
    })
}
