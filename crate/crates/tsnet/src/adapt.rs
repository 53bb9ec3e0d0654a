//! Few-shot adaptation to an unseen transcription style: with every
//! network parameter frozen, a single style embedding is fitted to a
//! handful of exemplar lines by minimizing their mean CTC loss with
//! L-BFGS, starting from the mean of the trained embeddings.

use std::collections::VecDeque;
use std::path::Path;

use rayon::prelude::*;

use crate::ctc::{ctc_loss, min_frames};
use crate::error::{Error, Result};
use crate::net::{forward_head, forward_trunk, HeadMode, LineStyle, Model};
use crate::rng::{self, label};
use crate::synth::{mask_augment, Alphabet, Sample};
use crate::tensor::{Tape, Tensor};
use crate::train::{evaluate, TsiMode};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    /// Curvature history length.
    pub m: usize,
    pub max_iter: usize,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            m: 10,
            max_iter: 100,
            tol: 1e-6,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
        }
    }
}

/// Objective for [`lbfgs_minimize`]. `begin_iteration` runs once per
/// L-BFGS iteration before any evaluation, so an objective with internal
/// randomness (e.g. augmentation) can re-derive it there and stay
/// deterministic throughout the iteration's line search.
pub trait LbfgsObjective {
    fn begin_iteration(&mut self, _iter: usize) -> Result<()> {
        Ok(())
    }
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsTraceRow {
    pub iter: usize,
    /// Objective value at the end of the iteration (under that iteration's
    /// randomness).
    pub f: f64,
    /// Gradient norm at the start of the iteration.
    pub grad_norm: f64,
    /// Accepted step length (0 when the iteration took no step).
    pub step: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub trace: Vec<LbfgsTraceRow>,
    /// True when the gradient-norm tolerance was reached.
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn finite(f: f64, what: &str) -> Result<f64> {
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Optim(format!("objective returned non-finite {what}: {f}")))
    }
}

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
/// Curvature pairs with tiny `s . y` are discarded.
pub fn lbfgs_minimize<O: LbfgsObjective>(
    obj: &mut O,
    x0: &[f64],
    config: &LbfgsConfig,
) -> Result<LbfgsResult> {
    if x0.is_empty() {
        return Err(Error::Optim("empty variable vector".into()));
    }
    let mut x = x0.to_vec();
    obj.begin_iteration(0)?;
    let (mut f, mut g) = obj.value_grad(&x)?;
    finite(f, "value")?;
    finite(norm(&g), "gradient")?;

    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut trace = Vec::new();
    let mut converged = false;

    for k in 0..config.max_iter {
        let gnorm = norm(&g);
        if gnorm < config.tol {
            converged = true;
            trace.push(LbfgsTraceRow {
                iter: k,
                f,
                grad_norm: gnorm,
                step: 0.0,
                backtracks: 0,
            });
            break;
        }

        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = hist
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0);
        let mut r: Vec<f64> = q.iter().map(|v| v * gamma).collect();
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &r);
            for (ri, si) in r.iter_mut().zip(s) {
                *ri += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = r.iter().map(|v| -v).collect();
        let mut dd = dot(&g, &d);
        if dd >= 0.0 {
            // Fall back to steepest descent if the metric went bad.
            d = g.iter().map(|v| -v).collect();
            dd = -gnorm * gnorm;
        }

        let mut t = 1.0;
        let mut backtracks = 0;
        let mut accepted = loop {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let fnew = finite(obj.value(&xn)?, "value")?;
            if fnew <= f + config.c1 * t * dd {
                break Some((xn, fnew));
            }
            if backtracks >= config.max_backtracks {
                break None;
            }
            backtracks += 1;
            t *= config.shrink;
        };
        // If the unit step passed untouched, grow it while the Armijo test
        // still holds and the value keeps improving. Without this, a badly
        // scaled inverse-Hessian estimate can lock the method into
        // vanishing steps whose curvature pairs are all rejected.
        if backtracks == 0 {
            if let Some((_, mut fbest)) = accepted.as_ref().map(|(_, fv)| ((), *fv)) {
                for _ in 0..config.max_backtracks {
                    let t2 = t / config.shrink;
                    let xn2: Vec<f64> =
                        x.iter().zip(&d).map(|(xi, di)| xi + t2 * di).collect();
                    let f2 = obj.value(&xn2)?;
                    if !f2.is_finite() || f2 > f + config.c1 * t2 * dd || f2 >= fbest {
                        break;
                    }
                    t = t2;
                    fbest = f2;
                    accepted = Some((xn2, f2));
                }
            }
        }
        let Some((xn, fnew)) = accepted else {
            trace.push(LbfgsTraceRow {
                iter: k,
                f,
                grad_norm: gnorm,
                step: 0.0,
                backtracks,
            });
            break;
        };
        trace.push(LbfgsTraceRow {
            iter: k,
            f: fnew,
            grad_norm: gnorm,
            step: t,
            backtracks,
        });

        obj.begin_iteration(k + 1)?;
        let (f2, g2) = obj.value_grad(&xn)?;
        finite(f2, "value")?;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g2.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > config.m {
                hist.pop_front();
            }
        }
        x = xn;
        f = f2;
        g = g2;
    }

    Ok(LbfgsResult {
        x,
        f,
        trace,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub lbfgs: LbfgsConfig,
    /// Mask exemplars the same way training does, re-randomized each
    /// L-BFGS iteration.
    pub augment: bool,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lbfgs: LbfgsConfig::default(),
            augment: true,
            mask_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub embedding: Tensor<f32>,
    /// Mean-embedding starting point.
    pub initial: Tensor<f32>,
    pub trace: Vec<LbfgsTraceRow>,
    pub converged: bool,
    /// Indices of exemplars dropped because their label cannot fit the
    /// image's frame count.
    pub rejected: Vec<usize>,
}

/// CTC loss over the exemplars as a function of one embedding vector.
/// The style-independent trunk is recomputed once per L-BFGS iteration
/// (masks change there); line-search evaluations only rerun the head.
struct EmbeddingObjective<'a> {
    model: &'a Model<f32>,
    images: Vec<Tensor<f32>>,
    labels: Vec<Vec<usize>>,
    char_width: usize,
    augment: bool,
    mask_rate: f64,
    seed: u64,
    features: Vec<Tensor<f32>>,
}

impl<'a> EmbeddingObjective<'a> {
    fn refresh_features(&mut self, iter: usize) -> Result<()> {
        if !(self.augment && self.mask_rate > 0.0) && !self.features.is_empty() {
            return Ok(());
        }
        let masked: Vec<Tensor<f32>> = if self.augment && self.mask_rate > 0.0 {
            self.images
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    let mut mrng =
                        rng::stream(self.seed, &[label::ADAPT_MASK, iter as u64, i as u64]);
                    mask_augment(img, self.char_width, self.mask_rate, &mut mrng)
                })
                .collect()
        } else {
            self.images.clone()
        };
        self.features = masked
            .par_iter()
            .map(|img| {
                let mut tape = Tape::inference();
                let vars = self.model.vars(&mut tape, false);
                let h = forward_trunk(&mut tape, &self.model.config, &vars, img)?;
                Ok(tape.value(h).clone())
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn eval(&self, x: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let e_t = Tensor::<f32>::from_vec(&[x.len()], x.iter().map(|&v| v as f32).collect())?;
        let mut tape = if want_grad {
            Tape::new()
        } else {
            Tape::inference()
        };
        let e = tape.leaf(&e_t, want_grad);
        let vars = self.model.vars(&mut tape, false);
        let mut total: Option<crate::tensor::Var> = None;
        for (feat, lab) in self.features.iter().zip(&self.labels) {
            let h = tape.leaf(feat, false);
            let logits =
                forward_head(&mut tape, &self.model.config, &vars, h, LineStyle::Embedding(e))?;
            let lp = tape.log_softmax(logits)?;
            let l = ctc_loss(&mut tape, lp, lab)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let total = total.expect("objective has exemplars");
        let mean = tape.mul_scalar(total, 1.0 / self.features.len() as f32);
        let f = f64::from(tape.value(mean).data()[0]);
        if !want_grad {
            return Ok((f, None));
        }
        tape.backward(mean)?;
        let grad = tape
            .grad_tensor(e)
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        Ok((f, Some(grad)))
    }
}

impl<'a> LbfgsObjective for EmbeddingObjective<'a> {
    fn begin_iteration(&mut self, iter: usize) -> Result<()> {
        self.refresh_features(iter)
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x, false)?.0)
    }

    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, g) = self.eval(x, true)?;
        Ok((f, g.expect("gradient requested")))
    }
}

/// Fits one style embedding to exemplar `(image, transcription)` pairs
/// with the network frozen. Exemplars whose label cannot fit their frame
/// count are rejected up front and listed in the report.
pub fn adapt_embedding(
    model: &Model<f32>,
    exemplars: &[(Tensor<f32>, String)],
    alphabet: &Alphabet,
    char_width: usize,
    config: &AdaptConfig,
) -> Result<Adapted> {
    if model.config.head_mode != HeadMode::Tsb {
        return Err(Error::Config("adaptation needs the style head".into()));
    }
    if alphabet.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "alphabet implies {} classes but the model has {}",
            alphabet.num_classes(),
            model.config.num_classes
        )));
    }
    if exemplars.is_empty() {
        return Err(Error::Config("no exemplar lines".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_rate) {
        return Err(Error::Config("mask_rate must be in [0,1]".into()));
    }

    let mult = model.config.required_width_multiple();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = Vec::new();
    for (i, (image, text)) in exemplars.iter().enumerate() {
        let lab = alphabet.classes(text)?;
        let padded = image.shape().last().copied().unwrap_or(0).div_ceil(mult) * mult;
        if model.config.time_steps(padded) < min_frames(&lab) {
            rejected.push(i);
        } else {
            images.push(image.clone());
            labels.push(lab);
        }
    }
    if images.is_empty() {
        return Err(Error::Config("every exemplar line is infeasible".into()));
    }

    let initial = model.style_table()?.mean_embedding()?;
    let x0: Vec<f64> = initial.data().iter().map(|&v| f64::from(v)).collect();
    let mut obj = EmbeddingObjective {
        model,
        images,
        labels,
        char_width,
        augment: config.augment,
        mask_rate: config.mask_rate,
        seed: config.seed,
        features: Vec::new(),
    };
    let res = lbfgs_minimize(&mut obj, &x0, &config.lbfgs)?;
    let embedding = Tensor::<f32>::from_vec(
        &[res.x.len()],
        res.x.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(Adapted {
        embedding,
        initial,
        trace: res.trace,
        converged: res.converged,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Exemplar-set sizes to try.
    pub counts: Vec<usize>,
    /// Random exemplar subsets per count.
    pub repeats: usize,
    pub seed: u64,
    pub adapt: AdaptConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            counts: vec![1, 4, 12, 20, 50, 100],
            repeats: 50,
            seed: 0,
            adapt: AdaptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub count: usize,
    pub repeat: usize,
    pub cer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

pub const SWEEP_HEADER: &str = "count,repeat,cer";
pub const SWEEP_SUMMARY_HEADER: &str = "count,mean_cer,std_cer,min_cer";

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for c in cells {
        s.push_str(&format!("{},{},{}\n", c.count, c.repeat, c.cer));
    }
    s
}

pub fn sweep_summary_csv(rows: &[SweepSummary]) -> String {
    let mut s = String::from(SWEEP_SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.count, r.mean, r.std, r.min));
    }
    s
}

/// Fig.-5-style protocol: for each exemplar count, draw `repeats` random
/// subsets from `pool` (without replacement), adapt an embedding on each,
/// and score it on `heldout` with the fixed-embedding mode.
pub fn adaptation_sweep(
    model: &Model<f32>,
    pool: &[Sample],
    heldout: &[Sample],
    alphabet: &Alphabet,
    char_width: usize,
    config: &SweepConfig,
) -> Result<SweepReport> {
    if config.counts.is_empty() || config.repeats == 0 {
        return Err(Error::Config("counts and repeats must be non-empty".into()));
    }
    if heldout.is_empty() {
        return Err(Error::Config("held-out evaluation set is empty".into()));
    }
    let max = *config.counts.iter().max().unwrap();
    if max > pool.len() {
        return Err(Error::Config(format!(
            "count {max} exceeds exemplar pool of {}",
            pool.len()
        )));
    }

    let mut cells = Vec::new();
    for &count in &config.counts {
        for repeat in 0..config.repeats {
            let words = &[label::SUBSET, count as u64, repeat as u64];
            let mut srng = rng::stream(config.seed, words);
            let idx = rand::seq::index::sample(&mut srng, pool.len(), count);
            let exemplars: Vec<(Tensor<f32>, String)> = idx
                .iter()
                .map(|i| (pool[i].image.clone(), pool[i].text.clone()))
                .collect();
            let cell_config = AdaptConfig {
                seed: rng::mix(config.seed, words),
                ..config.adapt.clone()
            };
            let adapted = adapt_embedding(model, &exemplars, alphabet, char_width, &cell_config)?;
            let report = evaluate(model, heldout, alphabet, TsiMode::Fixed(&adapted.embedding))?;
            cells.push(SweepCell {
                count,
                repeat,
                cer: report.cer,
            });
        }
    }

    let mut summary = Vec::new();
    for &count in &config.counts {
        let cers: Vec<f64> = cells
            .iter()
            .filter(|c| c.count == count)
            .map(|c| c.cer)
            .collect();
        let mean = cers.iter().sum::<f64>() / cers.len() as f64;
        let std = if cers.len() > 1 {
            (cers.iter().map(|c| (c - mean). powi(2)).sum::<f64>() / (cers.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let min = cers.iter().cloned().fold(f64::INFINITY, f64::min);
        summary.push(SweepSummary {
            count,
            mean,
            std,
            min,
        });
    }
    Ok(SweepReport { cells, summary })
}

pub const EMBEDDING_MAGIC: &[u8; 5] = b"TSEM1";

/// Serializes a 1-D embedding as magic, u32 length, f32 LE payload.
pub fn embedding_bytes(e: &Tensor<f32>) -> Result<Vec<u8>> {
    if e.shape().len() != 1 || e.numel() == 0 {
        return Err(Error::Config(format!(
            "embedding must be 1-D and non-empty, got {:?}",
            e.shape()
        )));
    }
    let mut out = Vec::with_capacity(EMBEDDING_MAGIC.len() + 4 + 4 * e.numel());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(e.numel() as u32).to_le_bytes());
    for v in e.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn embedding_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Checkpoint(format!("embedding file: {m}"));
    if bytes.len() < EMBEDDING_MAGIC.len() + 4 || &bytes[..5] != EMBEDDING_MAGIC {
        return Err(bad("bad magic"));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let payload = &bytes[9..];
    if d == 0 || payload.len() != 4 * d {
        return Err(bad("length mismatch"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[d], data)
}

pub fn save_embedding(path: &Path, e: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, embedding_bytes(e)?).map_err(|s| Error::io(path, s))
}

pub fn load_embedding(path: &Path) -> Result<Tensor<f32>> {
    embedding_from_bytes(&std::fs::read(path).map_err(|s| Error::io(path, s))?)
}
