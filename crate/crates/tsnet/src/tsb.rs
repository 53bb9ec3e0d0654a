//! Transcription style block: per-document embeddings that drive an AdaIN
//! scale/offset on the sequence features.
//!
//! A [`StyleTable`] owns one embedding row per registered transcription style
//! index (TSI) plus the shared affine maps `W_gamma, W_beta, b_gamma,
//! b_beta`. The forward path selects a row, maps it to per-channel `(gamma,
//! beta)`, and applies instance normalization over the line's time axis.
//! Because the row enters via a sparse select, unused rows receive exactly
//! zero gradient.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct StyleTable<F> {
    channels: usize,
    dim: usize,
    /// AdaIN epsilon, added to sigma (not to the variance).
    pub eps: f64,
    /// Half-width of the uniform init for the affine weight maps.
    pub init_k: f64,
    /// `[num_tsi, dim]`, one row per registered TSI in registration order.
    pub embeddings: Tensor<F>,
    /// `[channels, dim]`.
    pub w_gamma: Tensor<F>,
    /// `[channels, dim]`.
    pub w_beta: Tensor<F>,
    /// `[channels]`, ones at init.
    pub b_gamma: Tensor<F>,
    /// `[channels]`, zeros at init.
    pub b_beta: Tensor<F>,
    rows: BTreeMap<u32, usize>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> StyleTable<F> {
    pub fn new(channels: usize, dim: usize, eps: f64, init_k: f64, seed: u64) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "style table needs channels >= 1 and dim >= 1, got {channels}x{dim}"
            )));
        }
        let mut rng = rng::stream(seed, &[rng::label::STYLE_TABLE]);
        let w_gamma = Tensor::rand_uniform(&[channels, dim], init_k, &mut rng);
        let w_beta = Tensor::rand_uniform(&[channels, dim], init_k, &mut rng);
        Ok(StyleTable {
            channels,
            dim,
            eps,
            init_k,
            embeddings: Tensor::zeros(&[0, dim]),
            w_gamma,
            w_beta,
            b_gamma: Tensor::ones(&[channels]),
            b_beta: Tensor::zeros(&[channels]),
            rows: BTreeMap::new(),
            rng,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tsi(&self) -> usize {
        self.rows.len()
    }

    /// Adds a fresh N(0,1) embedding row for `tsi`; duplicate ids are errors.
    pub fn register_tsi(&mut self, tsi: u32) -> Result<usize> {
        if self.rows.contains_key(&tsi) {
            return Err(Error::Config(format!("TSI {tsi} already registered")));
        }
        let row = self.num_tsi();
        let fresh = Tensor::<F>::randn(&[1, self.dim], 1.0, &mut self.rng);
        let old = std::mem::replace(&mut self.embeddings, Tensor::zeros(&[0, self.dim]));
        let (_, mut data) = old.into_raw();
        data.extend_from_slice(fresh.data());
        self.embeddings = Tensor::from_vec(&[row + 1, self.dim], data)?;
        self.rows.insert(tsi, row);
        Ok(row)
    }

    pub fn row_of(&self, tsi: u32) -> Option<usize> {
        self.rows.get(&tsi).copied()
    }

    pub fn require_row(&self, tsi: u32) -> Result<usize> {
        self.row_of(tsi)
            .ok_or_else(|| Error::Config(format!("TSI {tsi} not registered in style table")))
    }

    /// Registered (tsi, row) pairs in row order.
    pub fn registered(&self) -> Vec<(u32, usize)> {
        let mut v: Vec<(u32, usize)> = self.rows.iter().map(|(&t, &r)| (t, r)).collect();
        v.sort_by_key(|&(_, r)| r);
        v
    }

    pub fn embedding_row(&self, row: usize) -> Result<Tensor<F>> {
        if row >= self.num_tsi() {
            return Err(Error::Config(format!(
                "embedding row {row} out of {}",
                self.num_tsi()
            )));
        }
        let d = self.dim;
        Tensor::from_vec(&[d], self.embeddings.data()[row * d..(row + 1) * d].to_vec())
    }

    /// Arithmetic mean over all embedding rows.
    pub fn mean_embedding(&self) -> Result<Tensor<F>> {
        let n = self.num_tsi();
        if n == 0 {
            return Err(Error::Config("mean embedding of empty style table".into()));
        }
        let d = self.dim;
        let mut out = vec![F::zero(); d];
        for row in 0..n {
            for j in 0..d {
                out[j] += self.embeddings.data()[row * d + j];
            }
        }
        let inv = F::from_f64(1.0 / n as f64);
        for v in out.iter_mut() {
            *v *= inv;
        }
        Tensor::from_vec(&[d], out)
    }

    /// Puts the five parameter tensors on a tape.
    pub fn vars(&self, tape: &mut Tape<F>, trainable: bool) -> StyleVars {
        StyleVars {
            embeddings: tape.leaf(&self.embeddings, trainable),
            w_gamma: tape.leaf(&self.w_gamma, trainable),
            w_beta: tape.leaf(&self.w_beta, trainable),
            b_gamma: tape.leaf(&self.b_gamma, trainable),
            b_beta: tape.leaf(&self.b_beta, trainable),
        }
    }

    /// Internal RNG stream state, for byte-exact checkpointing.
    pub fn rng_state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    /// Rebuilds a table from checkpointed parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        eps: f64,
        init_k: f64,
        embeddings: Tensor<F>,
        w_gamma: Tensor<F>,
        w_beta: Tensor<F>,
        b_gamma: Tensor<F>,
        b_beta: Tensor<F>,
        rows: BTreeMap<u32, usize>,
        rng_seed: [u8; 32],
        rng_word_pos: u128,
    ) -> Result<Self> {
        let (channels, dim) = match (w_gamma.shape(), embeddings.shape()) {
            ([c, d], [n, d2]) if d == d2 && *n == rows.len() => (*c, *d),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "inconsistent style table shapes: W {:?}, E {:?}, {} rows",
                    w_gamma.shape(),
                    embeddings.shape(),
                    rows.len()
                )))
            }
        };
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_word_pos(rng_word_pos);
        Ok(StyleTable {
            channels,
            dim,
            eps,
            init_k,
            embeddings,
            w_gamma,
            w_beta,
            b_gamma,
            b_beta,
            rows,
            rng,
        })
    }

    pub fn rows_map(&self) -> &BTreeMap<u32, usize> {
        &self.rows
    }
}

/// Tape handles for the style table parameters.
#[derive(Clone, Copy)]
pub struct StyleVars {
    pub embeddings: Var,
    pub w_gamma: Var,
    pub w_beta: Var,
    pub b_gamma: Var,
    pub b_beta: Var,
}

/// `gamma = W_gamma e + b_gamma`, `beta = W_beta e + b_beta`.
pub fn style_affine<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &StyleVars,
    e: Var,
) -> Result<(Var, Var)> {
    let d = match tape.shape(e) {
        [d] => *d,
        other => {
            return Err(Error::Shape(format!(
                "style embedding must be a vector, got {other:?}"
            )))
        }
    };
    let wsh = tape.shape(vars.w_gamma).to_vec();
    if wsh.len() != 2 || wsh[1] != d {
        return Err(Error::Shape(format!(
            "W_gamma {wsh:?} incompatible with embedding dim {d}"
        )));
    }
    let c = wsh[0];
    let ec = tape.reshape(e, &[d, 1])?;
    let g = tape.matmul(vars.w_gamma, ec)?;
    let g = tape.reshape(g, &[c])?;
    let gamma = tape.add(g, vars.b_gamma)?;
    let b = tape.matmul(vars.w_beta, ec)?;
    let b = tape.reshape(b, &[c])?;
    let beta = tape.add(b, vars.b_beta)?;
    Ok((gamma, beta))
}

/// Adaptive instance normalization over the time axis.
///
/// `x` is `[N, T, C]`; `gamma`, `beta` are `[C]`. Per sample and channel:
/// `y = gamma * (x - mean) / (sigma + eps) + beta` with population sigma over
/// all T frames. `eps` is added to sigma itself, not to the variance.
pub fn adain<F: Scalar>(tape: &mut Tape<F>, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
    let xsh = tape.shape(x).to_vec();
    if xsh.len() != 3 {
        return Err(Error::Shape(format!("adain expects [N,T,C], got {xsh:?}")));
    }
    let c = xsh[2];
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.shape(v) != [c] {
            return Err(Error::Shape(format!(
                "adain {name} must be [{c}], got {:?}",
                tape.shape(v)
            )));
        }
    }
    let (mean, var) = tape.moments(x, &[1])?;
    let centered = tape.sub(x, mean)?;
    let sigma = tape.sqrt_eps(var, F::zero());
    let denom = tape.add_scalar(sigma, eps);
    let xhat = tape.div(centered, denom)?;
    let scaled = tape.mul(xhat, gamma)?;
    tape.add(scaled, beta)
}

/// Full TSB head for one sample: select the embedding row for its TSI, map
/// to (gamma, beta), normalize.
pub fn tsb_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &StyleVars,
    row: usize,
    eps: F,
) -> Result<Var> {
    let nrows = tape.shape(vars.embeddings)[0];
    if row >= nrows {
        return Err(Error::Config(format!(
            "embedding row {row} out of {nrows} registered"
        )));
    }
    let e = tape.select_row(vars.embeddings, row)?;
    let (gamma, beta) = style_affine(tape, vars, e)?;
    adain(tape, x, gamma, beta, eps)
}

/// TSB head with an externally supplied embedding (adaptation and
/// fixed-style evaluation).
pub fn tsb_forward_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &StyleVars,
    e: Var,
    eps: F,
) -> Result<Var> {
    let (gamma, beta) = style_affine(tape, vars, e)?;
    adain(tape, x, gamma, beta, eps)
}

/// Per-channel (gamma, beta) for an embedding, in plain f64. Used by the
/// analysis tooling; matches `style_affine` on the tape.
pub fn style_affine_f64<F: Scalar>(table: &StyleTable<F>, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (c, d) = (table.channels(), table.dim());
    assert_eq!(e.len(), d);
    let mut gamma = vec![0.0f64; c];
    let mut beta = vec![0.0f64; c];
    for i in 0..c {
        let mut sg = table.b_gamma.data()[i].to_f64();
        let mut sb = table.b_beta.data()[i].to_f64();
        for j in 0..d {
            sg += table.w_gamma.data()[i * d + j].to_f64() * e[j];
            sb += table.w_beta.data()[i * d + j].to_f64() * e[j];
        }
        gamma[i] = sg;
        beta[i] = sb;
    }
    (gamma, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn adain_values(x: Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
        let mut tape = Tape::inference();
        let xv = tape.leaf_owned(x, false);
        let g = tape.leaf(&t64(&[gamma.len()], gamma), false);
        let b = tape.leaf(&t64(&[beta.len()], beta), false);
        let y = adain(&mut tape, xv, g, b, eps).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn adain_hand_example() {
        let y = adain_values(t64(&[1, 3, 1], &[1.0, 2.0, 3.0]), &[2.0], &[1.0], 0.0);
        let sigma = (2.0f64 / 3.0).sqrt();
        let expect = [1.0 - 2.0 / sigma, 1.0, 1.0 + 2.0 / sigma];
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{:?} vs {expect:?}", y.data());
        }
        assert!((y.data()[0] + 1.449489742783178).abs() < 1e-12);
    }

    #[test]
    fn adain_normalizes_mean_and_handles_constant_channel() {
        let y = adain_values(
            t64(&[1, 4, 2], &[1.0, 7.0, 2.0, 7.0, 3.0, 7.0, 10.0, 7.0]),
            &[1.0, 1.0],
            &[0.5, 0.5],
            1e-5,
        );
        // Channel 0: mean of output is beta. Channel 1 is constant: all beta.
        let c0: f64 = (0..4).map(|t| y.at(&[0, t, 0])).sum::<f64>() / 4.0;
        assert!((c0 - 0.5).abs() < 1e-12);
        for t in 0..4 {
            assert_eq!(y.at(&[0, t, 1]), 0.5);
        }
    }

    #[test]
    fn adain_idempotent_on_normalized_input() {
        let x = t64(&[1, 5, 1], &[0.3, -1.2, 2.4, 0.0, -0.9]);
        let once = adain_values(x.clone(), &[1.0], &[0.0], 0.0);
        let twice = adain_values(once.clone(), &[1.0], &[0.0], 0.0);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_equivariant_under_input_affine() {
        let x = t64(&[1, 4, 1], &[0.1, 0.5, -0.3, 0.8]);
        let base = adain_values(x.clone(), &[1.7], &[-0.2], 0.0);
        for a in [0.5, 2.0, 10.0] {
            for b in [0.0, -3.0, 11.0] {
                let scaled = x.map(|v| a * v + b);
                let y = adain_values(scaled, &[1.7], &[-0.2], 0.0);
                for (p, q) in y.data().iter().zip(base.data()) {
                    assert!((p - q).abs() < 1e-5, "a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn style_affine_trivia() {
        let mut table = StyleTable::<f64>::new(3, 2, 1e-5, 0.15, 0).unwrap();
        table.register_tsi(0).unwrap();
        // Zero embedding: gamma = ones, beta = zeros.
        table.embeddings.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = table.vars(&mut tape, false);
        let e = tape.select_row(vars.embeddings, 0).unwrap();
        let (g, b) = style_affine(&mut tape, &vars, e).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.value(b).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn style_affine_scalar_case() {
        let mut table = StyleTable::<f64>::new(1, 1, 0.0, 0.15, 0).unwrap();
        table.register_tsi(7).unwrap();
        table.w_gamma.data_mut()[0] = 2.0;
        table.b_gamma.data_mut()[0] = 1.0;
        table.embeddings.data_mut()[0] = 3.0;
        let mut tape = Tape::new();
        let vars = table.vars(&mut tape, false);
        let e = tape.select_row(vars.embeddings, 0).unwrap();
        let (g, _) = style_affine(&mut tape, &vars, e).unwrap();
        assert_eq!(tape.value(g).data(), &[7.0]);
    }

    #[test]
    fn register_is_unique_and_ordered() {
        let mut table = StyleTable::<f32>::new(4, 8, 1e-5, 0.15, 3).unwrap();
        for tsi in [5u32, 1, 9] {
            table.register_tsi(tsi).unwrap();
        }
        assert!(table.register_tsi(1).is_err());
        assert_eq!(table.num_tsi(), 3);
        assert_eq!(table.registered(), vec![(5, 0), (1, 1), (9, 2)]);
        assert_eq!(table.embeddings.shape(), &[3, 8]);
    }

    #[test]
    fn mean_embedding_examples() {
        let mut table = StyleTable::<f64>::new(2, 3, 1e-5, 0.15, 1).unwrap();
        table.register_tsi(0).unwrap();
        let row0 = table.embedding_row(0).unwrap();
        let mean = table.mean_embedding().unwrap();
        assert_eq!(mean.data(), row0.data());

        table.register_tsi(1).unwrap();
        let neg: Vec<f64> = row0.data().iter().map(|v| -v).collect();
        table.embeddings.data_mut()[3..6].copy_from_slice(&neg);
        let mean = table.mean_embedding().unwrap();
        for v in mean.data() {
            assert!(v.abs() < 1e-15);
        }

        let empty = StyleTable::<f64>::new(2, 3, 1e-5, 0.15, 1).unwrap();
        assert!(empty.mean_embedding().is_err());
    }

    #[test]
    fn unused_embedding_rows_get_exactly_zero_grad() {
        let mut table = StyleTable::<f64>::new(2, 4, 1e-5, 0.15, 11).unwrap();
        for tsi in 0..3 {
            table.register_tsi(tsi).unwrap();
        }
        let mut tape = Tape::new();
        let vars = table.vars(&mut tape, true);
        let x = tape.leaf(
            &t64(&[1, 3, 2], &[0.4, -1.0, 2.0, 0.3, -0.5, 1.1]),
            false,
        );
        let y = tsb_forward(&mut tape, x, &vars, 1, 1e-5).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let ge = tape.grad(vars.embeddings).unwrap();
        let d = table.dim();
        assert!(ge[0..d].iter().all(|&g| g == 0.0), "row 0 untouched");
        assert!(ge[2 * d..3 * d].iter().all(|&g| g == 0.0), "row 2 untouched");
        assert!(ge[d..2 * d].iter().any(|&g| g != 0.0), "row 1 trained");
        // Shared affine parameters receive gradient from every sample.
        assert!(tape
            .grad(vars.w_beta)
            .unwrap()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn equal_embeddings_make_tsi_irrelevant() {
        let mut table = StyleTable::<f64>::new(2, 4, 1e-5, 0.15, 9).unwrap();
        for tsi in 0..3 {
            table.register_tsi(tsi).unwrap();
        }
        let row0 = table.embedding_row(0).unwrap().data().to_vec();
        for r in 1..3 {
            let d = table.dim();
            table.embeddings.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row0);
        }
        let x = t64(&[1, 3, 2], &[0.4, -1.0, 2.0, 0.3, -0.5, 1.1]);
        let mut outs = Vec::new();
        for row in 0..3 {
            let mut tape = Tape::inference();
            let vars = table.vars(&mut tape, false);
            let xv = tape.leaf(&x, false);
            let y = tsb_forward(&mut tape, xv, &vars, row, 1e-5).unwrap();
            outs.push(tape.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn style_affine_f64_matches_tape() {
        let mut table = StyleTable::<f64>::new(3, 2, 1e-5, 0.15, 21).unwrap();
        table.register_tsi(0).unwrap();
        let e = table.embedding_row(0).unwrap();
        let (g64, b64) = style_affine_f64(&table, e.data());
        let mut tape = Tape::inference();
        let vars = table.vars(&mut tape, false);
        let ev = tape.select_row(vars.embeddings, 0).unwrap();
        let (g, b) = style_affine(&mut tape, &vars, ev).unwrap();
        for (a, x) in tape.value(g).data().iter().zip(&g64) {
            assert!((a - x).abs() < 1e-12);
        }
        for (a, x) in tape.value(b).data().iter().zip(&b64) {
            assert!((a - x).abs() < 1e-12);
        }
    }
}
