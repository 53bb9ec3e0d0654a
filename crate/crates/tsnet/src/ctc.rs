//! Connectionist temporal classification.
//!
//! Class 0 is the blank. A label of length L expands to the lattice
//! `blank, l1, blank, l2, ..., blank` (S = 2L+1 states). Alpha and beta are
//! kept in the log domain; both include the emission at their own frame, so
//! the posterior at (t, s) is `alpha + beta - emission`.
//!
//! [`ctc_brute_force`] recomputes the same quantity by enumerating every
//! alignment path, which is the independent reference for the dynamic
//! program (guarded to K^T <= 1e6).

use crate::error::{Error, Result};
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Frames needed to emit `label`: its length plus one separating blank per
/// adjacent repeat.
pub fn min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

fn validate_label(label: &[usize], classes: usize) -> Result<()> {
    for &l in label {
        if l == BLANK || l >= classes {
            return Err(Error::InvalidLabel(format!(
                "label symbol {l} outside 1..{classes}"
            )));
        }
    }
    Ok(())
}

fn feasibility<F>(frames: usize, label: &[usize]) -> Result<()> {
    let need = min_frames(label);
    if frames < need {
        return Err(Error::InfeasibleLabel {
            frames,
            label_len: label.len(),
            repeats: need - label.len(),
        });
    }
    Ok(())
}

/// Forward-backward lattice over the blank-extended label.
pub struct CtcLattice<F> {
    /// Extended label: blank, l1, blank, ..., blank.
    ext: Vec<usize>,
    t: usize,
    k: usize,
    /// `[t][s]` log prob of prefixes ending in state s at frame t (emission at
    /// t included).
    alpha: Vec<F>,
    /// `[t][s]` log prob of suffixes starting in state s at frame t (emission
    /// at t included).
    beta: Vec<F>,
    log_probs: Vec<F>,
}

impl<F: Scalar> CtcLattice<F> {
    /// `log_probs` is `[T, K]` row-major. The label may be empty.
    pub fn new(log_probs: &Tensor<F>, label: &[usize]) -> Result<Self> {
        let shape = log_probs.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("ctc needs [T,K], got {shape:?}")));
        }
        let (t, k) = (shape[0], shape[1]);
        if t == 0 || k < 2 {
            return Err(Error::Shape(format!("ctc needs T>=1, K>=2, got {shape:?}")));
        }
        validate_label(label, k)?;
        feasibility::<F>(t, label)?;

        let mut ext = Vec::with_capacity(2 * label.len() + 1);
        ext.push(BLANK);
        for &l in label {
            ext.push(l);
            ext.push(BLANK);
        }
        let s_len = ext.len();
        let lp = log_probs.data();
        let at = |ti: usize, cls: usize| lp[ti * k + cls];
        let ninf = F::neg_infinity();

        let mut alpha = vec![ninf; t * s_len];
        alpha[0] = at(0, BLANK);
        if s_len > 1 {
            alpha[1] = at(0, ext[1]);
        }
        for ti in 1..t {
            for s in 0..s_len {
                let mut terms = [ninf; 3];
                terms[0] = alpha[(ti - 1) * s_len + s];
                if s >= 1 {
                    terms[1] = alpha[(ti - 1) * s_len + s - 1];
                }
                if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                    terms[2] = alpha[(ti - 1) * s_len + s - 2];
                }
                let m = log_sum_exp(&terms);
                alpha[ti * s_len + s] = if m == ninf { ninf } else { m + at(ti, ext[s]) };
            }
        }

        let mut beta = vec![ninf; t * s_len];
        beta[(t - 1) * s_len + s_len - 1] = at(t - 1, ext[s_len - 1]);
        if s_len > 1 {
            beta[(t - 1) * s_len + s_len - 2] = at(t - 1, ext[s_len - 2]);
        }
        for ti in (0..t - 1).rev() {
            for s in 0..s_len {
                let mut terms = [ninf; 3];
                terms[0] = beta[(ti + 1) * s_len + s];
                if s + 1 < s_len {
                    terms[1] = beta[(ti + 1) * s_len + s + 1];
                }
                if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                    terms[2] = beta[(ti + 1) * s_len + s + 2];
                }
                let m = log_sum_exp(&terms);
                beta[ti * s_len + s] = if m == ninf { ninf } else { m + at(ti, ext[s]) };
            }
        }

        Ok(CtcLattice {
            ext,
            t,
            k,
            alpha,
            beta,
            log_probs: lp.to_vec(),
        })
    }

    /// Log likelihood read off the final alpha states.
    pub fn loglik_forward(&self) -> F {
        let s_len = self.ext.len();
        let last = &self.alpha[(self.t - 1) * s_len..];
        if s_len == 1 {
            last[0]
        } else {
            log_sum_exp(&[last[s_len - 1], last[s_len - 2]])
        }
    }

    /// Log likelihood read off the initial beta states; must agree with
    /// [`CtcLattice::loglik_forward`] up to rounding.
    pub fn loglik_backward(&self) -> F {
        let s_len = self.ext.len();
        if s_len == 1 {
            self.beta[0]
        } else {
            log_sum_exp(&[self.beta[0], self.beta[1]])
        }
    }

    /// d(-loglik) / d(log_probs), a `[T, K]` table. Each row sums to -1.
    pub fn grad_log_probs(&self) -> Vec<F> {
        let s_len = self.ext.len();
        let logp = self.loglik_forward();
        let ninf = F::neg_infinity();
        let mut grad = vec![F::zero(); self.t * self.k];
        let mut acc = vec![ninf; self.k];
        for ti in 0..self.t {
            for a in acc.iter_mut() {
                *a = ninf;
            }
            for s in 0..s_len {
                let al = self.alpha[ti * s_len + s];
                let be = self.beta[ti * s_len + s];
                if al == ninf || be == ninf {
                    continue;
                }
                let cls = self.ext[s];
                let term = al + be - self.log_probs[ti * self.k + cls];
                acc[cls] = log_sum_exp(&[acc[cls], term]);
            }
            for cls in 0..self.k {
                if acc[cls] != ninf {
                    grad[ti * self.k + cls] = -(acc[cls] - logp).exp();
                }
            }
        }
        grad
    }
}

/// CTC loss as a tape operation: `-log P(label | log_probs)`.
///
/// `log_probs` is `[T, K]`; pass the output of `log_softmax` for proper
/// probabilities (the loss itself only assumes finite entries).
pub fn ctc_loss<F: Scalar>(tape: &mut Tape<F>, log_probs: Var, label: &[usize]) -> Result<Var> {
    let lattice = CtcLattice::new(tape.value(log_probs), label)?;
    let loss = -lattice.loglik_forward();
    let needs = tape.needs(log_probs);
    let record = tape.is_recording() && needs;
    let grad_table = if record {
        lattice.grad_log_probs()
    } else {
        Vec::new()
    };
    let v = tape.push_node(Tensor::scalar(loss), needs);
    if record {
        tape.push_step(Box::new(move |_nodes, g| {
            let Some(go) = g.take(v) else { return };
            let mut ga = g.take_accum(log_probs, grad_table.len());
            for (a, &d) in ga.iter_mut().zip(&grad_table) {
                *a += go[0] * d;
            }
            g.put(log_probs, ga);
            g.put(v, go);
        }));
    }
    Ok(v)
}

/// Plain (non-tape) CTC loss value.
pub fn ctc_loss_value<F: Scalar>(log_probs: &Tensor<F>, label: &[usize]) -> Result<F> {
    Ok(-CtcLattice::new(log_probs, label)?.loglik_forward())
}

/// Collapses an alignment path: merge consecutive repeats, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev {
            if p != BLANK {
                out.push(p);
            }
            prev = Some(p);
        }
    }
    out
}

/// Best class per frame (ties to the lower index), collapsed.
pub fn greedy_decode<F: Scalar>(log_probs: &Tensor<F>) -> Result<Vec<usize>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Shape(format!("decode needs [T,K], got {shape:?}")));
    }
    let (t, k) = (shape[0], shape[1]);
    let lp = log_probs.data();
    let mut path = Vec::with_capacity(t);
    for ti in 0..t {
        let row = &lp[ti * k..(ti + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        path.push(best);
    }
    Ok(collapse_path(&path))
}

/// Total label probability by explicit enumeration of all K^T paths,
/// returned as a loss (`-ln P`). Errors if `K^T > 1e6`.
pub fn ctc_brute_force(log_probs: &Tensor<f64>, label: &[usize]) -> Result<f64> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("ctc needs [T,K], got {shape:?}")));
    }
    let (t, k) = (shape[0], shape[1]);
    if t == 0 || k < 2 {
        return Err(Error::Shape(format!("ctc needs T>=1, K>=2, got {shape:?}")));
    }
    validate_label(label, k)?;
    if (k as f64).powi(t as i32) > 1e6 {
        return Err(Error::Config(format!(
            "brute-force guard: {k}^{t} paths exceed 1e6"
        )));
    }
    let lp = log_probs.data();
    let mut path = vec![0usize; t];
    let mut total = 0.0f64;
    loop {
        if collapse_path(&path) == label {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(ti, &cls)| lp[ti * k + cls])
                .sum();
            total += logp.exp();
        }
        // Next path in odometer order.
        let mut ax = t;
        loop {
            if ax == 0 {
                ax = usize::MAX;
                break;
            }
            ax -= 1;
            path[ax] += 1;
            if path[ax] < k {
                break;
            }
            path[ax] = 0;
        }
        if ax == usize::MAX {
            break;
        }
    }
    if total == 0.0 {
        feasibility::<f64>(t, label)?;
        return Err(Error::InfeasibleLabel {
            frames: t,
            label_len: label.len(),
            repeats: min_frames(label) - label.len(),
        });
    }
    Ok(-total.ln())
}
