//! Bidirectional LSTM layers and the three-branch multi-scale stack.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

use super::{ModelVars, NetworkConfig};

#[derive(Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BlstmVars {
    pub fw: LstmVars,
    pub bw: LstmVars,
}

/// One bidirectional layer: forward and reverse LSTM outputs concatenated on
/// the feature axis. `[N, T, D]` in, `[N, T, 2H]` out.
pub fn blstm_layer<F: Scalar>(tape: &mut Tape<F>, x: Var, v: &BlstmVars) -> Result<Var> {
    let f = tape.lstm(x, v.fw.wx, v.fw.wh, v.fw.b, false)?;
    let b = tape.lstm(x, v.bw.wx, v.bw.wh, v.bw.b, true)?;
    tape.concat(2, &[f, b])
}

/// Runs `rnn_scales` two-layer BLSTM branches over the sequence at time
/// resolutions T, T/2, T/4, upsamples each back to T, sums them, and applies
/// one final BLSTM. `[N, T, D]` in, `[N, T, 2H]` out.
pub fn multiscale_rnn<F: Scalar>(
    tape: &mut Tape<F>,
    config: &NetworkConfig,
    vars: &ModelVars,
    x: Var,
) -> Result<Var> {
    let t = tape.shape(x)[1];
    let sf = config.scale_factor();
    if t == 0 || t % sf != 0 {
        return Err(Error::Config(format!(
            "sequence length {t} not divisible by scale factor {sf}"
        )));
    }
    let mut summed: Option<Var> = None;
    for s in 0..config.rnn_scales {
        let factor = 1usize << s;
        let mut branch = x;
        if factor > 1 {
            branch = tape.maxpool_time(branch, factor)?;
        }
        branch = blstm_layer(tape, branch, &vars.blstm(&format!("rnn.b{s}.l0")))?;
        branch = blstm_layer(tape, branch, &vars.blstm(&format!("rnn.b{s}.l1")))?;
        if factor > 1 {
            branch = tape.upsample_nearest(branch, 1, factor)?;
        }
        summed = Some(match summed {
            None => branch,
            Some(acc) => tape.add(acc, branch)?,
        });
    }
    blstm_layer(tape, summed.expect("rnn_scales >= 1"), &vars.blstm("rnn.final"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Model, NetworkConfig};
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn blstm_layer_shape_and_direction_sensitivity() {
        let mut rng = crate::rng::stream(11, &[1]);
        let wx = Tensor::<f64>::randn(&[3, 8], 0.4, &mut rng);
        let wh = Tensor::<f64>::randn(&[2, 8], 0.4, &mut rng);
        let b = Tensor::<f64>::randn(&[8], 0.2, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 5, 3], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let v = BlstmVars {
            fw: LstmVars {
                wx: tape.leaf(&wx, false),
                wh: tape.leaf(&wh, false),
                b: tape.leaf(&b, false),
            },
            bw: LstmVars {
                wx: tape.leaf(&wx, false),
                wh: tape.leaf(&wh, false),
                b: tape.leaf(&b, false),
            },
        };
        let xv = tape.leaf(&x, false);
        let y = blstm_layer(&mut tape, xv, &v).unwrap();
        assert_eq!(tape.shape(y), &[1, 5, 4]);
        // Same weights both directions: halves differ unless input is
        // time-symmetric, because the directions scan opposite orders.
        let out = tape.value(y).to_f64_vec();
        let (first_fw, first_bw) = (out[0], out[2]);
        assert_ne!(first_fw, first_bw);
    }

    #[test]
    fn blstm_gradient_check() {
        let f = |tape: &mut Tape<f64>, vs: &[Var]| {
            let v = BlstmVars {
                fw: LstmVars {
                    wx: vs[1],
                    wh: vs[2],
                    b: vs[3],
                },
                bw: LstmVars {
                    wx: vs[4],
                    wh: vs[5],
                    b: vs[6],
                },
            };
            let y = blstm_layer(tape, vs[0], &v)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum_all(y2))
        };
        let mut rng = crate::rng::stream(21, &[2]);
        let h = 2;
        let inputs = vec![
            Tensor::<f64>::randn(&[1, 3, 4], 0.8, &mut rng),
            Tensor::<f64>::randn(&[4, 4 * h], 0.5, &mut rng),
            Tensor::<f64>::randn(&[h, 4 * h], 0.5, &mut rng),
            Tensor::<f64>::randn(&[4 * h], 0.3, &mut rng),
            Tensor::<f64>::randn(&[4, 4 * h], 0.5, &mut rng),
            Tensor::<f64>::randn(&[h, 4 * h], 0.5, &mut rng),
            Tensor::<f64>::randn(&[4 * h], 0.3, &mut rng),
        ];
        let report = grad_check(&f, &inputs, 1e-5).unwrap();
        report.assert_below(1e-5);
    }

    fn tiny_model(scales: usize) -> (NetworkConfig, Model<f64>) {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 3,
            rnn_scales: scales,
            num_classes: 5,
            embedding_dim: 3,
            ..NetworkConfig::default()
        };
        let model = Model::<f64>::new(config.clone(), 17).unwrap();
        (config, model)
    }

    #[test]
    fn multiscale_output_shape_and_divisibility() {
        let (config, model) = tiny_model(3);
        let mut rng = crate::rng::stream(3, &[3]);
        let x = Tensor::<f64>::randn(&[1, 8, 3], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let vars = model.vars(&mut tape, false);
        let xv = tape.leaf(&x, false);
        let y = multiscale_rnn(&mut tape, &config, &vars, xv).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 6]);

        let bad = Tensor::<f64>::zeros(&[1, 6, 3]);
        let bv = tape.leaf(&bad, false);
        let err = multiscale_rnn(&mut tape, &config, &vars, bv);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn single_scale_is_plain_stack() {
        let (config, model) = tiny_model(1);
        let mut rng = crate::rng::stream(31, &[5]);
        let x = Tensor::<f64>::randn(&[1, 5, 3], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let vars = model.vars(&mut tape, false);
        let xv = tape.leaf(&x, false);
        let y = multiscale_rnn(&mut tape, &config, &vars, xv).unwrap();
        // T=5 allowed when scale_factor is 1.
        assert_eq!(tape.shape(y), &[1, 5, 6]);

        let mut tape2 = Tape::inference();
        let vars2 = model.vars(&mut tape2, false);
        let xv2 = tape2.leaf(&x, false);
        let a = blstm_layer(&mut tape2, xv2, &vars2.blstm("rnn.b0.l0")).unwrap();
        let a = blstm_layer(&mut tape2, a, &vars2.blstm("rnn.b0.l1")).unwrap();
        let a = blstm_layer(&mut tape2, a, &vars2.blstm("rnn.final")).unwrap();
        assert_eq!(tape.value(y).data(), tape2.value(a).data());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (config, mut model) = tiny_model(3);
        for (_, t) in model.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = crate::rng::stream(8, &[8]);
        let x = Tensor::<f64>::randn(&[1, 4, 3], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let vars = model.vars(&mut tape, false);
        let xv = tape.leaf(&x, false);
        let y = multiscale_rnn(&mut tape, &config, &vars, xv).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }
}
