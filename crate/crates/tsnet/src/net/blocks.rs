//! Convolutional feature extractor and filter response normalization.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

use super::{ModelVars, NetworkConfig};

/// Filter response normalization with thresholded linear unit:
///
/// ```text
/// nu2 = mean over spatial axes of x^2   (per sample, per channel)
/// y   = gamma * x / sqrt(nu2 + eps) + beta
/// out = max(y, tau)
/// ```
///
/// `x` is `[N, C, H, W]`; `gamma`, `beta`, `tau` are `[C]`.
pub fn frn_conv<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    tau: Var,
    eps: F,
) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::Shape(format!("frn_conv expects [N,C,H,W], got {sh:?}")));
    }
    let c = sh[1];
    let x2 = tape.mul(x, x)?;
    let nu2 = tape.mean_axes(x2, &[2, 3])?;
    let denom = tape.sqrt_eps(nu2, eps);
    let inv = tape.div(x, denom)?;
    let g = tape.reshape(gamma, &[c, 1, 1])?;
    let b = tape.reshape(beta, &[c, 1, 1])?;
    let t = tape.reshape(tau, &[c, 1, 1])?;
    let scaled = tape.mul(inv, g)?;
    let y = tape.add(scaled, b)?;
    tape.max_bc(y, t)
}

/// FRN+TLU over a `[N, T, C]` sequence, normalizing over the time axis.
pub fn frn_seq<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    tau: Var,
    eps: F,
) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("frn_seq expects [N,T,C], got {sh:?}")));
    }
    let x2 = tape.mul(x, x)?;
    let nu2 = tape.mean_axes(x2, &[1])?;
    let denom = tape.sqrt_eps(nu2, eps);
    let inv = tape.div(x, denom)?;
    let scaled = tape.mul(inv, gamma)?;
    let y = tape.add(scaled, beta)?;
    tape.max_bc(y, tau)
}

fn frn_named<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
    eps: F,
) -> Result<Var> {
    frn_conv(
        tape,
        x,
        vars.var(&format!("{prefix}.gamma")),
        vars.var(&format!("{prefix}.beta")),
        vars.var(&format!("{prefix}.tau")),
        eps,
    )
}

/// Conv blocks, pools, and the height-collapsing conv.
///
/// Input `[1, 1, H, W]`, output `[1, C_last, 1, T]` with `T = W >> width_pools`.
pub fn conv_stage<F: Scalar>(
    tape: &mut Tape<F>,
    config: &NetworkConfig,
    vars: &ModelVars,
    x: Var,
) -> Result<Var> {
    let eps = F::from_f64(config.frn_eps);
    let mut cur = x;
    for b in 0..config.blocks() {
        for i in 0..config.convs_per_block {
            let w = vars.var(&format!("conv.{b}.{i}.weight"));
            cur = tape.conv2d(cur, w, (1, 1), (1, 1))?;
            cur = frn_named(tape, vars, &format!("conv.{b}.{i}.frn"), cur, eps)?;
        }
        let pool_w = if b < config.width_pools { 2 } else { 1 };
        cur = tape.maxpool2d(cur, (2, pool_w))?;
    }
    let hrem = tape.shape(cur)[2];
    debug_assert_eq!(hrem, config.height_after_pools());
    cur = tape.conv2d(cur, vars.var("collapse.weight"), (1, 1), (0, 1))?;
    frn_named(tape, vars, "collapse.frn", cur, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward_line, HeadMode, LineStyle, Model, NetworkConfig};
    use crate::tensor::{grad_check, Tensor};

    fn frn_eval(x: &[f64], shape: &[usize], gamma: f64, beta: f64, tau: f64, eps: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::inference();
        let xv = tape.leaf_owned(Tensor::from_vec(shape, x.to_vec()).unwrap(), false);
        let c = shape[1];
        let g = tape.leaf_owned(Tensor::full(&[c], gamma), false);
        let b = tape.leaf_owned(Tensor::full(&[c], beta), false);
        let t = tape.leaf_owned(Tensor::full(&[c], tau), false);
        let y = frn_conv(&mut tape, xv, g, b, t, eps).unwrap();
        tape.value(y).to_f64_vec()
    }

    #[test]
    fn frn_matches_hand_computation() {
        // nu2 = (9+16)/2 = 12.5, 1/sqrt(12.5) = 0.282842712...
        let y = frn_eval(&[3.0, 4.0], &[1, 1, 1, 2], 1.0, 0.0, -10.0, 0.0);
        assert!((y[0] - 0.848528137423857).abs() < 1e-12);
        assert!((y[1] - 1.131370849897976).abs() < 1e-12);
    }

    #[test]
    fn frn_zero_input_yields_thresholded_beta() {
        let y = frn_eval(&[0.0, 0.0, 0.0, 0.0], &[1, 1, 2, 2], 2.0, -0.5, 0.0, 1e-6);
        for v in y {
            assert_eq!(v, 0.0); // max(beta, tau) = max(-0.5, 0)
        }
        let y = frn_eval(&[0.0, 0.0], &[1, 1, 1, 2], 2.0, 0.75, 0.0, 1e-6);
        for v in y {
            assert_eq!(v, 0.75);
        }
    }

    #[test]
    fn tlu_clamps_below_tau() {
        // gamma=1, beta=0, tau=0: unit-variance inputs pass, negatives clamp.
        let y = frn_eval(&[-1.0, 2.0], &[1, 1, 1, 2], 1.0, 0.0, 0.0, 0.0);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2.0 / (2.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frn_gradient_check() {
        let f = |tape: &mut Tape<f64>, vs: &[Var]| {
            let y = frn_conv(tape, vs[0], vs[1], vs[2], vs[3], 1e-3)?;
            Ok(tape.sum_all(y))
        };
        let mut rng = crate::rng::stream(5, &[99]);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 4], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let t = Tensor::<f64>::full(&[3], -5.0); // keep TLU inactive and smooth
        let report = grad_check(&f, &[x, g, b, t], 1e-5).unwrap();
        report.assert_below(1e-6);
    }

    fn vars_for<F: Scalar>(model: &Model<F>, tape: &mut Tape<F>) -> super::super::ModelVars {
        model.vars(tape, true)
    }

    #[test]
    fn conv_stage_shape_and_time_downsampling() {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 4,
            num_classes: 5,
            embedding_dim: 3,
            ..NetworkConfig::default()
        };
        let model = Model::<f32>::new(config.clone(), 3).unwrap();
        for w in [128usize, 256] {
            let mut tape = Tape::inference();
            let vars = vars_for(&model, &mut tape);
            let x = tape.leaf_owned(Tensor::zeros(&[1, 1, 32, w]), false);
            let out = conv_stage(&mut tape, &config, &vars, x).unwrap();
            assert_eq!(tape.shape(out), &[1, 3, 1, w / 4]);
        }
    }

    #[test]
    fn forward_line_shapes_and_padding() {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 4,
            num_classes: 5,
            embedding_dim: 3,
            ..NetworkConfig::default()
        };
        let mut model = Model::<f32>::new(config.clone(), 3).unwrap();
        model.style_table_mut().unwrap().register_tsi(7).unwrap();
        let mut rng = crate::rng::stream(1, &[2]);
        // 50 is not a multiple of 16; forward pads to 64 so T = 16.
        let img = Tensor::<f32>::randn(&[32, 50], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let vars = vars_for(&model, &mut tape);
        let out = forward_line(&mut tape, &config, &vars, &img, LineStyle::Row(0)).unwrap();
        assert_eq!(tape.shape(out), &[16, 5]);
        let bad = Tensor::<f32>::zeros(&[16, 64]);
        assert!(forward_line(&mut tape, &config, &vars, &bad, LineStyle::Row(0)).is_err());
    }

    #[test]
    fn baseline_head_rejects_missing_frn_row_and_ignores_style() {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 4,
            num_classes: 5,
            embedding_dim: 3,
            head_mode: HeadMode::FrnBaseline,
            ..NetworkConfig::default()
        };
        let model = Model::<f32>::new(config.clone(), 3).unwrap();
        let mut rng = crate::rng::stream(4, &[4]);
        let img = Tensor::<f32>::randn(&[32, 64], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let vars = vars_for(&model, &mut tape);
        let out = forward_line(&mut tape, &config, &vars, &img, LineStyle::Baseline).unwrap();
        assert_eq!(tape.shape(out), &[16, 5]);
    }

    #[test]
    fn tsb_rows_change_output_baseline_does_not_exist_for_them() {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 4,
            num_classes: 5,
            embedding_dim: 3,
            ..NetworkConfig::default()
        };
        let mut model = Model::<f32>::new(config.clone(), 3).unwrap();
        {
            let st = model.style_table_mut().unwrap();
            st.register_tsi(1).unwrap();
            st.register_tsi(2).unwrap();
        }
        let mut rng = crate::rng::stream(9, &[9]);
        let img = Tensor::<f32>::randn(&[32, 64], 1.0, &mut rng);
        let run = |row: usize| {
            let mut tape = Tape::inference();
            let vars = model.vars(&mut tape, false);
            let out = forward_line(&mut tape, &config, &vars, &img, LineStyle::Row(row)).unwrap();
            tape.value(out).to_f64_vec()
        };
        assert_ne!(run(0), run(1));
    }
}
