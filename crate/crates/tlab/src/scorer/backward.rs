//! Reverse-mode differentiation of the full model, driven by per-lattice
//! upstream gradients.
//!
//! The entry points are [`backward`], which turns a [`Forward`] bundle plus
//! [`LatticeGradients`] into parameter gradients, and [`model_loss`], which
//! composes forward pass, loss combination, and backward pass for one
//! utterance.
//!
//! Gradient routing mirrors the loss design: `aux_stopped` upstream reaches
//! only the auxiliary network and the encoder below its tap — the shared
//! decoder projection, inner joint bias, and decoder stack see exactly zero
//! from it — while `aux_flowing` upstream (and everything else) propagates
//! through all shared parameters.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::forward::{forward, Forward};
use super::{EncLayerParams, ModelConfig, ModelParameters};
use crate::losses::{total_loss, LatticeGradients, LossBreakdown, LossConfig};
use crate::{Error, Label, Result};

/// Rank-1 update helper: `a bᵀ` for column `a`, row `b`.
fn outer(a: ArrayView1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

/// Backward through a log-softmax table: given the log-probabilities and the
/// gradient with respect to them, returns the gradient with respect to the
/// pre-softmax logits.
fn table_softmax_backward(logp: &Array3<f64>, upstream: &Array3<f64>) -> Array3<f64> {
    let probs = logp.mapv(f64::exp);
    let gsum = upstream.sum_axis(Axis(2));
    upstream - &(probs * &gsum.insert_axis(Axis(2)))
}

/// Gradients of all model parameters for one utterance.
///
/// `fwd` must come from [`forward`] on the same `(params, targets)` pair,
/// and `upstream` from a loss over its lattices.
pub fn backward(
    config: &ModelConfig,
    params: &ModelParameters,
    targets: &[Label],
    fwd: &Forward,
    upstream: &LatticeGradients,
) -> Result<ModelParameters> {
    let enc = fwd.acts.last().unwrap();
    let t_len = enc.nrows();
    let u_rows = fwd.dec_out.nrows();
    let u_len = u_rows - 1;
    if targets.len() != u_len {
        return Err(Error::Contract(format!(
            "target length {} does not match forward bundle rows {u_rows}",
            targets.len()
        )));
    }
    if upstream.main.dim() != fwd.lattice.table().dim() {
        return Err(Error::Contract(
            "main upstream gradient shape does not match the lattice".into(),
        ));
    }
    for route in [&upstream.aux_stopped, &upstream.aux_flowing] {
        if !route.is_empty() && route.len() != fwd.aux_lattices.len() {
            return Err(Error::Contract(format!(
                "auxiliary upstream count {} does not match {} tapped layers",
                route.len(),
                fwd.aux_lattices.len()
            )));
        }
    }

    let joint_dim = config.joint_dim;
    let n_cells = t_len * u_rows;
    let mut g = params.zeros_like();
    // Gradient collectors for the shared activations.
    let mut d_enc_top: Array2<f64> = Array2::zeros(enc.raw_dim());
    let mut d_dec: Array2<f64> = Array2::zeros(fwd.dec_out.raw_dim());
    let mut d_taps: Vec<Array2<f64>> = config
        .aux_layers
        .iter()
        .map(|&l| Array2::zeros(fwd.acts[l].raw_dim()))
        .collect();

    // Main joint.
    {
        let dlogits = table_softmax_backward(fwd.lattice.table(), &upstream.main);
        let symbols = dlogits.dim().2;
        let dl_flat = dlogits
            .into_shape_with_order((n_cells, symbols))
            .expect("owned array is contiguous");
        let z_flat = fwd
            .joint_z
            .view()
            .into_shape_with_order((n_cells, joint_dim))
            .expect("owned array is contiguous");
        g.joint_wout += &z_flat.t().dot(&dl_flat);
        g.joint_bout += &dl_flat.sum_axis(Axis(0));
        let dz_flat = dl_flat.dot(&params.joint_wout.t());
        let da_flat = dz_flat * &z_flat.mapv(|z| 1.0 - z * z);
        let da = da_flat
            .into_shape_with_order((t_len, u_rows, joint_dim))
            .expect("owned array is contiguous");
        let da_sum_u = da.sum_axis(Axis(1));
        let da_sum_t = da.sum_axis(Axis(0));
        g.joint_wenc += &enc.t().dot(&da_sum_u);
        g.joint_wdec += &fwd.dec_out.t().dot(&da_sum_t);
        g.joint_b += &da_sum_u.sum_axis(Axis(0));
        d_enc_top += &da_sum_u.dot(&params.joint_wenc.t());
        d_dec += &da_sum_t.dot(&params.joint_wdec.t());
    }

    // Auxiliary joints, once per routing class. The stopped route updates
    // only the auxiliary parameters and the tapped activations; the flowing
    // route additionally reaches the shared decoder projection and inner
    // joint bias.
    let routes: [(&[Array3<f64>], bool); 2] = [
        (&upstream.aux_stopped, false),
        (&upstream.aux_flowing, true),
    ];
    for (route, flows) in routes {
        for (i, up) in route.iter().enumerate() {
            if up.dim() != fwd.aux_lattices[i].table().dim() {
                return Err(Error::Contract(format!(
                    "auxiliary upstream {i} shape does not match its lattice"
                )));
            }
            let dlogits = table_softmax_backward(fwd.aux_lattices[i].table(), up);
            let symbols = dlogits.dim().2;
            let dl_flat = dlogits
                .into_shape_with_order((n_cells, symbols))
                .expect("owned array is contiguous");
            let z_flat = fwd.aux_z[i]
                .view()
                .into_shape_with_order((n_cells, joint_dim))
                .expect("owned array is contiguous");
            g.aux_wout += &z_flat.t().dot(&dl_flat);
            g.aux_bout += &dl_flat.sum_axis(Axis(0));
            let dz_flat = dl_flat.dot(&params.aux_wout.t());
            let da_flat = dz_flat * &z_flat.mapv(|z| 1.0 - z * z);
            let da = da_flat
                .into_shape_with_order((t_len, u_rows, joint_dim))
                .expect("owned array is contiguous");
            let da_sum_u = da.sum_axis(Axis(1));
            let da_sum_t = da.sum_axis(Axis(0));

            // Frame-side path through the auxiliary MLP.
            let h1 = &fwd.aux_mlp_h1[i];
            let tap = &fwd.acts[config.aux_layers[i]];
            let mlp = &params.aux_mlps[i];
            let dm2 = da_sum_u;
            g.aux_mlps[i].w2 += &h1.t().dot(&dm2);
            g.aux_mlps[i].b2 += &dm2.sum_axis(Axis(0));
            let dh1 = dm2.dot(&mlp.w2.t()) * &h1.mapv(|v| 1.0 - v * v);
            g.aux_mlps[i].w1 += &tap.t().dot(&dh1);
            g.aux_mlps[i].b1 += &dh1.sum_axis(Axis(0));
            d_taps[i] += &dh1.dot(&mlp.w1.t());

            if flows {
                g.joint_wdec += &fwd.dec_out.t().dot(&da_sum_t);
                g.joint_b += &da.sum_axis(Axis(0)).sum_axis(Axis(0));
                d_dec += &da_sum_t.dot(&params.joint_wdec.t());
            }
        }
    }

    // Frame classifier head.
    if let Some(up) = &upstream.ctc {
        if up.dim() != fwd.ctc_logp.dim() {
            return Err(Error::Contract(
                "frame-classifier upstream shape does not match its posteriors".into(),
            ));
        }
        let probs = fwd.ctc_logp.mapv(f64::exp);
        let gsum = up.sum_axis(Axis(1));
        let dlogits = up - &(probs * &gsum.insert_axis(Axis(1)));
        g.ctc_w += &enc.t().dot(&dlogits);
        g.ctc_b += &dlogits.sum_axis(Axis(0));
        d_enc_top += &dlogits.dot(&params.ctc_w.t());
    }

    // Next-label head; upstream is already in logit space.
    if let Some(up) = &upstream.lm {
        if up.dim() != fwd.lm_logits.dim() {
            return Err(Error::Contract(
                "next-label upstream shape does not match its logits".into(),
            ));
        }
        g.lm_w += &fwd.dec_out.slice(s![..u_len, ..]).t().dot(up);
        g.lm_b += &up.sum_axis(Axis(0));
        let mut head_rows = d_dec.slice_mut(s![..u_len, ..]);
        head_rows += &up.dot(&params.lm_w.t());
    }

    // Decoder backward through time. Row u consumed `u` labels; its input
    // was the start row (u = 0) or the embedding of targets[u - 1].
    {
        let mut carry: Array1<f64> = Array1::zeros(fwd.dec_out.ncols());
        for u in (0..u_rows).rev() {
            let total = &d_dec.row(u) + &carry;
            let dpre = total * &fwd.dec_out.row(u).mapv(|v| 1.0 - v * v);
            g.dec_b += &dpre;
            g.dec_wx += &outer(fwd.dec_embedded.row(u), &dpre);
            if u > 0 {
                g.dec_wh += &outer(fwd.dec_out.row(u - 1), &dpre);
            }
            let row = if u == 0 { 0 } else { targets[u - 1] as usize };
            let d_embedded = params.dec_wx.dot(&dpre);
            let mut embed_row = g.embed.row_mut(row);
            embed_row += &d_embedded;
            carry = params.dec_wh.dot(&dpre);
        }
    }

    // Encoder backward, top layer first, injecting tapped-activation
    // gradients where the auxiliary networks read.
    let mut grad_out = d_enc_top;
    for l0 in (0..params.enc.len()).rev() {
        if let Some(i) = config.aux_layers.iter().position(|&a| a == l0 + 1) {
            grad_out += &d_taps[i];
        }
        let x = &fwd.acts[l0];
        grad_out = match (&params.enc[l0], &mut g.enc[l0]) {
            (EncLayerParams::Linear { w, .. }, EncLayerParams::Linear { w: gw, b: gb }) => {
                *gw += &x.t().dot(&grad_out);
                *gb += &grad_out.sum_axis(Axis(0));
                grad_out.dot(&w.t())
            }
            (
                EncLayerParams::TanhRnn { w_x, w_h, .. },
                EncLayerParams::TanhRnn {
                    w_x: gwx,
                    w_h: gwh,
                    b: gb,
                },
            ) => {
                let states = &fwd.acts[l0 + 1];
                let mut carry: Array1<f64> = Array1::zeros(states.ncols());
                let mut d_x = Array2::zeros(x.raw_dim());
                for t in (0..t_len).rev() {
                    let total = &grad_out.row(t) + &carry;
                    let dpre = total * &states.row(t).mapv(|v| 1.0 - v * v);
                    *gb += &dpre;
                    *gwx += &outer(x.row(t), &dpre);
                    if t > 0 {
                        *gwh += &outer(states.row(t - 1), &dpre);
                    }
                    d_x.row_mut(t).assign(&w_x.dot(&dpre));
                    carry = w_h.dot(&dpre);
                }
                d_x
            }
            _ => unreachable!("gradient layout mirrors the parameter layout"),
        };
    }

    Ok(g)
}

/// Forward pass, combined loss, and backward pass for one utterance.
pub fn model_loss(
    config: &ModelConfig,
    params: &ModelParameters,
    features: &ArrayView2<f64>,
    targets: &[Label],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParameters)> {
    let fwd = forward(config, params, features, targets)?;
    let (breakdown, upstream) = total_loss(
        &fwd.lattice,
        &fwd.aux_lattices,
        Some(&fwd.ctc_logp),
        Some(&fwd.lm_logits),
        targets,
        loss_cfg,
    )?;
    let grads = backward(config, params, targets, &fwd, &upstream)?;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{init_parameters, LayerSpec};
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_config() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            enc_layers: vec![LayerSpec::TanhRnn { hidden_dim: 4 }, LayerSpec::Linear { out_dim: 3 }],
            dec_embed_dim: 3,
            dec_hidden_dim: 4,
            joint_dim: 5,
            vocab: 2,
            aux_layers: vec![1, 2],
        }
    }

    fn random_features(t_len: usize, dim: usize, rng: &mut StdRng) -> Array2<f64> {
        Array2::from_shape_fn((t_len, dim), |_| rng.gen_range(-1.0..1.0))
    }

    fn loss_value(
        config: &ModelConfig,
        params: &ModelParameters,
        features: &Array2<f64>,
        targets: &[Label],
        loss_cfg: &LossConfig,
    ) -> f64 {
        let fwd = forward(config, params, &features.view(), targets).unwrap();
        let (breakdown, _) = total_loss(
            &fwd.lattice,
            &fwd.aux_lattices,
            Some(&fwd.ctc_logp),
            Some(&fwd.lm_logits),
            targets,
            loss_cfg,
        )
        .unwrap();
        breakdown.total
    }

    /// Central finite differences over every parameter element; relative
    /// error must stay under `tol` wherever the analytic gradient is
    /// meaningfully nonzero.
    fn check_gradients(loss_cfg: &LossConfig, seed: u64, tol: f64) {
        let config = test_config();
        let mut params = init_parameters(&config, seed).unwrap();
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
        let features = random_features(4, 2, &mut rng);
        let targets = [1, 2];

        let (_, grads) = model_loss(&config, &params, &features.view(), &targets, loss_cfg).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads
            .tensors()
            .into_iter()
            .map(|(name, view)| (name, view.iter().copied().collect()))
            .collect();

        let eps = 1e-5;
        let perturb = |params: &mut ModelParameters, ti: usize, ei: usize, delta: f64| {
            let mut tensors = params.tensors_mut();
            *tensors[ti].1.iter_mut().nth(ei).unwrap() += delta;
        };
        // The auxiliary-lattice loss treats its decoder-side joint input as
        // a constant, so the implemented gradient intentionally omits the
        // loss's true sensitivity to the shared decoder parameters. A raw
        // finite difference of the total loss sees that sensitivity anyway;
        // skip those parameters whenever this loss is active (their
        // stop/flow routing has its own dedicated tests).
        let frozen: &[&str] = if loss_cfg.lambda_aux_trans > 0.0 {
            &["embed", "dec.w_x", "dec.w_h", "dec.b", "joint.w_dec", "joint.b"]
        } else {
            &[]
        };
        let mut checked = 0usize;
        for (ti, (name, grad_elems)) in analytic.iter().enumerate() {
            if frozen.contains(&name.as_str()) {
                continue;
            }
            for (ei, &ga) in grad_elems.iter().enumerate() {
                if ga.abs() <= 1e-8 {
                    continue;
                }
                perturb(&mut params, ti, ei, -eps);
                let f_minus = loss_value(&config, &params, &features, &targets, loss_cfg);
                perturb(&mut params, ti, ei, 2.0 * eps);
                let f_plus = loss_value(&config, &params, &features, &targets, loss_cfg);
                perturb(&mut params, ti, ei, -eps);
                let fd = (f_plus - f_minus) / (2.0 * eps);
                let rel = (fd - ga).abs() / ga.abs().max(fd.abs());
                assert!(
                    rel < tol,
                    "{name}[{ei}]: analytic {ga:.3e}, finite-difference {fd:.3e}, rel {rel:.3e}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} elements exceeded the magnitude floor");
    }

    #[test]
    fn gradients_match_finite_differences_transducer_only() {
        let cfg = LossConfig {
            lambda_trans: 1.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        check_gradients(&cfg, 101, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_ctc_only() {
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 1.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        check_gradients(&cfg, 102, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_aux_only() {
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 1.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        check_gradients(&cfg, 103, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_symm_kl_only() {
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 1.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        check_gradients(&cfg, 104, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_lm_only() {
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 1.0,
            ..Default::default()
        };
        check_gradients(&cfg, 105, 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_all_losses() {
        check_gradients(&LossConfig::default(), 106, 1e-4);
    }

    #[test]
    fn auxiliary_transducer_gradient_stops_at_shared_parameters() {
        let config = ModelConfig {
            aux_layers: vec![1],
            ..test_config()
        };
        let params = init_parameters(&config, 42).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let features = random_features(5, 2, &mut rng);
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 1.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        let (_, grads) = model_loss(&config, &params, &features.view(), &[2, 1], &cfg).unwrap();

        let nonzero = |name: &str, g: &ModelParameters| {
            g.tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.iter().any(|&x| x != 0.0))
                .unwrap()
        };
        // Shared decoder and main-joint parameters see exactly zero.
        for name in [
            "embed", "dec.w_x", "dec.w_h", "dec.b", "joint.w_enc", "joint.w_dec", "joint.b",
            "joint.w_out", "joint.b_out", "ctc.w", "ctc.b", "lm.w", "lm.b",
        ] {
            assert!(!nonzero(name, &grads), "{name} should have an exactly-zero gradient");
        }
        // The encoder above the tap is also out of the auxiliary path.
        assert!(!nonzero("enc1.w", &grads));
        // The auxiliary network and the tapped encoder layer do learn.
        for name in ["aux0.w1", "aux0.w2", "aux.w_out", "aux.b_out", "enc0.w_x"] {
            assert!(nonzero(name, &grads), "{name} should receive gradient");
        }
    }

    #[test]
    fn symmetric_kl_gradient_flows_through_shared_parameters() {
        let config = test_config();
        let params = init_parameters(&config, 43).unwrap();
        let mut rng = StdRng::seed_from_u64(10);
        let features = random_features(4, 2, &mut rng);
        let cfg = LossConfig {
            lambda_trans: 0.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 1.0,
            lambda_lm: 0.0,
            ..Default::default()
        };
        let (_, grads) = model_loss(&config, &params, &features.view(), &[1], &cfg).unwrap();
        let nonzero = |name: &str| {
            grads
                .tensors()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.iter().any(|&x| x != 0.0))
                .unwrap()
        };
        for name in [
            "embed", "dec.w_x", "joint.w_enc", "joint.w_dec", "joint.b", "joint.w_out",
            "aux0.w1", "aux.w_out", "enc0.w_x", "enc1.w",
        ] {
            assert!(nonzero(name), "{name} should receive gradient");
        }
    }
}
