//! Forward evaluation: encoder stack, label decoder, joint network, and the
//! full activation bundle consumed by training.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::{DecoderState, EncLayerParams, ModelConfig, ModelParameters};
use crate::losses::{check_labels, PosteriorLattice};
use crate::math::log_softmax;
use crate::search::SearchScorer;
use crate::{Error, Label, Result};

/// Validates a feature matrix against the configured input width.
fn check_features(config: &ModelConfig, features: &ArrayView2<f64>) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Contract("feature matrix has zero frames".into()));
    }
    if features.ncols() != config.input_dim {
        return Err(Error::Contract(format!(
            "feature matrix has {} columns, model expects {}",
            features.ncols(),
            config.input_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("feature matrix contains non-finite values".into()));
    }
    Ok(())
}

/// Runs the encoder stack over `features` and returns every activation
/// level: index 0 is the input itself, index `l` the output of layer `l`
/// (1-based), so the frame encodings are the last entry.
pub fn encode(
    config: &ModelConfig,
    params: &ModelParameters,
    features: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    check_features(config, features)?;
    let mut acts = Vec::with_capacity(config.enc_layers.len() + 1);
    acts.push(features.to_owned());
    for layer in &params.enc {
        let x = acts.last().unwrap();
        let out = match layer {
            EncLayerParams::Linear { w, b } => x.dot(w) + b,
            EncLayerParams::TanhRnn { w_x, w_h, b } => {
                let hidden = b.len();
                let pre_x = x.dot(w_x);
                let mut out = Array2::zeros((x.nrows(), hidden));
                let mut state = Array1::zeros(hidden);
                for t in 0..x.nrows() {
                    let pre = &pre_x.row(t) + &state.dot(w_h) + b;
                    state = pre.mapv(f64::tanh);
                    out.row_mut(t).assign(&state);
                }
                out
            }
        };
        acts.push(out);
    }
    Ok(acts)
}

/// Fresh decoder state (nothing consumed yet). Feed it [`decode_step`] with
/// `None` to obtain the output for the empty label prefix.
pub fn start_state(params: &ModelParameters) -> DecoderState {
    DecoderState {
        h: Array1::zeros(params.dec_b.len()),
    }
}

/// Advances the label decoder by one symbol. `None` consumes the start
/// symbol (used exactly once, from [`start_state`]); labels must be in
/// `1..=V` — blank is never fed back.
pub fn decode_step(
    params: &ModelParameters,
    label: Option<Label>,
    state: &DecoderState,
) -> Result<(Array1<f64>, DecoderState)> {
    let row = embedding_row(params, label)?;
    if state.h.len() != params.dec_b.len() {
        return Err(Error::Contract(format!(
            "decoder state has width {}, expected {}",
            state.h.len(),
            params.dec_b.len()
        )));
    }
    let embedded = params.embed.row(row);
    let pre = &embedded.dot(&params.dec_wx) + &state.h.dot(&params.dec_wh) + &params.dec_b;
    let h = pre.mapv(f64::tanh);
    Ok((h.clone(), DecoderState { h }))
}

fn embedding_row(params: &ModelParameters, label: Option<Label>) -> Result<usize> {
    match label {
        None => Ok(0),
        Some(0) => Err(Error::Contract("blank must not be fed to the decoder".into())),
        Some(l) if (l as usize) < params.embed.nrows() => Ok(l as usize),
        Some(l) => Err(Error::Contract(format!(
            "label {l} outside vocabulary 1..={}",
            params.embed.nrows() - 1
        ))),
    }
}

/// Advances many decoder states in one pass; the per-step work becomes two
/// matrix products instead of `B` vector products.
pub fn batch_decode_step(
    params: &ModelParameters,
    labels: &[Label],
    states: &[&DecoderState],
) -> Result<Vec<(Array1<f64>, DecoderState)>> {
    if labels.len() != states.len() {
        return Err(Error::Contract(format!(
            "batch decode got {} labels for {} states",
            labels.len(),
            states.len()
        )));
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let hidden = params.dec_b.len();
    let mut embedded = Array2::zeros((labels.len(), params.embed.ncols()));
    let mut state_mat = Array2::zeros((labels.len(), hidden));
    for (i, (&label, state)) in labels.iter().zip(states).enumerate() {
        let row = embedding_row(params, Some(label))?;
        embedded.row_mut(i).assign(&params.embed.row(row));
        if state.h.len() != hidden {
            return Err(Error::Contract(format!(
                "decoder state has width {}, expected {hidden}",
                state.h.len()
            )));
        }
        state_mat.row_mut(i).assign(&state.h);
    }
    let pre = embedded.dot(&params.dec_wx) + state_mat.dot(&params.dec_wh) + &params.dec_b;
    Ok((0..labels.len())
        .map(|i| {
            let h = pre.row(i).mapv(f64::tanh);
            (h.clone(), DecoderState { h })
        })
        .collect())
}

/// Joint network for a single (frame encoding, decoder output) pair:
/// returns unnormalized logits over `V + 1` symbols, blank first.
pub fn joint(
    params: &ModelParameters,
    enc_t: &ArrayView1<f64>,
    dec_u: &ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if enc_t.len() != params.joint_wenc.nrows() || dec_u.len() != params.joint_wdec.nrows() {
        return Err(Error::Contract(format!(
            "joint got widths ({}, {}), expected ({}, {})",
            enc_t.len(),
            dec_u.len(),
            params.joint_wenc.nrows(),
            params.joint_wdec.nrows()
        )));
    }
    let pre = &enc_t.dot(&params.joint_wenc) + &dec_u.dot(&params.joint_wdec) + &params.joint_b;
    let z = pre.mapv(f64::tanh);
    Ok(z.dot(&params.joint_wout) + &params.joint_bout)
}

/// Everything one training step needs from the forward pass.
///
/// Shapes: `T` frames, target length `U`, `J` joint width, `S = V + 1`
/// symbols.
pub struct Forward {
    /// Encoder activations; `acts[0]` is the input, `acts[l]` layer `l`'s
    /// output.
    pub acts: Vec<Array2<f64>>,
    /// Embedded decoder inputs, `(U + 1, E)`: start symbol then targets.
    pub dec_embedded: Array2<f64>,
    /// Decoder outputs, `(U + 1, H)`: row `u` has consumed `u` labels.
    pub dec_out: Array2<f64>,
    /// Joint tanh activations, `(T, U + 1, J)`.
    pub joint_z: Array3<f64>,
    /// Normalized joint posteriors.
    pub lattice: PosteriorLattice,
    /// Per tapped layer: first auxiliary MLP activation, `(T, J)`.
    pub aux_mlp_h1: Vec<Array2<f64>>,
    /// Per tapped layer: auxiliary MLP output (pre-join), `(T, J)`.
    pub aux_mlp_out: Vec<Array2<f64>>,
    /// Per tapped layer: auxiliary joint tanh activations, `(T, U + 1, J)`.
    pub aux_z: Vec<Array3<f64>>,
    /// Per tapped layer: normalized auxiliary posteriors.
    pub aux_lattices: Vec<PosteriorLattice>,
    /// Frame-classifier log-probabilities, `(T, S)`.
    pub ctc_logp: Array2<f64>,
    /// Next-label head logits (unnormalized), `(U, S)`.
    pub lm_logits: Array2<f64>,
}

/// Log-softmax over the last axis of a flattened `(rows, S)` logits block,
/// reshaped back to `(T, U + 1, S)`.
fn lattice_from_logits(
    t_len: usize,
    u_rows: usize,
    logits: Array2<f64>,
) -> Result<PosteriorLattice> {
    let symbols = logits.ncols();
    let mut logp = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        logp.row_mut(i).assign(&log_softmax(row)?);
    }
    let table = logp
        .into_shape_with_order((t_len, u_rows, symbols))
        .expect("row count is t_len * u_rows");
    PosteriorLattice::new(table)
}

/// Full forward pass for one utterance: encoder, teacher-forced decoder,
/// main and auxiliary joints, frame classifier, and next-label head.
pub fn forward(
    config: &ModelConfig,
    params: &ModelParameters,
    features: &ArrayView2<f64>,
    targets: &[Label],
) -> Result<Forward> {
    check_labels(targets, config.vocab as Label)?;
    let acts = encode(config, params, features)?;
    let enc = acts.last().unwrap();
    let t_len = enc.nrows();
    let u_len = targets.len();
    let u_rows = u_len + 1;
    let symbols = config.symbols();
    let joint_dim = config.joint_dim;

    // Teacher-forced decoder: start symbol, then each target label.
    let mut dec_embedded = Array2::zeros((u_rows, config.dec_embed_dim));
    let mut dec_out = Array2::zeros((u_rows, config.dec_hidden_dim));
    let mut state = start_state(params);
    for u in 0..u_rows {
        let label = if u == 0 { None } else { Some(targets[u - 1]) };
        dec_embedded
            .row_mut(u)
            .assign(&params.embed.row(embedding_row(params, label)?));
        let (out, next) = decode_step(params, label, &state)?;
        dec_out.row_mut(u).assign(&out);
        state = next;
    }

    // Main joint over the whole (T, U + 1) grid: project both sides once,
    // then one big matrix product for the output layer.
    let enc_proj = enc.dot(&params.joint_wenc);
    let dec_proj = dec_out.dot(&params.joint_wdec);
    let mut joint_z = Array3::zeros((t_len, u_rows, joint_dim));
    for t in 0..t_len {
        for u in 0..u_rows {
            let pre = &enc_proj.row(t) + &dec_proj.row(u) + &params.joint_b;
            joint_z.slice_mut(s![t, u, ..]).assign(&pre.mapv(f64::tanh));
        }
    }
    let z_flat = joint_z
        .view()
        .into_shape_with_order((t_len * u_rows, joint_dim))
        .expect("owned array is contiguous");
    let logits = z_flat.dot(&params.joint_wout) + &params.joint_bout;
    let lattice = lattice_from_logits(t_len, u_rows, logits)?;

    // Auxiliary joints: per tapped layer a small MLP on the tapped frames,
    // joined against the same decoder projection and inner bias, through a
    // shared auxiliary output layer.
    let mut aux_mlp_h1 = Vec::with_capacity(config.aux_layers.len());
    let mut aux_mlp_out = Vec::with_capacity(config.aux_layers.len());
    let mut aux_z = Vec::with_capacity(config.aux_layers.len());
    let mut aux_lattices = Vec::with_capacity(config.aux_layers.len());
    for (i, &layer) in config.aux_layers.iter().enumerate() {
        let tap = &acts[layer];
        let mlp = &params.aux_mlps[i];
        let h1 = (tap.dot(&mlp.w1) + &mlp.b1).mapv(f64::tanh);
        let out = h1.dot(&mlp.w2) + &mlp.b2;
        let mut z = Array3::zeros((t_len, u_rows, joint_dim));
        for t in 0..t_len {
            for u in 0..u_rows {
                let pre = &out.row(t) + &dec_proj.row(u) + &params.joint_b;
                z.slice_mut(s![t, u, ..]).assign(&pre.mapv(f64::tanh));
            }
        }
        let z_flat = z
            .view()
            .into_shape_with_order((t_len * u_rows, joint_dim))
            .expect("owned array is contiguous");
        let logits = z_flat.dot(&params.aux_wout) + &params.aux_bout;
        aux_lattices.push(lattice_from_logits(t_len, u_rows, logits)?);
        aux_mlp_h1.push(h1);
        aux_mlp_out.push(out);
        aux_z.push(z);
    }

    // Frame classifier head.
    let ctc_logits = enc.dot(&params.ctc_w) + &params.ctc_b;
    let mut ctc_logp = Array2::zeros((t_len, symbols));
    for t in 0..t_len {
        ctc_logp.row_mut(t).assign(&log_softmax(ctc_logits.row(t))?);
    }

    // Next-label head: row u predicts targets[u] from the decoder output
    // that has consumed u labels.
    let lm_logits = dec_out.slice(s![..u_len, ..]).dot(&params.lm_w) + &params.lm_b;

    Ok(Forward {
        acts,
        dec_embedded,
        dec_out,
        joint_z,
        lattice,
        aux_mlp_h1,
        aux_mlp_out,
        aux_z,
        aux_lattices,
        ctc_logp,
        lm_logits,
    })
}

/// Convenience wrapper returning just the posterior lattices.
pub fn compute_lattice(
    config: &ModelConfig,
    params: &ModelParameters,
    features: &ArrayView2<f64>,
    targets: &[Label],
) -> Result<(PosteriorLattice, Vec<PosteriorLattice>)> {
    let fwd = forward(config, params, features, targets)?;
    Ok((fwd.lattice, fwd.aux_lattices))
}

/// Search-facing scorer for one utterance: the encoder runs (and is
/// projected into joint space) once up front, after which each score query
/// costs one small tanh layer.
pub struct UtteranceScorer<'a> {
    params: &'a ModelParameters,
    enc_proj: Array2<f64>,
    vocab: u32,
}

impl<'a> UtteranceScorer<'a> {
    pub fn new(
        config: &ModelConfig,
        params: &'a ModelParameters,
        features: &ArrayView2<f64>,
    ) -> Result<Self> {
        let acts = encode(config, params, features)?;
        let enc = acts.last().unwrap();
        Ok(Self {
            params,
            enc_proj: enc.dot(&params.joint_wenc),
            vocab: config.vocab,
        })
    }
}

impl SearchScorer for UtteranceScorer<'_> {
    type State = DecoderState;

    fn t_len(&self) -> usize {
        self.enc_proj.nrows()
    }

    fn vocab(&self) -> u32 {
        self.vocab
    }

    fn start(&self) -> (Array1<f64>, DecoderState) {
        decode_step(self.params, None, &start_state(self.params)).expect("start step cannot fail")
    }

    fn step(&self, label: Label, state: &DecoderState) -> (Array1<f64>, DecoderState) {
        decode_step(self.params, Some(label), state).expect("search feeds valid labels")
    }

    fn batch_step(
        &self,
        labels: &[Label],
        states: &[&DecoderState],
    ) -> Vec<(Array1<f64>, DecoderState)> {
        batch_decode_step(self.params, labels, states).expect("search feeds valid labels")
    }

    fn log_probs(&self, t: usize, dec_out: &Array1<f64>) -> Array1<f64> {
        let pre = &self.enc_proj.row(t) + &dec_out.dot(&self.params.joint_wdec) + &self.params.joint_b;
        let z = pre.mapv(f64::tanh);
        let logits = z.dot(&self.params.joint_wout) + &self.params.joint_bout;
        log_softmax(logits.view()).expect("finite logits")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{init_parameters, LayerSpec};
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            enc_layers: vec![LayerSpec::TanhRnn { hidden_dim: 5 }, LayerSpec::Linear { out_dim: 4 }],
            dec_embed_dim: 4,
            dec_hidden_dim: 6,
            joint_dim: 7,
            vocab: 3,
            aux_layers: vec![1],
        }
    }

    fn random_features(t_len: usize, dim: usize, rng: &mut StdRng) -> Array2<f64> {
        Array2::from_shape_fn((t_len, dim), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_layer_is_affine() {
        let config = ModelConfig {
            input_dim: 2,
            enc_layers: vec![LayerSpec::Linear { out_dim: 2 }],
            dec_embed_dim: 2,
            dec_hidden_dim: 2,
            joint_dim: 2,
            vocab: 2,
            aux_layers: vec![],
        };
        let mut params = init_parameters(&config, 1).unwrap();
        if let EncLayerParams::Linear { w, b } = &mut params.enc[0] {
            w.assign(&array![[1.0, 2.0], [3.0, 4.0]]);
            b.assign(&array![0.5, -0.5]);
        }
        let features = array![[1.0, 1.0], [0.0, 2.0]];
        let acts = encode(&config, &params, &features.view()).unwrap();
        let out = acts.last().unwrap();
        assert_eq!(out[(0, 0)], 4.5);
        assert_eq!(out[(0, 1)], 5.5);
        assert_eq!(out[(1, 0)], 6.5);
        assert_eq!(out[(1, 1)], 7.5);
    }

    #[test]
    fn recurrent_layer_matches_hand_unrolled_update() {
        let config = ModelConfig {
            input_dim: 1,
            enc_layers: vec![LayerSpec::TanhRnn { hidden_dim: 2 }],
            dec_embed_dim: 2,
            dec_hidden_dim: 2,
            joint_dim: 2,
            vocab: 2,
            aux_layers: vec![],
        };
        let mut params = init_parameters(&config, 7).unwrap();
        let (w_x, w_h, b) = (
            array![[0.3, -0.2]],
            array![[0.1, 0.4], [-0.3, 0.2]],
            array![0.05, -0.05],
        );
        if let EncLayerParams::TanhRnn { w_x: wx, w_h: wh, b: bb } = &mut params.enc[0] {
            wx.assign(&w_x);
            wh.assign(&w_h);
            bb.assign(&b);
        }
        let features = array![[1.0], [-0.5]];
        let acts = encode(&config, &params, &features.view()).unwrap();
        let out = acts.last().unwrap();

        let s1 = [
            (1.0 * w_x[(0, 0)] + b[0]).tanh(),
            (1.0 * w_x[(0, 1)] + b[1]).tanh(),
        ];
        let s2 = [
            (-0.5 * w_x[(0, 0)] + s1[0] * w_h[(0, 0)] + s1[1] * w_h[(1, 0)] + b[0]).tanh(),
            (-0.5 * w_x[(0, 1)] + s1[0] * w_h[(0, 1)] + s1[1] * w_h[(1, 1)] + b[1]).tanh(),
        ];
        assert!((out[(0, 0)] - s1[0]).abs() < 1e-15);
        assert!((out[(0, 1)] - s1[1]).abs() < 1e-15);
        assert!((out[(1, 0)] - s2[0]).abs() < 1e-15);
        assert!((out[(1, 1)] - s2[1]).abs() < 1e-15);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let config = tiny_config();
        let params = init_parameters(&config, 3).unwrap();
        let wrong_width = Array2::<f64>::zeros((2, 2));
        assert!(encode(&config, &params, &wrong_width.view()).is_err());
        let mut nan = Array2::<f64>::zeros((2, 3));
        nan[(1, 1)] = f64::NAN;
        assert!(encode(&config, &params, &nan.view()).is_err());
    }

    #[test]
    fn decode_step_rejects_blank_and_overflow_labels() {
        let config = tiny_config();
        let params = init_parameters(&config, 3).unwrap();
        let state = start_state(&params);
        assert!(decode_step(&params, Some(0), &state).is_err());
        assert!(decode_step(&params, Some(4), &state).is_err());
        assert!(decode_step(&params, Some(3), &state).is_ok());
    }

    #[test]
    fn batch_decode_step_matches_sequential_steps() {
        let config = tiny_config();
        let params = init_parameters(&config, 11).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let (_, s0) = decode_step(&params, None, &start_state(&params)).unwrap();
        let states: Vec<DecoderState> = (0..4)
            .map(|_| {
                let mut s = s0.clone();
                for _ in 0..rng.gen_range(0..3) {
                    let label = rng.gen_range(1..=3);
                    s = decode_step(&params, Some(label), &s).unwrap().1;
                }
                s
            })
            .collect();
        let labels: Vec<Label> = (0..4).map(|_| rng.gen_range(1..=3)).collect();
        let refs: Vec<&DecoderState> = states.iter().collect();
        let batched = batch_decode_step(&params, &labels, &refs).unwrap();
        for (i, (out, next)) in batched.iter().enumerate() {
            let (out_seq, next_seq) = decode_step(&params, Some(labels[i]), &states[i]).unwrap();
            assert!(out.iter().zip(out_seq.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
            assert!(next.approx_eq(&next_seq, 1e-15));
        }
    }

    #[test]
    fn forward_lattice_rows_are_normalized() {
        let config = tiny_config();
        let params = init_parameters(&config, 17).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let features = random_features(4, 3, &mut rng);
        let fwd = forward(&config, &params, &features.view(), &[2, 1, 3]).unwrap();
        fwd.lattice.validate_normalized(1e-9).unwrap();
        for aux in &fwd.aux_lattices {
            aux.validate_normalized(1e-9).unwrap();
        }
        for t in 0..4 {
            let total: f64 = fwd.ctc_logp.row(t).mapv(f64::exp).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert_eq!(fwd.lm_logits.nrows(), 3);
        assert_eq!(fwd.dec_out.nrows(), 4);
        assert_eq!(fwd.joint_z.dim(), (4, 4, 7));
    }

    #[test]
    fn forward_joint_matches_pairwise_joint_calls() {
        let config = tiny_config();
        let params = init_parameters(&config, 23).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let features = random_features(3, 3, &mut rng);
        let fwd = forward(&config, &params, &features.view(), &[1, 2]).unwrap();
        let enc = fwd.acts.last().unwrap();
        for t in 0..3 {
            for u in 0..3 {
                let logits = joint(&params, &enc.row(t), &fwd.dec_out.row(u)).unwrap();
                let lp = log_softmax(logits.view()).unwrap();
                for k in 0..config.symbols() {
                    assert!((lp[k] - fwd.lattice.logp(t, u, k as Label)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn utterance_scorer_agrees_with_training_lattice() {
        let config = tiny_config();
        let params = init_parameters(&config, 31).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let features = random_features(5, 3, &mut rng);
        let targets = [3, 1];
        let fwd = forward(&config, &params, &features.view(), &targets).unwrap();
        let scorer = UtteranceScorer::new(&config, &params, &features.view()).unwrap();
        assert_eq!(scorer.t_len(), 5);
        assert_eq!(scorer.vocab(), 3);

        let (dec0, mut state) = scorer.start();
        let mut dec = dec0;
        for u in 0..=targets.len() {
            for t in 0..5 {
                let lp = scorer.log_probs(t, &dec);
                for k in 0..config.symbols() {
                    assert!((lp[k] - fwd.lattice.logp(t, u, k as Label)).abs() < 1e-12);
                }
            }
            if u < targets.len() {
                let (next_dec, next_state) = scorer.step(targets[u], &state);
                dec = next_dec;
                state = next_state;
            }
        }
    }
}
