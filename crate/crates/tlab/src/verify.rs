//! Self-check suites: brute-force loss oracles, finite-difference gradient
//! checks, and exhaustive search comparisons on tiny instances.
//!
//! Each suite draws its own seeded instances, so a single call is a complete
//! verdict. The `verify` subcommand prints the reports; the acceptance tests
//! assert on them with the thresholds below.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::losses::{
    backward_vars, brute_force_ctc_loss, brute_force_loss, ctc_loss, forward_vars,
    marginal_log_prob, standard_normal, transducer_loss, LossConfig, PosteriorLattice,
};
use crate::math::{log_softmax, log_sum_exp};
use crate::scorer::{init_parameters, model_loss, LayerSpec, ModelConfig};
use crate::search::{decode, BeamConfig, LatticeScorer, Strategy};
use crate::{Label, Result};

/// Largest allowed gap between a dynamic-programming loss and its
/// enumeration oracle.
pub const LOSS_ORACLE_TOL: f64 = 1e-10;
/// Largest allowed relative error between analytic and finite-difference
/// gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Anti-diagonal cuts of the forward/backward tables must reproduce the
/// total log-probability this tightly.
pub const DIAGONAL_TOL: f64 = 1e-9;
/// Search scores may exceed the true sequence marginal by at most this.
pub const SCORE_BOUND_TOL: f64 = 1e-9;
/// Fraction of tiny instances on which each beam strategy must return the
/// exact highest-marginal sequence.
pub const AGREEMENT_FLOOR: f64 = 0.95;

/// Outcome of [`loss_oracle_suite`].
#[derive(Debug, Clone, Copy)]
pub struct LossOracleReport {
    pub instances: usize,
    /// Worst |DP − enumeration| over the transducer instances.
    pub max_transducer_dev: f64,
    /// Worst |DP − enumeration| over the frame-alignment instances;
    /// disagreement on feasibility counts as infinite.
    pub max_ctc_dev: f64,
}

impl LossOracleReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_transducer_dev.max(self.max_ctc_dev)
    }

    pub fn passes(&self) -> bool {
        self.max_deviation() < LOSS_ORACLE_TOL
    }
}

/// Compares both dynamic-programming losses against exhaustive alignment
/// enumeration on random normalized instances with `T ≤ 5`, `U ≤ 4`,
/// `V ≤ 4`.
pub fn loss_oracle_suite(instances: usize, seed: u64) -> Result<LossOracleReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_transducer_dev: f64 = 0.0;
    let mut max_ctc_dev: f64 = 0.0;
    for _ in 0..instances {
        let t_len = rng.gen_range(1..=5usize);
        let u_len = rng.gen_range(0..=4usize);
        let vocab = rng.gen_range(1..=4u32);
        let y: Vec<Label> = (0..u_len).map(|_| rng.gen_range(1..=vocab)).collect();

        let lattice = PosteriorLattice::random(t_len, u_len + 1, vocab, 1.5, &mut rng);
        let (loss, _) = transducer_loss(&lattice, &y)?;
        let oracle = brute_force_loss(&lattice, &y)?;
        max_transducer_dev = max_transducer_dev.max((loss - oracle).abs());

        let frames = random_frame_logp(t_len, vocab, 1.5, &mut rng)?;
        let outcome = ctc_loss(&frames, &y)?;
        let ctc_oracle = brute_force_ctc_loss(&frames, &y)?;
        let dev = if outcome.loss.is_infinite() || ctc_oracle.is_infinite() {
            if outcome.loss.is_infinite() && ctc_oracle.is_infinite() {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (outcome.loss - ctc_oracle).abs()
        };
        max_ctc_dev = max_ctc_dev.max(dev);
    }
    Ok(LossOracleReport {
        instances,
        max_transducer_dev,
        max_ctc_dev,
    })
}

/// Random normalized per-frame label posteriors, shape `(T, V+1)`.
fn random_frame_logp<R: Rng>(
    t_len: usize,
    vocab: u32,
    spread: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let width = vocab as usize + 1;
    let mut out = Array2::zeros((t_len, width));
    for t in 0..t_len {
        let logits: Array1<f64> =
            Array1::from_iter((0..width).map(|_| spread * standard_normal(rng)));
        out.row_mut(t).assign(&log_softmax(logits.view())?);
    }
    Ok(out)
}

/// Outcome of [`diagonal_suite`].
#[derive(Debug, Clone, Copy)]
pub struct DiagonalReport {
    pub instances: usize,
    /// Worst |cut − logP| over every anti-diagonal of every instance.
    pub max_residual: f64,
}

impl DiagonalReport {
    pub fn passes(&self) -> bool {
        self.max_residual < DIAGONAL_TOL
    }
}

/// Checks that summing `exp(alpha + beta)` along any anti-diagonal of the
/// alignment lattice reproduces the total sequence probability: every
/// alignment crosses each cut exactly once.
pub fn diagonal_suite(instances: usize, seed: u64) -> Result<DiagonalReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_residual: f64 = 0.0;
    for _ in 0..instances {
        let t_len = rng.gen_range(1..=5usize);
        let u_len = rng.gen_range(0..=4usize);
        let vocab = rng.gen_range(1..=4u32);
        let y: Vec<Label> = (0..u_len).map(|_| rng.gen_range(1..=vocab)).collect();
        let lattice = PosteriorLattice::random(t_len, u_len + 1, vocab, 1.3, &mut rng);
        let (alpha, logp) = forward_vars(&lattice, &y)?;
        let (beta, _) = backward_vars(&lattice, &y)?;
        for n in 1..=(t_len + u_len) {
            let mut terms = Vec::new();
            for u in 0..=u_len {
                let t1 = n as isize - u as isize; // 1-based frame index
                if t1 >= 1 && t1 <= t_len as isize {
                    terms.push(alpha[((t1 - 1) as usize, u)] + beta[((t1 - 1) as usize, u)]);
                }
            }
            max_residual = max_residual.max((log_sum_exp(&terms) - logp).abs());
        }
    }
    Ok(DiagonalReport {
        instances,
        max_residual,
    })
}

/// Outcome of [`grad_suite`].
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub instances: usize,
    /// Worst relative error between analytic and central-difference
    /// gradients across all checked parameters.
    pub max_rel_error: f64,
    /// Parameter entries compared (those with non-negligible magnitude).
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

/// Small architecture exercising every parameter family: two encoder layer
/// kinds, both auxiliary taps, and all heads.
fn grad_check_config() -> ModelConfig {
    ModelConfig {
        input_dim: 2,
        enc_layers: vec![
            LayerSpec::TanhRnn { hidden_dim: 4 },
            LayerSpec::Linear { out_dim: 3 },
        ],
        dec_embed_dim: 3,
        dec_hidden_dim: 4,
        joint_dim: 5,
        vocab: 2,
        aux_layers: vec![1, 2],
    }
}

/// Loss mixtures cycled across gradient-check instances: each term alone,
/// then everything together.
fn grad_check_losses() -> Vec<LossConfig> {
    let off = LossConfig {
        lambda_trans: 0.0,
        lambda_ctc: 0.0,
        lambda_aux_trans: 0.0,
        lambda_symm_kl: 0.0,
        lambda_lm: 0.0,
        ..LossConfig::default()
    };
    vec![
        LossConfig::vanilla(),
        LossConfig { lambda_ctc: 0.5, ..off },
        LossConfig { lambda_aux_trans: 0.3, ..off },
        LossConfig { lambda_symm_kl: 0.2, ..off },
        LossConfig { lambda_lm: 0.4, ..off },
        LossConfig::default(),
    ]
}

/// Verifies full-model analytic gradients against central finite
/// differences (`ε = 1e-5`) on seeded small instances, cycling through the
/// loss mixtures of [`grad_check_losses`].
///
/// When the auxiliary transducer term is active, parameters it deliberately
/// treats as constants (label embedding, decoder, and the joint projections
/// it shares) are excluded: a finite difference of the total loss sees the
/// real sensitivity through them, which the training gradient intentionally
/// omits. Dedicated routing tests pin that behaviour exactly.
pub fn grad_suite(instances: usize, seed: u64) -> Result<GradReport> {
    let config = grad_check_config();
    let mixtures = grad_check_losses();
    let eps = 1e-5;
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0usize;
    for i in 0..instances {
        let mut rng = StdRng::seed_from_u64(seed.wrapping_add(i as u64));
        let loss_cfg = &mixtures[i % mixtures.len()];
        let t_len = rng.gen_range(3..=5usize);
        let u_len = rng.gen_range(1..=3usize);
        let features = Array2::from_shape_fn((t_len, config.input_dim), |_| {
            standard_normal(&mut rng)
        });
        let targets: Vec<Label> = (0..u_len).map(|_| rng.gen_range(1..=config.vocab)).collect();
        let params = init_parameters(&config, seed.wrapping_add(1000 + i as u64))?;

        let (_, grads) = model_loss(&config, &params, &features.view(), &targets, loss_cfg)?;
        let frozen: &[&str] = if loss_cfg.lambda_aux_trans > 0.0 {
            &["embed", "dec.w_x", "dec.w_h", "dec.b", "joint.w_dec", "joint.b"]
        } else {
            &[]
        };

        let names: Vec<(String, usize)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect();
        for (ti, (name, len)) in names.iter().enumerate() {
            if frozen.contains(&name.as_str()) {
                continue;
            }
            for e in 0..*len {
                let eval = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    *p.tensors_mut()[ti].1.iter_mut().nth(e).expect("entry in range") += delta;
                    let (breakdown, _) =
                        model_loss(&config, &p, &features.view(), &targets, loss_cfg)?;
                    Ok(breakdown.total)
                };
                let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                let analytic = *grads.tensors()[ti].1.iter().nth(e).expect("entry in range");
                let scale = analytic.abs().max(fd.abs());
                if scale > 1e-8 {
                    checked += 1;
                    max_rel_error = max_rel_error.max((analytic - fd).abs() / scale);
                }
            }
        }
    }
    Ok(GradReport {
        instances,
        max_rel_error,
        checked,
    })
}

/// Outcome of [`search_oracle_suite`].
#[derive(Debug, Clone)]
pub struct SearchOracleReport {
    pub instances: usize,
    /// Per beam strategy: instances where the top hypothesis equals the
    /// exhaustive highest-marginal sequence.
    pub agreements: BTreeMap<&'static str, usize>,
    /// Hypothesis scores compared against their sequence marginals,
    /// across every strategy including greedy.
    pub bound_checks: usize,
    /// Scores exceeding their marginal by more than [`SCORE_BOUND_TOL`].
    pub bound_violations: usize,
    /// Worst `score − marginal` observed (negative when all scores sit
    /// below their marginals).
    pub max_overshoot: f64,
}

impl SearchOracleReport {
    /// Lowest agreement rate across the beam strategies.
    pub fn min_agreement_rate(&self) -> f64 {
        self.agreements
            .values()
            .map(|&a| a as f64 / self.instances as f64)
            .fold(1.0, f64::min)
    }

    pub fn passes(&self) -> bool {
        self.bound_violations == 0 && self.min_agreement_rate() >= AGREEMENT_FLOOR
    }
}

/// A normalized random lattice whose last row carries no label mass, so
/// every sequence longer than `u_cap` has probability exactly zero and the
/// finite sequence space can be enumerated.
fn closed_random_lattice<R: Rng>(
    t_len: usize,
    u_cap: usize,
    vocab: u32,
    spread: f64,
    rng: &mut R,
) -> Result<PosteriorLattice> {
    let width = vocab as usize + 1;
    let mut logp = Array3::zeros((t_len, u_cap + 1, width));
    for t in 0..t_len {
        for u in 0..u_cap {
            let logits: Array1<f64> =
                Array1::from_iter((0..width).map(|_| spread * standard_normal(rng)));
            logp.slice_mut(ndarray::s![t, u, ..])
                .assign(&log_softmax(logits.view())?);
        }
        logp[(t, u_cap, 0)] = 0.0;
        for k in 1..width {
            logp[(t, u_cap, k)] = f64::NEG_INFINITY;
        }
    }
    PosteriorLattice::new(logp)
}

/// All label sequences of length `0..=u_cap`, ranked by marginal
/// log-probability with the searches' tie order (shorter first, then
/// lexicographic), returning the winner.
fn exhaustive_argmax(lattice: &PosteriorLattice, u_cap: usize) -> Result<(Vec<Label>, f64)> {
    let vocab = lattice.vocab();
    let mut best: Option<(Vec<Label>, f64)> = None;
    let mut stack: Vec<Vec<Label>> = vec![Vec::new()];
    while let Some(seq) = stack.pop() {
        let score = marginal_log_prob(lattice, &seq)?;
        let better = match &best {
            None => true,
            Some((bs, bscore)) => {
                score > *bscore
                    || (score == *bscore
                        && (seq.len(), &seq) < (bs.len(), bs))
            }
        };
        if better {
            best = Some((seq.clone(), score));
        }
        if seq.len() < u_cap {
            // Reverse push order so exploration is lexicographic.
            for k in (1..=vocab).rev() {
                let mut child = seq.clone();
                child.push(k);
                stack.push(child);
            }
        }
    }
    Ok(best.expect("the empty sequence is always scored"))
}

/// Beam strategies measured for exact-argmax agreement.
const BEAM_STRATEGIES: [Strategy; 4] =
    [Strategy::Default, Strategy::Alsd, Strategy::Tsd, Strategy::Nsc];

/// Compares every search strategy against exhaustive enumeration on random
/// closed lattices (`T = 4`, `V = 3`, sequences up to three labels): beam
/// searches must return the exact highest-marginal sequence nearly always,
/// and no returned hypothesis — greedy included — may score above its own
/// sequence marginal.
pub fn search_oracle_suite(instances: usize, seed: u64) -> Result<SearchOracleReport> {
    let t_len = 4;
    let u_cap = 3;
    let vocab = 3;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut agreements: BTreeMap<&'static str, usize> =
        BEAM_STRATEGIES.iter().map(|s| (s.name(), 0)).collect();
    let mut bound_checks = 0usize;
    let mut bound_violations = 0usize;
    let mut max_overshoot = f64::NEG_INFINITY;

    let cfg = BeamConfig {
        beam: 8,
        nbest: 5,
        u_max: u_cap,
        max_sym_exp: 4,
        n_step: 3,
        auto_n_step: 1,
        prefix_alpha: 4,
    };

    for _ in 0..instances {
        let lattice = closed_random_lattice(t_len, u_cap, vocab, 2.5, &mut rng)?;
        let scorer = LatticeScorer::new(&lattice);
        let (oracle_labels, _) = exhaustive_argmax(&lattice, u_cap)?;

        for strategy in [
            Strategy::Greedy,
            Strategy::Default,
            Strategy::Alsd,
            Strategy::Tsd,
            Strategy::Nsc,
        ] {
            let report = decode(strategy, &scorer, &cfg, None)?;
            for hyp in &report.nbest {
                let marginal = marginal_log_prob(&lattice, &hyp.labels)?;
                let overshoot = hyp.score - marginal;
                bound_checks += 1;
                max_overshoot = max_overshoot.max(overshoot);
                if overshoot > SCORE_BOUND_TOL {
                    bound_violations += 1;
                }
            }
            if strategy != Strategy::Greedy
                && report.nbest.first().map(|h| h.labels.as_slice())
                    == Some(oracle_labels.as_slice())
            {
                *agreements.get_mut(strategy.name()).expect("strategy registered") += 1;
            }
        }
    }
    Ok(SearchOracleReport {
        instances,
        agreements,
        bound_checks,
        bound_violations,
        max_overshoot,
    })
}
