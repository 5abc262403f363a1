//! Log-domain losses over posterior lattices, with analytic gradients.
//!
//! The central object is the [`PosteriorLattice`]: per-frame, per-prefix
//! label log-probabilities produced by a joint network (or built by hand in
//! tests). The transducer loss marginalizes over all monotonic alignments of
//! the target through that lattice; the CTC loss does the same over a
//! blank-extended frame-level lattice. Every loss returns the gradient with
//! respect to its raw log-probability inputs so a model backward pass can
//! consume them directly.
//!
//! Brute-force path enumerations live alongside the dynamic programs and are
//! used by the verification suites as independent oracles.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::math::{log_add, log_sum_exp, log_softmax};
use crate::{Error, Label, Result, BLANK};

/// Per-frame, per-prefix label log-probabilities: shape `(T, U+1, V+1)`.
///
/// Index `(t, u, k)` holds `log P(symbol k | frame t, u labels emitted)`,
/// with `k = 0` reserved for blank. Rows are allowed to outnumber the target
/// by more than one so a single lattice can score many candidate sequences.
#[derive(Debug, Clone)]
pub struct PosteriorLattice {
    logp: Array3<f64>,
}

impl PosteriorLattice {
    /// Wraps a raw log-probability table.
    ///
    /// Entries must be finite or `-inf` (exact zeros are representable);
    /// NaN and `+inf` are rejected. Normalization is checked separately by
    /// [`PosteriorLattice::validate_normalized`] so that tests may perturb
    /// individual entries.
    pub fn new(logp: Array3<f64>) -> Result<Self> {
        let (t_len, u_rows, symbols) = logp.dim();
        if t_len == 0 || u_rows == 0 || symbols < 2 {
            return Err(Error::Contract(format!(
                "lattice must have at least one frame, one row, and two symbols; got ({t_len}, {u_rows}, {symbols})"
            )));
        }
        if logp.iter().any(|&x| x.is_nan() || x == f64::INFINITY) {
            return Err(Error::Numeric(
                "lattice entries must be finite or -inf".into(),
            ));
        }
        Ok(Self { logp })
    }

    /// Draws a normalized random lattice: logits `~ N(0, spread)` pushed
    /// through log-softmax. Used by tests and the verification suites.
    pub fn random<R: Rng>(t_len: usize, u_rows: usize, vocab: u32, spread: f64, rng: &mut R) -> Self {
        let mut logp = Array3::zeros((t_len, u_rows, vocab as usize + 1));
        for t in 0..t_len {
            for u in 0..u_rows {
                let logits: Vec<f64> = (0..=vocab)
                    .map(|_| gaussian(rng) * spread)
                    .collect();
                let row = log_softmax(ndarray::ArrayView1::from(&logits)).expect("finite logits");
                for k in 0..=vocab as usize {
                    logp[(t, u, k)] = row[k];
                }
            }
        }
        Self { logp }
    }

    /// Number of frames `T`.
    pub fn t_len(&self) -> usize {
        self.logp.dim().0
    }

    /// Number of label-context rows (`U + 1` when built for one target).
    pub fn u_rows(&self) -> usize {
        self.logp.dim().1
    }

    /// Label vocabulary size `V` (excluding blank).
    pub fn vocab(&self) -> u32 {
        (self.logp.dim().2 - 1) as u32
    }

    /// `log P(symbol k | frame t, row u)`.
    #[inline]
    pub fn logp(&self, t: usize, u: usize, k: Label) -> f64 {
        self.logp[(t, u, k as usize)]
    }

    /// Read-only view of the underlying table.
    pub fn table(&self) -> &Array3<f64> {
        &self.logp
    }

    /// Checks that every `(t, u)` slice exp-sums to 1 within `tol` and that
    /// no entry exceeds zero by more than `tol`.
    pub fn validate_normalized(&self, tol: f64) -> Result<()> {
        let (t_len, u_rows, symbols) = self.logp.dim();
        for t in 0..t_len {
            for u in 0..u_rows {
                let mut total = 0.0;
                for k in 0..symbols {
                    let lp = self.logp[(t, u, k)];
                    if lp > tol {
                        return Err(Error::Numeric(format!(
                            "lattice entry ({t}, {u}, {k}) is a positive log-probability: {lp}"
                        )));
                    }
                    total += lp.exp();
                }
                if (total - 1.0).abs() > tol {
                    return Err(Error::Numeric(format!(
                        "lattice slice ({t}, {u}) exp-sums to {total}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_labels(y: &[Label], vocab: u32) -> Result<()> {
    for (u, &label) in y.iter().enumerate() {
        if label == BLANK || label > vocab {
            return Err(Error::Contract(format!(
                "label {label} at position {u} is outside 1..={vocab}"
            )));
        }
    }
    Ok(())
}

fn alpha_matrix(lattice: &PosteriorLattice, y: &[Label]) -> Result<Array2<f64>> {
    let t_len = lattice.t_len();
    let u_len = y.len();
    check_labels(y, lattice.vocab())?;
    if lattice.u_rows() < u_len + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} rows, target of length {u_len} needs at least {}",
            lattice.u_rows(),
            u_len + 1
        )));
    }
    let mut alpha = Array2::from_elem((t_len, u_len + 1), f64::NEG_INFINITY);
    alpha[(0, 0)] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_add(acc, alpha[(t - 1, u)] + lattice.logp(t - 1, u, BLANK));
            }
            if u > 0 {
                acc = log_add(acc, alpha[(t, u - 1)] + lattice.logp(t, u - 1, y[u - 1]));
            }
            alpha[(t, u)] = acc;
        }
    }
    Ok(alpha)
}

/// Forward variables of the transducer alignment program.
///
/// `alpha[(t, u)]` is the log-probability of emitting the first `u` labels
/// while consuming frames up to `t` (0-based), landing at cell `(t, u)`.
/// Returns the matrix together with the total sequence log-probability
/// `alpha[(T-1, U)] + log p(blank | T-1, U)`.
pub fn forward_vars(lattice: &PosteriorLattice, y: &[Label]) -> Result<(Array2<f64>, f64)> {
    if lattice.u_rows() != y.len() + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} rows but target length {} requires exactly {}",
            lattice.u_rows(),
            y.len(),
            y.len() + 1
        )));
    }
    let alpha = alpha_matrix(lattice, y)?;
    let t_last = lattice.t_len() - 1;
    let log_prob = alpha[(t_last, y.len())] + lattice.logp(t_last, y.len(), BLANK);
    Ok((alpha, log_prob))
}

/// Backward variables of the transducer alignment program.
///
/// `beta[(t, u)]` is the log-probability of completing the target from cell
/// `(t, u)` onward, including the transition out of `(t, u)` itself.
/// `beta[(0, 0)]` equals the total sequence log-probability.
pub fn backward_vars(lattice: &PosteriorLattice, y: &[Label]) -> Result<(Array2<f64>, f64)> {
    if lattice.u_rows() != y.len() + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} rows but target length {} requires exactly {}",
            lattice.u_rows(),
            y.len(),
            y.len() + 1
        )));
    }
    check_labels(y, lattice.vocab())?;
    let t_len = lattice.t_len();
    let u_len = y.len();
    let mut beta = Array2::from_elem((t_len, u_len + 1), f64::NEG_INFINITY);
    beta[(t_len - 1, u_len)] = lattice.logp(t_len - 1, u_len, BLANK);
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = log_add(acc, beta[(t + 1, u)] + lattice.logp(t, u, BLANK));
            }
            if u < u_len {
                acc = log_add(acc, beta[(t, u + 1)] + lattice.logp(t, u, y[u]));
            }
            beta[(t, u)] = acc;
        }
    }
    let log_prob = beta[(0, 0)];
    Ok((beta, log_prob))
}

/// Log-probability of `y` under a lattice with at least `|y| + 1` rows.
///
/// This is the marginal over all alignments, used by the search oracles and
/// the score upper-bound checks; unlike [`forward_vars`] it does not require
/// the row count to match the target exactly.
pub fn marginal_log_prob(lattice: &PosteriorLattice, y: &[Label]) -> Result<f64> {
    let alpha = alpha_matrix(lattice, y)?;
    let t_last = lattice.t_len() - 1;
    Ok(alpha[(t_last, y.len())] + lattice.logp(t_last, y.len(), BLANK))
}

/// Negative log-likelihood of the target plus its gradient with respect to
/// every lattice log-probability.
///
/// The gradient treats lattice entries as free variables (occupancy weights
/// from the forward/backward pass); normalization constraints are handled by
/// whoever produced the lattice.
pub fn transducer_loss(lattice: &PosteriorLattice, y: &[Label]) -> Result<(f64, Array3<f64>)> {
    let (alpha, log_prob) = forward_vars(lattice, y)?;
    if log_prob == f64::NEG_INFINITY {
        return Err(Error::Numeric(
            "target has zero probability under the lattice".into(),
        ));
    }
    let (beta, _) = backward_vars(lattice, y)?;
    let t_len = lattice.t_len();
    let u_len = y.len();
    let mut grad = Array3::zeros((t_len, u_len + 1, lattice.vocab() as usize + 1));
    for t in 0..t_len {
        for u in 0..=u_len {
            // Blank transition: advance one frame, or finish at (T-1, U).
            let beta_next = if t + 1 < t_len {
                beta[(t + 1, u)]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let occ = alpha[(t, u)] + lattice.logp(t, u, BLANK) + beta_next;
            if occ != f64::NEG_INFINITY {
                grad[(t, u, BLANK as usize)] = -((occ - log_prob).exp());
            }
            if u < u_len {
                let occ = alpha[(t, u)] + lattice.logp(t, u, y[u]) + beta[(t, u + 1)];
                if occ != f64::NEG_INFINITY {
                    grad[(t, u, y[u] as usize)] += -((occ - log_prob).exp());
                }
            }
        }
    }
    Ok((-log_prob, grad))
}

/// Transducer loss by explicit enumeration of all alignments.
///
/// Walks every interleaving of `U` labels and `T` blanks that ends in a
/// blank — there are `C(T+U-1, U)` of them — and log-sums their path scores.
/// Guarded to `T + U <= 14`.
pub fn brute_force_loss(lattice: &PosteriorLattice, y: &[Label]) -> Result<f64> {
    let t_len = lattice.t_len();
    let u_len = y.len();
    if t_len + u_len > 14 {
        return Err(Error::SizeGuard(format!(
            "alignment enumeration supports T + U <= 14, got {}",
            t_len + u_len
        )));
    }
    if lattice.u_rows() != u_len + 1 {
        return Err(Error::Contract(format!(
            "lattice has {} rows but target length {u_len} requires exactly {}",
            lattice.u_rows(),
            u_len + 1
        )));
    }
    check_labels(y, lattice.vocab())?;
    let mut scores = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, score)) = stack.pop() {
        if t == t_len - 1 && u == u_len {
            scores.push(score + lattice.logp(t, u, BLANK));
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, score + lattice.logp(t, u, BLANK)));
        }
        if u < u_len {
            stack.push((t, u + 1, score + lattice.logp(t, u, y[u])));
        }
    }
    Ok(-log_sum_exp(&scores))
}

/// Outcome of the CTC loss: infeasible targets are a result, not an error.
#[derive(Debug, Clone)]
pub struct CtcOutcome {
    /// Negative log-likelihood; `+inf` when the target is infeasible.
    pub loss: f64,
    /// Whether any valid frame alignment of the target exists.
    pub feasible: bool,
    /// Gradient w.r.t. the frame log-probabilities (zeros when infeasible).
    pub grad: Array2<f64>,
}

fn ctc_extended(y: &[Label]) -> Vec<Label> {
    let mut z = Vec::with_capacity(2 * y.len() + 1);
    z.push(BLANK);
    for &label in y {
        z.push(label);
        z.push(BLANK);
    }
    z
}

/// CTC negative log-likelihood over per-frame label posteriors.
///
/// `frame_logp` has shape `(T, V+1)` with blank at column 0. A target that
/// cannot be aligned (too few frames for its length and repeats) yields an
/// infeasible [`CtcOutcome`] rather than an error.
pub fn ctc_loss(frame_logp: &Array2<f64>, y: &[Label]) -> Result<CtcOutcome> {
    let (t_len, symbols) = frame_logp.dim();
    if t_len == 0 || symbols < 2 {
        return Err(Error::Contract(format!(
            "frame posteriors need at least one frame and two symbols, got ({t_len}, {symbols})"
        )));
    }
    if frame_logp.iter().any(|&x| x.is_nan() || x == f64::INFINITY) {
        return Err(Error::Numeric(
            "frame log-probabilities must be finite or -inf".into(),
        ));
    }
    let vocab = (symbols - 1) as u32;
    check_labels(y, vocab)?;

    let z = ctc_extended(y);
    let s_len = z.len();
    let lp = |t: usize, k: Label| frame_logp[(t, k as usize)];

    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[(0, 0)] = lp(0, z[0]);
    if s_len > 1 {
        alpha[(0, 1)] = lp(0, z[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1, s - 1)]);
            }
            if s >= 2 && z[s] != BLANK && z[s] != z[s - 2] {
                acc = log_add(acc, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = acc + lp(t, z[s]);
        }
    }
    let mut log_prob = alpha[(t_len - 1, s_len - 1)];
    if s_len > 1 {
        log_prob = log_add(log_prob, alpha[(t_len - 1, s_len - 2)]);
    }
    if log_prob == f64::NEG_INFINITY {
        return Ok(CtcOutcome {
            loss: f64::INFINITY,
            feasible: false,
            grad: Array2::zeros((t_len, symbols)),
        });
    }

    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    beta[(t_len - 1, s_len - 1)] = lp(t_len - 1, z[s_len - 1]);
    if s_len > 1 {
        beta[(t_len - 1, s_len - 2)] = lp(t_len - 1, z[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1, s)];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1, s + 1)]);
            }
            if s + 2 < s_len && z[s + 2] != BLANK && z[s + 2] != z[s] {
                acc = log_add(acc, beta[(t + 1, s + 2)]);
            }
            beta[(t, s)] = acc + lp(t, z[s]);
        }
    }

    // Occupancy: alpha and beta both include the emission at (t, s), so the
    // path mass through the cell is alpha + beta - lp.
    let mut grad = Array2::zeros((t_len, symbols));
    for t in 0..t_len {
        let mut per_symbol = vec![f64::NEG_INFINITY; symbols];
        for s in 0..s_len {
            let occ = alpha[(t, s)] + beta[(t, s)] - lp(t, z[s]);
            let k = z[s] as usize;
            per_symbol[k] = log_add(per_symbol[k], occ);
        }
        for k in 0..symbols {
            if per_symbol[k] != f64::NEG_INFINITY {
                grad[(t, k)] = -((per_symbol[k] - log_prob).exp());
            }
        }
    }
    Ok(CtcOutcome {
        loss: -log_prob,
        feasible: true,
        grad,
    })
}

/// CTC loss by enumerating every length-`T` symbol path and collapsing it.
///
/// Guarded to `(V+1)^T <= 2_000_000`. Returns `+inf` for infeasible targets,
/// mirroring [`ctc_loss`].
pub fn brute_force_ctc_loss(frame_logp: &Array2<f64>, y: &[Label]) -> Result<f64> {
    let (t_len, symbols) = frame_logp.dim();
    let paths = (symbols as f64).powi(t_len as i32);
    if paths > 2_000_000.0 {
        return Err(Error::SizeGuard(format!(
            "path enumeration supports (V+1)^T <= 2e6, got {paths:.0}"
        )));
    }
    check_labels(y, (symbols - 1) as u32)?;
    let mut scores = Vec::new();
    let mut path = vec![0 as Label; t_len];
    loop {
        // Collapse: drop consecutive repeats, then blanks.
        let mut collapsed: Vec<Label> = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev {
                if k != BLANK {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
        }
        if collapsed == y {
            let score: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| frame_logp[(t, k as usize)])
                .sum();
            scores.push(score);
        }
        // Next path in odometer order.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return Ok(-log_sum_exp(&scores));
            }
            path[pos] += 1;
            if (path[pos] as usize) < symbols {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Mean transducer loss over a set of auxiliary lattices.
///
/// Each lattice is scored against the same target; gradients come back
/// per-lattice, already scaled by the mean.
pub fn aux_transducer_loss(
    aux_lattices: &[PosteriorLattice],
    y: &[Label],
) -> Result<(f64, Vec<Array3<f64>>)> {
    if aux_lattices.is_empty() {
        return Err(Error::Contract(
            "auxiliary transducer loss needs at least one lattice".into(),
        ));
    }
    let scale = 1.0 / aux_lattices.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(aux_lattices.len());
    for lattice in aux_lattices {
        let (loss, mut grad) = transducer_loss(lattice, y)?;
        total += scale * loss;
        grad.mapv_inplace(|g| g * scale);
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Symmetric KL divergence between the main lattice and each auxiliary
/// lattice, averaged over frames and label-context rows.
///
/// The row average runs over the rows whose decoder context is a proper
/// prefix of the target (`u = 0..U-1`); for an empty target the single start
/// row is used. Gradients flow to both the main and auxiliary entries.
pub fn symm_kl_loss(
    main: &PosteriorLattice,
    aux_lattices: &[PosteriorLattice],
) -> Result<(f64, Array3<f64>, Vec<Array3<f64>>)> {
    if aux_lattices.is_empty() {
        return Err(Error::Contract(
            "symmetric KL needs at least one auxiliary lattice".into(),
        ));
    }
    let dim = main.table().dim();
    for (i, aux) in aux_lattices.iter().enumerate() {
        if aux.table().dim() != dim {
            return Err(Error::Contract(format!(
                "auxiliary lattice {i} has shape {:?}, main lattice has {:?}",
                aux.table().dim(),
                dim
            )));
        }
    }
    let (t_len, u_rows, symbols) = dim;
    let u_len = u_rows - 1;
    let rows: Vec<usize> = if u_len == 0 { vec![0] } else { (0..u_len).collect() };
    let norm = 1.0 / (t_len as f64 * rows.len() as f64);

    let mut loss = 0.0;
    let mut grad_main = Array3::zeros(dim);
    let mut grads_aux = vec![Array3::zeros(dim); aux_lattices.len()];
    for (l, aux) in aux_lattices.iter().enumerate() {
        for t in 0..t_len {
            for &u in &rows {
                for k in 0..symbols {
                    let p_log = main.table()[(t, u, k)];
                    let q_log = aux.table()[(t, u, k)];
                    let p = p_log.exp();
                    let q = q_log.exp();
                    loss += norm * 0.5 * (p * (p_log - q_log) + q * (q_log - p_log));
                    grad_main[(t, u, k)] += norm * 0.5 * (p * (p_log - q_log + 1.0) - q);
                    grads_aux[l][(t, u, k)] += norm * 0.5 * (q * (q_log - p_log + 1.0) - p);
                }
            }
        }
    }
    Ok((loss, grad_main, grads_aux))
}

/// Label-smoothed cross-entropy over next-label logits.
///
/// `dec_logits` has shape `(U, V+1)`: row `u` predicts target `y[u]` from the
/// context of the preceding labels. The smoothing mass `epsilon` is spread
/// uniformly over the `V` real labels (blank is never a target and receives
/// none). An empty target yields zero loss and an empty gradient.
pub fn lm_loss(
    dec_logits: &Array2<f64>,
    y: &[Label],
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    let (rows, symbols) = dec_logits.dim();
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {epsilon}"
        )));
    }
    if rows != y.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows for a target of length {}",
            y.len()
        )));
    }
    if y.is_empty() {
        return Ok((0.0, Array2::zeros((0, symbols))));
    }
    let vocab = (symbols - 1) as u32;
    check_labels(y, vocab)?;
    let scale = 1.0 / y.len() as f64;
    let uniform = epsilon / vocab as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, symbols));
    for (u, &label) in y.iter().enumerate() {
        let lp = log_softmax(dec_logits.row(u))?;
        for k in 1..symbols {
            let target = if k == label as usize {
                1.0 - epsilon + uniform
            } else {
                uniform
            };
            loss -= scale * target * lp[k];
            grad[(u, k)] -= scale * target;
        }
        // d(-sum_k q_k log_softmax_k)/d logits = softmax - q.
        for k in 0..symbols {
            grad[(u, k)] += scale * lp[k].exp();
        }
    }
    Ok((loss, grad))
}

/// Loss-combination weights. A weight of zero disables its component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_trans: f64,
    pub lambda_ctc: f64,
    pub lambda_aux_trans: f64,
    pub lambda_symm_kl: f64,
    pub lambda_lm: f64,
    /// Label-smoothing mass for the LM loss.
    pub lm_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_trans: 1.0,
            lambda_ctc: 0.5,
            lambda_aux_trans: 0.3,
            lambda_symm_kl: 0.2,
            lambda_lm: 0.4,
            lm_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    /// Main transducer loss only; all auxiliary terms disabled.
    pub fn vanilla() -> Self {
        Self {
            lambda_trans: 1.0,
            lambda_ctc: 0.0,
            lambda_aux_trans: 0.0,
            lambda_symm_kl: 0.0,
            lambda_lm: 0.0,
            lm_smoothing: 0.1,
        }
    }
}

/// Per-component loss values for one utterance (or a batch mean).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub trans: f64,
    pub ctc: f64,
    pub aux_trans: f64,
    pub symm_kl: f64,
    pub lm: f64,
    pub total: f64,
    /// False when the CTC target could not be aligned; the CTC term is then
    /// excluded from `total` and `ctc` holds `+inf`.
    pub ctc_feasible: bool,
}

/// Weighted upstream gradients for a scorer backward pass.
///
/// Auxiliary-lattice gradients are split by routing: `aux_stopped` comes
/// from the auxiliary transducer loss and must not reach the shared decoder
/// or main joint parameters; `aux_flowing` comes from the symmetric KL and
/// flows everywhere.
#[derive(Debug, Clone)]
pub struct LatticeGradients {
    pub main: Array3<f64>,
    pub aux_stopped: Vec<Array3<f64>>,
    pub aux_flowing: Vec<Array3<f64>>,
    pub ctc: Option<Array2<f64>>,
    pub lm: Option<Array2<f64>>,
}

/// Weighted combination of every enabled loss, with gradients routed for a
/// model backward pass.
///
/// `ctc_frame_logp` and `lm_logits` are only required when their weights are
/// nonzero, and auxiliary lattices only when an auxiliary weight is nonzero.
/// An infeasible CTC target zeroes that component's contribution instead of
/// failing.
pub fn total_loss(
    main: &PosteriorLattice,
    aux_lattices: &[PosteriorLattice],
    ctc_frame_logp: Option<&Array2<f64>>,
    lm_logits: Option<&Array2<f64>>,
    y: &[Label],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LatticeGradients)> {
    let dim = main.table().dim();
    let mut breakdown = LossBreakdown {
        ctc_feasible: true,
        ..Default::default()
    };
    let mut grads = LatticeGradients {
        main: Array3::zeros(dim),
        aux_stopped: Vec::new(),
        aux_flowing: Vec::new(),
        ctc: None,
        lm: None,
    };

    if cfg.lambda_trans != 0.0 {
        let (loss, grad) = transducer_loss(main, y)?;
        breakdown.trans = loss;
        breakdown.total += cfg.lambda_trans * loss;
        grads.main.scaled_add(cfg.lambda_trans, &grad);
    }

    if cfg.lambda_ctc != 0.0 {
        let frame_logp = ctc_frame_logp.ok_or_else(|| {
            Error::Contract("lambda_ctc is nonzero but no frame posteriors were given".into())
        })?;
        let outcome = ctc_loss(frame_logp, y)?;
        breakdown.ctc = outcome.loss;
        breakdown.ctc_feasible = outcome.feasible;
        if outcome.feasible {
            breakdown.total += cfg.lambda_ctc * outcome.loss;
            let mut grad = outcome.grad;
            grad.mapv_inplace(|g| g * cfg.lambda_ctc);
            grads.ctc = Some(grad);
        }
    }

    if cfg.lambda_aux_trans != 0.0 {
        if aux_lattices.is_empty() {
            return Err(Error::Contract(
                "lambda_aux_trans is nonzero but no auxiliary lattices were given".into(),
            ));
        }
        let (loss, aux_grads) = aux_transducer_loss(aux_lattices, y)?;
        breakdown.aux_trans = loss;
        breakdown.total += cfg.lambda_aux_trans * loss;
        grads.aux_stopped = aux_grads
            .into_iter()
            .map(|mut g| {
                g.mapv_inplace(|x| x * cfg.lambda_aux_trans);
                g
            })
            .collect();
    }

    if cfg.lambda_symm_kl != 0.0 {
        if aux_lattices.is_empty() {
            return Err(Error::Contract(
                "lambda_symm_kl is nonzero but no auxiliary lattices were given".into(),
            ));
        }
        let (loss, grad_main, aux_grads) = symm_kl_loss(main, aux_lattices)?;
        breakdown.symm_kl = loss;
        breakdown.total += cfg.lambda_symm_kl * loss;
        grads.main.scaled_add(cfg.lambda_symm_kl, &grad_main);
        grads.aux_flowing = aux_grads
            .into_iter()
            .map(|mut g| {
                g.mapv_inplace(|x| x * cfg.lambda_symm_kl);
                g
            })
            .collect();
    }

    if cfg.lambda_lm != 0.0 {
        let logits = lm_logits.ok_or_else(|| {
            Error::Contract("lambda_lm is nonzero but no decoder logits were given".into())
        })?;
        let (loss, mut grad) = lm_loss(logits, y, cfg.lm_smoothing)?;
        breakdown.lm = loss;
        breakdown.total += cfg.lambda_lm * loss;
        grad.mapv_inplace(|g| g * cfg.lambda_lm);
        grads.lm = Some(grad);
    }

    Ok((breakdown, grads))
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout obvious.
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Standard normal draw from the crate's seeded RNG stream.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    gaussian(rng)
}
