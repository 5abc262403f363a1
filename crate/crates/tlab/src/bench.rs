//! Decoding metrics and instrumentation: edit-distance error rates,
//! real-time factor, expansion-count tables, and accuracy-vs-speed sweeps
//! over the beam-search strategies.
//!
//! Wall-clock numbers are machine-dependent, so tests and comparisons lean
//! on the deterministic counters ([`DecodeReport::joint_calls`],
//! [`DecodeReport::decoder_calls`]); RTF columns are for reports only.
//! Timing passes run strictly serially — parallel decoding would contend
//! for cores and skew every measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::Dataset;
use crate::scorer::{ModelConfig, ModelParameters, UtteranceScorer};
use crate::search::{decode, merge_histograms, BeamConfig, DecodeReport, Strategy};
use crate::{Error, Label, Result};

/// Levenshtein alignment totals between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditSummary {
    /// Minimal number of edits; always `substitutions + insertions + deletions`.
    pub distance: usize,
    pub substitutions: usize,
    /// Hypothesis symbols with no reference counterpart.
    pub insertions: usize,
    /// Reference symbols missing from the hypothesis.
    pub deletions: usize,
}

/// Unit-cost Levenshtein distance with an operation breakdown.
///
/// Ties between alignments of equal cost are resolved the same way every
/// time (match/substitute, then delete, then insert), so the breakdown is
/// deterministic even when several minimal alignments exist.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditSummary {
    let n = reference.len();
    let m = hypothesis.len();
    // dp[i][j] = summary for aligning reference[..i] with hypothesis[..j].
    let mut dp = vec![EditSummary::default(); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for j in 1..=m {
        dp[idx(0, j)] = EditSummary {
            distance: j,
            insertions: j,
            ..EditSummary::default()
        };
    }
    for i in 1..=n {
        dp[idx(i, 0)] = EditSummary {
            distance: i,
            deletions: i,
            ..EditSummary::default()
        };
    }
    for i in 1..=n {
        for j in 1..=m {
            let mut best = dp[idx(i - 1, j - 1)];
            if reference[i - 1] != hypothesis[j - 1] {
                best.distance += 1;
                best.substitutions += 1;
            }
            let del = dp[idx(i - 1, j)];
            if del.distance + 1 < best.distance {
                best = del;
                best.distance += 1;
                best.deletions += 1;
            }
            let ins = dp[idx(i, j - 1)];
            if ins.distance + 1 < best.distance {
                best = ins;
                best.distance += 1;
                best.insertions += 1;
            }
            dp[idx(i, j)] = best;
        }
    }
    dp[idx(n, m)]
}

/// Symbol error rate: total edit distance over total reference length,
/// with an empty reference counting as length one.
pub fn error_rate(total_distance: usize, total_reference: usize) -> f64 {
    total_distance as f64 / total_reference.max(1) as f64
}

/// Real-time-factor summary over repeated timing runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RtfSummary {
    /// One RTF value per timing run, in run order.
    pub per_run: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
}

/// Converts per-run wall times into RTF values against the audio duration
/// implied by `frames * frame_duration_s`.
pub fn measure_rtf(run_wall_s: &[f64], frames: usize, frame_duration_s: f64) -> Result<RtfSummary> {
    if run_wall_s.is_empty() {
        return Err(Error::Contract("RTF needs at least one timing run".into()));
    }
    if frames == 0 {
        return Err(Error::Contract("RTF over zero audio frames is undefined".into()));
    }
    if !(frame_duration_s > 0.0 && frame_duration_s.is_finite()) {
        return Err(Error::Config(format!(
            "frame duration must be positive, got {frame_duration_s}"
        )));
    }
    let duration = frames as f64 * frame_duration_s;
    let per_run: Vec<f64> = run_wall_s.iter().map(|w| w / duration).collect();
    let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
    let var = per_run.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / per_run.len() as f64;
    Ok(RtfSummary {
        per_run,
        mean,
        std: var.sqrt(),
    })
}

/// One row of the expansion-count table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionRow {
    /// `"1"`, `"2"`, or `"3+"`.
    pub bucket: &'static str,
    pub percent: f64,
}

/// Aggregates per-decode expansion histograms into percentage shares of
/// emitting timesteps with 1, 2, and 3-or-more label emissions. Timesteps
/// emitting nothing are excluded from the denominator; with no emissions
/// at all, every share is zero.
pub fn expansion_stats<'a, I>(histograms: I) -> [ExpansionRow; 3]
where
    I: IntoIterator<Item = &'a BTreeMap<usize, u64>>,
{
    let mut merged = BTreeMap::new();
    for h in histograms {
        merge_histograms(&mut merged, h);
    }
    let count = |n: usize| merged.get(&n).copied().unwrap_or(0);
    let total: u64 = merged.iter().filter(|&(&n, _)| n >= 1).map(|(_, &c)| c).sum();
    let three_plus = total - count(1) - count(2);
    let pct = |c: u64| {
        if total == 0 {
            0.0
        } else {
            100.0 * c as f64 / total as f64
        }
    };
    [
        ExpansionRow { bucket: "1", percent: pct(count(1)) },
        ExpansionRow { bucket: "2", percent: pct(count(2)) },
        ExpansionRow { bucket: "3+", percent: pct(three_plus) },
    ]
}

/// Renders the expansion table as CSV with two-decimal percentages.
pub fn expansion_csv(rows: &[ExpansionRow; 3]) -> String {
    let mut out = String::from("n,percent\n");
    for row in rows {
        writeln!(out, "{},{:.2}", row.bucket, row.percent).expect("string writes cannot fail");
    }
    out
}

/// A strategy, the parameter grid to vary, and the measurement protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub strategy: Strategy,
    /// Values for the strategy's speed knob; see [`SweepSpec::param_name`].
    pub grid: Vec<usize>,
    /// Beam width held fixed across the grid (ignored when the grid varies
    /// the beam itself).
    pub beam: usize,
    /// Timing runs per grid point.
    pub repetitions: usize,
    pub frame_duration_s: f64,
}

impl SweepSpec {
    /// The conventional grid per strategy: output-length cap 25/50/100 for
    /// the length-synchronous search, 2/3/4 expansion rounds for the
    /// time-synchronous search, 1/2/3 steps for the constrained search,
    /// and beam widths 1/2/5/10 for the strategies without a second knob.
    pub fn standard(strategy: Strategy, repetitions: usize) -> Self {
        let grid = match strategy {
            Strategy::Alsd => vec![25, 50, 100],
            Strategy::Tsd => vec![2, 3, 4],
            Strategy::Nsc => vec![1, 2, 3],
            Strategy::Greedy | Strategy::Default => vec![1, 2, 5, 10],
        };
        Self {
            strategy,
            grid,
            beam: 5,
            repetitions,
            frame_duration_s: 0.01,
        }
    }

    /// Name of the varied parameter, as written in report columns.
    pub fn param_name(&self) -> &'static str {
        match self.strategy {
            Strategy::Alsd => "u_max",
            Strategy::Tsd => "max_sym_exp",
            Strategy::Nsc => "n_step",
            Strategy::Greedy | Strategy::Default => "beam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("sweep grid must not be empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("sweep needs at least one repetition".into()));
        }
        if !(self.frame_duration_s > 0.0 && self.frame_duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "frame duration must be positive, got {}",
                self.frame_duration_s
            )));
        }
        Ok(())
    }

    fn beam_config(&self, value: usize) -> BeamConfig {
        let mut cfg = BeamConfig {
            beam: self.beam,
            nbest: 1,
            ..BeamConfig::default()
        };
        match self.strategy {
            Strategy::Alsd => cfg.u_max = value,
            Strategy::Tsd => cfg.max_sym_exp = value,
            Strategy::Nsc => cfg.n_step = value,
            Strategy::Greedy | Strategy::Default => cfg.beam = value,
        }
        cfg
    }
}

/// One grid point's aggregate measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: &'static str,
    pub param_name: &'static str,
    pub param_value: usize,
    pub beam: usize,
    /// Label error rate of the best hypothesis against the references.
    pub cer: f64,
    pub rtf_mean: f64,
    pub rtf_std: f64,
    /// Joint evaluations over one full pass of the dataset.
    pub joint_calls: u64,
    pub decoder_calls: u64,
    /// Expansion shares of the best hypotheses, buckets 1 / 2 / 3-or-more.
    pub expansion: [ExpansionRow; 3],
}

/// Decodes the whole dataset at every grid point and measures accuracy,
/// call counts, and timing. Every pass runs serially so the RTF numbers
/// are not skewed by core contention; all columns except the RTF pair are
/// deterministic for fixed inputs.
pub fn sweep(
    config: &ModelConfig,
    params: &ModelParameters,
    data: &Dataset,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    data.validate()?;
    let mut rows = Vec::with_capacity(spec.grid.len());
    for &value in &spec.grid {
        let cfg = spec.beam_config(value);
        cfg.validate()?;

        let mut total_frames = 0usize;
        let mut total_distance = 0usize;
        let mut total_reference = 0usize;
        let mut joint_calls = 0u64;
        let mut decoder_calls = 0u64;
        let mut histograms: Vec<BTreeMap<usize, u64>> = Vec::new();
        let mut per_run_wall = Vec::with_capacity(spec.repetitions);
        for rep in 0..spec.repetitions {
            let started = Instant::now();
            for utt in &data.utterances {
                let scorer = UtteranceScorer::new(config, params, &utt.features.view())?;
                let report = decode(spec.strategy, &scorer, &cfg, None)?;
                if rep == 0 {
                    total_frames += utt.t_len();
                    let best: &[Label] = report
                        .nbest
                        .first()
                        .map_or(&[], |s| s.labels.as_slice());
                    total_distance += edit_distance(&utt.labels, best).distance;
                    total_reference += utt.labels.len();
                    joint_calls += report.joint_calls;
                    decoder_calls += report.decoder_calls;
                    histograms.push(report.expansion_histogram);
                }
            }
            per_run_wall.push(started.elapsed().as_secs_f64());
        }
        let rtf = measure_rtf(&per_run_wall, total_frames, spec.frame_duration_s)?;
        rows.push(SweepRow {
            strategy: spec.strategy.name(),
            param_name: spec.param_name(),
            param_value: value,
            beam: cfg.beam,
            cer: error_rate(total_distance, total_reference),
            rtf_mean: rtf.mean,
            rtf_std: rtf.std,
            joint_calls,
            decoder_calls,
            expansion: expansion_stats(histograms.iter()),
        });
    }
    Ok(rows)
}

/// Renders sweep rows as CSV. The two RTF columns are the only
/// machine-dependent ones; everything else is reproducible byte for byte.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "strategy,param_name,param_value,beam,cer,rtf_mean,rtf_std,joint_calls,decoder_calls,exp1_pct,exp2_pct,exp3plus_pct\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.2},{:.2},{:.2}",
            r.strategy,
            r.param_name,
            r.param_value,
            r.beam,
            r.cer,
            r.rtf_mean,
            r.rtf_std,
            r.joint_calls,
            r.decoder_calls,
            r.expansion[0].percent,
            r.expansion[1].percent,
            r.expansion[2].percent,
        )
        .expect("string writes cannot fail");
    }
    out
}

/// Convenience: expansion shares of a batch of decode reports.
pub fn report_expansion_stats(reports: &[DecodeReport]) -> [ExpansionRow; 3] {
    expansion_stats(reports.iter().map(|r| &r.expansion_histogram))
}
