//! Plain-text utterance datasets.
//!
//! The on-disk format is line-oriented and whitespace-tolerant on read:
//!
//! ```text
//! <count> <input_dim> <vocab>
//! <T> <U>            # per utterance
//! <f64> ... <f64>    # T feature rows, input_dim values each
//! <label> ... <label>  # U labels in 1..=vocab (blank line when U = 0)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit. Readers treat the
//! file as a token stream — any whitespace separates tokens — but reject
//! missing fields, out-of-range labels, non-finite values, and trailing
//! data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Label, Result};

/// One utterance: a `T x input_dim` feature matrix and its label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Array2<f64>,
    pub labels: Vec<Label>,
}

impl Utterance {
    pub fn t_len(&self) -> usize {
        self.features.nrows()
    }

    pub fn u_len(&self) -> usize {
        self.labels.len()
    }
}

/// An utterance collection with a fixed feature width and label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub vocab: Label,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(input_dim: usize, vocab: Label, utterances: Vec<Utterance>) -> Result<Self> {
        let ds = Self {
            input_dim,
            vocab,
            utterances,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Format("dataset input_dim must be at least 1".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Format("dataset vocabulary must be at least 1".into()));
        }
        for (i, utt) in self.utterances.iter().enumerate() {
            if utt.t_len() == 0 {
                return Err(Error::Format(format!("utterance {i} has no frames")));
            }
            if utt.features.ncols() != self.input_dim {
                return Err(Error::Format(format!(
                    "utterance {i} has {} feature columns, dataset declares {}",
                    utt.features.ncols(),
                    self.input_dim
                )));
            }
            if utt.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "utterance {i} contains a non-finite feature value"
                )));
            }
            if let Some(&bad) = utt.labels.iter().find(|&&l| l == 0 || l > self.vocab) {
                return Err(Error::Format(format!(
                    "utterance {i} contains label {bad} outside 1..={}",
                    self.vocab
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        write_dataset(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_dataset(BufReader::new(File::open(path)?))
    }
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    writeln!(w, "{} {} {}", ds.len(), ds.input_dim, ds.vocab)?;
    for utt in &ds.utterances {
        writeln!(w, "{} {}", utt.t_len(), utt.u_len())?;
        for row in utt.features.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        let labels: Vec<String> = utt.labels.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{}", labels.join(" "))?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<&str> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("dataset ends before {what}")))
    };
    let parse_usize = |what: &str, tok: &str| -> Result<usize> {
        tok.parse()
            .map_err(|_| Error::Format(format!("bad {what}: {tok:?}")))
    };

    let count = parse_usize("utterance count", next("utterance count")?)?;
    let input_dim = parse_usize("input_dim", next("input_dim")?)?;
    let vocab: Label = next("vocab")?
        .parse()
        .map_err(|_| Error::Format("bad vocab".into()))?;

    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let t_len = parse_usize("frame count", next("frame count")?)?;
        let u_len = parse_usize("label count", next("label count")?)?;
        let mut features = Array2::zeros((t_len, input_dim));
        for t in 0..t_len {
            for d in 0..input_dim {
                let tok = next("feature value")?;
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad feature value {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "utterance {i} frame {t} has non-finite feature {tok:?}"
                    )));
                }
                features[(t, d)] = v;
            }
        }
        let mut labels = Vec::with_capacity(u_len);
        for _ in 0..u_len {
            let tok = next("label")?;
            let l: Label = tok
                .parse()
                .map_err(|_| Error::Format(format!("bad label {tok:?}")))?;
            labels.push(l);
        }
        utterances.push(Utterance { features, labels });
    }
    if let Some(extra) = tokens.next() {
        return Err(Error::Format(format!(
            "unexpected trailing data starting at {extra:?}"
        )));
    }
    Dataset::new(input_dim, vocab, utterances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn sample() -> Dataset {
        Dataset::new(
            2,
            3,
            vec![
                Utterance {
                    features: arr2(&[[0.1, -0.25], [1.0 / 3.0, 2e-17]]),
                    labels: vec![1, 3],
                },
                Utterance {
                    features: arr2(&[[-1e300, 4.9e-324]]),
                    labels: vec![],
                },
            ],
        )
        .unwrap()
    }

    fn round_trip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_dataset(&mut buf, ds).unwrap();
        read_dataset(buf.as_slice()).unwrap()
    }

    #[test]
    fn write_read_is_bit_exact() {
        let ds = sample();
        let back = round_trip(&ds);
        assert_eq!(back.input_dim, ds.input_dim);
        assert_eq!(back.vocab, ds.vocab);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.utterances.iter().zip(&back.utterances) {
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.features.iter().zip(b.features.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let bad = Dataset {
            input_dim: 1,
            vocab: 2,
            utterances: vec![Utterance {
                features: arr2(&[[0.0]]),
                labels: vec![3],
            }],
        };
        assert!(bad.validate().is_err());
        let blank = Dataset {
            input_dim: 1,
            vocab: 2,
            utterances: vec![Utterance {
                features: arr2(&[[0.0]]),
                labels: vec![0],
            }],
        };
        assert!(blank.validate().is_err());
    }

    #[test]
    fn rejects_truncated_input() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sample()).unwrap();
        // Cut at the final separator so the last token is missing outright
        // (trimming digits off a number could still parse).
        let cut_at = buf.iter().rposition(|&b| b == b' ').unwrap();
        let cut = &buf[..cut_at];
        assert!(matches!(read_dataset(cut), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &sample()).unwrap();
        buf.extend_from_slice(b"\n7\n");
        assert!(matches!(read_dataset(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_finite_features() {
        assert!(matches!(
            read_dataset("1 1 1\n1 0\nNaN\n\n".as_bytes()),
            Err(Error::Format(_))
        ));
        let bad = Dataset {
            input_dim: 1,
            vocab: 1,
            utterances: vec![Utterance {
                features: arr2(&[[f64::INFINITY]]),
                labels: vec![],
            }],
        };
        let mut buf = Vec::new();
        assert!(write_dataset(&mut buf, &bad).is_err());
    }

    #[test]
    fn rejects_zero_frame_utterances() {
        assert!(matches!(
            read_dataset("1 1 1\n0 0\n\n\n".as_bytes()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn arbitrary_datasets_round_trip(
            raw in prop::collection::vec(
                (1usize..4, prop::collection::vec(1u32..4, 0..4)),
                1..4,
            ),
            values in prop::collection::vec(-1e12f64..1e12, 24),
        ) {
            let input_dim = 2;
            let mut at = 0usize;
            let utterances: Vec<Utterance> = raw
                .into_iter()
                .map(|(t_len, labels)| {
                    let features = Array2::from_shape_fn((t_len, input_dim), |_| {
                        let v = values[at % values.len()];
                        at += 1;
                        v
                    });
                    Utterance { features, labels }
                })
                .collect();
            let ds = Dataset::new(input_dim, 3, utterances).unwrap();
            let back = round_trip(&ds);
            prop_assert_eq!(&back, &ds);
        }
    }
}
