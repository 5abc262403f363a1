//! Run-configuration files: line-oriented `key = value` entries grouped
//! under `[model]`, `[train]`, `[decode]`, and `[bench]` section headers.
//! Blank lines and `#` comments are ignored. Unknown sections, unknown
//! keys, and duplicate keys are errors — a typo must never silently fall
//! back to a default. Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use tlab::{Error, Result};

const SECTIONS: [&str; 4] = ["model", "train", "decode", "bench"];

/// Parsed configuration file, before any typing of the values.
#[derive(Debug, Default)]
pub struct FileConfig {
    sections: BTreeMap<String, Vec<(String, String)>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!(
                        "line {lineno}: unknown section [{name}]; expected one of {SECTIONS:?}"
                    )));
                }
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {lineno}: expected `key = value`, got {line:?}"
                )));
            };
            let Some(section) = current.as_ref() else {
                return Err(Error::Config(format!(
                    "line {lineno}: {:?} appears before any [section] header",
                    key.trim()
                )));
            };
            let entries = sections.get_mut(section).expect("section registered");
            let key = key.trim().to_string();
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!(
                    "line {lineno}: duplicate key {key:?} in [{section}]"
                )));
            }
            entries.push((key, value.trim().to_string()));
        }
        Ok(Self { sections })
    }

    /// Typed view of one section; an absent section acts as empty.
    pub fn section(&self, name: &str) -> Section<'_> {
        let entries = self
            .sections
            .get(name)
            .map(|v| v.iter().map(|(k, val)| (k.as_str(), val.as_str())).collect())
            .unwrap_or_default();
        Section {
            name: name.to_string(),
            entries,
        }
    }

    /// Whether the file has a `[model]` section.
    pub fn has_model(&self) -> bool {
        self.sections.contains_key("model")
    }

    /// The `[model]` section re-serialized as bare `key = value` lines, for
    /// the model-config parser (which checks completeness itself).
    pub fn model_text(&self) -> String {
        let mut out = String::new();
        if let Some(entries) = self.sections.get("model") {
            for (k, v) in entries {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
        }
        out
    }
}

/// One section's entries with typed, consuming accessors. Call
/// [`Section::finish`] after reading everything the command understands;
/// leftovers are unknown keys and fail loudly.
pub struct Section<'a> {
    name: String,
    entries: BTreeMap<&'a str, &'a str>,
}

impl Section<'_> {
    /// Removes and parses `key`; `Ok(None)` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!(
                    "bad value {raw:?} for {key:?} in [{}]",
                    self.name
                ))
            }),
        }
    }

    /// Like [`Section::take`], but the literal `none` maps to
    /// `Some(None)` — for optional numeric settings that can be switched
    /// off in the file.
    pub fn take_or_none<T: FromStr>(&mut self, key: &str) -> Result<Option<Option<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some("none") => Ok(Some(None)),
            Some(raw) => raw.parse::<T>().map(|v| Some(Some(v))).map_err(|_| {
                Error::Config(format!(
                    "bad value {raw:?} for {key:?} in [{}]",
                    self.name
                ))
            }),
        }
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(str::to_string)
    }

    /// Errors on any key the command did not consume.
    pub fn finish(self) -> Result<()> {
        if let Some((key, _)) = self.entries.into_iter().next() {
            return Err(Error::Config(format!(
                "unknown key {key:?} in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_overrides_parse() {
        let cfg = FileConfig::parse(
            "# run settings\n[train]\nepochs = 12\nlr = 0.01\n\n[decode]\nstrategy = alsd\n",
        )
        .unwrap();
        let mut train = cfg.section("train");
        assert_eq!(train.take::<usize>("epochs").unwrap(), Some(12));
        assert_eq!(train.take::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(train.take::<u64>("seed").unwrap(), None);
        train.finish().unwrap();
        let mut dec = cfg.section("decode");
        assert_eq!(dec.take_string("strategy").as_deref(), Some("alsd"));
        dec.finish().unwrap();
        // Absent section behaves as empty.
        cfg.section("bench").finish().unwrap();
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(FileConfig::parse("[swarm]\nx = 1\n").is_err());
        assert!(FileConfig::parse("epochs = 3\n").is_err());
        assert!(FileConfig::parse("[train]\nepochs = 3\nepochs = 4\n").is_err());
        let cfg = FileConfig::parse("[train]\nepochz = 3\n").unwrap();
        let mut train = cfg.section("train");
        let _ = train.take::<usize>("epochs").unwrap();
        assert!(train.finish().is_err());
    }

    #[test]
    fn none_literal_disables_optional_values() {
        let cfg = FileConfig::parse("[train]\nclip_norm = none\ntarget_accuracy = 0.95\n").unwrap();
        let mut train = cfg.section("train");
        assert_eq!(train.take_or_none::<f64>("clip_norm").unwrap(), Some(None));
        assert_eq!(
            train.take_or_none::<f64>("target_accuracy").unwrap(),
            Some(Some(0.95))
        );
        train.finish().unwrap();
    }

    #[test]
    fn model_section_text_round_trips() {
        let cfg = FileConfig::parse(
            "[model]\ninput_dim = 3\nenc_layers = tanh_rnn(8)\ndec_embed_dim = 4\ndec_hidden_dim = 8\njoint_dim = 8\nvocab = 3\naux_layers = 1\n",
        )
        .unwrap();
        assert!(cfg.has_model());
        let model = tlab::scorer::ModelConfig::from_kv_lines(&cfg.model_text()).unwrap();
        assert_eq!(model.vocab, 3);
        assert_eq!(model.aux_layers, vec![1]);
    }
}
