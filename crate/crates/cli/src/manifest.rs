//! Lists of image identifiers per split, with optional organ tags.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use aenet_core::imaging::Organ;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    SameOrgan,
    DifferentOrgan,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::SameOrgan,
        Split::DifferentOrgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::SameOrgan => "same_organ",
            Split::DifferentOrgan => "different_organ",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ: Option<Organ>,
}

impl Entry {
    pub fn new(id: impl Into<String>, organ: Option<Organ>) -> Self {
        Self {
            id: id.into(),
            organ,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<Entry>,
    pub validation: Vec<Entry>,
    pub same_organ: Vec<Entry>,
    pub different_organ: Vec<Entry>,
}

impl SplitManifest {
    pub fn parse(text: &str) -> CliResult<Self> {
        let m: Self = toml::from_str(text).map_err(|e| CliError::Data(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn split(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::SameOrgan => &self.same_organ,
            Split::DifferentOrgan => &self.different_organ,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (Split, &Entry)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |e| (s, e)))
    }

    /// Non-empty identifiers, no identifier listed twice, and no tagged
    /// different-organ image from an organ that occurs in training.
    pub fn validate(&self) -> CliResult<()> {
        let mut seen = BTreeSet::new();
        for (split, e) in self.entries() {
            if e.id.is_empty() || e.id.contains(['/', '\\']) {
                return Err(CliError::Data(format!(
                    "invalid identifier `{}` in {split}",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(CliError::Data(format!(
                    "identifier `{}` listed more than once",
                    e.id
                )));
            }
        }
        let train_organs: BTreeSet<Organ> = self.train.iter().filter_map(|e| e.organ).collect();
        for e in &self.different_organ {
            if let Some(o) = e.organ.filter(|o| train_organs.contains(o)) {
                return Err(CliError::Data(format!(
                    "different-organ image `{}` is from {o}, which occurs in training",
                    e.id
                )));
            }
        }
        Ok(())
    }

    /// The public split: 16 training, 8 same-organ and 6 different-organ
    /// images, all tagged.
    pub fn validate_public_split(&self) -> CliResult<()> {
        self.validate()?;
        let counts = [
            self.train.len(),
            self.same_organ.len(),
            self.different_organ.len(),
        ];
        if counts != [16, 8, 6] {
            return Err(CliError::Data(format!(
                "expected 16/8/6 train/same-organ/different-organ images, found {}/{}/{}",
                counts[0], counts[1], counts[2]
            )));
        }
        if let Some((split, e)) = self.entries().find(|(_, e)| e.organ.is_none()) {
            return Err(CliError::Data(format!(
                "`{}` in {split} has no organ tag",
                e.id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(prefix: &str, organs: &[Organ], per: usize) -> Vec<Entry> {
        organs
            .iter()
            .flat_map(|&o| (0..per).map(move |i| Entry::new(format!("{prefix}-{o}-{i}"), Some(o))))
            .collect()
    }

    fn public() -> SplitManifest {
        let seen = [Organ::Breast, Organ::Liver, Organ::Kidney, Organ::Prostate];
        SplitManifest {
            train: tagged("tr", &seen, 4),
            validation: vec![],
            same_organ: tagged("st", &seen, 2),
            different_organ: tagged("dt", &[Organ::Bladder, Organ::Colon, Organ::Stomach], 2),
        }
    }

    #[test]
    fn public_split_validates_and_round_trips() {
        let m = public();
        m.validate_public_split().unwrap();
        assert_eq!(SplitManifest::parse(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn overlap_and_seen_organs_are_rejected() {
        let mut m = public();
        m.same_organ[0].id = m.train[3].id.clone();
        assert!(m
            .validate()
            .unwrap_err()
            .to_string()
            .contains("more than once"));

        let mut m = public();
        m.different_organ[0].organ = Some(Organ::Liver);
        assert!(m
            .validate()
            .unwrap_err()
            .to_string()
            .contains("occurs in training"));

        let mut m = public();
        m.train.pop();
        assert!(m.validate().is_ok());
        assert!(m.validate_public_split().is_err());
    }
}
