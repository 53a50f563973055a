//! Training instances, instance manifests and on-disk corpus splits.
//!
//! A split named `NAME` in a data directory consists of
//!
//! * `NAME.src`, `NAME.tgt`: aligned UTF-8 text, one sentence per line
//! * `NAME.manifest` (optional): one line per corpus line, `multimodal IDX`,
//!   `text` or `caption IDX`, where `IDX` indexes the feature file
//! * `NAME.vfea` (optional): visual feature grids
//!
//! Without a manifest every line is `multimodal i` when a feature file is
//! present and `text` otherwise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::features::{load_visual_features, FeatureSet, VisualFeatureGrid};
use super::vocab::{LengthPolicy, TokenSequence, Vocabulary, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    /// Source sentence, target sentence and image.
    Multimodal,
    /// Source and target sentences.
    TextPair,
    /// Image and target sentence.
    Caption,
}

impl InstanceKind {
    pub fn has_text(self) -> bool {
        matches!(self, InstanceKind::Multimodal | InstanceKind::TextPair)
    }

    pub fn has_image(self) -> bool {
        matches!(self, InstanceKind::Multimodal | InstanceKind::Caption)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub id: usize,
    pub kind: InstanceKind,
    pub src: Option<TokenSequence>,
    /// BOS … EOS
    pub tgt: TokenSequence,
    /// Index into the dataset's grids.
    pub image: Option<usize>,
}

impl TrainingInstance {
    pub fn multimodal(id: usize, src: TokenSequence, tgt: TokenSequence, image: usize) -> Self {
        TrainingInstance {
            id,
            kind: InstanceKind::Multimodal,
            src: Some(src),
            tgt,
            image: Some(image),
        }
    }

    pub fn text_pair(id: usize, src: TokenSequence, tgt: TokenSequence) -> Self {
        TrainingInstance {
            id,
            kind: InstanceKind::TextPair,
            src: Some(src),
            tgt,
            image: None,
        }
    }

    pub fn caption(id: usize, tgt: TokenSequence, image: usize) -> Self {
        TrainingInstance {
            id,
            kind: InstanceKind::Caption,
            src: None,
            tgt,
            image: Some(image),
        }
    }

    fn validate(&self, n_grids: usize) -> Result<()> {
        if self.kind.has_text() != self.src.is_some() || self.kind.has_image() != self.image.is_some() {
            return Err(Error::invalid(format!("instance {} does not match its kind {:?}", self.id, self.kind)));
        }
        if let Some(src) = &self.src {
            if src.is_empty() || src.contains(&PAD_ID) {
                return Err(Error::invalid(format!("instance {}: empty source or PAD inside it", self.id)));
            }
        }
        if self.tgt.len() < 2 || self.tgt.last() != Some(&EOS_ID) || self.tgt.contains(&PAD_ID) {
            return Err(Error::invalid(format!(
                "instance {}: target must be a framed, PAD-free sequence ending in EOS",
                self.id
            )));
        }
        if let Some(i) = self.image {
            if i >= n_grids {
                return Err(Error::Alignment(format!(
                    "instance {} references feature grid {i} but only {n_grids} exist",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Target words without BOS/EOS.
    pub fn reference(&self) -> &[usize] {
        &self.tgt[1..self.tgt.len() - 1]
    }
}

/// Instances plus the grids they reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<TrainingInstance>,
    pub grids: Vec<VisualFeatureGrid>,
}

impl Dataset {
    pub fn new(instances: Vec<TrainingInstance>, grids: Vec<VisualFeatureGrid>) -> Result<Self> {
        let d = Dataset { instances, grids };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.instances.iter().try_for_each(|i| i.validate(self.grids.len()))
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn grid(&self, inst: &TrainingInstance) -> Option<&VisualFeatureGrid> {
        inst.image.map(|i| &self.grids[i])
    }

    /// Same corpus with images removed: multimodal instances become text
    /// pairs, captions are dropped.
    pub fn without_images(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .filter(|i| i.kind.has_text())
            .map(|i| TrainingInstance::text_pair(i.id, i.src.clone().unwrap(), i.tgt.clone()))
            .collect();
        Dataset {
            instances,
            grids: Vec::new(),
        }
    }
}

/// One manifest line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub kind: InstanceKind,
    pub feature: Option<usize>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.feature) {
            (InstanceKind::Multimodal, Some(i)) => write!(f, "multimodal {i}"),
            (InstanceKind::Caption, Some(i)) => write!(f, "caption {i}"),
            _ => f.write_str("text"),
        }
    }
}

impl FromStr for ManifestEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let idx = parts.next().map(|s| s.parse::<usize>());
        if parts.next().is_some() {
            return Err(Error::invalid(format!("manifest line {line:?} has extra fields")));
        }
        let bad = || Error::invalid(format!("malformed manifest line {line:?}"));
        match (kind, idx) {
            ("multimodal", Some(Ok(i))) => Ok(ManifestEntry {
                kind: InstanceKind::Multimodal,
                feature: Some(i),
            }),
            ("caption", Some(Ok(i))) => Ok(ManifestEntry {
                kind: InstanceKind::Caption,
                feature: Some(i),
            }),
            ("text", None) => Ok(ManifestEntry {
                kind: InstanceKind::TextPair,
                feature: None,
            }),
            _ => Err(bad()),
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines().map(str::parse).collect()
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

/// Raw text of a split before vocabulary encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSplit {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
    pub features: Option<FeatureSet>,
}

pub fn split_paths(dir: &Path, name: &str) -> [PathBuf; 4] {
    ["src", "tgt", "manifest", "vfea"].map(|ext| dir.join(format!("{name}.{ext}")))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
    Ok(text.lines().map(str::to_owned).collect())
}

impl RawSplit {
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let [src_p, tgt_p, man_p, vfea_p] = split_paths(dir, name);
        let src = read_lines(&src_p)?;
        let tgt = read_lines(&tgt_p)?;
        let features = if vfea_p.exists() {
            Some(load_visual_features(&vfea_p)?)
        } else {
            None
        };
        let manifest = if man_p.exists() {
            parse_manifest(&fs::read_to_string(&man_p).map_err(Error::at_path(&man_p))?)?
        } else {
            let kind = if features.is_some() {
                InstanceKind::Multimodal
            } else {
                InstanceKind::TextPair
            };
            (0..tgt.len())
                .map(|i| ManifestEntry {
                    kind,
                    feature: features.as_ref().map(|_| i),
                })
                .collect()
        };
        let split = RawSplit {
            src,
            tgt,
            manifest,
            features,
        };
        split.check_alignment()?;
        Ok(split)
    }

    pub fn check_alignment(&self) -> Result<()> {
        let n = self.tgt.len();
        if self.src.len() != n {
            return Err(Error::Alignment(format!("{} source lines vs {n} target lines", self.src.len())));
        }
        if self.manifest.len() != n {
            return Err(Error::Alignment(format!("{} manifest lines vs {n} corpus lines", self.manifest.len())));
        }
        let count = self.features.as_ref().map_or(0, FeatureSet::len);
        for (line, e) in self.manifest.iter().enumerate() {
            if let Some(i) = e.feature {
                if i >= count {
                    return Err(Error::Alignment(format!(
                        "line {line} references feature grid {i} but the feature file holds {count}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, max_len: usize) -> Result<Dataset> {
        self.check_alignment()?;
        let mut instances = Vec::with_capacity(self.tgt.len());
        for (line, entry) in self.manifest.iter().enumerate() {
            let tgt = tgt_vocab.encode(&self.tgt[line], true, max_len, LengthPolicy::Reject)?;
            let src = || src_vocab.encode(&self.src[line], false, max_len, LengthPolicy::Reject);
            let inst = match entry.kind {
                InstanceKind::Multimodal => TrainingInstance::multimodal(line, src()?, tgt, entry.feature.unwrap()),
                InstanceKind::TextPair => TrainingInstance::text_pair(line, src()?, tgt),
                InstanceKind::Caption => TrainingInstance::caption(line, tgt, entry.feature.unwrap()),
            };
            instances.push(inst);
        }
        let grids = self.features.as_ref().map(|f| f.grids.clone()).unwrap_or_default();
        Dataset::new(instances, grids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BOS_ID;

    #[test]
    fn manifest_round_trip() {
        let text = "multimodal 3\ntext\ncaption 0\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries[1].kind, InstanceKind::TextPair);
        assert_eq!(format_manifest(&entries), text);
        assert!(parse_manifest("multimodal\n").is_err());
        assert!(parse_manifest("text 4\n").is_err());
        assert!(parse_manifest("image 1\n").is_err());
    }

    #[test]
    fn instance_kind_invariants() {
        let ok = TrainingInstance::caption(0, vec![BOS_ID, 5, EOS_ID], 0);
        assert!(Dataset::new(vec![ok.clone()], vec![]).is_err());
        let grid = VisualFeatureGrid::new(1, 1, vec![0.0]).unwrap();
        assert!(Dataset::new(vec![ok], vec![grid]).is_ok());
        let no_eos = TrainingInstance::text_pair(1, vec![4], vec![BOS_ID, 5]);
        assert!(Dataset::new(vec![no_eos], vec![]).is_err());
        let mut bad = TrainingInstance::text_pair(2, vec![4], vec![BOS_ID, 5, EOS_ID]);
        bad.image = Some(0);
        assert!(Dataset::new(vec![bad], vec![]).is_err());
    }

    #[test]
    fn feature_count_mismatch_is_an_alignment_error() {
        let split = RawSplit {
            src: vec!["a".into(), "b".into()],
            tgt: vec!["x".into(), "y".into()],
            manifest: vec![
                ManifestEntry { kind: InstanceKind::Multimodal, feature: Some(0) },
                ManifestEntry { kind: InstanceKind::Multimodal, feature: Some(1) },
            ],
            features: Some(FeatureSet::new(1, 1, vec![VisualFeatureGrid::new(1, 1, vec![0.0]).unwrap()]).unwrap()),
        };
        assert!(matches!(split.check_alignment(), Err(Error::Alignment(_))));
        let mut short = split.clone();
        short.src.pop();
        assert!(matches!(short.check_alignment(), Err(Error::Alignment(_))));
    }
}
