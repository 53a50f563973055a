//! Synthetic disambiguation task.
//!
//! Source sentences are short word sequences over a fixed filler
//! vocabulary with one occurrence of the placeholder `thing`. The target is
//! the word-by-word translation of the source, except that the placeholder
//! becomes the name of the object shown in the image. The object is drawn
//! independently of the words, so the text alone carries no information
//! about it. The image is an L × d_feat grid of Gaussian noise in which one
//! random cell additionally carries `signal` in the feature dimension of
//! the object.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{format_manifest, split_paths, InstanceKind, ManifestEntry, RawSplit};
use super::features::{write_features, FeatureSet, VisualFeatureGrid};
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "thing";

/// (source word, target word)
const FILLER: [(&str, &str); 12] = [
    ("a", "ein"),
    ("man", "mann"),
    ("woman", "frau"),
    ("child", "kind"),
    ("dog", "hund"),
    ("sees", "sieht"),
    ("holds", "hält"),
    ("near", "nahe"),
    ("with", "mit"),
    ("red", "rot"),
    ("big", "groß"),
    ("small", "klein"),
];

const OBJECT_NAMES: [&str; 10] = ["ball", "hut", "buch", "apfel", "stuhl", "tasse", "vogel", "boot", "uhr", "lampe"];

const MIN_WORDS: usize = 4;
const MAX_WORDS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Set from the run-level seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_objects: usize,
    pub grid_len: usize,
    pub d_feat: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    pub signal: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_train: 2000,
            n_test: 200,
            n_objects: 8,
            grid_len: 9,
            d_feat: 16,
            noise: 0.1,
            signal: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 2 {
            return Err(Error::invalid("the synthetic task needs at least two objects"));
        }
        if self.grid_len == 0 || self.d_feat < self.n_objects {
            return Err(Error::invalid(format!(
                "grid needs at least one cell and d_feat ≥ n_objects ({} < {})",
                self.d_feat, self.n_objects
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn object_name(o: usize) -> String {
    OBJECT_NAMES.get(o).map_or_else(|| format!("obj{o}"), |s| s.to_string())
}

/// Ground truth of one generated instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticKey {
    pub id: usize,
    /// Word index of the placeholder in both source and target.
    pub position: usize,
    pub object: usize,
    /// Grid cell carrying the signature.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub raw: RawSplit,
    pub keys: Vec<SyntheticKey>,
}

impl SyntheticSplit {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let [src_p, tgt_p, man_p, vfea_p] = split_paths(dir, name);
        let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
        fs::write(&src_p, lines(&self.raw.src)).map_err(Error::at_path(&src_p))?;
        fs::write(&tgt_p, lines(&self.raw.tgt)).map_err(Error::at_path(&tgt_p))?;
        fs::write(&man_p, format_manifest(&self.raw.manifest)).map_err(Error::at_path(&man_p))?;
        if let Some(f) = &self.raw.features {
            write_features(&vfea_p, f)?;
        }
        let keys_p = dir.join(format!("{name}.keys.json"));
        let json = serde_json::to_string_pretty(&self.keys).expect("keys serialize");
        fs::write(&keys_p, json).map_err(Error::at_path(&keys_p))
    }

    pub fn load_keys(dir: &Path, name: &str) -> Result<Vec<SyntheticKey>> {
        let p = dir.join(format!("{name}.keys.json"));
        let text = fs::read_to_string(&p).map_err(Error::at_path(&p))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub train: SyntheticSplit,
    pub test: SyntheticSplit,
}

impl SyntheticTask {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        self.train.write(dir, "train")?;
        self.test.write(dir, "test")
    }
}

pub fn generate_synthetic_task(config: &SyntheticConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = generate_split(config, 0, config.n_train, &mut rng)?;
    let test = generate_split(config, config.n_train, config.n_test, &mut rng)?;
    Ok(SyntheticTask {
        config: config.clone(),
        train,
        test,
    })
}

fn generate_split(config: &SyntheticConfig, first_id: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticSplit> {
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let (mut src, mut tgt, mut keys, mut grids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for k in 0..n {
        let words = rng.random_range(MIN_WORDS..=MAX_WORDS);
        let position = rng.random_range(0..words);
        let object = rng.random_range(0..config.n_objects);
        let cell = rng.random_range(0..config.grid_len);
        let (mut s, mut t) = (Vec::with_capacity(words), Vec::with_capacity(words));
        for i in 0..words {
            if i == position {
                s.push(PLACEHOLDER.to_string());
                t.push(object_name(object));
            } else {
                let (a, b) = FILLER.choose(rng).unwrap();
                s.push(a.to_string());
                t.push(b.to_string());
            }
        }
        src.push(s.join(" "));
        tgt.push(t.join(" "));
        let mut data: Vec<f32> = (0..config.grid_len * config.d_feat)
            .map(|_| noise.sample(rng) as f32)
            .collect();
        data[cell * config.d_feat + object] += config.signal as f32;
        grids.push(VisualFeatureGrid::new(config.grid_len, config.d_feat, data)?);
        keys.push(SyntheticKey {
            id: first_id + k,
            position,
            object,
            cell,
        });
    }
    let manifest = (0..n)
        .map(|i| ManifestEntry {
            kind: InstanceKind::Multimodal,
            feature: Some(i),
        })
        .collect();
    Ok(SyntheticSplit {
        raw: RawSplit {
            src,
            tgt,
            manifest,
            features: Some(FeatureSet::new(config.grid_len, config.d_feat, grids)?),
        },
        keys,
    })
}

/// Object read off the image alone: the feature column of the largest
/// entry anywhere in the grid.
pub fn lookup_oracle(grid: &VisualFeatureGrid) -> usize {
    let d = grid.d_feat();
    let (best, _) = grid
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    best % d
}

/// Fraction of instances whose hypothesis carries the right object name at
/// the placeholder position.
pub fn placeholder_accuracy(keys: &[SyntheticKey], hypotheses: &[Vec<String>]) -> f64 {
    assert_eq!(keys.len(), hypotheses.len(), "one hypothesis per key");
    if keys.is_empty() {
        return 0.0;
    }
    let hits = keys
        .iter()
        .zip(hypotheses)
        .filter(|(k, h)| h.get(k.position).is_some_and(|w| *w == object_name(k.object)))
        .count();
    hits as f64 / keys.len() as f64
}
