//! Visual feature grids and the VFEA container.
//!
//! ```text
//! magic   "VFEA"
//! u32     version (1)
//! u32     count
//! u32     L (grid length)
//! u32     d_feat
//! f32 × count·L·d_feat, row-major per grid, grids in corpus line order
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const FEATURE_MAGIC: [u8; 4] = *b"VFEA";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const WHAT: &str = "feature file";

/// L × d_feat matrix of spatial image features.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureGrid {
    len: usize,
    d_feat: usize,
    data: Vec<f32>,
}

impl VisualFeatureGrid {
    pub fn new(len: usize, d_feat: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || d_feat == 0 {
            return Err(Error::invalid("visual grid extents must be positive"));
        }
        if data.len() != len * d_feat {
            return Err(Error::ExtentMismatch {
                what: "visual grid",
                expected: len * d_feat,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("visual grid contains non-finite values"));
        }
        Ok(VisualFeatureGrid { len, d_feat, data })
    }

    /// Grid length L.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d_feat..(i + 1) * self.d_feat]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.len, self.d_feat],
            self.data.iter().map(|&v| Float::from(v)).collect(),
        )
        .expect("grid extents are positive")
    }

    /// Row `i` of the result is row `order[i]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len];
        if order.len() != self.len || order.iter().any(|&i| i >= self.len || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("row order is not a permutation"));
        }
        let data = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Ok(VisualFeatureGrid {
            len: self.len,
            d_feat: self.d_feat,
            data,
        })
    }
}

/// Grids of one feature file, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub grid_len: usize,
    pub d_feat: usize,
    pub grids: Vec<VisualFeatureGrid>,
}

impl FeatureSet {
    pub fn new(grid_len: usize, d_feat: usize, grids: Vec<VisualFeatureGrid>) -> Result<Self> {
        if let Some(g) = grids.iter().find(|g| g.len != grid_len || g.d_feat != d_feat) {
            return Err(Error::invalid(format!(
                "grid {}×{} does not match set geometry {grid_len}×{d_feat}",
                g.len, g.d_feat
            )));
        }
        Ok(FeatureSet { grid_len, d_feat, grids })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * set.grid_len * set.d_feat * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    for v in [FEATURE_VERSION, set.len() as u32, set.grid_len as u32, set.d_feat as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &set.grids {
        for v in &g.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Header fields of a VFEA file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u32,
    pub count: usize,
    pub grid_len: usize,
    pub d_feat: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { what: WHAT });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { what: WHAT, found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { what: WHAT });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion { what: WHAT, version });
    }
    let header = FeatureHeader {
        version,
        count: word(1) as usize,
        grid_len: word(2) as usize,
        d_feat: word(3) as usize,
    };
    if header.grid_len == 0 || header.d_feat == 0 {
        return Err(Error::ExtentMismatch {
            what: WHAT,
            expected: 1,
            found: 0,
        });
    }
    Ok(header)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let h = decode_header(bytes)?;
    let per_grid = h.grid_len * h.d_feat;
    let expected = HEADER_LEN + h.count * per_grid * 4;
    let payload = bytes.len();
    if payload < expected {
        return Err(Error::Truncated { what: WHAT });
    }
    if payload > expected {
        return Err(Error::ExtentMismatch {
            what: WHAT,
            expected,
            found: payload,
        });
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grids = floats
        .chunks_exact(per_grid.max(1))
        .take(h.count)
        .map(|c| VisualFeatureGrid::new(h.grid_len, h.d_feat, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(h.grid_len, h.d_feat, grids)
}

pub fn write_features(path: impl AsRef<Path>, set: &FeatureSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(set)).map_err(Error::at_path(path))
}

pub fn load_visual_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_empty_collection() {
        let set = FeatureSet::new(4, 3, vec![]).unwrap();
        let bytes = encode_features(&set);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_features(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!((back.grid_len, back.d_feat), (4, 3));
    }

    #[test]
    fn distinct_errors() {
        let g = VisualFeatureGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_features(&FeatureSet::new(2, 2, vec![g]).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'W';
        assert!(matches!(decode_features(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_features(&long), Err(Error::ExtentMismatch { .. })));
        let mut zero = bytes;
        zero[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_features(&zero), Err(Error::ExtentMismatch { .. })));
    }

    #[test]
    fn permutation_checks() {
        let g = VisualFeatureGrid::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.permute_rows(&[2, 0, 1]).unwrap().data(), &[3.0, 1.0, 2.0]);
        assert!(g.permute_rows(&[0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            count in 0usize..4,
            l in 1usize..5,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grids = (0..count)
                .map(|_| VisualFeatureGrid::new(l, d, (0..l * d).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect()).unwrap())
                .collect();
            let set = FeatureSet::new(l, d, grids).unwrap();
            let bytes = encode_features(&set);
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(encode_features(&back), bytes);
            for (a, b) in set.grids.iter().zip(&back.grids) {
                let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
