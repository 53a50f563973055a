//! Attention dumps and visual-attention heatmaps.
//!
//! A dump is one JSON object per translated instance:
//!
//! ```text
//! {
//!   "id": 17,
//!   "source_tokens": ["a", "dog", ...] | null,
//!   "decoder_inputs": ["<s>", "ein", ...],
//!   "generated_tokens": ["ein", ...],
//!   "grid": { "len": 196, "side": 14 | null } | null,
//!   "records": [
//!     { "layer": 0, "head": 0, "branch": "self" | "text" | "visual",
//!       "rows": 5, "cols": 7, "weights": [[...], ...] }
//!   ]
//! }
//! ```
//!
//! Row `j` of every record belongs to decoder input `j`, the position that
//! predicts generated token `j` (the final row predicts EOS). Each row is a
//! probability distribution over the keys of its branch.
//!
//! When the grid length is a perfect square, one binary PGM (P5) per
//! generated token shows the visual weights of that token's row laid out
//! as `side × side`, scaled so the largest weight is white.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, Branch};
use crate::autodiff::Graph;
use crate::data::{Vocabulary, BOS_ID, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::model::{decoder_forward, encode_sources, greedy_decode, ModelParams, Sources};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub len: usize,
    pub side: Option<usize>,
}

impl GridGeometry {
    pub fn of(len: usize) -> Self {
        let side = (0..=len).find(|s| s * s >= len).filter(|s| s * s == len);
        GridGeometry { len, side }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub layer: usize,
    pub head: usize,
    pub branch: Branch,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<Vec<f64>>,
}

impl From<&AttentionRecord> for DumpRecord {
    fn from(r: &AttentionRecord) -> Self {
        DumpRecord {
            layer: r.layer,
            head: r.head,
            branch: r.branch,
            rows: r.weights.rows(),
            cols: r.weights.cols(),
            weights: r.weights.to_rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub id: usize,
    pub source_tokens: Option<Vec<String>>,
    pub decoder_inputs: Vec<String>,
    pub generated_tokens: Vec<String>,
    pub grid: Option<GridGeometry>,
    pub records: Vec<DumpRecord>,
}

/// Which visual weights go into heatmaps: defaults to the top decoder
/// layer averaged over heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExportOptions {
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

/// Greedy translation plus the attention weights of one teacher-forced pass
/// over `BOS + translation`.
pub fn capture_attention(
    params: &ModelParams,
    sources: Sources,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<AttentionRecord>)> {
    let generated = greedy_decode(params, sources, max_len)?;
    let mut g = Graph::new(&params.store);
    let (text, visual) = encode_sources(&mut g, params, sources)?;
    let mut inputs = vec![BOS_ID];
    inputs.extend_from_slice(&generated);
    let out = decoder_forward(&mut g, params, &inputs, None, text, visual, true)?;
    Ok((generated, out.records))
}

fn words(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(RESERVED_TOKENS[3]).to_owned())
        .collect()
}

/// `side × side` binary graymap of one row of grid weights.
pub fn heatmap_pgm(weights: &[f64], side: usize) -> Result<Vec<u8>> {
    if weights.len() != side * side {
        return Err(Error::ExtentMismatch {
            what: "heatmap cells",
            expected: side * side,
            found: weights.len(),
        });
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(weights.iter().map(|&w| if max > 0.0 { (w / max * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

/// (width, height, pixels) of a binary PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::invalid("malformed PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

/// Visual weights of `opts`' layer, one row per decoder input, averaged
/// over the selected heads.
fn selected_visual_rows(records: &[AttentionRecord], layers: usize, opts: ExportOptions) -> Result<Vec<Vec<f64>>> {
    let layer = opts.layer.unwrap_or(layers.saturating_sub(1));
    if layer >= layers {
        return Err(Error::invalid(format!("layer {layer} out of range (model has {layers})")));
    }
    let chosen: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| r.branch == Branch::Visual && r.layer == layer && opts.head.is_none_or(|h| h == r.head))
        .collect();
    let Some(first) = chosen.first() else {
        return Err(Error::invalid("no visual attention matches the requested layer/head"));
    };
    let mut sum = vec![vec![0.0; first.weights.cols()]; first.weights.rows()];
    for r in &chosen {
        for (i, row) in sum.iter_mut().enumerate() {
            for (s, w) in row.iter_mut().zip(r.weights.row(i)) {
                *s += w;
            }
        }
    }
    let k = chosen.len() as f64;
    Ok(sum.into_iter().map(|row| row.into_iter().map(|v| v / k).collect()).collect())
}

/// Writes `attention_{id}.json` and, for square grids, one heatmap per
/// generated token into `out_dir`. Returns the dump and the written paths.
#[allow(clippy::too_many_arguments)]
pub fn export_attention(
    params: &ModelParams,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    id: usize,
    sources: Sources,
    max_len: usize,
    out_dir: &Path,
    opts: ExportOptions,
) -> Result<(AttentionDump, Vec<PathBuf>)> {
    let layers = params.config.layers;
    if let Some(h) = opts.head {
        if h >= params.config.heads {
            return Err(Error::invalid(format!("head {h} out of range (model has {})", params.config.heads)));
        }
    }
    if opts.layer.is_some_and(|l| l >= layers) {
        return Err(Error::invalid(format!("layer out of range (model has {layers})")));
    }
    let (generated, records) = capture_attention(params, sources, max_len)?;
    let mut inputs = vec![BOS_ID];
    inputs.extend_from_slice(&generated);
    let grid = sources.grid.map(|g| GridGeometry::of(g.len()));
    let dump = AttentionDump {
        id,
        source_tokens: sources.src.map(|s| words(src_vocab, s)),
        decoder_inputs: words(tgt_vocab, &inputs),
        generated_tokens: words(tgt_vocab, &generated),
        grid,
        records: records.iter().map(DumpRecord::from).collect(),
    };
    fs::create_dir_all(out_dir).map_err(Error::at_path(out_dir))?;
    let json_path = out_dir.join(format!("attention_{id}.json"));
    let json = serde_json::to_string(&dump).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&json_path, json).map_err(Error::at_path(&json_path))?;
    let mut written = vec![json_path];
    if let (Some(GridGeometry { side: Some(side), .. }), true) = (grid, layers > 0) {
        let rows = selected_visual_rows(&records, layers, opts)?;
        for (j, row) in rows.iter().take(generated.len()).enumerate() {
            let p = out_dir.join(format!("attention_{id}_tok{j:03}.pgm"));
            fs::write(&p, heatmap_pgm(row, side)?).map_err(Error::at_path(&p))?;
            written.push(p);
        }
    }
    Ok((dump, written))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VisualFeatureGrid;
    use crate::model::ModelConfig;

    fn setup(grid_len: usize) -> (ModelParams, Vocabulary, Vocabulary, VisualFeatureGrid) {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            src_vocab: 7,
            tgt_vocab: 7,
            grid_len,
            d_feat: 3,
            p_drop_visual: 0.5,
            p_drop_residual: 0.0,
            max_len: 20,
        };
        let p = ModelParams::init(&cfg, 8).unwrap();
        let v = Vocabulary::build(["a b c"], 1).unwrap();
        let data = (0..grid_len * 3).map(|i| (i as f32 * 0.37).sin()).collect();
        (p, v.clone(), v, VisualFeatureGrid::new(grid_len, 3, data).unwrap())
    }

    #[test]
    fn geometry() {
        assert_eq!(GridGeometry::of(196).side, Some(14));
        assert_eq!(GridGeometry::of(9).side, Some(3));
        assert_eq!(GridGeometry::of(1).side, Some(1));
        assert_eq!(GridGeometry::of(10).side, None);
    }

    #[test]
    fn single_source_token_gives_all_ones_text_column() {
        let (p, sv, tv, grid) = setup(4);
        let src = [4usize];
        let sources = Sources { src: Some(&src), grid: Some(&grid) };
        let (_, records) = capture_attention(&p, sources, 5).unwrap();
        let text: Vec<_> = records.iter().filter(|r| r.branch == Branch::Text).collect();
        assert_eq!(text.len(), 4);
        for r in text {
            assert_eq!(r.weights.cols(), 1);
            assert!(r.weights.data().iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
        let dir = tempfile::tempdir().unwrap();
        let (dump, _) = export_attention(&p, &sv, &tv, 0, sources, 5, dir.path(), ExportOptions::default()).unwrap();
        assert_eq!(dump.source_tokens.as_deref(), Some(&["a".to_string()][..]));
    }

    #[test]
    fn dump_rows_resum_to_one_after_parse_back() {
        let (p, sv, tv, grid) = setup(9);
        let src = [4usize, 5, 6];
        let sources = Sources { src: Some(&src), grid: Some(&grid) };
        let dir = tempfile::tempdir().unwrap();
        let (dump, paths) = export_attention(&p, &sv, &tv, 3, sources, 4, dir.path(), ExportOptions::default()).unwrap();
        let back: AttentionDump = serde_json::from_str(&fs::read_to_string(&paths[0]).unwrap()).unwrap();
        assert_eq!(back, dump);
        for r in &back.records {
            assert_eq!(r.weights.len(), r.rows);
            for row in &r.weights {
                assert_eq!(row.len(), r.cols);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(paths.len(), 1 + dump.generated_tokens.len());
        for img in &paths[1..] {
            let (w, h, px) = parse_pgm(&fs::read(img).unwrap()).unwrap();
            assert_eq!((w, h), (3, 3));
            assert_eq!(px.iter().copied().max(), Some(255));
        }
    }

    #[test]
    fn caption_and_layer_selection() {
        let (p, sv, tv, grid) = setup(4);
        let sources = Sources { src: None, grid: Some(&grid) };
        let dir = tempfile::tempdir().unwrap();
        let opts = ExportOptions { layer: Some(0), head: Some(1) };
        let (dump, _) = export_attention(&p, &sv, &tv, 1, sources, 3, dir.path(), opts).unwrap();
        assert!(dump.records.iter().all(|r| r.branch != Branch::Text));
        assert!(dump.source_tokens.is_none());
        let bad = ExportOptions { layer: Some(2), head: None };
        assert!(export_attention(&p, &sv, &tv, 1, sources, 3, dir.path(), bad).is_err());
        let bad = ExportOptions { layer: None, head: Some(2) };
        assert!(export_attention(&p, &sv, &tv, 1, sources, 3, dir.path(), bad).is_err());
    }

    #[test]
    fn heatmap_for_196_cells_is_14_by_14() {
        let mut w = vec![0.0; 196];
        w[15] = 0.5;
        w[0] = 0.25;
        let (wd, ht, px) = parse_pgm(&heatmap_pgm(&w, 14).unwrap()).unwrap();
        assert_eq!((wd, ht), (14, 14));
        assert_eq!(px[15], 255);
        assert_eq!(px[14 + 1], 255);
        assert_eq!(px[0], 128);
        assert!(heatmap_pgm(&w, 13).is_err());
    }
}
