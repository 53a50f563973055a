//! Scaled dot-product attention, multi-head attention, and the enhanced
//! (text + visual) variants used by the decoder's cross-attention.
//!
//! The enhanced form sums two independently normalized attention outputs:
//!
//! ```text
//! softmax(Q K_tᵀ / √d_k) V_t  +  softmax(Q K_vᵀ / √d_k) V_v
//! ```
//!
//! There is no averaging or gating between the branches. Only the text branch
//! takes a mask; the visual grid has no padding and is never masked. Either
//! branch may be absent, in which case it contributes nothing.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};

/// Additive penalty for forbidden (query, key) pairs.
pub const MASK_PENALTY: Float = -1e9;

/// Allowed/forbidden pattern over (query × key) positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_q * n_k {
            return Err(Error::ExtentMismatch {
                what: "attention mask",
                expected: n_q * n_k,
                found: allowed.len(),
            });
        }
        if let Some(row) = (0..n_q).find(|&i| !allowed[i * n_k..(i + 1) * n_k].iter().any(|&a| a)) {
            return Err(Error::EmptyMaskRow { row });
        }
        Ok(AttentionMask { n_q, n_k, allowed })
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        AttentionMask {
            n_q,
            n_k,
            allowed: vec![true; n_q * n_k],
        }
    }

    /// Keys at or beyond `key_len` are forbidden for every query.
    pub fn key_padding(key_len: usize, n_q: usize, n_k: usize) -> Result<Self> {
        if key_len == 0 {
            return Err(Error::invalid("padding mask for an empty sequence"));
        }
        if key_len > n_k {
            return Err(Error::invalid(format!("true length {key_len} exceeds padded length {n_k}")));
        }
        let allowed = (0..n_q).flat_map(|_| (0..n_k).map(move |j| j < key_len)).collect();
        Self::new(n_q, n_k, allowed)
    }

    /// Allowed where both masks allow.
    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                op: "AttentionMask::and",
                lhs: vec![self.n_q, self.n_k],
                rhs: vec![other.n_q, other.n_k],
            });
        }
        let allowed = self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect();
        Self::new(self.n_q, self.n_k, allowed)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_q, self.n_k)
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_k + k]
    }

    /// 0 where allowed, [`MASK_PENALTY`] where forbidden.
    pub fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_PENALTY })
            .collect();
        Tensor::new(vec![self.n_q, self.n_k], data).expect("mask extents are positive")
    }
}

/// Entry (i, j) allowed iff j ≤ i.
pub fn make_causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::invalid("causal mask of length 0"));
    }
    let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
    AttentionMask::new(n, n, allowed)
}

/// One key-padding mask per sequence of a padded batch.
pub fn make_padding_mask(key_lengths: &[usize], n_q: usize, n_k: usize) -> Result<Vec<AttentionMask>> {
    key_lengths
        .iter()
        .map(|&len| AttentionMask::key_padding(len, n_q, n_k))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[serde(rename = "self")]
    SelfAttn,
    Text,
    Visual,
}

/// Post-softmax weights of one head, captured for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub branch: Branch,
    /// queries × keys
    pub weights: Tensor,
}

/// `softmax(Q Kᵀ / √d_k + mask) V`; returns the output and the weights.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let (n_q, d_k) = g.value(q).matrix_dims("attention Q")?;
    let (n_k, d_k2) = g.value(k).matrix_dims("attention K")?;
    let (n_v, _) = g.value(v).matrix_dims("attention V")?;
    if d_k != d_k2 {
        return Err(shape_err("attention Q/K", g, q, k));
    }
    if n_k != n_v {
        return Err(shape_err("attention K/V", g, k, v));
    }
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (d_k as Float).sqrt());
    if let Some(mask) = mask {
        if mask.dims() != (n_q, n_k) {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![n_q, n_k],
                rhs: vec![mask.n_q, mask.n_k],
            });
        }
        if mask.allowed.iter().any(|a| !a) {
            let penalty = g.constant(mask.additive());
            scores = g.add(scores, penalty)?;
        }
    }
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

fn shape_err(op: &'static str, g: &Graph, a: Var, b: Var) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: g.shape(a).to_vec(),
        rhs: g.shape(b).to_vec(),
    }
}

fn check_param(store: &ParamStore, id: ParamId, rows: usize, cols: usize) -> Result<()> {
    let shape = store.get(id).shape();
    if shape != [rows, cols] {
        return Err(Error::ShapeMismatch {
            op: "projection extents",
            lhs: vec![rows, cols],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadProjections {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadProjections>,
    pub w_o: ParamId,
}

impl MultiHeadParams {
    /// Registers `prefix.head{i}.{wq,wk,wv}` and `prefix.wo` in the store.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: HeadDims,
        rng: &mut R,
    ) -> Self {
        let HeadDims { heads, d_model, d_k, d_v } = dims;
        let heads = (0..heads)
            .map(|i| HeadProjections {
                w_q: store.add(format!("{prefix}.head{i}.wq"), Tensor::glorot_uniform(&[d_model, d_k], rng)),
                w_k: store.add(format!("{prefix}.head{i}.wk"), Tensor::glorot_uniform(&[d_model, d_k], rng)),
                w_v: store.add(format!("{prefix}.head{i}.wv"), Tensor::glorot_uniform(&[d_model, d_v], rng)),
            })
            .collect::<Vec<_>>();
        let w_o = store.add(
            format!("{prefix}.wo"),
            Tensor::glorot_uniform(&[dims.heads * d_v, d_model], rng),
        );
        MultiHeadParams { heads, w_o }
    }

    pub fn validate(&self, store: &ParamStore, dims: HeadDims) -> Result<()> {
        if self.heads.len() != dims.heads {
            return Err(Error::ExtentMismatch {
                what: "head count",
                expected: dims.heads,
                found: self.heads.len(),
            });
        }
        for h in &self.heads {
            check_param(store, h.w_q, dims.d_model, dims.d_k)?;
            check_param(store, h.w_k, dims.d_model, dims.d_k)?;
            check_param(store, h.w_v, dims.d_model, dims.d_v)?;
        }
        check_param(store, self.w_o, dims.heads * dims.d_v, dims.d_model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadDims {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl HeadDims {
    fn infer(store: &ParamStore, heads: usize, w_q: ParamId, w_v: ParamId) -> Result<Self> {
        let wq = store.get(w_q);
        let wv = store.get(w_v);
        let (d_model, d_k) = wq.matrix_dims("W_Q")?;
        let (_, d_v) = wv.matrix_dims("W_V")?;
        Ok(HeadDims { heads, d_model, d_k, d_v })
    }
}

pub struct MultiHeadOutput {
    pub output: Var,
    /// Per-head attention weights, queries × keys.
    pub weights: Vec<Var>,
}

/// `Concat(head_1..head_h) W_O` with `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &MultiHeadParams,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<MultiHeadOutput> {
    let first = p.heads.first().ok_or_else(|| Error::invalid("multi-head attention with zero heads"))?;
    let dims = HeadDims::infer(g.store(), p.heads.len(), first.w_q, first.w_v)?;
    p.validate(g.store(), dims)?;
    for x in [q, k, v] {
        let (_, w) = g.value(x).matrix_dims("multi-head input")?;
        if w != dims.d_model {
            return Err(Error::ExtentMismatch {
                what: "multi-head input width",
                expected: dims.d_model,
                found: w,
            });
        }
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let (wq, wk, wv) = (g.param(h.w_q), g.param(h.w_k), g.param(h.w_v));
        let qh = g.matmul(q, wq)?;
        let kh = g.matmul(k, wk)?;
        let vh = g.matmul(v, wv)?;
        let (o, w) = scaled_dot_product_attention(g, qh, kh, vh, mask)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(p.w_o);
    let output = g.matmul(cat, wo)?;
    Ok(MultiHeadOutput { output, weights })
}

/// Keys, values and optional mask of the text (encoder) source.
#[derive(Clone, Copy)]
pub struct TextSource<'m> {
    pub keys: Var,
    pub values: Var,
    pub mask: Option<&'m AttentionMask>,
}

/// Keys and values of the visual grid; never masked.
#[derive(Clone, Copy)]
pub struct VisualSource {
    pub keys: Var,
    pub values: Var,
}

pub struct EnhancedOutput {
    pub output: Var,
    pub text_weights: Option<Var>,
    pub visual_weights: Option<Var>,
}

/// Sum of a text-branch and a visual-branch scaled dot-product attention
/// sharing the same queries. An absent branch contributes exactly nothing.
pub fn enhanced_scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    text: Option<TextSource>,
    visual: Option<VisualSource>,
) -> Result<EnhancedOutput> {
    let text_part = match text {
        Some(t) => Some(scaled_dot_product_attention(g, q, t.keys, t.values, t.mask)?),
        None => None,
    };
    let visual_part = match visual {
        Some(v) => Some(scaled_dot_product_attention(g, q, v.keys, v.values, None)?),
        None => None,
    };
    let output = match (text_part, visual_part) {
        (Some((t, _)), Some((v, _))) => g.add(t, v)?,
        (Some((t, _)), None) => t,
        (None, Some((v, _))) => v,
        (None, None) => return Err(Error::invalid("enhanced attention needs at least one source")),
    };
    Ok(EnhancedOutput {
        output,
        text_weights: text_part.map(|(_, w)| w),
        visual_weights: visual_part.map(|(_, w)| w),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancedHeadProjections {
    pub w_q: ParamId,
    pub w_kt: ParamId,
    pub w_vt: ParamId,
    pub w_kv: ParamId,
    pub w_vv: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancedMultiHeadParams {
    pub heads: Vec<EnhancedHeadProjections>,
    pub w_o: ParamId,
}

impl EnhancedMultiHeadParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: HeadDims,
        rng: &mut R,
    ) -> Self {
        let HeadDims { heads, d_model, d_k, d_v } = dims;
        let mut mk = |name: String, cols: usize| store.add(name, Tensor::glorot_uniform(&[d_model, cols], rng));
        let heads = (0..heads)
            .map(|i| EnhancedHeadProjections {
                w_q: mk(format!("{prefix}.head{i}.wq"), d_k),
                w_kt: mk(format!("{prefix}.head{i}.wk_text"), d_k),
                w_vt: mk(format!("{prefix}.head{i}.wv_text"), d_v),
                w_kv: mk(format!("{prefix}.head{i}.wk_visual"), d_k),
                w_vv: mk(format!("{prefix}.head{i}.wv_visual"), d_v),
            })
            .collect::<Vec<_>>();
        let w_o = store.add(
            format!("{prefix}.wo"),
            Tensor::glorot_uniform(&[dims.heads * d_v, d_model], rng),
        );
        EnhancedMultiHeadParams { heads, w_o }
    }

    pub fn validate(&self, store: &ParamStore, dims: HeadDims) -> Result<()> {
        if self.heads.len() != dims.heads {
            return Err(Error::ExtentMismatch {
                what: "head count",
                expected: dims.heads,
                found: self.heads.len(),
            });
        }
        for h in &self.heads {
            check_param(store, h.w_q, dims.d_model, dims.d_k)?;
            check_param(store, h.w_kt, dims.d_model, dims.d_k)?;
            check_param(store, h.w_vt, dims.d_model, dims.d_v)?;
            check_param(store, h.w_kv, dims.d_model, dims.d_k)?;
            check_param(store, h.w_vv, dims.d_model, dims.d_v)?;
        }
        check_param(store, self.w_o, dims.heads * dims.d_v, dims.d_model)
    }

    /// The text-branch projections viewed as ordinary multi-head parameters.
    pub fn text_branch(&self) -> MultiHeadParams {
        MultiHeadParams {
            heads: self
                .heads
                .iter()
                .map(|h| HeadProjections {
                    w_q: h.w_q,
                    w_k: h.w_kt,
                    w_v: h.w_vt,
                })
                .collect(),
            w_o: self.w_o,
        }
    }
}

pub struct EnhancedHeadWeights {
    pub text: Option<Var>,
    pub visual: Option<Var>,
}

pub struct EnhancedMultiHeadOutput {
    pub output: Var,
    pub heads: Vec<EnhancedHeadWeights>,
}

/// `Concat(head_1..head_h) W_O` where each head is an enhanced scaled
/// dot-product attention over its own projections of both sources.
pub fn enhanced_multi_head_attention(
    g: &mut Graph,
    p: &EnhancedMultiHeadParams,
    q: Var,
    text: Option<TextSource>,
    visual: Option<VisualSource>,
) -> Result<EnhancedMultiHeadOutput> {
    let first = p
        .heads
        .first()
        .ok_or_else(|| Error::invalid("enhanced attention with zero heads"))?;
    let dims = HeadDims::infer(g.store(), p.heads.len(), first.w_q, first.w_vt)?;
    p.validate(g.store(), dims)?;
    let mut inputs = vec![q];
    if let Some(t) = text {
        inputs.extend([t.keys, t.values]);
    }
    if let Some(v) = visual {
        inputs.extend([v.keys, v.values]);
    }
    for x in inputs {
        let (_, w) = g.value(x).matrix_dims("enhanced attention input")?;
        if w != dims.d_model {
            return Err(Error::ExtentMismatch {
                what: "enhanced attention input width",
                expected: dims.d_model,
                found: w,
            });
        }
    }

    let mut outs = Vec::with_capacity(p.heads.len());
    let mut heads = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let wq = g.param(h.w_q);
        let qh = g.matmul(q, wq)?;
        let text_h = match text {
            Some(t) => {
                let (wk, wv) = (g.param(h.w_kt), g.param(h.w_vt));
                Some(TextSource {
                    keys: g.matmul(t.keys, wk)?,
                    values: g.matmul(t.values, wv)?,
                    mask: t.mask,
                })
            }
            None => None,
        };
        let visual_h = match visual {
            Some(v) => {
                let (wk, wv) = (g.param(h.w_kv), g.param(h.w_vv));
                Some(VisualSource {
                    keys: g.matmul(v.keys, wk)?,
                    values: g.matmul(v.values, wv)?,
                })
            }
            None => None,
        };
        let out = enhanced_scaled_dot_product_attention(g, qh, text_h, visual_h)?;
        outs.push(out.output);
        heads.push(EnhancedHeadWeights {
            text: out.text_weights,
            visual: out.visual_weights,
        });
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(p.w_o);
    let output = g.matmul(cat, wo)?;
    Ok(EnhancedMultiHeadOutput { output, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[Float]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn causal_mask_patterns() {
        let one = make_causal_mask(1).unwrap();
        assert!(one.is_allowed(0, 0));
        let three = make_causal_mask(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(three.is_allowed(i, j), j <= i);
            }
        }
        assert!(make_causal_mask(0).is_err());
    }

    #[test]
    fn padding_mask_patterns() {
        let full = AttentionMask::key_padding(4, 2, 4).unwrap();
        assert_eq!(full, AttentionMask::full(2, 4));
        let m = AttentionMask::key_padding(2, 1, 4).unwrap();
        assert_eq!((0..4).map(|j| m.is_allowed(0, j)).collect::<Vec<_>>(), vec![true, true, false, false]);
        assert!(make_padding_mask(&[3, 0], 2, 4).is_err());
        assert!(make_padding_mask(&[5], 2, 4).is_err());
        assert_eq!(make_padding_mask(&[1, 2], 3, 2).unwrap().len(), 2);
    }

    #[test]
    fn fully_forbidden_row_rejected() {
        assert!(matches!(
            AttentionMask::new(2, 2, vec![true, false, false, false]),
            Err(Error::EmptyMaskRow { row: 1 })
        ));
    }

    #[test]
    fn single_key_returns_value_row() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[0.3, -1.0], &[5.0, 2.0]]));
        let k = g.constant(m(&[&[1.0, 1.0]]));
        let v = g.constant(m(&[&[7.0, 8.0, 9.0]]));
        let (o, w) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0]);
        assert_eq!(g.value(o).row(1), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn zero_query_gives_uniform_average() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[0.0]]));
        let k = g.constant(m(&[&[1.0], &[-3.0]]));
        let v = g.constant(m(&[&[2.0], &[4.0]]));
        let (o, _) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(o).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_case_matches_direct_formula() {
        // d_k = 1: logits are q·k, so weights are [1, 3] / 4.
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[1.0]]));
        let k = g.constant(m(&[&[0.0], &[3f64.ln()]]));
        let v = g.constant(m(&[&[0.0], &[1.0]]));
        let (o, w) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(w).get(0, 1) - 0.75).abs() < 1e-12);
        assert!((g.value(o).item() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[1.0], &[2.0], &[3.0]]));
        let k = g.constant(m(&[&[1.0], &[2.0], &[3.0]]));
        let v = g.constant(m(&[&[1.0], &[10.0], &[100.0]]));
        let mask = make_causal_mask(3).unwrap();
        let (_, w) = scaled_dot_product_attention(&mut g, q, k, v, Some(&mask)).unwrap();
        let w = g.value(w);
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.get(0, 2), 0.0);
        assert_eq!(w.get(1, 2), 0.0);
        for i in 0..3 {
            assert!((w.row(i).iter().sum::<Float>() - 1.0).abs() < 1e-12);
        }
        let bad = make_causal_mask(2).unwrap();
        assert!(scaled_dot_product_attention(&mut g, q, k, v, Some(&bad)).is_err());
    }

    #[test]
    fn enhanced_needs_a_source() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[1.0]]));
        assert!(enhanced_scaled_dot_product_attention(&mut g, q, None, None).is_err());
    }

    #[test]
    fn enhanced_single_rows_sum_values() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let q = g.constant(m(&[&[0.5, 0.5]]));
        let kt = g.constant(m(&[&[1.0, 0.0]]));
        let vt = g.constant(m(&[&[1.0, 2.0]]));
        let kv = g.constant(m(&[&[0.0, 1.0]]));
        let vv = g.constant(m(&[&[10.0, 20.0]]));
        let out = enhanced_scaled_dot_product_attention(
            &mut g,
            q,
            Some(TextSource { keys: kt, values: vt, mask: None }),
            Some(VisualSource { keys: kv, values: vv }),
        )
        .unwrap();
        assert_eq!(g.value(out.output).data(), &[11.0, 22.0]);
    }

    #[test]
    fn multi_head_rejects_bad_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let dims = HeadDims { heads: 2, d_model: 4, d_k: 2, d_v: 2 };
        let p = MultiHeadParams::init(&mut store, "mh", dims, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[3, 5]));
        assert!(multi_head_attention(&mut g, &p, x, x, x, None).is_err());
        let wrong = HeadDims { d_v: 3, ..dims };
        assert!(p.validate(&store, wrong).is_err());
    }
}
