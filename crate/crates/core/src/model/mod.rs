//! Encoder–decoder transformer whose decoder cross-attention reads both the
//! encoded source sentence and a projected visual feature grid.
//!
//! Every sublayer is wrapped as `LayerNorm(x + SubLayer(x))`. Each decoder
//! layer runs masked self-attention, enhanced cross-attention and a
//! feed-forward block. When one of the two sources is absent its attention
//! branch is left out entirely, so a decoder without an image computes exactly
//! what a text-only transformer decoder would.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    enhanced_multi_head_attention, make_causal_mask, multi_head_attention, AttentionMask,
    AttentionRecord, Branch, EnhancedMultiHeadParams, HeadDims, MultiHeadParams, TextSource,
    VisualSource,
};
use crate::autodiff::{Graph, Var};
use crate::data::{VisualFeatureGrid, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: Float = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    fn init(store: &mut ParamStore, prefix: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForwardParams {
            w1: store.add(format!("{prefix}.w1"), Tensor::glorot_uniform(&[d_model, d_ff], rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
            w2: store.add(format!("{prefix}.w2"), Tensor::glorot_uniform(&[d_ff, d_model], rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub norm1: LayerNormParams,
    pub cross_attn: EnhancedMultiHeadParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm3: LayerNormParams,
}

/// Where each learnable tensor lives in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub visual_w: ParamId,
    pub visual_b: ParamId,
    pub output_w: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

impl ModelParams {
    /// Fresh parameters: Glorot-uniform matrices, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let dims = HeadDims {
            heads: c.heads,
            d_model: c.d_model,
            d_k: c.d_k,
            d_v: c.d_v,
        };
        let src_embed = store.add("src_embed", Tensor::glorot_uniform(&[c.src_vocab, c.d_model], &mut rng));
        let tgt_embed = store.add("tgt_embed", Tensor::glorot_uniform(&[c.tgt_vocab, c.d_model], &mut rng));
        let encoder = (0..c.layers)
            .map(|i| {
                let p = format!("enc{i}");
                EncoderLayerParams {
                    self_attn: MultiHeadParams::init(&mut store, &format!("{p}.self"), dims, &mut rng),
                    norm1: LayerNormParams::init(&mut store, &format!("{p}.norm1"), c.d_model),
                    ffn: FeedForwardParams::init(&mut store, &format!("{p}.ffn"), c.d_model, c.d_ff, &mut rng),
                    norm2: LayerNormParams::init(&mut store, &format!("{p}.norm2"), c.d_model),
                }
            })
            .collect();
        let decoder = (0..c.layers)
            .map(|i| {
                let p = format!("dec{i}");
                DecoderLayerParams {
                    self_attn: MultiHeadParams::init(&mut store, &format!("{p}.self"), dims, &mut rng),
                    norm1: LayerNormParams::init(&mut store, &format!("{p}.norm1"), c.d_model),
                    cross_attn: EnhancedMultiHeadParams::init(&mut store, &format!("{p}.cross"), dims, &mut rng),
                    norm2: LayerNormParams::init(&mut store, &format!("{p}.norm2"), c.d_model),
                    ffn: FeedForwardParams::init(&mut store, &format!("{p}.ffn"), c.d_model, c.d_ff, &mut rng),
                    norm3: LayerNormParams::init(&mut store, &format!("{p}.norm3"), c.d_model),
                }
            })
            .collect();
        let visual_w = store.add("visual.w", Tensor::glorot_uniform(&[c.d_feat, c.d_model], &mut rng));
        let visual_b = store.add("visual.b", Tensor::zeros(&[c.d_model]));
        let output_w = store.add("output.w", Tensor::glorot_uniform(&[c.d_model, c.tgt_vocab], &mut rng));
        Ok(ModelParams {
            config: config.clone(),
            store,
            layout: Layout {
                src_embed,
                tgt_embed,
                encoder,
                decoder,
                visual_w,
                visual_b,
                output_w,
            },
        })
    }

    /// Builds the layout for `config` and fills it from named tensors; every
    /// name must be present with the expected shape and nothing may be left
    /// over.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        if named.len() != params.store.len() {
            return Err(Error::ExtentMismatch {
                what: "parameter count",
                expected: params.store.len(),
                found: named.len(),
            });
        }
        for (name, tensor) in named {
            let id = params
                .store
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            params.store.set(id, tensor)?;
        }
        Ok(params)
    }

    /// All visual-branch parameters: the projection plus every head's
    /// visual key/value matrices.
    pub fn visual_branch_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.layout.visual_w, self.layout.visual_b];
        for layer in &self.layout.decoder {
            for h in &layer.cross_attn.heads {
                ids.extend([h.w_kv, h.w_vv]);
            }
        }
        ids
    }
}

/// Sinusoidal encoding: sin on even dimensions, cos on odd ones.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d_model]);
    for pos in 0..len {
        for i in 0..d_model {
            let rate = (10_000.0 as Float).powf((2 * (i / 2)) as Float / d_model as Float);
            let angle = pos as Float / rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Embedding rows scaled by √d_model plus the positional encoding.
pub fn embed_with_positions(g: &mut Graph, table: ParamId, tokens: &[usize]) -> Result<Var> {
    let t = g.param(table);
    let d_model = g.value(t).cols();
    let rows = g.gather_rows(t, tokens)?;
    let scaled = g.scale(rows, (d_model as Float).sqrt());
    let pe = g.constant(positional_encoding(tokens.len(), d_model));
    g.add(scaled, pe)
}

fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams) -> Result<Var> {
    let gain = g.param(p.gain);
    let bias = g.param(p.bias);
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn feed_forward(g: &mut Graph, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let w1 = g.param(p.w1);
    let b1 = g.param(p.b1);
    let w2 = g.param(p.w2);
    let b2 = g.param(p.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// `LayerNorm(x + Dropout(sublayer))`.
fn residual(g: &mut Graph, x: Var, sub: Var, norm: &LayerNormParams, p_drop: Float) -> Result<Var> {
    let sub = g.dropout(sub, p_drop)?;
    let sum = g.add(x, sub)?;
    layer_norm(g, sum, norm)
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, size: vocab }),
        None => Ok(()),
    }
}

/// Runs the N encoder layers over `src`. `src_mask` is the (n × n) key
/// padding mask when the sequence is padded.
pub fn encoder_forward(
    g: &mut Graph,
    params: &ModelParams,
    src: &[usize],
    src_mask: Option<&AttentionMask>,
) -> Result<Var> {
    let cfg = &params.config;
    check_tokens(src, cfg.src_vocab)?;
    let x = embed_with_positions(g, params.layout.src_embed, src)?;
    let mut x = g.dropout(x, cfg.p_drop_residual)?;
    for layer in &params.layout.encoder {
        let attn = multi_head_attention(g, &layer.self_attn, x, x, x, src_mask)?;
        x = residual(g, x, attn.output, &layer.norm1, cfg.p_drop_residual)?;
        let ff = feed_forward(g, x, &layer.ffn)?;
        x = residual(g, x, ff, &layer.norm2, cfg.p_drop_residual)?;
    }
    Ok(x)
}

/// `A · W_vis + b`, followed by dropout in training graphs.
pub fn project_visual(g: &mut Graph, params: &ModelParams, grid: &VisualFeatureGrid) -> Result<Var> {
    let cfg = &params.config;
    if grid.d_feat() != cfg.d_feat {
        return Err(Error::ExtentMismatch {
            what: "visual feature width",
            expected: cfg.d_feat,
            found: grid.d_feat(),
        });
    }
    if grid.len() != cfg.grid_len {
        return Err(Error::ExtentMismatch {
            what: "visual grid length",
            expected: cfg.grid_len,
            found: grid.len(),
        });
    }
    let a = g.constant(grid.to_tensor());
    let w = g.param(params.layout.visual_w);
    let b = g.param(params.layout.visual_b);
    let proj = g.matmul(a, w)?;
    let proj = g.add_row(proj, b)?;
    g.dropout(proj, cfg.p_drop_visual)
}

/// Encoded source sentence as seen by the decoder.
#[derive(Clone, Copy)]
pub struct TextMemory<'m> {
    pub states: Var,
    /// (target length × source length) key padding mask.
    pub mask: Option<&'m AttentionMask>,
}

pub struct DecoderOutput {
    /// target length × |V_y|
    pub logits: Var,
    pub records: Vec<AttentionRecord>,
}

/// Decoder stack over a target prefix. `tgt_mask` defaults to the causal
/// mask. At least one of `text` and `visual` must be present.
pub fn decoder_forward(
    g: &mut Graph,
    params: &ModelParams,
    tgt: &[usize],
    tgt_mask: Option<&AttentionMask>,
    text: Option<TextMemory>,
    visual: Option<Var>,
    capture: bool,
) -> Result<DecoderOutput> {
    if text.is_none() && visual.is_none() {
        return Err(Error::invalid("decoder needs a text or a visual source"));
    }
    let cfg = &params.config;
    check_tokens(tgt, cfg.tgt_vocab)?;
    let causal;
    let tgt_mask = match tgt_mask {
        Some(m) => m,
        None => {
            causal = make_causal_mask(tgt.len())?;
            &causal
        }
    };
    let x = embed_with_positions(g, params.layout.tgt_embed, tgt)?;
    let mut x = g.dropout(x, cfg.p_drop_residual)?;
    let mut records = Vec::new();
    for (li, layer) in params.layout.decoder.iter().enumerate() {
        let attn = multi_head_attention(g, &layer.self_attn, x, x, x, Some(tgt_mask))?;
        if capture {
            for (hi, w) in attn.weights.iter().enumerate() {
                records.push(AttentionRecord {
                    layer: li,
                    head: hi,
                    branch: Branch::SelfAttn,
                    weights: g.value(*w).clone(),
                });
            }
        }
        x = residual(g, x, attn.output, &layer.norm1, cfg.p_drop_residual)?;

        let text_src = text.map(|t| TextSource {
            keys: t.states,
            values: t.states,
            mask: t.mask,
        });
        let visual_src = visual.map(|v| VisualSource { keys: v, values: v });
        let cross = enhanced_multi_head_attention(g, &layer.cross_attn, x, text_src, visual_src)?;
        if capture {
            for (hi, h) in cross.heads.iter().enumerate() {
                for (branch, w) in [(Branch::Text, h.text), (Branch::Visual, h.visual)] {
                    if let Some(w) = w {
                        records.push(AttentionRecord {
                            layer: li,
                            head: hi,
                            branch,
                            weights: g.value(w).clone(),
                        });
                    }
                }
            }
        }
        x = residual(g, x, cross.output, &layer.norm2, cfg.p_drop_residual)?;

        let ff = feed_forward(g, x, &layer.ffn)?;
        x = residual(g, x, ff, &layer.norm3, cfg.p_drop_residual)?;
    }
    let w = g.param(params.layout.output_w);
    let logits = g.matmul(x, w)?;
    Ok(DecoderOutput { logits, records })
}

/// Sources for one sentence: either may be absent, not both.
#[derive(Clone, Copy, Default)]
pub struct Sources<'a> {
    pub src: Option<&'a [usize]>,
    pub grid: Option<&'a VisualFeatureGrid>,
}

/// Encodes whichever sources are present and returns the decoder's view of
/// them. Unpadded: no source mask.
pub fn encode_sources<'m>(
    g: &mut Graph,
    params: &ModelParams,
    sources: Sources,
) -> Result<(Option<TextMemory<'m>>, Option<Var>)> {
    if sources.src.is_none() && sources.grid.is_none() {
        return Err(Error::invalid("at least one source (text or image) is required"));
    }
    let text = match sources.src {
        Some(src) => Some(TextMemory {
            states: encoder_forward(g, params, src, None)?,
            mask: None,
        }),
        None => None,
    };
    let visual = match sources.grid {
        Some(grid) => Some(project_visual(g, params, grid)?),
        None => None,
    };
    Ok((text, visual))
}

/// Decoder logits for `tgt[..n-1]`; row j scores `tgt[j + 1]`.
pub fn teacher_forced_logits(g: &mut Graph, params: &ModelParams, sources: Sources, tgt: &[usize]) -> Result<Var> {
    if tgt.len() < 2 {
        return Err(Error::invalid("teacher forcing needs a target of at least two tokens"));
    }
    let (text, visual) = encode_sources(g, params, sources)?;
    Ok(decoder_forward(g, params, &tgt[..tgt.len() - 1], None, text, visual, false)?.logits)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[Float]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` tokens. The returned
/// sequence excludes BOS and EOS.
pub fn greedy_decode(params: &ModelParams, sources: Sources, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut g = Graph::new(&params.store);
    let (text, visual) = encode_sources(&mut g, params, sources)?;
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_len {
        let dec = decoder_forward(&mut g, params, &prefix, None, text, visual, false)?;
        let logits = g.value(dec.logits);
        let next = argmax(logits.row(logits.rows() - 1));
        if next == EOS_ID {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            src_vocab: 12,
            tgt_vocab: 10,
            grid_len: 4,
            d_feat: 6,
            p_drop_visual: 0.0,
            p_drop_residual: 0.0,
            max_len: 20,
        }
    }

    fn grid(seed: u64, l: usize, d: usize) -> VisualFeatureGrid {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisualFeatureGrid::new(l, d, (0..l * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_term_at_origin() {
        let pe = positional_encoding(3, 8);
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(2, 0) - 2f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn embedding_lookup_matches_direct_indexing() {
        let p = ModelParams::init(&tiny(1), 1).unwrap();
        let mut g = Graph::new(&p.store);
        let e = embed_with_positions(&mut g, p.layout.tgt_embed, &[7, 3, 7]).unwrap();
        let table = p.store.get(p.layout.tgt_embed);
        let pe = positional_encoding(3, 8);
        let scale = 8f64.sqrt();
        for (pos, &tok) in [7usize, 3, 7].iter().enumerate() {
            for j in 0..8 {
                let expected = table.get(tok, j) * scale + pe.get(pos, j);
                assert_eq!(g.value(e).get(pos, j), expected);
            }
        }
        // Same token at positions 0 and 2 differs exactly by the positional term.
        for j in 0..8 {
            let diff = g.value(e).get(2, j) - g.value(e).get(0, j);
            assert!((diff - (pe.get(2, j) - pe.get(0, j))).abs() < 1e-12);
        }
        assert!(matches!(
            embed_with_positions(&mut g, p.layout.tgt_embed, &[10]),
            Err(Error::TokenOutOfRange { id: 10, size: 10 })
        ));
    }

    #[test]
    fn zero_layer_encoder_returns_embedding() {
        let p = ModelParams::init(&tiny(0), 2).unwrap();
        let mut g = Graph::new(&p.store);
        let enc = encoder_forward(&mut g, &p, &[4, 5], None).unwrap();
        let emb = embed_with_positions(&mut g, p.layout.src_embed, &[4, 5]).unwrap();
        assert_eq!(g.value(enc), g.value(emb));
    }

    #[test]
    fn single_token_self_attention_is_one() {
        let p = ModelParams::init(&tiny(1), 3).unwrap();
        let mut g = Graph::new(&p.store);
        let x = embed_with_positions(&mut g, p.layout.src_embed, &[5]).unwrap();
        let out = multi_head_attention(&mut g, &p.layout.encoder[0].self_attn, x, x, x, None).unwrap();
        for w in out.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn projection_cases() {
        let mut cfg = tiny(1);
        cfg.d_feat = 8;
        let mut p = ModelParams::init(&cfg, 4).unwrap();
        let a = grid(5, 4, 8);
        p.store.set(p.layout.visual_w, Tensor::identity(8)).unwrap();
        let mut g = Graph::new(&p.store);
        let v = project_visual(&mut g, &p, &a).unwrap();
        assert_eq!(g.value(v), &a.to_tensor());

        p.store.set(p.layout.visual_w, Tensor::zeros(&[8, 8])).unwrap();
        let mut g = Graph::new(&p.store);
        let v = project_visual(&mut g, &p, &a).unwrap();
        assert!(g.value(v).data().iter().all(|x| *x == 0.0));

        let wrong = grid(5, 4, 7);
        assert!(project_visual(&mut g, &p, &wrong).is_err());
    }

    #[test]
    fn decoder_requires_a_source() {
        let p = ModelParams::init(&tiny(1), 6).unwrap();
        let mut g = Graph::new(&p.store);
        assert!(decoder_forward(&mut g, &p, &[1, 4], None, None, None, false).is_err());
        assert!(greedy_decode(&p, Sources::default(), 5).is_err());
    }

    #[test]
    fn caption_mode_attends_only_to_grid() {
        let p = ModelParams::init(&tiny(1), 7).unwrap();
        let a = grid(1, 4, 6);
        let mut g = Graph::new(&p.store);
        let (text, visual) = encode_sources(&mut g, &p, Sources { src: None, grid: Some(&a) }).unwrap();
        let out = decoder_forward(&mut g, &p, &[1, 5, 6], None, text, visual, true).unwrap();
        assert!(out.records.iter().all(|r| r.branch != Branch::Text));
        assert!(out.records.iter().any(|r| r.branch == Branch::Visual));
    }

    #[test]
    fn output_rows_are_distributions() {
        let p = ModelParams::init(&tiny(2), 8).unwrap();
        let a = grid(2, 4, 6);
        let mut g = Graph::new(&p.store);
        let (text, visual) = encode_sources(&mut g, &p, Sources { src: Some(&[4, 5, 6]), grid: Some(&a) }).unwrap();
        let out = decoder_forward(&mut g, &p, &[1, 5, 6, 7], None, text, visual, false).unwrap();
        let probs = softmax_rows(g.value(out.logits));
        for i in 0..probs.rows() {
            assert!((probs.row(i).iter().sum::<Float>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forced_eos_gives_empty_translation() {
        let mut p = ModelParams::init(&tiny(1), 9).unwrap();
        let norm = p.layout.decoder[0].norm3.clone();
        p.store.set(norm.gain, Tensor::zeros(&[8])).unwrap();
        p.store.set(norm.bias, Tensor::filled(&[8], 1.0)).unwrap();
        let mut w = Tensor::zeros(&[8, 10]);
        for i in 0..8 {
            w.set(i, EOS_ID, 1.0);
        }
        p.store.set(p.layout.output_w, w).unwrap();
        let out = greedy_decode(&p, Sources { src: Some(&[4, 5]), grid: None }, 10).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_respects_max_len_and_is_deterministic() {
        let p = ModelParams::init(&tiny(1), 10).unwrap();
        let a = grid(3, 4, 6);
        let s = Sources { src: Some(&[4, 5]), grid: Some(&a) };
        assert!(greedy_decode(&p, s, 1).unwrap().len() <= 1);
        assert_eq!(greedy_decode(&p, s, 6).unwrap(), greedy_decode(&p, s, 6).unwrap());
        assert!(greedy_decode(&p, s, 0).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
