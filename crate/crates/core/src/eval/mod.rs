//! Translation quality metrics and attention export.

mod bleu;
mod export;

pub use bleu::{bleu4, sentence_bleu4, tokenize_lines, BleuReport, MAX_ORDER};
pub use export::{
    capture_attention, export_attention, heatmap_pgm, parse_pgm, AttentionDump, DumpRecord, ExportOptions,
    GridGeometry,
};

use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::{Dataset, TrainingInstance, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, teacher_forced_logits, ModelParams, Sources};

pub fn sources_of<'a>(dataset: &'a Dataset, inst: &'a TrainingInstance) -> Sources<'a> {
    Sources {
        src: inst.src.as_deref(),
        grid: dataset.grid(inst),
    }
}

/// Summed negative log-likelihood and predicted-token count of one
/// instance under teacher forcing.
pub fn instance_nll(params: &ModelParams, dataset: &Dataset, inst: &TrainingInstance) -> Result<(f64, usize)> {
    let mut g = Graph::new(&params.store);
    let logits = teacher_forced_logits(&mut g, params, sources_of(dataset, inst), &inst.tgt)?;
    let targets = &inst.tgt[1..];
    let count = targets.iter().filter(|&&t| t != PAD_ID).count();
    let loss = g.cross_entropy(logits, targets, PAD_ID, 0.0)?;
    Ok((g.value(loss).item() * count as f64, count))
}

/// `exp` of the mean per-token negative log-likelihood over the corpus.
pub fn perplexity(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let parts = dataset
        .instances
        .par_iter()
        .map(|inst| instance_nll(params, dataset, inst))
        .collect::<Result<Vec<_>>>()?;
    let (nll, count) = parts.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::invalid("perplexity is not finite"));
    }
    Ok(ppl)
}

/// Greedy translations of every instance, in corpus order.
pub fn translate_dataset(params: &ModelParams, dataset: &Dataset, max_len: usize) -> Result<Vec<Vec<usize>>> {
    dataset
        .instances
        .par_iter()
        .map(|inst| greedy_decode(params, sources_of(dataset, inst), max_len))
        .collect()
}

/// Corpus BLEU-4 of greedy translations against the dataset targets.
pub fn dataset_bleu(params: &ModelParams, dataset: &Dataset, max_len: usize) -> Result<BleuReport> {
    let hyps = translate_dataset(params, dataset, max_len)?;
    let refs: Vec<Vec<usize>> = dataset.instances.iter().map(|i| i.reference().to_vec()).collect();
    bleu4(&hyps, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS_ID, EOS_ID};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            src_vocab: 9,
            tgt_vocab: 7,
            grid_len: 4,
            d_feat: 3,
            p_drop_visual: 0.5,
            p_drop_residual: 0.0,
            max_len: 20,
        }
    }

    fn text_set() -> Dataset {
        Dataset::new(
            vec![
                TrainingInstance::text_pair(0, vec![4, 5], vec![BOS_ID, 4, 5, EOS_ID]),
                TrainingInstance::text_pair(1, vec![6], vec![BOS_ID, 6, EOS_ID]),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let mut p = ModelParams::init(&cfg(), 3).unwrap();
        let w = p.layout.output_w;
        p.store.set(w, Tensor::zeros(&[8, 7])).unwrap();
        let ppl = perplexity(&p, &text_set()).unwrap();
        assert!((ppl - 7.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn perplexity_matches_token_by_token_product() {
        let p = ModelParams::init(&cfg(), 4).unwrap();
        let data = text_set();
        // Hand product: the probability of each next token read off a fresh
        // softmax of its logits row, multiplied across the corpus.
        let mut log_prod = 0.0;
        let mut n = 0;
        for inst in &data.instances {
            let mut g = Graph::new(&p.store);
            let logits = teacher_forced_logits(&mut g, &p, sources_of(&data, inst), &inst.tgt).unwrap();
            let probs = crate::autodiff::softmax_rows(g.value(logits));
            for (j, &t) in inst.tgt[1..].iter().enumerate() {
                log_prod += probs.get(j, t).ln();
                n += 1;
            }
        }
        let expected = (-log_prod / n as f64).exp();
        assert!((perplexity(&p, &data).unwrap() - expected).abs() < 1e-9);
    }
}
