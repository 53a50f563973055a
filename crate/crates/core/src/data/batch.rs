use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{InstanceKind, TrainingInstance};
use super::vocab::PAD_ID;
use crate::attention::AttentionMask;
use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Sequences right-padded with PAD to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSequences {
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl PaddedSequences {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let tokens = seqs
            .iter()
            .map(|s| {
                let mut row = s.to_vec();
                row.resize(width, PAD_ID);
                row
            })
            .collect();
        PaddedSequences {
            tokens,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            width,
        }
    }

    /// `is_pad[i][j]` is true exactly at padded positions.
    pub fn padding_positions(&self) -> Vec<Vec<bool>> {
        self.lengths
            .iter()
            .map(|&len| (0..self.width).map(|j| j >= len).collect())
            .collect()
    }

    /// Key padding mask of row `i` for `n_q` queries.
    pub fn key_mask(&self, i: usize, n_q: usize) -> Result<AttentionMask> {
        AttentionMask::key_padding(self.lengths[i], n_q, self.width)
    }
}

/// Up to B instances of a single kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub kind: InstanceKind,
    /// Indices into the instance slice the batch was built from.
    pub members: Vec<usize>,
    pub src: Option<PaddedSequences>,
    pub tgt: PaddedSequences,
}

impl Batch {
    pub fn from_members(instances: &[TrainingInstance], members: Vec<usize>) -> Result<Self> {
        let Some(&first) = members.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let kind = instances[first].kind;
        if members.iter().any(|&m| instances[m].kind != kind) {
            return Err(Error::invalid("batch mixes instance kinds"));
        }
        let src = if kind.has_text() {
            let seqs: Vec<&[usize]> = members.iter().map(|&m| instances[m].src.as_deref().unwrap()).collect();
            Some(PaddedSequences::new(&seqs))
        } else {
            None
        };
        let seqs: Vec<&[usize]> = members.iter().map(|&m| instances[m].tgt.as_slice()).collect();
        Ok(Batch {
            kind,
            members,
            src,
            tgt: PaddedSequences::new(&seqs),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Shuffles by `seed`, groups into kind-homogeneous batches of at most
/// `batch_size`, then shuffles the batch order. Every instance appears in
/// exactly one batch.
pub fn make_batches(instances: &[TrainingInstance], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for kind in [InstanceKind::Multimodal, InstanceKind::TextPair, InstanceKind::Caption] {
        let of_kind: Vec<usize> = order.iter().copied().filter(|&i| instances[i].kind == kind).collect();
        for chunk in of_kind.chunks(batch_size) {
            batches.push(Batch::from_members(instances, chunk.to_vec())?);
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS_ID, EOS_ID};

    fn instances(n: usize, kinds: &[InstanceKind]) -> Vec<TrainingInstance> {
        (0..n)
            .map(|i| {
                let tgt = (0..1 + i % 3).map(|k| 4 + k).chain([EOS_ID]).fold(vec![BOS_ID], |mut v, t| {
                    v.push(t);
                    v
                });
                let src = vec![4; 1 + i % 4];
                match kinds[i % kinds.len()] {
                    InstanceKind::Multimodal => TrainingInstance::multimodal(i, src, tgt, 0),
                    InstanceKind::TextPair => TrainingInstance::text_pair(i, src, tgt),
                    InstanceKind::Caption => TrainingInstance::caption(i, tgt, 0),
                }
            })
            .collect()
    }

    #[test]
    fn single_kind_sixty_four_in_two_batches() {
        let inst = instances(64, &[InstanceKind::TextPair]);
        let b = make_batches(&inst, 32, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.len() == 32));
        assert!(make_batches(&inst, 0, 1).is_err());
    }

    #[test]
    fn mixed_kinds_never_share_a_batch_and_cover_the_epoch() {
        let inst = instances(
            101,
            &[InstanceKind::Multimodal, InstanceKind::TextPair, InstanceKind::Caption, InstanceKind::TextPair],
        );
        let batches = make_batches(&inst, 8, 7).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        for b in &batches {
            assert!(b.members.iter().all(|&m| inst[m].kind == b.kind));
            assert_eq!(b.src.is_some(), b.kind.has_text());
            seen.extend(b.members.iter().map(|&m| inst[m].id));
        }
        seen.sort_unstable();
        let mut expected: Vec<usize> = inst.iter().map(|i| i.id).collect();
        expected.sort_unstable();
        assert_eq!(seen, expected);
    }

    #[test]
    fn same_seed_same_batches() {
        let inst = instances(50, &[InstanceKind::Multimodal, InstanceKind::TextPair]);
        assert_eq!(make_batches(&inst, 6, 3).unwrap(), make_batches(&inst, 6, 3).unwrap());
        assert_ne!(make_batches(&inst, 6, 3).unwrap(), make_batches(&inst, 6, 4).unwrap());
    }

    #[test]
    fn padding_marks_exactly_padded_positions() {
        let inst = instances(12, &[InstanceKind::TextPair]);
        for b in make_batches(&inst, 5, 2).unwrap() {
            let tgt = &b.tgt;
            for (row, pads) in tgt.tokens.iter().zip(tgt.padding_positions()) {
                for (tok, pad) in row.iter().zip(pads) {
                    assert_eq!(*tok == PAD_ID, pad);
                }
                assert_eq!(row.len(), tgt.width);
            }
            let m = tgt.key_mask(0, 2).unwrap();
            for j in 0..tgt.width {
                assert_eq!(m.is_allowed(1, j), j < tgt.lengths[0]);
            }
        }
    }
}
