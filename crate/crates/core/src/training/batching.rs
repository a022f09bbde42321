use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::transformer::{Batch, ModelConfig};

/// Source and target token ids of one pair, without bos/eos.
pub type TokenPair = (Vec<u32>, Vec<u32>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionLimits {
    pub max_source: usize,
    pub max_target: usize,
}

impl From<&ModelConfig> for PositionLimits {
    fn from(c: &ModelConfig) -> Self {
        PositionLimits {
            max_source: c.max_source_positions,
            max_target: c.max_target_positions,
        }
    }
}

/// One epoch's batches plus the indices of pairs that were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// `indices[b]` lists the input positions packed into `batches[b]`.
    pub indices: Vec<Vec<usize>>,
    pub skipped: Vec<usize>,
}

/// Padded width of a pair: the longer of its source and `bos + target` rows.
fn width(pair: &TokenPair) -> usize {
    pair.0.len().max(pair.1.len() + 1)
}

fn seed_for_epoch(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Length-bucketed batches under a padded-token budget.
///
/// Pairs with an empty source or exceeding the position limits are skipped.
/// The rest are sorted by width and packed greedily so that
/// `rows × max_width ≤ max_tokens`; a pair too wide to share a batch still
/// forms a batch of its own. Batch order is shuffled per `(seed, epoch)`.
pub fn make_batches(
    pairs: &[TokenPair],
    max_tokens: usize,
    limits: PositionLimits,
    seed: u64,
    epoch: u64,
) -> BatchPlan {
    let mut skipped = Vec::new();
    let mut eligible = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        if p.0.is_empty() || p.0.len() > limits.max_source || p.1.len() + 1 > limits.max_target {
            skipped.push(i);
        } else {
            eligible.push(i);
        }
    }
    eligible.sort_by_key(|&i| (width(&pairs[i]), pairs[i].0.len(), i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_width = 0;
    for i in eligible {
        let w = width(&pairs[i]);
        let grown = (current.len() + 1) * current_width.max(w);
        if !current.is_empty() && grown > max_tokens {
            groups.push(std::mem::take(&mut current));
            current_width = 0;
        }
        current_width = current_width.max(w);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for_epoch(seed, epoch)));

    let batches = groups
        .iter()
        .map(|g| {
            let rows: Vec<&TokenPair> = g.iter().map(|&i| &pairs[i]).collect();
            let refs: Vec<(&[u32], &[u32])> = rows.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
            Batch::from_pairs(&refs)
        })
        .collect();
    BatchPlan {
        batches,
        indices: groups,
        skipped,
    }
}
