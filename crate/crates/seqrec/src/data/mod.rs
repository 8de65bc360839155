//! Catalogs, interaction logs, leave-one-out splits, and batching.
//!
//! Item ids are dense `1..=num_items`; id 0 is reserved for left-padding and
//! never appears as a target. User ids are dense `1..=num_users`.

pub mod io;
pub mod synth;

pub use io::{load_catalog, load_interactions, save_catalog, save_interactions};
pub use synth::{synth_generate, SynthCorpus, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;
use rand::seq::SliceRandom;

/// One catalog entry: identity plus raw (frozen) content features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: usize,
    pub title: String,
    pub text_feat: Vec<f64>,
    pub image_feat: Vec<f64>,
}

/// All items, ids dense in `1..=len`, feature lengths uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    d_text: usize,
    d_image: usize,
}

impl ItemCatalog {
    /// Validate and index a list of items. Items may arrive in any order;
    /// they are sorted by id. `origin` describes each item's source position
    /// for error messages (e.g. a file line number).
    pub fn from_items(items: Vec<CatalogItem>, origin: impl Fn(usize) -> String) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("catalog is empty".to_string()));
        }
        let n = items.len();
        let d_text = items[0].text_feat.len();
        let d_image = items[0].image_feat.len();
        let mut seen = vec![false; n + 1];
        for (pos, item) in items.iter().enumerate() {
            let at = origin(pos);
            if item.item_id == 0 || item.item_id > n {
                return Err(Error::Data(format!(
                    "{at}: item_id {} outside dense range 1..={n}",
                    item.item_id
                )));
            }
            if seen[item.item_id] {
                return Err(Error::Data(format!("{at}: duplicate item_id {}", item.item_id)));
            }
            seen[item.item_id] = true;
            if item.title.is_empty() {
                return Err(Error::Data(format!("{at}: empty title for item {}", item.item_id)));
            }
            if item.text_feat.len() != d_text {
                return Err(Error::Data(format!(
                    "{at}: ragged text_feat length {} (expected {d_text})",
                    item.text_feat.len()
                )));
            }
            if item.image_feat.len() != d_image {
                return Err(Error::Data(format!(
                    "{at}: ragged image_feat length {} (expected {d_image})",
                    item.image_feat.len()
                )));
            }
        }
        let mut items = items;
        items.sort_by_key(|i| i.item_id);
        Ok(ItemCatalog { items, d_text, d_image })
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn d_image(&self) -> usize {
        self.d_image
    }

    /// Item by 1-based id.
    pub fn item(&self, item_id: usize) -> Result<&CatalogItem> {
        self.items
            .get(item_id.wrapping_sub(1))
            .ok_or_else(|| Error::Index(format!("item_id {item_id} not in catalog")))
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    /// Raw text features as a `(num_items+1) x d_text` table; row 0 (padding)
    /// is all-zeros.
    pub fn text_feature_table(&self) -> Matrix {
        Self::table(&self.items, self.d_text, |i| &i.text_feat)
    }

    /// Raw image features, same layout as [`Self::text_feature_table`].
    pub fn image_feature_table(&self) -> Matrix {
        Self::table(&self.items, self.d_image, |i| &i.image_feat)
    }

    fn table<'a>(
        items: &'a [CatalogItem],
        dim: usize,
        select: impl Fn(&'a CatalogItem) -> &'a [f64],
    ) -> Matrix {
        let mut m = Matrix::zeros(items.len() + 1, dim);
        for item in items {
            m.row_mut(item.item_id).copy_from_slice(select(item));
        }
        m
    }
}

/// Chronological per-user sequences, user ids dense in `1..=len`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    sequences: Vec<Vec<usize>>,
}

impl InteractionLog {
    /// Validate sequences against the catalog. `sequences[u-1]` is user `u`.
    pub fn from_sequences(sequences: Vec<Vec<usize>>, catalog: &ItemCatalog) -> Result<Self> {
        for (idx, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("user {} has no interactions", idx + 1)));
            }
            for &item in seq {
                if item == 0 || item > catalog.num_items() {
                    return Err(Error::Data(format!(
                        "user {} references unknown item {item}",
                        idx + 1
                    )));
                }
            }
        }
        Ok(InteractionLog { sequences })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    /// Sequence by 1-based user id.
    pub fn sequence(&self, user_id: usize) -> &[usize] {
        &self.sequences[user_id - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.sequences.iter().enumerate().map(|(i, s)| (i + 1, s.as_slice()))
    }
}

/// One user's leave-one-out partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: usize,
    pub train_prefix: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

/// Per-user splits plus the count of users too short to split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub skipped_users: usize,
}

/// Last item to test, penultimate to validation, the rest to train.
/// Users with fewer than 3 interactions are skipped and counted.
pub fn leave_one_out_split(log: &InteractionLog) -> SplitDataset {
    let mut users = Vec::new();
    let mut skipped = 0;
    for (user_id, seq) in log.iter() {
        if seq.len() < 3 {
            skipped += 1;
            continue;
        }
        users.push(UserSplit {
            user_id,
            train_prefix: seq[..seq.len() - 2].to_vec(),
            valid_target: seq[seq.len() - 2],
            test_target: seq[seq.len() - 1],
        });
    }
    SplitDataset { users, skipped_users: skipped }
}

/// Keep the most recent `n` items; left-pad shorter sequences with 0.
/// The mask marks real (non-pad) positions.
pub fn pad_truncate(seq: &[usize], n: usize) -> (Vec<usize>, Vec<bool>) {
    debug_assert!(n >= 1);
    let tail = if seq.len() > n { &seq[seq.len() - n..] } else { seq };
    let pad = n - tail.len();
    let mut row = vec![0usize; n];
    let mut mask = vec![false; n];
    row[pad..].copy_from_slice(tail);
    mask[pad..].fill(true);
    (row, mask)
}

/// Which (input, target) pair a batch carries for each user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// input = train_prefix minus its last element, target = that element
    Train,
    /// input = train_prefix, target = valid_target
    Valid,
    /// input = train_prefix + valid_target, target = test_target
    Test,
}

/// A fixed-length, left-padded batch of sequences with one target each.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub user_ids: Vec<usize>,
    /// B x n item ids, 0 = padding
    pub id_seqs: Vec<Vec<usize>>,
    /// B x n, true at real positions
    pub mask: Vec<Vec<bool>>,
    /// B item ids (never 0)
    pub targets: Vec<usize>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }
}

/// Cut the split into batches. Train mode shuffles users deterministically
/// under `seed` (the same seed gives the same order on every call); other
/// modes keep ascending user order. Train mode skips users whose prefix is
/// too short to yield an (input, target) pair.
pub fn batch_iterator(
    split: &SplitDataset,
    batch_size: usize,
    n: usize,
    mode: BatchMode,
    seed: u64,
) -> Vec<PaddedBatch> {
    debug_assert!(batch_size >= 1 && n >= 1);
    let mut instances: Vec<(usize, Vec<usize>, usize)> = split
        .users
        .iter()
        .filter_map(|u| match mode {
            BatchMode::Train => {
                let len = u.train_prefix.len();
                (len >= 2)
                    .then(|| (u.user_id, u.train_prefix[..len - 1].to_vec(), u.train_prefix[len - 1]))
            }
            BatchMode::Valid => Some((u.user_id, u.train_prefix.clone(), u.valid_target)),
            BatchMode::Test => {
                let mut input = u.train_prefix.clone();
                input.push(u.valid_target);
                Some((u.user_id, input, u.test_target))
            }
        })
        .collect();
    if mode == BatchMode::Train {
        instances.shuffle(&mut rng::stream(seed, "batch-shuffle"));
    }

    let mut batches = Vec::new();
    for chunk in instances.chunks(batch_size) {
        let mut batch = PaddedBatch {
            user_ids: Vec::with_capacity(chunk.len()),
            id_seqs: Vec::with_capacity(chunk.len()),
            mask: Vec::with_capacity(chunk.len()),
            targets: Vec::with_capacity(chunk.len()),
        };
        for (user_id, input, target) in chunk {
            let (row, mask) = pad_truncate(input, n);
            batch.user_ids.push(*user_id);
            batch.id_seqs.push(row);
            batch.mask.push(mask);
            batch.targets.push(*target);
        }
        batches.push(batch);
    }
    batches
}
