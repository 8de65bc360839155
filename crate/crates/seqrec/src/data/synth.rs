//! Synthetic corpus with a planted, tunable content signal.
//!
//! Items are grouped into latent clusters. Each cluster gets a random text
//! centroid, a random image centroid, and a private pool of title tokens;
//! an item's features are its cluster centroid plus Gaussian noise, and its
//! title is drawn from the cluster pool, so feature similarity and lexical
//! similarity both correlate with cluster identity. Each user prefers one
//! cluster and, at every step of their history, stays inside it with
//! probability `signal_strength` or picks an item uniformly at random
//! otherwise. `signal_strength = 0` yields uniform transitions;
//! `signal_strength = 1` keeps every consecutive pair in one cluster.

use serde::{Deserialize, Serialize};

use super::{CatalogItem, InteractionLog, ItemCatalog};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub d_text: usize,
    pub d_image: usize,
    #[serde(default = "defaults::num_clusters")]
    pub num_clusters: usize,
    /// Probability of staying in the preferred cluster at each step, in [0,1].
    pub signal_strength: f64,
    #[serde(default = "defaults::min_seq_len")]
    pub min_seq_len: usize,
    #[serde(default = "defaults::max_seq_len")]
    pub max_seq_len: usize,
    /// Std-dev of per-item feature noise around the cluster centroid.
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    pub seed: u64,
}

mod defaults {
    pub fn num_clusters() -> usize {
        8
    }
    pub fn min_seq_len() -> usize {
        6
    }
    pub fn max_seq_len() -> usize {
        20
    }
    pub fn noise_scale() -> f64 {
        0.1
    }
}

impl SynthSpec {
    /// Baseline for the fields that have serde defaults; spread the
    /// corpus-specific fields over it.
    pub fn default_dims() -> Self {
        SynthSpec {
            num_users: 0,
            num_items: 0,
            d_text: 0,
            d_image: 0,
            num_clusters: defaults::num_clusters(),
            signal_strength: 0.0,
            min_seq_len: defaults::min_seq_len(),
            max_seq_len: defaults::max_seq_len(),
            noise_scale: defaults::noise_scale(),
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.num_clusters < 1 || self.num_items < self.num_clusters {
            return fail(format!(
                "need num_items >= num_clusters >= 1, got {} items, {} clusters",
                self.num_items, self.num_clusters
            ));
        }
        if self.num_users < 1 {
            return fail("num_users must be >= 1".to_string());
        }
        if self.d_text < 1 || self.d_image < 1 {
            return fail("feature dimensions must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail(format!("signal_strength {} outside [0,1]", self.signal_strength));
        }
        if self.min_seq_len < 3 || self.max_seq_len < self.min_seq_len {
            return fail(format!(
                "need 3 <= min_seq_len <= max_seq_len, got {}..{}",
                self.min_seq_len, self.max_seq_len
            ));
        }
        if self.noise_scale < 0.0 {
            return fail("noise_scale must be >= 0".to_string());
        }
        Ok(())
    }
}

/// Generated corpus plus the planted ground truth used by oracle tests.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub catalog: ItemCatalog,
    pub log: InteractionLog,
    /// Cluster of item id `i` at index `i-1`.
    pub item_clusters: Vec<usize>,
    /// Preferred cluster of user id `u` at index `u-1`.
    pub user_clusters: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "ro", "mi", "ta", "ve", "lu", "sha", "pon", "zen", "gri", "ful", "dar", "nim", "oxa",
    "bel", "tur",
];
const POOL_WORDS: usize = 12;
const TITLE_WORDS: std::ops::RangeInclusive<usize> = 3..=5;

fn cluster_word_pool(seed: u64, cluster: usize) -> Vec<String> {
    let mut rng = rng::substream(seed, "synth-title-pool", cluster as u64);
    (0..POOL_WORDS)
        .map(|_| {
            let syllables = rng.gen_range(2..=3);
            (0..syllables).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect()
        })
        .collect()
}

fn centroid<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;

    // Round-robin cluster assignment keeps clusters balanced.
    let item_clusters: Vec<usize> = (0..spec.num_items).map(|i| i % spec.num_clusters).collect();
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clusters];
    for (idx, &c) in item_clusters.iter().enumerate() {
        cluster_items[c].push(idx + 1);
    }

    let mut cent_rng = rng::stream(spec.seed, "synth-centroids");
    let text_centroids: Vec<Vec<f64>> =
        (0..spec.num_clusters).map(|_| centroid(spec.d_text, &mut cent_rng)).collect();
    let image_centroids: Vec<Vec<f64>> =
        (0..spec.num_clusters).map(|_| centroid(spec.d_image, &mut cent_rng)).collect();
    let pools: Vec<Vec<String>> =
        (0..spec.num_clusters).map(|c| cluster_word_pool(spec.seed, c)).collect();

    let items: Vec<CatalogItem> = (1..=spec.num_items)
        .map(|item_id| {
            let c = item_clusters[item_id - 1];
            let mut rng = rng::substream(spec.seed, "synth-item", item_id as u64);
            let noisy = |centroid: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
                centroid
                    .iter()
                    .map(|&v| v + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>()
            };
            let text_feat = noisy(&text_centroids[c], &mut rng);
            let image_feat = noisy(&image_centroids[c], &mut rng);
            let words = rng.gen_range(TITLE_WORDS);
            let title = (0..words)
                .map(|_| pools[c][rng.gen_range(0..POOL_WORDS)].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            CatalogItem { item_id, title, text_feat, image_feat }
        })
        .collect();
    let catalog = ItemCatalog::from_items(items, |p| format!("generated item #{p}"))?;

    let mut user_clusters = Vec::with_capacity(spec.num_users);
    let mut sequences = Vec::with_capacity(spec.num_users);
    for user_id in 1..=spec.num_users {
        let mut rng = rng::substream(spec.seed, "synth-user", user_id as u64);
        let preferred = rng.gen_range(0..spec.num_clusters);
        user_clusters.push(preferred);
        let len = rng.gen_range(spec.min_seq_len..=spec.max_seq_len);
        let seq: Vec<usize> = (0..len)
            .map(|_| {
                if rng.gen::<f64>() < spec.signal_strength {
                    let pool = &cluster_items[preferred];
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    rng.gen_range(1..=spec.num_items)
                }
            })
            .collect();
        sequences.push(seq);
    }
    let log = InteractionLog::from_sequences(sequences, &catalog)?;

    Ok(SynthCorpus { catalog, log, item_clusters, user_clusters })
}
