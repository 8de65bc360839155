//! The three-tower preference network.
//!
//! A user's padded item-ID sequence flows through three coupled towers that
//! share one position table:
//!
//! * an **ID encoder**: causal self-attention blocks over learned item-ID
//!   embeddings,
//! * a **content encoder**: the same architecture over L2-fused text+image
//!   item features (frozen tables passed through trainable adapters),
//! * a **mix decoder**: one cross-attention block with the ID stream as
//!   queries and the content stream as keys/values.
//!
//! The three final hidden states are concatenated and projected to the
//! aggregated preference vector, which is scored against every item-ID
//! embedding by inner product. Selected ID-tower matrices can be wrapped
//! with low-rank adapters (`W + B·A`, `B` zero-initialized) so a pretrained
//! ID pathway stays frozen while the wrapper trains.
//!
//! All graph-building methods borrow the parameter store explicitly, so the
//! same model definition can run against a perturbed copy of its weights —
//! that is what the finite-difference gradient checks do.

mod checkpoint;

pub use checkpoint::{Checkpoint, SavedTensor};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::numerics::{Graph, MaskMatrix, Matrix, NodeId, ParamId, ParamStore};
use crate::rng;

/// Standard deviation for truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-8;
/// Below this norm, content fusion divides by the guard instead of the norm,
/// so an all-zero row stays zero instead of turning into NaN.
pub const FUSE_EPS: f64 = 1e-12;

/// Architecture and loss hyperparameters. Serialized into checkpoints so a
/// saved model is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Padded sequence length n; inputs must arrive padded to exactly this.
    pub max_seq_len: usize,
    /// Hidden width d of every tower.
    pub latent_dim: usize,
    /// Self-attention blocks per encoder tower (the mix decoder always has one).
    pub num_blocks: usize,
    /// Column split of the attention space; 1 reproduces the plain equations.
    pub num_heads: usize,
    /// Rate for attention-weight and FFN-output dropout during training.
    pub dropout: f64,
    /// Wrap each attention/FFN sublayer in residual + layer norm. Off makes
    /// a block literally `FFN(Attention(x))`, which the oracle tests exploit.
    pub residual_layer_norm: bool,
    /// Softmax temperature shared by the contrastive losses.
    pub temperature: f64,
    /// Weight of the content-alignment loss term in combined training.
    pub content_loss_weight: f64,
    /// Coefficient of the squared-norm regularizer over the embedding tables.
    pub weight_decay: f64,
    /// Rank of the low-rank ID-tower adapters; 0 disables wrapping.
    pub lora_rank: usize,
    /// Seed for weight initialization (and the dropout streams derived by
    /// the trainer).
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_seq_len: 50,
            latent_dim: 64,
            num_blocks: 2,
            num_heads: 1,
            dropout: 0.5,
            residual_layer_norm: true,
            temperature: 0.05,
            content_loss_weight: 0.1,
            weight_decay: 1e-4,
            lora_rank: 8,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_seq_len == 0 || self.latent_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Parameter(
                "sequence length, latent dim, and block count must be positive".into(),
            ));
        }
        if self.num_heads == 0 || self.latent_dim % self.num_heads != 0 {
            return Err(Error::Parameter(format!(
                "latent dim {} does not split into {} attention head(s)",
                self.latent_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.content_loss_weight) {
            return Err(Error::Parameter(format!(
                "content loss weight {} outside [0, 1]",
                self.content_loss_weight
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if self.lora_rank >= self.latent_dim {
            return Err(Error::Parameter(format!(
                "low-rank adapter rank {} must be below the latent dim {}",
                self.lora_rank, self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Which towers a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardPathway {
    /// ID encoder only; scores come straight from its final hidden state.
    IdOnly,
    /// All three towers plus aggregation.
    Full,
}

/// Graph nodes produced by one forward pass. Sequence nodes are
/// `(batch * n) x d` stacks; final nodes are `batch x d`; `logits` is
/// `batch x |items|` with column `j` scoring item `j + 1`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub h_e_seq: NodeId,
    pub h_c_seq: Option<NodeId>,
    pub h_m_seq: Option<NodeId>,
    pub h_e: NodeId,
    pub h_c: Option<NodeId>,
    pub h_m: Option<NodeId>,
    /// Aggregated preference vector; equals `h_e` on the ID-only pathway.
    pub h_a: NodeId,
    pub logits: NodeId,
}

enum Init {
    Normal,
    Zeros,
    TextTable,
    ImageTable,
}

struct PlanEntry {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    trainable: bool,
}

impl PlanEntry {
    fn normal(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        PlanEntry { name: name.into(), rows, cols, init: Init::Normal, trainable: true }
    }

    fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        PlanEntry { name: name.into(), rows, cols, init: Init::Zeros, trainable: true }
    }
}

/// Every parameter the model owns, in creation order. Checkpoint loading
/// walks the same plan, which is what makes saved files self-validating.
fn param_plan(
    cfg: &ModelConfig,
    num_items: usize,
    d_text_in: usize,
    d_image_in: usize,
) -> Vec<PlanEntry> {
    let d = cfg.latent_dim;
    let mut plan = vec![
        PlanEntry::normal("e_id", num_items + 1, d),
        PlanEntry::normal("p", cfg.max_seq_len, d),
        PlanEntry {
            name: "e_text".into(),
            rows: num_items + 1,
            cols: d_text_in,
            init: Init::TextTable,
            trainable: false,
        },
        PlanEntry {
            name: "e_image".into(),
            rows: num_items + 1,
            cols: d_image_in,
            init: Init::ImageTable,
            trainable: false,
        },
    ];
    for (modality, d_in) in [("text", d_text_in), ("image", d_image_in)] {
        plan.push(PlanEntry::normal(format!("adapter.{modality}.w_a"), d_in, d));
        plan.push(PlanEntry::zeros(format!("adapter.{modality}.b_a"), 1, d));
        plan.push(PlanEntry::normal(format!("adapter.{modality}.w_b"), d, d));
        plan.push(PlanEntry::zeros(format!("adapter.{modality}.b_b"), 1, d));
    }
    let tower = |prefix: &str, block: usize, plan: &mut Vec<PlanEntry>| {
        for w in ["w_q", "w_k", "w_v", "w_1"] {
            plan.push(PlanEntry::normal(format!("{prefix}.{block}.{w}"), d, d));
        }
        plan.push(PlanEntry::zeros(format!("{prefix}.{block}.b_1"), 1, d));
        plan.push(PlanEntry::normal(format!("{prefix}.{block}.w_2"), d, d));
        plan.push(PlanEntry::zeros(format!("{prefix}.{block}.b_2"), 1, d));
    };
    for b in 0..cfg.num_blocks {
        tower("enc_id", b, &mut plan);
    }
    for b in 0..cfg.num_blocks {
        tower("enc_con", b, &mut plan);
    }
    tower("dec_mix", 0, &mut plan);
    plan.push(PlanEntry::normal("agg.w", 3 * d, d));
    plan.push(PlanEntry::zeros("agg.b", 1, d));
    plan
}

/// The model: a parameter store plus the recipe for wiring those parameters
/// into a forward graph.
#[derive(Debug, Clone)]
pub struct SeqRecModel {
    config: ModelConfig,
    num_items: usize,
    d_text_in: usize,
    d_image_in: usize,
    store: ParamStore,
    /// Names of base matrices currently wrapped with low-rank adapters.
    lora_targets: Vec<String>,
}

impl SeqRecModel {
    /// Fresh model. The tables are `(num_items + 1) x d_*` item feature
    /// matrices (row 0 = padding) stored as frozen parameters so checkpoints
    /// are self-contained.
    pub fn new(
        config: ModelConfig,
        num_items: usize,
        text_table: Matrix,
        image_table: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Parameter("model needs at least one item".into()));
        }
        for (name, table) in [("text", &text_table), ("image", &image_table)] {
            if table.rows() != num_items + 1 || table.cols() == 0 {
                return Err(Error::Config(format!(
                    "{name} feature table is {}x{}, need {} rows (items + padding) and width > 0",
                    table.rows(),
                    table.cols(),
                    num_items + 1
                )));
            }
        }
        let (d_text_in, d_image_in) = (text_table.cols(), image_table.cols());
        let mut store = ParamStore::new();
        let mut init_rng = rng::stream(config.seed, "model-init");
        for entry in param_plan(&config, num_items, d_text_in, d_image_in) {
            let value = match entry.init {
                Init::Normal => Matrix::trunc_normal(entry.rows, entry.cols, INIT_STD, &mut init_rng),
                Init::Zeros => Matrix::zeros(entry.rows, entry.cols),
                Init::TextTable => text_table.clone(),
                Init::ImageTable => image_table.clone(),
            };
            store.add(entry.name, value, entry.trainable);
        }
        Ok(SeqRecModel {
            config,
            num_items,
            d_text_in,
            d_image_in,
            store,
            lora_targets: Vec::new(),
        })
    }

    /// Second-phase model: fresh content side sized to the given feature
    /// tables, with the ID pathway (`e_id`, `p`, every ID-encoder block)
    /// copied bit-for-bit from a pretrained model. With `selector_aggregation`
    /// the projection starts as `[I; 0; 0]`, so the new model initially scores
    /// exactly like the pretrained ID pathway and the content towers fade in
    /// through training.
    pub fn from_pretrained_id(
        pretrained: &SeqRecModel,
        config: ModelConfig,
        text_table: Matrix,
        image_table: Matrix,
        selector_aggregation: bool,
    ) -> Result<Self> {
        let keep = [
            ("max_seq_len", config.max_seq_len, pretrained.config.max_seq_len),
            ("latent_dim", config.latent_dim, pretrained.config.latent_dim),
            ("num_blocks", config.num_blocks, pretrained.config.num_blocks),
            ("num_heads", config.num_heads, pretrained.config.num_heads),
        ];
        for (field, new, old) in keep {
            if new != old {
                return Err(Error::Config(format!(
                    "{field} changed from {old} to {new}; the pretrained ID pathway only fits its own architecture"
                )));
            }
        }
        let mut model = Self::new(config, pretrained.num_items, text_table, image_table)?;
        let mut id_pathway = vec!["e_id".to_string(), "p".to_string()];
        for b in 0..model.config.num_blocks {
            for w in ["w_q", "w_k", "w_v", "w_1", "b_1", "w_2", "b_2"] {
                id_pathway.push(format!("enc_id.{b}.{w}"));
            }
        }
        for name in id_pathway {
            let src = pretrained.store.get(pretrained.pid(&name)?).value.clone();
            let dst = model.pid(&name)?;
            model.store.get_mut(dst).value = src;
        }
        if selector_aggregation {
            let d = model.config.latent_dim;
            let mut w = Matrix::zeros(3 * d, d);
            for i in 0..d {
                w.set(i, i, 1.0);
            }
            let agg_w = model.pid("agg.w")?;
            model.store.get_mut(agg_w).value = w;
        }
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        num_items: usize,
        d_text_in: usize,
        d_image_in: usize,
        store: ParamStore,
        lora_targets: Vec<String>,
    ) -> Self {
        SeqRecModel { config, num_items, d_text_in, d_image_in, store, lora_targets }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn content_input_dims(&self) -> (usize, usize) {
        (self.d_text_in, self.d_image_in)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lora_targets(&self) -> &[String] {
        &self.lora_targets
    }

    /// ID of the named parameter in this model's store.
    pub fn pid(&self, name: &str) -> Result<ParamId> {
        self.store
            .by_name(name)
            .ok_or_else(|| Error::Parameter(format!("model has no parameter named {name}")))
    }

    /// The conventional wrapping set: the query and value projections of
    /// every ID-encoder block.
    pub fn default_lora_targets(&self) -> Vec<String> {
        (0..self.config.num_blocks)
            .flat_map(|b| [format!("enc_id.{b}.w_q"), format!("enc_id.{b}.w_v")])
            .collect()
    }

    /// Attach rank-`r` adapters to the named ID-tower matrices. Each base
    /// matrix is frozen on the spot; factor `a` is noise, factor `b` is zero,
    /// so the wrapped model computes exactly what the unwrapped one did until
    /// training moves `b`.
    pub fn lora_apply(&mut self, targets: &[String], r: usize) -> Result<()> {
        if r == 0 {
            return Err(Error::Parameter("low-rank adapter rank must be at least 1".into()));
        }
        let mut init_rng = rng::stream(self.config.seed, "lora-init");
        for target in targets {
            if !target.starts_with("enc_id.") {
                return Err(Error::Parameter(format!(
                    "low-rank target {target} is not an ID-encoder matrix"
                )));
            }
            if self.lora_targets.iter().any(|t| t == target) {
                return Err(Error::Parameter(format!("{target} is already wrapped")));
            }
            let base = self.pid(target)?;
            let (rows, cols) = self.store.get(base).value.shape();
            if r >= rows.min(cols) {
                return Err(Error::Parameter(format!(
                    "rank {r} must be below the smaller dimension {} of {target}",
                    rows.min(cols)
                )));
            }
            let a = Matrix::trunc_normal(r, cols, INIT_STD, &mut init_rng);
            self.store.add(format!("lora.{target}.a"), a, true);
            self.store.add(format!("lora.{target}.b"), Matrix::zeros(rows, r), true);
            self.store.set_trainable(base, false);
            self.lora_targets.push(target.clone());
        }
        Ok(())
    }

    /// Leaf for a weight matrix, or `base + b·a` when the matrix is wrapped.
    fn effective(&self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        let base = g.param(store, self.pid(name)?);
        if self.lora_targets.iter().any(|t| t == name) {
            let a = g.param(store, self.pid(&format!("lora.{name}.a"))?);
            let b = g.param(store, self.pid(&format!("lora.{name}.b"))?);
            let delta = g.matmul(b, a)?;
            return g.add(base, delta);
        }
        Ok(base)
    }

    fn check_batch(&self, batch: &PaddedBatch) -> Result<()> {
        let n = self.config.max_seq_len;
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        if batch.mask.len() != batch.id_seqs.len()
            || batch.id_seqs.iter().any(|s| s.len() != n)
            || batch.mask.iter().any(|m| m.len() != n)
        {
            return Err(Error::Config(format!(
                "batch rows are not padded to the model's sequence length {n}"
            )));
        }
        Ok(())
    }

    /// Per-instance causal attention masks. Query `i` sees every valid
    /// position `j <= i`; an all-pad query row keeps itself so its softmax
    /// stays defined (those rows never reach the loss).
    pub fn attention_masks(batch: &PaddedBatch) -> Vec<MaskMatrix> {
        batch
            .mask
            .iter()
            .map(|valid| {
                MaskMatrix::from_fn(valid.len(), valid.len(), |i, j| {
                    j <= i && (valid[j] || i == j)
                })
            })
            .collect()
    }

    /// Position rows tiled once per instance: `(batch * n) x d`.
    fn position_rows(&self, g: &mut Graph, store: &ParamStore, batch_len: usize) -> Result<NodeId> {
        let n = self.config.max_seq_len;
        let p = g.param(store, self.pid("p")?);
        let idx: Vec<usize> = (0..batch_len).flat_map(|_| 0..n).collect();
        g.gather_rows(p, idx)
    }

    fn flat_ids(batch: &PaddedBatch) -> Vec<usize> {
        batch.id_seqs.iter().flat_map(|s| s.iter().copied()).collect()
    }

    /// ID-embedding inputs: `E_id[id] + P[position]`, `(batch * n) x d`.
    pub fn embed_id(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<NodeId> {
        self.check_batch(batch)?;
        let e_id = g.param(store, self.pid("e_id")?);
        let rows = g.gather_rows(e_id, Self::flat_ids(batch))?;
        let pos = self.position_rows(g, store, batch.len())?;
        g.add(rows, pos)
    }

    /// Two-layer perceptron mapping raw `modality` features to the latent dim.
    fn adapter(&self, g: &mut Graph, store: &ParamStore, x: NodeId, modality: &str) -> Result<NodeId> {
        let w_a = g.param(store, self.pid(&format!("adapter.{modality}.w_a"))?);
        let b_a = g.param(store, self.pid(&format!("adapter.{modality}.b_a"))?);
        let w_b = g.param(store, self.pid(&format!("adapter.{modality}.w_b"))?);
        let b_b = g.param(store, self.pid(&format!("adapter.{modality}.b_b"))?);
        g.ffn(x, w_a, b_a, w_b, b_b)
    }

    /// Content-embedding inputs per modality: `Adapter(E_*[id]) + P`, sharing
    /// one position table with the ID tower. Returns `(text, image)` stacks.
    pub fn embed_content(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PaddedBatch,
    ) -> Result<(NodeId, NodeId)> {
        self.check_batch(batch)?;
        let ids = Self::flat_ids(batch);
        let pos = self.position_rows(g, store, batch.len())?;
        let per_modality = |g: &mut Graph, table: &str, modality: &str| -> Result<NodeId> {
            let t = g.param(store, self.pid(table)?);
            let raw = g.gather_rows(t, ids.clone())?;
            let mapped = self.adapter(g, store, raw, modality)?;
            g.add(mapped, pos)
        };
        let m_t = per_modality(g, "e_text", "text")?;
        let m_g = per_modality(g, "e_image", "image")?;
        Ok((m_t, m_g))
    }

    /// Row-wise fusion of the two content stacks: sum, then normalize to the
    /// unit sphere (guarded so a zero sum stays zero).
    pub fn fuse_content(&self, g: &mut Graph, m_t: NodeId, m_g: NodeId) -> Result<NodeId> {
        let sum = g.add(m_t, m_g)?;
        g.l2_normalize_rows(sum, FUSE_EPS)
    }

    /// One encoder/decoder stack. For self-attention towers the keys and
    /// values come from the running stream; the first block of a
    /// cross-attention stack reads them from `kv_src` instead.
    fn tower(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_src: NodeId,
        kv_src: NodeId,
        masks: &[MaskMatrix],
        prefix: &str,
        blocks: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let scale = 1.0 / ((cfg.latent_dim / cfg.num_heads) as f64).sqrt();
        let mut x = query_src;
        for b in 0..blocks {
            let src_kv = if b == 0 { kv_src } else { x };
            let w_q = self.effective(g, store, &format!("{prefix}.{b}.w_q"))?;
            let w_k = self.effective(g, store, &format!("{prefix}.{b}.w_k"))?;
            let w_v = self.effective(g, store, &format!("{prefix}.{b}.w_v"))?;
            let q = g.matmul(x, w_q)?;
            let k = g.matmul(src_kv, w_k)?;
            let v = g.matmul(src_kv, w_v)?;
            let attn = match dropout_rng.as_deref_mut().filter(|_| cfg.dropout > 0.0) {
                Some(r) => g.batch_attention_dropout(
                    q,
                    k,
                    v,
                    masks.to_vec(),
                    cfg.num_heads,
                    scale,
                    cfg.dropout,
                    r,
                )?,
                None => g.batch_attention(q, k, v, masks.to_vec(), cfg.num_heads, scale)?,
            };
            let mid = if cfg.residual_layer_norm {
                let s = g.add(x, attn)?;
                g.layer_norm_rows(s, LN_EPS)
            } else {
                attn
            };
            let w_1 = g.param(store, self.pid(&format!("{prefix}.{b}.w_1"))?);
            let b_1 = g.param(store, self.pid(&format!("{prefix}.{b}.b_1"))?);
            let w_2 = g.param(store, self.pid(&format!("{prefix}.{b}.w_2"))?);
            let b_2 = g.param(store, self.pid(&format!("{prefix}.{b}.b_2"))?);
            let f = g.ffn(mid, w_1, b_1, w_2, b_2)?;
            let f = match dropout_rng.as_deref_mut().filter(|_| cfg.dropout > 0.0) {
                Some(r) => g.dropout(f, cfg.dropout, r),
                None => f,
            };
            x = if cfg.residual_layer_norm {
                let s = g.add(mid, f)?;
                g.layer_norm_rows(s, LN_EPS)
            } else {
                f
            };
        }
        Ok(x)
    }

    /// ID-preference hidden states over the whole sequence.
    pub fn id_encoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m_e: NodeId,
        masks: &[MaskMatrix],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.tower(g, store, m_e, m_e, masks, "enc_id", self.config.num_blocks, dropout_rng)
    }

    /// Content-preference hidden states over the fused content sequence.
    pub fn content_encoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m_c: NodeId,
        masks: &[MaskMatrix],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.tower(g, store, m_c, m_c, masks, "enc_con", self.config.num_blocks, dropout_rng)
    }

    /// Cross-attention over the two streams: ID hidden states query the
    /// content hidden states under the same causal mask.
    pub fn mix_decoder(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_e_seq: NodeId,
        h_c_seq: NodeId,
        masks: &[MaskMatrix],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.tower(g, store, h_e_seq, h_c_seq, masks, "dec_mix", 1, dropout_rng)
    }

    /// Project the concatenated final hidden states down to one preference
    /// vector per instance.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_e: NodeId,
        h_c: NodeId,
        h_m: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat_cols(&[h_e, h_c, h_m])?;
        let w = g.param(store, self.pid("agg.w")?);
        let b = g.param(store, self.pid("agg.b")?);
        let proj = g.matmul(cat, w)?;
        g.add_row_broadcast(proj, b)
    }

    /// Inner product of each preference vector against every real item's ID
    /// embedding. Column `j` scores item `j + 1`; the padding row never
    /// appears.
    pub fn score_items(&self, g: &mut Graph, store: &ParamStore, h_a: NodeId) -> Result<NodeId> {
        let e_id = g.param(store, self.pid("e_id")?);
        let items = g.gather_rows(e_id, (1..=self.num_items).collect())?;
        g.matmul_nt(h_a, items)
    }

    /// Fused content embedding of specific items (no position term): the
    /// alignment target used by the content-aware contrastive loss.
    pub fn fused_item_content(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[usize],
    ) -> Result<NodeId> {
        for &i in items {
            if i == 0 || i > self.num_items {
                return Err(Error::Index(format!(
                    "item {i} outside the catalog (1..={})",
                    self.num_items
                )));
            }
        }
        let ids: Vec<usize> = items.to_vec();
        let t = g.param(store, self.pid("e_text")?);
        let raw_t = g.gather_rows(t, ids.clone())?;
        let text = self.adapter(g, store, raw_t, "text")?;
        let i = g.param(store, self.pid("e_image")?);
        let raw_i = g.gather_rows(i, ids)?;
        let image = self.adapter(g, store, raw_i, "image")?;
        let sum = g.add(text, image)?;
        g.l2_normalize_rows(sum, FUSE_EPS)
    }

    /// Run the chosen pathway and score the batch. Pass a dropout stream
    /// only during training; evaluation and the oracle tests run without.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &PaddedBatch,
        pathway: ForwardPathway,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let n = self.config.max_seq_len;
        let masks = Self::attention_masks(batch);
        let last: Vec<usize> = (0..batch.len()).map(|b| b * n + n - 1).collect();

        let m_e = self.embed_id(g, store, batch)?;
        let h_e_seq = self.id_encoder(g, store, m_e, &masks, dropout_rng.as_deref_mut())?;
        let h_e = g.gather_rows(h_e_seq, last.clone())?;

        match pathway {
            ForwardPathway::IdOnly => {
                let logits = self.score_items(g, store, h_e)?;
                Ok(ForwardTrace {
                    h_e_seq,
                    h_c_seq: None,
                    h_m_seq: None,
                    h_e,
                    h_c: None,
                    h_m: None,
                    h_a: h_e,
                    logits,
                })
            }
            ForwardPathway::Full => {
                let (m_t, m_g) = self.embed_content(g, store, batch)?;
                let m_c = self.fuse_content(g, m_t, m_g)?;
                let h_c_seq =
                    self.content_encoder(g, store, m_c, &masks, dropout_rng.as_deref_mut())?;
                let h_m_seq =
                    self.mix_decoder(g, store, h_e_seq, h_c_seq, &masks, dropout_rng)?;
                let h_c = g.gather_rows(h_c_seq, last.clone())?;
                let h_m = g.gather_rows(h_m_seq, last)?;
                let h_a = self.aggregate(g, store, h_e, h_c, h_m)?;
                let logits = self.score_items(g, store, h_a)?;
                Ok(ForwardTrace {
                    h_e_seq,
                    h_c_seq: Some(h_c_seq),
                    h_m_seq: Some(h_m_seq),
                    h_e,
                    h_c: Some(h_c),
                    h_m: Some(h_m),
                    h_a,
                    logits,
                })
            }
        }
    }
}
