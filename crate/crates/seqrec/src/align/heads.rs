//! Trainable content-encoder heads and their contrastive fine-tuning.
//!
//! The raw text/image features stay frozen; each modality gets a two-layer
//! perceptron head (hidden width = output width = the model latent `d`).
//! Fine-tuning pulls together, per batch of (target, similar) pairs:
//! target↔similar texts (t2t), target↔similar images (i2i), and the text↔
//! image outputs of the same target item (t2i), each an InfoNCE term over
//! in-batch negatives with inner-product similarity.

use serde::{Deserialize, Serialize};

use super::SamplePairSet;
use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, Matrix, NodeId, ParamId, ParamStore};
use crate::rng;
use rand::seq::SliceRandom;

/// Text and image projection heads over frozen raw features.
pub struct ContentHeads {
    store: ParamStore,
    d_text_in: usize,
    d_image_in: usize,
    d: usize,
}

const HEAD_PARAMS: [&str; 4] = ["w_a", "b_a", "w_b", "b_b"];

impl ContentHeads {
    pub fn new(d_text_in: usize, d_image_in: usize, d: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        for (modality, d_in) in [("text", d_text_in), ("image", d_image_in)] {
            let mut r = rng::stream(seed, &format!("heads-{modality}"));
            store.add(&format!("{modality}.w_a"), Matrix::trunc_normal(d_in, d, 0.02, &mut r), true);
            store.add(&format!("{modality}.b_a"), Matrix::zeros(1, d), true);
            store.add(&format!("{modality}.w_b"), Matrix::trunc_normal(d, d, 0.02, &mut r), true);
            store.add(&format!("{modality}.b_b"), Matrix::zeros(1, d), true);
        }
        ContentHeads { store, d_text_in, d_image_in, d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn params(&self, modality: &str) -> [ParamId; 4] {
        HEAD_PARAMS.map(|p| {
            self.store.by_name(&format!("{modality}.{p}")).expect("head params exist")
        })
    }

    /// Head forward for a batch of raw feature rows already in the graph.
    pub fn project(&self, g: &mut Graph, modality: &str, input: NodeId) -> Result<NodeId> {
        let [w_a, b_a, w_b, b_b] = self.params(modality).map(|id| g.param(&self.store, id));
        g.ffn(input, w_a, b_a, w_b, b_b)
    }

    /// Raw feature rows of the given items as a graph constant.
    fn gather_features(
        &self,
        g: &mut Graph,
        catalog: &ItemCatalog,
        items: &[usize],
        modality: &str,
    ) -> Result<NodeId> {
        let (dim, select): (usize, fn(&crate::data::CatalogItem) -> &[f64]) = match modality {
            "text" => (self.d_text_in, |i| &i.text_feat),
            _ => (self.d_image_in, |i| &i.image_feat),
        };
        let mut m = Matrix::zeros(items.len(), dim);
        for (r, &id) in items.iter().enumerate() {
            m.row_mut(r).copy_from_slice(select(catalog.item(id)?));
        }
        Ok(g.constant(m))
    }
}

/// Builds the SFT loss sub-graph for one batch of pairs and returns its
/// node, so callers can backprop through it.
pub fn sft_loss_graph(
    g: &mut Graph,
    heads: &ContentHeads,
    catalog: &ItemCatalog,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Parameter("sft_loss needs a nonempty batch".to_string()));
    }
    let targets: Vec<usize> = pairs.iter().map(|&(t, _)| t).collect();
    let similars: Vec<usize> = pairs.iter().map(|&(_, s)| s).collect();

    let raw_tp = heads.gather_features(g, catalog, &targets, "text")?;
    let raw_tq = heads.gather_features(g, catalog, &similars, "text")?;
    let raw_gp = heads.gather_features(g, catalog, &targets, "image")?;
    let raw_gq = heads.gather_features(g, catalog, &similars, "image")?;

    let tp = heads.project(g, "text", raw_tp)?;
    let tq = heads.project(g, "text", raw_tq)?;
    let gp = heads.project(g, "image", raw_gp)?;
    let gq = heads.project(g, "image", raw_gq)?;

    let sim_t2t = g.matmul_nt(tp, tq)?;
    let sim_i2i = g.matmul_nt(gp, gq)?;
    let sim_t2i = g.matmul_nt(tp, gp)?;

    let l_t2t = g.info_nce(sim_t2t, tau)?;
    let l_i2i = g.info_nce(sim_i2i, tau)?;
    let l_t2i = g.info_nce(sim_t2i, tau)?;
    g.add_scaled(&[(1.0, l_t2t), (1.0, l_i2i), (1.0, l_t2i)])
}

/// The scalar SFT loss for one batch (forward only).
pub fn sft_loss(
    heads: &ContentHeads,
    catalog: &ItemCatalog,
    pairs: &[(usize, usize)],
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = sft_loss_graph(&mut g, heads, catalog, pairs, tau)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SftOptions {
    fn default() -> Self {
        SftOptions { epochs: 30, batch_size: 64, tau: 0.05, lr: 1e-3, seed: 0 }
    }
}

/// Per-epoch mean loss, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub loss_curve: Vec<f64>,
}

/// Train the heads on the pair set with Adam. Deterministic under
/// `opts.seed`; zero epochs leaves the heads untouched.
pub fn run_sft(
    heads: &mut ContentHeads,
    catalog: &ItemCatalog,
    pairs: &SamplePairSet,
    opts: &SftOptions,
) -> Result<SftReport> {
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "empty pair set; lower the discriminator threshold theta".to_string(),
        ));
    }
    let mut adam = Adam::new(heads.store(), AdamConfig::with_lr(opts.lr));
    let mut loss_curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<(usize, usize)> = pairs.pairs().to_vec();
        order.shuffle(&mut rng::substream(opts.seed, "sft-epoch", epoch as u64));

        let mut weighted = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let loss = sft_loss_graph(&mut g, heads, catalog, batch, opts.tau)?;
            weighted += g.scalar(loss) * batch.len() as f64;
            heads.store_mut().zero_grads();
            g.backward(loss)?;
            g.apply_grads(heads.store_mut())?;
            adam.step(heads.store_mut())?;
        }
        loss_curve.push(weighted / pairs.len() as f64);
    }
    Ok(SftReport { loss_curve })
}

/// Run the heads over the whole catalog: `(num_items+1) x d` tables with
/// the padding row 0 all-zeros.
pub fn encode_content(catalog: &ItemCatalog, heads: &ContentHeads) -> Result<(Matrix, Matrix)> {
    let ids: Vec<usize> = (1..=catalog.num_items()).collect();
    let mut out = Vec::with_capacity(2);
    for modality in ["text", "image"] {
        let mut g = Graph::new();
        let raw = heads.gather_features(&mut g, catalog, &ids, modality)?;
        let projected = heads.project(&mut g, modality, raw)?;
        let rows = g.value(projected);
        let mut table = Matrix::zeros(catalog.num_items() + 1, heads.d());
        for (r, &id) in ids.iter().enumerate() {
            table.row_mut(id).copy_from_slice(rows.row(r));
        }
        out.push(table);
    }
    let image = out.pop().expect("two tables");
    let text = out.pop().expect("two tables");
    Ok((text, image))
}
