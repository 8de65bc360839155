//! Two-phase preference training with early stopping.
//!
//! Phase one fits the ID pathway alone with cross-entropy; phase two
//! starts from that checkpoint, freezes the shared ID parameters, and
//! trains the content side — adapters, content encoder, cross-attention
//! decoder, aggregation — together with low-rank updates to selected ID
//! attention matrices, under a combined loss that adds an in-batch
//! contrastive term pulling each user's preference vector toward the
//! fused content embedding of their next item.
//!
//! Every phase runs the same loop: validate, train an epoch, validate
//! again, and stop once validation NDCG@10 has not improved for
//! `patience` consecutive epochs. The weights that scored best on
//! validation — possibly the starting weights — are what the phase
//! returns. Single-phase alternatives (everything end to end, or with
//! the content encoder / content embedding frozen) exist to compare
//! convergence behavior against the two-phase schedule.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, BatchMode, PaddedBatch, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, HistoryHandling};
use crate::model::{Checkpoint, ForwardPathway, ModelConfig, SeqRecModel};
use crate::numerics::{Adam, AdamConfig, Graph, Matrix, NodeId, ParamStore};
use crate::rng;

/// Hyperparameters for one training phase.
///
/// `stage` selects the loss: 1 is plain cross-entropy plus an item-table
/// penalty, 2 adds the contrastive term and extends the penalty to all
/// three embedding tables. Single-phase strategies train with stage-2
/// plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: u8,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the contrastive term (stage 2 only), in [0, 1].
    pub alpha: f64,
    /// Weight of the squared-norm penalty on the embedding tables.
    pub lambda: f64,
    /// Contrastive softmax temperature.
    pub tau: f64,
    pub seed: u64,
}

impl TrainPlan {
    pub fn stage1(seed: u64) -> Self {
        TrainPlan {
            stage: 1,
            epochs_max: 200,
            patience: 10,
            batch_size: 128,
            lr: 1e-3,
            alpha: 0.0,
            lambda: 1e-4,
            tau: 0.05,
            seed,
        }
    }

    pub fn stage2(seed: u64) -> Self {
        TrainPlan {
            stage: 2,
            batch_size: 1024,
            alpha: 0.1,
            ..TrainPlan::stage1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.stage != 1 && self.stage != 2 {
            return fail(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs_max == 0 || self.batch_size == 0 {
            return fail("epochs_max and batch_size must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        check_loss_weights(self.alpha, self.lambda, self.tau)
    }
}

fn check_loss_weights(alpha: f64, lambda: f64, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda {lambda} must be nonnegative")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// Detached values of the loss pieces for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    /// In-batch contrastive value (0 in stage 1 and for singleton batches).
    pub contrast: f64,
    /// The weighted penalty `lambda * sum of squared table norms`.
    pub reg: f64,
    pub total: f64,
}

/// Build the training loss on the tape and return its node plus the
/// component values.
///
/// Stage 1 scores through the ID pathway and penalizes only the item
/// table. Stage 2 runs the full three-tower forward; each instance's
/// aggregated preference vector is scored against the fused content
/// embeddings of every target in the batch, and the matching column is
/// the contrastive positive. Terms with zero weight never enter the sum,
/// so `alpha = 0` leaves `total` exactly equal to the remaining terms.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    model: &SeqRecModel,
    store: &ParamStore,
    batch: &PaddedBatch,
    stage: u8,
    alpha: f64,
    lambda: f64,
    tau: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, LossTerms)> {
    check_loss_weights(alpha, lambda, tau)?;
    let pathway = match stage {
        1 => ForwardPathway::IdOnly,
        2 => ForwardPathway::Full,
        s => return Err(Error::Parameter(format!("stage must be 1 or 2, got {s}"))),
    };
    let targets: Vec<usize> = batch
        .targets
        .iter()
        .map(|&t| {
            if t == 0 || t > model.num_items() {
                Err(Error::Index(format!(
                    "target item {t} outside catalog 1..={}",
                    model.num_items()
                )))
            } else {
                Ok(t - 1)
            }
        })
        .collect::<Result<_>>()?;

    let trace = model.forward(g, store, batch, pathway, dropout_rng)?;
    let ce = g.cross_entropy_mean(trace.logits, targets)?;
    let mut weighted = vec![(1.0, ce)];

    let mut contrast = 0.0;
    if stage == 2 {
        let e_c = model.fused_item_content(g, store, &batch.targets)?;
        let sim = g.matmul_nt(trace.h_a, e_c)?;
        let nce = g.info_nce(sim, tau)?;
        contrast = g.scalar(nce);
        if alpha > 0.0 {
            weighted.push((alpha, nce));
        }
    }

    let mut reg = 0.0;
    if lambda > 0.0 {
        let tables: &[&str] = if stage == 1 {
            &["e_id"]
        } else {
            &["e_id", "e_text", "e_image"]
        };
        for name in tables {
            let node = g.param(store, model.pid(name)?);
            let sq = g.sum_squares(node);
            reg += lambda * g.scalar(sq);
            weighted.push((lambda, sq));
        }
    }

    let total = if weighted.len() == 1 { ce } else { g.add_scaled(&weighted)? };
    let terms = LossTerms { ce: g.scalar(ce), contrast, reg, total: g.scalar(total) };
    Ok((total, terms))
}

/// Early-stopping decision over a validation-metric history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// Index of the best entry; earliest wins ties.
    pub best: usize,
}

/// Stop once the metric has gone `patience` consecutive entries without
/// a strict improvement over the best seen so far.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    debug_assert!(patience >= 1);
    if history.is_empty() {
        return StopDecision { stop: false, best: 0 };
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    StopDecision { stop: history.len() - 1 - best >= patience, best }
}

/// Mean training-loss components and the validation score for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub contrast: f64,
    pub reg: f64,
    pub total: f64,
    pub valid_ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Which phase produced this: "pretrain-id", "posttrain-content",
    /// "end2end", "fixed-conenc", or "fixed-conemb".
    pub phase: String,
    /// Validation NDCG@10 of the starting weights, before any update.
    pub initial_valid_ndcg10: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; 0 means the starting
    /// weights were never beaten.
    pub best_epoch: usize,
    pub stop_reason: String,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Validation NDCG@10 of the weights this phase returned.
    pub fn best_valid_ndcg10(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_valid_ndcg10
        } else {
            self.epochs[self.best_epoch - 1].valid_ndcg10
        }
    }
}

struct PhaseSpec {
    name: &'static str,
    stage: u8,
    pathway: ForwardPathway,
}

fn set_trainable_where(model: &mut SeqRecModel, flag: bool, pred: impl Fn(&str) -> bool) {
    let ids: Vec<_> = model
        .store()
        .ids()
        .filter(|&id| pred(model.store().name(id)))
        .collect();
    for id in ids {
        model.store_mut().set_trainable(id, flag);
    }
}

/// Divergence check: every weight must be finite, at phase start and
/// after every optimizer step.
fn ensure_finite_params(store: &ParamStore, context: &str) -> Result<()> {
    for id in store.ids() {
        if !store.get(id).value.is_finite() {
            return Err(Error::Numeric(format!(
                "{context} diverged: parameter {} has non-finite entries",
                store.name(id)
            )));
        }
    }
    Ok(())
}

/// The shared epoch loop: shuffle, descend, validate, stop on stalled
/// validation, and hand back the best-validated weights.
fn run_phase(
    model: &mut SeqRecModel,
    split: &SplitDataset,
    plan: &TrainPlan,
    spec: PhaseSpec,
) -> Result<TrainReport> {
    plan.validate()?;
    if plan.stage != spec.stage {
        return Err(Error::Parameter(format!(
            "{} training needs a stage-{} plan, got stage {}",
            spec.name, spec.stage, plan.stage
        )));
    }
    let started = Instant::now();
    let n = model.config().max_seq_len;
    let eval_opts = EvalOptions {
        ks: vec![10],
        batch_size: 256,
        history: HistoryHandling::FullCatalog,
        pathway: spec.pathway,
    };
    let validate = |m: &SeqRecModel| -> Result<f64> {
        let report = evaluate(m, split, BatchMode::Valid, &eval_opts)?;
        Ok(report.metric(10).expect("NDCG@10 requested").ndcg)
    };

    // frozen parameters must come back bit-identical from every epoch
    let frozen: Vec<(String, Matrix)> = if cfg!(debug_assertions) {
        model
            .store()
            .ids()
            .filter(|&id| !model.store().get(id).trainable)
            .map(|id| (model.store().name(id).to_string(), model.store().get(id).value.clone()))
            .collect()
    } else {
        Vec::new()
    };

    ensure_finite_params(model.store(), spec.name)?;
    let mut adam = Adam::new(model.store(), AdamConfig::with_lr(plan.lr));
    let initial = validate(model)?;
    let mut history = vec![initial];
    let mut best_store = model.store().clone();
    let mut epochs = Vec::new();
    let mut stop_reason = "reached the epoch limit".to_string();

    for epoch in 1..=plan.epochs_max {
        let order_seed = rng::substream(plan.seed, "epoch-order", epoch as u64).gen::<u64>();
        let batches = batch_iterator(split, plan.batch_size, n, BatchMode::Train, order_seed);
        if batches.is_empty() {
            return Err(Error::Data(
                "no user has a long enough history to form a training pair".into(),
            ));
        }
        let mut dropout = rng::substream(plan.seed, "epoch-dropout", epoch as u64);

        let mut sums = LossTerms { ce: 0.0, contrast: 0.0, reg: 0.0, total: 0.0 };
        let mut seen = 0usize;
        for batch in &batches {
            model.store_mut().zero_grads();
            let mut g = Graph::new();
            let (loss, terms) = match total_loss(
                &mut g,
                model,
                model.store(),
                batch,
                spec.stage,
                plan.alpha,
                plan.lambda,
                plan.tau,
                Some(&mut dropout),
            ) {
                Ok(v) => v,
                // a fully collapsed softmax mid-training is numerical
                // blow-up, not a data problem
                Err(Error::DegenerateRow { row }) => {
                    return Err(Error::Numeric(format!(
                        "{} diverged in epoch {epoch}: softmax row {row} collapsed",
                        spec.name
                    )))
                }
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} diverged in epoch {epoch}: loss is {}",
                    spec.name, terms.total
                )));
            }
            g.backward(loss)?;
            g.apply_grads(model.store_mut())?;
            adam.step(model.store_mut())?;
            ensure_finite_params(model.store(), &format!("{} (epoch {epoch})", spec.name))?;

            let w = batch.len() as f64;
            sums.ce += terms.ce * w;
            sums.contrast += terms.contrast * w;
            sums.reg += terms.reg * w;
            sums.total += terms.total * w;
            seen += batch.len();
        }

        debug_assert!(
            frozen.iter().all(|(name, snap)| {
                model
                    .store()
                    .by_name(name)
                    .map(|id| model.store().get(id).value.data() == snap.data())
                    .unwrap_or(false)
            }),
            "a frozen parameter moved during {}",
            spec.name
        );

        let metric = validate(model)?;
        history.push(metric);
        let m = seen as f64;
        epochs.push(EpochRecord {
            epoch,
            ce: sums.ce / m,
            contrast: sums.contrast / m,
            reg: sums.reg / m,
            total: sums.total / m,
            valid_ndcg10: metric,
        });

        let decision = early_stop(&history, plan.patience);
        if decision.best == history.len() - 1 {
            best_store = model.store().clone();
        }
        if decision.stop {
            stop_reason =
                format!("validation NDCG@10 stalled for {} epochs", plan.patience);
            break;
        }
    }

    let decision = early_stop(&history, plan.patience);
    *model.store_mut() = best_store;
    Ok(TrainReport {
        phase: spec.name.to_string(),
        initial_valid_ndcg10: initial,
        epochs,
        best_epoch: decision.best,
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Phase one: cross-entropy training of the ID pathway. Everything on the
/// content side is frozen and must come out bit-identical.
pub fn pretrain_stage1(
    model: &mut SeqRecModel,
    split: &SplitDataset,
    plan: &TrainPlan,
) -> Result<(Checkpoint, TrainReport)> {
    set_trainable_where(model, true, |n| {
        n == "e_id" || n == "p" || n.starts_with("enc_id.")
    });
    set_trainable_where(model, false, |n| {
        n.starts_with("adapter.")
            || n.starts_with("enc_con.")
            || n.starts_with("dec_mix.")
            || n.starts_with("agg.")
            || n == "e_text"
            || n == "e_image"
    });
    let report = run_phase(
        model,
        split,
        plan,
        PhaseSpec { name: "pretrain-id", stage: 1, pathway: ForwardPathway::IdOnly },
    )?;
    Ok((Checkpoint::capture(model, "pretrain-id", None), report))
}

/// Phase two: rebuild around the phase-one weights (aggregation starts as
/// a pure ID selector, so epoch 0 scores exactly like phase one), freeze
/// the shared ID pathway, wrap the configured attention matrices with
/// low-rank factors, and train the content side under the combined loss.
pub fn posttrain_stage2(
    stage1: &Checkpoint,
    split: &SplitDataset,
    text_table: Matrix,
    image_table: Matrix,
    plan: &TrainPlan,
) -> Result<(Checkpoint, TrainReport)> {
    if stage1.stage != "pretrain-id" {
        return Err(Error::Config(format!(
            "content post-training needs a phase-one checkpoint, found stage '{}'",
            stage1.stage
        )));
    }
    let pretrained = stage1.restore()?;
    let mut model = SeqRecModel::from_pretrained_id(
        &pretrained,
        pretrained.config().clone(),
        text_table,
        image_table,
        true,
    )?;
    let rank = model.config().lora_rank;
    if rank > 0 {
        model.lora_apply(&model.default_lora_targets(), rank)?;
    }
    set_trainable_where(&mut model, false, |n| {
        n == "e_id" || n == "p" || n.starts_with("enc_id.")
    });
    let report = run_phase(
        &mut model,
        split,
        plan,
        PhaseSpec { name: "posttrain-content", stage: 2, pathway: ForwardPathway::Full },
    )?;
    Ok((Checkpoint::capture(&model, "posttrain-content", None), report))
}

/// Single-phase baseline: every parameter trains from scratch under the
/// full combined loss, with no low-rank wrapping.
pub fn train_end2end(
    model: &mut SeqRecModel,
    split: &SplitDataset,
    plan: &TrainPlan,
) -> Result<(Checkpoint, TrainReport)> {
    set_trainable_where(model, true, |n| n != "e_text" && n != "e_image");
    let report = run_phase(
        model,
        split,
        plan,
        PhaseSpec { name: "end2end", stage: 2, pathway: ForwardPathway::Full },
    )?;
    Ok((Checkpoint::capture(model, "end2end", None), report))
}

/// Which training schedule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// ID pretraining, then content post-training (the default).
    TwoStep,
    /// One phase with the content-encoder tower frozen at init.
    FixedConenc,
    /// One phase with the content adapters frozen at init.
    FixedConemb,
    /// One phase, everything trainable.
    End2end,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::TwoStep,
        Strategy::FixedConenc,
        Strategy::FixedConemb,
        Strategy::End2end,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::TwoStep => "two-step",
            Strategy::FixedConenc => "fixed-conenc",
            Strategy::FixedConemb => "fixed-conemb",
            Strategy::End2end => "end2end",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}' (expected two-step, fixed-conenc, fixed-conemb, or end2end)"
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

/// Run one full training schedule from scratch and return the final
/// checkpoint with one report per phase.
pub fn train_strategy(
    strategy: Strategy,
    config: &ModelConfig,
    split: &SplitDataset,
    text_table: Matrix,
    image_table: Matrix,
    stage1_plan: &TrainPlan,
    stage2_plan: &TrainPlan,
) -> Result<(Checkpoint, Vec<TrainReport>)> {
    let num_items = text_table.rows().checked_sub(1).filter(|&n| n > 0).ok_or_else(|| {
        Error::Config("content tables must have a padding row plus one row per item".into())
    })?;

    match strategy {
        Strategy::TwoStep => {
            let mut model = SeqRecModel::new(
                config.clone(),
                num_items,
                text_table.clone(),
                image_table.clone(),
            )?;
            let (ck1, report1) = pretrain_stage1(&mut model, split, stage1_plan)?;
            let (ck2, report2) =
                posttrain_stage2(&ck1, split, text_table, image_table, stage2_plan)?;
            Ok((ck2, vec![report1, report2]))
        }
        Strategy::End2end => {
            let mut model = SeqRecModel::new(config.clone(), num_items, text_table, image_table)?;
            let (ck, report) = train_end2end(&mut model, split, stage2_plan)?;
            Ok((ck, vec![report]))
        }
        Strategy::FixedConenc | Strategy::FixedConemb => {
            let mut model = SeqRecModel::new(config.clone(), num_items, text_table, image_table)?;
            set_trainable_where(&mut model, true, |n| n != "e_text" && n != "e_image");
            let (name, prefix): (&'static str, &str) = match strategy {
                Strategy::FixedConenc => ("fixed-conenc", "enc_con."),
                _ => ("fixed-conemb", "adapter."),
            };
            set_trainable_where(&mut model, false, |n| n.starts_with(prefix));
            let report = run_phase(
                &mut model,
                split,
                stage2_plan,
                PhaseSpec { name, stage: 2, pathway: ForwardPathway::Full },
            )?;
            Ok((Checkpoint::capture(&model, name, None), vec![report]))
        }
    }
}
