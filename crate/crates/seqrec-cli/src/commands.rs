//! The pipeline commands. Each one loads what it needs from the workspace,
//! calls into the library, writes its artifact, and records a manifest with
//! content hashes of everything it read and wrote.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use seqrec::align::{
    self, encode_content, run_sft, BuiltinCosine, ContentHeads, Discriminator, ExternalCommand,
    SamplePairSet, SftOptions,
};
use seqrec::data::io::save_item_clusters;
use seqrec::data::{
    leave_one_out_split, load_catalog, load_interactions, save_catalog, save_interactions,
    synth_generate, BatchMode, ItemCatalog, SplitDataset,
};
use seqrec::error::{Error, Result};
use seqrec::eval::{bench_inference, evaluate, EvalOptions, HistoryHandling};
use seqrec::model::{Checkpoint, ForwardPathway, SeqRecModel};
use seqrec::training::{
    posttrain_stage2, pretrain_stage1, train_strategy, Strategy, TrainReport,
};

use crate::config::{RunConfig, Workspace};
use crate::manifest::ManifestBuilder;

/// Missing upstream artifact: tell the operator which command produces it.
fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "missing {}; run `seqrec {produced_by}` first",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    use std::io::Write;
    writeln!(writer)?;
    Ok(())
}

fn prepare_dirs(ws: &Workspace) -> Result<()> {
    for dir in [&ws.out_dir, &ws.embeddings_dir, &ws.checkpoints_dir, &ws.reports_dir] {
        std::fs::create_dir_all(dir)?;
    }
    for file in [&ws.catalog, &ws.interactions, &ws.clusters, &ws.pairs] {
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_corpus(ws: &Workspace) -> Result<(ItemCatalog, SplitDataset)> {
    require_file(&ws.catalog, "synth")?;
    require_file(&ws.interactions, "synth")?;
    let catalog = load_catalog(&ws.catalog)?;
    let log = load_interactions(&ws.interactions, &catalog)?;
    Ok((catalog, leave_one_out_split(&log)))
}

/// Generate the synthetic corpus: catalog, interaction log, and the planted
/// cluster labels that oracle checks compare against.
pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let ws = config.workspace();
    prepare_dirs(&ws)?;
    let spec = config.synth.to_spec(config.seed);
    let corpus = synth_generate(&spec)?;

    let mut manifest = ManifestBuilder::new("synth", config);
    save_catalog(&corpus.catalog, &ws.catalog)?;
    save_interactions(&corpus.log, &ws.interactions)?;
    save_item_clusters(&corpus.item_clusters, &ws.clusters)?;
    for path in [&ws.catalog, &ws.interactions, &ws.clusters] {
        manifest.output(&ws, path)?;
    }
    manifest.details(json!({
        "num_items": corpus.catalog.num_items(),
        "num_users": corpus.log.num_users(),
        "num_clusters": spec.num_clusters,
    }));
    manifest.write(&ws.manifest("synth"))?;

    println!(
        "synth: {} items, {} users -> {}",
        corpus.catalog.num_items(),
        corpus.log.num_users(),
        ws.out_dir.display()
    );
    Ok(())
}

/// Select (target, most-similar-history-item) pairs with the configured
/// semantic judge.
pub fn cmd_pairs(config: &RunConfig) -> Result<()> {
    let ws = config.workspace();
    prepare_dirs(&ws)?;
    require_file(&ws.catalog, "synth")?;
    require_file(&ws.interactions, "synth")?;

    let mut manifest = ManifestBuilder::new("pairs", config);
    manifest.input(&ws, &ws.catalog)?;
    manifest.input(&ws, &ws.interactions)?;

    let catalog = load_catalog(&ws.catalog)?;
    let log = load_interactions(&ws.interactions, &catalog)?;

    let builtin;
    let external;
    let judge: &dyn Discriminator = match config.align.discriminator.as_str() {
        "builtin" => {
            builtin = BuiltinCosine::new(&catalog, config.align.theta);
            &builtin
        }
        _ => {
            external = ExternalCommand::new(
                config.align.command.clone(),
                config.align.command_args.clone(),
                Duration::from_secs(config.align.timeout_s),
            );
            &external
        }
    };
    let (pairs, stats) = align::select_pairs(&log, &catalog, judge, config.align.candidate_cap)?;
    pairs.save(&ws.pairs)?;

    manifest.output(&ws, &ws.pairs)?;
    manifest.details(json!({
        "discriminator": judge.name(),
        "pairs": pairs.len(),
        "attempts": stats.attempts,
        "valid": stats.valid,
        "sentinel": stats.sentinel,
        "invalid": stats.invalid,
        "transport_failures": stats.transport_failures,
        "users_without_candidates": stats.users_without_candidates,
    }));
    manifest.write(&ws.manifest("pairs"))?;

    println!(
        "pairs: {} of {} verdicts valid, {} unique pairs -> {}",
        stats.valid,
        stats.attempts,
        pairs.len(),
        ws.pairs.display()
    );
    Ok(())
}

/// Fine-tune the content projection heads on the selected pairs, then write
/// the aligned text/image tables the recommender trains on.
pub fn cmd_sft(config: &RunConfig) -> Result<()> {
    let ws = config.workspace();
    prepare_dirs(&ws)?;
    require_file(&ws.catalog, "synth")?;
    require_file(&ws.pairs, "pairs")?;

    let mut manifest = ManifestBuilder::new("sft", config);
    manifest.input(&ws, &ws.catalog)?;
    manifest.input(&ws, &ws.pairs)?;

    let catalog = load_catalog(&ws.catalog)?;
    let pairs = SamplePairSet::load(&ws.pairs, &catalog)?;
    let mut heads = ContentHeads::new(
        catalog.d_text(),
        catalog.d_image(),
        config.align.embed_dim,
        config.seed,
    );
    let opts = SftOptions {
        epochs: config.align.sft_epochs,
        batch_size: config.align.sft_batch_size,
        tau: config.align.sft_tau,
        lr: config.align.sft_lr,
        seed: config.seed,
    };
    let report = run_sft(&mut heads, &catalog, &pairs, &opts)?;
    let (text_table, image_table) = encode_content(&catalog, &heads)?;

    align::save_embeddings(&text_table, &ws.text_embeddings())?;
    align::save_embeddings(&image_table, &ws.image_embeddings())?;
    write_json(&ws.sft_report(), &report)?;
    for path in [ws.text_embeddings(), ws.image_embeddings(), ws.sft_report()] {
        manifest.output(&ws, &path)?;
    }
    let final_loss = report.loss_curve.last().copied();
    manifest.details(json!({
        "pairs": pairs.len(),
        "epochs": report.loss_curve.len(),
        "final_loss": final_loss,
        "embed_dim": config.align.embed_dim,
    }));
    manifest.write(&ws.manifest("sft"))?;

    println!(
        "sft: {} pairs, {} epochs, final loss {:.4} -> {}",
        pairs.len(),
        report.loss_curve.len(),
        final_loss.unwrap_or(f64::NAN),
        ws.embeddings_dir.display()
    );
    Ok(())
}

/// What `train` should run: one phase of the two-step schedule, or a whole
/// strategy from scratch.
enum TrainMode {
    Stage1,
    Stage2,
    Schedule(Strategy),
}

fn train_mode(config: &RunConfig, stage: Option<&str>, strategy: Option<&str>) -> Result<TrainMode> {
    match (stage, strategy) {
        (Some(_), Some(_)) => Err(Error::Config(
            "pass either --stage or --strategy, not both".into(),
        )),
        (Some("1"), None) => Ok(TrainMode::Stage1),
        (Some("2"), None) => Ok(TrainMode::Stage2),
        (Some("end2end"), None) => Ok(TrainMode::Schedule(Strategy::End2end)),
        (Some(other), None) => Err(Error::Config(format!(
            "unknown --stage '{other}' (expected 1, 2, or end2end)"
        ))),
        (None, Some(s)) => Ok(TrainMode::Schedule(s.parse()?)),
        (None, None) => {
            let token = config.train.strategy.as_deref().unwrap_or("two-step");
            Ok(TrainMode::Schedule(token.parse()?))
        }
    }
}

fn load_aligned_tables(ws: &Workspace) -> Result<(seqrec::numerics::Matrix, seqrec::numerics::Matrix)> {
    require_file(&ws.text_embeddings(), "sft")?;
    require_file(&ws.image_embeddings(), "sft")?;
    Ok((
        align::load_embeddings(&ws.text_embeddings())?,
        align::load_embeddings(&ws.image_embeddings())?,
    ))
}

fn report_summary(reports: &[TrainReport]) -> serde_json::Value {
    let phases: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "phase": r.phase,
                "epochs_run": r.epochs.len(),
                "best_epoch": r.best_epoch,
                "best_valid_ndcg10": r.best_valid_ndcg10(),
                "stop_reason": r.stop_reason,
            })
        })
        .collect();
    json!({ "phases": phases })
}

fn print_train_summary(reports: &[TrainReport]) {
    for r in reports {
        println!(
            "train [{}]: best NDCG@10 {:.4} at epoch {} of {} ({})",
            r.phase,
            r.best_valid_ndcg10(),
            r.best_epoch,
            r.epochs.len(),
            r.stop_reason
        );
    }
}

/// Train the recommender. `--stage 1` pretrains the ID pathway on the raw
/// catalog features, `--stage 2` post-trains the content pathway on top of
/// the stage-1 checkpoint and the aligned tables, and `--strategy` runs a
/// whole schedule from scratch (two-step by default).
pub fn cmd_train(config: &RunConfig, stage: Option<&str>, strategy: Option<&str>) -> Result<()> {
    let mode = train_mode(config, stage, strategy)?;
    let ws = config.workspace();
    prepare_dirs(&ws)?;

    let (tag, command) = match &mode {
        TrainMode::Stage1 => ("stage1".to_string(), "train --stage 1".to_string()),
        TrainMode::Stage2 => ("stage2".to_string(), "train --stage 2".to_string()),
        TrainMode::Schedule(s) => {
            (s.token().to_string(), format!("train --strategy {}", s.token()))
        }
    };
    let mut manifest = ManifestBuilder::new(command, config);
    manifest.input(&ws, &ws.catalog)?;
    manifest.input(&ws, &ws.interactions)?;
    let (catalog, split) = load_corpus(&ws)?;

    let (checkpoint, reports) = match mode {
        TrainMode::Stage1 => {
            let mut model = SeqRecModel::new(
                config.model_config(),
                catalog.num_items(),
                catalog.text_feature_table(),
                catalog.image_feature_table(),
            )?;
            let (ck, report) = pretrain_stage1(&mut model, &split, &config.stage1_plan())?;
            (ck, vec![report])
        }
        TrainMode::Stage2 => {
            let stage1_path = ws.checkpoint("stage1");
            require_file(&stage1_path, "train --stage 1")?;
            manifest.input(&ws, &stage1_path)?;
            let (text_table, image_table) = load_aligned_tables(&ws)?;
            manifest.input(&ws, &ws.text_embeddings())?;
            manifest.input(&ws, &ws.image_embeddings())?;
            let stage1 = Checkpoint::load(&stage1_path)?;
            let (ck, report) =
                posttrain_stage2(&stage1, &split, text_table, image_table, &config.stage2_plan())?;
            (ck, vec![report])
        }
        TrainMode::Schedule(s) => {
            let (text_table, image_table) = load_aligned_tables(&ws)?;
            manifest.input(&ws, &ws.text_embeddings())?;
            manifest.input(&ws, &ws.image_embeddings())?;
            train_strategy(
                s,
                &config.model_config(),
                &split,
                text_table,
                image_table,
                &config.stage1_plan(),
                &config.stage2_plan(),
            )?
        }
    };

    let ck_path = ws.checkpoint(&tag);
    checkpoint.save(&ck_path)?;
    let report_path = ws.train_report(&tag);
    write_json(&report_path, &reports)?;
    manifest.output(&ws, &ck_path)?;
    manifest.output(&ws, &report_path)?;
    manifest.details(report_summary(&reports));
    manifest.write(&ws.manifest(&format!("train_{tag}")))?;

    print_train_summary(&reports);
    println!("train: checkpoint -> {}", ck_path.display());
    Ok(())
}

/// Newest-artifact-first order for picking a checkpoint when the operator
/// does not name one.
const CHECKPOINT_ORDER: [&str; 6] =
    ["stage2", "two-step", "fixed-conenc", "fixed-conemb", "end2end", "stage1"];

fn resolve_checkpoint(ws: &Workspace, explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(path) => {
            require_file(path, "train")?;
            Ok(path.to_path_buf())
        }
        None => CHECKPOINT_ORDER
            .iter()
            .map(|name| ws.checkpoint(name))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Data(format!(
                    "no checkpoint under {}; run `seqrec train` first",
                    ws.checkpoints_dir.display()
                ))
            }),
    }
}

fn load_model(path: &Path) -> Result<(SeqRecModel, ForwardPathway)> {
    let checkpoint = Checkpoint::load(path)?;
    // a model trained only on the ID pathway is measured on the ID pathway
    let pathway = if checkpoint.stage == "pretrain-id" {
        ForwardPathway::IdOnly
    } else {
        ForwardPathway::Full
    };
    Ok((checkpoint.restore()?, pathway))
}

/// Rank the held-out target of every user against the full catalog and
/// report Hit@K / NDCG@K.
pub fn cmd_eval(config: &RunConfig, split: &str, checkpoint: Option<&Path>) -> Result<()> {
    let mode = match split {
        "valid" => BatchMode::Valid,
        "test" => BatchMode::Test,
        other => {
            return Err(Error::Config(format!(
                "unknown --split '{other}' (expected valid or test)"
            )));
        }
    };
    let ws = config.workspace();
    prepare_dirs(&ws)?;
    let ck_path = resolve_checkpoint(&ws, checkpoint)?;

    let mut manifest = ManifestBuilder::new(format!("eval --split {split}"), config);
    manifest.input(&ws, &ck_path)?;
    manifest.input(&ws, &ws.catalog)?;
    manifest.input(&ws, &ws.interactions)?;
    let (_, split_data) = load_corpus(&ws)?;
    let (model, pathway) = load_model(&ck_path)?;

    let opts = EvalOptions {
        ks: config.eval.ks.clone(),
        batch_size: config.eval.batch_size,
        history: if config.eval.mask_history {
            HistoryHandling::MaskSeen
        } else {
            HistoryHandling::FullCatalog
        },
        pathway,
    };
    let report = evaluate(&model, &split_data, mode, &opts)?;

    let report_path = ws.eval_report(split);
    let ranks_path = ws.ranks_csv(split);
    write_json(&report_path, &report)?;
    report.save_ranks_csv(&ranks_path)?;
    manifest.output(&ws, &report_path)?;
    manifest.output(&ws, &ranks_path)?;
    manifest.details(serde_json::to_value(&report.metrics)?);
    manifest.write(&ws.manifest(&format!("eval_{split}")))?;

    let line = report
        .metrics
        .iter()
        .map(|m| format!("Hit@{} {:.4}  NDCG@{} {:.4}", m.k, m.hit, m.k, m.ndcg))
        .collect::<Vec<_>>()
        .join("  |  ");
    println!("eval [{split}, {} users]: {line}", report.num_users);
    Ok(())
}

/// Time forward passes at the configured batch sizes and fit the latency
/// growth exponent in sequence length.
pub fn cmd_bench(config: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ws = config.workspace();
    prepare_dirs(&ws)?;
    let ck_path = resolve_checkpoint(&ws, checkpoint)?;

    let mut manifest = ManifestBuilder::new("bench", config);
    manifest.input(&ws, &ck_path)?;
    manifest.input(&ws, &ws.catalog)?;
    manifest.input(&ws, &ws.interactions)?;
    let (_, split_data) = load_corpus(&ws)?;
    let (model, _) = load_model(&ck_path)?;

    let report = bench_inference(
        &model,
        &split_data,
        &config.eval.bench_batch_sizes,
        config.eval.bench_warmup,
    )?;
    let report_path = ws.bench_report();
    write_json(&report_path, &report)?;
    manifest.output(&ws, &report_path)?;
    manifest.details(json!({
        "median_ms": report.per_batch_size.iter().map(|s| s.median_ms).collect::<Vec<_>>(),
        "scaling_exponent": report.scaling.exponent,
    }));
    manifest.write(&ws.manifest("bench"))?;

    for stats in &report.per_batch_size {
        println!(
            "bench [batch {}]: median {:.2} ms over {} passes",
            stats.batch_size, stats.median_ms, stats.timings
        );
    }
    println!(
        "bench [scaling]: exponent {:.2} over lengths {:?}",
        report.scaling.exponent, report.scaling.seq_lens
    );
    Ok(())
}
