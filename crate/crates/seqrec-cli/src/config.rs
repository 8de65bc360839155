//! Run configuration: one TOML file, a section per pipeline stage, dotted-key
//! overrides from the command line. Parsing is strict — a typo'd key fails
//! with its name instead of being silently ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqrec::data::SynthSpec;
use seqrec::error::{Error, Result};
use seqrec::model::ModelConfig;
use seqrec::training::TrainPlan;

/// Everything a run needs. The global `seed` drives data generation, weight
/// initialization, shuffling and dropout; `--seed` replaces it wholesale so
/// one flag reseeds the entire pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory that anchors every relative entry in `paths`.
    pub out_dir: PathBuf,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub align: AlignSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs"),
            paths: PathsSection::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            align: AlignSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Artifact locations. Relative entries are joined onto `out_dir`; absolute
/// entries are used as-is, so a shared catalog can feed several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub catalog: PathBuf,
    pub interactions: PathBuf,
    /// Ground-truth item cluster labels, kept for oracle checks.
    pub clusters: PathBuf,
    pub pairs: PathBuf,
    /// Directory for the aligned text/image tables and the SFT report.
    pub embeddings: PathBuf,
    pub checkpoints: PathBuf,
    /// Directory for evaluation/benchmark reports and run manifests.
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            catalog: PathBuf::from("catalog.jsonl"),
            interactions: PathBuf::from("interactions.csv"),
            clusters: PathBuf::from("item_clusters.csv"),
            pairs: PathBuf::from("pairs.csv"),
            embeddings: PathBuf::from("embeddings"),
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
        }
    }
}

/// Synthetic-corpus shape. Mirrors [`SynthSpec`] minus the seed, which the
/// run seed supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_users: usize,
    pub num_items: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub num_clusters: usize,
    pub signal_strength: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub noise_scale: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            num_users: 300,
            num_items: 120,
            d_text: 24,
            d_image: 16,
            num_clusters: 6,
            signal_strength: 0.9,
            min_seq_len: 6,
            max_seq_len: 20,
            noise_scale: 0.25,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_users: self.num_users,
            num_items: self.num_items,
            d_text: self.d_text,
            d_image: self.d_image,
            num_clusters: self.num_clusters,
            signal_strength: self.signal_strength,
            min_seq_len: self.min_seq_len,
            max_seq_len: self.max_seq_len,
            noise_scale: self.noise_scale,
            seed,
        }
    }
}

/// Architecture knobs. The loss weights (α, λ, τ) live in the train
/// sections — they belong to a phase, not the architecture — and the run
/// seed supplies initialization, so neither appears here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub max_seq_len: usize,
    pub latent_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub residual_layer_norm: bool,
    pub lora_rank: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            max_seq_len: 24,
            latent_dim: 32,
            num_blocks: 1,
            num_heads: 2,
            dropout: 0.1,
            residual_layer_norm: true,
            lora_rank: 4,
        }
    }
}

/// Pair selection and content-head fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    /// "builtin" (deterministic cosine judge) or "command" (external program
    /// speaking the one-prompt-per-line protocol).
    pub discriminator: String,
    /// Decline threshold of the builtin judge.
    pub theta: f64,
    /// Most recent distinct history items offered per prompt.
    pub candidate_cap: usize,
    /// External judge program; required when `discriminator = "command"`.
    pub command: String,
    pub command_args: Vec<String>,
    pub timeout_s: u64,
    /// Width of the aligned text/image tables the heads produce.
    pub embed_dim: usize,
    pub sft_epochs: usize,
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub sft_tau: f64,
}

impl Default for AlignSection {
    fn default() -> Self {
        AlignSection {
            discriminator: "builtin".into(),
            theta: 0.35,
            candidate_cap: 10,
            command: String::new(),
            command_args: Vec::new(),
            timeout_s: 10,
            embed_dim: 32,
            sft_epochs: 30,
            sft_batch_size: 64,
            sft_lr: 1e-3,
            sft_tau: 0.05,
        }
    }
}

/// Which schedule `train` runs by default, plus per-phase overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "two-step", "fixed-conenc", "fixed-conemb", or "end2end".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub stage1: PlanSection,
    pub stage2: PlanSection,
}

/// Optional overrides over the library's per-stage plan defaults. Only the
/// keys present in the file change anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl PlanSection {
    fn apply(&self, mut base: TrainPlan) -> TrainPlan {
        if let Some(v) = self.epochs_max {
            base.epochs_max = v;
        }
        if let Some(v) = self.patience {
            base.patience = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.lr {
            base.lr = v;
        }
        if let Some(v) = self.alpha {
            base.alpha = v;
        }
        if let Some(v) = self.lambda {
            base.lambda = v;
        }
        if let Some(v) = self.tau {
            base.tau = v;
        }
        base
    }
}

/// Ranking evaluation and latency benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Cutoffs K for Hit@K / NDCG@K.
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Drop already-interacted items from the candidate pool.
    pub mask_history: bool,
    pub bench_batch_sizes: Vec<usize>,
    pub bench_warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![5, 10],
            batch_size: 256,
            mask_history: false,
            bench_batch_sizes: vec![16, 64],
            bench_warmup: 2,
        }
    }
}

/// Every artifact location a command might touch, resolved against the
/// output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub out_dir: PathBuf,
    pub catalog: PathBuf,
    pub interactions: PathBuf,
    pub clusters: PathBuf,
    pub pairs: PathBuf,
    pub embeddings_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Workspace {
    pub fn text_embeddings(&self) -> PathBuf {
        self.embeddings_dir.join("text.json")
    }

    pub fn image_embeddings(&self) -> PathBuf {
        self.embeddings_dir.join("image.json")
    }

    pub fn sft_report(&self) -> PathBuf {
        self.embeddings_dir.join("sft_report.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints_dir.join(format!("{name}.json"))
    }

    pub fn train_report(&self, name: &str) -> PathBuf {
        self.reports_dir.join(format!("train_{name}.json"))
    }

    pub fn eval_report(&self, split: &str) -> PathBuf {
        self.reports_dir.join(format!("eval_{split}.json"))
    }

    pub fn ranks_csv(&self, split: &str) -> PathBuf {
        self.reports_dir.join(format!("ranks_{split}.csv"))
    }

    pub fn bench_report(&self) -> PathBuf {
        self.reports_dir.join("bench.json")
    }

    pub fn manifest(&self, tag: &str) -> PathBuf {
        self.reports_dir.join(format!("manifest_{tag}.json"))
    }

    /// Label for manifests: path relative to the output directory when it
    /// lives inside it, so re-runs into the same directory hash identically.
    pub fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.out_dir).unwrap_or(path).display().to_string()
    }
}

impl RunConfig {
    /// Load the configuration for one invocation: file (or built-in
    /// defaults), then `--set` overrides, then the `--seed`/`--out` flags.
    pub fn load(
        file: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<RunConfig> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", path.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::try_from(RunConfig::default())
                .expect("default config serializes to a table"),
        };
        for entry in sets {
            apply_override(&mut table, entry)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(dir) = out {
            config.out_dir = dir.to_path_buf();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.stage1_plan().validate()?;
        self.stage2_plan().validate()?;
        match self.align.discriminator.as_str() {
            "builtin" => {}
            "command" => {
                if self.align.command.is_empty() {
                    return Err(Error::Config(
                        "align.discriminator = \"command\" needs align.command".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown align.discriminator '{other}' (expected builtin or command)"
                )));
            }
        }
        if self.align.embed_dim == 0 {
            return Err(Error::Config("align.embed_dim must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks needs at least one positive cutoff".into()));
        }
        Ok(())
    }

    /// The architecture the train commands build, with the loss weights
    /// echoed from the stage-2 plan and the run seed driving initialization.
    pub fn model_config(&self) -> ModelConfig {
        let stage2 = self.stage2_plan();
        ModelConfig {
            max_seq_len: self.model.max_seq_len,
            latent_dim: self.model.latent_dim,
            num_blocks: self.model.num_blocks,
            num_heads: self.model.num_heads,
            dropout: self.model.dropout,
            residual_layer_norm: self.model.residual_layer_norm,
            temperature: stage2.tau,
            content_loss_weight: stage2.alpha,
            weight_decay: stage2.lambda,
            lora_rank: self.model.lora_rank,
            seed: self.seed,
        }
    }

    pub fn stage1_plan(&self) -> TrainPlan {
        self.train.stage1.apply(TrainPlan::stage1(self.seed))
    }

    pub fn stage2_plan(&self) -> TrainPlan {
        self.train.stage2.apply(TrainPlan::stage2(self.seed))
    }

    pub fn workspace(&self) -> Workspace {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.out_dir.join(p)
            }
        };
        Workspace {
            out_dir: self.out_dir.clone(),
            catalog: join(&self.paths.catalog),
            interactions: join(&self.paths.interactions),
            clusters: join(&self.paths.clusters),
            pairs: join(&self.paths.pairs),
            embeddings_dir: join(&self.paths.embeddings),
            checkpoints_dir: join(&self.paths.checkpoints),
            reports_dir: join(&self.paths.reports),
        }
    }
}

/// Apply one `--set key.path=value` override onto the raw TOML table. The
/// value is parsed as a TOML literal when possible and falls back to a bare
/// string, so `--set model.latent_dim=48` and `--set paths.catalog=c.jsonl`
/// both do what they look like.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{entry}'")))?;
    let mut segments = key.split('.').collect::<Vec<_>>();
    let leaf = segments.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        Error::Config(format!("--set key '{key}' must name a config entry"))
    })?;

    let mut node = table;
    for (i, segment) in segments.iter().enumerate() {
        node = node
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!(
                    "--set key '{}' is not a table",
                    segments[..=i].join(".")
                ))
            })?;
    }
    node.insert(leaf.to_string(), parse_literal(raw));
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
