//! Content-modality alignment: similar-item pair construction through a
//! pluggable judge, and contrastive fine-tuning of the content heads.
//!
//! For each user we render one prompt (their final item as the target, their
//! earlier items as candidates), hand it to a [`Discriminator`], and parse
//! the reply into an item-id pair. The surviving pairs supervise the t2t /
//! i2i / t2i contrastive losses in [`heads`].

pub mod embfile;
pub mod heads;

pub use embfile::{load_embeddings, save_embeddings};
pub use heads::{encode_content, run_sft, sft_loss, ContentHeads, SftOptions, SftReport};

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;

use crate::data::{InteractionLog, ItemCatalog};
use crate::error::{Error, Result};

/// A rendered judging task: one target item against earlier-history candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub target_item_id: usize,
    pub target_title: String,
    pub candidates: Vec<(usize, String)>,
    pub rendered_text: String,
}

/// The four fixed segments of the prompt. Candidate descriptions are
/// `<id>-<title>` joined by ", "; the target is `<id> - <title>`.
const PROMPT_INSTRUCTION: &str = "<Instruction>: You are a video similarity evaluation assistant. I will provide you with a target video title and a list of candidate video titles. Please help me find the most similar video title from the candidate list to the target video.";
const PROMPT_GUIDANCE: &str = "<Output Guidance>: Please find the most similar video title from the candidates and output the corresponding item-ID pair in the following format: <target_itemID>-<similar_itemID>.";
const PROMPT_FALLBACK: &str = "If there are no similar videos, output (-1,-1) directly. Please ensure the format is correct; any other format will be considered invalid.";

/// Render the prompt for one (target, candidates) task. Candidates keep
/// their interaction order; the target is filtered out of them. Returns
/// `None` when no candidate remains (the caller skips the user).
pub fn build_prompt(
    target_item_id: usize,
    target_title: &str,
    candidates: &[(usize, String)],
) -> Option<PromptInstance> {
    let candidates: Vec<(usize, String)> =
        candidates.iter().filter(|(id, _)| *id != target_item_id).cloned().collect();
    if candidates.is_empty() {
        return None;
    }
    let descriptions = candidates
        .iter()
        .map(|(id, title)| format!("{id}-{title}"))
        .collect::<Vec<_>>()
        .join(", ");
    let rendered_text = format!(
        "{PROMPT_INSTRUCTION}\n<Input>: The target video is {target_item_id} - {target_title}, \
         and the candidate videos are: {descriptions}.\n{PROMPT_GUIDANCE}\n{PROMPT_FALLBACK}"
    );
    Some(PromptInstance {
        target_item_id,
        target_title: target_title.to_string(),
        candidates,
        rendered_text,
    })
}

/// Outcome of parsing one discriminator reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Validated against the prompt: target matches, similar is a candidate.
    Pair { target_id: usize, similar_id: usize },
    /// The judge explicitly answered (-1,-1).
    Sentinel,
    /// Missing or malformed answer, or ids not present in the prompt.
    Invalid,
}

/// Extract the first `(-1,-1)` or `<int>-<int>` occurrence and validate it
/// against the prompt. Never fails: all malformed replies map to
/// [`Verdict::Invalid`].
pub fn parse_verdict(reply: &str, prompt: &PromptInstance) -> Verdict {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"\(\s*-1\s*,\s*-1\s*\)|(\d+)\s*-\s*(\d+)").expect("verdict regex")
    });
    let Some(caps) = re.captures(reply) else {
        return Verdict::Invalid;
    };
    let (Some(t), Some(s)) = (caps.get(1), caps.get(2)) else {
        return Verdict::Sentinel;
    };
    let (Ok(target_id), Ok(similar_id)) = (t.as_str().parse(), s.as_str().parse()) else {
        return Verdict::Invalid;
    };
    let target_ok = target_id == prompt.target_item_id;
    let similar_ok = prompt.candidates.iter().any(|(id, _)| *id == similar_id);
    if target_ok && similar_ok {
        Verdict::Pair { target_id, similar_id }
    } else {
        Verdict::Invalid
    }
}

/// A judge that picks the most similar candidate (or declines).
/// Implementations return raw reply text; parsing stays on our side.
pub trait Discriminator {
    fn judge(&self, prompt: &PromptInstance) -> Result<String>;

    /// Short name recorded in run manifests.
    fn name(&self) -> &str;
}

/// Deterministic stand-in judge: cosine similarity over raw text features,
/// declining when the best candidate scores below `theta`.
pub struct BuiltinCosine<'a> {
    catalog: &'a ItemCatalog,
    theta: f64,
}

impl<'a> BuiltinCosine<'a> {
    pub fn new(catalog: &'a ItemCatalog, theta: f64) -> Self {
        BuiltinCosine { catalog, theta }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl Discriminator for BuiltinCosine<'_> {
    fn judge(&self, prompt: &PromptInstance) -> Result<String> {
        let target = self.catalog.item(prompt.target_item_id)?;
        let mut best: Option<(usize, f64)> = None;
        for (id, _) in &prompt.candidates {
            let score = cosine(&target.text_feat, &self.catalog.item(*id)?.text_feat);
            // strict > keeps the earliest candidate on ties
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((*id, score));
            }
        }
        let (id, score) = best.expect("prompt candidates are nonempty");
        if score < self.theta {
            Ok("(-1,-1)".to_string())
        } else {
            Ok(format!("{}-{id}", prompt.target_item_id))
        }
    }

    fn name(&self) -> &str {
        "builtin-cosine"
    }
}

/// Judge that pipes the rendered prompt to an external command's stdin and
/// reads the reply from its stdout, so any LLM client can be plugged in.
pub struct ExternalCommand {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl ExternalCommand {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        ExternalCommand { program: program.into(), args, timeout }
    }
}

impl Discriminator for ExternalCommand {
    fn judge(&self, prompt: &PromptInstance) -> Result<String> {
        let fail = |msg: String| Error::Data(format!("discriminator {}: {msg}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(format!("spawn failed: {e}")))?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(prompt.rendered_text.as_bytes())
            .map_err(|e| fail(format!("write failed: {e}")))?;

        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("timed out after {:?}", self.timeout)));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        let mut reply = String::new();
        child.stdout.take().expect("stdout was piped").read_to_string(&mut reply)?;
        Ok(reply)
    }

    fn name(&self) -> &str {
        "external-command"
    }
}

/// Deduplicated, sorted (target, similar) supervision pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePairSet {
    pairs: Vec<(usize, usize)>,
}

impl SamplePairSet {
    /// Sorts, deduplicates, and checks both ids against the catalog.
    pub fn new(mut pairs: Vec<(usize, usize)>, catalog: &ItemCatalog) -> Result<Self> {
        pairs.sort_unstable();
        pairs.dedup();
        for &(t, s) in &pairs {
            catalog.item(t)?;
            catalog.item(s)?;
        }
        Ok(SamplePairSet { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// CSV with header `target_id,similar_id`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["target_id", "similar_id"])?;
        for (t, s) in &self.pairs {
            w.write_record([t.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, catalog: &ItemCatalog) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("cannot open pairs {}: {e}", path.display())))?;
        let mut pairs = Vec::new();
        for (idx, row) in reader.deserialize().enumerate() {
            let pair: (usize, usize) =
                row.map_err(|e| Error::Data(format!("pairs line {}: {e}", idx + 2)))?;
            pairs.push(pair);
        }
        SamplePairSet::new(pairs, catalog)
    }
}

/// Book-keeping from one [`select_pairs`] sweep; `attempts` counts prompts
/// actually judged, and valid + sentinel + invalid == attempts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectStats {
    pub attempts: usize,
    pub valid: usize,
    pub sentinel: usize,
    pub invalid: usize,
    pub transport_failures: usize,
    pub users_without_candidates: usize,
}

/// One verdict attempt per user: target = final item, candidates = earlier
/// items (deduplicated in interaction order, capped at the most recent
/// `candidate_cap`). Sentinel/invalid verdicts contribute nothing; transport
/// failures skip the user.
pub fn select_pairs(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    discriminator: &dyn Discriminator,
    candidate_cap: usize,
) -> Result<(SamplePairSet, SelectStats)> {
    let mut stats = SelectStats::default();
    let mut pairs = Vec::new();
    for (_, seq) in log.iter() {
        let (&target_id, history) = seq.split_last().expect("sequences are nonempty");

        let mut seen = BTreeSet::new();
        let mut candidates: Vec<(usize, String)> = Vec::new();
        for &id in history {
            if id != target_id && seen.insert(id) {
                candidates.push((id, catalog.item(id)?.title.clone()));
            }
        }
        if candidates.len() > candidate_cap {
            candidates.drain(..candidates.len() - candidate_cap);
        }

        let target_title = &catalog.item(target_id)?.title;
        let Some(prompt) = build_prompt(target_id, target_title, &candidates) else {
            stats.users_without_candidates += 1;
            continue;
        };
        let reply = match discriminator.judge(&prompt) {
            Ok(reply) => reply,
            Err(_) => {
                stats.transport_failures += 1;
                continue;
            }
        };
        stats.attempts += 1;
        match parse_verdict(&reply, &prompt) {
            Verdict::Pair { target_id, similar_id } => {
                stats.valid += 1;
                pairs.push((target_id, similar_id));
            }
            Verdict::Sentinel => stats.sentinel += 1,
            Verdict::Invalid => stats.invalid += 1,
        }
    }
    Ok((SamplePairSet::new(pairs, catalog)?, stats))
}
