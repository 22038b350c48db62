//! Subcommand bodies. Each resolves its config, records the run, then reads
//! inputs and writes outputs under the output directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Read, Write as _};
use std::path::{Path, PathBuf};

use alt_core::ablation::{self, LadderConfig, StageRemovalConfig, Variant};
use alt_core::data::{self, Manifest, SegmentRules};
use alt_core::decode::{self, DecodeWeights};
use alt_core::encoder::{self, EncoderConfig};
use alt_core::lm::{self, LanguageModel, LmConfig, LmTrainConfig};
use alt_core::metrics;
use alt_core::model::{HeadKind, Model, ModelConfig};
use alt_core::synth::{self, Domain};
use alt_core::text::{Normalized, Normalizer, TokenInventory};
use alt_core::trainer::{self, EpochReport, PretrainConfig, TrainConfig, Utterance};
use alt_core::{Error, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::{config, run, Cli, Command, Global};

/// Shared state of one invocation.
struct Ctx<'a> {
    g: &'a Global,
    name: &'static str,
    file: Option<toml::Table>,
}

impl<'a> Ctx<'a> {
    fn new(cli: &'a Cli) -> Result<Self> {
        let file = cli.global.config.as_deref().map(config::read_table).transpose()?;
        Ok(Self {
            g: &cli.global,
            name: cli.command.name(),
            file,
        })
    }

    fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T) -> Result<T> {
        config::resolve(defaults, self.file.as_ref(), &self.g.sets)
    }

    fn out(&self, file: &str) -> PathBuf {
        self.g.out.join(file)
    }

    fn seed(&self, configured: u64) -> u64 {
        self.g.seed.unwrap_or(configured)
    }

    fn workers(&self, configured: usize) -> usize {
        self.g.workers.unwrap_or(configured).max(1)
    }

    /// Writes `<out>/<subcommand>.run.json`.
    fn record(&self, cfg: &impl Serialize, seed: u64, workers: usize, inputs: &[PathBuf]) -> Result<()> {
        let mut inputs: Vec<PathBuf> = inputs.to_vec();
        if let Some(c) = &self.g.config {
            inputs.push(c.clone());
        }
        if let Some(i) = &self.g.inventory {
            inputs.push(i.clone());
        }
        run::write(
            &self.g.out,
            &run::RunMeta {
                subcommand: self.name,
                argv: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION"),
                seed,
                workers,
                config: serde_json::to_value(cfg)?,
                inputs: run::hash_inputs(&inputs),
            },
        )
    }

    fn inventory(&self) -> Result<TokenInventory> {
        match &self.g.inventory {
            Some(p) => TokenInventory::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => Ok(TokenInventory::default()),
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Normalize(a) => normalize(&ctx, a),
        Command::Segment(a) => segment(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::Subset(a) => subset(&ctx, a),
        Command::Dedup(a) => dedup(&ctx, a),
        Command::Synth(a) => synth_corpus(&ctx, a),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Finetune(a) => train_stage(&ctx, a, Stage::Finetune),
        Command::Transfer(a) => train_stage(&ctx, a, Stage::Transfer),
        Command::LmTrain(a) => lm_train(&ctx, a),
        Command::Decode(a) => decode_manifest(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
    }
}

/// Config tree with no keys, for subcommands driven by flags alone.
#[derive(Default, Serialize, Deserialize)]
struct NoConfig {}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path)
}

fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.write(path)?;
    info!(path = %path.display(), records = m.len(), "wrote manifest");
    Ok(())
}

#[derive(Args, Debug)]
pub struct NormalizeArgs {
    /// Print an empty line for each dropped line so that output lines stay
    /// aligned with input lines.
    #[arg(long)]
    keep_alignment: bool,
}

fn normalize(ctx: &Ctx, a: &NormalizeArgs) -> Result<()> {
    let cfg = ctx.resolve(&NoConfig {})?;
    let mut input = String::new();
    io::stdin()
        .lock()
        .read_to_string(&mut input)
        .map_err(|e| Error::io("<stdin>", e))?;
    let normalizer = Normalizer::new(ctx.inventory()?);
    let mut out = String::new();
    let mut dropped = 0;
    for (n, line) in input.lines().enumerate() {
        match normalizer.normalize(line) {
            Normalized::Kept(s) => {
                out.push_str(&s);
                out.push('\n');
            }
            Normalized::Dropped(reason) => {
                dropped += 1;
                warn!(line = n + 1, reason = %reason, "dropped line");
                if a.keep_alignment {
                    out.push('\n');
                }
            }
        }
    }
    io::stdout()
        .lock()
        .write_all(out.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    info!(lines = input.lines().count(), dropped, "normalized");
    ctx.record(&cfg, 0, 1, &[])
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct SegmentFile {
    segment: SegmentRules,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Annotation files with `start<TAB>end<TAB>text` lines; the file stem is
    /// the recording id.
    #[arg(required = true)]
    annotations: Vec<PathBuf>,
    /// Dataset name stored in the manifest.
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "train")]
    split: String,
    /// Optional `recording<TAB>seconds` file enabling the out-of-bounds rule.
    #[arg(long)]
    durations: Option<PathBuf>,
    /// Manifest path; defaults to `<out>/<name>-<split>.jsonl`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_durations(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (rec, secs) = l.split_once('\t').ok_or_else(|| Error::Format {
                what: "durations",
                detail: format!("line {}: expected recording<TAB>seconds", n + 1),
            })?;
            let secs = secs.trim().parse().map_err(|_| Error::Format {
                what: "durations",
                detail: format!("line {}: bad number {secs:?}", n + 1),
            })?;
            Ok((rec.to_string(), secs))
        })
        .collect()
}

fn segment(ctx: &Ctx, a: &SegmentArgs) -> Result<()> {
    let cfg = ctx.resolve(&SegmentFile::default())?;
    let mut inputs = a.annotations.clone();
    inputs.extend(a.durations.clone());
    ctx.record(&cfg, 0, 1, &inputs)?;
    let durations = a
        .durations
        .as_deref()
        .map(parse_durations)
        .transpose()?
        .unwrap_or_default();
    let normalizer = Normalizer::new(ctx.inventory()?);
    let mut records = Vec::new();
    let mut removed = String::from("recording\tline\treason\n");
    for path in &a.annotations {
        let recording = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::config("annotations", format!("no file stem in {}", path.display())))?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let annotations = data::parse_annotations(&text)?;
        let out = data::segment(
            recording,
            &annotations,
            durations.get(recording).copied(),
            &a.split,
            &cfg.segment,
            &normalizer,
        );
        for (i, reason) in &out.removed {
            warn!(recording, line = i + 1, reason = ?reason, "removed annotation");
            let _ = writeln!(removed, "{recording}\t{}\t{reason:?}", i + 1);
        }
        for (x, y) in &out.overlaps {
            warn!(recording, first = x + 1, second = y + 1, "overlapping annotations");
        }
        records.extend(out.records);
    }
    let manifest = Manifest::new(a.name.clone(), a.split.clone(), records)?;
    let output = a
        .output
        .clone()
        .unwrap_or_else(|| ctx.out(&format!("{}-{}.jsonl", a.name, a.split)));
    write_manifest(&manifest, &output)?;
    run::write_text(&ctx.out("segment-removed.tsv"), &removed)
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
}

fn stats(ctx: &Ctx, a: &StatsArgs) -> Result<()> {
    let cfg = ctx.resolve(&NoConfig {})?;
    ctx.record(&cfg, 0, 1, &a.manifests)?;
    let rows = a
        .manifests
        .iter()
        .map(|p| {
            let m = read_manifest(p)?;
            let s = data::stats(&m);
            Ok((m.name, m.split, s))
        })
        .collect::<Result<Vec<_>>>()?;
    print!("{}", data::stats_table(&rows));
    Ok(())
}

#[derive(Args, Debug)]
pub struct SubsetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Target total duration in hours.
    #[arg(long)]
    hours: f64,
    /// Defaults to `<out>/<name>-<split>-subset.jsonl`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn subset(ctx: &Ctx, a: &SubsetArgs) -> Result<()> {
    let cfg = ctx.resolve(&NoConfig {})?;
    let seed = ctx.seed(0);
    ctx.record(&cfg, seed, 1, std::slice::from_ref(&a.manifest))?;
    if !(a.hours >= 0.0) {
        return Err(Error::config("hours", "must be nonnegative"));
    }
    let m = read_manifest(&a.manifest)?;
    let sub = data::subset_by_duration(&m, a.hours * 3600.0, seed)?;
    let output = a
        .output
        .clone()
        .unwrap_or_else(|| ctx.out(&format!("{}-{}-subset.jsonl", m.name, m.split)));
    write_manifest(&sub, &output)
}

#[derive(Args, Debug)]
pub struct DedupArgs {
    #[arg(long)]
    train: PathBuf,
    /// Test manifests whose recordings must not appear in training.
    #[arg(long, required = true)]
    test: Vec<PathBuf>,
    /// Defaults to `<out>/<name>-<split>-dedup.jsonl`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn dedup(ctx: &Ctx, a: &DedupArgs) -> Result<()> {
    let cfg = ctx.resolve(&NoConfig {})?;
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.test.iter().cloned());
    ctx.record(&cfg, 0, 1, &inputs)?;
    let train = read_manifest(&a.train)?;
    let tests = a.test.iter().map(|p| read_manifest(p)).collect::<Result<Vec<_>>>()?;
    let kept = data::overlap_filter(&train, &tests);
    info!(
        removed = train.len() - kept.len(),
        kept = kept.len(),
        "removed overlapping records"
    );
    let output = a
        .output
        .clone()
        .unwrap_or_else(|| ctx.out(&format!("{}-{}-dedup.jsonl", train.name, train.split)));
    write_manifest(&kept, &output)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Domain preset: speechlike or singlike.
    #[arg(long, default_value = "speechlike")]
    domain: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value = "train")]
    split: String,
    /// Dataset name; defaults to the domain name.
    #[arg(long)]
    name: Option<String>,
    /// Overrides the preset's noise level.
    #[arg(long)]
    noise: Option<f64>,
    /// Also write this many grammar sentences to `<out>/lm.txt`.
    #[arg(long, default_value_t = 0)]
    lm_sentences: usize,
}

fn synth_corpus(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut domain = Domain::preset(&a.domain)?;
    if let Some(n) = a.noise {
        domain = domain.with_noise(n);
    }
    let domain = ctx.resolve(&domain)?;
    domain.validate()?;
    let seed = ctx.seed(0);
    ctx.record(&domain, seed, 1, &[])?;
    let inv = ctx.inventory()?;
    let name = a.name.clone().unwrap_or_else(|| domain.name.clone());
    let utts = synth::generate(&domain, a.count, seed, &inv)?;
    let manifest = synth::write_corpus(&ctx.g.out, &name, &a.split, &utts)?;
    write_manifest(&manifest, &ctx.out(&format!("{name}-{}.jsonl", a.split)))?;
    let mut refs = String::new();
    for u in &utts {
        let _ = writeln!(refs, "{}\t{}", u.id, u.text);
    }
    run::write_text(&ctx.out(&format!("{name}-{}.ref.tsv", a.split)), &refs)?;
    if a.lm_sentences > 0 {
        let lines = synth::lm_corpus(a.lm_sentences, seed);
        run::write_text(&ctx.out("lm.txt"), &(lines.join("\n") + "\n"))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Frontend {
    /// Feature matrices feed the context network directly.
    Features,
    /// Raw mono signal through the convolutional frontend.
    Signal,
}

/// Model dimensions; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ModelSection {
    frontend: Frontend,
    dim: usize,
    heads: usize,
    blocks: usize,
    ffn_dim: usize,
    decoder_hidden: usize,
    attn_dim: usize,
    emb_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            frontend: Frontend::Features,
            dim: 64,
            heads: 4,
            blocks: 2,
            ffn_dim: 128,
            decoder_hidden: 64,
            attn_dim: 32,
            emb_dim: 32,
        }
    }
}

impl ModelSection {
    fn build(&self, input_dim: usize, head: HeadKind, inv: &TokenInventory) -> ModelConfig {
        let mut enc = match self.frontend {
            Frontend::Features => EncoderConfig::toy_features(input_dim),
            Frontend::Signal => EncoderConfig::toy(),
        };
        enc.dim = self.dim;
        enc.heads = self.heads;
        enc.context_blocks = self.blocks;
        enc.ffn_dim = self.ffn_dim;
        let mut cfg = ModelConfig::new(enc, head, inv);
        cfg.s2s.hidden = self.decoder_hidden;
        cfg.s2s.attn_dim = self.attn_dim;
        cfg.s2s.emb_dim = self.emb_dim;
        cfg
    }
}

fn load_set(path: &Path, inv: &TokenInventory) -> Result<Vec<Utterance>> {
    let m = read_manifest(path)?;
    trainer::load_utterances(&m, path, inv)
}

fn input_dim(utts: &[Utterance]) -> Result<usize> {
    utts.first().map(|u| u.features.cols()).ok_or(Error::EmptyCorpus)
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainFile {
    model: ModelSection,
    pretrain: PretrainConfig,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Unlabelled utterances with feature files.
    #[arg(long)]
    manifest: PathBuf,
}

fn pretrain(ctx: &Ctx, a: &PretrainArgs) -> Result<()> {
    let mut cfg = ctx.resolve(&PretrainFile::default())?;
    cfg.pretrain.seed = ctx.seed(cfg.pretrain.seed);
    cfg.pretrain.workers = ctx.workers(cfg.pretrain.workers);
    ctx.record(
        &cfg,
        cfg.pretrain.seed,
        cfg.pretrain.workers,
        std::slice::from_ref(&a.manifest),
    )?;
    let inv = ctx.inventory()?;
    let m = read_manifest(&a.manifest)?;
    let corpus = m
        .records
        .iter()
        .map(|r| {
            let p = data::feature_path(&a.manifest, r).ok_or_else(|| Error::Format {
                what: "manifest",
                detail: format!("{} has no feature file", r.id),
            })?;
            encoder::read_matrix(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = corpus.first().map(|x| x.cols()).ok_or(Error::EmptyCorpus)?;
    let model = Model::new(cfg.model.build(dim, HeadKind::None, &inv), inv, cfg.pretrain.seed)?;
    let (model, codebook, reports) = trainer::pretrain(model, &corpus, &cfg.pretrain, |r| {
        info!(epoch = r.epoch, loss = r.loss, skipped = r.skipped, "pretrain epoch");
    })?;
    model.save(&ctx.out("model.ckpt"))?;
    encoder::write_matrix(&ctx.out("codebook.f32"), codebook.entries())?;
    let mut csv = String::from("epoch,loss,skipped,distractors_clamped\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{:.6},{},{}", r.epoch, r.loss, r.skipped, r.distractors_clamped);
    }
    run::write_text(&ctx.out("pretrain.csv"), &csv)
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelSection,
    train: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Finetune,
    Transfer,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Dev manifest for model selection and the learning-rate schedule.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Starting checkpoint. Optional for finetune (a pretrained encoder),
    /// required for transfer.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn epochs_csv(reports: &[EpochReport]) -> String {
    let mut csv = String::from(
        "epoch,train_loss,dev_loss,dev_ctc,dev_s2s,dev_wer,lr_head,lr_encoder,filtered,infeasible,wall_time\n",
    );
    for r in reports {
        let _ = writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3e},{:.3e},{},{},{:.3}",
            r.epoch,
            r.train_loss,
            r.dev_loss,
            r.dev_ctc,
            r.dev_s2s,
            r.dev_wer,
            r.lr_head,
            r.lr_encoder,
            r.filtered,
            r.infeasible,
            r.wall_time
        );
    }
    csv
}

fn log_epoch(r: &EpochReport) {
    info!(
        epoch = r.epoch,
        train_loss = r.train_loss,
        dev_loss = r.dev_loss,
        dev_wer = r.dev_wer,
        lr_head = r.lr_head,
        lr_encoder = r.lr_encoder,
        "epoch"
    );
}

fn train_stage(ctx: &Ctx, a: &TrainArgs, stage: Stage) -> Result<()> {
    let defaults = match stage {
        Stage::Finetune => TrainFile {
            train: TrainConfig::finetune_speech(),
            ..TrainFile::default()
        },
        Stage::Transfer => TrainFile::default(),
    };
    let mut cfg = ctx.resolve(&defaults)?;
    cfg.train.seed = ctx.seed(cfg.train.seed);
    cfg.train.workers = ctx.workers(cfg.train.workers);
    cfg.train.validate()?;
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.dev.clone());
    inputs.extend(a.init.clone());
    ctx.record(&cfg, cfg.train.seed, cfg.train.workers, &inputs)?;

    let inv = ctx.inventory()?;
    let train = load_set(&a.train, &inv)?;
    let dev = a
        .dev
        .as_deref()
        .map(|p| load_set(p, &inv))
        .transpose()?
        .unwrap_or_default();
    let dim = input_dim(&train)?;
    let seed = cfg.train.seed;
    let outcome = match stage {
        Stage::Finetune => {
            let head = if cfg.train.lambda_a < 1.0 {
                HeadKind::Hybrid
            } else {
                HeadKind::Ctc
            };
            let wanted = cfg.model.build(dim, head, &inv);
            let model = match &a.init {
                Some(p) => {
                    let init = Model::load(p)?;
                    if init.inventory.hash() != inv.hash() {
                        return Err(Error::CheckpointMismatch("token inventory differs".into()));
                    }
                    if init.cfg.encoder != wanted.encoder {
                        return Err(Error::CheckpointMismatch(
                            "encoder differs from the [model] section".into(),
                        ));
                    }
                    init.with_new_head(head, seed)?
                }
                None => Model::new(wanted, inv, seed)?,
            };
            trainer::train(model, &train, &dev, &cfg.train, log_epoch)?
        }
        Stage::Transfer => {
            let path = a
                .init
                .as_deref()
                .ok_or_else(|| Error::config("init", "transfer needs a starting checkpoint"))?;
            let init = Model::load(path)?;
            let start = if init.cfg.head == HeadKind::Hybrid {
                init
            } else {
                init.with_new_head(HeadKind::Hybrid, seed)?
            };
            let expected = cfg.model.build(dim, HeadKind::Hybrid, &inv);
            trainer::consecutive_transfer(start, &expected, &inv, &train, &dev, &cfg.train, log_epoch)?
        }
    };
    info!(best_epoch = ?outcome.best_epoch, "training finished");
    outcome.model.save(&ctx.out("model.ckpt"))?;
    run::write_text(&ctx.out("epochs.csv"), &epochs_csv(&outcome.reports))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct LmSection {
    emb_dim: usize,
    layers: usize,
    hidden: usize,
    mlp_layers: usize,
    mlp_hidden: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        let t = LmConfig::toy(1);
        Self {
            emb_dim: t.emb_dim,
            layers: t.layers,
            hidden: t.hidden,
            mlp_layers: t.mlp_layers,
            mlp_hidden: t.mlp_hidden,
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct LmFile {
    lm: LmSection,
    train: LmTrainConfig,
}

#[derive(Args, Debug)]
pub struct LmTrainArgs {
    /// Normalized text, one line per row.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    io::BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

fn lm_train(ctx: &Ctx, a: &LmTrainArgs) -> Result<()> {
    let mut cfg = ctx.resolve(&LmFile::default())?;
    cfg.train.seed = ctx.seed(cfg.train.seed);
    let mut inputs = vec![a.train.clone()];
    inputs.extend(a.dev.clone());
    ctx.record(&cfg, cfg.train.seed, 1, &inputs)?;
    let inv = ctx.inventory()?;
    let lc = LmConfig {
        vocab: inv.label_count(),
        emb_dim: cfg.lm.emb_dim,
        layers: cfg.lm.layers,
        hidden: cfg.lm.hidden,
        mlp_layers: cfg.lm.mlp_layers,
        mlp_hidden: cfg.lm.mlp_hidden,
    };
    let train = lm::encode_corpus(&read_lines(&a.train)?, &inv)?;
    let dev = match &a.dev {
        Some(p) => lm::encode_corpus(&read_lines(p)?, &inv)?,
        None => Vec::new(),
    };
    let start = inv.label_index(inv.start_token())?;
    let eos = inv.label_index(inv.eos())?;
    let trained = lm::lm_train(&train, &dev, &lc, &cfg.train, start, eos, |e| {
        info!(
            epoch = e.epoch,
            train_loss = e.train_loss,
            dev_perplexity = e.dev_perplexity,
            "lm epoch"
        );
    })?;
    let model = LanguageModel {
        cfg: lc,
        inventory: inv,
        params: trained.params,
    };
    model.save(&ctx.out("lm.ckpt"))?;
    let mut csv = String::from("epoch,train_loss,dev_perplexity\n");
    for e in &trained.history {
        let _ = writeln!(csv, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.dev_perplexity);
    }
    run::write_text(&ctx.out("perplexity.csv"), &csv)
}

#[derive(Serialize, Deserialize)]
struct DecodeFile {
    decode: DecodeWeights,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Dsing,
    Dali,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Utterances with feature files.
    #[arg(long)]
    manifest: PathBuf,
    /// Hybrid or CTC checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Language-model checkpoint; needed when lambda-c is positive.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Weight preset. dsing: lambda-b 0.4, lambda-c 0.5; dali: 0.3, 0.2;
    /// both use beam 512.
    #[arg(long, value_enum, default_value_t = Profile::Dsing)]
    profile: Profile,
    /// Beam width [default: from the profile].
    #[arg(long)]
    beam: Option<usize>,
    /// CTC weight against the attention decoder, in [0, 1] [default: from
    /// the profile].
    #[arg(long)]
    lambda_b: Option<f64>,
    /// Language-model weight [default: from the profile].
    #[arg(long)]
    lambda_c: Option<f64>,
    /// Most labels per hypothesis; defaults to the frame count.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Also write a per-hypothesis score breakdown to `<out>/scores.csv`.
    #[arg(long)]
    scores: bool,
    /// Transcript path; defaults to `<out>/hyp.tsv`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn decode_manifest(ctx: &Ctx, a: &DecodeArgs) -> Result<()> {
    let preset = match a.profile {
        Profile::Dsing => DecodeWeights::dsing(),
        Profile::Dali => DecodeWeights::dali(),
    };
    let mut w = ctx.resolve(&DecodeFile { decode: preset })?.decode;
    w.beam = a.beam.unwrap_or(w.beam);
    w.lambda_b = a.lambda_b.unwrap_or(w.lambda_b);
    w.lambda_c = a.lambda_c.unwrap_or(w.lambda_c);
    w.max_len = a.max_len.or(w.max_len);
    let w = w.validated()?;
    if w.lambda_c > 0.0 && a.lm.is_none() {
        return Err(Error::config(
            "lambda_c",
            "positive weight needs --lm; pass --lambda-c 0 to decode without one",
        ));
    }
    let workers = ctx.workers(1);
    let mut inputs = vec![a.manifest.clone(), a.model.clone()];
    inputs.extend(a.lm.clone());
    ctx.record(&DecodeFile { decode: w }, 0, workers, &inputs)?;

    let model = Model::load(&a.model)?;
    let lm = a.lm.as_deref().map(LanguageModel::load).transpose()?;
    let utts = load_set(&a.manifest, &model.inventory)?;
    let pool = trainer::pool(workers)?;
    let results = pool.install(|| {
        utts.par_iter()
            .map(|u| decode::decode_model(&model, lm.as_ref(), &u.features, &w, a.nbest.max(1)))
            .collect::<Vec<_>>()
    });
    let mut hyp = String::new();
    let mut scores = String::from("id,rank,text,ctc,s2s,lm,score,finished\n");
    for (u, r) in utts.iter().zip(results) {
        let r = r?;
        if r.no_finished_hypothesis {
            warn!(id = %u.id, "no hypothesis reached end of sentence");
        }
        let _ = writeln!(hyp, "{}\t{}", u.id, r.best.text);
        for (rank, h) in r.nbest.iter().enumerate() {
            let _ = writeln!(
                scores,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                u.id,
                rank + 1,
                h.text,
                h.ctc,
                h.s2s,
                h.lm,
                h.score,
                h.finished
            );
        }
    }
    let output = a.output.clone().unwrap_or_else(|| ctx.out("hyp.tsv"));
    run::write_text(&output, &hyp)?;
    info!(path = %output.display(), utterances = utts.len(), "wrote transcripts");
    if a.scores {
        run::write_text(&ctx.out("scores.csv"), &scores)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `id<TAB>text` reference transcripts.
    #[arg(long)]
    reference: PathBuf,
    /// `id<TAB>text` hypotheses; a missing id counts as an empty hypothesis.
    #[arg(long)]
    hypothesis: PathBuf,
    /// Also report the character error rate.
    #[arg(long)]
    cer: bool,
}

/// Reads `id<TAB>text` lines in file order.
fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(n, l)| {
            let (id, text) = l.split_once('\t').unwrap_or((l.as_str(), ""));
            if !seen.insert(id.to_string()) {
                return Err(Error::DuplicateId(id.to_string()));
            }
            if id.is_empty() {
                return Err(Error::Format {
                    what: "transcript",
                    detail: format!("{}: line {} has no id", path.display(), n + 1),
                });
            }
            Ok((id.to_string(), text.trim().to_string()))
        })
        .collect()
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let cfg = ctx.resolve(&NoConfig {})?;
    ctx.record(&cfg, 0, 1, &[a.reference.clone(), a.hypothesis.clone()])?;
    let refs = read_transcripts(&a.reference)?;
    let mut hyps: BTreeMap<String, String> = read_transcripts(&a.hypothesis)?.into_iter().collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, r) in &refs {
        let h = hyps.remove(id).unwrap_or_else(|| {
            warn!(id = %id, "no hypothesis; scored as empty");
            String::new()
        });
        pairs.push((r.clone(), h));
    }
    if let Some(extra) = hyps.keys().next() {
        return Err(Error::Format {
            what: "hypothesis",
            detail: format!("id {extra:?} is not in the reference"),
        });
    }
    let w = metrics::corpus_wer(&pairs);
    let mut csv = String::from("id,ref_words,substitutions,deletions,insertions,wer");
    csv.push_str(if a.cer { ",cer\n" } else { "\n" });
    let mut cer_sum = 0.0;
    for ((id, _), (b, (r, h))) in refs.iter().zip(w.per_utterance.iter().zip(&pairs)) {
        let _ = write!(
            csv,
            "{id},{},{},{},{},{:.6}",
            b.ref_words, b.substitutions, b.deletions, b.insertions, b.wer
        );
        if a.cer {
            let c = metrics::cer_text(r, h);
            cer_sum += c;
            let _ = write!(csv, ",{c:.6}");
        }
        csv.push('\n');
    }
    run::write_text(&ctx.out("eval.csv"), &csv)?;
    let mut summary = serde_json::json!({
        "utterances": refs.len(),
        "wer_utterance_averaged": w.utterance_averaged,
        "wer_pooled": w.pooled,
    });
    if a.cer {
        summary["cer_utterance_averaged"] = (cer_sum / refs.len().max(1) as f64).into();
    }
    println!("{summary}");
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateProfile {
    /// Transfer curves with training stages removed.
    StageRemoval,
    /// CTC-only, joint and joint+LM decoding of one checkpoint.
    DecodeLadder,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct AblateFile {
    seeds: Vec<u64>,
    variants: Vec<Variant>,
    stage_removal: StageRemovalConfig,
    decode_ladder: LadderConfig,
}

impl Default for AblateFile {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            variants: Variant::ALL.to_vec(),
            stage_removal: StageRemovalConfig::default(),
            decode_ladder: LadderConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    profile: AblateProfile,
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let mut cfg = ctx.resolve(&AblateFile::default())?;
    if let Some(s) = ctx.g.seed {
        cfg.seeds = vec![s];
    }
    let workers = ctx.workers(cfg.decode_ladder.workers);
    cfg.decode_ladder.workers = workers;
    cfg.stage_removal.pretrain.workers = workers;
    cfg.stage_removal.finetune.workers = workers;
    cfg.stage_removal.transfer.workers = workers;
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "must list at least one seed"));
    }
    ctx.record(&cfg, cfg.seeds[0], workers, &[])?;
    let inv = ctx.inventory()?;
    match a.profile {
        AblateProfile::StageRemoval => {
            let mut points = Vec::new();
            for &seed in &cfg.seeds {
                let c = StageRemovalConfig {
                    seed,
                    ..cfg.stage_removal.clone()
                };
                let p = ablation::stage_removal(&c, &cfg.variants, &inv)?;
                info!(seed, points = p.len(), "stage removal finished");
                points.extend(p);
            }
            run::write_text(&ctx.out("stage-removal.csv"), &ablation::curves_csv(&points))
        }
        AblateProfile::DecodeLadder => {
            let mut csv = String::from("seed,mode,lambda_b,lambda_c,wer\n");
            for &seed in &cfg.seeds {
                let c = LadderConfig {
                    seed,
                    ..cfg.decode_ladder.clone()
                };
                for r in ablation::ladder_experiment(&c, &inv)? {
                    info!(seed, mode = %r.mode, wer = r.wer, "ladder row");
                    let _ = writeln!(csv, "{seed},{},{},{},{:.6}", r.mode, r.lambda_b, r.lambda_c, r.wer);
                }
            }
            run::write_text(&ctx.out("decode-ladder.csv"), &csv)
        }
    }
}
