mod manifest;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dsgkd::bpe::{train_bpe, BpeVocab};
use dsgkd::corpus::{self, corpus_stats, generate, load_corpus, load_corpus_dir, GeneratorConfig, Split};
use dsgkd::encoder::Encoder;
use dsgkd::io::{parse_key_values, write_atomic};
use dsgkd::metrics::{
    export_embeddings, mwps, EmbeddingRow, EmbeddingSource, MetricReport, MwpsAggregation, MwpsReport,
};
use dsgkd::textprep::{Lexicon, LocalScript, MaskPolicy};
use dsgkd::trainer::{
    ablation_table, correctly_classified, evaluate, parse_grid, pooled_embeddings, train_student_with, Dataset,
    EpochRecord, Example, RunRecord, TextPipeline, TrainConfig, TrainOutcome,
};

use manifest::{claim_output, Overwrite, RunManifest};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dsgkd", version, about = "Domain-knowledge distillation for code-switched text classification")]
struct Cli {
    /// Codepoint ranges of the local script, e.g. AC00-D7A3,1100-11FF.
    #[arg(long, global = true, default_value = "AC00-D7A3,1100-11FF")]
    local_script: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct OutputFlags {
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Rerun into an existing output only if inputs and config are unchanged.
    #[arg(long)]
    resume: bool,
}

impl OutputFlags {
    fn policy(self) -> Overwrite {
        Overwrite {
            force: self.force,
            resume: self.resume,
        }
    }
}

#[derive(Args, Clone)]
struct TextArgs {
    /// Corpus directory with train.tsv, dev.tsv and test.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Tokenizer file written by train-tokenizer.
    #[arg(long)]
    tokenizer: PathBuf,
    /// Lexicon file; defaults to <data>/lexicon.txt.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl TextArgs {
    fn lexicon_path(&self) -> PathBuf {
        self.lexicon.clone().unwrap_or_else(|| self.data.join("lexicon.txt"))
    }

    fn split_files(&self) -> Vec<PathBuf> {
        Split::ALL.iter().map(|s| self.data.join(format!("{s}.tsv"))).collect()
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = self.split_files();
        v.push(self.tokenizer.clone());
        v.push(self.lexicon_path());
        v
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    text: TextArgs,
    /// Flat key = value training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["all-domain", "lexicon"])]
    mask_policy: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic student and domain corpora.
    GenData {
        /// Flat key = value generator configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Train the shared subword tokenizer on one or more training splits.
    TrainTokenizer {
        /// Corpus directories whose train.tsv is used; repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Train the domain teacher and freeze it.
    PretrainTeacher(TrainArgs),
    /// Fine-tune a student, distilling from --teacher when given.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Disable the hidden-state distillation term.
        #[arg(long)]
        no_hidn: bool,
        /// Disable the attention distillation term.
        #[arg(long)]
        no_attn: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        text: TextArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Run one training per grid cell and tabulate test metrics.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// One cell per line of key=value overrides; `{}` for none.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Export pooled final-layer embeddings of several checkpoints as TSV.
    ExportEmbeddings {
        /// SOURCE=PATH with SOURCE one of student_alone, student_kd, teacher; repeatable.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<String>,
        #[command(flatten)]
        text: TextArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Append the two leading principal-axis coordinates.
        #[arg(long)]
        projection: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        output: OutputFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let local: LocalScript = cli.local_script.parse().context("--local-script")?;
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            output,
        } => gen_data(config.as_deref(), seed, &out, output, &local),
        Command::TrainTokenizer {
            data,
            vocab_size,
            out,
            output,
        } => train_tokenizer(&data, vocab_size, &out, output, &local),
        Command::PretrainTeacher(args) => pretrain(&args, &local),
        Command::Train {
            train,
            teacher,
            no_hidn,
            no_attn,
        } => train_cmd(&train, teacher.as_deref(), no_hidn, no_attn, &local),
        Command::Eval {
            ckpt,
            text,
            split,
            threshold,
            out,
            output,
        } => eval(&ckpt, &text, &split, threshold, &out, output, &local),
        Command::Ablate { train, teacher, grid } => ablate(&train, teacher.as_deref(), &grid, &local),
        Command::ExportEmbeddings {
            ckpts,
            text,
            split,
            samples,
            projection,
            out,
            output,
        } => export(&ckpts, &text, &split, samples, projection, &out, output, &local),
    }
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path, output: OutputFlags, local: &LocalScript) -> Result<()> {
    let mut cfg = match config {
        Some(p) => GeneratorConfig::load(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let inputs: Vec<PathBuf> = config.map(Path::to_path_buf).into_iter().collect();
    let manifest = RunManifest::new("gen-data", cfg.to_key_values(), &inputs)?;
    let domain = out.join("domain");
    let outputs: Vec<PathBuf> = ["train.tsv", "dev.tsv", "test.tsv"]
        .iter()
        .flat_map(|f| [out.join(f), domain.join(f)])
        .collect();
    claim_output(&out.join(manifest::FILE_NAME), &outputs, &manifest, output.policy())?;

    let g = generate(&cfg)?;
    corpus::write_corpus_dir(out, &g.student)?;
    corpus::write_corpus_dir(&domain, &g.domain)?;
    for dir in [out, domain.as_path()] {
        write_atomic(&dir.join("lexicon.txt"), g.lexicon.to_text().as_bytes())?;
    }
    write_atomic(&out.join("rule.txt"), g.rule.to_text().as_bytes())?;
    write_atomic(&out.join("generator.cfg"), cfg.to_text().as_bytes())?;
    for (dir, docs) in [(out, &g.student), (domain.as_path(), &g.domain)] {
        let st = corpus_stats(docs, &g.lexicon, local);
        write_atomic(&dir.join("stats.txt"), st.to_table().as_bytes())?;
        write_atomic(&dir.join("stats.kv"), st.to_key_values().as_bytes())?;
    }
    eprintln!(
        "wrote {} student and {} domain documents to {}",
        g.student.len(),
        g.domain.len(),
        out.display()
    );
    Ok(())
}

fn train_tokenizer(data: &[PathBuf], vocab_size: usize, out: &Path, output: OutputFlags, local: &LocalScript) -> Result<()> {
    let files: Vec<PathBuf> = data.iter().map(|d| d.join("train.tsv")).collect();
    let manifest = RunManifest::new(
        "train-tokenizer",
        vec![("vocab_size".into(), vocab_size.to_string())],
        &files,
    )?;
    let target = out.join("tokenizer.txt");
    claim_output(&out.join(manifest::FILE_NAME), std::slice::from_ref(&target), &manifest, output.policy())?;
    let mut texts = Vec::new();
    for f in &files {
        texts.extend(load_corpus(f, local)?.into_iter().map(|d| d.text));
    }
    let vocab = train_bpe(&texts, vocab_size)?;
    vocab.save(&target)?;
    eprintln!("tokenizer with {} entries written to {}", vocab.len(), target.display());
    Ok(())
}

struct Loaded {
    pipeline: TextPipeline,
    docs: Vec<corpus::Document>,
}

fn load_text(args: &TextArgs, local: &LocalScript) -> Result<Loaded> {
    let vocab = BpeVocab::load(&args.tokenizer)?;
    let lexicon = Lexicon::load(&args.lexicon_path())?;
    let docs = load_corpus_dir(&args.data, local)?;
    Ok(Loaded {
        pipeline: TextPipeline {
            vocab,
            lexicon,
            local: local.clone(),
        },
        docs,
    })
}

/// Defaults, then the config file, then command-line flags.
fn resolve_config(args: &TrainArgs, vocab_len: usize) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
        cfg.apply_all(&parse_key_values(&text, &p.display().to_string())?)?;
    }
    cfg.encoder.vocab_size = vocab_len;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = &args.mask_policy {
        cfg.mask_policy = m.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_epoch(rec: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  loss {:.4} (pred {:.4} hidn {:.4} attn {:.4})  dev loss {:.4}  dev auroc {}",
        rec.epoch,
        rec.train_total,
        rec.train_pred,
        rec.train_hidn,
        rec.train_attn,
        rec.dev_loss,
        rec.dev.auroc.map_or("NA".into(), |v| format!("{v:.4}"))
    );
}

fn scores_tsv(examples: &[Example], scores: &[f64]) -> String {
    let mut s = String::from("id\tlabel\tscore\n");
    for (e, v) in examples.iter().zip(scores) {
        s += &format!("{}\t{}\t{v}\n", e.id, e.label);
    }
    s
}

fn mwps_text(r: &MwpsReport) -> String {
    format!(
        "m = {}\ne = {}\na = {}\nmwps = {}\n",
        r.m,
        r.e,
        r.a,
        r.mwps.map_or("NA".into(), |v| v.to_string())
    )
}

fn write_run(out: &Path, ckpt_name: &str, model: &Encoder, mut record: RunRecord, data: &Dataset, scores: &[f64], lexicon: &Lexicon, local: &LocalScript) -> Result<()> {
    let ckpt = out.join(ckpt_name);
    model.save(&ckpt)?;
    record.checkpoint = Some(ckpt.display().to_string());
    write_atomic(&out.join("run.txt"), record.to_text().as_bytes())?;
    write_atomic(&out.join("metrics.txt"), record.test.to_key_values().as_bytes())?;
    write_atomic(&out.join("scores.tsv"), scores_tsv(&data.test, scores).as_bytes())?;
    let correct = correctly_classified(&data.test, scores, record.config.threshold);
    let m = mwps(correct, lexicon, local, MwpsAggregation::Pooled);
    write_atomic(&out.join("mwps.txt"), mwps_text(&m).as_bytes())?;
    println!("{}", MetricReport::table_header());
    println!("{}", record.test.table_row(ckpt_name));
    Ok(())
}

fn pretrain(args: &TrainArgs, local: &LocalScript) -> Result<()> {
    let loaded = load_text(&args.text, local)?;
    let cfg = resolve_config(args, loaded.pipeline.vocab.len())?;
    let manifest = RunManifest::new("pretrain-teacher", cfg.to_key_values(), &args.text.inputs())?;
    let ckpt = args.out.join("teacher.ckpt");
    claim_output(&args.out.join(manifest::FILE_NAME), &[ckpt], &manifest, args.output.policy())?;
    let data = loaded.pipeline.dataset(&loaded.docs, cfg.mask_policy, cfg.encoder.max_len)?;
    if data.train.is_empty() {
        bail!("teacher corpus {} has no training documents", args.text.data.display());
    }
    let out = pretrain_teacher_logged(&data, &cfg)?;
    write_run(&args.out, "teacher.ckpt", &out.model, out.record, &data, &out.test_scores, &loaded.pipeline.lexicon, local)
}

/// Teacher pretraining with per-epoch progress on stderr.
fn pretrain_teacher_logged(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut out = train_student_with(data, None, cfg, &mut log_epoch)?;
    out.model = out.model.freeze();
    Ok(out)
}

fn load_teacher(path: &Path, vocab_len: usize) -> Result<Encoder> {
    let t = Encoder::load(path).with_context(|| format!("cannot load teacher {}", path.display()))?;
    if t.config().vocab_size != vocab_len {
        bail!(
            "teacher/tokenizer mismatch: {} expects {} tokens but the tokenizer has {}",
            path.display(),
            t.config().vocab_size,
            vocab_len
        );
    }
    Ok(t.freeze())
}

fn train_cmd(args: &TrainArgs, teacher: Option<&Path>, no_hidn: bool, no_attn: bool, local: &LocalScript) -> Result<()> {
    let loaded = load_text(&args.text, local)?;
    let mut cfg = resolve_config(args, loaded.pipeline.vocab.len())?;
    if no_hidn {
        cfg.enable_hidn = false;
    }
    if no_attn {
        cfg.enable_attn = false;
    }
    let teacher_model = teacher.map(|p| load_teacher(p, loaded.pipeline.vocab.len())).transpose()?;
    let mut inputs = args.text.inputs();
    inputs.extend(teacher.map(Path::to_path_buf));
    let mut kv = cfg.to_key_values();
    kv.push(("teacher".into(), teacher.map_or("none".into(), |p| p.display().to_string())));
    let manifest = RunManifest::new("train", kv, &inputs)?;
    let ckpt = args.out.join("model.ckpt");
    claim_output(&args.out.join(manifest::FILE_NAME), &[ckpt], &manifest, args.output.policy())?;
    let data = loaded.pipeline.dataset(&loaded.docs, cfg.mask_policy, cfg.encoder.max_len)?;
    let out = train_student_with(&data, teacher_model.as_ref(), &cfg, &mut log_epoch)?;
    write_run(&args.out, "model.ckpt", &out.model, out.record, &data, &out.test_scores, &loaded.pipeline.lexicon, local)
}

fn split_examples(loaded: &Loaded, split: &str, max_len: usize) -> Result<Vec<Example>> {
    let split: Split = split.parse()?;
    let docs = corpus::split_docs(&loaded.docs, split);
    if docs.is_empty() {
        bail!("split {split} of the corpus is empty");
    }
    Ok(loaded.pipeline.examples(&docs, MaskPolicy::AllDomainScript, max_len)?)
}

#[allow(clippy::too_many_arguments)]
fn eval(ckpt: &Path, text: &TextArgs, split: &str, threshold: f64, out: &Path, output: OutputFlags, local: &LocalScript) -> Result<()> {
    let model = Encoder::load(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let loaded = load_text(text, local)?;
    if model.config().vocab_size != loaded.pipeline.vocab.len() {
        bail!("checkpoint/tokenizer mismatch: {} expects {} tokens", ckpt.display(), model.config().vocab_size);
    }
    let mut inputs = text.inputs();
    inputs.push(ckpt.to_path_buf());
    let kv = vec![
        ("split".to_string(), split.to_string()),
        ("threshold".to_string(), format!("{threshold:?}")),
    ];
    let manifest = RunManifest::new("eval", kv, &inputs)?;
    claim_output(&out.join(manifest::FILE_NAME), &[out.join("metrics.txt")], &manifest, output.policy())?;
    let examples = split_examples(&loaded, split, model.config().max_len)?;
    let ev = evaluate(&model, &examples, 64, threshold)?;
    write_atomic(&out.join("metrics.txt"), ev.report.to_key_values().as_bytes())?;
    write_atomic(&out.join("scores.tsv"), scores_tsv(&examples, &ev.scores).as_bytes())?;
    let correct = correctly_classified(&examples, &ev.scores, threshold);
    let m = mwps(correct, &loaded.pipeline.lexicon, local, MwpsAggregation::Pooled);
    write_atomic(&out.join("mwps.txt"), mwps_text(&m).as_bytes())?;
    println!("{}", MetricReport::table_header());
    println!("{}", ev.report.table_row(&ckpt.display().to_string()));
    Ok(())
}

fn ablate(args: &TrainArgs, teacher: Option<&Path>, grid_path: &Path, local: &LocalScript) -> Result<()> {
    let loaded = load_text(&args.text, local)?;
    let base = resolve_config(args, loaded.pipeline.vocab.len())?;
    let grid_text = fs::read_to_string(grid_path).with_context(|| format!("cannot read grid {}", grid_path.display()))?;
    let grid = parse_grid(&grid_text, &grid_path.display().to_string())?;
    let teacher_model = teacher.map(|p| load_teacher(p, loaded.pipeline.vocab.len())).transpose()?;
    let mut inputs = args.text.inputs();
    inputs.push(grid_path.to_path_buf());
    inputs.extend(teacher.map(Path::to_path_buf));
    let manifest = RunManifest::new("ablate", base.to_key_values(), &inputs)?;
    claim_output(&args.out.join(manifest::FILE_NAME), &[args.out.join("results.txt")], &manifest, args.output.policy())?;
    let mut rows = Vec::new();
    let mut kv = String::new();
    for (i, cell) in grid.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.apply_all(&cell.overrides)?;
        cfg.validate()?;
        eprintln!("cell {}: {}", i + 1, cell.name);
        let data = loaded.pipeline.dataset(&loaded.docs, cfg.mask_policy, cfg.encoder.max_len)?;
        let out = train_student_with(&data, teacher_model.as_ref(), &cfg, &mut log_epoch)?;
        write_atomic(&args.out.join(format!("cell-{}.run.txt", i + 1)), out.record.to_text().as_bytes())?;
        kv += &format!("cell.{}.name = {}\n", i + 1, cell.name);
        for line in out.record.test.to_key_values().lines() {
            kv += &format!("cell.{}.{line}\n", i + 1);
        }
        rows.push((cell.clone(), out.record));
    }
    let table = ablation_table(&rows);
    write_atomic(&args.out.join("results.txt"), table.as_bytes())?;
    write_atomic(&args.out.join("results.kv"), kv.as_bytes())?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn export(
    ckpts: &[String],
    text: &TextArgs,
    split: &str,
    samples: usize,
    projection: bool,
    out: &Path,
    output: OutputFlags,
    local: &LocalScript,
) -> Result<()> {
    let mut models = Vec::new();
    let mut seen = HashSet::new();
    for arg in ckpts {
        let (src, path) = arg
            .split_once('=')
            .with_context(|| format!("--ckpt expects SOURCE=PATH, got {arg:?}"))?;
        let source: EmbeddingSource = src.parse()?;
        if !seen.insert(source) {
            bail!("source {src} given twice");
        }
        let path = PathBuf::from(path);
        let model = Encoder::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
        models.push((source, path, model));
    }
    let loaded = load_text(text, local)?;
    let max_len = models[0].2.config().max_len;
    let mut inputs = text.inputs();
    inputs.extend(models.iter().map(|(_, p, _)| p.clone()));
    let kv = vec![
        ("split".to_string(), split.to_string()),
        ("samples".to_string(), samples.to_string()),
        ("projection".to_string(), projection.to_string()),
    ];
    let manifest = RunManifest::new("export-embeddings", kv, &inputs)?;
    let mut mpath = out.as_os_str().to_owned();
    mpath.push(".manifest.txt");
    claim_output(Path::new(&mpath), &[out.to_path_buf()], &manifest, output.policy())?;
    let examples: Vec<Example> = split_examples(&loaded, split, max_len)?
        .into_iter()
        .filter(|e| e.mask.k() > 0)
        .take(samples)
        .collect();
    let mut rows = Vec::new();
    for (source, _, model) in &models {
        for (dom, rest) in pooled_embeddings(model, &examples)? {
            rows.extend(dom.map(|vector| EmbeddingRow { vector, source: *source, domain: true }));
            rows.extend(rest.map(|vector| EmbeddingRow { vector, source: *source, domain: false }));
        }
    }
    let tsv = export_embeddings(&rows, projection)?;
    write_atomic(out, tsv.as_bytes())?;
    eprintln!("{} rows from {} documents written to {}", rows.len(), examples.len(), out.display());
    Ok(())
}
