//! Teacher pretraining, baseline fine-tuning and distillation training.
//!
//! Batches are cropped to their longest unpadded example; with padded keys
//! masked out of attention this changes nothing but the amount of work.
//! Teacher targets are pooled once per example before training starts since
//! the teacher is frozen and runs without dropout.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::{BpeVocab, PAD_ID};
use crate::corpus::Document;
use crate::distill::{total_loss, LossSwitches, LossWeights, PooledTargets, PoolingPlan};
use crate::encoder::{Encoder, EncoderConfig, IdBatch};
use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::metrics::{binary_metrics, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Graph, Tensor};
use crate::textprep::{build_mask, classify_words, KnowledgeMask, Lexicon, LocalScript, MaskPolicy};

/// Validation metric used for model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopMetric {
    #[default]
    Auroc,
    Auprc,
    F1,
    Accuracy,
    Average,
}

impl StopMetric {
    /// Undefined metrics rank below every defined value.
    pub fn value(self, r: &MetricReport) -> f64 {
        let v = match self {
            StopMetric::Auroc => r.auroc,
            StopMetric::Auprc => r.auprc,
            StopMetric::F1 => Some(r.f1),
            StopMetric::Accuracy => Some(r.accuracy),
            StopMetric::Average => r.average,
        };
        v.unwrap_or(f64::NEG_INFINITY)
    }
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopMetric::Auroc => "auroc",
            StopMetric::Auprc => "auprc",
            StopMetric::F1 => "f1",
            StopMetric::Accuracy => "accuracy",
            StopMetric::Average => "average",
        })
    }
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auroc" => Ok(StopMetric::Auroc),
            "auprc" => Ok(StopMetric::Auprc),
            "f1" => Ok(StopMetric::F1),
            "accuracy" => Ok(StopMetric::Accuracy),
            "average" => Ok(StopMetric::Average),
            other => Err(Error::invalid(format!("unknown early-stop metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_body: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    /// `None` disables gradient clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub enable_hidn: bool,
    pub enable_attn: bool,
    pub mask_policy: MaskPolicy,
    pub early_stop_metric: StopMetric,
    /// Epochs without improvement before stopping; `None` means `epochs`.
    pub patience: Option<usize>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        TrainConfig {
            encoder: EncoderConfig::default(),
            batch_size: 32,
            epochs: 15,
            lr_body: opt.lr_body,
            lr_classifier: opt.lr_classifier,
            weight_decay: opt.weight_decay,
            max_grad_norm: opt.max_grad_norm,
            seed: 42,
            alpha: 0.6,
            beta: 0.2,
            enable_hidn: true,
            enable_attn: true,
            mask_policy: MaskPolicy::AllDomainScript,
            early_stop_metric: StopMetric::Auroc,
            patience: None,
            threshold: 0.5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for key {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold must lie in [0, 1]"));
        }
        LossWeights::new(self.alpha, self.beta)?;
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_body: self.lr_body,
            lr_classifier: self.lr_classifier,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            hidn: self.enable_hidn,
            attn: self.enable_attn,
        }
    }

    pub fn effective_patience(&self) -> usize {
        self.patience.unwrap_or(self.epochs)
    }

    /// Every setting, defaults included, as `key = value` pairs.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = self.encoder.to_key_values();
        let rest = [
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_body", format!("{:?}", self.lr_body)),
            ("lr_classifier", format!("{:?}", self.lr_classifier)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("max_grad_norm", self.max_grad_norm.map_or("none".into(), |v| format!("{v:?}"))),
            ("seed", self.seed.to_string()),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("enable_hidn", self.enable_hidn.to_string()),
            ("enable_attn", self.enable_attn.to_string()),
            ("mask_policy", self.mask_policy.to_string()),
            ("early_stop_metric", self.early_stop_metric.to_string()),
            ("patience", self.patience.map_or("epochs".into(), |p| p.to_string())),
            ("threshold", format!("{:?}", self.threshold)),
        ];
        kv.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.encoder.apply(key, value)? {
            return Ok(true);
        }
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_body" => self.lr_body = parse_value(key, value)?,
            "lr_classifier" => self.lr_classifier = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "max_grad_norm" => {
                self.max_grad_norm = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "enable_hidn" => self.enable_hidn = parse_value(key, value)?,
            "enable_attn" => self.enable_attn = parse_value(key, value)?,
            "mask_policy" => self.mask_policy = value.parse()?,
            "early_stop_metric" => self.early_stop_metric = value.parse()?,
            "patience" => {
                self.patience = match value {
                    "epochs" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "threshold" => self.threshold = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            if !self.apply(k, v)? {
                return Err(Error::invalid(format!("unknown training key {k:?}")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_all(&parse_key_values(text, path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

// ----------------------------------------------------------------------
// data

/// One tokenised document: ids run from `[CLS]` to `[SEP]` without padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub ids: Vec<u32>,
    pub mask: KnowledgeMask,
    pub label: u8,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Everything needed to turn documents into examples.
#[derive(Clone, Debug)]
pub struct TextPipeline {
    pub vocab: BpeVocab,
    pub lexicon: Lexicon,
    pub local: LocalScript,
}

impl TextPipeline {
    pub fn examples(&self, docs: &[&Document], policy: MaskPolicy, max_len: usize) -> Result<Vec<Example>> {
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let encoded = self.vocab.encode_all(&texts, max_len);
        docs.iter()
            .zip(encoded)
            .map(|(d, tok)| {
                let ann = classify_words(&d.text, &self.lexicon, &self.local);
                let mask = build_mask(&tok, &ann, policy)?;
                let n = tok.unpadded_len();
                Ok(Example {
                    id: d.id.clone(),
                    ids: tok.ids[..n].to_vec(),
                    mask: mask.truncated(n),
                    label: d.label,
                    text: d.text.clone(),
                })
            })
            .collect()
    }

    pub fn dataset(&self, docs: &[Document], policy: MaskPolicy, max_len: usize) -> Result<Dataset> {
        use crate::corpus::Split;
        let pick = |s: Split| -> Vec<&Document> { docs.iter().filter(|d| d.split == s).collect() };
        Ok(Dataset {
            train: self.examples(&pick(Split::Train), policy, max_len)?,
            dev: self.examples(&pick(Split::Dev), policy, max_len)?,
            test: self.examples(&pick(Split::Test), policy, max_len)?,
        })
    }
}

fn batch_of(examples: &[&Example]) -> Result<(IdBatch, Vec<KnowledgeMask>)> {
    let len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(examples.len() * len);
    let mut masks = Vec::with_capacity(examples.len());
    for e in examples {
        ids.extend_from_slice(&e.ids);
        ids.resize(ids.len() + len - e.ids.len(), PAD_ID);
        let mut v = e.mask.values().to_vec();
        v.resize(len, 0);
        masks.push(KnowledgeMask::from_values(v)?);
    }
    Ok((
        IdBatch {
            ids,
            batch: examples.len(),
            len,
        },
        masks,
    ))
}

// ----------------------------------------------------------------------
// teacher target cache

/// Pooled teacher rows of one example: `hidden[p]` is `k * d` and
/// `attn[p - 1]` is `k * n` where `n` is the example's length.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTargets {
    pub hidden: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
}

/// Pools the frozen teacher's outputs for every example, in batches.
pub fn teacher_targets(teacher: &Encoder, examples: &[Example], batch_size: usize) -> Result<Vec<ExampleTargets>> {
    let d = teacher.config().hidden;
    let mut out = Vec::with_capacity(examples.len());
    let refs: Vec<&Example> = examples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (batch, masks) = batch_of(chunk)?;
        let mrefs: Vec<&KnowledgeMask> = masks.iter().collect();
        let plan = PoolingPlan::new(&mrefs, batch.len)?;
        let t = PooledTargets::from_teacher(teacher, &batch, &plan)?;
        let (kmax, l) = (plan.k_max(), batch.len);
        for (b, e) in chunk.iter().enumerate() {
            let k = e.mask.k();
            let hidden = t
                .hidden
                .iter()
                .map(|h| h.data()[b * kmax * d..(b * kmax + k) * d].to_vec())
                .collect();
            let attn = t
                .attn
                .iter()
                .map(|a| {
                    let rows = &a.data()[b * kmax * l..(b * kmax + k) * l];
                    rows.chunks(l).flat_map(|r| r[..e.ids.len()].iter().copied()).collect()
                })
                .collect();
            out.push(ExampleTargets { hidden, attn });
        }
    }
    Ok(out)
}

/// Reassembles cached per-example rows into batch-shaped targets.
pub fn assemble_targets(examples: &[&Example], cached: &[&ExampleTargets], plan: &PoolingPlan, d: usize) -> PooledTargets {
    let (b, kmax, l) = (examples.len(), plan.k_max(), plan.len());
    let layers = cached.first().map_or(0, |c| c.attn.len());
    let mut hidden = vec![vec![0.0; b * kmax * d]; layers + 1];
    let mut attn = vec![vec![0.0; b * kmax * l]; layers];
    for (i, (e, c)) in examples.iter().zip(cached).enumerate() {
        let (k, n) = (e.mask.k(), e.ids.len());
        for (p, h) in c.hidden.iter().enumerate() {
            hidden[p][i * kmax * d..(i * kmax + k) * d].copy_from_slice(h);
        }
        for (p, a) in c.attn.iter().enumerate() {
            for j in 0..k {
                let dst = (i * kmax + j) * l;
                attn[p][dst..dst + n].copy_from_slice(&a[j * n..(j + 1) * n]);
            }
        }
    }
    let t = |shape: Vec<usize>, v: Vec<f64>| Tensor::new(shape, v).expect("target shape");
    PooledTargets {
        hidden: hidden.into_iter().map(|v| t(vec![b, kmax, d], v)).collect(),
        attn: attn.into_iter().map(|v| t(vec![b, kmax, l], v)).collect(),
    }
}

// ----------------------------------------------------------------------
// evaluation

/// Dropout-free positive-class probabilities, in input order. Examples are
/// batched by length to limit padding.
pub fn predict(model: &Encoder, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].ids.len(), i));
    let mut scores = vec![0.0; examples.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let (batch, _) = batch_of(&refs)?;
        let s = model.infer(&batch, false)?.positive_scores();
        for (&i, v) in chunk.iter().zip(s) {
            scores[i] = v;
        }
    }
    Ok(scores)
}

/// Mean binary cross-entropy of probabilities against labels.
pub fn log_loss(scores: &[f64], labels: &[u8]) -> f64 {
    let eps = 1e-15;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = if y == 1 { s } else { 1.0 - s };
            -p.max(eps).ln()
        })
        .sum();
    total / scores.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub loss: f64,
    pub report: MetricReport,
}

pub fn evaluate(model: &Encoder, examples: &[Example], batch_size: usize, threshold: f64) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let scores = predict(model, examples, batch_size)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let report = binary_metrics(&scores, &labels, threshold)?;
    Ok(Evaluation {
        loss: log_loss(&scores, &labels),
        scores,
        report,
    })
}

/// Texts of the examples whose thresholded prediction matches the label.
pub fn correctly_classified<'a>(examples: &'a [Example], scores: &[f64], threshold: f64) -> Vec<&'a str> {
    examples
        .iter()
        .zip(scores)
        .filter(|(e, &s)| u8::from(s >= threshold) == e.label)
        .map(|(e, _)| e.text.as_str())
        .collect()
}

/// Final-layer hidden states averaged over knowledge-word tokens (`domain`)
/// and over the remaining real tokens (`rest`), per example. `None` when the
/// example has no such tokens.
pub fn pooled_embeddings(model: &Encoder, examples: &[Example]) -> Result<Vec<(Option<Vec<f64>>, Option<Vec<f64>>)>> {
    let d = model.config().hidden;
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let batch = IdBatch::new(&[&e.ids])?;
        let inf = model.infer(&batch, true)?;
        let last = inf.hidden.last().expect("hidden states");
        let n = e.ids.len();
        let mut dom = vec![0.0; d];
        let mut rest = vec![0.0; d];
        let (mut nd, mut nr) = (0usize, 0usize);
        // Skip [CLS] and [SEP].
        for t in 1..n.saturating_sub(1) {
            let row = &last.data()[t * d..(t + 1) * d];
            let (acc, cnt) = if e.mask.values()[t] > 0 {
                (&mut dom, &mut nd)
            } else {
                (&mut rest, &mut nr)
            };
            acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            *cnt += 1;
        }
        let finish = |mut v: Vec<f64>, c: usize| {
            (c > 0).then(|| {
                v.iter_mut().for_each(|x| *x /= c as f64);
                v
            })
        };
        out.push((finish(dom, nd), finish(rest, nr)));
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_pred: f64,
    pub train_hidn: f64,
    pub train_attn: f64,
    pub dev_loss: f64,
    pub dev: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub distilled: bool,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Largest `|total - (pred + hidn + attn)|` seen over all steps.
    pub max_decomposition_error: f64,
    pub test: MetricReport,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Encoder,
    pub test_scores: Vec<f64>,
}

fn check_compatible(student: &EncoderConfig, teacher: &EncoderConfig) -> Result<()> {
    let pairs = [
        ("hidden", student.hidden, teacher.hidden),
        ("layers", student.layers, teacher.layers),
        ("max_len", student.max_len, teacher.max_len),
        ("vocab_size", student.vocab_size, teacher.vocab_size),
    ];
    for (name, s, t) in pairs {
        if s != t {
            return Err(Error::invalid(format!(
                "teacher/student mismatch: {name} is {t} for the teacher but {s} for the student"
            )));
        }
    }
    Ok(())
}

pub fn train_student(data: &Dataset, teacher: Option<&Encoder>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_student_with(data, teacher, cfg, &mut |_| {})
}

/// Trains a fresh encoder. With a teacher, the enabled distillation terms
/// are added to the prediction loss. The parameters of the best validation
/// epoch are restored before the test split is scored.
pub fn train_student_with(
    data: &Dataset,
    teacher: Option<&Encoder>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() || data.test.is_empty() {
        return Err(Error::invalid("train, dev and test splits must all be nonempty"));
    }
    if let Some(t) = teacher {
        check_compatible(&cfg.encoder, t.config())?;
        if !t.is_frozen() {
            return Err(Error::State("teacher must be frozen".into()));
        }
    }
    let switches = cfg.switches();
    let distill = teacher.filter(|_| switches.hidn || switches.attn);
    let cache = match distill {
        Some(t) => Some(teacher_targets(t, &data.train, cfg.batch_size)?),
        None => None,
    };

    let mut model = Encoder::new(cfg.encoder.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer(), &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0FD1_5711);
    let weights = cfg.loss_weights();
    let d = cfg.encoder.hidden;

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Encoder)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut max_err: f64 = 0.0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (batch, masks) = batch_of(&refs)?;
            let labels: Vec<usize> = refs.iter().map(|e| e.label as usize).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let out = model.forward(&mut g, &vars, &batch, cache.is_some(), Some(&mut rng))?;
            let (loss, br) = match &cache {
                Some(cache) => {
                    let mrefs: Vec<&KnowledgeMask> = masks.iter().collect();
                    let plan = PoolingPlan::new(&mrefs, batch.len)?;
                    let cached: Vec<&ExampleTargets> = chunk.iter().map(|&i| &cache[i]).collect();
                    let targets = assemble_targets(&refs, &cached, &plan, d);
                    total_loss(&mut g, &out, Some(&targets), &labels, &plan, weights, switches)?
                }
                None => {
                    let plan = PoolingPlan::new(&[], 0)?;
                    total_loss(&mut g, &out, None, &labels, &plan, weights, switches)?
                }
            };
            if !br.total.is_finite() {
                return Err(Error::Numeric(format!("loss became {} in epoch {epoch}", br.total)));
            }
            max_err = max_err.max((br.total - (br.pred + br.hidn + br.attn)).abs());
            g.backward(loss)?;
            opt.step(&mut model, &g, &vars)?;
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([br.total, br.pred, br.hidn, br.attn]) {
                *s += v * n;
            }
            seen += chunk.len();
        }
        let dev = evaluate(&model, &data.dev, cfg.batch_size, cfg.threshold)?;
        let rec = EpochRecord {
            epoch,
            train_total: sums[0] / seen as f64,
            train_pred: sums[1] / seen as f64,
            train_hidn: sums[2] / seen as f64,
            train_attn: sums[3] / seen as f64,
            dev_loss: dev.loss,
            dev: dev.report,
        };
        on_epoch(&rec);
        let score = cfg.early_stop_metric.value(&dev.report);
        epochs.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.effective_patience() && epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    let test = evaluate(&model, &data.test, cfg.batch_size, cfg.threshold)?;
    Ok(TrainOutcome {
        record: RunRecord {
            config: cfg.clone(),
            distilled: cache.is_some(),
            epochs,
            best_epoch,
            stopped_early,
            max_decomposition_error: max_err,
            test: test.report,
            checkpoint: None,
        },
        model,
        test_scores: test.scores,
    })
}

/// Trains on the domain-rich corpus without distillation and freezes the
/// result.
pub fn pretrain_teacher(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::invalid("teacher pretraining corpus is empty"));
    }
    let mut out = train_student(data, None, cfg)?;
    out.model = out.model.freeze();
    Ok(out)
}

// ----------------------------------------------------------------------
// run record format

const EPOCH_COLUMNS: [&str; 14] = [
    "epoch",
    "train_total",
    "train_pred",
    "train_hidn",
    "train_attn",
    "dev_loss",
    "dev_accuracy",
    "dev_auroc",
    "dev_auprc",
    "dev_recall",
    "dev_precision",
    "dev_f1",
    "dev_average",
    "",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |x| format!("{x}"))
}

impl RunRecord {
    /// `key = value` header, then a `[epochs]` section of tab-separated rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.to_key_values() {
            s += &format!("config.{k} = {v}\n");
        }
        s += &format!("distilled = {}\n", self.distilled);
        s += &format!("best_epoch = {}\n", self.best_epoch);
        s += &format!("stopped_early = {}\n", self.stopped_early);
        s += &format!("max_decomposition_error = {}\n", self.max_decomposition_error);
        s += &format!("checkpoint = {}\n", self.checkpoint.as_deref().unwrap_or("none"));
        for line in self.test.to_key_values().lines() {
            s += &format!("test.{line}\n");
        }
        s += "[epochs]\n";
        s += &EPOCH_COLUMNS[..13].join("\t");
        s.push('\n');
        for e in &self.epochs {
            let mut cols = vec![
                e.epoch.to_string(),
                e.train_total.to_string(),
                e.train_pred.to_string(),
                e.train_hidn.to_string(),
                e.train_attn.to_string(),
                e.dev_loss.to_string(),
            ];
            cols.extend(e.dev.fields().iter().map(|(_, v)| fmt_opt(*v)));
            s += &cols.join("\t");
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let (head, rows) = text
            .split_once("[epochs]\n")
            .ok_or_else(|| Error::invalid(format!("{path}: missing [epochs] section")))?;
        let kv = parse_key_values(head, path)?;
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid(format!("{path}: missing {key}")))
        };
        let mut config = TrainConfig::default();
        let cfg_pairs: Vec<(String, String)> = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        config.apply_all(&cfg_pairs)?;
        let test_pairs: Vec<(String, String)> = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("test.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let mut epochs = Vec::new();
        let head_lines = head.lines().count() + 1;
        for (n, line) in rows.lines().enumerate().skip(1) {
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: head_lines + n + 1,
                msg,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 13 {
                return Err(err(format!("expected 13 columns, found {}", cols.len())));
            }
            let num = |i: usize| -> Result<f64> { cols[i].parse().map_err(|_| err(format!("bad number {:?}", cols[i]))) };
            let pairs: Vec<(String, String)> = EPOCH_COLUMNS[6..13]
                .iter()
                .zip(&cols[6..13])
                .map(|(k, v)| (k.trim_start_matches("dev_").to_string(), v.to_string()))
                .collect();
            epochs.push(EpochRecord {
                epoch: cols[0].parse().map_err(|_| err("bad epoch".into()))?,
                train_total: num(1)?,
                train_pred: num(2)?,
                train_hidn: num(3)?,
                train_attn: num(4)?,
                dev_loss: num(5)?,
                dev: MetricReport::parse_key_values(&pairs)?,
            });
        }
        Ok(RunRecord {
            config,
            distilled: parse_value("distilled", get("distilled")?)?,
            epochs,
            best_epoch: parse_value("best_epoch", get("best_epoch")?)?,
            stopped_early: parse_value("stopped_early", get("stopped_early")?)?,
            max_decomposition_error: parse_value("max_decomposition_error", get("max_decomposition_error")?)?,
            test: MetricReport::parse_key_values(&test_pairs)?,
            checkpoint: match get("checkpoint")? {
                "none" => None,
                p => Some(p.to_string()),
            },
        })
    }
}

// ----------------------------------------------------------------------
// ablations

/// One grid cell: a display name plus config overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl GridCell {
    pub fn new(pairs: &[(&str, &str)]) -> Self {
        let overrides: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let name = if overrides.is_empty() {
            "{}".to_string()
        } else {
            overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
        };
        GridCell { name, overrides }
    }
}

/// Parses a grid file: one cell per line as whitespace-separated
/// `key=value` pairs; `{}` alone is a cell without overrides.
pub fn parse_grid(text: &str, path: &str) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "{}" {
            cells.push(GridCell::new(&[]));
            continue;
        }
        let mut pairs = Vec::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: n + 1,
                msg: format!("expected key=value, got {tok:?}"),
            })?;
            pairs.push((k, v));
        }
        cells.push(GridCell::new(&pairs));
    }
    if cells.is_empty() {
        return Err(Error::invalid(format!("{path}: grid is empty")));
    }
    Ok(cells)
}

/// The four on/off combinations of the hidden-state and attention terms.
pub fn loss_switch_grid() -> Vec<GridCell> {
    [("true", "true"), ("false", "false"), ("true", "false"), ("false", "true")]
        .iter()
        .map(|(h, a)| GridCell::new(&[("enable_hidn", h), ("enable_attn", a)]))
        .collect()
}

/// The seven `(alpha, beta)` settings of the weight ablation.
pub fn alpha_beta_grid() -> Vec<GridCell> {
    [
        ("1.0", "1.0"),
        ("1.0", "0.6"),
        ("0.9", "0.5"),
        ("0.8", "0.4"),
        ("0.7", "0.3"),
        ("0.6", "0.2"),
        ("0.1", "0.1"),
    ]
    .iter()
    .map(|(a, b)| GridCell::new(&[("alpha", a), ("beta", b)]))
    .collect()
}

pub fn ablation_grid(
    data: &Dataset,
    teacher: Option<&Encoder>,
    base: &TrainConfig,
    grid: &[GridCell],
) -> Result<Vec<(GridCell, RunRecord)>> {
    if grid.is_empty() {
        return Err(Error::invalid("ablation grid is empty"));
    }
    let mut out = Vec::with_capacity(grid.len());
    for cell in grid {
        let mut cfg = base.clone();
        cfg.apply_all(&cell.overrides)?;
        let run = train_student(data, teacher, &cfg)?;
        out.push((cell.clone(), run.record));
    }
    Ok(out)
}

/// Results table with one row per cell.
pub fn ablation_table(rows: &[(GridCell, RunRecord)]) -> String {
    let mut s = MetricReport::table_header() + "\n";
    for (cell, rec) in rows {
        s += &rec.test.table_row(&cell.name);
        s.push('\n');
    }
    s
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
