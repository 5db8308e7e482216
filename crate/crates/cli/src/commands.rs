use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use alm_core::eval::{accuracy, bleu, f1_bleu_rouge, fewshot_eval, rouge_n, McRecord};
use alm_core::io::{read_jsonl, split, stream_corpus, Checkpoint, CheckpointKind};
use alm_core::model::{generate, Sampling};
use alm_core::normalize::normalize_bytes;
use alm_core::tokenizer::{train_bpe, Specials, VocabPreset, EOS_ID};
use alm_core::train::{finetune_classifier, finetune_lm, pretrain, ClsExample, LmExample, StepRecord};
use alm_core::{
    ClassifierModel, Error, GptModel, McMetric, McTask, MetricReport, ModelConfig, NormalizerConfig, Result,
    TokenizerModel, TrainConfig, TrainingReport,
};
use serde::{Deserialize, Serialize};

use crate::args::*;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize(a) => normalize_cmd(a),
        Command::TokTrain(a) => tok_train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::FinetuneLm(a) => finetune_lm_cmd(a),
        Command::FinetuneCls(a) => finetune_cls_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::EvalGen(a) => eval_gen(a),
        Command::EvalCls(a) => eval_cls(a),
        Command::EvalFewshot(a) => eval_fewshot(a),
        Command::Report(a) => report(a),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn need<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

fn label(path: Option<&Path>) -> PathBuf {
    path.map_or_else(|| PathBuf::from("<stdin>"), Path::to_path_buf)
}

fn open_in(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(BufReader::with_capacity(1 << 16, File::open(p).map_err(io_err(p))?)),
        None => Box::new(BufReader::new(io::stdin().lock())),
    })
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Print one JSON document on stdout.
fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out).map_err(io_err("<stdout>"))
}

fn append_results(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut text = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut text, r)?;
        text.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&text).map_err(io_err(path))
}

/// Call `f` with every line (without its terminator) of a UTF-8 stream,
/// holding one line at a time.
fn for_each_line<F>(mut reader: Box<dyn BufRead>, name: &Path, mut f: F) -> Result<u64>
where
    F: FnMut(&[u8], u64, usize) -> Result<()>,
{
    let mut buf = Vec::with_capacity(1 << 12);
    let mut line = 0u64;
    let mut offset = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(name))?;
        if n == 0 {
            return Ok(line);
        }
        line += 1;
        let mut body = &buf[..];
        let mut skip = 0;
        if line == 1 && body.starts_with(b"\xEF\xBB\xBF") {
            body = &body[3..];
            skip = 3;
        }
        let body = body.strip_suffix(b"\n").unwrap_or(body);
        let body = body.strip_suffix(b"\r").unwrap_or(body);
        f(body, line, offset + skip)?;
        offset += n;
    }
}

fn utf8_line<'a>(bytes: &'a [u8], name: &Path, line: u64, offset: usize) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        path: name.to_path_buf(),
        line,
        offset: offset + e.valid_up_to(),
    })
}

fn normalizer_config(a: &NormalizerArgs) -> NormalizerConfig {
    let d = NormalizerConfig::default();
    NormalizerConfig {
        unicode_canonicalize: a.canonicalize.unwrap_or(d.unicode_canonicalize),
        preserve_diacritics: a.preserve_diacritics.unwrap_or(d.preserve_diacritics),
        remove_tatweel: a.remove_tatweel.unwrap_or(d.remove_tatweel),
        collapse_whitespace: a.collapse_whitespace.unwrap_or(d.collapse_whitespace),
        lowercase_latin: a.lowercase_latin.unwrap_or(d.lowercase_latin),
        fold_alef: a.fold_alef.unwrap_or(d.fold_alef),
    }
}

fn normalize_cmd(a: NormalizeArgs) -> Result<()> {
    let cfg = normalizer_config(&a.normalizer);
    let name = label(a.input.as_deref());
    let mut out = open_out(a.output.as_deref())?;
    let out_name = label(a.output.as_deref());
    let lines = for_each_line(open_in(a.input.as_deref())?, &name, |bytes, line, offset| {
        let text = normalize_bytes(bytes, &cfg).map_err(|e| match e {
            Error::Utf8 { offset: at } => Error::Decode {
                path: name.clone(),
                line,
                offset: offset + at,
            },
            other => other,
        })?;
        out.write_all(text.text.as_bytes())
            .and_then(|()| out.write_all(b"\n"))
            .map_err(io_err(&out_name))
    })?;
    out.flush().map_err(io_err(&out_name))?;
    log::info!("normalized {lines} lines");
    Ok(())
}

/// Stream documents into `f`, surfacing the first read error after it
/// returns.
fn with_corpus<T>(path: &Path, f: impl FnOnce(&mut dyn Iterator<Item = String>) -> Result<T>) -> Result<(T, u64)> {
    let mut stream = stream_corpus(path)?;
    let mut failure = None;
    let result = {
        let mut docs = std::iter::from_fn(|| match stream.next()? {
            Ok(doc) => Some(doc),
            Err(e) => {
                failure = Some(e);
                None
            }
        });
        f(&mut docs)
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((result?, stream.documents()))
}

fn parse_vocab_size(raw: &str) -> Result<usize> {
    VocabPreset::parse(raw)
        .map(VocabPreset::size)
        .or_else(|| raw.parse().ok())
        .ok_or_else(|| Error::Config(format!("vocab size {raw:?} is neither a number nor a preset")))
}

fn tok_train(a: TokTrainArgs) -> Result<()> {
    let corpus = need(&a.corpus, "corpus")?;
    let output = need(&a.output, "output")?;
    let size = parse_vocab_size(&a.vocab_size)?;
    let cfg = normalizer_config(&a.normalizer);
    let (tok, documents) = with_corpus(corpus, |docs| train_bpe(docs, size, cfg, Specials::default()))?;
    tok.save(output)?;
    if tok.vocab_size() < size {
        log::warn!("vocabulary stopped at {} of {size}: no pair repeats", tok.vocab_size());
    }
    emit(&serde_json::json!({
        "vocab_size": tok.vocab_size(),
        "merges": tok.merges().len(),
        "documents": documents,
        "tokenizer_hash": tok.content_hash(),
    }))
}

fn load_tokenizer(path: &Option<PathBuf>) -> Result<TokenizerModel> {
    TokenizerModel::load(need(path, "tokenizer")?)
}

fn encode(a: CodecArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let name = label(a.input.as_deref());
    let out_name = label(a.output.as_deref());
    let mut out = open_out(a.output.as_deref())?;
    let mut line_buf = String::new();
    for_each_line(open_in(a.input.as_deref())?, &name, |bytes, line, offset| {
        let text = utf8_line(bytes, &name, line, offset)?;
        line_buf.clear();
        for (i, id) in tok.encode(text).iter().enumerate() {
            if i > 0 {
                line_buf.push(' ');
            }
            line_buf.push_str(&id.to_string());
        }
        line_buf.push('\n');
        out.write_all(line_buf.as_bytes()).map_err(io_err(&out_name))
    })?;
    out.flush().map_err(io_err(&out_name))
}

fn decode(a: CodecArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let name = label(a.input.as_deref());
    let out_name = label(a.output.as_deref());
    let mut out = open_out(a.output.as_deref())?;
    for_each_line(open_in(a.input.as_deref())?, &name, |bytes, line, offset| {
        let text = utf8_line(bytes, &name, line, offset)?;
        let ids = text
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::Input(format!("{}:{line}: {t:?} is not a token id", name.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let decoded = tok.decode(&ids)?;
        out.write_all(decoded.as_bytes())
            .and_then(|()| out.write_all(b"\n"))
            .map_err(io_err(&out_name))
    })?;
    out.flush().map_err(io_err(&out_name))
}

fn train_config(t: &TrainArgs) -> TrainConfig {
    TrainConfig {
        batch_size: t.batch_size,
        seq_len: t.seq_len,
        max_steps: t.max_steps,
        epochs: t.epochs,
        lr_initial: t.lr,
        lr_final: t.lr_final,
        warmup_steps: t.warmup_steps,
        grad_clip_norm: t.grad_clip,
        seed: t.seed,
        eval_every: t.log_every,
        ..TrainConfig::default()
    }
}

fn model_config(a: &PretrainArgs, tokenizer_vocab: Option<usize>) -> Result<ModelConfig> {
    let mut cfg = match &a.preset {
        Some(p) => ModelConfig::preset(p)?,
        None => ModelConfig::new(2, 2, 64, 0, a.train.seq_len),
    };
    if let Some(l) = a.layers {
        cfg.n_layers = l;
    }
    if let Some(h) = a.heads {
        cfg.n_heads = h;
    }
    if let Some(d) = a.d_model {
        cfg.d_model = d;
        cfg.d_ff = 4 * d;
    }
    if let Some(ff) = a.d_ff {
        cfg.d_ff = ff;
    }
    if let Some(c) = a.ctx_len {
        cfg.ctx_len = c;
    }
    match (tokenizer_vocab, a.vocab_size) {
        (Some(v), Some(flag)) if v != flag => {
            return Err(Error::Config(format!(
                "--vocab-size {flag} disagrees with the tokenizer's {v}"
            )))
        }
        (Some(v), _) | (None, Some(v)) => cfg.vocab_size = v,
        (None, None) if a.preset.is_some() => {}
        (None, None) => return Err(Error::Config("need --tokenizer or --vocab-size".into())),
    }
    cfg.attn_dropout = a.dropout;
    cfg.embd_dropout = a.dropout;
    cfg.resid_dropout = a.dropout;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    final_loss: f64,
    steps: u64,
    tokens_seen: u64,
    param_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_accuracy: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn finish_training(
    model: &GptModel,
    kind: CheckpointKind,
    tok: &TokenizerModel,
    prior_step: u64,
    train: &TrainArgs,
    report: &TrainingReport,
    output: &Path,
    mut metrics: BTreeMap<String, f64>,
) -> Result<TrainSummary> {
    let steps = prior_step + report.curve.len() as u64;
    metrics.insert("final_loss".into(), report.final_loss);
    Checkpoint::from_model(model, kind, tok, steps, train.seed, metrics.clone()).save(output)?;
    if let Some(path) = &train.report {
        let f = File::create(path).map_err(io_err(path))?;
        report.write_jsonl(BufWriter::new(f)).map_err(io_err(path))?;
    }
    log::info!(
        "trained {} steps in {:.1}s, final loss {:.6}",
        report.curve.len(),
        report.wall_time_secs,
        report.final_loss
    );
    Ok(TrainSummary {
        final_loss: report.final_loss,
        steps,
        tokens_seen: report.tokens_seen,
        param_count: model.params.scalar_count(),
        heldout_accuracy: metrics.get("heldout_accuracy").copied(),
    })
}

fn load_checked(path: &Option<PathBuf>, tok: &TokenizerModel) -> Result<Checkpoint> {
    let ck = Checkpoint::load(need(path, "checkpoint")?)?;
    ck.check_tokenizer(tok)?;
    Ok(ck)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    if a.dry_run {
        let vocab = match &a.tokenizer {
            Some(p) => Some(TokenizerModel::load(p)?.vocab_size()),
            None => None,
        };
        let cfg = model_config(&a, vocab)?;
        return emit(&serde_json::json!({ "param_count": cfg.param_count(), "model_config": cfg }));
    }
    let tok = load_tokenizer(&a.tokenizer)?;
    let corpus = need(&a.corpus, "corpus")?;
    let output = need(&a.output, "output")?;
    let (mut model, prior_step) = match &a.init {
        Some(_) => {
            let ck = load_checked(&a.init, &tok)?;
            let step = ck.header.step;
            (ck.into_model()?, step)
        }
        None => (GptModel::init(model_config(&a, Some(tok.vocab_size()))?, a.train.seed)?, 0),
    };
    let cfg = train_config(&a.train);
    let (report, documents) = with_corpus(corpus, |docs| pretrain(&mut model, &tok, docs, &cfg))?;
    log::info!("pretrained on {documents} documents");
    let summary = finish_training(
        &model,
        CheckpointKind::Lm,
        &tok,
        prior_step,
        &a.train,
        &report,
        output,
        BTreeMap::new(),
    )?;
    emit(&summary)
}

fn finetune_lm_cmd(a: FinetuneLmArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let ck = load_checked(&a.checkpoint, &tok)?;
    let data: Vec<LmExample> = read_jsonl(need(&a.data, "data")?)?;
    let output = need(&a.output, "output")?;
    let prior = ck.header.step;
    let mut model = ck.into_model()?;
    let report = finetune_lm(&mut model, &tok, &data, &train_config(&a.train))?;
    let summary = finish_training(&model, CheckpointKind::Lm, &tok, prior, &a.train, &report, output, BTreeMap::new())?;
    emit(&summary)
}

fn classifier_accuracy(model: &ClassifierModel, tok: &TokenizerModel, data: &[ClsExample]) -> Result<f64> {
    let preds = data
        .iter()
        .map(|ex| model.classify(tok, &ex.text).map(|c| c.label))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<u8> = data.iter().map(|ex| ex.label).collect();
    accuracy(&preds, &golds)
}

fn finetune_cls_cmd(a: FinetuneClsArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let ck = load_checked(&a.checkpoint, &tok)?;
    let data: Vec<ClsExample> = read_jsonl(need(&a.data, "data")?)?;
    let output = need(&a.output, "output")?;
    let prior = ck.header.step;
    let mut model = match ck.header.kind {
        CheckpointKind::Classifier => ck.into_classifier()?,
        CheckpointKind::Lm => ClassifierModel::new(ck.into_model()?, a.train.seed)?,
    };
    let (train, test) = match a.train_fraction {
        Some(f) => split(&data, f, a.train.seed)?,
        None => (data, Vec::new()),
    };
    let report = finetune_classifier(&mut model, &tok, &train, &train_config(&a.train))?;
    let mut metrics = BTreeMap::new();
    if !test.is_empty() {
        metrics.insert("heldout_accuracy".into(), classifier_accuracy(&model, &tok, &test)?);
    }
    let summary = finish_training(
        &model.lm,
        CheckpointKind::Classifier,
        &tok,
        prior,
        &a.train,
        &report,
        output,
        metrics,
    )?;
    emit(&summary)
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let model = load_checked(&a.checkpoint, &tok)?.into_model()?;
    let prompt = need(&a.prompt, "prompt")?;
    let mut ids = tok.encode(prompt);
    if a.separator {
        ids.push(EOS_ID);
    }
    let sampling = match a.sampling {
        SamplingKind::Greedy => Sampling::Greedy,
        SamplingKind::Temperature => Sampling::Temperature(a.temperature),
        SamplingKind::TopK => Sampling::TopK {
            k: a.top_k,
            temperature: a.temperature,
        },
    };
    let out = generate(&model, &ids, a.max_new, sampling, a.seed, Some(EOS_ID))?;
    let new = &out[ids.len()..];
    emit(&serde_json::json!({
        "prompt": prompt,
        "completion": tok.decode(new)?,
        "ids": new,
    }))
}

#[derive(Deserialize)]
struct GenPair {
    hypothesis: String,
    reference: String,
}

fn eval_gen(a: EvalGenArgs) -> Result<()> {
    let pairs: Vec<GenPair> = read_jsonl(need(&a.input, "input")?)?;
    if pairs.is_empty() {
        return Err(Error::Input("no hypothesis/reference pairs".into()));
    }
    let (mut b_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for p in &pairs {
        let b = bleu(&p.hypothesis, &p.reference, a.max_n);
        let r = rouge_n(&p.hypothesis, &p.reference, a.rouge_n);
        b_sum += b;
        r_sum += r;
        f_sum += f1_bleu_rouge(b, r);
    }
    let n = pairs.len();
    let report = |metric: &str, sum: f64| MetricReport {
        metric: metric.into(),
        value: sum / n as f64,
        sample_count: n,
        config: serde_json::json!({ "max_n": a.max_n, "rouge_n": a.rouge_n }),
    };
    let reports = [report("bleu", b_sum), report("rouge", r_sum), report("f1", f_sum)];
    if let Some(path) = &a.results {
        append_results(path, &reports)?;
    }
    emit(&reports)
}

fn eval_cls(a: EvalClsArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let model = load_checked(&a.checkpoint, &tok)?.into_classifier()?;
    let data: Vec<ClsExample> = read_jsonl(need(&a.data, "data")?)?;
    let preds = data
        .iter()
        .map(|ex| model.classify(&tok, &ex.text))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &a.predictions {
        let f = File::create(path).map_err(io_err(path))?;
        alm_core::io::write_jsonl(BufWriter::new(f), &preds)?;
    }
    let labels: Vec<u8> = preds.iter().map(|c| c.label).collect();
    let golds: Vec<u8> = data.iter().map(|ex| ex.label).collect();
    let report = MetricReport {
        metric: "accuracy".into(),
        value: accuracy(&labels, &golds)?,
        sample_count: data.len(),
        config: serde_json::json!({}),
    };
    if let Some(path) = &a.results {
        append_results(path, std::slice::from_ref(&report))?;
    }
    emit(&report)
}

fn eval_fewshot(a: EvalFewshotArgs) -> Result<()> {
    let tok = load_tokenizer(&a.tokenizer)?;
    let model = load_checked(&a.checkpoint, &tok)?.into_model()?;
    let metric = McMetric::parse(&a.metric)?;
    let records: Vec<McRecord> = read_jsonl(need(&a.task, "task")?)?;
    let pool: Vec<McRecord> = match &a.pool {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let task = McTask { records, pool };
    let mut report = fewshot_eval(&model, &tok, &task, a.k, metric, a.seed)?;
    report.config["metric"] = metric.name().into();
    if let Some(path) = &a.results {
        append_results(path, std::slice::from_ref(&report))?;
    }
    emit(&report)
}

fn report(a: ReportArgs) -> Result<()> {
    if a.curve.is_none() && a.results.is_none() {
        return Err(Error::Config("give --curve and/or --results".into()));
    }
    let mut out = io::stdout().lock();
    let mut text = String::new();
    if let Some(path) = &a.curve {
        let f = File::open(path).map_err(io_err(path))?;
        let curve: Vec<StepRecord> = TrainingReport::read_jsonl(BufReader::new(f))?;
        text.push_str("| step | loss | lr | tokens |\n|---:|---:|---:|---:|\n");
        let every = a.every.max(1);
        for (i, r) in curve.iter().enumerate() {
            if r.step % every == 0 || i + 1 == curve.len() {
                text.push_str(&format!("| {} | {:.6} | {:.3e} | {} |\n", r.step, r.loss, r.lr, r.tokens_seen));
            }
        }
    }
    if let Some(path) = &a.results {
        if !text.is_empty() {
            text.push('\n');
        }
        let reports: Vec<MetricReport> = read_jsonl(path)?;
        text.push_str("| metric | value | samples | config |\n|---|---:|---:|---|\n");
        for r in &reports {
            text.push_str(&format!("| {} | {:.4} | {} | {} |\n", r.metric, r.value, r.sample_count, r.config));
        }
    }
    out.write_all(text.as_bytes()).map_err(io_err("<stdout>"))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let header = Checkpoint::read_header(need(&a.checkpoint, "checkpoint")?)?;
    let count: u64 = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() as u64)
        .sum();
    let mut value = serde_json::to_value(&header)?;
    value["param_count"] = count.into();
    emit(&value)
}
