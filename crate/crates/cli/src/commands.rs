use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nmt_core::beam::{translate_corpus, Tokenizers};
use nmt_core::corpus::{self, read_lines, ParallelCorpus};
use nmt_core::dictfilter::{filter_corpus, load_dictionary};
use nmt_core::evaluation::{build_report, render_report, ReportFormat};
use nmt_core::training::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, TokenPair, TokenizerBundle, Trainer,
};
use nmt_core::wordpiece::{encode, train_vocab, TokenizerConfig, Vocabulary};
use nmt_core::{ModelConfig, NmtError, Result};

use crate::args::{BuildVocabArgs, EvaluateArgs, FilterArgs, Format, Side, TrainArgs, TranslateArgs};
use crate::config::{io_err, require_file, Layer, PipelineConfig};

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn lines_to_text<S: AsRef<str>>(lines: &[S]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    out
}

pub fn filter(args: &FilterArgs, layer: &Layer<'_>, cfg: &mut PipelineConfig) -> Result<()> {
    cfg.filter.threshold = layer.value("threshold", args.threshold, cfg.filter.threshold);
    cfg.filter.direction = layer.value("direction", args.direction.into(), cfg.filter.direction);
    if args.keep_punctuation {
        cfg.filter.strip_punctuation = false;
    }
    cfg.filter.validate()?;
    let p = &cfg.paths;
    let dict_path = layer.path("dict", "dict", args.dict.clone(), p.dict.clone())?;
    let out_prefix = layer.path("out-prefix", "out_prefix", args.out_prefix.clone(), p.out_prefix.clone())?;
    let input = match (&args.src, &args.tgt, &args.tsv) {
        (Some(s), Some(t), _) => Ok((s.clone(), t.clone())),
        (_, _, Some(tsv)) => Err(tsv.clone()),
        _ => match (&p.src, &p.tgt, &p.tsv) {
            (Some(s), Some(t), _) => Ok((s.clone(), t.clone())),
            (_, _, Some(tsv)) => Err(tsv.clone()),
            _ => return Err(NmtError::Config("give --src and --tgt, or --tsv".into())),
        },
    };
    require_file(&dict_path)?;
    match &input {
        Ok((s, t)) => {
            require_file(s)?;
            require_file(t)?;
        }
        Err(tsv) => require_file(tsv)?,
    }

    let dict = load_dictionary(&dict_path)?;
    let (corpus, load) = match &input {
        Ok((s, t)) => corpus::load_moses(s, t)?,
        Err(tsv) => corpus::load_tsv(tsv)?,
    };
    let out = filter_corpus(&corpus, &dict, &cfg.filter)?;
    ensure_parent(&out_prefix)?;
    corpus::write_moses(&out.kept, &with_suffix(&out_prefix, ".kept.src"), &with_suffix(&out_prefix, ".kept.tgt"))?;
    corpus::write_moses(
        &out.rejected,
        &with_suffix(&out_prefix, ".rejected.src"),
        &with_suffix(&out_prefix, ".rejected.tgt"),
    )?;
    let mut report = out.report.to_json();
    report.push('\n');
    write_text(&with_suffix(&out_prefix, ".report.json"), &report)?;
    log::info!(
        "kept {} of {} pairs ({} blank pairs dropped on load)",
        out.report.kept_count,
        corpus.len(),
        load.dropped_blank
    );
    Ok(())
}

pub fn build_vocab(args: &BuildVocabArgs, layer: &Layer<'_>, cfg: &mut PipelineConfig) -> Result<()> {
    let base = match args.side {
        Side::Source => &mut cfg.source_tokenizer,
        Side::Target => &mut cfg.target_tokenizer,
    };
    base.vocab_size = layer.value("vocab_size", args.vocab_size, base.vocab_size);
    base.min_frequency = layer.value("min_frequency", args.min_frequency, base.min_frequency);
    if args.lowercase {
        base.lowercase = true;
    }
    let tok = base.clone();
    let inputs = if args.input.is_empty() {
        cfg.paths.vocab_inputs.clone()
    } else {
        args.input.clone()
    };
    if inputs.is_empty() {
        return Err(NmtError::Config("--input is required (or paths.vocab_inputs in the config file)".into()));
    }
    let out = layer.path("out", "vocab_out", args.out.clone(), cfg.paths.vocab_out.clone())?;
    for p in &inputs {
        require_file(p)?;
    }
    let mut lines = Vec::new();
    for p in &inputs {
        lines.extend(read_lines(p)?);
    }
    let vocab = train_vocab(&lines, &tok)?;
    ensure_parent(&out)?;
    vocab.save(&out)?;
    log::info!("wrote {} tokens to {}", vocab.len(), out.display());
    Ok(())
}

fn encode_corpus(c: &ParallelCorpus, src: (&Vocabulary, &TokenizerConfig), tgt: (&Vocabulary, &TokenizerConfig)) -> Vec<TokenPair> {
    c.pairs()
        .iter()
        .map(|p| (encode(&p.source, src.0, src.1).ids, encode(&p.target, tgt.0, tgt.1).ids))
        .collect()
}

pub fn train(args: &TrainArgs, layer: &Layer<'_>, cfg: &mut PipelineConfig) -> Result<()> {
    let m = &mut cfg.model;
    m.arch = layer.value("arch", args.arch, m.arch);
    m.dropout = layer.value("dropout", args.dropout, m.dropout);
    m.max_source_positions = layer.value("max_source_positions", args.max_source_positions, m.max_source_positions);
    m.max_target_positions = layer.value("max_target_positions", args.max_target_positions, m.max_target_positions);
    let t = &mut cfg.train;
    t.peak_lr = layer.value("lr", args.lr, t.peak_lr);
    (t.adam_beta1, t.adam_beta2) = layer.value("adam_betas", args.adam_betas, (t.adam_beta1, t.adam_beta2));
    t.adam_eps = layer.value("adam_eps", args.adam_eps, t.adam_eps);
    t.clip_norm = layer.value("clip_norm", args.clip_norm, t.clip_norm);
    t.warmup_updates = layer.value("warmup_updates", args.warmup_updates, t.warmup_updates);
    t.label_smoothing = layer.value("label_smoothing", args.label_smoothing, t.label_smoothing);
    t.weight_decay = layer.value("weight_decay", args.weight_decay, t.weight_decay);
    t.max_tokens = layer.value("max_tokens", args.max_tokens, t.max_tokens);
    t.update_freq = layer.value("update_freq", args.update_freq, t.update_freq);
    t.stop_ppl = layer.value("stop_ppl", Some(args.stop_ppl), t.stop_ppl);
    t.max_epochs = layer.value("max_epochs", args.max_epochs, t.max_epochs);
    t.max_updates = args.max_updates.or(t.max_updates);
    t.seed = layer.value("seed", args.seed, t.seed);
    t.validate()?;
    cfg.source_tokenizer.lowercase = layer.value("src_lowercase", args.src_lowercase, cfg.source_tokenizer.lowercase);
    cfg.target_tokenizer.lowercase = layer.value("tgt_lowercase", args.tgt_lowercase, cfg.target_tokenizer.lowercase);
    cfg.valid_fraction = layer.value("valid_fraction", args.valid_fraction, cfg.valid_fraction);
    if !(0.0..1.0).contains(&cfg.valid_fraction) {
        return Err(NmtError::Config(format!("--valid-fraction must lie in [0, 1), got {}", cfg.valid_fraction)));
    }

    let p = &cfg.paths;
    let data_prefix = layer.path("data-prefix", "data_prefix", args.data_prefix.clone(), p.data_prefix.clone())?;
    let src_vocab_path = layer.path("src-vocab", "src_vocab", args.src_vocab.clone(), p.src_vocab.clone())?;
    let tgt_vocab_path = layer.path("tgt-vocab", "tgt_vocab", args.tgt_vocab.clone(), p.tgt_vocab.clone())?;
    let valid_prefix = args.valid_prefix.clone().or(p.valid_prefix.clone());
    let checkpoint_dir = layer.value(
        "checkpoint_dir",
        args.checkpoint_dir.clone(),
        p.checkpoint_dir.clone().unwrap_or_else(|| args.checkpoint_dir.clone()),
    );
    let restore = args.restore_file.clone().or(p.restore_file.clone());
    let (train_src, train_tgt) = (with_suffix(&data_prefix, ".src"), with_suffix(&data_prefix, ".tgt"));
    let mut required = vec![train_src.clone(), train_tgt.clone(), src_vocab_path.clone(), tgt_vocab_path.clone()];
    if let Some(v) = &valid_prefix {
        required.push(with_suffix(v, ".src"));
        required.push(with_suffix(v, ".tgt"));
    }
    required.extend(restore.clone());
    for path in &required {
        require_file(path)?;
    }
    fs::create_dir_all(&checkpoint_dir).map_err(|e| io_err(&checkpoint_dir, e))?;

    let src_vocab = Vocabulary::load(&src_vocab_path)?;
    let tgt_vocab = Vocabulary::load(&tgt_vocab_path)?;
    let (src_tok, tgt_tok) = (cfg.source_tokenizer.clone(), cfg.target_tokenizer.clone());
    let (all, _) = corpus::load_moses(&train_src, &train_tgt)?;
    let (train_corpus, valid_corpus) = match &valid_prefix {
        Some(v) => (all, Some(corpus::load_moses(&with_suffix(v, ".src"), &with_suffix(v, ".tgt"))?.0)),
        None if cfg.valid_fraction > 0.0 => {
            let (t, v) = corpus::split(&all, cfg.valid_fraction, cfg.train.seed)?;
            (t, Some(v))
        }
        None => (all, None),
    };
    let sides = ((&src_vocab, &src_tok), (&tgt_vocab, &tgt_tok));
    let train_pairs = encode_corpus(&train_corpus, sides.0, sides.1);
    let valid_pairs = match &valid_corpus {
        Some(v) => encode_corpus(v, sides.0, sides.1),
        None => train_pairs.clone(),
    };

    let mut model_cfg = ModelConfig::preset(cfg.model.arch, src_vocab.len(), tgt_vocab.len());
    model_cfg.dropout = cfg.model.dropout;
    model_cfg.max_source_positions = cfg.model.max_source_positions;
    model_cfg.max_target_positions = cfg.model.max_target_positions;
    let mut trainer = match &restore {
        Some(path) => {
            let ckpt = load_checkpoint_for(path, &model_cfg)?;
            Trainer::from_checkpoint(ckpt, Some(cfg.train.clone()))?
        }
        None => Trainer::new(model_cfg, cfg.train.clone())?,
    };
    trainer.tokenizers = Some(TokenizerBundle::new(&src_vocab, src_tok, &tgt_vocab, tgt_tok));
    log::info!(
        "training {} ({} parameters) on {} pairs, validating on {}",
        cfg.model.arch,
        trainer.model.params.num_parameters(),
        train_pairs.len(),
        valid_pairs.len()
    );
    let mut stderr = std::io::stderr().lock();
    let state = trainer.train(&train_pairs, &valid_pairs, Some(&checkpoint_dir), &mut stderr)?;
    save_checkpoint(&trainer.checkpoint(), &checkpoint_dir.join("checkpoint_last.pt"))?;
    writeln!(
        stderr,
        "finished after {} epoch(s), {} update(s); valid ppl {}",
        state.epoch,
        state.updates,
        state.valid_ppl.map_or("n/a".into(), |p| format!("{p:.4}"))
    )
    .map_err(|e| io_err(Path::new("<stderr>"), e))?;
    Ok(())
}

pub fn translate(args: &TranslateArgs, layer: &Layer<'_>, cfg: &mut PipelineConfig) -> Result<()> {
    let b = &mut cfg.beam;
    b.beam_size = layer.value("beam", args.beam, b.beam_size);
    b.batch_size = layer.value("batch_size", args.batch_size, b.batch_size);
    b.length_penalty = layer.value("lenpen", args.lenpen, b.length_penalty);
    b.max_len = args.max_len.or(b.max_len);
    b.validate()?;
    let p = &cfg.paths;
    let ckpt_path = layer.path("checkpoint", "checkpoint", args.checkpoint.clone(), p.checkpoint.clone())?;
    let input = layer.path("input", "input", args.input.clone(), p.input.clone())?;
    let output = layer.path("output", "output", args.output.clone(), p.output.clone())?;
    let vocab_override = (
        args.src_vocab.clone().or(p.src_vocab.clone()),
        args.tgt_vocab.clone().or(p.tgt_vocab.clone()),
    );
    for path in [Some(&ckpt_path), Some(&input), vocab_override.0.as_ref(), vocab_override.1.as_ref()]
        .into_iter()
        .flatten()
    {
        require_file(path)?;
    }

    let ckpt = match args.arch {
        Some(arch) => {
            let head = load_checkpoint(&ckpt_path)?;
            let mut expected = ModelConfig::preset(arch, head.model.src_vocab_size, head.model.tgt_vocab_size);
            expected.max_source_positions = head.model.max_source_positions;
            expected.max_target_positions = head.model.max_target_positions;
            load_checkpoint_for(&ckpt_path, &expected)?
        }
        None => load_checkpoint(&ckpt_path)?,
    };
    let bundle = ckpt.tokenizers.clone().ok_or_else(|| {
        NmtError::Config(format!("{} carries no vocabularies", ckpt_path.display()))
    })?;
    let (mut src_vocab, mut tgt_vocab) = bundle.vocabularies()?;
    if let Some(v) = &vocab_override.0 {
        src_vocab = Vocabulary::load(v)?;
    }
    if let Some(v) = &vocab_override.1 {
        tgt_vocab = Vocabulary::load(v)?;
    }
    let model = nmt_core::Transformer::from_parts(ckpt.model, ckpt.params)?;
    let sources = read_lines(&input)?;
    let tok = Tokenizers {
        src_vocab: &src_vocab,
        src_config: &bundle.src_config,
        tgt_vocab: &tgt_vocab,
    };
    let result = translate_corpus(&model, &sources, tok, &cfg.beam)?;
    write_text(&output, &lines_to_text(&result.outputs))?;
    let mut skips = serde_json::to_string_pretty(&result.skips)?;
    skips.push('\n');
    write_text(&with_suffix(&output, ".skips.json"), &skips)?;
    log::info!("translated {} lines ({} skipped)", sources.len(), result.skips.len());
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, layer: &Layer<'_>, cfg: &mut PipelineConfig) -> Result<()> {
    cfg.eval.bucket_threshold = layer.value("bucket_threshold", args.bucket_threshold, cfg.eval.bucket_threshold);
    cfg.eval.bucket_side = layer.value("bucket_side", args.bucket_side.into(), cfg.eval.bucket_side);
    cfg.eval.validate()?;
    let p = &cfg.paths;
    let refs_path = layer.path("refs", "refs", args.refs.clone(), p.refs.clone())?;
    let system_paths: BTreeMap<String, PathBuf> = if args.systems.is_empty() {
        p.systems.clone()
    } else {
        let mut m = BTreeMap::new();
        for (label, path) in &args.systems {
            if m.insert(label.clone(), path.clone()).is_some() {
                return Err(NmtError::Config(format!("system label {label:?} given twice")));
            }
        }
        m
    };
    let sources_path = args.sources.clone().or(p.sources.clone());
    let needs_sources = cfg.eval.bucket_side == nmt_core::evaluation::BucketSide::Source;
    if needs_sources && sources_path.is_none() {
        return Err(NmtError::Config("--sources is required when bucketing by source length".into()));
    }
    require_file(&refs_path)?;
    for path in system_paths.values().chain(sources_path.as_ref()) {
        require_file(path)?;
    }

    let refs = read_lines(&refs_path)?;
    let sources = match &sources_path {
        Some(s) => read_lines(s)?,
        None => Vec::new(),
    };
    let mut systems = BTreeMap::new();
    for (label, path) in &system_paths {
        systems.insert(label.clone(), read_lines(path)?);
    }
    let report = build_report(&systems, &refs, &sources, &cfg.eval)?;
    let format = match args.format {
        Format::Text => ReportFormat::Text,
        Format::Json => ReportFormat::Json,
    };
    let doc = render_report(&report, format)?;
    match args.output.clone().or(p.report.clone()) {
        Some(out) => write_text(&out, &doc),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(doc.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}
