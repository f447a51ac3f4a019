//! One function per subcommand. Library failures are data errors (exit 2);
//! missing or invalid parameters are usage errors (exit 1).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use drda_core::analysis::{self, EmbeddingTable};
use drda_core::augment::{build_dataset, read_jsonl, write_jsonl, AugmentedExample};
use drda_core::bpe::{train_bpe_with, vocab_at, BpeModel, BpeTrainConfig, Vocabulary};
use drda_core::corpus::{self, CleaningPolicy, ParallelCorpus, PerturbStats, Perturber, Sentence};
use drda_core::loss::KlMode;
use drda_core::nmt::{self, Checkpoint, Hypothesis, ModelConfig, Seq2Seq, TrainReport};
use drda_core::segment::{segment_dropout, segment_greedy, segment_multi, TokenSequence};
use drda_core::{mix_seed, Scalar};

use crate::config::Resolver;
use crate::*;

/// Name of the checkpoint inside a `drda train` output directory.
pub const CHECKPOINT_FILE: &str = "model.json";

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn path_string(p: PathBuf) -> String {
    p.to_string_lossy().into_owned()
}

fn opt_path(p: Option<PathBuf>) -> Option<String> {
    p.map(path_string)
}

/// `<path>` with `suffix` appended to the file name.
fn with_suffix(path: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{path}{suffix}"))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    create_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn write_sentences<'a>(path: &Path, lines: impl IntoIterator<Item = &'a Sentence>) -> Result<(), CliError> {
    create_parent(path)?;
    corpus::write_lines(path, lines).map_err(io_err(path))
}

fn joined(seq: &TokenSequence) -> String {
    seq.tokens.join(" ")
}

fn load_bpe(path: &str) -> Result<BpeModel, CliError> {
    BpeModel::load(path).map_err(data)
}

/// CSV to a file, or stdout when no path is given.
fn csv_writer(out: Option<&str>) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
    let sink: Box<dyn Write> = match out {
        Some(p) => {
            let path = Path::new(p);
            create_parent(path)?;
            Box::new(fs::File::create(path).map_err(io_err(path))?)
        }
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn finish_csv(mut w: csv::Writer<Box<dyn Write>>) -> Result<(), CliError> {
    w.flush().map_err(data)
}

pub fn clean(cfg: Option<&Path>, a: CleanArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let src = r.require("src", opt_path(a.src))?;
    let tgt = r.require("tgt", opt_path(a.tgt))?;
    let min = r.get("min", a.min, 1usize)?;
    let max = r.get("max", a.max, 175usize)?;
    let ratio = r.get("ratio", a.ratio, 1.5f64)?;
    let lowercase = r.get("lowercase", a.lowercase.then_some(true), false)?;
    let prefix = r.require("out_prefix", opt_path(a.out_prefix))?;
    r.announce("clean");
    let policy = CleaningPolicy::new(min, max, ratio).map_err(usage)?;
    let mut input = corpus::load_parallel(&src, &tgt).map_err(data)?;
    if lowercase {
        input = ParallelCorpus {
            pairs: input
                .pairs
                .into_iter()
                .map(|(s, t)| {
                    let lower = |x: Sentence| Sentence::new(x.as_str().to_lowercase()).expect("lowercasing adds no newline");
                    (lower(s), lower(t))
                })
                .collect(),
        };
    }
    let kept = corpus::clean(&input, &policy);
    write_sentences(&with_suffix(&prefix, ".src"), kept.sources())?;
    write_sentences(&with_suffix(&prefix, ".tgt"), kept.targets())?;
    eprintln!("kept {} of {} pairs", kept.len(), input.len());
    r.echo(&with_suffix(&prefix, ".run.toml"))
}

pub fn perturb(cfg: Option<&Path>, a: PerturbArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let input = r.require("in", opt_path(a.input))?;
    let p = r.get("p", a.p, 0.01f64)?;
    let seed = r.seed(a.seed, 0)?;
    let out = r.require("out", opt_path(a.out))?;
    r.announce("perturb");
    let lines = corpus::load_lines(&input).map_err(data)?;
    let perturber = Perturber::from_corpus(p, &lines).map_err(usage)?;
    let mut stats = PerturbStats::default();
    let noisy: Vec<Sentence> = lines
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (n, st) = perturber.perturb_with_stats(s, mix_seed(seed, i as u64));
            stats.absorb(&st);
            n
        })
        .collect();
    write_sentences(Path::new(&out), &noisy)?;
    eprintln!("perturbed {} of {} eligible characters", stats.perturbed(), stats.eligible);
    r.echo(&with_suffix(&out, ".run.toml"))
}

pub fn train_bpe(cfg: Option<&Path>, a: TrainBpeArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let flag_inputs = (!a.input.is_empty()).then(|| a.input.iter().map(|p| p.to_string_lossy().into_owned()).collect::<Vec<_>>());
    let inputs: Vec<String> = r.require("input", flag_inputs)?;
    let merges = r.get("merges", a.merges, 8000usize)?;
    let joint_flag = if a.no_joint {
        Some(false)
    } else if a.joint {
        Some(true)
    } else {
        None
    };
    let joint = r.get("joint", joint_flag, true)?;
    let min_pair_count = r.get("min_pair_count", a.min_pair_count, 1u64)?;
    let model_path = r.require("model", opt_path(a.model))?;
    r.announce("train-bpe");
    if inputs.is_empty() {
        return Err(usage("--input needs at least one file"));
    }
    let corpora = inputs
        .iter()
        .map(|p| corpus::load_lines(p).map_err(data))
        .collect::<Result<Vec<_>, _>>()?;
    let config = BpeTrainConfig {
        max_merges: merges,
        min_pair_count,
        joint,
    };
    let save = |model: &BpeModel, path: &str| -> Result<(), CliError> {
        create_parent(Path::new(path))?;
        model.save(path).map_err(data)?;
        let vocab = vocab_at(model, model.max_vocab_size()).map_err(data)?;
        vocab.save(with_suffix(path, ".vocab")).map_err(data)?;
        eprintln!("{path}: {} merges, vocabulary sizes {}..={}", model.merges().len(), model.min_vocab_size(), model.max_vocab_size());
        Ok(())
    };
    if joint {
        let refs: Vec<&[Sentence]> = corpora.iter().map(Vec::as_slice).collect();
        save(&train_bpe_with(&refs, &config).map_err(data)?, &model_path)?;
    } else {
        for (i, c) in corpora.iter().enumerate() {
            let model = train_bpe_with(&[c.as_slice()], &config).map_err(data)?;
            save(&model, &format!("{model_path}.{i}"))?;
        }
    }
    r.echo(&with_suffix(&model_path, ".run.toml"))
}

pub fn segment(cfg: Option<&Path>, a: SegmentArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model = r.require("model", opt_path(a.model))?;
    let size = r.require("size", a.size)?;
    let input = r.require("in", opt_path(a.input))?;
    let out = r.require("out", opt_path(a.out))?;
    let dropout = r.get("dropout", a.dropout, 0.0f64)?;
    let seed = r.seed(a.seed, 0)?;
    r.announce("segment");
    if !(0.0..=1.0).contains(&dropout) {
        return Err(usage(format!("--dropout {dropout} outside [0, 1]")));
    }
    let bpe = load_bpe(&model)?;
    let lines = corpus::load_lines(&input).map_err(data)?;
    let mut text = String::new();
    for (i, s) in lines.iter().enumerate() {
        let seq = if dropout > 0.0 {
            segment_dropout(s, &bpe, size, dropout, mix_seed(seed, i as u64))
        } else {
            segment_greedy(s, &bpe, size)
        }
        .map_err(data)?;
        text.push_str(&joined(&seq));
        text.push('\n');
    }
    write_text(Path::new(&out), &text)?;
    r.echo(&with_suffix(&out, ".run.toml"))
}

pub fn segment_multi_cmd(cfg: Option<&Path>, a: SegmentMultiArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model = r.require("model", opt_path(a.model))?;
    let prime = r.require("prime", a.prime)?;
    let augs = r.require("augs", a.augs)?;
    let input = r.require("in", opt_path(a.input))?;
    let prefix = r.require("out_prefix", opt_path(a.out_prefix))?;
    r.announce("segment-multi");
    let bpe = load_bpe(&model)?;
    let lines = corpus::load_lines(&input).map_err(data)?;
    let sizes: Vec<usize> = std::iter::once(prime).chain(augs.iter().copied()).collect();
    let mut texts = vec![String::new(); sizes.len()];
    for s in &lines {
        for (text, seq) in texts.iter_mut().zip(segment_multi(s, &bpe, prime, &augs).map_err(data)?) {
            text.push_str(&joined(&seq));
            text.push('\n');
        }
    }
    for (size, text) in sizes.iter().zip(&texts) {
        write_text(&with_suffix(&prefix, &format!(".{size}")), text)?;
    }
    r.echo(&with_suffix(&prefix, ".run.toml"))
}

pub fn augment(cfg: Option<&Path>, a: AugmentArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model = r.require("model", opt_path(a.model))?;
    let prime = r.require("prime", a.prime)?;
    let augs = r.get("augs", a.augs, Vec::new())?;
    let src = r.require("src", opt_path(a.src))?;
    let tgt = r.require("tgt", opt_path(a.tgt))?;
    let out = r.require("out", opt_path(a.out))?;
    r.announce("augment");
    let bpe = load_bpe(&model)?;
    let pairs = corpus::load_parallel(&src, &tgt).map_err(data)?;
    let dataset = build_dataset(&pairs, &bpe, prime, &augs).map_err(data)?;
    create_parent(Path::new(&out))?;
    write_jsonl(&dataset, &out).map_err(data)?;
    eprintln!("wrote {} examples", dataset.len());
    r.echo(&with_suffix(&out, ".run.toml"))
}

fn train_generic<T: Scalar>(dataset: &[AugmentedExample], config: &ModelConfig, fingerprint: u64) -> Result<(Checkpoint, TrainReport), CliError> {
    let (model, report) = nmt::train::<T>(dataset, config).map_err(data)?;
    Ok((Checkpoint::from_model(&model, Some(fingerprint)), report))
}

pub fn train(cfg: Option<&Path>, a: TrainArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let data_path = r.require("data", opt_path(a.data))?;
    let bpe_path = r.require("bpe", opt_path(a.bpe))?;
    let out = r.require("out", opt_path(a.out))?;
    let no_augs = r.get("no_augs", a.no_augs.then_some(true), false)?;

    let bpe = load_bpe(&bpe_path)?;
    let dataset = read_jsonl(&data_path, &bpe).map_err(data)?;
    let first = dataset.first().ok_or_else(|| data(format!("{data_path}: no examples")))?;
    let prime_size = first.src_prime.vocab_size;
    let aug_sizes: Vec<usize> = if no_augs {
        Vec::new()
    } else {
        first.src_augs.iter().map(|s| s.vocab_size).collect()
    };
    let d = ModelConfig::default();
    let default_alpha = if aug_sizes.is_empty() { 0.0 } else { d.alpha };
    let kl_mode: String = r.get("kl_mode", a.kl_mode, "mean".to_string())?;
    let config = ModelConfig {
        prime_size,
        alpha: r.get("alpha", a.alpha, default_alpha)?,
        smoothing: r.get("smoothing", a.smoothing, d.smoothing)?,
        kl_mode: kl_mode.parse::<KlMode>().map_err(usage)?,
        steps: r.get("steps", a.steps, d.steps)?,
        batch_size: r.get("batch_size", a.batch_size, d.batch_size)?,
        lr: r.get("lr", a.lr, 2e-3)?,
        warmup: r.get("warmup", a.warmup, d.warmup)?,
        clip_norm: r.get("clip_norm", a.clip_norm, d.clip_norm)?,
        d_model: r.get("d_model", a.d_model, d.d_model)?,
        n_heads: r.get("n_heads", a.n_heads, d.n_heads)?,
        n_layers: r.get("n_layers", a.n_layers, d.n_layers)?,
        ffn_dim: r.get("ffn_dim", a.ffn_dim, d.ffn_dim)?,
        dropout: r.get("dropout", a.dropout, d.dropout)?,
        seed: r.seed(a.seed, d.seed)?,
        aug_sizes,
    };
    let precision: String = r.get(
        "precision",
        a.precision.map(|p| if p == Precision::F64 { "f64" } else { "f32" }.to_string()),
        "f32".to_string(),
    )?;
    r.announce("train");
    config.validate().map_err(usage)?;

    let (checkpoint, report) = match precision.as_str() {
        "f32" => train_generic::<f32>(&dataset, &config, bpe.fingerprint())?,
        "f64" => train_generic::<f64>(&dataset, &config, bpe.fingerprint())?,
        other => return Err(usage(format!("precision {other:?} is not f32 or f64"))),
    };

    let dir = Path::new(&out);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    nmt::save_checkpoint(&checkpoint, dir.join(CHECKPOINT_FILE)).map_err(data)?;

    let mut steps = csv_writer(Some(&path_string(dir.join("steps.csv"))))?;
    steps.write_record(["step", "loss"]).map_err(data)?;
    for (i, l) in report.step_losses.iter().enumerate() {
        steps.write_record([(i + 1).to_string(), l.to_string()]).map_err(data)?;
    }
    finish_csv(steps)?;

    let mut epochs = csv_writer(Some(&path_string(dir.join("epochs.csv"))))?;
    epochs
        .write_record(["epoch", "steps", "prime_nll", "aug_nll_mean", "agreement_mean", "total"])
        .map_err(data)?;
    for e in &report.epochs {
        let l = &e.loss;
        epochs
            .write_record([
                e.epoch.to_string(),
                e.steps.to_string(),
                l.prime_nll.to_string(),
                l.aug_nll_mean.to_string(),
                l.agreement_mean.to_string(),
                l.total.to_string(),
            ])
            .map_err(data)?;
    }
    finish_csv(epochs)?;

    if let Some(last) = report.step_losses.last() {
        eprintln!("trained {} steps, final batch loss {last:.4}", report.step_losses.len());
    }
    r.echo(&dir.join("config.toml"))
}

/// A checkpoint from a `drda train` directory (or a checkpoint file given directly)
/// checked against the BPE model it will be used with.
fn load_trained(model: &str, bpe: &BpeModel) -> Result<Seq2Seq<f64>, CliError> {
    let p = Path::new(model);
    let file = if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() };
    let ck = nmt::load_checkpoint(&file).map_err(data)?;
    ck.check_bpe(bpe.fingerprint()).map_err(data)?;
    ck.to_model::<f64>().map_err(data)
}

pub fn translate(cfg: Option<&Path>, a: TranslateArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model_path = r.require("model", opt_path(a.model))?;
    let bpe_path = r.require("bpe", opt_path(a.bpe))?;
    let sizes = r.require("sizes", a.sizes)?;
    let select_name = r.get(
        "select",
        a.select.map(|s| format!("{s:?}").to_lowercase()),
        "dynamic".to_string(),
    )?;
    let input = r.require("in", opt_path(a.input))?;
    let out = r.require("out", opt_path(a.out))?;
    let reference = r.optional("ref", opt_path(a.reference))?;
    let report_path = r.optional("report", opt_path(a.report))?;
    let beam = r.get("beam", a.beam, 5usize)?;
    let max_len = r.get("max_len", a.max_len, 100usize)?;
    r.announce("translate");
    let select = match select_name.as_str() {
        "dynamic" => Select::Dynamic,
        "prime" => Select::Prime,
        "oracle" => Select::Oracle,
        other => return Err(usage(format!("unknown selection rule {other:?}"))),
    };
    if sizes.is_empty() {
        return Err(usage("--sizes needs at least the prime size"));
    }
    if select == Select::Oracle && reference.is_none() {
        return Err(usage("--select oracle needs --ref"));
    }

    let bpe = load_bpe(&bpe_path)?;
    let model = load_trained(&model_path, &bpe)?;
    let sources = corpus::load_lines(&input).map_err(data)?;
    let refs = match &reference {
        Some(p) => {
            let refs = corpus::load_lines(p).map_err(data)?;
            if refs.len() != sources.len() {
                return Err(data(format!("{p}: {} references for {} sources", refs.len(), sources.len())));
            }
            Some(refs)
        }
        None => None,
    };

    let mut hyps: Vec<Hypothesis> = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let h = match select {
            Select::Dynamic => nmt::dynamic_select(&model, s, &bpe, &sizes, beam, max_len),
            Select::Prime => nmt::decode_all(&model, s, &bpe, &sizes[..1], beam, max_len).map(|mut v| v.remove(0)),
            Select::Oracle => {
                let refs = refs.as_ref().expect("checked above");
                nmt::oracle_select(&model, s, &refs[i], &bpe, &sizes, beam, max_len)
            }
        }
        .map_err(data)?;
        hyps.push(h);
    }
    let texts: Vec<Sentence> = hyps.iter().map(Hypothesis::text).collect();
    write_sentences(Path::new(&out), &texts)?;

    let bleus: Option<Vec<f64>> = refs
        .as_ref()
        .map(|refs| texts.iter().zip(refs).map(|(h, r)| nmt::sentence_bleu(h.as_str(), r.as_str())).collect());
    if let Some(b) = &bleus {
        let mean = if b.is_empty() { 0.0 } else { b.iter().sum::<f64>() / b.len() as f64 };
        eprintln!("mean sentence BLEU {mean:.4} over {} sentences", b.len());
    }
    if let Some(p) = &report_path {
        let mut w = csv_writer(Some(p))?;
        w.write_record(["index", "granularity", "score", "bleu"]).map_err(data)?;
        for (i, h) in hyps.iter().enumerate() {
            let score = nmt::normalised_score(h).map(|s| s.to_string()).unwrap_or_default();
            let bleu = bleus.as_ref().map(|b| b[i].to_string()).unwrap_or_default();
            w.write_record([i.to_string(), h.source_granularity.to_string(), score, bleu])
                .map_err(data)?;
        }
        finish_csv(w)?;
    }
    r.echo(&with_suffix(&out, ".run.toml"))
}

pub fn check_grad(cfg: Option<&Path>, a: CheckGradArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let seed = r.seed(a.seed, 0)?;
    let h = r.get("h", a.h, 1e-5f64)?;
    let per_param = r.get("per_param", a.per_param, 8usize)?;
    let tolerance = r.get("tolerance", a.tolerance, 1e-4f64)?;
    r.announce("check-grad");
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 12,
        prime_size: 12,
        aug_sizes: vec![8],
        alpha: 5.0,
        seed,
        ..ModelConfig::default()
    };
    let model = Seq2Seq::<f64>::new(config).map_err(data)?;
    let seq = |ids: &[u32], size: usize| TokenSequence {
        ids: ids.to_vec(),
        tokens: ids.iter().map(|i| format!("t{i}")).collect(),
        vocab_size: size,
    };
    let example = AugmentedExample {
        src_prime: seq(&[9, 10], 12),
        src_augs: vec![seq(&[4, 5, 6, 7], 8)],
        tgt: seq(&[11, 8], 12),
    };
    let report = nmt::gradient_check(&model, &example, h, per_param, mix_seed(seed, 1)).map_err(data)?;
    println!(
        "checked {} coordinates; max relative error {:.3e} at {}[{}]",
        report.checked, report.max_rel_error, report.worst.0, report.worst.1
    );
    if report.max_rel_error < tolerance {
        println!("PASS (< {tolerance:e})");
        Ok(())
    } else {
        Err(data(format!("gradient check failed: {:.3e} >= {tolerance:e}", report.max_rel_error)))
    }
}

pub fn freq_drop(cfg: Option<&Path>, a: FreqDropArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model = r.require("model", opt_path(a.model))?;
    let small = r.require("small", a.small)?;
    let large = r.require("large", a.large)?;
    let corpus_path = r.require("corpus", opt_path(a.corpus))?;
    let min_freq = r.get("min_freq", a.min_freq, 1usize)?;
    let out = r.optional("out", opt_path(a.out))?;
    r.announce("analyze freq-drop");
    let bpe = load_bpe(&model)?;
    let lines = corpus::load_lines(&corpus_path).map_err(data)?;
    let records = analysis::freq_drop(&lines, &bpe, small, large, min_freq).map_err(data)?;
    let mut w = csv_writer(out.as_deref())?;
    w.write_record(["token", "id", "freq_small", "freq_large", "drop_rate"]).map_err(data)?;
    for rec in &records {
        w.write_record([
            rec.token.clone(),
            rec.id.to_string(),
            rec.freq_small.to_string(),
            rec.freq_large.to_string(),
            rec.drop_rate.to_string(),
        ])
        .map_err(data)?;
    }
    finish_csv(w)?;
    match out {
        Some(o) => r.echo(&with_suffix(&o, ".run.toml")),
        None => Ok(()),
    }
}

pub fn neighbors(cfg: Option<&Path>, a: NeighborsArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let emb_path = r.require("emb", opt_path(a.emb))?;
    let token = r.require("token", a.token)?;
    let n = r.get("n", a.n, 10usize)?;
    let out = r.optional("out", opt_path(a.out))?;
    r.announce("analyze neighbors");
    let emb = EmbeddingTable::<f64>::load(&emb_path).map_err(data)?;
    let hits = analysis::nearest_neighbors(&emb, &token, n).map_err(data)?;
    let mut w = csv_writer(out.as_deref())?;
    w.write_record(["rank", "token", "similarity"]).map_err(data)?;
    for (i, (t, c)) in hits.iter().enumerate() {
        w.write_record([(i + 1).to_string(), t.clone(), c.to_string()]).map_err(data)?;
    }
    finish_csv(w)?;
    match out {
        Some(o) => r.echo(&with_suffix(&o, ".run.toml")),
        None => Ok(()),
    }
}

/// Keep only the rows whose token is in `vocab`, in the table's order.
fn restrict(emb: &EmbeddingTable<f64>, vocab: &Vocabulary) -> Result<EmbeddingTable<f64>, CliError> {
    let mut tokens = Vec::new();
    let mut vectors = Vec::new();
    for (i, t) in emb.tokens().iter().enumerate() {
        if vocab.id_of(t).is_some() {
            tokens.push(t.clone());
            vectors.extend_from_slice(emb.vector(i));
        }
    }
    EmbeddingTable::new(tokens, emb.dim(), vectors).map_err(data)
}

pub fn ssc(cfg: Option<&Path>, a: SscArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let emb_path = r.require("emb", opt_path(a.emb))?;
    let vocab_path = r.optional("vocab", opt_path(a.vocab))?;
    let out = r.optional("out", opt_path(a.out))?;
    r.announce("analyze ssc");
    let mut emb = EmbeddingTable::<f64>::load(&emb_path).map_err(data)?;
    if let Some(v) = &vocab_path {
        emb = restrict(&emb, &Vocabulary::load(v).map_err(data)?)?;
    }
    let mut w = csv_writer(out.as_deref())?;
    w.write_record(["compound", "a", "b", "similarity"]).map_err(data)?;
    if let Some(pair) = a.pair {
        let (x, y) = (&pair[0], &pair[1]);
        let sim = analysis::ssc_similarity(&emb, x, y).map_err(data)?;
        w.write_record([format!("{x}{y}"), x.clone(), y.clone(), sim.to_string()]).map_err(data)?;
    } else {
        for rec in analysis::ssc_records(&emb) {
            w.write_record([rec.compound, rec.parts.0, rec.parts.1, rec.similarity.to_string()])
                .map_err(data)?;
        }
        let avg = analysis::ssc_average(&emb).map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["<average>".to_string(), String::new(), String::new(), avg]).map_err(data)?;
    }
    finish_csv(w)?;
    match out {
        Some(o) => r.echo(&with_suffix(&o, ".run.toml")),
        None => Ok(()),
    }
}

pub fn export_emb(cfg: Option<&Path>, a: ExportEmbArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(cfg)?;
    let model_path = r.require("model", opt_path(a.model))?;
    let bpe_path = r.require("bpe", opt_path(a.bpe))?;
    let out = r.require("out", opt_path(a.out))?;
    let bpe = load_bpe(&bpe_path)?;
    let model = load_trained(&model_path, &bpe)?;
    let size = r.get("size", a.size, model.config().prime_size)?;
    r.announce("export-emb");
    let vocab = vocab_at(&bpe, size).map_err(data)?;
    let table = EmbeddingTable::from_model(&model, &vocab).map_err(data)?;
    create_parent(Path::new(&out))?;
    table.save(&out).map_err(data)?;
    r.echo(&with_suffix(&out, ".run.toml"))
}
