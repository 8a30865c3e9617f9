use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rsnmt::analysis::{bleu, bootstrap_significance, export_attention, AttentionStats, Better};
use rsnmt::data::{read_lines, write_lines, EncodedCorpus, ParallelCorpus, Vocabulary};
use rsnmt::decoding::{decode, recurrence_sweep, render, translate, DecodeConfig};
use rsnmt::model::{build_model, count_parameters, ModelConfig, StackingMode};
use rsnmt::toy::{generate_split, ToySpec, ToyTask};
use rsnmt::training::{
    average_checkpoint_files, list_checkpoints, train, Checkpoint, CheckpointSink, Provenance,
    TrainConfig,
};
use rsnmt::transfer::{
    back_translate, distill_corpus, init_from_teacher, DistillConfig, DistillReport, TransferConfig,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Average(a) => average_cmd(a),
        Command::Bleu(a) => bleu_cmd(a),
        Command::Significance(a) => significance_cmd(a),
        Command::Params(a) => params_cmd(a),
        Command::SweepRecurrence(a) => sweep_cmd(a),
    }
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let task: ToyTask = a
        .task
        .parse()
        .map_err(|e: rsnmt::Error| usage(e.to_string()))?;
    let spec = ToySpec {
        task,
        pairs: a.pairs,
        vocab_size: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed.unwrap_or(0),
        noise: a.noise,
    };
    let (train, test) = generate_split(&spec, a.test_pairs).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    train.save(&a.out.join("train.src"), &a.out.join("train.tgt"))?;
    test.save(&a.out.join("test.src"), &a.out.join("test.tgt"))?;
    write_json(
        &a.out.join("config.json"),
        &serde_json::json!({ "toy": spec, "test_pairs": a.test_pairs }),
    )?;
    println!(
        "wrote {} training and {} test pairs to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn default_fraction() -> f64 {
    1.0
}
fn default_vocab() -> usize {
    8000
}
fn default_average() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    #[serde(default)]
    train_src: Option<PathBuf>,
    #[serde(default)]
    train_tgt: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    train_fraction: f64,
    /// Cap per side, reserved tokens included.
    #[serde(default = "default_vocab")]
    vocab_size: usize,
    /// Final model averages this many most recent checkpoints.
    #[serde(default = "default_average")]
    average_last: usize,
}

/// What `train` echoes into its run directory.
#[derive(Serialize)]
struct TrainRecord<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a DataConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    transfer: Option<TransferRecord>,
    provenance: &'a Provenance,
}

#[derive(Serialize)]
struct TransferRecord {
    teacher: PathBuf,
    #[serde(flatten)]
    config: TransferConfig,
}

/// Sidecar written next to generated corpora.
#[derive(Serialize, Deserialize)]
struct GenerationRecord {
    kind: String,
    model: PathBuf,
    decode: DecodeConfig,
    mix_original: bool,
    report: DistillReport,
}

const GENERATION_FILE: &str = "generation.json";

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut data_layers = Layers::new(serde_json::json!({}));
    data_layers
        .overlay(&file.data)
        .set("train_src", a.train_src.clone())
        .set("train_tgt", a.train_tgt.clone())
        .set("train_fraction", a.train_fraction)
        .set("vocab_size", a.vocab_size)
        .set("average_last", a.average_last);
    let data: DataConfig = data_layers.resolve("data")?;
    let (Some(src_path), Some(tgt_path)) = (data.train_src.clone(), data.train_tgt.clone()) else {
        return Err(usage(
            "train needs --train-src and --train-tgt (or data.train_src/train_tgt)",
        ));
    };
    if !(data.train_fraction > 0.0 && data.train_fraction <= 1.0) {
        return Err(usage("train_fraction must be in (0, 1]"));
    }
    if data.average_last < 1 {
        return Err(usage("average_last must be at least 1"));
    }

    let mut train_layers = Layers::new(serde_json::to_value(TrainConfig::default())?);
    train_layers
        .overlay(&file.train)
        .set("total_steps", a.steps)
        .set("warmup_steps", a.warmup)
        .set("base_lr", a.lr)
        .set("batch_size_tokens", a.batch_tokens)
        .set("label_smoothing", a.label_smoothing)
        .set("checkpoint_every", a.checkpoint_every)
        .set("keep_last", a.keep_last)
        .set("seed", a.seed);
    let train_cfg: TrainConfig = train_layers.resolve("train")?;
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;

    let teacher = a.init_from_teacher.as_deref().map(load_model).transpose()?;
    let mut model_layers = Layers::new(model_defaults());
    if let Some(t) = &teacher {
        // student inherits widths; stacking stays the student's own
        let mut inherited = serde_json::to_value(&t.weights.config)?;
        inherited
            .as_object_mut()
            .expect("object")
            .remove("stacking");
        model_layers.overlay(inherited.as_object().expect("object"));
    }
    model_layers.overlay(&file.model);
    apply_model_flags(&mut model_layers, &a.model);
    let mut model_cfg: ModelConfig = model_layers.resolve("model")?;

    let corpus = ParallelCorpus::load(&src_path, &tgt_path)?;
    if corpus.is_empty() {
        bail!("training corpus {} is empty", src_path.display());
    }
    let corpus = if data.train_fraction < 1.0 {
        corpus.subsample(data.train_fraction, train_cfg.seed)?
    } else {
        corpus
    };
    let (src_vocab, tgt_vocab) = match &teacher {
        Some(t) => (t.src_vocab.clone(), t.tgt_vocab.clone()),
        None if model_cfg.share_src_tgt_embedding => {
            let mut both = corpus.sources();
            both.extend(corpus.targets());
            let v = Vocabulary::build(&both, data.vocab_size)?;
            (v.clone(), v)
        }
        None => (
            Vocabulary::build(&corpus.sources(), data.vocab_size)?,
            Vocabulary::build(&corpus.targets(), data.vocab_size)?,
        ),
    };
    model_cfg.src_vocab_size = src_vocab.len();
    model_cfg.tgt_vocab_size = tgt_vocab.len();
    validate_model(&model_cfg)?;

    let mut provenance = Provenance::default();
    let mut transfer = None;
    let mut weights = match &teacher {
        Some(t) => {
            let (l_enc, l_dec) = match (a.l_enc, a.l_dec) {
                (Some(e), Some(d)) => (e, d),
                (Some(e), None) => (e, e),
                (None, Some(d)) => (d, d),
                (None, None) => (1, 1),
            };
            let tc = TransferConfig::new(l_enc, l_dec);
            let w = init_from_teacher(&model_cfg, &t.weights, &tc, train_cfg.seed).map_err(
                |e| match e {
                    rsnmt::Error::InvalidArgument(_) | rsnmt::Error::Config(_) => {
                        usage(e.to_string())
                    }
                    other => other.into(),
                },
            )?;
            provenance.init_teacher = Some(t.path.display().to_string());
            provenance.l_enc = Some(l_enc);
            provenance.l_dec = Some(l_dec);
            transfer = Some(TransferRecord {
                teacher: t.path.clone(),
                config: tc,
            });
            w
        }
        None => build_model::<f32>(&model_cfg, train_cfg.seed)?,
    };
    for side in [&tgt_path, &src_path] {
        let sidecar = side
            .parent()
            .unwrap_or(Path::new("."))
            .join(GENERATION_FILE);
        if let Ok(text) = fs::read_to_string(&sidecar) {
            if let Ok(g) = serde_json::from_str::<GenerationRecord>(&text) {
                match g.kind.as_str() {
                    "distill" => provenance.distilled_from = Some(g.model.display().to_string()),
                    "back_translation" => provenance.back_translated = true,
                    _ => {}
                }
                break;
            }
        }
    }

    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join("config.json"),
        &TrainRecord {
            model: &model_cfg,
            train: &train_cfg,
            data: &data,
            transfer,
            provenance: &provenance,
        },
    )?;
    src_vocab.save(&out.join("vocab.src"))?;
    tgt_vocab.save(&out.join("vocab.tgt"))?;
    let encoded = EncodedCorpus::new(&corpus, &src_vocab, &tgt_vocab);
    let log_path = out.join("train_log.tsv");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "step\tloss")?;
    let started = Instant::now();
    let ckpt_dir = out.join("checkpoints");
    let report = train(
        &mut weights,
        &encoded,
        &train_cfg,
        Some(CheckpointSink {
            dir: &ckpt_dir,
            provenance: provenance.clone(),
        }),
        |step, loss| {
            let _ = writeln!(log, "{step}\t{loss}");
            if a.log_every > 0 && step % a.log_every == 0 {
                eprintln!(
                    "step {step}\tloss {loss:.4}\t{:.1}s",
                    started.elapsed().as_secs_f64()
                );
            }
        },
    )?;
    log.flush()?;
    let keep = data.average_last.min(report.checkpoints.len());
    let last = &report.checkpoints[report.checkpoints.len() - keep..];
    let mut final_ckpt = if keep > 1 {
        average_checkpoint_files(last)?
    } else {
        Checkpoint::load(&last[0])?
    };
    let mut prov = provenance;
    if keep > 1 {
        prov.averaged_from = Some(keep);
    }
    final_ckpt = final_ckpt.with_provenance(prov);
    final_ckpt.save(&out.join("model.rsnmt"))?;
    eprintln!(
        "trained {} steps in {:.1}s; final loss {:.4}; model {}",
        train_cfg.total_steps,
        started.elapsed().as_secs_f64(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        out.join("model.rsnmt").display()
    );
    Ok(())
}

fn override_recurrences(cfg: &mut DecodeConfig, enc: Option<usize>, dec: Option<usize>) {
    if enc.is_some() {
        cfg.enc_recurrences = enc;
    }
    if dec.is_some() {
        cfg.dec_recurrences = dec;
    }
}

fn library_usage(e: rsnmt::Error) -> anyhow::Error {
    match e {
        rsnmt::Error::Config(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let started = Instant::now();
    let file = FileConfig::load(a.config.as_deref())?;
    let mut cfg = resolve_decode(&file, &a.decode)?;
    override_recurrences(&mut cfg, a.enc_recurrence, a.dec_recurrence);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.timing = a.time;
    let model = load_model(&a.model)?;
    let sentences = read_lines(&a.input)?;
    let out =
        translate(&model.weights, &model.src_vocab, &sentences, &cfg).map_err(library_usage)?;
    let lines = render(&model.tgt_vocab, &out.translations);
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_lines(&a.output, lines.iter().map(String::as_str))?;
    let mut echo = a.output.clone().into_os_string();
    echo.push(".config.json");
    write_json(
        Path::new(&echo),
        &serde_json::json!({ "model": model.path, "input": a.input, "decode": cfg }),
    )?;
    if let Some(dir) = &a.attention_out {
        let i = a.attention_sentence;
        let sentence = sentences.get(i).ok_or_else(|| {
            usage(format!(
                "--attention-sentence {i} but input has {} lines",
                sentences.len()
            ))
        })?;
        let capture = DecodeConfig {
            capture_attention: true,
            timing: false,
            ..cfg.clone()
        };
        let ids = model.src_vocab.encode(sentence);
        let one = decode(
            &model.weights,
            &rsnmt::data::Batch::from_sequences(std::slice::from_ref(&ids)),
            &capture,
        )?;
        let t = &one.translations[0];
        let trace = t.attention.clone().unwrap_or_default();
        let stats = AttentionStats::from_trace(&trace)?;
        let src_tokens: Vec<String> = ids
            .iter()
            .map(|&id| model.src_vocab.token(id).unwrap_or("<unk>").to_string())
            .collect();
        let mut tgt_tokens: Vec<String> = t
            .tokens
            .iter()
            .map(|&id| model.tgt_vocab.token(id).unwrap_or("<unk>").to_string())
            .collect();
        if t.finished {
            tgt_tokens.push("</s>".into());
        }
        let exported = export_attention(
            &trace,
            &stats,
            &src_tokens,
            &tgt_tokens,
            a.attention_position,
            dir,
        )?;
        eprintln!("attention written to {}", exported.json.display());
    }
    if a.time {
        let total = started.elapsed().as_secs_f64();
        println!("beam\talpha\tdec_recurrences\tsentences\tseconds");
        println!(
            "{}\t{}\t{}\t{}\t{total:.3}",
            cfg.beam_size,
            cfg.alpha,
            cfg.dec_recurrences
                .map(|k| k.to_string())
                .unwrap_or_else(|| model.weights.config.stacking.decoder_depth().to_string()),
            sentences.len()
        );
    }
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let decode = resolve_decode(&file, &a.decode)?;
    let teacher = load_model(&a.teacher)?;
    let sources = read_lines(&a.src)?;
    let corpus = match &a.reference {
        Some(r) => ParallelCorpus::from_sides(sources, read_lines(r)?)?,
        // without references the similarity BLEU is taken against the sources
        None => ParallelCorpus::new(sources.iter().map(|s| (s.clone(), s.clone())).collect()),
    };
    let cfg = DistillConfig {
        decode: decode.clone(),
        mix_original: a.mix,
        sample_size: if a.reference.is_some() {
            a.sample_size
        } else {
            0
        },
        seed: a.seed.unwrap_or(0),
    };
    let (pseudo, report) = distill_corpus(
        &teacher.weights,
        &teacher.src_vocab,
        &teacher.tgt_vocab,
        &corpus,
        &cfg,
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_corpus(&a.out, &pseudo)?;
    write_json(
        &a.out.join(GENERATION_FILE),
        &GenerationRecord {
            kind: "distill".into(),
            model: teacher.path.clone(),
            decode,
            mix_original: a.mix,
            report: report.clone(),
        },
    )?;
    write_json(&a.out.join("config.json"), &cfg)?;
    eprintln!(
        "distilled {} of {} sentences ({} skipped){}",
        report.produced,
        report.inputs,
        report.skipped.len(),
        report
            .sample_bleu
            .map(|b| format!("; sample BLEU vs references {b:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

/// Writes the pairs as `train.src` / `train.tgt`, keeping blank outputs so
/// the files stay line-aligned.
fn write_corpus(dir: &Path, corpus: &ParallelCorpus) -> Result<()> {
    write_lines(
        &dir.join("train.src"),
        corpus.pairs.iter().map(|p| p.0.as_str()),
    )?;
    write_lines(
        &dir.join("train.tgt"),
        corpus.pairs.iter().map(|p| p.1.as_str()),
    )?;
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let decode = resolve_decode(&file, &a.decode)?;
    let reverse = load_model(&a.reverse_model)?;
    let mono = read_lines(&a.mono)?;
    let original = match (&a.orig_src, &a.orig_tgt) {
        (Some(s), Some(t)) => ParallelCorpus::load(s, t)?,
        _ => ParallelCorpus::default(),
    };
    let cfg = DistillConfig {
        decode: decode.clone(),
        mix_original: a.mix,
        sample_size: 0,
        seed: a.seed.unwrap_or(0),
    };
    let (mixed, report) = back_translate(
        &reverse.weights,
        &reverse.src_vocab,
        &reverse.tgt_vocab,
        &mono,
        &cfg,
        &original,
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_corpus(&a.out, &mixed)?;
    write_json(
        &a.out.join(GENERATION_FILE),
        &GenerationRecord {
            kind: "back_translation".into(),
            model: reverse.path.clone(),
            decode,
            mix_original: a.mix,
            report: report.clone(),
        },
    )?;
    write_json(&a.out.join("config.json"), &cfg)?;
    eprintln!(
        "{} pairs written ({} back-translated, {} skipped)",
        mixed.len(),
        report.produced,
        report.skipped.len()
    );
    Ok(())
}

fn average_cmd(a: AverageArgs) -> Result<()> {
    if a.last < 1 {
        return Err(usage("--last must be at least 1"));
    }
    let dir = if a.dir.join("checkpoints").is_dir() {
        a.dir.join("checkpoints")
    } else {
        a.dir.clone()
    };
    let all = list_checkpoints(&dir)?;
    if all.len() < a.last {
        bail!(
            "{} holds {} checkpoints, fewer than --last {}",
            dir.display(),
            all.len(),
            a.last
        );
    }
    let chosen = &all[all.len() - a.last..];
    let mut avg = average_checkpoint_files(chosen)?;
    avg.provenance.averaged_from = Some(a.last);
    avg.save(&a.out)?;
    let mut echo = a.out.clone().into_os_string();
    echo.push(".config.json");
    write_json(
        Path::new(&echo),
        &serde_json::json!({ "checkpoints": chosen, "step": avg.step }),
    )?;
    eprintln!(
        "averaged {} checkpoints into {}",
        chosen.len(),
        a.out.display()
    );
    Ok(())
}

fn bleu_cmd(a: BleuArgs) -> Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let report = bleu(&hyps, &refs, a.order, a.lowercase).map_err(|e| usage(e.to_string()))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let precisions: Vec<String> = report
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        println!(
            "BLEU = {:.2} {} (BP = {:.3}, hyp_len = {}, ref_len = {})",
            report.bleu,
            precisions.join("/"),
            report.brevity_penalty,
            report.hyp_len,
            report.ref_len
        );
    }
    Ok(())
}

fn significance_cmd(a: SignificanceArgs) -> Result<()> {
    let ha = read_lines(&a.hyp_a)?;
    let hb = read_lines(&a.hyp_b)?;
    let refs = read_lines(&a.reference)?;
    if !(a.p > 0.0 && a.p < 1.0) {
        return Err(usage("--p must be in (0, 1)"));
    }
    let s = bootstrap_significance(&ha, &hb, &refs, a.resamples, a.p, a.seed.unwrap_or(0))
        .map_err(|e| usage(e.to_string()))?;
    let (ba, bb) = (
        bleu(&ha, &refs, 4, false)?.bleu,
        bleu(&hb, &refs, 4, false)?.bleu,
    );
    let verdict = match s.better {
        Better::A => "A is better",
        Better::B => "B is better",
        Better::Tie => "no significant difference",
    };
    println!("BLEU A = {ba:.2}\tBLEU B = {bb:.2}");
    println!(
        "{verdict} (p = {:.4}; wins A {}, B {}, ties {} of {})",
        s.p_value, s.wins_a, s.wins_b, s.ties, s.resamples
    );
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut layers = Layers::new(model_defaults());
    layers
        .set("src_vocab_size", Some(default_vocab()))
        .set("tgt_vocab_size", Some(default_vocab()))
        .overlay(&file.model);
    apply_model_flags(&mut layers, &a.model);
    layers
        .set("src_vocab_size", a.src_vocab)
        .set("tgt_vocab_size", a.tgt_vocab);
    let base: ModelConfig = layers.resolve("model")?;
    validate_model(&base)?;
    if a.max_depth < 1 {
        return Err(usage("--max-depth must be at least 1"));
    }
    println!("model\tencoder_layers\tdecoder_layers\tstored_layers\tparameters");
    let mut rows: Vec<StackingMode> = (1..=a.max_depth).map(StackingMode::vanilla).collect();
    rows.extend((1..=a.max_depth).map(StackingMode::recurrent));
    if !rows.contains(&base.stacking) {
        rows.push(base.stacking);
    }
    for stacking in rows {
        let cfg = base.with_stacking(stacking);
        let name = match stacking {
            StackingMode::Vanilla { encoder_layers, .. } => format!("vanilla-{encoder_layers}"),
            StackingMode::Recurrent { recurrences } => format!("rs-{recurrences}"),
        };
        println!(
            "{name}\t{}\t{}\t{}\t{}",
            stacking.encoder_depth(),
            stacking.decoder_depth(),
            stacking.stored_encoder_layers() + stacking.stored_decoder_layers(),
            count_parameters(&cfg)
        );
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let range = parse_range(&a.range)?;
    let file = FileConfig::load(a.config.as_deref())?;
    let cfg = resolve_decode(&file, &a.decode)?;
    let model = load_model(&a.model)?;
    if !model.weights.config.stacking.is_recurrent() {
        return Err(usage("sweep-recurrence needs a recurrent model"));
    }
    let sources = read_lines(&a.src)?;
    let refs = read_lines(&a.reference)?;
    if sources.len() != refs.len() {
        return Err(usage(format!(
            "{} sources vs {} references",
            sources.len(),
            refs.len()
        )));
    }
    let rows = recurrence_sweep(
        &model.weights,
        &model.src_vocab,
        &model.tgt_vocab,
        &sources,
        &refs,
        range,
        &cfg,
    )?;
    let mut table = String::from("dec_recurrences\tbleu\tseconds\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{:.2}\t{:.3}\n",
            r.dec_recurrences, r.bleu, r.seconds
        ));
    }
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("sweep.tsv"), &table)?;
        write_json(
            &out.join("config.json"),
            &serde_json::json!({ "model": model.path, "range": a.range, "decode": cfg }),
        )?;
    }
    Ok(())
}
