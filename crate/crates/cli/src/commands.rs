use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use disambig_core::baselines::{kbr_rewrite, ReplacementDictionary};
use disambig_core::corpus::{generate_synthetic, load_corpus, split, write_corpus, SplitSpec, SyntheticSpec};
use disambig_core::detect::{
    train_ambiguity_classifier, train_decision_classifier, train_label_classifier, ClassifierConfig, DetectError,
    LabelTarget,
};
use disambig_core::eval::{
    build_report, render_table, ambiguity_delta, decision_delta, mean_pll, pathology_match, train_pll_scorer,
    ClusterLabeler, EvalError, Measured, MetricInputs, MlmConfig, PathologyLabeler, RuleLabeler,
};
use disambig_core::fingerprint::json_fingerprint;
use disambig_core::nnkit::checkpoint::{Checkpoint, Persist};
use disambig_core::nnkit::{EncoderClassifier, MaskedLm, NnError, Seq2Seq, Tokenizer};
use disambig_core::pretrain::{pretrain_run, write_loss_log, PretrainConfig, PretrainError};
use disambig_core::pseudolabel::{assign_pseudolabels, fit_cluster_model, ClusterModel, PseudolabelConfig};
use disambig_core::rewrite::{rewrite, Decision, RewriteConfig, RewriteError, RewriteModels};
use disambig_core::{Corpus, CorpusError, ReportSentence, Schema};
use disambig_service::store::Store;
use disambig_service::{AppState, ModelSet};
use serde::{Deserialize, Serialize};

use crate::manifest::{artifact_fingerprint, read_manifest, write, Loaded, Run};
use crate::{
    Cli, ClfKind, Command, EvalArgs, EvalTarget, GenSyntheticArgs, KbrArgs, LabelerKind, PretrainArgs, PseudolabelArgs,
    RewriteArgs, Select, ServeArgs, TrainClfArgs,
};
use crate::CliError;

pub const REWRITES_FILE: &str = "rewrites.jsonl";

/// One line of `rewrites.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub id: String,
    pub original: String,
    pub rewrite: String,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a, config, cli.seed),
        Command::Pretrain(a) => pretrain(a, config, cli.seed),
        Command::Pseudolabel(a) => pseudolabel(a, config, cli.seed),
        Command::TrainClf(a) => train_clf(a, config, cli.seed),
        Command::Rewrite(a) => rewrite_cmd(a, config),
        Command::Kbr(a) => kbr(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a, config),
    }
}

fn corpus_error(path: &Path, e: CorpusError) -> CliError {
    CliError::validation(format!("{}: {e}", path.display()))
}

fn read_corpus(path: &Path, schema: Schema) -> Result<Corpus, CliError> {
    load_corpus(path, schema).map_err(|e| corpus_error(path, e))
}

fn save_corpus(path: &Path, corpus: &Corpus) -> Result<(), CliError> {
    write_corpus(path, corpus).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn tokenizer(vocab: Option<&Path>, corpus: &Corpus) -> Result<Tokenizer, CliError> {
    match vocab {
        Some(p) => Tokenizer::load(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display()))),
        None => Tokenizer::build(corpus, 1).map_err(|e| CliError::validation(e.to_string())),
    }
}

fn load_checkpoint<M: Persist>(path: &Path) -> Result<Checkpoint<M>, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::validation(format!("checkpoint {}: {e}", path.display())))
}

fn save_checkpoint<M: Persist>(ckpt: &Checkpoint<M>, dir: &Path) -> Result<(), CliError> {
    ckpt.save(dir).map_err(|e| CliError::runtime(format!("saving {}: {e}", dir.display())))
}

fn nn_error(e: NnError) -> CliError {
    match e {
        NnError::LengthExceeded { .. } | NnError::EmptyInput | NnError::EmptyCorpus => CliError::validation(e.to_string()),
        _ => CliError::runtime(e.to_string()),
    }
}

fn selected(corpus: &Corpus, select: Select) -> Vec<ReportSentence> {
    corpus
        .sentences()
        .iter()
        .filter(|s| s.relevant && (select == Select::Relevant || s.ambiguous == Some(true)))
        .cloned()
        .collect()
}

fn gen_synthetic(args: GenSyntheticArgs, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let mut loaded = Loaded::from(config, SyntheticSpec::default())?;
    if let Some(n) = args.n {
        loaded.value.n = n;
    }
    loaded.value.seed = loaded.seed(seed, "/seed", loaded.value.seed)?;
    let spec = loaded.value;
    let corpus = generate_synthetic(&spec).map_err(|e| CliError::validation(e.to_string()))?;
    let split_spec = SplitSpec::standard(spec.seed);
    let (train, val, test) = split(&corpus, &split_spec).map_err(|e| CliError::validation(e.to_string()))?;
    let vocab = Tokenizer::build(&corpus, 1).map_err(nn_error)?;

    let mut run = Run::start("gen-synthetic", &args.out)?;
    run.config(&serde_json::json!({ "synthetic": spec, "split": split_spec }));
    run.seed("corpus", spec.seed);
    run.seed("split", split_spec.seed);
    for (name, c) in [("corpus", &corpus), ("train", &train), ("val", &val), ("test", &test)] {
        let path = args.out.join(format!("{name}.jsonl"));
        save_corpus(&path, c)?;
        run.output(name, &path);
    }
    let vocab_path = args.out.join("vocab.txt");
    vocab.save(&vocab_path).map_err(|e| CliError::runtime(e.to_string()))?;
    run.output("vocab", &vocab_path);
    println!("{} sentences: train {}, val {}, test {}", corpus.len(), train.len(), val.len(), test.len());
    run.finish()
}

fn pretrain(args: PretrainArgs, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let mut loaded = Loaded::from(config, PretrainConfig::default())?;
    let c = &mut loaded.value;
    if let Some(v) = args.tau {
        c.tau = v;
    }
    if let Some(v) = args.lambda1 {
        c.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        c.lambda2 = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    loaded.value.seed = loaded.seed(seed, "/seed", loaded.value.seed)?;
    let cfg = loaded.value;
    let corpus = read_corpus(&args.corpus, Schema::Pretrain)?;
    let tok = tokenizer(args.vocab.as_deref(), &corpus)?;

    let mut run = Run::start("pretrain", &args.out)?;
    run.config(&cfg);
    run.seed("pretrain", cfg.seed);
    run.input("corpus", &args.corpus)?;
    if let Some(v) = &args.vocab {
        run.input("vocab", v)?;
    }
    let out = pretrain_run(&corpus, &tok, &cfg).map_err(|e| match e {
        PretrainError::InvalidConfig(_) | PretrainError::MissingLabels(_) => CliError::validation(e.to_string()),
        PretrainError::Nn(e) => nn_error(e),
        _ => CliError::runtime(e.to_string()),
    })?;
    save_checkpoint(&out.checkpoint, &args.out)?;
    let log = args.out.join("loss.csv");
    write_loss_log(&log, &out.log).map_err(|e| CliError::runtime(e.to_string()))?;
    run.output("checkpoint", &args.out);
    if let Some(last) = out.log.last() {
        println!("step {}: infill {:.4}, contrastive {:.4}, total {:.4}", last.step, last.l_bart, last.l_cl, last.total);
    }
    run.finish()
}

fn pseudolabel(args: PseudolabelArgs, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let mut loaded = Loaded::from(config, PseudolabelConfig::default())?;
    if let Some(k) = args.k {
        loaded.value.k = k;
    }
    if let Some(d) = args.dim {
        loaded.value.dim = d;
    }
    loaded.value.seed = loaded.seed(seed, "/seed", loaded.value.seed)?;
    let cfg = loaded.value;
    let corpus = read_corpus(&args.corpus, Schema::Pretrain)?;
    let generator: Checkpoint<Seq2Seq> = load_checkpoint(&args.generator)?;

    let mut run = Run::start("pseudolabel", &args.out)?;
    run.config(&cfg);
    run.seed("clustering", cfg.seed);
    run.input("corpus", &args.corpus)?;
    run.input("generator", &args.generator)?;
    let model = fit_cluster_model(&corpus, &generator.model, &generator.tokenizer, &cfg)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let labeled = assign_pseudolabels(&corpus, &model).map_err(|e| CliError::validation(e.to_string()))?;
    let model_path = args.out.join("cluster_model.json");
    write(&model_path, &format!("{}\n", serde_json::to_string(&model).expect("cluster model serializes")))?;
    let corpus_path = args.out.join("corpus.jsonl");
    save_corpus(&corpus_path, &labeled)?;
    run.output("cluster_model", &model_path);
    run.output("corpus", &corpus_path);
    println!("k = {}, silhouette {:.4}, log-likelihood {:.4}", cfg.k, model.silhouette, model.log_likelihood);
    run.finish()
}

fn detect_error(e: DetectError) -> CliError {
    match e {
        DetectError::Nn(e) => nn_error(e),
        DetectError::MissingLabels { .. } | DetectError::InvalidPolicy(_) | DetectError::EmptyContent => {
            CliError::validation(e.to_string())
        }
    }
}

fn train_clf(args: TrainClfArgs, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let target = match (args.kind, args.target) {
        (ClfKind::Eval, None) => return Err(CliError::validation("--kind eval needs --target")),
        (ClfKind::Eval, Some(t)) => Some(t),
        (_, Some(_)) => return Err(CliError::validation("--target only applies to --kind eval")),
        (_, None) => None,
    };
    let train = read_corpus(&args.train, Schema::Labeled)?;
    let tok = tokenizer(args.vocab.as_deref(), &train)?;
    let role = match (args.kind, target) {
        (ClfKind::Ambiguity, _) => "ambiguity",
        (ClfKind::Decision, _) => "decision",
        (_, Some(EvalTarget::Ambiguity)) => "eval-ambiguity",
        (_, Some(EvalTarget::Abnormality)) => "eval-abnormality",
        (_, Some(EvalTarget::Mlm)) => "mlm",
        (ClfKind::Eval, None) => unreachable!("checked above"),
    };
    let mut run = Run::start("train-clf", &args.out)?;
    run.input("train", &args.train)?;
    if let Some(v) = &args.vocab {
        run.input("vocab", v)?;
    }

    if target == Some(EvalTarget::Mlm) {
        let mut loaded = Loaded::from(config, MlmConfig::default())?;
        override_train(&mut loaded.value.train, &args);
        loaded.value.train.seed = loaded.seed(seed, "/train/seed", loaded.value.train.seed)?;
        let cfg = loaded.value;
        run.config(&serde_json::json!({ "role": role, "mlm": cfg }));
        run.seed(role, cfg.train.seed);
        let ckpt = train_pll_scorer(&train, &tok, &cfg).map_err(|e| match e {
            EvalError::Nn(e) => nn_error(e),
            e => CliError::runtime(e.to_string()),
        })?;
        save_checkpoint(&ckpt, &args.out)?;
        run.output("checkpoint", &args.out);
        println!("{role}: {:?}", ckpt.info.metrics);
        return run.finish();
    }

    let val_path = args.val.as_deref().ok_or_else(|| CliError::validation("--val is required for classifiers"))?;
    let val = read_corpus(val_path, Schema::Labeled)?;
    run.input("val", val_path)?;
    let mut loaded = Loaded::from(config, ClassifierConfig::default())?;
    override_train(&mut loaded.value.train, &args);
    loaded.value.train.seed = loaded.seed(seed, "/train/seed", loaded.value.train.seed)?;
    let cfg = loaded.value;
    run.config(&serde_json::json!({ "role": role, "classifier": cfg }));
    run.seed(role, cfg.train.seed);
    let ckpt = match (args.kind, target) {
        (ClfKind::Ambiguity, _) => train_ambiguity_classifier(&train, &val, &tok, &cfg),
        (ClfKind::Decision, _) => train_decision_classifier(&train, &val, &tok, &cfg),
        (_, Some(EvalTarget::Ambiguity)) => train_label_classifier(&train, &val, &tok, LabelTarget::Ambiguity, role, &cfg),
        _ => train_label_classifier(&train, &val, &tok, LabelTarget::Abnormality, role, &cfg),
    }
    .map_err(detect_error)?;
    save_checkpoint(&ckpt, &args.out)?;
    run.output("checkpoint", &args.out);
    println!("{role}: {:?}", ckpt.info.metrics);
    run.finish()
}

fn override_train(train: &mut disambig_core::nnkit::train::TrainConfig, args: &TrainClfArgs) {
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.lr {
        train.lr = lr;
    }
}

fn rewrite_error(e: RewriteError) -> CliError {
    match e {
        RewriteError::Nn(e) => nn_error(e),
        RewriteError::NonFiniteGradient(_) => CliError::runtime(e.to_string()),
        e => CliError::validation(e.to_string()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    write(path, &text)
}

fn gold_decision(s: &ReportSentence) -> Result<Decision, CliError> {
    s.abnormal
        .map(Decision::from_abnormal)
        .ok_or_else(|| CliError::validation(format!("sentence `{}` has no abnormal label", s.id)))
}

fn rewrite_cmd(args: RewriteArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut loaded = Loaded::from(config, RewriteConfig::default())?;
    loaded.value.mode = args.mode;
    if let Some(it) = args.iterations {
        loaded.value.iterations = it;
    }
    let cfg = loaded.value;
    cfg.validate().map_err(rewrite_error)?;
    if args.mode.uses_detect() && args.detector.is_none() {
        return Err(CliError::validation(format!("mode {} needs --detector", args.mode.name())));
    }
    let corpus = read_corpus(&args.input, Schema::Labeled)?;
    let generator = load_checkpoint(&args.generator)?;
    let detector = match (&args.detector, args.mode.uses_detect()) {
        (Some(p), true) => Some(load_checkpoint(p)?),
        _ => None,
    };
    let decision = load_checkpoint(&args.decision)?;
    let models = RewriteModels::new(generator, detector, decision).map_err(rewrite_error)?;

    let mut run = Run::start("rewrite", &args.out)?;
    run.config(&cfg);
    run.input("input", &args.input)?;
    run.input("generator", &args.generator)?;
    if let (Some(p), true) = (&args.detector, args.mode.uses_detect()) {
        run.input("detector", p)?;
    }
    run.input("decision", &args.decision)?;
    let mut traces = Vec::new();
    let mut records = Vec::new();
    for s in selected(&corpus, args.select) {
        let trace = rewrite(&s, gold_decision(&s)?, &models, &cfg).map_err(|e| match rewrite_error(e) {
            CliError::Validation(m) => CliError::validation(format!("sentence `{}`: {m}", s.id)),
            other => other,
        })?;
        records.push(RewriteRecord { id: s.id.clone(), original: s.text.clone(), rewrite: trace.output.clone() });
        traces.push(trace);
    }
    if records.is_empty() {
        return Err(CliError::validation("no sentences selected"));
    }
    let traces_path = args.out.join("traces.jsonl");
    let rewrites_path = args.out.join(REWRITES_FILE);
    write_jsonl(&traces_path, &traces)?;
    write_jsonl(&rewrites_path, &records)?;
    run.output("traces", &traces_path);
    run.output("rewrites", &rewrites_path);
    println!("rewrote {} sentences with mode {}", records.len(), cfg.mode.name());
    run.finish()
}

fn kbr(args: KbrArgs) -> Result<(), CliError> {
    let dict = match &args.dictionary {
        Some(p) => ReplacementDictionary::load(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
        None => ReplacementDictionary::shipped(),
    };
    let corpus = read_corpus(&args.input, Schema::Labeled)?;
    let mut run = Run::start("kbr", &args.out)?;
    run.config(&serde_json::json!({ "dictionary_entries": dict.len(), "shipped_dictionary": args.dictionary.is_none() }));
    run.input("input", &args.input)?;
    if let Some(p) = &args.dictionary {
        run.input("dictionary", p)?;
    }
    let records: Vec<RewriteRecord> = selected(&corpus, args.select)
        .into_iter()
        .map(|s| RewriteRecord { rewrite: kbr_rewrite(&s.text, &dict), original: s.text, id: s.id })
        .collect();
    if records.is_empty() {
        return Err(CliError::validation("no sentences selected"));
    }
    let path = args.out.join(REWRITES_FILE);
    write_jsonl(&path, &records)?;
    run.output("rewrites", &path);
    println!("rewrote {} sentences", records.len());
    run.finish()
}

fn read_rewrites(path: &Path) -> Result<(PathBuf, Vec<RewriteRecord>), CliError> {
    let file = if path.is_dir() { path.join(REWRITES_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| CliError::validation(format!("{}: {e}", file.display())))?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::validation(format!("{} line {}: {e}", file.display(), i + 1)))
        })
        .collect::<Result<_, _>>()?;
    Ok((file, rows))
}

fn mismatch(what: &str, expected: &str, found: &str) -> CliError {
    CliError::validation(format!("{what} fingerprint mismatch: expected {expected}, found {found}"))
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Nn(e) => nn_error(e),
        e => CliError::validation(e.to_string()),
    }
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.corpus, Schema::Labeled)?;
    let (originals, rewrites, system, rewrites_file) = if args.identity {
        let originals = selected(&corpus, args.select);
        let texts = originals.iter().map(|s| s.text.clone()).collect();
        (originals, texts, "identity".to_owned(), None)
    } else {
        let path = args.rewrites.as_deref().expect("clap enforces --rewrites without --identity");
        let (file, rows) = read_rewrites(path)?;
        let manifest = read_manifest(&file);
        if let Some(expected) = manifest.as_ref().and_then(|m| m["fingerprints"]["input:input"].as_str()) {
            let found = artifact_fingerprint(&args.corpus).map_err(|e| CliError::validation(e.to_string()))?;
            if found != expected {
                return Err(mismatch("corpus (vs. the rewrites' input)", expected, &found));
            }
        }
        let system = manifest
            .as_ref()
            .map(|m| match m["command"].as_str() {
                Some("rewrite") => m["config"]["mode"].as_str().unwrap_or("rewrite").to_owned(),
                Some(other) => other.to_owned(),
                None => "system".to_owned(),
            })
            .unwrap_or_else(|| "system".to_owned());
        let mut originals = Vec::with_capacity(rows.len());
        let mut texts = Vec::with_capacity(rows.len());
        for r in rows {
            let s = corpus
                .get(&r.id)
                .ok_or_else(|| CliError::validation(format!("rewrite for unknown sentence `{}`", r.id)))?;
            originals.push(s.clone());
            texts.push(r.rewrite);
        }
        (originals, texts, system, Some(file))
    };
    let system = args.system.clone().unwrap_or(system);

    let ambiguity: Checkpoint<EncoderClassifier> = load_checkpoint(&args.ambiguity_clf)?;
    let abnormality: Checkpoint<EncoderClassifier> = load_checkpoint(&args.abnormality_clf)?;
    let mlm: Checkpoint<MaskedLm> = load_checkpoint(&args.mlm)?;
    let expected = ambiguity.tokenizer.fingerprint();
    for (what, tok) in [("abnormality classifier tokenizer", &abnormality.tokenizer), ("mlm tokenizer", &mlm.tokenizer)] {
        let found = tok.fingerprint();
        if found != expected {
            return Err(mismatch(what, &expected, &found));
        }
    }

    let mut run = Run::start("eval", &args.out)?;
    run.input("corpus", &args.corpus)?;
    if let Some(f) = &rewrites_file {
        run.input("rewrites", f)?;
    }
    run.input("ambiguity_clf", &args.ambiguity_clf)?;
    run.input("abnormality_clf", &args.abnormality_clf)?;
    run.input("mlm", &args.mlm)?;

    let cluster_parts = match args.labeler {
        LabelerKind::Rule => None,
        LabelerKind::Cluster => {
            let (Some(model_path), Some(gen_path)) = (&args.cluster_model, &args.generator) else {
                return Err(CliError::validation("--labeler cluster needs --cluster-model and --generator"));
            };
            let text = std::fs::read_to_string(model_path)
                .map_err(|e| CliError::validation(format!("{}: {e}", model_path.display())))?;
            let model: ClusterModel =
                serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", model_path.display())))?;
            let generator: Checkpoint<Seq2Seq> = load_checkpoint(gen_path)?;
            let found = disambig_core::fingerprint::sha256_hex(
                &generator.model.params.flatten().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
            );
            if found != model.generator_fingerprint {
                return Err(mismatch("cluster-model generator", &model.generator_fingerprint, &found));
            }
            run.input("cluster_model", model_path)?;
            run.input("generator", gen_path)?;
            Some((model, generator))
        }
    };
    let cluster_labeler = cluster_parts.as_ref().map(|(clusters, generator)| ClusterLabeler {
        clusters,
        generator: &generator.model,
        tokenizer: &generator.tokenizer,
    });
    let labeler: &dyn PathologyLabeler = match &cluster_labeler {
        Some(l) => l,
        None => &RuleLabeler,
    };
    let labeler_name = match args.labeler {
        LabelerKind::Rule => "rule",
        LabelerKind::Cluster => "cluster",
    };
    run.config(&serde_json::json!({ "system": system, "labeler": labeler_name, "identity": args.identity, "select": format!("{:?}", args.select).to_lowercase() }));

    let n = originals.len();
    let texts: Vec<String> = originals.iter().map(|s| s.text.clone()).collect();
    let inputs = MetricInputs {
        delta_acc_am: Measured { value: ambiguity_delta(&originals, &rewrites, &ambiguity).map_err(eval_error)?, n },
        delta_acc_dis: Measured { value: decision_delta(&originals, &rewrites, &abnormality).map_err(eval_error)?, n },
        pathology_match: Measured { value: pathology_match(&texts, &rewrites, labeler).map_err(eval_error)?, n },
        pll: Measured { value: mean_pll(&rewrites, &mlm.model, &mlm.tokenizer).map_err(eval_error)?, n },
    };
    let fingerprint = json_fingerprint(&run_inputs(&args, rewrites_file.as_deref())?);
    let report = build_report(&system, &fingerprint, &inputs).map_err(eval_error)?;
    let report_path = args.out.join("report.json");
    write(&report_path, &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")))?;
    let table = render_table(&[report]);
    let table_path = args.out.join("table.txt");
    write(&table_path, &table)?;
    run.output("report", &report_path);
    run.output("table", &table_path);
    print!("{table}");
    run.finish()
}

/// Fingerprints of every artifact a report depends on.
fn run_inputs(args: &EvalArgs, rewrites: Option<&Path>) -> Result<BTreeMap<&'static str, String>, CliError> {
    let mut out = BTreeMap::new();
    let mut add = |name, p: &Path| -> Result<(), CliError> {
        out.insert(name, artifact_fingerprint(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?);
        Ok(())
    };
    add("corpus", &args.corpus)?;
    if let Some(r) = rewrites {
        add("rewrites", r)?;
    }
    add("ambiguity_clf", &args.ambiguity_clf)?;
    add("abnormality_clf", &args.abnormality_clf)?;
    add("mlm", &args.mlm)?;
    if let Some(p) = &args.cluster_model {
        add("cluster_model", p)?;
    }
    Ok(out)
}

fn serve(args: ServeArgs, config: Option<&Path>) -> Result<(), CliError> {
    let rewrite_config = Loaded::from(config, RewriteConfig::default())?.value;
    rewrite_config.validate().map_err(rewrite_error)?;
    let addr: std::net::SocketAddr =
        args.addr.parse().map_err(|e| CliError::validation(format!("--addr {}: {e}", args.addr)))?;
    let mut run = Run::start("serve", &args.state_dir)?;
    run.config(&serde_json::json!({ "addr": args.addr, "rewrite": rewrite_config, "budget_secs": args.budget_secs }));
    let models = match &args.decision {
        None => None,
        Some(decision_path) => {
            let mut generators = Vec::new();
            for g in &args.generator {
                generators.push(load_checkpoint(g)?);
                run.input(&format!("generator:{}", generators.len()), g)?;
            }
            let detector = match &args.detector {
                Some(p) => {
                    run.input("detector", p)?;
                    Some(load_checkpoint(p)?)
                }
                None => None,
            };
            run.input("decision", decision_path)?;
            let decision = load_checkpoint(decision_path)?;
            Some(ModelSet::new(generators, detector, decision).map_err(rewrite_error)?)
        }
    };
    let log = args.state_dir.join("events.jsonl");
    let store = Store::open(&log).map_err(|e| CliError::validation(format!("{}: {e}", log.display())))?;
    run.output("events", &log);
    run.finish()?;
    let state = AppState::new(store, models)
        .with_rewrite_config(rewrite_config)
        .with_time_budget(Duration::from_secs(args.budget_secs));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::runtime(format!("binding {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        println!("listening on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        disambig_service::serve(listener, Arc::new(state), shutdown).await.map_err(|e| CliError::runtime(e.to_string()))
    })
}
