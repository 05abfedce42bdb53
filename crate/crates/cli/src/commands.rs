//! Subcommand bodies. Anything that fails while reading configuration or
//! inputs exits with 2; failures after inputs are accepted exit with 3.

use std::fs;
use std::path::{Path, PathBuf};

use semperturb::campaign::{parse_teacher_outputs, teacher_outputs_to_string, write_output, CampaignConfig};
use semperturb::classifier::{distill as distill_model, teacher_outputs, train as train_model, ClassifierModel};
use semperturb::corpus::Corpus;
use semperturb::evaluation::{transfer_eval, AdvDataset};
use semperturb::perturb::PerturbFn;
use semperturb::synth::{clustered_resources, generate, SyntheticSpec};
use semperturb::vocab::{load_vocabulary, Vocabulary};
use semperturb::{audit_spaces, run_campaign, Error};

pub struct Failure {
    pub code: u8,
    pub error: Error,
}

pub type Outcome = Result<(), Failure>;

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 3, error }
}

fn output_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| usage(Error::Config(format!("no output path for the {what}"))))
}

/// Config, vocabulary and corpus, with labels checked against the class count.
fn load_inputs(config: &Path) -> Result<(CampaignConfig, Vocabulary, Corpus), Failure> {
    let cfg = CampaignConfig::load(config).map_err(usage)?;
    let vocab = cfg.load_vocab().map_err(usage)?;
    let corpus = cfg.load_corpus().map_err(usage)?;
    if corpus.is_empty() {
        return Err(usage(Error::EmptyDataset));
    }
    Ok((cfg, vocab, corpus))
}

fn check_labels(corpus: &Corpus, classes: usize) -> Result<(), Failure> {
    match corpus.sentences.iter().find(|s| s.label >= classes) {
        Some(s) => Err(usage(Error::LabelOutOfRange { label: s.label, classes })),
        None => Ok(()),
    }
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<ClassifierModel, Failure> {
    let model = ClassifierModel::load(path).map_err(usage)?;
    model.check_vocab(vocab).map_err(usage)?;
    Ok(model)
}

pub fn train(config: &Path, out: Option<PathBuf>) -> Outcome {
    let (cfg, vocab, corpus) = load_inputs(config)?;
    let out = output_path(out, &cfg.output.model, "model")?;
    check_labels(&corpus, cfg.model.classes)?;
    let shape = cfg.model.shape(&vocab);
    let mut model = ClassifierModel::random(shape, &vocab, cfg.train.init_scale, cfg.train.seed).map_err(usage)?;
    let report = train_model(&mut model, &corpus.ids(&vocab), &corpus.labels(), &cfg.train).map_err(runtime)?;
    model.save(&out).map_err(runtime)?;
    println!("final_loss = {:.6}", report.loss_curve.last().copied().unwrap_or(f64::NAN));
    println!("accuracy = {:.6}", report.accuracy);
    Ok(())
}

pub fn distill(config: &Path, teacher: &Path, out: Option<PathBuf>, soft_out: Option<PathBuf>) -> Outcome {
    let (cfg, vocab, corpus) = load_inputs(config)?;
    let out = output_path(out, &cfg.output.model, "student model")?;
    let soft_out = output_path(soft_out, &cfg.output.teacher_outputs, "teacher outputs")?;
    let teacher = load_model(teacher, &vocab)?;
    let inputs = corpus.ids(&vocab);
    let soft = teacher_outputs(&teacher, &inputs).map_err(runtime)?;
    write_output(&soft_out, teacher_outputs_to_string(&soft)).map_err(runtime)?;
    // the student learns from the file, exactly as a black-box teacher would provide it
    let text = fs::read_to_string(&soft_out).map_err(|e| runtime(Error::Io { path: soft_out.clone(), source: e }))?;
    let soft = parse_teacher_outputs(&text, inputs.len(), teacher.classes(), &soft_out).map_err(runtime)?;
    let mut shape = cfg.model.shape(&vocab);
    shape.classes = teacher.classes();
    let mut student = ClassifierModel::random(shape, &vocab, cfg.train.init_scale, cfg.train.seed).map_err(usage)?;
    let report = distill_model(&mut student, &inputs, &soft, &cfg.train).map_err(runtime)?;
    student.save(&out).map_err(runtime)?;
    println!("final_loss = {:.6}", report.loss_curve.last().copied().unwrap_or(f64::NAN));
    println!("agreement = {:.6}", report.agreement);
    Ok(())
}

pub fn attack(
    config: &Path,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    report_out: Option<PathBuf>,
    parallelism: Option<usize>,
) -> Outcome {
    let (cfg, vocab, corpus) = load_inputs(config)?;
    let out = output_path(out, &cfg.output.dataset, "adversarial dataset")?;
    let report_out = report_out.or_else(|| cfg.output.report.clone());
    let model_path = match model {
        Some(p) => p,
        None => cfg.model_path().map_err(usage)?.to_path_buf(),
    };
    let model = load_model(&model_path, &vocab)?;
    let builder = cfg.space_builder(&vocab, Some(&model)).map_err(usage)?;
    let parallelism = parallelism.unwrap_or(cfg.run.parallelism);
    if parallelism == 0 {
        return Err(usage(Error::Config("parallelism must be at least 1".into())));
    }
    let result = run_campaign(&model, &builder, &corpus, &cfg.attack, parallelism).map_err(runtime)?;
    eprint!("{}", result.rejection_log());
    write_output(&out, result.dataset.to_file_string(&vocab)).map_err(runtime)?;
    let report = result.report.to_kv_string();
    if let Some(path) = report_out {
        write_output(&path, &report).map_err(runtime)?;
    }
    if let Some(path) = &cfg.output.table {
        write_output(path, result.report.to_csv()).map_err(runtime)?;
    }
    print!("{report}");
    Ok(())
}

pub fn transfer(
    dataset: &Path,
    model: &Path,
    vocab: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Outcome {
    let vocab = match (vocab, config) {
        (Some(v), _) => load_vocabulary(v).map_err(usage)?,
        (None, Some(c)) => CampaignConfig::load(c).and_then(|cfg| cfg.load_vocab()).map_err(usage)?,
        (None, None) => return Err(usage(Error::Config("need --vocab or --config".into()))),
    };
    let dataset = AdvDataset::load(dataset, &vocab).map_err(usage)?;
    let model = ClassifierModel::load(model).map_err(usage)?;
    let report = transfer_eval(&dataset, &model).map_err(|e| match e {
        Error::VocabMismatch(_) | Error::LabelOutOfRange { .. } => usage(e),
        other => runtime(other),
    })?;
    let text = report.to_kv_string();
    if let Some(path) = out {
        write_output(&path, &text).map_err(runtime)?;
    }
    print!("{text}");
    Ok(())
}

pub fn audit(config: &Path, out: Option<PathBuf>) -> Outcome {
    let (cfg, vocab, corpus) = load_inputs(config)?;
    let model = match &cfg.resources.model {
        Some(p) if cfg.perturb.static_fallback => Some(load_model(p, &vocab)?),
        _ => None,
    };
    let builder = cfg.space_builder(&vocab, model.as_ref()).map_err(usage)?;
    let stats = audit_spaces(&builder, &corpus).map_err(runtime)?;
    let text = stats.to_kv_string();
    if let Some(path) = out.or_else(|| cfg.output.spaces_report.clone()) {
        write_output(&path, &text).map_err(runtime)?;
    }
    print!("{text}");
    Ok(())
}

pub fn gen_synthetic(dir: &Path, seed: u64, sentences: usize, vocab_size: usize) -> Outcome {
    let spec = SyntheticSpec {
        sentences,
        vocab_size,
        seed,
        ..SyntheticSpec::default()
    };
    if spec.vocab_size <= 2 * spec.keyword_pairs + 1 {
        return Err(usage(Error::Config(format!(
            "vocab_size must exceed {}",
            2 * spec.keyword_pairs + 1
        ))));
    }
    let task = generate(&spec);
    let res = clustered_resources(&task, seed);
    let mut cfg = CampaignConfig::default();
    cfg.resources.vocab = Some("vocab.txt".into());
    cfg.resources.corpus = Some("corpus.tsv".into());
    cfg.resources.model = Some("model.bin".into());
    cfg.resources.index = Some("index.txt".into());
    cfg.resources.side_vectors = Some("side_vectors.txt".into());
    cfg.resources.synonyms = Some("synonyms.tsv".into());
    cfg.perturb.functions = vec![PerturbFn::Typo, PerturbFn::Knowledge, PerturbFn::Contextual];
    cfg.perturb.k = res.k;
    cfg.perturb.eps = res.eps;
    cfg.train.seed = seed;
    cfg.attack.seed = seed;
    cfg.output.model = Some("model.bin".into());
    cfg.output.dataset = Some("adv.tsv".into());
    cfg.output.report = Some("report.txt".into());
    cfg.output.table = Some("report.csv".into());
    cfg.output.teacher_outputs = Some("teacher_outputs.tsv".into());
    cfg.output.spaces_report = Some("spaces.txt".into());
    let files = [
        ("vocab.txt", task.vocab.to_file_string()),
        ("corpus.tsv", task.corpus.to_file_string()),
        ("index.txt", res.index.to_file_string(&task.vocab)),
        ("side_vectors.txt", res.side.to_file_string()),
        ("synonyms.tsv", res.kb.to_file_string()),
        ("config.toml", cfg.to_toml_string().map_err(runtime)?),
    ];
    for (name, contents) in files {
        write_output(&dir.join(name), contents).map_err(runtime)?;
    }
    println!("wrote {} sentences over {} tokens to {}", task.corpus.len(), task.vocab.len(), dir.display());
    Ok(())
}
