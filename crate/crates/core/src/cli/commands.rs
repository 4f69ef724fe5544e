use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use super::{Command, EvalArgs, GenDataArgs, JudgeArgs, ReplayArgs, TrainArgs};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, judge_aggregate, Evaluation, JudgeSheet, RationaleSource};
use crate::objectives::{prepare, pretrain_vqa_only, train, Combinator, Mode};
use crate::rationale_lm::{LmConfig, LmParams};
use crate::synthdata::{build_dataset, load_vcr_records, DatasetSplit, FeatureSource, Vocabulary, VOCAB_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const LM_FILE: &str = "lm.json";
pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RATIONALES_FILE: &str = "rationales.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const JUDGE_CSV: &str = "judge.csv";
pub const JUDGE_JSON: &str = "judge.json";
pub const SWEEP_CSV: &str = "sweep.csv";

/// The six sweep cells, in output order.
pub const SWEEP_LOSSES: [(&str, Combinator); 6] = [
    ("lambda=1", Combinator::Weighted { lambda: 1.0 }),
    ("lambda=3", Combinator::Weighted { lambda: 3.0 }),
    ("lambda=10", Combinator::Weighted { lambda: 10.0 }),
    ("lambda=1000", Combinator::Weighted { lambda: 1000.0 }),
    ("var", Combinator::Uncertainty),
    ("kldiv", Combinator::Kldiv { beta: 1.0 }),
];

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    /// Files written by the command, relative to its output directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub config: Option<ExperimentConfig>,
}

/// Model shapes stored with each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub lm: Option<LmConfig>,
}

pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub lm: Option<LmParams>,
    pub vocabulary: Vocabulary,
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{what} {}", path.display());
    move |e| Error::io(ctx, e)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path, "writing"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(io_err(path, "reading"))?;
    serde_json::from_str(&s).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir, "creating"))
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<DatasetSplit> {
    match spec {
        DatasetSpec::Synthetic {
            n_train,
            n_val,
            master_seed,
        } => build_dataset(*n_train, *n_val, *master_seed),
        DatasetSpec::Files { dir } => DatasetSplit::load(dir),
        DatasetSpec::Vcr { train, val, features } => {
            let source = features.clone().map_or(FeatureSource::Hashed, FeatureSource::Sidecar);
            Ok(DatasetSplit::from_records(
                load_vcr_records(train, &source)?,
                load_vcr_records(val, &source)?,
            ))
        }
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let model: ModelFile = read_json(&dir.join(MODEL_FILE))?;
    let mut encoder = EncoderParams::new(model.encoder, 0)?;
    encoder.params.load(&dir.join(ENCODER_FILE))?;
    let lm = match model.lm {
        Some(c) => {
            let mut lm = LmParams::new(c, 0)?;
            lm.params.load(&dir.join(LM_FILE))?;
            Some(lm)
        }
        None => None,
    };
    Ok(Checkpoint {
        encoder,
        lm,
        vocabulary: Vocabulary::load(&dir.join(VOCAB_FILE))?,
    })
}

fn check_vocab(ckpt: &Vocabulary, data: &Vocabulary, dir: &Path) -> Result<()> {
    if ckpt != data {
        return Err(Error::Validation(format!(
            "vocabulary mismatch between checkpoint {} ({} tokens) and dataset ({} tokens)",
            dir.display(),
            ckpt.len(),
            data.len()
        )));
    }
    Ok(())
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        create_dir(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.dir.join(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn manifest(&mut self, mut m: Manifest) -> Result<()> {
        m.outputs = std::mem::take(&mut self.written);
        m.outputs.push(MANIFEST_FILE.to_string());
        write_file(&self.dir.join(MANIFEST_FILE), &pretty(&m))
    }
}

fn manifest(command: &str, args: &[String], config: Option<&ExperimentConfig>) -> Manifest {
    let mut seeds = BTreeMap::new();
    if let Some(c) = config {
        seeds.insert("train".to_string(), c.seed);
        if let DatasetSpec::Synthetic { master_seed, .. } = c.dataset {
            seeds.insert("dataset".to_string(), master_seed);
        }
    }
    Manifest {
        command: command.to_string(),
        args: args.to_vec(),
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        seeds,
        inputs: Vec::new(),
        outputs: Vec::new(),
        config: config.cloned(),
    }
}

pub(super) fn dispatch(cmd: Command, args: &[String]) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(&a, args).map(|_| 0),
        Command::Pretrain(a) => cmd_pretrain(&a, args).map(|_| 0),
        Command::Train(a) => cmd_train(&a, args).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(&a, args),
        Command::Eval(a) => cmd_eval(&a, args).map(|_| 0),
        Command::Judge(a) => cmd_judge(&a, args).map(|_| 0),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn gen_data(a: &GenDataArgs, args: &[String]) -> Result<()> {
    let (split, mut m) = match (&a.vcr_train, &a.vcr_val) {
        (Some(t), Some(v)) => {
            let spec = DatasetSpec::Vcr {
                train: t.clone(),
                val: v.clone(),
                features: a.features.clone(),
            };
            let mut m = manifest("gen-data", args, None);
            m.inputs = [Some(t.clone()), Some(v.clone()), a.features.clone()]
                .into_iter()
                .flatten()
                .collect();
            (load_dataset(&spec)?, m)
        }
        _ => {
            let mut m = manifest("gen-data", args, None);
            m.seeds.insert("dataset".to_string(), a.seed);
            (build_dataset(a.train, a.val, a.seed)?, m)
        }
    };
    create_dir(&a.out)?;
    split.save(&a.out)?;
    m.outputs = vec![
        crate::synthdata::TRAIN_FILE.to_string(),
        crate::synthdata::VAL_FILE.to_string(),
        VOCAB_FILE.to_string(),
        MANIFEST_FILE.to_string(),
    ];
    write_file(&a.out.join(MANIFEST_FILE), &pretty(&m))?;
    eprintln!(
        "wrote {} train / {} val records to {}",
        split.train.len(),
        split.val.len(),
        a.out.display()
    );
    Ok(())
}

/// Defaults, then the config file, then explicit flags.
fn resolve(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &a.data {
        c.dataset = DatasetSpec::Files { dir: d.clone() };
    }
    match &a.out {
        Some(o) => c.out_dir = o.clone(),
        None if a.config.is_none() => return Err(Error::Config("--out is required without --config".into())),
        None => {}
    }
    macro_rules! set {
        ($($field:ident <- $flag:expr),* $(,)?) => { $(if let Some(v) = $flag { c.$field = v; })* };
    }
    set!(mode <- a.mode, combinator <- a.loss, batch_size <- a.batch_size, lr <- a.lr,
         epochs <- a.epochs, seed <- a.seed, clip_norm <- a.clip_norm);
    if a.detach_answer_loss {
        c.detach_answer_loss = true;
    }
    let m = &mut c.model;
    for (slot, flag) in [
        (&mut m.d, a.d),
        (&mut m.layers, a.layers),
        (&mut m.d_lm, a.d_lm),
        (&mut m.layers_lm, a.layers_lm),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    c.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(c)
}

fn cmd_pretrain(a: &TrainArgs, args: &[String]) -> Result<()> {
    let c = resolve(a)?;
    let data = load_dataset(&c.dataset)?;
    let v = &data.vocabulary;
    let mut encoder = EncoderParams::new(c.model.encoder_config(v.len()), c.seed)?;
    let max_r = c.model.lm_config(v.len(), c.model.d).max_rationale_len();
    let tr = prepare(&data.train, v, max_r)?;
    let va = prepare(&data.val, v, max_r)?;
    let outcome = pretrain_vqa_only(&c.train_config(), &tr, &va, &mut encoder)?;

    let mut out = Outputs::new(&c.out_dir)?;
    out.text(CONFIG_FILE, &c.render())?;
    out.text(
        MODEL_FILE,
        &pretty(&ModelFile {
            encoder: encoder.config,
            lm: None,
        }),
    )?;
    out.text(ENCODER_FILE, &encoder.params.to_json())?;
    out.text(VOCAB_FILE, &v.to_json())?;
    out.text(HISTORY_FILE, &jsonl(&outcome.history))?;
    out.text(
        SUMMARY_FILE,
        &pretty(&serde_json::json!({ "best_epoch": outcome.best_epoch })),
    )?;
    let mut m = manifest("pretrain", args, Some(&c));
    m.inputs = input_paths(&c, None);
    out.manifest(m)?;
    eprintln!(
        "pretrained {} epochs, kept epoch {} (val accuracy {:.2})",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.history[outcome.best_epoch - 1].val_accuracy
    );
    Ok(())
}

fn input_paths(c: &ExperimentConfig, pretrained: Option<&Path>) -> Vec<PathBuf> {
    let mut v = match &c.dataset {
        DatasetSpec::Synthetic { .. } => Vec::new(),
        DatasetSpec::Files { dir } => vec![dir.clone()],
        DatasetSpec::Vcr { train, val, features } => [Some(train.clone()), Some(val.clone()), features.clone()]
            .into_iter()
            .flatten()
            .collect(),
    };
    v.extend(pretrained.map(Path::to_path_buf));
    v
}

/// Result of one training run, after its files are written.
struct RunResult {
    evaluation: Evaluation,
}

fn needs_pretrained(c: &ExperimentConfig) -> bool {
    c.mode == Mode::Fr || matches!(c.combinator, Combinator::Kldiv { .. })
}

fn load_pretrained(dir: Option<&Path>, c: &ExperimentConfig, vocab: &Vocabulary) -> Result<Option<EncoderParams>> {
    match dir {
        None if needs_pretrained(c) => Err(Error::Config(
            "--pretrained is required for --mode fr and for --loss kldiv".into(),
        )),
        None => Ok(None),
        Some(d) => {
            let ck = load_checkpoint(d)?;
            check_vocab(&ck.vocabulary, vocab, d)?;
            Ok(Some(ck.encoder))
        }
    }
}

/// Trains one model. `init` seeds the encoder weights (fresh when `None`);
/// `pretrained` is the kldiv reference.
fn train_run(
    c: &ExperimentConfig,
    data: &DatasetSplit,
    init: Option<&EncoderParams>,
    pretrained: Option<&EncoderParams>,
    pretrained_dir: Option<&Path>,
    args: &[String],
) -> Result<RunResult> {
    let v = &data.vocabulary;
    let mut encoder = match init {
        Some(p) => p.clone(),
        None => EncoderParams::new(c.model.encoder_config(v.len()), c.seed)?,
    };
    let mut lm = LmParams::new(
        c.model.lm_config(v.len(), encoder.config.d_model),
        c.seed.wrapping_add(1),
    )?;
    let max_r = lm.config.max_rationale_len();
    let tr = prepare(&data.train, v, max_r)?;
    let va = prepare(&data.val, v, max_r)?;
    let reference = match c.combinator {
        Combinator::Kldiv { .. } => pretrained,
        _ => None,
    };
    let outcome = train(&c.train_config(), &tr, &va, &mut encoder, &mut lm, reference)?;
    let evaluation = evaluate_model(&encoder, &lm, v, &data.val, RationaleSource::Generated)?;

    let mut out = Outputs::new(&c.out_dir)?;
    out.text(CONFIG_FILE, &c.render())?;
    out.text(
        MODEL_FILE,
        &pretty(&ModelFile {
            encoder: encoder.config,
            lm: Some(lm.config),
        }),
    )?;
    out.text(ENCODER_FILE, &encoder.params.to_json())?;
    out.text(LM_FILE, &lm.params.to_json())?;
    out.text(VOCAB_FILE, &v.to_json())?;
    out.text(HISTORY_FILE, &jsonl(&outcome.history))?;
    out.text(
        SUMMARY_FILE,
        &pretty(&serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "val_total": outcome.val_total,
            "uncertainty": outcome.uncertainty.map(|(a, r)| serde_json::json!({ "s_A": a, "s_R": r })),
        })),
    )?;
    out.text(REPORT_FILE, &pretty(&evaluation.report))?;
    out.text(RATIONALES_FILE, &jsonl(&evaluation.records))?;
    let mut m = manifest("train", args, Some(c));
    m.inputs = input_paths(c, pretrained_dir);
    out.manifest(m)?;
    Ok(RunResult { evaluation })
}

fn cmd_train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let c = resolve(a)?;
    let data = load_dataset(&c.dataset)?;
    let pre = load_pretrained(a.pretrained.as_deref(), &c, &data.vocabulary)?;
    let r = train_run(&c, &data, pre.as_ref(), pre.as_ref(), a.pretrained.as_deref(), args)?;
    let rep = &r.evaluation.report;
    eprintln!(
        "trained {:?} {}: BLEU-1 {:.2}, accuracy {:.2}",
        c.mode,
        c.combinator.label(),
        rep.bleu1,
        rep.vqa_accuracy
    );
    Ok(())
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

fn cmd_sweep(a: &TrainArgs, args: &[String]) -> Result<i32> {
    let base = resolve(a)?;
    let data = load_dataset(&base.dataset)?;
    let pre_dir = a
        .pretrained
        .as_deref()
        .ok_or_else(|| Error::Config("sweep requires --pretrained".into()))?;
    let pre = load_pretrained(Some(pre_dir), &base, &data.vocabulary)?;
    let mut csv = String::from("loss,vqa_accuracy,bleu1\n");
    let mut failed = Vec::new();
    for (label, comb) in SWEEP_LOSSES {
        let c = ExperimentConfig {
            combinator: comb,
            out_dir: base.out_dir.join(label),
            ..base.clone()
        };
        // Cells train a fresh encoder under identical seeds; the pretrained
        // checkpoint is only the kldiv reference.
        let cell_args: Vec<String> = args.to_vec();
        match train_run(&c, &data, None, pre.as_ref(), Some(pre_dir), &cell_args) {
            Ok(r) => {
                let rep = &r.evaluation.report;
                let _ = writeln!(csv, "{label},{},{}", fmt_num(rep.vqa_accuracy), fmt_num(rep.bleu1));
                eprintln!("{label}: accuracy {:.2}, BLEU-1 {:.2}", rep.vqa_accuracy, rep.bleu1);
            }
            Err(e) => {
                eprintln!("{label}: failed: {e}");
                failed.push(format!("{label} ({e})"));
            }
        }
    }
    let mut out = Outputs::new(&base.out_dir)?;
    out.text(SWEEP_CSV, &csv)?;
    let mut m = manifest("sweep", args, Some(&base));
    m.inputs = input_paths(&base, Some(pre_dir));
    out.manifest(m)?;
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("error: failed sweep cells: {}", failed.join("; "));
        Ok(5)
    }
}

fn cmd_eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    let names: Vec<&String> = a.models.iter().map(|(n, _)| n).collect();
    if names.iter().collect::<std::collections::BTreeSet<_>>().len() != names.len() {
        return Err(Error::Config("--model names must be distinct".into()));
    }
    let data = DatasetSplit::load(&a.data)?;
    let mut out = Outputs::new(&a.out)?;
    let mut reports = Vec::new();
    for (name, dir) in &a.models {
        let ck = load_checkpoint(dir)?;
        check_vocab(&ck.vocabulary, &data.vocabulary, dir)?;
        let lm = ck
            .lm
            .ok_or_else(|| Error::Validation(format!("{} holds no rationale model", dir.display())))?;
        let ev = evaluate_model(&ck.encoder, &lm, &data.vocabulary, &data.val, a.rationale_source)?;
        create_dir(&a.out.join(name))?;
        out.text(&format!("{name}/{REPORT_FILE}"), &pretty(&ev.report))?;
        out.text(&format!("{name}/{RATIONALES_FILE}"), &jsonl(&ev.records))?;
        reports.push(ev.report);
    }
    let mut csv = String::from("metric");
    for n in &names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for (i, (label, _)) in reports[0].rows().iter().enumerate() {
        csv.push_str(label);
        for r in &reports {
            csv.push(',');
            csv.push_str(&fmt_num(r.rows()[i].1));
        }
        csv.push('\n');
    }
    out.text(COMPARISON_FILE, &csv)?;
    let mut m = manifest("eval", args, None);
    m.inputs = std::iter::once(a.data.clone())
        .chain(a.models.iter().map(|(_, d)| d.clone()))
        .collect();
    out.manifest(m)?;
    eprint!("{csv}");
    Ok(())
}

fn cmd_judge(a: &JudgeArgs, args: &[String]) -> Result<()> {
    let sheet = JudgeSheet::load(&a.sheet)?;
    let report = judge_aggregate(&sheet)?;
    let mut out = Outputs::new(&a.out)?;
    out.text(JUDGE_CSV, &report.to_csv())?;
    out.text(JUDGE_JSON, &pretty(&report))?;
    let mut m = manifest("judge", args, None);
    m.inputs = vec![a.sheet.clone()];
    out.manifest(m)?;
    eprint!("{}", report.to_csv());
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32> {
    let m: Manifest = read_json(&a.manifest)?;
    let mut args = m.args.clone();
    if let Some(new_out) = &a.out {
        let new_out = new_out.to_string_lossy().into_owned();
        match args.iter().position(|x| x == "--out") {
            Some(i) if i + 1 < args.len() => args[i + 1] = new_out,
            _ => args.extend(["--out".to_string(), new_out]),
        }
    }
    eprintln!("replaying: {}", args.join(" "));
    Ok(super::run(std::iter::once("vqa-rationale".to_string()).chain(args)))
}
