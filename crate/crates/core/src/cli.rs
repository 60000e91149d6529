//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use crate::config::{load_run_config, RunConfig};
use crate::corpus::{read_corpus, write_corpus, MANIFEST};
use crate::corpus::{generate_corpus, Corpus};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::pipeline::{self, Models, FINETUNE_CKPT, FUSION_CKPT, PRETRAIN_CKPT, SEQUENCE_CKPT};

#[derive(Parser, Debug)]
#[command(name = "cuedseq", version, about = "Cued-speech hand-shape learning and phoneme recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Generate(Common),
    /// Contrastive pretraining of the hand-shape encoder.
    Pretrain(Common),
    /// Fine-tune the encoder and classifier on a small clean-labeled subset.
    Finetune(Common),
    /// Train the hand-shape sequence model with CTC.
    TrainSeq(Common),
    /// Train the three-stream phoneme recognizer.
    TrainFusion(Common),
    /// Score the trained models on the held-out splits.
    Eval(Common),
    /// k-fold cross validation, every stage retrained per fold.
    Xval(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sequence.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Drop unknown config keys instead of rejecting them.
    #[arg(long)]
    lenient: bool,
    /// Replace existing outputs.
    #[arg(long)]
    overwrite: bool,
}

/// Parses `argv` (program name first) and runs the stage.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn execute(cmd: Command) -> Result<()> {
    let (name, common) = match &cmd {
        Command::Generate(c) => ("generate", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Finetune(c) => ("finetune", c),
        Command::TrainSeq(c) => ("train-seq", c),
        Command::TrainFusion(c) => ("train-fusion", c),
        Command::Eval(c) => ("eval", c),
        Command::Xval(c) => ("xval", c),
    };
    let cfg = load_run_config(common.config.as_deref(), &common.overrides, common.lenient)?;
    let ow = common.overwrite;
    match name {
        "generate" => generate(&cfg, ow),
        "pretrain" => stage_pretrain(&cfg, ow),
        "finetune" => stage_finetune(&cfg, ow),
        "train-seq" => stage_train_seq(&cfg, ow),
        "train-fusion" => stage_train_fusion(&cfg, ow),
        "eval" => stage_eval(&cfg, ow),
        _ => stage_xval(&cfg, ow),
    }
}

fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::State(format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    Ok(())
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ckpt(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoints.join(name)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = read_corpus(&cfg.paths.corpus)?;
    if corpus.alphabet.language != cfg.language {
        return Err(Error::InvalidArgument(format!(
            "corpus at {} is {} but the config asks for {}",
            cfg.paths.corpus.display(),
            corpus.alphabet.language,
            cfg.language
        )));
    }
    Ok(corpus)
}

/// Saves a checkpoint plus its training history next to it.
fn save_stage(cfg: &RunConfig, name: &str, params: &ParamStore, history: &str, overwrite: bool) -> Result<()> {
    mkdir(&cfg.paths.checkpoints)?;
    let path = ckpt(cfg, name);
    guard(&path, overwrite)?;
    save_checkpoint(params, &path)?;
    let stem = name.trim_end_matches(".csw");
    write_text(&cfg.paths.checkpoints.join(format!("{stem}_history.csv")), history)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn generate(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    guard(&cfg.paths.corpus.join(MANIFEST), overwrite)?;
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    write_corpus(&corpus, &cfg.paths.corpus)?;
    eprintln!(
        "wrote {} sentences and {} static images to {}",
        corpus.sentences.len(),
        corpus.static_set.len(),
        cfg.paths.corpus.display()
    );
    Ok(())
}

fn stage_pretrain(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    guard(&ckpt(cfg, PRETRAIN_CKPT), overwrite)?;
    let corpus = load_corpus(cfg)?;
    let split = pipeline::static_split(corpus.static_set.len(), cfg.seed);
    let train = corpus.static_set.select(&split.train);
    let out = pipeline::run_pretrain(cfg, &train.images)?;
    save_stage(cfg, PRETRAIN_CKPT, &out.params, &crate::contrastive::history_csv(&out.history), overwrite)
}

fn stage_finetune(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    guard(&ckpt(cfg, FINETUNE_CKPT), overwrite)?;
    let corpus = load_corpus(cfg)?;
    let pretrained = load_checkpoint(&ckpt(cfg, PRETRAIN_CKPT))?;
    let split = pipeline::static_split(corpus.static_set.len(), cfg.seed);
    let (out, _) = pipeline::run_finetune(cfg, &pretrained, &corpus.static_set.select(&split.train))?;
    save_stage(cfg, FINETUNE_CKPT, &out.params, &crate::finetune::history_csv(&out.history), overwrite)
}

fn stage_train_seq(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    guard(&ckpt(cfg, SEQUENCE_CKPT), overwrite)?;
    let corpus = load_corpus(cfg)?;
    let encoder = load_checkpoint(&ckpt(cfg, FINETUNE_CKPT))?;
    let split = pipeline::sentence_split(corpus.sentences.len(), cfg.seed);
    let train = pipeline::shape_sequence_samples(&pipeline::select(&corpus.sentences, &split.train), &encoder, &cfg.encoder)?;
    let held = pipeline::shape_sequence_samples(&pipeline::select(&corpus.sentences, &split.test), &encoder, &cfg.encoder)?;
    let out = pipeline::run_train_seq(cfg, &train, &held)?;
    save_stage(cfg, SEQUENCE_CKPT, &out.params, &crate::sequence::history_csv(&out.history), overwrite)
}

fn stage_train_fusion(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    guard(&ckpt(cfg, FUSION_CKPT), overwrite)?;
    let corpus = load_corpus(cfg)?;
    let encoder = load_checkpoint(&ckpt(cfg, FINETUNE_CKPT))?;
    let split = pipeline::sentence_split(corpus.sentences.len(), cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.sentences[i].clone()).collect::<Vec<_>>();
    let out = pipeline::run_train_fusion(cfg, &corpus, &encoder, &pick(&split.train), &pick(&split.test))?;
    save_stage(cfg, FUSION_CKPT, &out.model.params, &crate::sequence::history_csv(&out.history), overwrite)
}

fn load_optional(path: &Path) -> Result<Option<ParamStore>> {
    if path.exists() {
        load_checkpoint(path).map(Some)
    } else {
        Ok(None)
    }
}

fn stage_eval(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let report_path = cfg.paths.reports.join("report.json");
    guard(&report_path, overwrite)?;
    let corpus = load_corpus(cfg)?;
    let classifier = load_checkpoint(&ckpt(cfg, FINETUNE_CKPT))?;
    let sequence = load_optional(&ckpt(cfg, SEQUENCE_CKPT))?;
    let fusion = load_optional(&ckpt(cfg, FUSION_CKPT))?.map(|params| FusionModel {
        params,
        cfg: cfg.fusion.clone(),
        enc_cfg: cfg.encoder.clone(),
        alphabet: corpus.alphabet.clone(),
    });
    let models = Models { classifier: Some(&classifier), sequence: sequence.as_ref(), fusion: fusion.as_ref() };
    let report = pipeline::evaluate(cfg, &corpus, &models)?;
    mkdir(&cfg.paths.reports)?;
    report.write(&cfg.paths.reports)?;
    for c in &report.classification {
        println!("{}: accuracy {:.4}", c.task, c.accuracy);
    }
    for s in &report.sequences {
        println!("{}: Te {:.4} Tc {:.4}", s.task, s.micro.te, s.micro.tc);
    }
    Ok(())
}

fn stage_xval(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let path = cfg.paths.reports.join("xval.json");
    guard(&path, overwrite)?;
    let corpus = load_corpus(cfg)?;
    let report = pipeline::run_xval(cfg, &corpus)?;
    mkdir(&cfg.paths.reports)?;
    write_text(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let mut csv = String::from("fold,shape_accuracy,shape_seq_Te,shape_seq_Tc,phoneme_Te,phoneme_Tc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in &report.folds {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.fold, f.shape_accuracy, f.shape_seq_te, f.shape_seq_tc, opt(f.phoneme_te), opt(f.phoneme_tc)
        ));
    }
    write_text(&cfg.paths.reports.join("xval_folds.csv"), &csv)?;
    println!("shape accuracy {:.4} ± {:.4}", report.shape_accuracy.mean, report.shape_accuracy.std);
    println!("shape sequence Te {:.4} ± {:.4}", report.shape_seq_te.mean, report.shape_seq_te.std);
    println!("shape sequence Tc {:.4} ± {:.4}", report.shape_seq_tc.mean, report.shape_seq_tc.std);
    if let (Some(te), Some(tc)) = (report.phoneme_te, report.phoneme_tc) {
        println!("phoneme Te {:.4} ± {:.4}", te.mean, te.std);
        println!("phoneme Tc {:.4} ± {:.4}", tc.mean, tc.std);
    }
    Ok(())
}
