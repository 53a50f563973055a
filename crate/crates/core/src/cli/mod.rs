//! Command-line front end.

mod config;

pub use config::{ModelSection, RunConfig};

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::data::synthetic::generate_synthetic_task;
use crate::data::{
    decode_header, load_visual_features, Dataset, FeatureSet, LengthPolicy, RawSplit, Vocabulary, DEFAULT_MAX_LEN,
};
use crate::error::{Error, Result};
use crate::eval::{bleu4, export_attention, perplexity, sources_of, tokenize_lines, ExportOptions, GridGeometry};
use crate::model::{greedy_decode, load_checkpoint, save_checkpoint, ModelParams, Sources};
use crate::training::Trainer;

pub const SRC_VOCAB: &str = "src.vocab";
pub const TGT_VOCAB: &str = "tgt.vocab";
pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRIC_LOG: &str = "metrics.log";

#[derive(Debug, Parser)]
#[command(name = "dualattn", version, about = "Doubly-attentive transformer translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic disambiguation task (train and test splits).
    GenSynthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on DATA_DIR/train.* and write checkpoints to OUT.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint (and its vocabularies) instead of a
        /// fresh initialization.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Drop images from the training data.
        #[arg(long)]
        text_only: bool,
    },
    /// Greedy translation, one output line per input line.
    Translate {
        #[arg(long)]
        model: PathBuf,
        /// Source sentences; stdin when omitted and no features are given.
        #[arg(long)]
        src: Option<PathBuf>,
        /// Feature grids aligned with the source lines. Without --src every
        /// grid is captioned.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Teacher-forced perplexity on DATA_DIR/SPLIT.*.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Attention dump and visual heatmaps for one instance.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Decoder layer for heatmaps; defaults to the top layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Head for heatmaps; defaults to the mean over heads.
        #[arg(long)]
        head: Option<usize>,
    },
    /// Header and value statistics of a feature file.
    InspectFeatures {
        #[arg(long)]
        features: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a readable file", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is not a directory", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(Error::at_path(p))
}

fn model_dir(model: &Path) -> &Path {
    model.parent().unwrap_or(Path::new("."))
}

/// Checkpoint plus the vocabularies stored beside it.
pub fn load_model(model: &Path) -> Result<(ModelParams, Vocabulary, Vocabulary)> {
    require_file(model)?;
    let dir = model_dir(model);
    let params = load_checkpoint(model)?;
    let sv = Vocabulary::load(dir.join(SRC_VOCAB))?;
    let tv = Vocabulary::load(dir.join(TGT_VOCAB))?;
    if sv.len() != params.config.src_vocab || tv.len() != params.config.tgt_vocab {
        return Err(Error::Config("vocabulary files do not match the checkpoint".into()));
    }
    Ok((params, sv, tv))
}

fn load_split(dir: &Path, name: &str, sv: &Vocabulary, tv: &Vocabulary, max_len: usize) -> Result<Dataset> {
    RawSplit::load(dir, name)?.encode(sv, tv, max_len)
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenSynthetic { config, seed, out: dir } => {
            let mut rc = RunConfig::from_flag(config.as_deref())?;
            if let Some(s) = seed {
                rc.set_seed(s);
            }
            let dir = dir.or(rc.out).ok_or_else(|| Error::Config("--out is required".into()))?;
            let task = generate_synthetic_task(&rc.synthetic)?;
            task.write(&dir)?;
            writeln!(
                out,
                "wrote {} train / {} test instances to {}",
                task.train.len(),
                task.test.len(),
                dir.display()
            )?;
        }
        Command::Train {
            config,
            seed,
            data_dir,
            out: dir,
            model,
            epochs,
            text_only,
        } => {
            let mut rc = RunConfig::from_flag(config.as_deref())?;
            if let Some(s) = seed {
                rc.set_seed(s);
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            let data_dir = data_dir.or(rc.data_dir.clone()).ok_or_else(|| Error::Config("--data-dir is required".into()))?;
            let dir = dir.or(rc.out.clone()).ok_or_else(|| Error::Config("--out is required".into()))?;
            require_dir(&data_dir)?;
            if let Some(m) = &model {
                require_file(m)?;
            }
            rc.train.validate()?;
            train(&rc, &data_dir, &dir, model.as_deref(), text_only, out)?;
        }
        Command::Translate {
            model,
            src,
            features,
            out: dest,
        } => {
            let (params, sv, tv) = load_model(&model)?;
            let feats = features.as_deref().map(load_visual_features).transpose()?;
            let lines: Option<Vec<String>> = match (&src, &feats) {
                (Some(p), _) => Some(fs::read_to_string(p).map_err(Error::at_path(p))?.lines().map(str::to_owned).collect()),
                (None, Some(_)) => None,
                (None, None) => Some(io::stdin().lock().lines().collect::<io::Result<_>>()?),
            };
            let text = translate(&params, &sv, &tv, lines.as_deref(), feats.as_ref())?;
            match dest {
                Some(p) => fs::write(&p, text).map_err(Error::at_path(&p))?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::EvalBleu { hyp, reference } => {
            let read = |p: &Path| fs::read_to_string(p).map_err(Error::at_path(p));
            let h = tokenize_lines(&read(&hyp)?);
            let r = tokenize_lines(&read(&reference)?);
            let report = bleu4(&h, &r)?;
            writeln!(out, "BLEU4 = {:.4}", report.bleu)?;
            let p = report.precisions.map(|p| format!("{:.4}", p)).join("/");
            writeln!(
                out,
                "precisions = {p} BP = {:.4} hyp_len = {} ref_len = {}",
                report.brevity_penalty, report.hyp_len, report.ref_len
            )?;
        }
        Command::EvalPpl { model, data_dir, split } => {
            let (params, sv, tv) = load_model(&model)?;
            require_dir(&data_dir)?;
            let data = load_split(&data_dir, &split, &sv, &tv, params.config.max_len)?;
            writeln!(out, "perplexity = {:.6}", perplexity(&params, &data)?)?;
        }
        Command::ExportAttention {
            model,
            data_dir,
            split,
            index,
            out: dir,
            layer,
            head,
        } => {
            let (params, sv, tv) = load_model(&model)?;
            require_dir(&data_dir)?;
            let data = load_split(&data_dir, &split, &sv, &tv, params.config.max_len)?;
            let inst = data
                .instances
                .get(index)
                .ok_or_else(|| Error::invalid(format!("index {index} out of range ({} instances)", data.len())))?;
            let max_len = params.config.max_len;
            let (dump, files) = export_attention(
                &params,
                &sv,
                &tv,
                inst.id,
                sources_of(&data, inst),
                max_len,
                &dir,
                ExportOptions { layer, head },
            )?;
            writeln!(out, "translation: {}", dump.generated_tokens.join(" "))?;
            for f in files {
                writeln!(out, "wrote {}", f.display())?;
            }
        }
        Command::InspectFeatures { features } => {
            require_file(&features)?;
            let bytes = fs::read(&features).map_err(Error::at_path(&features))?;
            let h = decode_header(&bytes)?;
            let set = load_visual_features(&features)?;
            write!(out, "{}", describe_features(h.version, &set))?;
        }
    }
    Ok(())
}

fn describe_features(version: u32, set: &FeatureSet) -> String {
    let geo = GridGeometry::of(set.grid_len);
    let side = geo.side.map_or_else(|| "not square".to_string(), |s| format!("{s}x{s}"));
    let mut s = format!(
        "version = {version}\ncount = {}\ngrid_len = {} ({side})\nd_feat = {}\n",
        set.len(),
        set.grid_len,
        set.d_feat
    );
    let values = set.grids.iter().flat_map(|g| g.data().iter().map(|&v| f64::from(v)));
    let (mut n, mut sum, mut sq, mut lo, mut hi) = (0usize, 0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if n > 0 {
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        s += &format!("min = {lo:.6}\nmax = {hi:.6}\nmean = {mean:.6}\nstd = {std:.6}\n");
    }
    s
}

fn translate(
    params: &ModelParams,
    sv: &Vocabulary,
    tv: &Vocabulary,
    lines: Option<&[String]>,
    feats: Option<&FeatureSet>,
) -> Result<String> {
    let max_len = params.config.max_len;
    let n = match (lines, feats) {
        (Some(l), Some(f)) if l.len() != f.len() => {
            return Err(Error::Alignment(format!("{} source lines vs {} feature grids", l.len(), f.len())))
        }
        (Some(l), _) => l.len(),
        (None, Some(f)) => f.len(),
        (None, None) => 0,
    };
    let mut text = String::new();
    for i in 0..n {
        let src = lines
            .map(|l| sv.encode(&l[i], false, max_len, LengthPolicy::Truncate))
            .transpose()?;
        let src = src.filter(|s| !s.is_empty() || feats.is_none());
        let sources = Sources {
            src: src.as_deref(),
            grid: feats.map(|f| &f.grids[i]),
        };
        let ids = if sources.src.is_some_and(<[usize]>::is_empty) {
            Vec::new()
        } else {
            greedy_decode(params, sources, max_len)?
        };
        text += &tv.decode(&ids);
        text.push('\n');
    }
    Ok(text)
}

fn train(
    rc: &RunConfig,
    data_dir: &Path,
    dir: &Path,
    init: Option<&Path>,
    text_only: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let raw = RawSplit::load(data_dir, "train")?;
    let (params, sv, tv) = match init {
        Some(m) => load_model(m)?,
        None => {
            let sv = Vocabulary::build(raw.src.iter().map(String::as_str), 1)?;
            let tv = Vocabulary::build(raw.tgt.iter().map(String::as_str), 1)?;
            let (grid_len, d_feat) = raw.features.as_ref().map_or((1, 1), |f| (f.grid_len, f.d_feat));
            let mc = rc.model.resolve(sv.len(), tv.len(), grid_len, d_feat)?;
            (ModelParams::init(&mc, rc.seed)?, sv, tv)
        }
    };
    let max_len = params.config.max_len.max(DEFAULT_MAX_LEN);
    let mut train_set = raw.encode(&sv, &tv, max_len)?;
    let valid_path = data_dir.join("valid.tgt");
    let mut valid = if valid_path.exists() {
        Some(load_split(data_dir, "valid", &sv, &tv, max_len)?)
    } else {
        None
    };
    if text_only {
        train_set = train_set.without_images();
        valid = valid.map(|v| v.without_images());
    }
    create_dir(dir)?;
    sv.save(dir.join(SRC_VOCAB))?;
    tv.save(dir.join(TGT_VOCAB))?;
    fs::write(dir.join("run.toml"), rc.to_toml()).map_err(Error::at_path(dir.join("run.toml")))?;
    info!(
        "training on {} instances, {} parameters",
        train_set.len(),
        params.store.num_scalars()
    );
    let log_path = dir.join(METRIC_LOG);
    let mut log = fs::File::create(&log_path).map_err(Error::at_path(&log_path))?;
    let outcome = Trainer::new(params, rc.train.clone())?.train(&train_set, valid.as_ref(), &mut log)?;
    save_checkpoint(&outcome.best, dir.join(BEST_CHECKPOINT))?;
    save_checkpoint(&outcome.last, dir.join(LAST_CHECKPOINT))?;
    writeln!(out, "trained {} steps; checkpoint {}", outcome.steps, dir.join(BEST_CHECKPOINT).display())?;
    if let Some(m) = outcome.best_metric {
        writeln!(out, "best {} = {m:.6}", rc.train.selection_metric.name())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("dualattn").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_are_nonzero() {
        assert_ne!(dispatch(argv("frobnicate")), 0);
        assert_ne!(dispatch(argv("eval-bleu --hyp")), 0);
        assert_ne!(dispatch(argv("eval-bleu --hyp a --ref b --bogus")), 0);
    }

    #[test]
    fn missing_files_fail_with_diagnostic() {
        assert_eq!(dispatch(argv("eval-bleu --hyp /nonexistent/h --ref /nonexistent/r")), 1);
        assert_eq!(dispatch(argv("inspect-features --features /nonexistent/f.vfea")), 1);
    }
}
