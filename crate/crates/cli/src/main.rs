use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use partial_ner::corpus::{
    bilou_to_bio, bio_to_bilou, corpus_stats, infer_tagset, parse_conll, write_conll, BioRepair, Dataset, Scheme,
    Sentence, Tagset, DEFAULT_UNKNOWN_MARKER,
};
use partial_ner::corruption::{corrupt, CorruptionConfig, CorruptionScheme};
use partial_ner::eval::entity_prf;
use partial_ner::experiment::{run_experiment, ExperimentConfig, Splits};
use partial_ner::losses::{fit, LatentMode, LossConfig};
use partial_ner::model::Model;
use partial_ner::selftrain::{self_train_loop, SelfTrainConfig};
use partial_ner::synthetic::{generate_splits, SyntheticConfig};

#[derive(Parser)]
#[command(name = "partial-ner", version, about = "Partial-annotation CRF tagging toolkit")]
struct Cli {
    /// Tag used in input files for positions with no annotation.
    #[arg(long, global = true, default_value = DEFAULT_UNKNOWN_MARKER)]
    unknown_marker: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Bio,
    Bilou,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Bio => Scheme::Bio,
            SchemeArg::Bilou => Scheme::Bilou,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptArg {
    Rar,
    Rsfr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    DistantO,
    ExplicitUnknown,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CoNLL file between BIO and BILOU.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        to: SchemeArg,
        /// Treat a stray I-X as the start of a new span instead of failing.
        #[arg(long)]
        repair: bool,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
    },
    /// Remove gold annotations with a seeded scheme.
    Corrupt {
        #[arg(long, value_enum)]
        scheme: CorruptArg,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        tag_scheme: Option<SchemeArg>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Score a model on a gold file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write the predicted tags as CoNLL.
        #[arg(long)]
        pred_out: Option<PathBuf>,
    },
    /// Run the removal-rate grid.
    Experiment(ExperimentArgs),
    /// Write a synthetic gold corpus as train/dev/test CoNLL files.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sentences: Option<usize>,
        #[arg(long, value_enum, default_value = "bilou")]
        tag_scheme: SchemeArg,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with loss and optimiser settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    tag_scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    latent_mode: Option<ModeArg>,
    /// Train a standard CRF that trusts every tag.
    #[arg(long)]
    full_annotation: bool,
    #[arg(long)]
    eer_target: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    self_train: bool,
    #[arg(long)]
    begin_step: Option<usize>,
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Gold version of the training file, used to log re-annotation precision.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Write per-epoch and per-round logs here as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gold splits; omit all three to use a generated synthetic corpus.
    #[arg(long, requires_all = ["dev", "test"])]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum)]
    tag_scheme: Option<SchemeArg>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// BILOU if any L- or U- tag occurs, else BIO.
fn detect_scheme(text: &str) -> Scheme {
    let bilou = text.lines().any(|l| {
        l.split_whitespace()
            .last()
            .is_some_and(|t| t.starts_with("L-") || t.starts_with("U-"))
    });
    if bilou {
        Scheme::Bilou
    } else {
        Scheme::Bio
    }
}

fn load(path: &Path, scheme: Option<SchemeArg>, marker: &str) -> Result<Dataset> {
    let text = read(path)?;
    let scheme = scheme.map_or_else(|| detect_scheme(&text), Scheme::from);
    let tagset = infer_tagset(&text, scheme, marker)?;
    parse_conll(&text, &tagset, marker).with_context(|| format!("parsing {}", path.display()))
}

fn load_with(path: &Path, tagset: &Tagset, marker: &str) -> Result<Dataset> {
    parse_conll(&read(path)?, tagset, marker).with_context(|| format!("parsing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display())),
        None => Ok(T::default()),
    }
}

fn convert(input: &Path, out: &Path, to: Scheme, repair: bool, marker: &str) -> Result<()> {
    let text = read(input)?;
    let from = detect_scheme(&text);
    let ds = parse_conll(&text, &infer_tagset(&text, from, marker)?, marker)?;
    if !ds.is_gold() {
        bail!("conversion needs a fully annotated file");
    }
    let tagset = Tagset::new(to, ds.tagset.entity_types().iter().cloned())?;
    let repair = if repair { BioRepair::AsBegin } else { BioRepair::Error };
    let mut sentences = Vec::with_capacity(ds.len());
    for (i, s) in ds.sentences.iter().enumerate() {
        let labels: Vec<&str> = ds.labels_of(i).into_iter().flatten().collect();
        let mapped = match (from, to) {
            (Scheme::Bio, Scheme::Bilou) => bio_to_bilou(&labels, repair)?,
            (Scheme::Bilou, Scheme::Bio) => bilou_to_bio(&labels)?,
            _ => labels.iter().map(|l| l.to_string()).collect(),
        };
        sentences.push(Sentence::from_labels(&s.tokens, &mapped, &tagset).with_context(|| format!("sentence {}", i + 1))?);
    }
    write(out, &write_conll(&Dataset::new(sentences, tagset), marker))
}

fn train(args: TrainArgs, marker: &str) -> Result<()> {
    let train = load(&args.train, args.tag_scheme, marker)?;
    let dev = load_with(&args.dev, &train.tagset, marker)?;
    let mut cfg: LossConfig = read_json(args.config.as_deref())?;
    if args.full_annotation {
        cfg = cfg.full_annotation();
    }
    if let Some(m) = args.latent_mode {
        cfg.latent_mode = match m {
            ModeArg::DistantO => LatentMode::DistantO,
            ModeArg::ExplicitUnknown => LatentMode::ExplicitUnknown,
        };
    }
    if let Some(v) = args.eer_target {
        cfg.eer_target = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }

    let mut log_lines = Vec::new();
    let model = if args.self_train {
        let mut st = SelfTrainConfig::default();
        if let Some(v) = args.begin_step {
            st.begin_step = v;
        }
        if let Some(v) = args.period {
            st.period = v;
        }
        if let Some(v) = args.max_rounds {
            st.max_rounds = v;
        }
        let gold = args
            .gold
            .as_deref()
            .map(|p| load_with(p, &train.tagset, marker))
            .transpose()?;
        let out = self_train_loop(&train, &dev, &cfg, &st, gold.as_ref())?;
        for e in &out.history {
            log_lines.push(serde_json::json!({ "epoch": e }));
        }
        for r in &out.rounds {
            log_lines.push(serde_json::json!({ "round": r }));
        }
        out.model
    } else {
        let out = fit(&train, &dev, &cfg, None)?;
        for e in &out.history {
            log_lines.push(serde_json::json!({ "epoch": e }));
        }
        out.model
    };
    model.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = args.log {
        let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        for l in log_lines {
            writeln!(f, "{l}")?;
        }
    }
    Ok(())
}

fn eval(model: &Path, test: &Path, pred_out: Option<&Path>, marker: &str) -> Result<()> {
    let model = Model::load(model).with_context(|| format!("loading {}", model.display()))?;
    let gold = load_with(test, &model.tagset, marker)?;
    let preds = gold
        .sentences
        .iter()
        .map(|s| model.predict(s))
        .collect::<partial_ner::Result<Vec<_>>>()?;
    let prf = entity_prf(&gold, &preds)?;
    println!("{}", serde_json::to_string_pretty(&prf)?);
    if let Some(path) = pred_out {
        let sentences = gold
            .sentences
            .iter()
            .zip(&preds)
            .map(|(s, p)| {
                let labels: Vec<&str> = p.iter().map(|&l| model.tagset.label(l)).collect();
                Sentence::from_labels(&s.tokens, &labels, &model.tagset)
            })
            .collect::<partial_ner::Result<Vec<_>>>()?;
        write(path, &write_conll(&Dataset::new(sentences, model.tagset.clone()), marker))?;
    }
    Ok(())
}

fn experiment(args: ExperimentArgs, marker: &str) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let splits = match (&args.train, &args.dev, &args.test) {
        (Some(tr), Some(dv), Some(te)) => {
            let train = load(tr, args.tag_scheme, marker)?;
            let dev = load_with(dv, &train.tagset, marker)?;
            let test = load_with(te, &train.tagset, marker)?;
            Splits { train, dev, test }
        }
        _ => {
            let scheme = args.tag_scheme.map_or(Scheme::Bilou, Scheme::from);
            let (train, dev, test) = generate_splits(&SyntheticConfig::default(), scheme)?;
            Splits { train, dev, test }
        }
    };
    let out = run_experiment(&splits, &cfg, &args.out)?;
    eprintln!(
        "{} results ({} trained, {} cached), {} failures; wrote {}",
        out.results.len(),
        out.trained,
        out.results.len() + out.failures.len() - out.trained,
        out.failures.len(),
        out.results_csv.display()
    );
    for f in &out.failures {
        eprintln!("failed cell {}: {}", f.key, f.error);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let marker = cli.unknown_marker.as_str();
    match cli.command {
        Command::Convert { input, out, to, repair } => convert(&input, &out, to.into(), repair, marker),
        Command::Stats { input, scheme } => {
            let ds = load(&input, scheme, marker)?;
            println!("{}", serde_json::to_string_pretty(&corpus_stats(&ds))?);
            Ok(())
        }
        Command::Corrupt {
            scheme,
            rate,
            seed,
            input,
            out,
            tag_scheme,
        } => {
            let ds = load(&input, tag_scheme, marker)?;
            let scheme = match scheme {
                CorruptArg::Rar => CorruptionScheme::Rar,
                CorruptArg::Rsfr => CorruptionScheme::Rsfr,
            };
            let c = corrupt(&ds, &CorruptionConfig { scheme, rate, seed })?;
            write(&out, &write_conll(&c.dataset, marker))?;
            eprintln!("removed {} of {} spans", c.removed.len(), c.total_spans);
            Ok(())
        }
        Command::Train(args) => train(args, marker),
        Command::Eval { model, test, pred_out } => eval(&model, &test, pred_out.as_deref(), marker),
        Command::Experiment(args) => experiment(args, marker),
        Command::Generate {
            out,
            seed,
            sentences,
            tag_scheme,
        } => {
            let mut cfg = SyntheticConfig {
                seed,
                ..Default::default()
            };
            if let Some(n) = sentences {
                cfg.num_sentences = n;
            }
            let (train, dev, test) = generate_splits(&cfg, tag_scheme.into())?;
            fs::create_dir_all(&out)?;
            for (name, ds) in [("train", &train), ("dev", &dev), ("test", &test)] {
                write(&out.join(format!("{name}.conll")), &write_conll(ds, marker))?;
            }
            Ok(())
        }
    }
}
