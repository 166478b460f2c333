use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use edk::backbones::BackboneKind;
use edk::data::{load_dataset, write_dataset};
use edk::pipeline::ablate::ablate;
use edk::pipeline::compress::compress;
use edk::pipeline::config::ExperimentConfig;
use edk::pipeline::kb::KnowledgeBase;
use edk::pipeline::stats::write_stats;
use edk::pipeline::train::{train_backbone, TrainedModel};
use edk::{EdkError, Result};

#[derive(Parser)]
#[command(name = "edk", version, about = "Compress old CTR logs into a knowledge base and inject it into CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described in the config's data section.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV; the schema goes next to it as `<stem>.schema.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the knowledge model on the old split and save the frozen knowledge base.
    Compress {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss records as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a backbone, with knowledge when `--kb` is given.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Overrides the config's backbone kind.
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report AUC and LogLoss of a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Principle ablation and pattern-count sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Results table CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mask-cardinality histogram and vector export.
    PatternStats {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Old,
    Train,
    Valid,
    Test,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, edk::pipeline::config::Dataset)> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let data = cfg.load_data()?;
    cfg.resolve(&data.schema)?;
    Ok((cfg, data))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.data.synthetic.is_none() {
                return Err(EdkError::Config("synth-data needs a data.synthetic section".into()));
            }
            cfg.validate()?;
            let data = cfg.load_data()?;
            write_dataset(&out, &data.schema, &data.records)?;
            let schema_path = out.with_extension("schema.json");
            data.schema.save(&schema_path)?;
            eprintln!(
                "wrote {} records to {} and schema to {}",
                data.records.len(),
                out.display(),
                schema_path.display()
            );
        }
        Command::Compress { config, out, log } => {
            let (cfg, data) = load_config(&config)?;
            let splits = cfg.split(&data.records)?;
            let mut log_file = log.map(|p| File::create(p).map(BufWriter::new)).transpose()?;
            let result = compress(
                &splits.old,
                &data.schema,
                &cfg.compression,
                log_file.as_mut().map(|w| w as &mut dyn Write),
            )?;
            if let Some(mut w) = log_file {
                w.flush()?;
            }
            for e in &result.epochs {
                eprintln!("{}", serde_json::to_string(e)?);
            }
            result.kb.save(&out)?;
            write_json(&with_suffix(&out, ".resolved.json"), &cfg.snapshot())?;
            write_json(&with_suffix(&out, ".epochs.json"), &result.epochs)?;
            eprintln!(
                "knowledge base {} (best epoch {}) saved to {}",
                result.kb.version(),
                result.best_epoch,
                out.display()
            );
        }
        Command::Train {
            config,
            kb,
            backbone,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(name) = backbone {
                let kind = BackboneKind::parse(&name)?;
                if kind != cfg.backbone.kind {
                    cfg.backbone = cfg.backbone.with_kind(kind);
                }
            }
            let kb = kb.map(KnowledgeBase::load).transpose()?;
            if kb.is_some() {
                cfg.backbone.use_knowledge = true;
            }
            cfg.validate()?;
            let data = cfg.load_data()?;
            cfg.resolve(&data.schema)?;
            let splits = cfg.split(&data.records)?;
            let mut model = train_backbone(
                &data.schema,
                &splits.train,
                &splits.valid,
                kb.as_ref(),
                &cfg.backbone,
                &cfg.train,
            )?;
            model.experiment = cfg.snapshot();
            model.save(&out)?;
            write_json(&with_suffix(&out, ".resolved.json"), &cfg.snapshot())?;
            eprintln!(
                "{} trained: lr {} wd {} valid auc {:.4}; saved to {}",
                cfg.backbone.kind.name(),
                model.selected.learning_rate,
                model.selected.weight_decay,
                model.selected.valid_auc,
                out.display()
            );
        }
        Command::Eval { model, kb, split } => {
            let model = TrainedModel::load(&model)?;
            let kb = kb.map(KnowledgeBase::load).transpose()?;
            let cfg: ExperimentConfig = serde_json::from_value(model.experiment.clone())
                .map_err(|e| EdkError::Checkpoint(format!("model lacks its experiment config: {e}")))?;
            let data = cfg.load_data()?;
            let splits = cfg.split(&data.records)?;
            let records = match split {
                SplitName::Old => &splits.old,
                SplitName::Train => &splits.train,
                SplitName::Valid => &splits.valid,
                SplitName::Test => &splits.test,
            };
            let report = model.evaluate(records, kb.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { config, out } => {
            let (cfg, data) = load_config(&config)?;
            let splits = cfg.split(&data.records)?;
            let table = ablate(
                &data.schema,
                &splits,
                &cfg.compression,
                &cfg.backbone,
                &cfg.train,
                &cfg.ablation,
            )?;
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(&path)?);
                    table.write_csv(&mut w)?;
                    w.flush()?;
                    write_json(&path.with_extension("json"), &table)?;
                    write_json(&with_suffix(&path, ".resolved.json"), &cfg.snapshot())?;
                }
                None => table.write_csv(&mut std::io::stdout().lock())?,
            }
        }
        Command::PatternStats { kb, data, out } => {
            let kb = KnowledgeBase::load(&kb)?;
            let records = load_dataset(&data, kb.schema())?;
            let stats = write_stats(&kb, &records, &out)?;
            let pooled: Vec<String> = stats.pooled().iter().map(u64::to_string).collect();
            eprintln!("cardinality counts 0..={}: {}", stats.num_fields, pooled.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edk: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
