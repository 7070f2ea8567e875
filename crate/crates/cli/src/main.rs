use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mlmass::corpus::{registry_stats, write_lines};
use mlmass::eval::{corpus_bleu, pivot_translate, translate, DecodeSettings, Smoothing};
use mlmass::harness::{
    emit_report, run_experiment, ExperimentConfig, ExperimentReport, RegistryFiles, ReportFormat, Suite,
    SuiteConfig, TrainSpec,
};
use mlmass::model::gradcheck::{grad_check, GradCheckReport};
use mlmass::subword::{normalize, train_vocab};
use mlmass::trainer::{load_checkpoint, train, TrainOptions};
use mlmass::{MaskSpec, ModelConfig, ModelParams, Objective, Sampler, SamplingPolicy};

#[derive(Parser)]
#[command(name = "mlmass", version, about = "Multilingual translation co-trained with MASS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a shared subword vocabulary.
    BuildVocab {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        size: usize,
        /// Comma-separated language codes that get a `<2xx>` tag.
        #[arg(long, value_delimiter = ',')]
        langs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cipher suite from a suite config.
    MakeSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print store sizes of a registry as JSON.
    CorpusStats {
        #[arg(long)]
        registry: PathBuf,
    },
    /// Empirical sampling frequencies of a training config, as JSON.
    SampleStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a file, one sentence per line, to stdout.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt_lang: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a test set; prints a JSON BLEU result.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        tgt_lang: String,
        #[arg(long)]
        pivot: Option<String>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Where to write hypotheses; defaults to `<ref>.hyp`.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Run an experiment. The seed list may be overridden with MLMASS_SEEDS.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the report of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "txt")]
        format: String,
    },
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(normalize).collect())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Input of `grad-check`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GradCheckConfig {
    /// `vocab_size` is replaced by the size of the generated vocabulary.
    model: ModelConfig,
    suite: SuiteConfig,
    rows: usize,
    step: f64,
    floor: f64,
    tolerance: f64,
    seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let mut suite = SuiteConfig {
            base_mono: 200,
            base_vocab_size: 20,
            len_range: (2, 6),
            test_size: 1,
            dev_size: 0,
            subword_vocab: 60,
            ..SuiteConfig::default()
        };
        suite.languages.truncate(2);
        for l in &mut suite.languages {
            l.parallel = 200;
            l.mono = 200;
        }
        Self {
            model: ModelConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                d_ff: 32,
                dropout: 0.0,
                vocab_size: 0,
                max_positions: 32,
                tie_embeddings: true,
                label_smoothing: 0.1,
            },
            suite,
            rows: 3,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct GradCheckOutput {
    objective: Objective,
    max_rel_error: f64,
    coords: usize,
    passed: bool,
    report: GradCheckReport,
}

fn grad_check_cmd(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: GradCheckConfig = serde_json::from_str(&text)?;
    let suite = Suite::build(&cfg.suite)?;
    let model = ModelConfig {
        vocab_size: suite.vocab.len(),
        ..cfg.model
    };
    let params = ModelParams::<f64>::init(model, cfg.seed)?;
    let mut outputs = Vec::new();
    for (objective, ratio) in [(Objective::Translation, 0.0), (Objective::Mass, 1.0)] {
        let policy = SamplingPolicy {
            mono_ratio: ratio,
            batch_size: cfg.rows,
            max_len: model.max_positions - 1,
            seed: cfg.seed,
            ..SamplingPolicy::default()
        };
        let batch = Sampler::new(&suite.registry, policy, MaskSpec::default(), &suite.vocab)?.next_batch();
        let report = grad_check(&params, &batch, cfg.step, cfg.floor)?;
        let max = report.max_rel_error();
        outputs.push(GradCheckOutput {
            objective,
            max_rel_error: max,
            coords: report.coords(),
            passed: max < cfg.tolerance,
            report,
        });
    }
    print_json(&outputs)?;
    if outputs.iter().any(|o| !o.passed) {
        bail!("gradient check exceeded tolerance {}", cfg.tolerance);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::BuildVocab {
            input,
            size,
            langs,
            out,
        } => {
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(read_lines(p)?);
            }
            let vocab = train_vocab(lines.iter().map(String::as_str), size, &langs)?;
            vocab.save(&out)?;
            log::info!("wrote {} pieces to {}", vocab.len(), out.display());
        }
        Command::MakeSynth { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let cfg: SuiteConfig = serde_json::from_str(&text)?;
            let suite = Suite::build(&cfg)?;
            suite.write(&out)?;
            print_json(&registry_stats(&suite.registry))?;
        }
        Command::CorpusStats { registry } => {
            let files = RegistryFiles::read(&registry)?;
            let r = files.load(registry.parent().unwrap_or(Path::new(".")))?;
            print_json(&registry_stats(&r))?;
        }
        Command::SampleStats { config, draws } => {
            let spec = TrainSpec::read(&config)?;
            let (registry, vocab, job) = spec.prepare()?;
            let sampler = Sampler::new(&registry, job.policy, job.mask, &vocab)?;
            print_json(&sampler.sample_stats(draws))?;
        }
        Command::Train { config, out, resume } => {
            let spec = TrainSpec::read(&config)?;
            let (registry, vocab, job) = spec.prepare()?;
            let options = TrainOptions { resume, dev: Vec::new() };
            let outcome = train(&registry, &vocab, &job, &out, &options)?;
            log::info!("final checkpoint at {}", outcome.final_checkpoint.display());
        }
        Command::Translate {
            ckpt,
            src,
            tgt_lang,
            beam,
        } => {
            let (params, vocab) = load_checkpoint(&ckpt)?;
            let settings = DecodeSettings {
                beam,
                ..DecodeSettings::default()
            };
            for line in translate(&params, &vocab, &read_lines(&src)?, &tgt_lang, &settings)? {
                println!("{line}");
            }
        }
        Command::GradCheck { config } => grad_check_cmd(&config)?,
        Command::Evaluate {
            ckpt,
            src,
            reference,
            tgt_lang,
            pivot,
            beam,
            hyp_out,
        } => {
            let (params, vocab) = load_checkpoint(&ckpt)?;
            let srcs = read_lines(&src)?;
            let refs = read_lines(&reference)?;
            if srcs.len() != refs.len() {
                bail!("{} source lines but {} reference lines", srcs.len(), refs.len());
            }
            let settings = DecodeSettings {
                beam,
                ..DecodeSettings::default()
            };
            let hyps = match &pivot {
                Some(p) => pivot_translate(&params, &vocab, &srcs, p, &tgt_lang, &settings)?,
                None => translate(&params, &vocab, &srcs, &tgt_lang, &settings)?,
            };
            let hyp_path = hyp_out.unwrap_or_else(|| reference.with_extension("hyp"));
            write_lines(&hyp_path, hyps.iter().map(String::as_str))?;
            print_json(&corpus_bleu(&hyps, &refs, Smoothing::None)?)?;
        }
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::read(&config)?;
            cfg.apply_env()?;
            let report = run_experiment(&cfg, &out)?;
            print!("{}", emit_report(&report, ReportFormat::Txt)?);
        }
        Command::Report { run, format } => {
            let format: ReportFormat = format.parse()?;
            let report = ExperimentReport::read(&run.join("report.json"))?;
            print!("{}", emit_report(&report, format)?);
        }
    }
    Ok(())
}
