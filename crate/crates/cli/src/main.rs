use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use openfsp::dataset::{
    filter_and_split, load_topv2_dir, parse_top, project_agnostic, Corpus, Record, Split, SplitStats, TOPV2_DOMAINS,
};
use openfsp::embedding::{Embedder, ProviderConfig, ProviderKind, DEFAULT_DIM};
use openfsp::error::{Error, Result};
use openfsp::eval::{run_loo, Baseline, EvalConfig, EvalReport, Setting};
use openfsp::head::TrainConfig;
use openfsp::ontology::{load_builtin_map, AgnosticLabel, Frame, OntologyMap, Span, Utterance, AGNOSTIC_DOMAIN};
use openfsp::registry::{Registry, SpecFile};
use openfsp::tagger::{train_agnostic_tagger, TaggerConfig};
use openfsp::toy::{generate, ToyConfig, TOY_DOMAINS};

#[derive(Parser)]
#[command(name = "openfsp", version, about = "Few-shot frame semantic parsing")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Sentence encoder.
    #[arg(long, value_enum, default_value_t = Provider::Hashed, global = true)]
    provider: Provider,
    /// HTTP endpoint of an external encoder.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = DEFAULT_DIM, global = true)]
    dim: usize,
    /// Embedding cache file, required with `--provider cached`.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Machine-readable stdout; errors as JSON objects on stderr.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Hashed,
    Cached,
    External,
}

#[derive(Args)]
struct CorpusArgs {
    /// TopV2 directory (`<domain>_<split>.tsv`) or a directory written by `ingest`.
    #[arg(long, required_unless_present = "synthetic")]
    data_dir: Option<PathBuf>,
    /// Use the generated two-domain toy corpus instead.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: bool,
    /// Seed of the toy corpus generator.
    #[arg(long, default_value_t = ToyConfig::default().seed)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split a corpus into canonical JSONL.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the domain-agnostic parser and store it in the registry.
    TrainDap {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        registry: PathBuf,
        /// Domains left out of training.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long, default_value_t = TaggerConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        tagger_seed: u64,
    },
    /// Validate a domain spec file and add it to the registry.
    Register {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Train a registered domain's head on its examples.
    Finalize {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        registry: PathBuf,
        #[command(flatten)]
        head: HeadArgs,
    },
    /// Parse one utterance against every finalized domain.
    Parse {
        #[arg(long, required_unless_present = "golden_parse")]
        text: Option<String>,
        #[arg(long)]
        registry: PathBuf,
        /// Number of ranked frames to print.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Bracketed gold frame used instead of the agnostic parser. Slot
        /// labels may be domain-specific or agnostic.
        #[arg(long, conflicts_with = "text")]
        golden_parse: Option<String>,
    },
    /// Leave-one-domain-out evaluation.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 50)]
        examples_per_label: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value = "standard", value_parser = parse_setting)]
        setting: Setting,
        #[arg(long, default_value = "proposed", value_parser = parse_baseline)]
        baseline: Baseline,
        /// Held-out domains; defaults to every domain of the corpus.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long, default_value_t = TaggerConfig::default().epochs)]
        tagger_epochs: usize,
        #[command(flatten)]
        head: EvalHeadArgs,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write long-format CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a saved JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().l2)]
    l2: f64,
}

#[derive(Args)]
struct EvalHeadArgs {
    #[arg(long, default_value_t = TrainConfig::converged().learning_rate)]
    head_learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::converged().epochs)]
    head_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::converged().l2)]
    head_l2: f64,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Global {
    fn provider(&self) -> Result<Box<dyn Embedder>> {
        let kind = match self.provider {
            Provider::Hashed => ProviderKind::Hashed,
            Provider::Cached => ProviderKind::Cached,
            Provider::External => ProviderKind::External,
        };
        ProviderConfig {
            kind,
            dimension: self.dim,
            cache_path: self.cache.clone(),
            endpoint: self.endpoint.clone(),
        }
        .build()
    }
}

/// Loads records and reports what was dropped. With `map`, records whose
/// slots it cannot project are dropped too.
fn load_corpus(args: &CorpusArgs, map: Option<&OntologyMap>) -> Result<(Corpus, SplitStats)> {
    if args.synthetic {
        let corpus = generate(ToyConfig {
            seed: args.seed,
            ..ToyConfig::default()
        });
        return Ok(filter_and_split(corpus.records.into_iter().map(Ok), map));
    }
    let dir = args.data_dir.as_deref().expect("clap enforces data_dir");
    if Corpus::is_canonical_dir(dir) {
        let corpus = Corpus::read_canonical(dir)?;
        Ok(filter_and_split(corpus.records.into_iter().map(Ok), map))
    } else {
        load_topv2_dir(dir, &TOPV2_DOMAINS, map)
    }
}

fn default_domains(args: &CorpusArgs, corpus: &Corpus) -> Vec<String> {
    if args.synthetic {
        return TOY_DOMAINS.iter().map(|d| d.to_string()).collect();
    }
    corpus.domains().into_iter().map(str::to_string).collect()
}

/// A gold query frame from a bracketed tree: domain labels are projected,
/// agnostic labels kept.
fn golden_frame(tree: &str, map: &OntologyMap) -> Result<(Utterance, Frame)> {
    let (utterance, frame) = parse_top(tree, AGNOSTIC_DOMAIN)?;
    let slots = frame
        .slots
        .iter()
        .map(|s| {
            let t = match map.map_name(&s.label) {
                Ok(t) => t,
                Err(e) => s.label.parse::<AgnosticLabel>().map_err(|_| e)?,
            };
            Ok(Span::new(s.start, s.end, t.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    let query = Frame::new(AGNOSTIC_DOMAIN, AgnosticLabel::Intent.as_str(), utterance.len(), slots)?;
    Ok((utterance, query))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn stats_text(s: &SplitStats) -> String {
    format!(
        "train {} / eval {} / test {}\ndropped: unsupported {}, nested {}, malformed {}, misaligned {}, unmappable {}\n",
        s.train,
        s.eval,
        s.test,
        s.dropped_unsupported,
        s.dropped_nested,
        s.dropped_malformed,
        s.dropped_misaligned,
        s.dropped_unmappable
    )
}

fn run(cli: Cli) -> Result<String> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { corpus, out } => {
            let (c, stats) = load_corpus(&corpus, None)?;
            c.write_canonical(&out)?;
            info!("wrote {} records to {}", c.records.len(), out.display());
            Ok(if g.json {
                serde_json::to_string(&stats)? + "\n"
            } else {
                stats_text(&stats)
            })
        }
        Command::TrainDap {
            corpus,
            registry,
            exclude,
            epochs,
            tagger_seed,
        } => {
            let mut reg = Registry::load(&registry)?;
            let (c, _) = load_corpus(&corpus, Some(reg.map()))?;
            let projected = c
                .split(Split::Train)
                .filter(|r| !exclude.contains(&r.domain))
                .map(|r| project_agnostic(r, reg.map()))
                .collect::<Result<Vec<_>>>()?;
            info!("training on {} records", projected.len());
            let model = train_agnostic_tagger(
                &projected,
                TaggerConfig {
                    epochs,
                    seed: tagger_seed,
                },
            )?;
            reg.set_tagger(model);
            reg.save(&registry)?;
            Ok(if g.json {
                json!({"trained_on": projected.len(), "epochs": epochs}).to_string() + "\n"
            } else {
                format!("agnostic parser trained on {} records\n", projected.len())
            })
        }
        Command::Register { spec, registry } => {
            let mut reg = Registry::load(&registry)?;
            let file = SpecFile::read(&spec)?;
            let d = reg.register_file(&file)?;
            let out = if g.json {
                json!({"domain": d.name, "templates": d.templates.len(), "labels": d.labels().len()}).to_string()
                    + "\n"
            } else {
                format!(
                    "registered {}: {} templates, {} labels\n",
                    d.name,
                    d.templates.len(),
                    d.labels().len()
                )
            };
            reg.save(&registry)?;
            Ok(out)
        }
        Command::Finalize {
            domain,
            registry,
            head,
        } => {
            let provider = g.provider()?;
            let mut reg = Registry::load(&registry)?;
            let cfg = TrainConfig {
                learning_rate: head.learning_rate,
                epochs: head.epochs,
                l2: head.l2,
                ..TrainConfig::default()
            };
            let d = reg.finalize(&domain, &cfg, provider.as_ref())?;
            let out = if g.json {
                json!({"domain": d.name, "servable": d.is_servable()}).to_string() + "\n"
            } else {
                format!("finalized {}\n", d.name)
            };
            reg.save(&registry)?;
            Ok(out)
        }
        Command::Parse {
            text,
            registry,
            k,
            golden_parse,
        } => {
            let provider = g.provider()?;
            let reg = Registry::load(&registry)?;
            let (utterance, golden) = match (&text, &golden_parse) {
                (_, Some(tree)) => {
                    let (u, f) = golden_frame(tree, reg.map())?;
                    (u, Some(f))
                }
                (Some(t), None) => (Utterance::new(t), None),
                (None, None) => unreachable!("clap requires one"),
            };
            let result = reg.parse(&utterance, provider.as_ref(), golden.as_ref(), Some(k))?;
            if g.json {
                Ok(result.to_json() + "\n")
            } else {
                let mut out = String::new();
                for (i, r) in result.ranked.iter().enumerate() {
                    let frame = r.to_frame(&result.query);
                    let top = Record {
                        utterance: utterance.clone(),
                        frame,
                        domain: r.template.domain.clone(),
                        split: Split::Test,
                    };
                    out += &format!("{}. {:.4} {} {}\n", i + 1, r.score, r.template.domain, top.to_top_string());
                }
                Ok(out)
            }
        }
        Command::Evaluate {
            corpus,
            examples_per_label,
            seeds,
            setting,
            baseline,
            domains,
            tagger_epochs,
            head,
            out,
            csv,
        } => {
            let provider = g.provider()?;
            let map = load_builtin_map();
            let (c, stats) = load_corpus(&corpus, Some(&map))?;
            info!("corpus: {}", stats_text(&stats).trim_end());
            let domains = if domains.is_empty() {
                default_domains(&corpus, &c)
            } else {
                domains
            };
            let cfg = EvalConfig {
                examples_per_label,
                seeds,
                setting,
                baseline,
                domains,
                tagger_epochs,
                head: TrainConfig {
                    learning_rate: head.head_learning_rate,
                    epochs: head.head_epochs,
                    l2: head.head_l2,
                    ..TrainConfig::default()
                },
            };
            let report = run_loo(&cfg, &c, &map, provider.as_ref())?;
            if let Some(path) = &out {
                write_file(path, &report.to_json())?;
            }
            if let Some(path) = &csv {
                write_file(path, &report.to_csv())?;
            }
            Ok(if g.json {
                report.to_json()
            } else {
                report.render_table()
            })
        }
        Command::Report { input, csv } => {
            let report = EvalReport::from_json(&fs::read_to_string(&input)?)?;
            Ok(if g.json {
                report.to_json()
            } else if csv {
                report.to_csv()
            } else {
                report.render_table()
            })
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json = cli.global.json;
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
