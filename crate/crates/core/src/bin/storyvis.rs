use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand};

use storyvis::check::{run_all, CheckOptions};
use storyvis::config::Config;
use storyvis::data::synthetic_corpus;
use storyvis::mask::MaskRule;
use storyvis::model::streams;
use storyvis::nn::sub_rng;
use storyvis::pack::{find_story, preprocess, Dataset, PreprocessInputs};
use storyvis::train::{run_demo, synthetic_dataset};
use storyvis::{Error, Result};

/// Structured story visualization toolkit.
#[derive(Parser, Debug)]
#[command(name = "storyvis", version)]
struct Cli {
    /// TOML configuration; defaults to the desk-scale demo configuration.
    #[arg(long, global = true, env = "STORYVIS_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps, overriding the configuration.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config {
        /// Start from the full-size defaults instead of the demo configuration.
        #[arg(long)]
        full: bool,
    },
    /// Write a synthetic corpus (stories, images, embeddings, triples) to --out.
    GenSynthetic {
        /// Number of stories; defaults to `train.stories`.
        #[arg(long)]
        stories: Option<usize>,
    },
    /// Validate a corpus and write one pack per story plus a manifest to --out.
    Preprocess {
        #[arg(long)]
        stories: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        /// Content-word lexicon; the bundled one is used when absent.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Print the 0/1 attention masks of one frame, layer by layer.
    DumpMasks {
        /// Directory written by `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        story: String,
        /// Frame index, from 0.
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
    /// Print the Levi graph of one story as JSON.
    DumpGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        story: String,
    },
    /// Train on synthetic or preprocessed stories; writes losses.csv,
    /// checkpoint.svckpt, samples/, config.toml and run.json to --out.
    TrainDemo {
        /// Directory written by `preprocess`; synthetic stories otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the invariant and oracle suite and print a report.
    Check {
        /// Swap in a deliberately wrong mask rule (test hook).
        #[arg(long)]
        corrupt_mask: bool,
    },
}

fn usage_error(kind: ErrorKind, msg: &str) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn require_out(out: &Option<PathBuf>) -> &Path {
    match out {
        Some(p) => p,
        None => usage_error(ErrorKind::MissingRequiredArgument, "this command needs --out <DIR>"),
    }
}

fn load_config(cli: &Cli, full: bool) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None if full => Config::default(),
        None => Config::demo(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: &Option<PathBuf>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| io_err(&p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Config { full } => {
            let cfg = load_config(cli, *full)?;
            write_or_print(&cli.out, "config.toml", &cfg.to_toml())?;
        }
        Command::GenSynthetic { stories } => {
            let out = require_out(&cli.out);
            let cfg = load_config(cli, false)?;
            let n = stories.unwrap_or(cfg.train.stories);
            let corpus = synthetic_corpus(&cfg, n, &mut sub_rng(cfg.seed, streams::SYNTHETIC));
            corpus.write(out)?;
            println!("wrote {n} stories to {}", out.display());
        }
        Command::Preprocess {
            stories,
            embeddings,
            triples,
            lexicon,
        } => {
            let out = require_out(&cli.out);
            let cfg = load_config(cli, false)?;
            let inputs = PreprocessInputs {
                stories,
                embeddings,
                triples,
                lexicon: lexicon.as_deref(),
            };
            let ds = preprocess(&cfg, &inputs, out)?;
            println!("wrote {} packs to {}", ds.stories.len(), out.display());
        }
        Command::DumpMasks { data, story, frame } => {
            let (_, ds) = Dataset::read(data)?;
            let s = find_story(&ds.stories, story)?;
            let f = s.frames.get(*frame).ok_or(Error::Index {
                index: *frame,
                len: s.frames.len(),
            })?;
            let text = format!(
                "# story {story} frame {frame}: {}\n# tree: {}\n{}",
                f.caption,
                f.tree,
                f.input.masks.to_text()
            );
            write_or_print(&cli.out, &format!("masks_{story}_{frame}.txt"), &text)?;
        }
        Command::DumpGraph { data, story } => {
            let (_, ds) = Dataset::read(data)?;
            let s = find_story(&ds.stories, story)?;
            let json = serde_json::json!({
                "story_id": s.story_id,
                "triples": s.triples,
                "graph": s.graph.to_json(),
            });
            let text = serde_json::to_string_pretty(&json)? + "\n";
            write_or_print(&cli.out, &format!("graph_{story}.json"), &text)?;
        }
        Command::TrainDemo { data } => {
            let out = require_out(&cli.out);
            let cfg = load_config(cli, false)?;
            let ds = match data {
                Some(dir) => Dataset::read(dir)?.1,
                None => synthetic_dataset(&cfg, cfg.train.stories)?,
            };
            let s = run_demo(&cfg, &ds, out)?;
            println!(
                "trained {} steps on {} stories: total {:.6} -> {:.6}",
                s.steps, s.stories, s.first_total, s.last_total
            );
        }
        Command::Check { corrupt_mask } => {
            let cfg = load_config(cli, false)?;
            let opts = CheckOptions {
                seed: cfg.seed,
                mask_rule: if *corrupt_mask {
                    MaskRule::Corrupted
                } else {
                    MaskRule::Subtree
                },
            };
            let report = run_all(&opts);
            write_or_print(&cli.out, "check.txt", &report.to_table())?;
            if !report.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
