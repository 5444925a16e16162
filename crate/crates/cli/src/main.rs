use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use virtue_core::checkpoint::Checkpoint;
use virtue_core::embedder::{EmbedInput, Side, TaskInstruction};
use virtue_core::encoders::{Bbox, Image, VisualPrompt};
use virtue_core::numkernel::{snapshot, Tensor};
use virtue_core::retrieval::{format_bbox, EmbeddingIndex};
use virtue_scar::filter::Status;
use virtue_scar::pipeline::{read_jsonl, write_jsonl};
use virtue_scar::{
    emit, filter_all, generate, ingest, CocoRecord, Format, GenerateOptions, GeneratorClient, HttpClient,
    HttpVerifier, IngestOptions, Lexicon, MockClient, RuleExtractor, Split, Stats, Verifier,
};
use virtue_cli::data::write_synth_split;
use virtue_cli::run::{build_index, eval_split, train_run, RunConfig, ScorerKind};
use virtue_cli::server::{serve, AppState};

#[derive(Parser)]
#[command(name = "virtue", version, about = "Prompt-conditioned embedder and caption retrieval benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed one input and print the vector, or write it as a tensor file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Visual prompt as JSON, e.g. '{"type":"box","x_min":0.1,...}'.
        #[arg(long)]
        prompt: Option<String>,
        /// Absolute box `x,y,w,h` for the instruction text.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        bbox: Option<Vec<f64>>,
        #[arg(long, default_value = "scar")]
        instruction_id: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a TOML or JSON run file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// precision@1 on a split file, one column per dataset.
    Eval {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        scorer: ScorerKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic split with its images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long, default_value_t = 150)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed every candidate caption of a split into a persistent index.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with split files and their images.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Benchmark construction pipeline.
    Scar {
        #[command(subcommand)]
        command: ScarCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientKind {
    Mock,
    Http,
}

#[derive(clap::Args)]
struct ClientArgs {
    #[arg(long, value_enum, default_value = "mock")]
    client: ClientKind,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ClientArgs {
    fn http(&self) -> Result<HttpClient> {
        let endpoint = self.endpoint.as_deref().context("--client http needs --endpoint")?;
        Ok(HttpClient::new(endpoint, Duration::from_secs(self.timeout_secs)))
    }

    fn generator(&self) -> Result<Box<dyn GeneratorClient>> {
        Ok(match self.client {
            ClientKind::Mock => Box::new(MockClient::new(self.seed)),
            ClientKind::Http => Box::new(self.http()?),
        })
    }

    fn verifier(&self) -> Result<Box<dyn Verifier>> {
        Ok(match self.client {
            ClientKind::Mock => Box::new(RuleExtractor),
            ClientKind::Http => Box::new(HttpVerifier::new(self.http()?)),
        })
    }
}

#[derive(Subcommand)]
enum ScarCommand {
    /// Normalise a source annotation file into records.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: Format,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        window: usize,
    },
    /// Sample objects and generate candidates for each.
    Generate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Run the filter cascade; writes passed samples and per-sample reports.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reports: PathBuf,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Write a split file (and the review queue for the evaluation split).
    Emit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print and save dataset statistics for an output directory.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Embed {
            checkpoint,
            image,
            prompt,
            bbox,
            instruction_id,
            text,
            out,
        } => embed(&checkpoint, image, prompt, bbox, &instruction_id, text, out),
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train_run(&cfg, resume.as_deref())?;
            if let Some(last) = summary.log.last() {
                println!("step {} loss {:.4}", last.step, last.loss);
            }
            println!("checkpoint {}", summary.checkpoint.display());
            Ok(())
        }
        Command::Eval {
            split,
            checkpoint,
            scorer,
            seed,
            json,
        } => {
            let report = eval_split(&split, checkpoint.as_deref(), scorer, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
                for (id, e) in &report.errors {
                    eprintln!("excluded {id}: {e}");
                }
            }
            Ok(())
        }
        Command::Synth {
            out,
            split,
            scenes,
            seed,
        } => {
            let file = write_synth_split(&out, &split, scenes, seed)?;
            println!("{}", file.display());
            Ok(())
        }
        Command::Index { checkpoint, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let index = build_index(&ck, &split)?;
            index.save(&out)?;
            println!("{} entries, fingerprint {}", index.len(), index.fingerprint());
            Ok(())
        }
        Command::Serve {
            checkpoint,
            data,
            index,
            bind,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut state = AppState::new(ck.model, ck.params);
            if let Some(d) = data {
                state = state.with_data_dir(d);
            }
            if let Some(dir) = index {
                let index = EmbeddingIndex::load(&dir)?;
                index.check_fingerprint(&state.fingerprint)?;
                state.set_index(index);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(state), &bind))
        }
        Command::Scar { command } => scar(command),
    }
}

fn embed(
    checkpoint: &Path,
    image: Option<PathBuf>,
    prompt: Option<String>,
    bbox: Option<Vec<f64>>,
    instruction_id: &str,
    text: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let image = match image {
        Some(p) => Some(Arc::new(Image::load(&p)?)),
        None => None,
    };
    let prompt: Option<VisualPrompt> = match prompt {
        Some(p) => Some(serde_json::from_str(&p).context("parsing --prompt")?),
        None => None,
    };
    let bbox_text = match (bbox, &image) {
        (Some(b), _) => Some(format_bbox(&Bbox::new(b[0], b[1], b[2], b[3]))?),
        (None, Some(img)) => Some(format_bbox(&Bbox::new(0.0, 0.0, img.width() as f64, img.height() as f64))?),
        (None, None) => None,
    };
    let input = EmbedInput {
        side: Side::Query,
        image,
        prompt,
        instruction: TaskInstruction::by_id(instruction_id)?,
        bbox_text,
        text,
    };
    let z = ck.model.embed(&ck.params, &input)?;
    match out {
        Some(path) => {
            snapshot::save(&path, &[&Tensor::vector(z.values().to_vec())])?;
            println!("{}", path.display());
        }
        None => println!("{}", serde_json::to_string(z.values())?),
    }
    Ok(())
}

fn scar(command: ScarCommand) -> Result<()> {
    match command {
        ScarCommand::Ingest {
            input,
            format,
            dataset,
            out,
            window,
        } => {
            let opts = IngestOptions {
                window,
                ..IngestOptions::new(&dataset)
            };
            let mut stream = ingest(&input, format, &opts)?;
            let records = stream.by_ref().collect::<virtue_scar::Result<Vec<CocoRecord>>>()?;
            write_jsonl(&out, &records)?;
            for s in stream.skipped() {
                log::warn!("skipped {s:?}");
            }
            println!("{} records", records.len());
        }
        ScarCommand::Generate { records, out, client } => {
            let recs: Vec<CocoRecord> = read_jsonl(&records)?;
            let generated = generate(recs.into_iter().map(Ok), client.generator()?.as_ref(), &GenerateOptions::new(client.seed))?;
            write_jsonl(&out, &generated.samples)?;
            println!("{} samples, {} dropped", generated.samples.len(), generated.dropped.len());
        }
        ScarCommand::Filter {
            input,
            lexicon,
            out,
            reports,
            client,
        } => {
            let lex = Lexicon::load(&lexicon)?;
            let filtered = filter_all(read_jsonl(&input)?, client.verifier()?.as_ref(), &lex)?;
            write_jsonl(&out, &filtered.passed)?;
            write_jsonl(&reports, &filtered.reports)?;
            let failed = filtered.reports.iter().filter(|r| r.status == Status::Failed).count();
            println!(
                "{} passed, {failed} failed, {} paused",
                filtered.passed.len(),
                filtered.paused.len()
            );
        }
        ScarCommand::Emit { input, split, out } => {
            std::fs::create_dir_all(&out)?;
            let emitted = emit(&read_jsonl(&input)?, split, &out)?;
            println!("{} samples -> {}", emitted.count, emitted.split_file.display());
        }
        ScarCommand::Stats { dir } => {
            let stats = Stats::from_dir(&dir)?;
            let path = stats.save(&dir)?;
            print!("{}", stats.table());
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}
