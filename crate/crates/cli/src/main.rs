use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ftclip::experiments::{bench_mask, evaluate_split, train_model, MaskBenchRow};
use ftclip::ids::{parse_with_vocab, tokenize};
use ftclip::train::LogRow;
use ftclip::{
    load_checkpoint, make_splits, parse_str, save_checkpoint, EncoderOptions, Error, GlyphDataset,
    GlyphImage, Model, ModelConfig, RadicalVocab, Split, SplitProtocol, SynthParams,
};

#[derive(Parser)]
#[command(name = "ftclip", version, about = "Formation-tree contrastive character recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Json,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an IDS and print its formation tree.
    Parse {
        ids: String,
        #[arg(long, value_enum, default_value = "json")]
        emit: Emit,
    },
    /// Generate a synthetic glyph dataset.
    Synth {
        #[arg(long, default_value_t = 40)]
        radicals: usize,
        #[arg(long, default_value_t = 400)]
        chars: usize,
        #[arg(long, default_value_t = 20)]
        renders: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `char-zeroshot:M` or `radical-zeroshot:N`.
        #[arg(long, default_value = "char-zeroshot:300")]
        protocol: SplitProtocol,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split of a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON model configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Full attention over the preorder sequence with learned positions.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        no_azimuth_pe: bool,
        /// Pool a virtual node instead of the root.
        #[arg(long)]
        special_node: bool,
        /// Keep unseen radicals unmasked in inference galleries.
        #[arg(long)]
        no_tree_mask: bool,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Training log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and print the report as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print the embedding of a tree or an image as a JSON array.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        ids: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Train once per mask ratio and print step time and accuracy as CSV.
    BenchMask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        ratios: Vec<f64>,
        /// Stop each run after this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig, Error> {
    let config = match path {
        Some(p) => ModelConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Parse { ids, emit } => {
            let tree = parse_str(&ids)?;
            match emit {
                Emit::Json => print_json(&tree.to_json())?,
                Emit::Dot => print!("{}", tree.to_dot(None)),
            }
        }
        Command::Synth {
            radicals,
            chars,
            renders,
            seed,
            protocol,
            out,
        } => {
            let params = SynthParams {
                radicals,
                chars,
                renders,
                seed,
                protocol,
            };
            let dataset = make_splits(&params)?;
            dataset.write(&out)?;
            eprintln!(
                "wrote {} characters ({} train, {} test), {} images to {}",
                dataset.characters.len(),
                dataset.characters_in(Split::Train).count(),
                dataset.characters_in(Split::Test).count(),
                dataset.samples.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            mask_ratio,
            sequential,
            no_azimuth_pe,
            special_node,
            no_tree_mask,
            max_steps,
            log,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(r) = mask_ratio {
                config.mask_ratio = r;
                config.validate()?;
            }
            let options = EncoderOptions {
                sequential,
                azimuth_pe: !no_azimuth_pe,
                special_node,
                tree_mask: !no_tree_mask,
            };
            let dataset = GlyphDataset::read(&data)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.csv");
                p.into()
            });
            let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
            writeln!(log_file, "{}", LogRow::CSV_HEADER)?;
            let mut write_err = None;
            let (model, rows) = train_model(&dataset, &config, options, max_steps, |row| {
                if let Err(e) = writeln!(log_file, "{}", row.csv()) {
                    write_err.get_or_insert(e);
                }
                if row.step % 50 == 0 {
                    eprintln!("step {:>6}  loss {:.4}  {:.1}s", row.step, row.loss, row.wallclock_ms / 1e3);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            log_file.flush()?;
            save_checkpoint(&model, &out)?;
            eprintln!("{} steps; checkpoint written to {}", rows.len(), out.display());
        }
        Command::Eval { data, ckpt, split } => {
            let model: Model<f32> = load_checkpoint(&ckpt)?;
            let dataset = GlyphDataset::read(&data)?;
            print_json(&evaluate_split(&model, &dataset, split)?)?;
        }
        Command::Encode { ckpt, ids, image } => {
            let model: Model<f32> = load_checkpoint(&ckpt)?;
            let embedding = match (ids, image) {
                (Some(ids), _) => {
                    let vocab = RadicalVocab::numbered(model.radicals);
                    let tree = parse_with_vocab(&tokenize(&ids)?, &vocab)?;
                    model.encode_trees(&[&tree])?
                }
                (None, Some(path)) => model.encode_images(&[&GlyphImage::load_pgm(&path)?])?,
                (None, None) => return Err(Error::Usage("pass --ids or --image".into())),
            };
            print_json(&embedding.row(0))?;
        }
        Command::BenchMask {
            data,
            config,
            ratios,
            max_steps,
        } => {
            let config = load_config(config.as_deref())?;
            let dataset = GlyphDataset::read(&data)?;
            let rows = bench_mask(&dataset, &config, EncoderOptions::default(), &ratios, max_steps)?;
            println!("{}", MaskBenchRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
