use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cadnet::config::{parse_size, RunConfig};
use cadnet::data::{load_dataset, load_png, make_toy_dataset, save_dataset, save_png, tensor_to_images, MlrDataset, ToyOptions, INDEX_FILE};
use cadnet::eval::{evaluate, export_embeddings, EvalOptions, EvalReport};
use cadnet::train::{telemetry_csv, Ablation, Checkpoint, TrainConfig, Trainer, CHECKPOINT_EXTENSION};
use cadnet::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cadnet", version, about = "Cross-resolution person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy multi-low-resolution dataset directory.
    Synth {
        #[arg(long)]
        ids: usize,
        #[arg(long = "per-id")]
        per_id: usize,
        #[arg(long, default_value = "32x16", value_parser = size_arg)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes the checkpoint, telemetry and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "2,3,4,8", value_delimiter = ',')]
        rates: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for report.json and report.csv; the JSON is printed
        /// either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the recovered HR image G(E(x)) of one PNG.
    Recover {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export w and u embeddings of every dataset image as CSV.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the seven ablation variants with a shared seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn size_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_size(s).ok_or_else(|| format!("expected HxW, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            ids,
            per_id,
            size,
            seed,
            out,
            force,
        } => synth(ids, per_id, size, seed, &out, force),
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            rates,
            trials,
            seed,
            out,
        } => {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let dataset = load_dataset(&data, INDEX_FILE)?;
            let report = evaluate(&model, &dataset, &EvalOptions { rates, trials, seed })?;
            if let Some(out) = out {
                write_report(&report, &out)?;
            }
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Recover { ckpt, input, out } => {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let img = load_png(&input)?;
            let rec = tensor_to_images(&model.recover(&[&img])?)?;
            save_png(&rec[0], &out)
        }
        Command::Export { ckpt, data, out } => {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let dataset = load_dataset(&data, INDEX_FILE)?;
            export_embeddings(&model, &dataset, &out)?;
            println!("wrote {} rows to {}", dataset.len(), out.display());
            Ok(())
        }
        Command::Ablate { config, out } => ablate(&config, &out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn synth(ids: usize, per_id: usize, size: (usize, usize), seed: u64, out: &Path, force: bool) -> Result<()> {
    if ids < 2 {
        return Err(Error::Config(format!("--ids must be at least 2 (triplets need two identities), got {ids}")));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(io_err(out))?;
        }
    }
    let ds = make_toy_dataset(&ToyOptions::new(ids, per_id, size, seed))?;
    save_dataset(&ds, out)?;
    println!(
        "train {} | query {} | gallery {} | references {} | identities {} train + {} test",
        ds.train.len(),
        ds.queries.len(),
        ds.gallery.len(),
        ds.references.len(),
        ds.num_identities,
        ds.num_identities
    );
    Ok(())
}

/// Trains one configuration into `out`, printing one line per epoch.
fn train_into(config: &TrainConfig, dataset: &MlrDataset, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    create_dir(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut t = Trainer::resume(&ckpt, dataset)?;
            t.config.epochs = config.epochs;
            t
        }
        None => Trainer::new(config.clone(), dataset)?,
    };
    let telemetry_path = out.join("telemetry.csv");
    let mut rows = if resume.is_some() && telemetry_path.exists() {
        fs::read_to_string(&telemetry_path).map_err(io_err(&telemetry_path))?
    } else {
        telemetry_csv(&[])
    };
    let total = trainer.config.epochs;
    let new_rows = trainer.run(dataset, |row| {
        let l = row.losses;
        eprintln!(
            "epoch {}/{total}  id {:.4}  tri {:.4}  rec {:.4}  advF {:.4}/{:.4}  advI {:.4}/{:.4}  total {:.4}",
            row.epoch, l.id, l.tri, l.rec, l.adv_f_d, l.adv_f_g, l.adv_i_d, l.adv_i_g, l.total
        );
    })?;
    rows.push_str(telemetry_csv(&new_rows).split_once('\n').map_or("", |(_, body)| body));
    write(&telemetry_path, &rows)?;
    trainer
        .checkpoint()
        .save(&out.join(format!("model.{CHECKPOINT_EXTENSION}")))?;
    Ok(trainer)
}

fn train(config_path: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let dataset = cfg.data.load()?;
    train_into(&cfg.train, &dataset, out, resume)?;
    write(&out.join("config.ini"), &cfg.to_text())?;
    println!("wrote {}", out.join(format!("model.{CHECKPOINT_EXTENSION}")).display());
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    create_dir(out)?;
    write(&out.join("report.json"), &report.to_json())?;
    write(
        &out.join("report.csv"),
        &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )
}

pub const ABLATIONS: [(&str, Ablation); 7] = {
    const NONE: Ablation = Ablation {
        no_adv_feature: false,
        no_adv_image: false,
        no_rec: false,
        no_cls: false,
        f_only: false,
        g_only: false,
    };
    [
        ("full", NONE),
        ("no_adv_image", Ablation { no_adv_image: true, ..NONE }),
        ("no_adv_feature", Ablation { no_adv_feature: true, ..NONE }),
        ("no_rec", Ablation { no_rec: true, ..NONE }),
        ("no_cls", Ablation { no_cls: true, ..NONE }),
        ("f_only", Ablation { f_only: true, ..NONE }),
        ("g_only", Ablation { g_only: true, ..NONE }),
    ]
};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn ablate(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let dataset = cfg.data.load()?;
    create_dir(out)?;
    let mut csv = String::from("variant,ssim,psnr,rank1\n");
    let mut table = format!("{:<16} {:>8} {:>8} {:>8}\n", "variant", "SSIM", "PSNR", "Rank-1");
    for (name, ablation) in ABLATIONS {
        let mut variant = cfg.clone();
        variant.train.ablation = ablation;
        let dir = out.join(name);
        eprintln!("== {name}");
        let trainer = train_into(&variant.train, &dataset, &dir, None)?;
        write(&dir.join("config.ini"), &variant.to_text())?;
        let report = evaluate(&trainer.model, &dataset, &variant.eval)?;
        write_report(&report, &dir)?;
        csv.push_str(&format!(
            "{name},{},{},{:.6}\n",
            report.ssim_mean.map_or(String::new(), |v| format!("{v:.6}")),
            report.psnr_mean.map_or(String::new(), |v| format!("{v:.6}")),
            report.rank1
        ));
        table.push_str(&format!(
            "{name:<16} {:>8} {:>8} {:>8.4}\n",
            opt(report.ssim_mean),
            opt(report.psnr_mean),
            report.rank1
        ));
    }
    write(&out.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}
