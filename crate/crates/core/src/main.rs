use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use filtervit::bench::{run_bench, BenchGrid};
use filtervit::data::{eval_transform, load_cifar10_binary, read_ppm, Dataset, EvalPolicy, LabeledImage};
use filtervit::interpret::{coverage_of, extract_masks, render_overlay, Colormap, DEFAULT_ALPHA};
use filtervit::model::Checkpoint;
use filtervit::tensor::DType;
use filtervit::train::{ablate, evaluate, train, DataSpec, TrainConfig, TrainOptions};
use filtervit::{Element, Error, Result};

#[derive(Parser)]
#[command(name = "filtervit", version, about = "Top-K filtered attention: train, evaluate, ablate, explain, benchmark")]
struct Cli {
    /// Run every data-parallel helper on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 binary batch, or a JSON data spec (its validation split is used).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Filter vs random-dropout selection from shared initial weights.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay each filter stage's importance map on an input image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Filter stage index (0-based) or `all`.
        #[arg(long, default_value = "all")]
        layer: String,
    },
    /// Dense vs filtered vs dropout vs pooled attention latency.
    Bench {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        dtype: Precision,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// The run configuration a trainer stored in the checkpoint, if any.
fn stored_config<T: Element>(ck: &Checkpoint<T>) -> Option<TrainConfig> {
    serde_json::from_value(ck.meta.extra.clone()).ok()
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let ck = Checkpoint::<f32>::load(path)?;
    Ok(stored_config(&ck).map_or(DType::F32, |c| c.dtype))
}

fn eval_policy<T: Element>(ck: &Checkpoint<T>) -> EvalPolicy {
    stored_config(ck).map_or_else(
        || EvalPolicy { resize: ck.config.input_size, crop: ck.config.input_size, normalization: Default::default() },
        |c| c.eval,
    )
}

fn load_eval_data(path: &Path) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "json") {
        let spec: DataSpec = read_json(path)?;
        Ok(spec.load()?.1)
    } else {
        load_cifar10_binary(path)
    }
}

fn run_train<T: Element>(cfg: &TrainConfig, out: &Path, resume: Option<PathBuf>) -> Result<()> {
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume, ..Default::default() };
    let outcome = train::<T>(cfg, &opts)?;
    println!(
        "trained {} epochs ({} steps); best val acc {:.4} at epoch {}",
        outcome.metrics.len(),
        outcome.steps,
        outcome.best_val_acc.unwrap_or(0.0),
        outcome.best_epoch.unwrap_or(0)
    );
    Ok(())
}

fn run_eval<T: Element>(checkpoint: &Path, data: &Path, batch: usize) -> Result<()> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let model = ck.to_model()?;
    let policy = eval_policy(&ck);
    let ds = load_eval_data(data)?.map(|im| eval_transform(im, &policy));
    let r = evaluate(&model, &ds, batch)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn run_explain<T: Element>(checkpoint: &Path, image: &Path, out: &Path, alpha: f64, layer: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("overlay alpha {alpha} is outside [0, 1]")));
    }
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let model = ck.to_model()?;
    let base = read_ppm(image)?.to_tensor();
    let raw = LabeledImage { pixels: base.clone(), label: 0, region: None };
    let x = eval_transform(&raw, &eval_policy(&ck)).pixels.cast::<T>();
    let ex = extract_masks(&model, &x)?;
    let wanted: Vec<usize> = match layer {
        "all" => (0..ex.records.len()).collect(),
        n => {
            let i: usize = n.parse().map_err(|_| Error::config("layer", format!("`{n}` is neither a stage index nor `all`")))?;
            if i >= ex.records.len() {
                return Err(Error::config("layer", format!("{i} is past the last filter stage ({})", ex.records.len() - 1)));
            }
            vec![i]
        }
    };
    fs::create_dir_all(out)?;
    for &i in &wanted {
        let m = &ex.records[i].importance;
        let mask: Vec<f64> = m.sample(0).iter().map(|v| v.to_f64c()).collect();
        let bytes = render_overlay(&base, &mask, m.height(), m.width(), alpha, Colormap::BlueRed)?;
        let path = out.join(format!("stage{i}.ppm"));
        fs::write(&path, bytes)?;
        info!("wrote {}", path.display());
    }
    let coverage = coverage_of(&ex, 0, None)?;
    let logits: Vec<f64> = ex.logits.data().iter().map(|v| v.to_f64c()).collect();
    let report = serde_json::json!({
        "image": image.display().to_string(),
        "alpha": alpha,
        "colormap": Colormap::BlueRed,
        "logits": logits,
        "predicted": filtervit::train::argmax(ex.logits.data()),
        "stages": coverage.stages,
    });
    fs::write(out.join("coverage.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{} overlay(s) and coverage.json written to {}", wanted.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        filtervit::par::set_parallel(false);
    }
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            let cfg: TrainConfig = read_json(&config)?;
            match cfg.dtype {
                DType::F32 => run_train::<f32>(&cfg, &out, resume),
                DType::F64 => run_train::<f64>(&cfg, &out, resume),
            }
        }
        Cmd::Eval { checkpoint, data, batch } => match checkpoint_dtype(&checkpoint)? {
            DType::F32 => run_eval::<f32>(&checkpoint, &data, batch),
            DType::F64 => run_eval::<f64>(&checkpoint, &data, batch),
        },
        Cmd::Ablate { config, seeds, out } => {
            let cfg: TrainConfig = read_json(&config)?;
            let report = match cfg.dtype {
                DType::F32 => ablate::<f32>(&cfg, &seeds, Some(&out))?,
                DType::F64 => ablate::<f64>(&cfg, &seeds, Some(&out))?,
            };
            print!("{}", report.table());
            Ok(())
        }
        Cmd::Explain { checkpoint, image, out, alpha, layer } => match checkpoint_dtype(&checkpoint)? {
            DType::F32 => run_explain::<f32>(&checkpoint, &image, &out, alpha, &layer),
            DType::F64 => run_explain::<f64>(&checkpoint, &image, &out, alpha, &layer),
        },
        Cmd::Bench { grid, out, dtype } => {
            let grid: BenchGrid = read_json(&grid)?;
            let report = match dtype {
                Precision::F32 => run_bench::<f32>(&grid)?,
                Precision::F64 => run_bench::<f64>(&grid)?,
            };
            fs::write(&out, report.to_csv())?;
            fs::write(out.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
