//! The five subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde_json::Value;
use wavseg::autodiff::GRAD_CHECK_TOL;
use wavseg::gradsuite::run_suite;
use wavseg::metrics::{csv_report, json_report, DatasetRow};
use wavseg::model::{Checkpoint, Model};
use wavseg::synth::gen_dataset;
use wavseg::tensor::slice_channels;
use wavseg::wavelet::{dwt_haar, edge_mask};
use wavseg::Tensor;

use crate::config::build_config;
use crate::data::{dir_nonempty, load_dataset, Manifest, ManifestEntry, MANIFEST_FORMAT, MANIFEST_NAME};
use crate::imgio::{load_keep_channels, mag_to_unit, save_gray, signed_to_unit};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

// ---- edges ----

/// Decompose an image into its two-level wavelet bands and fused edge mask.
#[derive(Args, Debug)]
pub struct EdgesArgs {
    /// Input image (PNG or PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for the band images and mask.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write each color channel's bands separately instead of collapsing
    /// to grayscale.
    #[arg(long)]
    pub per_band: bool,
}

fn save_band(
    dir: &Path,
    name: &str,
    band: &Tensor,
    per_band: bool,
    signed: bool,
) -> Result<Vec<String>, CliError> {
    let to_unit = |t: &Tensor| if signed { signed_to_unit(t) } else { mag_to_unit(t) };
    let c = band.shape()[1];
    let mut written = Vec::new();
    if per_band && c > 1 {
        for ci in 0..c {
            let plane = slice_channels(band, ci, ci + 1).map_err(CliError::from)?;
            let file = format!("{name}_c{ci}.png");
            save_gray(&dir.join(&file), &to_unit(&plane))?;
            written.push(file);
        }
    } else {
        let plane = if c == 1 { band.clone() } else { band.channel_mean() };
        let file = format!("{name}.png");
        save_gray(&dir.join(&file), &to_unit(&plane))?;
        written.push(file);
    }
    Ok(written)
}

pub fn edges(args: &EdgesArgs) -> Result<(), CliError> {
    let x = load_keep_channels(&args.input)?;
    let [_, c, h, w] = x.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CliError::user(format!(
            "two analysis levels need height and width divisible by 4, got {h}x{w}"
        )));
    }
    ensure_dir(&args.out_dir)?;
    let l1 = dwt_haar(&x)?;
    let l2 = dwt_haar(&l1.a)?;
    let mut written = Vec::new();
    for (name, band) in [
        ("level1_lh", &l1.lh),
        ("level1_hl", &l1.hl),
        ("level1_hh", &l1.hh),
        ("level2_lh", &l2.lh),
        ("level2_hl", &l2.hl),
        ("level2_hh", &l2.hh),
    ] {
        written.extend(save_band(&args.out_dir, name, band, args.per_band, true)?);
    }
    written.extend(save_band(&args.out_dir, "level2_ll", &l2.a, args.per_band, false)?);
    // The fused mask follows the attention block's input branch: collapse to
    // one channel first, then aggregate detail magnitudes.
    let gray = if c == 1 { x.clone() } else { x.channel_mean() };
    let mask = edge_mask(&gray)?;
    save_gray(&args.out_dir.join("edge_mask.png"), &mag_to_unit(&mask))?;
    written.push("edge_mask.png".into());
    println!("wrote {} files to {}", written.len(), args.out_dir.display());
    for f in written {
        println!("  {f}");
    }
    Ok(())
}

// ---- synth ----

/// Generate a synthetic blob-segmentation dataset.
#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory for img_NNNN.png / mask_NNNN.png pairs and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of image/mask pairs.
    #[arg(long)]
    pub count: usize,
    /// Square image side length.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Dataset key; pair (seed, image index) fixes each image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::user("--count must be positive".into()));
    }
    if dir_nonempty(&args.out_dir) && !args.force {
        return Err(CliError::user(format!(
            "{} is not empty; pass --force to write into it",
            args.out_dir.display()
        )));
    }
    ensure_dir(&args.out_dir)?;
    let data = gen_dataset(args.count, args.size, args.seed)?;
    let mut entries = Vec::with_capacity(args.count);
    for (i, s) in data.iter().enumerate() {
        let image = format!("img_{i:04}.png");
        let mask = format!("mask_{i:04}.png");
        save_gray(&args.out_dir.join(&image), &s.image)?;
        save_gray(&args.out_dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry { image, mask });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        seed: args.seed,
        size: args.size,
        count: args.count,
        images: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write_text(&args.out_dir.join(MANIFEST_NAME), &text)?;
    println!(
        "wrote {} image/mask pairs ({}x{}, seed {}) to {}",
        args.count,
        args.size,
        args.size,
        args.seed,
        args.out_dir.display()
    );
    Ok(())
}

// ---- train ----

/// Train a model on a dataset directory.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (from `synth` or matching its layout).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory for checkpoints and the loss history.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning rate; required here or in the config file.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs to run (defaults to the config's value).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable the edge-guided attention blocks.
    #[arg(long)]
    pub no_wega: bool,
    /// Continue from a checkpoint instead of initializing fresh. Only
    /// --epochs may be combined with this.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let data = load_dataset(&args.data_dir)?;
    let mut model = if let Some(ck_path) = &args.resume {
        if args.config.is_some()
            || args.lr.is_some()
            || args.seed.is_some()
            || args.batch_size.is_some()
            || args.no_wega
        {
            return Err(CliError::user(
                "--resume restores the stored config; only --epochs may be combined with it"
                    .into(),
            ));
        }
        Model::from_checkpoint(Checkpoint::load(ck_path)?)?
    } else {
        let text = match &args.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                CliError::user(format!("cannot read config {}: {e}", p.display()))
            })?),
            None => None,
        };
        let mut overrides: Vec<(&str, Value)> = Vec::new();
        if let Some(lr) = args.lr {
            overrides.push(("lr", Value::from(lr)));
        }
        if let Some(s) = args.seed {
            overrides.push(("seed", Value::from(s)));
        }
        if let Some(b) = args.batch_size {
            overrides.push(("batch_size", Value::from(b)));
        }
        if let Some(e) = args.epochs {
            overrides.push(("epochs", Value::from(e)));
        }
        if args.no_wega {
            overrides.push(("use_wega", Value::from(false)));
        }
        Model::new(build_config(text.as_deref(), &overrides)?)?
    };
    let epochs = args.epochs.unwrap_or(model.config.epochs);
    ensure_dir(&args.out_dir)?;

    let target = model.epochs_trained + epochs;
    let mut history = String::from("epoch,loss\n");
    let mut best: Option<(f64, Checkpoint)> = None;
    let t0 = Instant::now();
    // One epoch per call keeps progress visible; stateless per-epoch streams
    // make this identical to a single longer call.
    for _ in 0..epochs {
        let r = model.train(&data, 1)?;
        let loss = r.epoch_losses[0];
        println!("epoch {}/{} loss {loss:.6}", model.epochs_trained, target);
        history.push_str(&format!("{},{}\n", model.epochs_trained, loss));
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, model.checkpoint()));
        }
    }
    let last = model.checkpoint();
    write_text(&args.out_dir.join("last.ckpt.json"), &last.to_json()?)?;
    let best_ck = best.map(|(_, ck)| ck).unwrap_or(last);
    write_text(&args.out_dir.join("best.ckpt.json"), &best_ck.to_json()?)?;
    write_text(&args.out_dir.join("history.csv"), &history)?;
    println!(
        "trained {} epochs on {} images in {:.1}s; checkpoints in {}",
        epochs,
        data.len(),
        t0.elapsed().as_secs_f64(),
        args.out_dir.display()
    );
    Ok(())
}

// ---- eval ----

/// Evaluate a checkpoint on a dataset directory.
#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Directory for report.csv and report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Dataset name in the reports.
    #[arg(long, default_value = "eval")]
    pub name: String,
    /// Also write predicted probability maps as pred_NNNN.png.
    #[arg(long)]
    pub save_masks: bool,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let model = Model::from_checkpoint(Checkpoint::load(&args.checkpoint)?)?;
    let data = load_dataset(&args.data_dir)?;
    let (_, summary) = model.eval_dataset(&data)?;
    ensure_dir(&args.out_dir)?;
    let rows = [DatasetRow { dataset: args.name.clone(), metrics: summary }];
    let csv = csv_report(&rows);
    write_text(&args.out_dir.join("report.csv"), &csv)?;
    write_text(&args.out_dir.join("report.json"), &json_report(&rows)?)?;
    if args.save_masks {
        for (i, s) in data.iter().enumerate() {
            let probs = model.predict(&s.image)?;
            save_gray(&args.out_dir.join(format!("pred_{i:04}.png")), &probs)?;
        }
    }
    print!("{csv}");
    Ok(())
}

// ---- gradcheck ----

/// Compare analytic gradients against central differences.
#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run only cases whose name contains this substring.
    #[arg(long)]
    pub only: Option<String>,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let cases = run_suite(args.seed, args.only.as_deref())?;
    if cases.is_empty() {
        return Err(CliError::user(format!(
            "no gradient-check case matches {:?}",
            args.only.as_deref().unwrap_or("")
        )));
    }
    let mut failed = 0;
    for c in &cases {
        println!(
            "{:<12} max_rel_err {:.3e} over {} coords (worst: {}) ... {}",
            c.name,
            c.max_rel_err,
            c.coords_checked,
            c.worst_param,
            if c.pass { "ok" } else { "FAIL" }
        );
        if !c.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::user(format!(
            "{failed}/{} gradient checks exceeded tolerance {GRAD_CHECK_TOL:e}",
            cases.len()
        )));
    }
    println!("all {} gradient checks within {GRAD_CHECK_TOL:e}", cases.len());
    Ok(())
}
