use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use futureg_core::ablation::{run_ablation, write_ablation_csv};
use futureg_core::boundary::{
    model_boundary_report, read_embeddings, split_embeddings, write_density_csv, write_embeddings, write_entropy_csv,
};
use futureg_core::checkpoint;
use futureg_core::config::ExperimentConfig;
use futureg_core::data::dense_noise;
use futureg_core::evaluate::{evaluate, score_image, write_error_map, write_metrics_csv};
use futureg_core::gradcheck::{check, GradModule};
use futureg_core::params::SeedStream;
use futureg_core::patch::ImageSample;
use futureg_core::stats::{boundary_report, BoundaryOptions, DensityReport};
use futureg_core::train::{loss_plot_svg, prepare_split, train, write_loss_csv};
use futureg_core::{Error, Result};

use crate::Command;

pub const SEED_VAR: &str = "FUTUREG_SEED";

#[derive(Args, Debug)]
pub struct BoundaryArgs {
    /// Extract latents from this checkpoint and its dataset.
    #[arg(long, conflicts_with_all = ["single", "multi", "anomalies"])]
    checkpoint: Option<PathBuf>,
    /// Also write the extracted embeddings files into this directory.
    #[arg(long, requires = "checkpoint")]
    dump_embeddings: Option<PathBuf>,
    /// Embeddings file of the single normal class.
    #[arg(long, requires_all = ["multi", "anomalies", "components"])]
    single: Option<PathBuf>,
    /// Embeddings file of all normal classes.
    #[arg(long)]
    multi: Option<PathBuf>,
    /// Embeddings file of anomalous samples.
    #[arg(long)]
    anomalies: Option<PathBuf>,
    /// Mixture components when reading embeddings files.
    #[arg(long)]
    components: Option<usize>,
    /// PCA width for embeddings files; 0 skips PCA.
    #[arg(long, default_value_t = 16)]
    pca_dims: usize,
    /// Seed for mixture initialisation with embeddings files.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "density.csv")]
    out: PathBuf,
}

/// Loads a config file and applies the seed override from the environment.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn apply_seed_override(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_VAR) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => run_train(&config, &out),
        Command::Eval {
            checkpoint,
            out,
            error_maps,
            ..
        } => run_eval(&checkpoint, &out, error_maps.as_deref()),
        Command::Score {
            checkpoint,
            image,
            error_map,
        } => run_score(&checkpoint, &image, error_map.as_deref()),
        Command::BoundaryStats(args) => run_boundary(&args),
        Command::Entropy {
            config,
            split,
            noise,
            bins,
            out,
        } => run_entropy(config.as_deref(), &split, noise, bins, &out),
        Command::Ablate { config, axis, out } => {
            let cfg = load_config(&config)?;
            let rows = run_ablation(&cfg, axis.parse()?)?;
            write_ablation_csv(&rows, &out)?;
            for r in &rows {
                println!("{}\tauroc {:.4}\taccuracy {:.4}", r.setting, r.auroc, r.accuracy);
            }
            Ok(())
        }
        Command::Gradcheck { module } => run_gradcheck(module.as_deref()),
    }
}

fn run_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let outcome = train(&cfg)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&outcome.model, &outcome.meta(), &ckpt)?;
    write_loss_csv(&outcome.history, &out.join("loss.csv"))?;
    fs::write(out.join("loss.svg"), loss_plot_svg(&outcome.history))?;
    match outcome.history.last() {
        Some(e) => println!(
            "trained {} epochs: l_rec {:.5} l_cls {:.5} total {:.5}",
            outcome.history.len(),
            e.loss.l_rec,
            e.loss.l_cls,
            e.loss.total
        ),
        None => println!("no epochs run; saved initial weights"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn run_eval(ckpt: &Path, out: &Path, error_maps: Option<&Path>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    let split = prepare_split(&model.config)?;
    let eval = evaluate(&model, &split)?;
    write_metrics_csv(&eval, &split.normal_classes, out)?;
    if let Some(dir) = error_maps {
        fs::create_dir_all(dir)?;
        for s in &eval.samples {
            write_error_map(&s.patch_errors, model.grid.cols(), &dir.join(format!("{}.csv", s.id)))?;
        }
    }
    println!("auroc {:.4} accuracy {:.4} ({} samples)", eval.auroc, eval.accuracy, eval.samples.len());
    Ok(())
}

fn load_image(path: &Path) -> Result<ImageSample> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format {
                offset: 0,
                reason: other.to_string(),
            },
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    ImageSample::new(h as usize, w as usize, 1, pixels, 0)
}

fn run_score(ckpt: &Path, image: &Path, error_map: Option<&Path>) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt)?;
    let img = load_image(image)?;
    let scored = score_image(&model, 0, &img, false)?;
    let class = model.config.data.normal_classes[scored.predicted_class];
    println!("score {:.6} predicted_class {class}", scored.score);
    if let Some(p) = error_map {
        write_error_map(&scored.patch_errors, model.grid.cols(), p)?;
    }
    Ok(())
}

fn print_density(r: &DensityReport) {
    println!(
        "single-class: mean density {:.6e}, mean log-density {:.4}",
        r.mean_single_density, r.mean_single_log_density
    );
    println!(
        "multi-class ({} components): mean density {:.6e}, mean log-density {:.4}",
        r.components, r.mean_multi_density, r.mean_multi_log_density
    );
    println!("multi exceeds single: {}", r.multi_exceeds_single);
}

fn run_boundary(args: &BoundaryArgs) -> Result<()> {
    let report = if let Some(ckpt) = &args.checkpoint {
        let (model, _) = checkpoint::load(ckpt)?;
        let split = prepare_split(&model.config)?;
        if let Some(dir) = &args.dump_embeddings {
            let e = split_embeddings(&model, &split)?;
            fs::create_dir_all(dir)?;
            write_embeddings(&e.single, &dir.join("single.bin"))?;
            write_embeddings(&e.multi, &dir.join("multi.bin"))?;
            write_embeddings(&e.anomalies, &dir.join("anomalies.bin"))?;
        }
        model_boundary_report(&model, &split)?
    } else {
        let (Some(single), Some(multi), Some(anomalies), Some(k)) =
            (&args.single, &args.multi, &args.anomalies, args.components)
        else {
            return Err(Error::Config(
                "pass --checkpoint, or --single, --multi, --anomalies and --components".into(),
            ));
        };
        let options = BoundaryOptions {
            pca_dims: (args.pca_dims > 0).then_some(args.pca_dims),
            ..BoundaryOptions::default()
        };
        let mut rng = SeedStream::new(args.seed).rng("boundary.gmm");
        boundary_report(
            &read_embeddings(single)?,
            &read_embeddings(multi)?,
            &read_embeddings(anomalies)?,
            k,
            &options,
            &mut rng,
        )?
    };
    write_density_csv(&report, &args.out)?;
    print_density(&report);
    Ok(())
}

fn run_entropy(config: Option<&Path>, split: &str, noise: Option<usize>, bins: usize, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            apply_seed_override(&mut c)?;
            c
        }
    };
    let images = match noise {
        Some(n) => {
            let size = cfg.data.image_size;
            let mut rng = SeedStream::new(cfg.seed).rng("entropy.noise");
            dense_noise(n, size, &mut rng)
                .into_iter()
                .map(|px| ImageSample::new(size, size, 1, px, 0))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            // every class counts here, not only the normal ones
            cfg.data.normal_classes = (0..cfg.data.classes).collect();
            cfg.boundary.single_class = 0;
            let d = prepare_split(&cfg)?;
            if split == "train" {
                d.train
            } else {
                d.test
            }
        }
    };
    let mean = write_entropy_csv(&images, bins, out)?;
    println!("mean entropy {mean:.4} bits over {} images", images.len());
    Ok(())
}

fn run_gradcheck(module: Option<&str>) -> Result<()> {
    let modules = match module {
        Some(name) => vec![name.parse::<GradModule>()?],
        None => GradModule::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for m in modules {
        let r = check(m)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<12} max relative error {:.3e}  {verdict}", m.name(), r.max_rel_error);
        if !r.passed() {
            failed.push(m.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient mismatch in {}", failed.join(", "))))
    }
}
