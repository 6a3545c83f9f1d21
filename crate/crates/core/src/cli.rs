//! The `pmp` command line: dataset generation, cross-validated training,
//! evaluation, Grad-CAM export, gradient checking and head ablations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{export_heatmap_pgm, grad_cam, peak_near_lesion};
use crate::config::ExperimentConfig;
use crate::data::{
    balance_resample, generate_synthetic, kfold_split, load_dataset, save_dataset, Dataset, SplitPlan,
};
use crate::error::{Error, Result};
use crate::gradcheck::{head_instance_check, GradCheckOptions};
use crate::head::HeadVariant;
use crate::metrics::{metrics_csv, write_report, MetricRow, METRICS_HEADER};
use crate::model::Model;
use crate::nn::mix_seed;
use crate::train::{all_positions, evaluate, fit, load_checkpoint, EpochLog};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "pmp", version, about = "Multi-scale patch message passing classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and test datasets under `<out>/data`.
    Gen(Common),
    /// Cross-validate on the training pool and write `metrics.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run a single fold instead of all of them.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate a fold's checkpoint on the held-out test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Export Grad-CAM heatmaps of test images as PGM files.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Number of test images to render.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Resample heatmaps to image resolution.
        #[arg(long)]
        upsample: bool,
    },
    /// Finite-difference check of the head's gradients on a random instance.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every head variant on the full pool and score it on the test set.
    Ablate(Common),
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Caps the worker pool at `PMP_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("PMP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("PMP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size worker pool: {e}")))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status. Failures print one diagnostic line.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gen(common) => cmd_gen(&common.resolve()?).map(|()| 0),
        Command::Train { common, fold } => cmd_train(&common.resolve()?, fold).map(|()| 0),
        Command::Eval { common, fold } => cmd_eval(&common.resolve()?, fold).map(|()| 0),
        Command::Cam {
            common,
            fold,
            count,
            upsample,
        } => cmd_cam(&common.resolve()?, fold, count, upsample).map(|()| 0),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Ablate(common) => cmd_ablate(&common.resolve()?).map(|()| 0),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

/// Training pool with its fold assignment, and the held-out test set.
pub struct Experiment {
    pub pool: Dataset,
    pub plan: SplitPlan,
    pub test: Dataset,
}

/// Loads `data.path` when configured, otherwise generates the data, then
/// balances the pool and assigns folds.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Experiment> {
    let (mut pool, mut plan, test) = match &cfg.data.path {
        Some(dir) => {
            let (pool, plan) = load_dataset(&dir.join("train"))?;
            let test_dir = dir.join("test");
            let test = if test_dir.exists() {
                load_dataset(&test_dir)?.0
            } else {
                Dataset {
                    classes: pool.classes,
                    samples: Vec::new(),
                }
            };
            (pool, plan, test)
        }
        None => {
            let pool = generate_synthetic(&cfg.train_spec(), &[cfg.data.per_class; ExperimentConfig::CLASSES])?;
            let test = if cfg.data.test_per_class > 0 {
                generate_synthetic(&cfg.test_spec(), &[cfg.data.test_per_class; ExperimentConfig::CLASSES])?
            } else {
                Dataset {
                    classes: pool.classes,
                    samples: Vec::new(),
                }
            };
            (pool, None, test)
        }
    };
    if pool.classes != ExperimentConfig::CLASSES {
        return Err(Error::Config(format!(
            "dataset has {} classes, the head expects {}",
            pool.classes,
            ExperimentConfig::CLASSES
        )));
    }
    let side = cfg.backbone.side;
    if let Some(s) = pool.samples.iter().chain(&test.samples).find(|s| s.image.shape() != [side, side, 3]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?}, backbone.side is {side}",
            s.id,
            s.image.shape()
        )));
    }
    if let Some(target) = cfg.data.balance_target {
        if pool.class_counts().iter().any(|&n| n != target) {
            pool = balance_resample(&pool, target, mix_seed(cfg.seed, 3))?;
            plan = None;
        }
    }
    let plan = match plan {
        Some(p) if p.k == cfg.train.folds => p,
        _ => kfold_split(&pool, cfg.train.folds, mix_seed(cfg.seed, 4))?,
    };
    Ok(Experiment { pool, plan, test })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn checkpoint_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out.join("checkpoints").join(name)
}

fn log_epoch(tag: &str) -> impl FnMut(&EpochLog) + '_ {
    move |log| {
        eprintln!(
            "{tag} epoch {:>3} lr {:.2e} loss {:.4}",
            log.epoch, log.lr, log.train_loss
        );
    }
}

fn require_test(test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(Error::Config("no test set: data.test_per_class is 0 or test/ is missing".into()));
    }
    Ok(())
}

fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    let exp = prepare_data(cfg)?;
    let dir = cfg.out.join("data");
    save_dataset(&exp.pool, Some(&exp.plan), &dir.join("train"))?;
    if !exp.test.is_empty() {
        save_dataset(&exp.test, None, &dir.join("test"))?;
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), cfg.to_json())?;
    println!(
        "wrote {} training and {} test samples to {}",
        exp.pool.len(),
        exp.test.len(),
        dir.display()
    );
    Ok(())
}

/// Trains the requested folds. Each fold's model is fit on the other folds
/// for the full schedule and scored on the held-out fold.
pub fn cmd_train(cfg: &ExperimentConfig, only: Option<usize>) -> Result<()> {
    let folds: Vec<usize> = match only {
        Some(f) if f >= cfg.train.folds => {
            return Err(Error::Usage(format!("--fold {f} out of range for {} folds", cfg.train.folds)))
        }
        Some(f) => vec![f],
        None => (0..cfg.train.folds).collect(),
    };
    let exp = prepare_data(cfg)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.json"), cfg.to_json())?;
    let mut results = Vec::with_capacity(folds.len());
    for &fold in &folds {
        let (held_out, train) = exp.plan.partition(&exp.pool, fold);
        let mut model = cfg.init_model(cfg.head.variant, fold as u64)?;
        let tag = format!("fold {fold}");
        fit(
            &mut model,
            &exp.pool,
            &train,
            None,
            &cfg.train,
            Some(&checkpoint_dir(cfg, &format!("fold{fold}"))),
            log_epoch(&tag),
        )?;
        let eval = evaluate(&model, &exp.pool, &held_out)?;
        println!("fold {fold}: accuracy {:.4}", eval.accuracy());
        results.push((fold, eval.confusion));
    }
    write_report(&cfg.out, &results)?;
    println!("wrote {}", cfg.out.join("metrics.csv").display());
    Ok(())
}

fn load_fold_model(cfg: &ExperimentConfig, fold: usize) -> Result<Model> {
    let dir = checkpoint_dir(cfg, &format!("fold{fold}"));
    let (model, _, _) = load_checkpoint(&dir)?;
    if model.backbone.config != cfg.backbone {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different backbone configuration",
            dir.display()
        )));
    }
    Ok(model)
}

fn cmd_eval(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    let model = load_fold_model(cfg, fold)?;
    let exp = prepare_data(cfg)?;
    require_test(&exp.test)?;
    let eval = evaluate(&model, &exp.test, &all_positions(&exp.test))?;
    let row = MetricRow::from_confusion(&eval.confusion)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(format!("eval_fold{fold}.csv")), metrics_csv(&[(fold, row)]))?;
    write_file(&cfg.out.join(format!("eval_confusion_fold{fold}.csv")), eval.confusion.to_csv())?;
    println!(
        "test accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} kappa {:.4} mean loss {:.4}",
        row.accuracy, row.precision_macro, row.recall_macro, row.f1_macro, row.kappa, eval.mean_loss
    );
    Ok(())
}

fn cmd_cam(cfg: &ExperimentConfig, fold: usize, count: usize, upsample: bool) -> Result<()> {
    let model = load_fold_model(cfg, fold)?;
    let exp = prepare_data(cfg)?;
    require_test(&exp.test)?;
    let dir = cfg.out.join("cam");
    create_dir(&dir)?;
    let side = cfg.backbone.side;
    let (mut hits, mut located) = (0usize, 0usize);
    for sample in exp.test.samples.iter().take(count) {
        let hm = grad_cam(&model, &sample.image, sample.label)?;
        if let [lesion] = sample.lesions.as_slice() {
            located += 1;
            hits += usize::from(peak_near_lesion(&hm, lesion, side));
        }
        let hm = if upsample { hm.upsample_bilinear(side, side)? } else { hm };
        export_heatmap_pgm(&hm, &dir.join(format!("{:06}_class{}.pgm", sample.id, sample.label)))?;
    }
    println!("wrote {} heatmaps to {}", count.min(exp.test.len()), dir.display());
    if located > 0 {
        println!("peak within one cell of the lesion: {hits}/{located}");
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let report = head_instance_check(seed, GradCheckOptions::default())?;
    let err = report.max_rel_error();
    println!(
        "max relative error {err:.3e} over {} coordinates ({})",
        report.coordinates,
        report.worst().map_or("", |p| p.name.as_str())
    );
    std::io::stdout().flush().ok();
    Ok(if err <= GRADCHECK_TOLERANCE { 0 } else { 1 })
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let exp = prepare_data(cfg)?;
    require_test(&exp.test)?;
    create_dir(&cfg.out)?;
    let train = all_positions(&exp.pool);
    let test = all_positions(&exp.test);
    let mut csv = METRICS_HEADER.replacen("fold", "variant", 1);
    csv.push('\n');
    for variant in HeadVariant::ALL {
        let mut model = cfg.init_model(variant, 0)?;
        let tag = variant.name();
        fit(
            &mut model,
            &exp.pool,
            &train,
            None,
            &cfg.train,
            Some(&checkpoint_dir(cfg, tag)),
            log_epoch(tag),
        )?;
        let eval = evaluate(&model, &exp.test, &test)?;
        let r = MetricRow::from_confusion(&eval.confusion)?;
        println!("{tag}: test accuracy {:.4}", r.accuracy);
        csv.push_str(&format!(
            "{tag},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro, r.kappa
        ));
    }
    write_file(&cfg.out.join("ablation.csv"), csv)?;
    Ok(())
}
