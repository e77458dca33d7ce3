use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sigmeta::episodes::{mark_forgery_availability, split_users, SampleBatch, SampleClass, UserTask};
use sigmeta::evaluation::{evaluate_protocol, roc_curve, score_user, validation_metrics, ProtocolConfig};
use sigmeta::metalearn::{adapt, meta_train};
use sigmeta::netmodel::{init_parameters, SignatureNet};
use sigmeta::preprocess::{crop, preprocess_signature, CanonicalImage, CropMode};
use sigmeta::store::{
    curve_csv, load_checkpoint, load_dataset, parse_flat, read_image, save_checkpoint, write_dataset, Checkpoint,
    CheckpointMeta, EnrollmentRecord, RunConfig,
};
use sigmeta::synthdata::{dataset_specs, render_user, SynthUserSpec};
use sigmeta::{Error, Tensor};

const DATA_ENV: &str = "SIGMETA_DATA";

/// Writer-adaptive offline signature verification.
#[derive(Parser, Debug)]
#[command(name = "sigmeta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Meta-train on a dataset and write the best checkpoint.
    MetaTrain(MetaTrainArgs),
    /// Adapt a checkpoint to one writer's references.
    Adapt(AdaptArgs),
    /// Score one image against an enrollment.
    Verify(VerifyArgs),
    /// Run the repeated-subsampling protocol on a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    users: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    genuine: usize,
    #[arg(long, default_value_t = 30)]
    skilled: usize,
}

#[derive(Args, Debug)]
struct MetaTrainArgs {
    /// Dataset root (defaults to $SIGMETA_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training-curve CSV (defaults to the checkpoint path with `.curve.csv`).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Config overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Folder of genuine reference images.
    #[arg(long)]
    refs: PathBuf,
    /// Optional folder of other writers' genuines used as random forgeries.
    #[arg(long)]
    rf: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    user: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    enroll: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root (defaults to $SIGMETA_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 5)]
    refs: usize,
    /// Inner steps (defaults to the checkpoint's training value).
    #[arg(long)]
    k: Option<usize>,
    /// Task rate (defaults to the checkpoint's training value).
    #[arg(long)]
    alpha: Option<f64>,
    /// Random forgeries per adaptation set (defaults to the training value).
    #[arg(long)]
    rf_adapt: Option<usize>,
    #[arg(long, default_value_t = 10)]
    rf_query: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate every user instead of the checkpoint's test split.
    #[arg(long)]
    all_users: bool,
    /// Output prefix: writes `<out>.json`, `<out>.csv` and `<out>.roc.csv`.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parameter(_) | Error::Contract(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn set_jobs(jobs: Option<usize>) -> sigmeta::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::Parameter("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(e.to_string()))?;
    }
    Ok(())
}

fn data_root(arg: Option<PathBuf>) -> sigmeta::Result<PathBuf> {
    arg.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Parameter(format!("no --data given and ${DATA_ENV} is unset")))
}

fn write(path: &Path, text: &str) -> sigmeta::Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(a: SynthArgs) -> sigmeta::Result<()> {
    let template = SynthUserSpec {
        n_genuine: a.genuine,
        n_skilled: a.skilled,
        ..SynthUserSpec::new(0, 0)
    };
    let specs = dataset_specs(a.users, a.seed, &template)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("cannot create {}: {e}", a.out.display())))?;
    for chunk in specs.chunks(16) {
        let raw = chunk.iter().map(render_user).collect::<sigmeta::Result<Vec<_>>>()?;
        write_dataset(&a.out, &raw)?;
    }
    println!("wrote {} users to {}", a.users, a.out.display());
    Ok(())
}

fn load_users(root: &Path) -> sigmeta::Result<Vec<UserTask>> {
    let data = load_dataset(root)?;
    if data.skipped > 0 {
        eprintln!("warning: skipped {} unreadable images", data.skipped);
    }
    Ok(data.users)
}

fn meta_train_cmd(a: MetaTrainArgs) -> sigmeta::Result<()> {
    set_jobs(a.jobs)?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply(&parse_flat(&text)?)?;
    }
    cfg.apply(&parse_flat(&a.overrides.join("\n"))?)?;
    let users = load_users(&data_root(a.data)?)?;
    let split = split_users(users, &cfg.split, cfg.meta.seed)?;
    let split = mark_forgery_availability(split, cfg.forgery_fraction, cfg.meta.seed)?;
    eprintln!(
        "meta-train {} / val {} / test {} users, alpha {}",
        split.meta_train.len(),
        split.meta_val.len(),
        split.meta_test.len(),
        cfg.effective_alpha()
    );
    let model = SignatureNet;
    let protocol = cfg.validation_protocol();
    let val_users = split.meta_val.clone();
    let outcome = meta_train(
        &model,
        init_parameters(cfg.init_seed),
        &cfg.meta_config(),
        &split,
        &cfg.episode,
        |theta, _| validation_metrics(&model, theta, &val_users, &protocol),
        |row| {
            eprintln!(
                "epoch {:>3}  meta-loss {}  val EER global {:.4} user {:.4}",
                row.epoch,
                row.meta_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into()),
                row.val.eer_global,
                row.val.eer_user
            )
        },
    )?;
    let meta = CheckpointMeta {
        config: cfg.to_map(),
        epoch: Some(outcome.best_epoch),
        val_eer: Some(outcome.best_val.eer_global),
        enrollment: None,
    };
    save_checkpoint(&a.out, &Checkpoint::new(outcome.best, meta))?;
    let curve = a.curve.unwrap_or_else(|| with_suffix(&a.out, ".curve.csv"));
    write(&curve, &curve_csv(&outcome.curve))?;
    println!(
        "best epoch {} (val EER {:.4}) -> {}",
        outcome.best_epoch,
        outcome.best_val.eer_global,
        a.out.display()
    );
    Ok(())
}

fn read_folder(dir: &Path) -> sigmeta::Result<Vec<CanonicalImage>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match read_image(&p).and_then(|raw| preprocess_signature(&raw)) {
            Ok(img) => out.push(img),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

fn adapt_cmd(a: AdaptArgs) -> sigmeta::Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    ckpt.params.check_architecture()?;
    let refs = read_folder(&a.refs)?;
    if refs.is_empty() {
        return Err(Error::Data(format!("no readable references in {}", a.refs.display())));
    }
    let rf = match &a.rf {
        Some(dir) => read_folder(dir)?,
        None => Vec::new(),
    };
    let images: Vec<&CanonicalImage> = refs.iter().chain(&rf).collect();
    let mut classes = vec![SampleClass::Genuine; refs.len()];
    classes.resize(images.len(), SampleClass::RandomForgery);
    let mut batch = SampleBatch::from_images(&images, SampleClass::Genuine, CropMode::Center)?;
    batch.classes = classes;
    let result = adapt(&SignatureNet, &ckpt.params, &batch, a.k, a.alpha)?;
    let created_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let record = EnrollmentRecord {
        user_id: a.user,
        n_references: refs.len(),
        k: a.k,
        alpha: a.alpha,
        created_at,
    };
    let meta = CheckpointMeta {
        config: ckpt.meta.config.clone(),
        epoch: ckpt.meta.epoch,
        val_eer: ckpt.meta.val_eer,
        enrollment: Some(record),
    };
    save_checkpoint(&a.out, &Checkpoint::new(result.adapted().clone(), meta))?;
    println!(
        "enrolled user {} from {} references (inner loss {:.5} -> {:.5}) -> {}",
        a.user,
        refs.len(),
        result.per_step_inner_loss[0],
        result.per_step_inner_loss[a.k - 1],
        a.out.display()
    );
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> sigmeta::Result<()> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(Error::Parameter(format!("--tau {} outside [0,1]", a.tau)));
    }
    let enr = load_checkpoint(&a.enroll)?;
    let Some(record) = &enr.meta.enrollment else {
        return Err(Error::Data(format!(
            "{} is not an enrollment record",
            a.enroll.display()
        )));
    };
    enr.params.check_architecture()?;
    let img = preprocess_signature(&read_image(&a.image)?)?;
    let x: Tensor = crop(&img, CropMode::Center).reshape(&[1, 1, 150, 220])?;
    let score = score_user(&SignatureNet, &enr.params, &x)?[0];
    let decision = if score >= a.tau { "genuine" } else { "forgery" };
    println!("user={} score={score:.6} decision={decision}", record.user_id);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> sigmeta::Result<()> {
    set_jobs(a.jobs)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    ckpt.params.check_architecture()?;
    let mut cfg = RunConfig::default();
    cfg.apply(&ckpt.meta.config)?;
    let users = load_users(&data_root(a.data)?)?;
    let test = if a.all_users {
        users
    } else {
        split_users(users, &cfg.split, cfg.meta.seed)?.meta_test
    };
    let protocol = ProtocolConfig {
        n_splits: a.splits,
        n_ref: a.refs,
        inner_steps: a.k.unwrap_or(cfg.meta.inner_steps),
        alpha: a.alpha.unwrap_or_else(|| cfg.effective_alpha()),
        n_rf_adapt: a.rf_adapt.unwrap_or(cfg.episode.n_rf_adapt),
        n_rf_query: a.rf_query,
        tau: a.tau,
        seed: a.seed,
    };
    eprintln!("evaluating {} users over {} splits", test.len(), a.splits);
    let run = evaluate_protocol(&SignatureNet, &ckpt.params, &test, &protocol)?;
    let roc = roc_curve(&run.scores)?;
    write(&with_suffix(&a.out, ".json"), &run.report.to_json())?;
    write(&with_suffix(&a.out, ".csv"), &run.report.to_csv())?;
    write(&with_suffix(&a.out, ".roc.csv"), &roc.to_csv())?;
    let r = &run.report;
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into());
    println!(
        "EER global {} ± {}  EER user {} ± {}  FRR {}  FAR skilled {}  FAR random {}",
        pct(r.eer_global.mean),
        pct(r.eer_global.std),
        pct(r.eer_user.mean),
        pct(r.eer_user.std),
        pct(r.frr.mean),
        pct(r.far_skilled.mean),
        pct(r.far_random.mean)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::MetaTrain(a) => meta_train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
