//! `tvt`: train, evaluate, gradient-check and inspect the transferable vision
//! transformer.
//!
//! Exit codes: 0 success, 1 verification failure, 2 user or config error,
//! 3 environment or I/O error.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvt_core::checkpoint;
use tvt_core::data::{self, synth_domain_pair, DomainBatch, LabeledImageSet};
use tvt_core::gradcheck::{sample_coords, DEFAULT_STEP};
use tvt_core::trainer::{self, objective_grad_check, Ablation, LossWeights, RunDir, TrainData};
use tvt_core::vit::{PatchProbe, Transferability};
use tvt_core::{Error, ModelConfig, Tape, TvtModel};

use config::{ConfigError, RunConfig};

/// Worst relative error the gradient check accepts.
const GRADCHECK_TOL: f64 = 1e-4;
/// Reversal strength used by the gradient check so every term contributes.
const GRADCHECK_LAMBDA: f64 = 0.5;
const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Parser)]
#[command(name = "tvt", version, about = "Transferable vision transformer for unsupervised domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured source/target data and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plain attention in the last layer and no patch-level adversarial loss.
        #[arg(long)]
        no_tam: bool,
        /// Drop the mutual-information term.
        #[arg(long)]
        no_dcm: bool,
        /// Supervised source training only.
        #[arg(long, conflicts_with_all = ["no_tam", "no_dcm"])]
        source_only: bool,
    },
    /// Target-test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the full objective on a reduced model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupts one backward rule; the check must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Per-image class-token attention of the last layer, as CSV, plus the
    /// final class-token features.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic corpus as IDX files.
    ExportSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Verification(String),
    Config(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Config(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            Error::Contract(_) => Failure::Verification(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("I/O error on {}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    eprint!("# effective configuration\n{}", cfg.render());
    Ok(cfg)
}

/// Optional worker cap. All computation here runs on one worker, which
/// satisfies any cap; the value is still validated.
fn check_threads() -> Result<(), Failure> {
    match std::env::var("TVT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Failure::Config(format!("TVT_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

struct Corpus {
    source_train: LabeledImageSet,
    target_train: LabeledImageSet,
    target_test: LabeledImageSet,
}

fn corpus(cfg: &RunConfig) -> Result<Corpus, Failure> {
    use data::{Domain, Split};
    let d = &cfg.data;
    if d.is_idx() {
        let pair = |img: &Option<PathBuf>, lbl: &Option<PathBuf>| (img.clone().unwrap(), lbl.clone().unwrap());
        let (si, sl) = pair(&d.source_train_images, &d.source_train_labels);
        let (ti, tl) = pair(&d.target_train_images, &d.target_train_labels);
        let (ei, el) = pair(&d.target_test_images, &d.target_test_labels);
        Ok(Corpus {
            source_train: data::load_idx(&si, &sl, Domain::Source, Split::Train)?,
            target_train: data::load_idx(&ti, &tl, Domain::Target, Split::Train)?,
            target_test: data::load_idx(&ei, &el, Domain::Target, Split::Test)?,
        })
    } else {
        let p = synth_domain_pair(&cfg.synth_config())?;
        Ok(Corpus {
            source_train: p.source_train,
            target_train: p.target_train,
            target_test: p.target_test,
        })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn cmd_train(config: &Path, out: &Path, no_tam: bool, no_dcm: bool, source_only: bool) -> Result<(), Failure> {
    let mut cfg = load_config(Some(config))?;
    let t = &mut cfg.train;
    if source_only {
        Ablation::SourceOnly.apply(t);
    }
    if no_tam {
        t.tam = false;
        t.beta = 0.0;
    }
    if no_dcm {
        t.gamma = 0.0;
    }
    let resolved = cfg.render();
    print!("{resolved}");

    let data = corpus(&cfg)?;
    let mut run = RunDir::create(out)?;
    write_file(&out.join(RESOLVED_CONFIG), resolved.as_bytes())?;
    let outcome = trainer::fit(
        &cfg.model,
        &cfg.train,
        &TrainData {
            source_train: &data.source_train,
            target_train: &data.target_train,
            target_test: &data.target_test,
        },
        &mut run,
    )?;
    println!("{}", serde_json::json!({ "target_accuracy": outcome.target_accuracy }));
    Ok(())
}

fn load_model(cfg: &ModelConfig, path: &Path) -> Result<(TvtModel, tvt_core::ParamStore), Failure> {
    let (model, template) = TvtModel::new(cfg, 0)?;
    let store = checkpoint::load(path, &template)?;
    Ok((model, store))
}

fn cmd_eval(checkpoint_path: &Path, config: &Path) -> Result<(), Failure> {
    let cfg = load_config(Some(config))?;
    let (model, store) = load_model(&cfg.model, checkpoint_path)?;
    let data = corpus(&cfg)?;
    let acc = trainer::evaluate(&model, &store, &data.target_test, cfg.train.tam)?;
    println!("{}", serde_json::json!({ "target_accuracy": acc }));
    Ok(())
}

/// Small model used by the gradient check.
fn reduced_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        depth: 2,
        classes: 3,
        mlp_ratio: 2,
        init_std: 0.3,
    }
}

fn cmd_gradcheck(config: Option<&Path>, inject_fault: bool) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let model_cfg = reduced_config();
    let seed = cfg.gradcheck.seed;
    let (model, store) = TvtModel::new(&model_cfg, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let per = model_cfg.image_len();
    let (ns, nt) = (2, 2);
    let batch = DomainBatch {
        source_images: (0..ns * per).map(|_| rng.gen_range(0.0..1.0)).collect(),
        source_labels: (0..ns).map(|_| rng.gen_range(0..model_cfg.classes)).collect(),
        target_images: (0..nt * per).map(|_| rng.gen_range(0.0..1.0)).collect(),
        n_target: nt,
    };
    let weights = LossWeights {
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
    };
    let coords = sample_coords(&store, cfg.gradcheck.coords_per_param, &mut rng);
    let report = objective_grad_check(
        &model,
        &store,
        &batch,
        &weights,
        GRADCHECK_LAMBDA,
        &coords,
        DEFAULT_STEP,
        inject_fault,
    )?;

    let worst = report
        .worst()
        .ok_or_else(|| Failure::Verification("no coordinates were checked".into()))?;
    let max = worst.rel_error;
    let modules: std::collections::BTreeSet<&str> = report
        .checked
        .iter()
        .map(|c| c.name.split('.').next().unwrap_or(""))
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "coordinates": report.checked.len(),
            "modules": modules,
            "step": DEFAULT_STEP,
            "max_relative_error": max,
            "tolerance": GRADCHECK_TOL,
            "worst": {
                "parameter": worst.name,
                "offset": worst.coord.offset,
                "analytic": worst.analytic,
                "numeric": worst.numeric,
            },
            "pass": max <= GRADCHECK_TOL,
        })
    );
    if max <= GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed: relative error {max:.3e} at {}[{}] exceeds {GRADCHECK_TOL:e}",
            worst.name, worst.coord.offset
        )))
    }
}

fn features_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "attention".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_features.csv"))
}

fn cmd_attn_dump(checkpoint_path: &Path, images: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mc = &cfg.model;
    let (model, store) = load_model(mc, checkpoint_path)?;
    let bytes = std::fs::read(images).map_err(|e| io_failure(images, e))?;
    let (count, rows, cols, pixels) = data::parse_idx_images(&bytes, images)?;
    if rows != mc.image_size || cols != mc.image_size || mc.channels != 1 {
        return Err(Failure::Config(format!(
            "{} holds {rows}x{cols} images but the model expects {size}x{size}x{channels}",
            images.display(),
            size = mc.image_size,
            channels = mc.channels
        )));
    }

    let r = mc.num_patches();
    let feat_path = features_path(out);
    let mut attn = BufWriter::new(File::create(out).map_err(|e| io_failure(out, e))?);
    let mut feats = BufWriter::new(File::create(&feat_path).map_err(|e| io_failure(&feat_path, e))?);

    let mut header = vec!["image".to_string()];
    for prefix in ["raw", "transferability", "effective"] {
        header.extend((0..r).map(|p| format!("{prefix}_{p}")));
    }
    writeln!(attn, "{}", header.join(",")).map_err(|e| io_failure(out, e))?;
    let feat_header: Vec<String> = std::iter::once("image".to_string())
        .chain((0..mc.embed_dim).map(|j| format!("f{j}")))
        .collect();
    writeln!(feats, "{}", feat_header.join(",")).map_err(|e| io_failure(&feat_path, e))?;

    let per = mc.image_len();
    let chunk = 100;
    for (c, block) in pixels.chunks(chunk * per).enumerate() {
        let n = block.len() / per;
        let mut tape = Tape::new();
        let probe = PatchProbe {
            disc: &model.patch_disc,
            grl_lambda: 0.0,
        };
        let mode = if cfg.train.tam {
            Transferability::Discriminator
        } else {
            Transferability::Vanilla
        };
        let f = model.vit.forward_features(&mut tape, &store, block, n, Some(probe), mode)?;
        let class = tape.data(f.class_state);
        for i in 0..n {
            let id = c * chunk + i;
            let rec = model.vit.attention_record(&tape, &f, i);
            // Patch columns only; the class self-weight is identical in raw
            // and effective rows.
            let cells: Vec<String> = std::iter::once(id.to_string())
                .chain(rec.raw[1..].iter().map(|v| format!("{v:e}")))
                .chain(rec.transferability.iter().map(|v| format!("{v:e}")))
                .chain(rec.effective[1..].iter().map(|v| format!("{v:e}")))
                .collect();
            writeln!(attn, "{}", cells.join(",")).map_err(|e| io_failure(out, e))?;
            let row: Vec<String> = std::iter::once(id.to_string())
                .chain(class[i * mc.embed_dim..(i + 1) * mc.embed_dim].iter().map(|v| format!("{v:e}")))
                .collect();
            writeln!(feats, "{}", row.join(",")).map_err(|e| io_failure(&feat_path, e))?;
        }
    }
    attn.flush().map_err(|e| io_failure(out, e))?;
    feats.flush().map_err(|e| io_failure(&feat_path, e))?;
    eprintln!("wrote {count} rows to {} and {}", out.display(), feat_path.display());
    Ok(())
}

fn cmd_export_synth(config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let pair = synth_domain_pair(&cfg.synth_config())?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for (name, set) in [
        ("source_train", &pair.source_train),
        ("source_test", &pair.source_test),
        ("target_train", &pair.target_train),
        ("target_test", &pair.target_test),
    ] {
        data::write_idx(
            set,
            &out.join(format!("{name}-images.idx3-ubyte")),
            &out.join(format!("{name}-labels.idx1-ubyte")),
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = check_threads().and_then(|()| match &cli.command {
        Command::Train {
            config,
            out,
            no_tam,
            no_dcm,
            source_only,
        } => cmd_train(config, out, *no_tam, *no_dcm, *source_only),
        Command::Eval { checkpoint, config } => cmd_eval(checkpoint, config),
        Command::Gradcheck { config, inject_fault } => cmd_gradcheck(config.as_deref(), *inject_fault),
        Command::AttnDump {
            checkpoint,
            images,
            out,
            config,
        } => cmd_attn_dump(checkpoint, images, out, config.as_deref()),
        Command::ExportSynth { config, out } => cmd_export_synth(config.as_deref(), out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
