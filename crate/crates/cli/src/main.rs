use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand, ValueEnum};

use reflect_bev::config::ExperimentConfig;
use reflect_bev::metrics::{evaluate, forgetting_delta, EvalResult};
use reflect_bev::teacher::{load_checkpoint, metrics_csv, save_checkpoint, Checkpoint, CheckpointManifest, RunState, Trainer};
use reflect_bev::world::{generate_dataset, load_dataset, save_dataset, Frame, SceneDataset};
use reflect_bev::{oracle, Error};

/// Overrides every subcommand's output directory.
const OUT_ENV: &str = "REFLECT_BEV_OUT";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "reflect-bev", version, about = "Semi-supervised BEV detection experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Supervised,
    Semi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Test,
    Train,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    /// Small data-limited world used by the two-phase benchmark.
    TwoPhase,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective configuration: FILE if given, else the preset.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long, default_value_t = 0.25)]
        labeled_fraction: f64,
    },
    /// Generate and store the training dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write checkpoints plus metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "semi")]
        mode: Mode,
        /// Stored dataset; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's teacher.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forgetting between a supervised checkpoint and a semi-supervised one.
    Forgetting {
        #[arg(long)]
        supervised: PathBuf,
        #[arg(long)]
        semi: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn out_dir(flag: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.unwrap_or_else(default),
    }
}

fn out_opt(flag: Option<PathBuf>) -> Option<PathBuf> {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => flag,
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn dataset_for(cfg: &ExperimentConfig, data: Option<&Path>) -> anyhow::Result<SceneDataset> {
    match data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            if ds.spec != cfg.dataset_spec() {
                bail!(Error::Config(format!("dataset in {} was generated with a different configuration", dir.display())));
            }
            Ok(ds)
        }
        None => Ok(generate_dataset(&cfg.dataset_spec())?),
    }
}

fn checkpoint(cfg: &ExperimentConfig, state: &RunState) -> Checkpoint {
    Checkpoint {
        manifest: CheckpointManifest {
            format_version: 1,
            round: state.teacher.round,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            global_step: state.global_step,
            labeled: state.pool.labeled.clone(),
            unlabeled: state.pool.unlabeled.clone(),
        },
        teacher: state.teacher.clone(),
        student: state.student.clone(),
    }
}

fn save(dir: &Path, cfg: &ExperimentConfig, state: &RunState) -> anyhow::Result<()> {
    save_checkpoint(dir, &checkpoint(cfg, state))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())
}

fn cmd_train(cfg: ExperimentConfig, mode: Mode, data: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let ds = dataset_for(&cfg, data)?;
    let trainer = Trainer::new(cfg.clone(), ds)?;
    let mut state = trainer.fresh_state()?;
    let result = (|| -> anyhow::Result<()> {
        trainer.init_teacher(&mut state)?;
        if let Mode::Semi = mode {
            save(&out.join("checkpoint-supervised"), &cfg, &state)?;
            for _ in 0..cfg.train.rounds {
                let r = trainer.run_round(&mut state)?;
                eprintln!(
                    "round {}: map_lite {:.2} delta {} promoted {:?}",
                    r.round,
                    100.0 * r.eval.map_lite,
                    r.delta_forgetting.map_or("-".into(), |d| format!("{d:.2}")),
                    r.promoted
                );
            }
        }
        save(&out.join("checkpoint"), &cfg, &state)
    })();
    write(&out.join("metrics.csv"), &metrics_csv(&state.rows))?;
    result
}

struct Loaded {
    cfg: ExperimentConfig,
    ck: Checkpoint,
}

fn load(dir: &Path) -> anyhow::Result<Loaded> {
    let ck = load_checkpoint(dir)?;
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    if cfg.hash() != ck.manifest.config_hash {
        bail!(Error::Config(format!("{} does not match its checkpoint manifest", CONFIG_FILE)));
    }
    Ok(Loaded { cfg, ck })
}

fn split_frames(cfg: &ExperimentConfig, split: Split, data: Option<&Path>) -> anyhow::Result<Vec<Frame>> {
    let ds = match split {
        Split::Test => generate_dataset(&cfg.test_spec())?,
        Split::Train => dataset_for(cfg, data)?,
    };
    let keys = ds.frame_keys(&(0..ds.len()).collect::<Vec<_>>());
    Ok(keys.into_iter().map(|k| Frame::build(&ds, k, cfg.model.n_max)).collect::<Result<_, _>>()?)
}

fn eval_loaded(l: &Loaded, frames: &[Frame], cross: bool) -> anyhow::Result<EvalResult> {
    let det = reflect_bev::model::Detector::new(l.cfg.dataset.world.clone(), l.cfg.model.clone())?;
    Ok(evaluate(&det, &l.ck.teacher.params_prev, frames, cross)?)
}

fn report(l: &Loaded, split: Split, e: &EvalResult) -> String {
    let mut s = format!(
        "run_id = \"{}\"\nconfig_hash = \"{}\"\nround = {}\nsplit = \"{}\"\nmap_lite = {}\n",
        l.cfg.run_id,
        l.ck.manifest.config_hash,
        l.ck.manifest.round,
        match split {
            Split::Test => "test",
            Split::Train => "train",
        },
        100.0 * e.map_lite
    );
    if let Some(c) = e.cross_branch_iou {
        s.push_str(&format!("cross_branch_iou = {c}\n"));
    }
    s.push_str(&format!("matched_objects = {}\n\n[per_class_ap]\n", e.matched_gt_ids.len()));
    for (c, ap) in &e.per_class_ap {
        s.push_str(&format!("class_{c} = {}\n", 100.0 * ap));
    }
    s
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::PrintConfig { config, preset, labeled_fraction } => {
            let cfg = match (config, preset) {
                (Some(p), _) => ExperimentConfig::load(&p)?,
                (None, Preset::Default) => ExperimentConfig::default(),
                (None, Preset::TwoPhase) => ExperimentConfig::two_phase(ExperimentConfig::default().seed, labeled_fraction),
            };
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
        Cmd::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(out, || PathBuf::from("runs").join(&cfg.run_id).join("dataset"));
            let ds = generate_dataset(&cfg.dataset_spec())?;
            save_dataset(&ds, &dir)?;
            eprintln!("wrote {} sequences to {}", ds.len(), dir.display());
        }
        Cmd::Train { config, mode, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(out, || PathBuf::from("runs").join(&cfg.run_id));
            cmd_train(cfg, mode, data.as_deref(), &dir)?;
            eprintln!("wrote {}", dir.display());
        }
        Cmd::Eval { checkpoint, split, data, out } => {
            let l = load(&checkpoint)?;
            let frames = split_frames(&l.cfg, split, data.as_deref())?;
            let e = eval_loaded(&l, &frames, true)?;
            let text = report(&l, split, &e);
            print!("{text}");
            if let Some(dir) = out_opt(out) {
                write(&dir.join("eval.toml"), &text)?;
            }
        }
        Cmd::Forgetting { supervised, semi, out } => {
            let a = load(&supervised)?;
            let b = load(&semi)?;
            if a.ck.manifest.config_hash != b.ck.manifest.config_hash {
                bail!(Error::Config("checkpoints come from different configurations".into()));
            }
            let frames = split_frames(&a.cfg, Split::Test, None)?;
            let ea = eval_loaded(&a, &frames, false)?;
            let eb = eval_loaded(&b, &frames, false)?;
            let delta = forgetting_delta(&ea.matched_gt_ids, &eb.matched_gt_ids)?;
            let text = format!(
                "run_id,labeled_fraction,map_supervised,map_semi,delta_forgetting\n{},{},{},{},{}\n",
                b.cfg.run_id,
                b.cfg.dataset.labeled_fraction,
                100.0 * ea.map_lite,
                100.0 * eb.map_lite,
                delta
            );
            print!("{text}");
            if let Some(dir) = out_opt(out) {
                write(&dir.join("forgetting.csv"), &text)?;
            }
        }
        Cmd::Selftest { seeds } => {
            let outcomes = oracle::run_all(seeds);
            let mut failed = 0;
            for o in &outcomes {
                println!("{} {:<28} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                bail!(Error::Numerical(format!("{failed} of {} oracle checks failed", outcomes.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
