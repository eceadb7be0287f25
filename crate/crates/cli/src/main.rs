use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajloc_core::config::PipelineConfig;
use trajloc_core::error::Result;
use trajloc_core::labeling::build_refined;
use trajloc_core::localization::{evaluate, knn_baseline, ncp_baseline, set_bounds, train_loc, EvalReport};
use trajloc_core::mobility::{gen_dataset, MobilityConfig, TrajectoryDataset};
use trajloc_core::model::{F1, F2, H1, H2, LOC};
use trajloc_core::neural::Checkpoint;
use trajloc_core::pipeline::{self, network_from};
use trajloc_core::radio_sim::{sample_field, ApDeployment, RadioField};
use trajloc_core::seed::derive_label;
use trajloc_core::ssl::{train_stage1, train_stage2, trace_csv};

#[derive(Parser)]
#[command(name = "trajloc", version, about = "WiFi trajectory representation learning and endpoint localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Radio fields.
    #[command(subcommand)]
    Field(FieldCmd),
    /// Trajectory datasets.
    #[command(subcommand)]
    Traj(TrajCmd),
    /// Self-supervised training stages.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Pseudo-label crowdsourced trajectories from a labeled set.
    Label(LabelArgs),
    /// Localization head training and evaluation.
    #[command(subcommand)]
    Loc(LocCmd),
    /// Baseline localizers.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Run the whole pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Re-run every stage even when the manifest says it is up to date.
        #[arg(long)]
        force: bool,
    },
    /// Summarize the evaluation reports in an artifact directory.
    Report { dir: PathBuf },
}

#[derive(Subcommand)]
enum FieldCmd {
    Gen {
        #[arg(long)]
        width: f64,
        #[arg(long)]
        height: f64,
        #[arg(long)]
        spacing: f64,
        #[arg(long, default_value_t = 8)]
        aps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// "x y" per line; overrides --aps.
        #[arg(long)]
        ap_file: Option<PathBuf>,
        /// Pipeline config supplying `[field.propagation]`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrajCmd {
    Gen {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        labeled: bool,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Samples per trajectory; defaults to `mobility.t`.
        #[arg(long)]
        t: Option<usize>,
        /// Pipeline config supplying `[mobility]` and `[features]`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    StripLabels {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Stage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Loss trace CSV; defaults to `<out-ckpt>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    Stage2 {
        #[arg(long)]
        data_long: PathBuf,
        #[arg(long)]
        f1_ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    c: PathBuf,
    #[arg(long)]
    ctilde: PathBuf,
    #[arg(long)]
    f1_ckpt: PathBuf,
    #[arg(long)]
    f2_ckpt: PathBuf,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report_csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LocCmd {
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        f1_ckpt: PathBuf,
        #[arg(long)]
        f2_ckpt: PathBuf,
        /// Update the encoders too; `--finetune false` freezes them.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        finetune: Option<bool>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Field file whose extent bounds the predictions; defaults to the config's field size.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        report_csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    Knn {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        report_csv: Option<PathBuf>,
    },
    Ncp {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_ckpt: Option<PathBuf>,
        #[arg(long)]
        report_csv: Option<PathBuf>,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate_sections()?;
    Ok(cfg)
}

fn field_bounds(field: Option<&Path>, cfg: &PipelineConfig) -> Result<(f64, f64)> {
    match field {
        Some(p) => {
            let f = RadioField::load(p)?;
            Ok((f.width, f.height))
        }
        None => Ok((cfg.field.width, cfg.field.height)),
    }
}

fn trace_path(out: &Path, trace: Option<PathBuf>) -> PathBuf {
    trace.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".trace.csv");
        PathBuf::from(s)
    })
}

fn finish_eval(rep: &EvalReport, csv: Option<&Path>) -> Result<()> {
    if let Some(p) = csv {
        fs::write(p, rep.to_csv())?;
    }
    println!("{}", rep.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    pipeline::configure_threads()?;
    match cli.cmd {
        Cmd::Field(FieldCmd::Gen {
            width,
            height,
            spacing,
            aps,
            seed,
            out,
            ap_file,
            config,
        }) => {
            let cfg = config_or_default(config.as_deref())?;
            let params = cfg.field.propagation;
            let dep = match ap_file {
                Some(p) => ApDeployment {
                    positions: ApDeployment::parse_positions(&fs::read_to_string(p)?)?,
                    params,
                },
                None => ApDeployment::random(aps, width, height, params, seed),
            };
            let field = sample_field(&dep, width, height, spacing, seed)?;
            field.save(&out)?;
            eprintln!("wrote {} ({} APs, {}x{} grid)", out.display(), field.m, field.rows, field.cols);
        }
        Cmd::Traj(TrajCmd::Gen {
            field,
            count,
            labeled,
            seed,
            out,
            t,
            config,
        }) => {
            let cfg = config_or_default(config.as_deref())?;
            let mc = MobilityConfig {
                t: t.unwrap_or(cfg.mobility.t),
                ..cfg.mobility.clone()
            };
            mc.validate()?;
            let f = RadioField::load(&field)?;
            let ds = gen_dataset(&f, &mc, &cfg.features, count, labeled, seed)?;
            ds.save(&out)?;
            eprintln!("wrote {} ({} trajectories, m={}, t={})", out.display(), ds.len(), ds.m, ds.t);
        }
        Cmd::Traj(TrajCmd::StripLabels { input, out }) => {
            TrajectoryDataset::load(&input)?.strip_labels().save(&out)?;
        }
        Cmd::Train(TrainCmd::Stage1 {
            data,
            config,
            out_ckpt,
            trace,
        }) => {
            let cfg = config_or_default(Some(&config))?;
            let master = cfg.master_seed();
            let ds = TrajectoryDataset::load(&data)?;
            cfg.stage1.to_stage_config(&cfg.augment, 0).augment.validate(ds.t)?;
            let sc = cfg.stage1.to_stage_config(&cfg.augment, derive_label(master, "stage1"));
            let mut net = trajloc_core::model::Network::<f32>::new(&cfg.arch, ds.m, ds.t, derive_label(master, "init"))?;
            let tr = train_stage1(&mut net, &ds, &sc)?;
            Checkpoint::new(net.store.subset(&[F1, H1]), None).save(&out_ckpt)?;
            fs::write(trace_path(&out_ckpt, trace), trace_csv(&tr))?;
            if let Some(last) = tr.last() {
                eprintln!("stage 1: final mean loss {:.4}, embedding std {:.4}", last.mean_loss, last.embed_std);
            }
        }
        Cmd::Train(TrainCmd::Stage2 {
            data_long,
            f1_ckpt,
            config,
            out_ckpt,
            trace,
        }) => {
            let cfg = config_or_default(Some(&config))?;
            let master = cfg.master_seed();
            let long = TrajectoryDataset::load(&data_long)?;
            let t = (long.t + 1) / 2;
            let sc = cfg.stage2.to_stage_config(&cfg.augment, derive_label(master, "stage2"));
            let ck1 = Checkpoint::load(&f1_ckpt)?;
            let mut net = network_from(&cfg.arch, long.m, t, derive_label(master, "init"), &[(&ck1, &[F1])])?;
            let tr = train_stage2(&mut net, &long, &sc)?;
            Checkpoint::new(net.store.subset(&[F1, F2, H2]), None).save(&out_ckpt)?;
            fs::write(trace_path(&out_ckpt, trace), trace_csv(&tr))?;
            if let Some(last) = tr.last() {
                eprintln!("stage 2: final mean loss {:.4}, embedding std {:.4}", last.mean_loss, last.embed_std);
            }
        }
        Cmd::Label(a) => {
            let cfg = config_or_default(a.config.as_deref())?;
            let lc = cfg.labeling.label_config(a.delta);
            lc.validate()?;
            let c = TrajectoryDataset::load(&a.c)?;
            let ct = TrajectoryDataset::load(&a.ctilde)?;
            let ck1 = Checkpoint::load(&a.f1_ckpt)?;
            let ck2 = Checkpoint::load(&a.f2_ckpt)?;
            let mut net = network_from(&cfg.arch, c.m, c.t, 0, &[(&ck1, &[F1]), (&ck2, &[F2])])?;
            let (cp, rep) = build_refined(&mut net, &c, &ct, &lc)?;
            cp.save(&a.out)?;
            if let Some(p) = &a.report_csv {
                fs::write(p, rep.to_csv())?;
            }
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "delta={} labeled={} dropped={} drop_rate={:.4} cdf68={} cdf95={}",
                a.delta,
                rep.labeled,
                rep.dropped,
                rep.drop_rate,
                fmt(rep.cdf68),
                fmt(rep.cdf95)
            );
        }
        Cmd::Loc(LocCmd::Train {
            train,
            f1_ckpt,
            f2_ckpt,
            finetune,
            out_ckpt,
            field,
            config,
        }) => {
            let cfg = config_or_default(config.as_deref())?;
            let seed_v = derive_label(cfg.master_seed(), "full");
            let mut lc = cfg.localization.to_loc_config(seed_v);
            if let Some(f) = finetune {
                lc.finetune_encoders = f;
            }
            let ds = TrajectoryDataset::load(&train)?;
            let (w, h) = field_bounds(field.as_deref(), &cfg)?;
            let ck1 = Checkpoint::load(&f1_ckpt)?;
            let ck2 = Checkpoint::load(&f2_ckpt)?;
            let mut net = network_from(&cfg.arch, ds.m, ds.t, derive_label(cfg.master_seed(), "init"), &[(&ck1, &[F1]), (&ck2, &[F2])])?;
            set_bounds(&mut net, w, h)?;
            let losses = train_loc(&mut net, &ds, &lc)?;
            Checkpoint::new(net.store.subset(&[F1, F2, LOC]), None).save(&out_ckpt)?;
            if let Some(l) = losses.last() {
                eprintln!("localization: final mean loss {l:.4} m^2 over {} samples", ds.len());
            }
        }
        Cmd::Loc(LocCmd::Eval {
            ckpt,
            test,
            report_csv,
            config,
        }) => {
            let cfg = config_or_default(config.as_deref())?;
            let ds = TrajectoryDataset::load(&test)?;
            let ck = Checkpoint::load(&ckpt)?;
            let mut net = network_from(&cfg.arch, ds.m, ds.t, 0, &[(&ck, &[F1, F2, LOC])])?;
            finish_eval(&evaluate(&mut net, &ds)?, report_csv.as_deref())?;
        }
        Cmd::Baseline(BaselineCmd::Knn {
            train,
            test,
            k,
            report_csv,
        }) => {
            let tr = TrajectoryDataset::load(&train)?;
            let te = TrajectoryDataset::load(&test)?;
            finish_eval(&knn_baseline(&tr, &te, k)?, report_csv.as_deref())?;
        }
        Cmd::Baseline(BaselineCmd::Ncp {
            train,
            test,
            out_ckpt,
            report_csv,
            field,
            config,
        }) => {
            let cfg = config_or_default(config.as_deref())?;
            let seed_v = derive_label(cfg.master_seed(), "ncp");
            let tr = TrajectoryDataset::load(&train)?;
            let te = TrajectoryDataset::load(&test)?;
            let bounds = field_bounds(field.as_deref(), &cfg)?;
            let lc = cfg.localization.to_loc_config(derive_label(seed_v, "train"));
            let (net, rep) = ncp_baseline(&cfg.arch, &tr, &te, bounds, &lc, derive_label(seed_v, "init"))?;
            if let Some(p) = &out_ckpt {
                Checkpoint::new(net.store.subset(&[F1, F2, LOC]), None).save(p)?;
            }
            finish_eval(&rep, report_csv.as_deref())?;
        }
        Cmd::Run { config, force } => {
            let cfg = PipelineConfig::load(&config)?;
            let summary = pipeline::run_pipeline(&cfg, force, &mut |line| eprintln!("{line}"))?;
            eprintln!(
                "{} stages run, {} up to date",
                summary.executed.len(),
                summary.skipped.len()
            );
            print!("{}", summary.report.to_csv());
        }
        Cmd::Report { dir } => {
            let rep = pipeline::report(&dir)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", rep.to_csv());
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
