//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 5 to 8 run
//! the desk preset end to end (a few minutes on one core). Set
//! `TRAJLOC_ACCEPTANCE_DIR` to keep the artifacts and resume later runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use trajloc_core::config::PipelineConfig;
use trajloc_core::error::Error;
use trajloc_core::localization::{percentile, EvalReport};
use trajloc_core::mobility::{gen_dataset, Features, MobilityConfig, TrajectoryDataset};
use trajloc_core::model::{Network, F1, H1};
use trajloc_core::neural::gradcheck::{check_sequential, check_simsiam};
use trajloc_core::neural::{simsiam_loss, Checkpoint, LayerSpec, Mode, ParamKind, ParamStore, Sequential, Tensor};
use trajloc_core::pipeline::{self, RunSummary};
use trajloc_core::radio_sim::{path_loss, sample_field, ApDeployment, PropagationParams, RadioField};
use trajloc_core::seed;
use trajloc_core::ssl::{normalized_std, siamese_step, train_stage1, StageConfig, MONITOR_SAMPLES};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn desk_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    PipelineConfig::load(&path).expect("desk preset parses")
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = PropagationParams {
            n: rng.random_range(1.5..6.0),
            pl_d0: rng.random_range(20.0..60.0),
            d0: rng.random_range(0.5..2.0),
            ..PropagationParams::default()
        };
        let d = rng.random_range(p.d0..50.0);
        let chi = rng.random_range(-10.0..10.0);
        let expect = p.pl_d0 + 10.0 * p.n * (d / p.d0).log10() + chi;
        let got = path_loss(d, &p, chi).unwrap();
        worst = worst.max((got - expect).abs() / expect.abs());
    }
    let p = PropagationParams {
        n: 4.0,
        ..PropagationParams::default()
    };
    let step = path_loss(10.0 * p.d0, &p, 0.0).unwrap() - path_loss(p.d0, &p, 0.0).unwrap();
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-9 && step == 40.0 && elapsed < Duration::from_secs(1),
        format!("max rel err {worst:.2e}, +{step} dB per decade at n=4, {elapsed:.2?}"),
    )
}

fn random_layer_case(rng: &mut impl Rng) -> (Vec<LayerSpec>, Vec<usize>) {
    let c = rng.random_range(1..4);
    let t = rng.random_range(3..7);
    let f = rng.random_range(2..7);
    match rng.random_range(0..8) {
        0 => (vec![LayerSpec::ReflectionPad1d { pad: rng.random_range(1..t) }], vec![c, t]),
        1 => (
            vec![LayerSpec::Conv1d {
                out_channels: rng.random_range(1..5),
                kernel: rng.random_range(1..=t.min(4)),
            }],
            vec![c, t],
        ),
        2 => (vec![LayerSpec::batch_norm()], vec![c, t]),
        3 => (vec![LayerSpec::batch_norm()], vec![f]),
        4 => (vec![LayerSpec::Relu], vec![f]),
        5 => (vec![LayerSpec::AvgPoolTime], vec![c, t]),
        6 => (
            vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: rng.random_range(1..5) }],
            vec![c, t],
        ),
        _ => (vec![LayerSpec::Linear { out_features: rng.random_range(1..6) }], vec![f]),
    }
}

fn criterion2() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(2);
    let mut worst = (0.0f64, String::new());
    for case in 0..100 {
        let rep = if case % 10 == 9 {
            let shape = [rng.random_range(2..5), rng.random_range(2..8)];
            let t: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &shape)).collect();
            check_simsiam(&t[0], &t[1], &t[2], &t[3]).unwrap()
        } else {
            let (specs, shape) = random_layer_case(&mut rng);
            let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
            let mut store = ParamStore::<f64>::new();
            let net = Sequential::build("g", &specs, &shape, &mut store, &mut seed::rng(case)).unwrap();
            // Give eval-mode batch norm non-trivial running statistics.
            for e in store.entries_mut().iter_mut().filter(|e| e.kind == ParamKind::Buffer) {
                for v in e.value.data.iter_mut() {
                    *v = if e.name.ends_with("var") { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
                }
            }
            let mut full = vec![rng.random_range(3..6)];
            full.extend(&shape);
            let x = random_tensor(&mut rng, &full);
            check_sequential(&net, &mut store, &x, mode, case).unwrap()
        };
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, format!("case {case} {}", rep.worst));
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(120),
        format!("100 configurations, worst rel err {:.2e} ({}), {elapsed:.2?}", worst.0, worst.1),
    )
}

fn criterion3() -> Outcome {
    let mut rng = seed::rng(3);
    let mut store = ParamStore::<f64>::new();
    let enc_specs = [
        LayerSpec::Conv1d { out_channels: 4, kernel: 3 },
        LayerSpec::batch_norm(),
        LayerSpec::Relu,
        LayerSpec::AvgPoolTime,
        LayerSpec::Linear { out_features: 6 },
    ];
    let enc = Sequential::build("enc", &enc_specs, &[3, 7], &mut store, &mut rng).unwrap();
    let pred = Sequential::build("pred", &[LayerSpec::Linear { out_features: 6 }], &[6], &mut store, &mut rng).unwrap();
    // A projection that only produces the stop-gradient targets.
    let target = Sequential::build("target", &[LayerSpec::Linear { out_features: 6 }], &[6], &mut store, &mut rng).unwrap();
    let a = random_tensor(&mut rng, &[5, 3, 7]);
    let b = random_tensor(&mut rng, &[5, 3, 7]);

    store.zero_grads();
    let (h1, t1) = enc.forward(&mut store, a.clone(), Mode::Train).unwrap();
    let (h2, t2) = enc.forward(&mut store, b.clone(), Mode::Train).unwrap();
    let (p1, tp1) = pred.forward(&mut store, h1.clone(), Mode::Train).unwrap();
    let (p2, tp2) = pred.forward(&mut store, h2.clone(), Mode::Train).unwrap();
    let z1 = target.infer(&mut store, h1, Mode::Train).unwrap();
    let z2 = target.infer(&mut store, h2, Mode::Train).unwrap();
    let out = simsiam_loss(&p1, &z2, &p2, &z1).unwrap();
    let d1 = pred.backward(&mut store, tp1, out.d_p1).unwrap();
    enc.backward(&mut store, t1, d1).unwrap();
    let d2 = pred.backward(&mut store, tp2, out.d_p2).unwrap();
    enc.backward(&mut store, t2, d2).unwrap();
    let weights = |store: &ParamStore<f64>, prefix: &str| -> Vec<f64> {
        store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && e.name.starts_with(prefix))
            .flat_map(|e| e.grad.data.clone())
            .collect()
    };
    let target_zero = weights(&store, "target").iter().all(|g| *g == 0.0);
    let enc_moves = weights(&store, "enc").iter().any(|g| *g != 0.0);

    // Production step: the encoder gradient must equal the finite-difference
    // derivative of the loss with the targets held at their current values.
    store.zero_grads();
    siamese_step(&mut store, &enc, &pred, a.clone(), b.clone()).unwrap();
    let z1 = enc.infer(&mut store, a.clone(), Mode::Train).unwrap();
    let z2 = enc.infer(&mut store, b.clone(), Mode::Train).unwrap();
    let idx = store.entries().iter().position(|e| e.name.starts_with("enc") && e.kind == ParamKind::Weight).unwrap();
    let analytic = store.entries()[idx].grad.data.clone();
    let loss_at = |store: &mut ParamStore<f64>, frozen_targets: bool| -> f64 {
        let h1 = enc.infer(store, a.clone(), Mode::Train).unwrap();
        let h2 = enc.infer(store, b.clone(), Mode::Train).unwrap();
        let p1 = pred.infer(store, h1, Mode::Train).unwrap();
        let p2 = pred.infer(store, h2, Mode::Train).unwrap();
        let (y1, y2) = if frozen_targets {
            (z1.clone(), z2.clone())
        } else {
            (enc.infer(store, a.clone(), Mode::Train).unwrap(), enc.infer(store, b.clone(), Mode::Train).unwrap())
        };
        simsiam_loss(&p1, &y2, &p2, &y1).unwrap().loss
    };
    let h = 1e-5;
    let (mut sg_err, mut full_err) = (0.0f64, 0.0f64);
    for j in 0..analytic.len() {
        let orig = store.entries()[idx].value.data[j];
        let mut fd = |frozen| {
            store.entries_mut()[idx].value.data[j] = orig + h;
            let up = loss_at(&mut store, frozen);
            store.entries_mut()[idx].value.data[j] = orig - h;
            let down = loss_at(&mut store, frozen);
            store.entries_mut()[idx].value.data[j] = orig;
            (up - down) / (2.0 * h)
        };
        let (with_sg, without) = (fd(true), fd(false));
        sg_err = sg_err.max((analytic[j] - with_sg).abs());
        full_err = full_err.max((analytic[j] - without).abs());
    }
    let scale = analytic.iter().map(|g| g.abs()).fold(0.0, f64::max);
    Outcome::new(
        target_zero && enc_moves && sg_err <= 1e-4 * scale && full_err > 1e-3 * scale,
        format!(
            "target-only grads all zero: {target_zero}; encoder grad matches held-target FD to {:.1e} (vs {:.1e} without stop-gradient)",
            sg_err / scale,
            full_err / scale
        ),
    )
}

fn desk_data_and_stage1(cfg: &PipelineConfig, epochs: usize) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let master = 42;
    let field_seed = seed::derive_label(master, "field");
    let dep = ApDeployment::random(cfg.field.aps, cfg.field.width, cfg.field.height, cfg.field.propagation, field_seed);
    let field = sample_field(&dep, cfg.field.width, cfg.field.height, cfg.field.spacing, field_seed).unwrap();
    let data_seed = seed::derive_label(master, "data");
    let c = gen_dataset(&field, &cfg.mobility, &cfg.features, cfg.data.crowd, false, seed::derive_label(data_seed, pipeline::CROWD)).unwrap();
    let mut field_bytes = Vec::new();
    field.write_to(&mut field_bytes).unwrap();
    let mut data_bytes = Vec::new();
    c.write_to(&mut data_bytes).unwrap();
    let mut net = Network::<f32>::new(&cfg.arch, field.m, c.t, seed::derive_label(master, "init")).unwrap();
    let sc = StageConfig {
        epochs,
        ..cfg.stage1.to_stage_config(&cfg.augment, seed::derive_label(master, "stage1"))
    };
    train_stage1(&mut net, &c, &sc).unwrap();
    let mut ck = Vec::new();
    Checkpoint::new(net.store.subset(&[F1, H1]), None).write_to(&mut ck).unwrap();
    (field_bytes, data_bytes, ck)
}

fn criterion4() -> Outcome {
    let cfg = desk_config();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = pool.install(|| (desk_data_and_stage1(&cfg, 5), desk_data_and_stage1(&cfg, 5)));
    let same = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
    Outcome::new(
        same.0 && same.1 && same.2,
        format!(
            "field identical: {}, dataset identical: {} ({} bytes), checkpoint identical: {} ({} bytes)",
            same.0,
            same.1,
            a.1.len(),
            same.2,
            a.2.len()
        ),
    )
}

struct DeskRun {
    dir: PathBuf,
    summary: RunSummary,
    stage_times: Vec<(String, Duration)>,
    total: Duration,
    _tmp: Option<tempfile::TempDir>,
}

fn desk_run() -> Result<DeskRun, Error> {
    let mut cfg = desk_config();
    let (dir, tmp) = match std::env::var_os("TRAJLOC_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir()?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    cfg.output.dir = Some(dir.clone());
    let start = Instant::now();
    let mut current: Option<(String, Instant)> = None;
    let mut stage_times = Vec::new();
    let summary = pipeline::run_pipeline(&cfg, false, &mut |line| {
        eprintln!("  {line}");
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix("] running")) {
            current = Some((name.to_string(), Instant::now()));
        } else if line.contains("] done") {
            if let Some((name, t)) = current.take() {
                stage_times.push((name, t.elapsed()));
            }
        }
    })?;
    Ok(DeskRun {
        dir,
        summary,
        stage_times,
        total: start.elapsed(),
        _tmp: tmp,
    })
}

fn stage_time(run: &DeskRun, name: &str) -> Option<Duration> {
    run.stage_times.iter().find(|(n, _)| n == name).map(|(_, d)| *d)
}

fn criterion5(run: &DeskRun, cfg: &PipelineConfig) -> Outcome {
    let trace = fs::read_to_string(run.dir.join("stage1_trace.csv")).unwrap();
    let last = trace.lines().last().unwrap();
    let loss: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    let c = TrajectoryDataset::load(&run.dir.join(pipeline::CROWD)).unwrap();
    let ck = Checkpoint::load(&run.dir.join(pipeline::STAGE1_CKPT)).unwrap();
    let mut net = pipeline::network_from(&cfg.arch, c.m, c.t, 0, &[(&ck, &[F1])]).unwrap();
    let xs: Vec<&Features> = c.items.iter().take(MONITOR_SAMPLES).map(|i| &i.features).collect();
    let std = normalized_std(&net.embed_trajectories(&xs).unwrap());
    let time = stage_time(run, "stage1");
    let time_ok = time.is_none_or(|t| t < Duration::from_secs(30 * 60));
    Outcome::new(
        loss < -0.8 && std > 0.01 && time_ok,
        format!(
            "final mean loss {loss:.4}, normalized-embedding std {std:.4} over {} samples, stage time {}",
            xs.len(),
            time.map_or("cached".into(), |t| format!("{t:.1?}"))
        ),
    )
}

fn criterion6(run: &DeskRun) -> Outcome {
    let text = fs::read_to_string(run.dir.join("meet_in_middle.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(2)
        .map(|l| {
            let f: Vec<f64> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            (f[0], f[1])
        })
        .collect();
    let frac = rows.iter().filter(|(st, se)| se >= st).count() as f64 / rows.len() as f64;
    Outcome::new(frac > 0.55, format!("s_e >= s_t in {frac:.3} of {} held-out pairs", rows.len()))
}

fn labeling_row(dir: &Path, delta: &str) -> Option<(f64, f64)> {
    let text = fs::read_to_string(dir.join(pipeline::LABELING_SUMMARY)).ok()?;
    text.lines().skip(1).find_map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f[0] == delta).then(|| (f[4].parse().unwrap(), f[5].parse().unwrap()))
    })
}

fn criterion7(run: &DeskRun, cfg: &PipelineConfig) -> Outcome {
    let (Some((drop8, cdf8)), Some((drop9, cdf9))) = (labeling_row(&run.dir, "0.8"), labeling_row(&run.dir, "0.9")) else {
        return Outcome::new(false, "labeling summary lacks delta 0.8 or 0.9");
    };
    let limit = 0.25 * (cfg.field.width.hypot(cfg.field.height));
    Outcome::new(
        cdf9 < cdf8 && drop9 > drop8 && cdf9 < limit && cdf8 < limit,
        format!("delta 0.8: cdf68 {cdf8:.3} m, drop {drop8:.4}; delta 0.9: cdf68 {cdf9:.3} m, drop {drop9:.4}; limit {limit:.2} m"),
    )
}

fn criterion8(run: &DeskRun) -> Outcome {
    let rep = &run.summary.report;
    let get = |m: &str| rep.row(m).map(|r| r.cdf68);
    let (Some(knn), Some(ncp), Some(full), Some(fullc)) = (get("KNN"), get("NCP"), get("FULL"), get("FULL+C'")) else {
        return Outcome::new(false, format!("summary is missing models: {:?}", rep.warnings));
    };
    let gain_full = 1.0 - fullc / full;
    let gain_ncp = 1.0 - fullc / ncp;
    let fresh = run.summary.skipped.is_empty();
    let time_ok = !fresh || run.total < Duration::from_secs(2 * 3600);
    Outcome::new(
        gain_full >= 0.10 && gain_ncp >= 0.10 && knn > fullc && time_ok,
        format!(
            "cdf68 KNN {knn:.3}, NCP {ncp:.3}, FULL {full:.3}, FULL+C' {fullc:.3} m; gain vs FULL {:.1}%, vs NCP {:.1}%; pipeline {}",
            100.0 * gain_full,
            100.0 * gain_ncp,
            if fresh { format!("{:.1?}", run.total) } else { "resumed".into() }
        ),
    )
}

fn criterion9() -> Outcome {
    let truths = vec![[0.0f32, 0.0]; 100];
    let preds: Vec<[f32; 2]> = (1..=100).map(|i| [i as f32, 0.0]).collect();
    let rep = EvalReport::from_predictions(truths, preds).unwrap();
    let sorted: Vec<f64> = (1..=100).map(f64::from).collect();
    let ok = rep.cdf68 == 68.0 && rep.cdf95 == 95.0 && percentile(&sorted, 68) == 68.0;
    Outcome::new(ok, format!("cdf68 {}, cdf95 {}", rep.cdf68, rep.cdf95))
}

fn criterion10() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let field = sample_field(&ApDeployment::random(3, 6.0, 4.0, PropagationParams::default(), 5), 6.0, 4.0, 1.0, 5).unwrap();
    let mc = MobilityConfig {
        t: 5,
        ..MobilityConfig::default()
    };
    let ds = gen_dataset(&field, &mc, &Default::default(), 7, true, 6).unwrap();
    let net = Network::<f32>::new(&Default::default(), 3, 15, 7).unwrap();
    let ck = Checkpoint::new(net.store.clone(), None);

    let mut check = |name: &str, bytes: Vec<u8>, reread: &dyn Fn(&[u8]) -> Result<Vec<u8>, Error>| {
        let again = reread(&bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        let rejected = matches!(reread(&bad), Err(Error::Format { offset: 0, .. }));
        ok &= again == bytes && rejected;
        notes.push(format!("{name} {} bytes round-trip {} magic rejected {}", bytes.len(), again == bytes, rejected));
    };
    let mut b = Vec::new();
    ds.write_to(&mut b).unwrap();
    check("dataset", b, &|x| {
        let mut out = Vec::new();
        TrajectoryDataset::read_from(x)?.write_to(&mut out)?;
        Ok(out)
    });
    let mut b = Vec::new();
    ck.write_to(&mut b).unwrap();
    check("checkpoint", b, &|x| {
        let mut out = Vec::new();
        Checkpoint::read_from(x)?.write_to(&mut out)?;
        Ok(out)
    });
    let mut b = Vec::new();
    field.write_to(&mut b).unwrap();
    check("field", b, &|x| {
        let mut out = Vec::new();
        RadioField::read_from(x)?.write_to(&mut out)?;
        Ok(out)
    });
    Outcome::new(ok, notes.join("; "))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, criterion1());
    report(2, criterion2());
    report(3, criterion3());
    report(4, criterion4());

    let cfg = desk_config();
    eprintln!("running the desk preset pipeline");
    match desk_run() {
        Ok(run) => {
            report(5, criterion5(&run, &cfg));
            report(6, criterion6(&run));
            report(7, criterion7(&run, &cfg));
            report(8, criterion8(&run));
        }
        Err(e) => {
            for n in 5..=8 {
                report(n, Outcome::new(false, format!("desk pipeline failed: {e}")));
            }
        }
    }
    report(9, criterion9());
    report(10, criterion10());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
