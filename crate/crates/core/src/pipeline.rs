//! End-to-end pipeline: field, datasets, two training stages, pseudo-labeling,
//! localization models and the summary report, with a content-hashed
//! manifest so that up-to-date stages are skipped on re-runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::labeling::build_refined;
use crate::localization::{evaluate, knn_baseline, ncp_baseline, set_bounds, train_loc, EvalReport};
use crate::mobility::{gen_dataset, MobilityConfig, TrajectoryDataset};
use crate::model::{ArchConfig, Network, F1, F2, H1, H2, LOC};
use crate::neural::Checkpoint;
use crate::radio_sim::{sample_field, ApDeployment, RadioField};
use crate::seed;
use crate::ssl::{meet_in_middle_fraction, pair_similarities, train_stage1, train_stage2, trace_csv};

pub const MANIFEST: &str = "manifest.tsv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FIELD: &str = "field.wfld";
pub const CROWD: &str = "crowd.wtrj";
pub const CROWD_LONG: &str = "crowd_long.wtrj";
pub const HELDOUT_LONG: &str = "heldout_long.wtrj";
pub const LABELED: &str = "labeled.wtrj";
pub const TEST: &str = "test.wtrj";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const SUMMARY: &str = "summary.csv";
pub const LABELING_SUMMARY: &str = "labeling_summary.csv";

/// Models in report order: (file slug, display name).
pub const MODELS: [(&str, &str); 4] = [("knn", "KNN"), ("ncp", "NCP"), ("full", "FULL"), ("full_cprime", "FULL+C'")];

/// Cap the worker pool at `TRAJLOC_THREADS` if set. Call before any parallel work.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("TRAJLOC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("TRAJLOC_THREADS must be a positive integer, got {v:?}")))?;
    // A pool that already exists keeps its size; nothing else to do.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn delta_tag(delta: f64) -> String {
    format!("{delta}")
}

pub fn cprime_file(delta: f64) -> String {
    format!("cprime_d{}.wtrj", delta_tag(delta))
}

pub fn labels_file(delta: f64) -> String {
    format!("labels_d{}.csv", delta_tag(delta))
}

/// Build a network and fill the named sub-networks from checkpoints.
pub fn network_from(
    arch: &ArchConfig,
    m: usize,
    t: usize,
    init_seed: u64,
    sources: &[(&Checkpoint, &[&str])],
) -> Result<Network<f32>> {
    let mut net = Network::<f32>::new(arch, m, t, init_seed)?;
    for (ck, prefixes) in sources {
        net.store.load_from(&ck.params, prefixes)?;
    }
    Ok(net)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct StageRecord {
    key: String,
    seed: u64,
    outputs: Vec<(String, String)>,
}

/// Stage keys and output hashes of a run, kept in `manifest.tsv`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    order: Vec<String>,
    stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        let Ok(text) = fs::read_to_string(path) else {
            return Ok(m);
        };
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["stage", name, key, seed_v] => {
                    let seed_v = seed_v
                        .parse()
                        .map_err(|_| Error::Dataset(format!("bad seed in manifest line {line:?}")))?;
                    m.order.push(name.to_string());
                    m.stages.insert(
                        name.to_string(),
                        StageRecord {
                            key: key.to_string(),
                            seed: seed_v,
                            outputs: Vec::new(),
                        },
                    );
                }
                ["artifact", stage, file, hash] => {
                    let rec = m
                        .stages
                        .get_mut(*stage)
                        .ok_or_else(|| Error::Dataset(format!("manifest artifact before its stage: {line:?}")))?;
                    rec.outputs.push((file.to_string(), hash.to_string()));
                }
                _ => return Err(Error::Dataset(format!("unreadable manifest line {line:?}"))),
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# kind\tstage\tkey-or-file\tseed-or-sha256\n");
        for name in &self.order {
            let r = &self.stages[name];
            let _ = writeln!(s, "stage\t{name}\t{}\t{}", r.key, r.seed);
            for (file, hash) in &r.outputs {
                let _ = writeln!(s, "artifact\t{name}\t{file}\t{hash}");
            }
        }
        s
    }

    /// Every artifact with its hash, in stage order.
    pub fn artifacts(&self) -> Vec<(String, String)> {
        self.order
            .iter()
            .flat_map(|n| self.stages[n].outputs.iter().cloned())
            .collect()
    }

    pub fn stage_names(&self) -> &[String] {
        &self.order
    }

    fn record(&mut self, name: &str, rec: StageRecord) {
        if !self.stages.contains_key(name) {
            self.order.push(name.to_string());
        }
        self.stages.insert(name.to_string(), rec);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub report: Report,
}

struct Runner<'a> {
    dir: PathBuf,
    force: bool,
    manifest: Manifest,
    summary: RunSummary,
    log: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Run `body` unless the manifest shows the same stage key and intact outputs.
    fn stage(
        &mut self,
        name: &str,
        seed_v: u64,
        settings: &str,
        inputs: &[&str],
        outputs: &[String],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: Error, file: &str, dir: &Path| Error::Stage {
            stage: name.to_string(),
            path: dir.join(file),
            source: Box::new(e),
        };
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(seed_v.to_le_bytes());
        h.update(settings.as_bytes());
        for input in inputs {
            let hash = sha256_file(&self.path(input)).map_err(|e| wrap(e, input, &self.dir))?;
            h.update(input.as_bytes());
            h.update(hash.as_bytes());
        }
        let key = hex::encode(h.finalize());

        if !self.force {
            if let Some(rec) = self.manifest.stages.get(name) {
                let intact = rec.key == key
                    && rec.outputs.len() == outputs.len()
                    && rec.outputs.iter().zip(outputs).all(|((f, hash), want)| {
                        f == want && sha256_file(&self.path(f)).is_ok_and(|h| &h == hash)
                    });
                if intact {
                    (self.log)(&format!("[{name}] up to date"));
                    self.summary.skipped.push(name.to_string());
                    return Ok(());
                }
            }
        }
        (self.log)(&format!("[{name}] running"));
        let started = std::time::Instant::now();
        let first = outputs.first().map(String::as_str).unwrap_or("");
        body(&self.dir).map_err(|e| wrap(e, first, &self.dir))?;
        let mut hashes = Vec::with_capacity(outputs.len());
        for out in outputs {
            let hash = sha256_file(&self.path(out)).map_err(|e| wrap(e, out, &self.dir))?;
            hashes.push((out.clone(), hash));
        }
        self.manifest.record(
            name,
            StageRecord {
                key,
                seed: seed_v,
                outputs: hashes,
            },
        );
        fs::write(self.path(MANIFEST), self.manifest.to_text()).map_err(|e| wrap(e.into(), MANIFEST, &self.dir))?;
        (self.log)(&format!("[{name}] done in {:.1}s", started.elapsed().as_secs_f64()));
        self.summary.executed.push(name.to_string());
        Ok(())
    }
}

fn toml_of<T: serde::Serialize>(parts: &[(&str, &T)]) -> String {
    let mut s = String::new();
    for (k, v) in parts {
        let _ = writeln!(s, "[{k}]\n{}", toml::to_string(v).expect("section serializes"));
    }
    s
}

fn write_meta(path: &Path, model: &str, crowd_used: usize, delta: Option<f64>, train_size: usize) -> Result<()> {
    let delta = delta.map(delta_tag).unwrap_or_default();
    fs::write(
        path,
        format!("model={model}\ncrowdsourced_c={crowd_used}\ndelta={delta}\ntrain_size={train_size}\n"),
    )?;
    Ok(())
}

fn save_eval(dir: &Path, slug: &str, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(format!("eval_{slug}.csv")), report.to_csv())?;
    Ok(())
}

/// Run every stage of the pipeline described by `cfg`.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool, log: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.require_complete()?;
    let dir = cfg.output.dir.clone().expect("checked by require_complete");
    fs::create_dir_all(&dir)?;
    let master = cfg.master_seed();
    let delta = cfg.labeling.delta.expect("checked by require_complete");

    let mut snapshot = cfg.clone();
    snapshot.output.dir = None;
    let snapshot = snapshot.to_toml();

    let manifest = if force { Manifest::default() } else { Manifest::load(&dir.join(MANIFEST))? };
    let mut r = Runner {
        dir: dir.clone(),
        force,
        manifest,
        summary: RunSummary::default(),
        log,
    };

    r.stage("config", master, &snapshot, &[], &[CONFIG_SNAPSHOT.into()], |d| {
        fs::write(d.join(CONFIG_SNAPSHOT), &snapshot).map_err(Error::from)
    })?;

    // Field.
    let field_seed = seed::derive_label(master, "field");
    let ap_text = match &cfg.field.ap_file {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Stage {
            stage: "field".into(),
            path: p.clone(),
            source: Box::new(e.into()),
        })?),
        None => None,
    };
    let settings = format!("{}\n{}", toml_of(&[("field", &cfg.field)]), ap_text.clone().unwrap_or_default());
    r.stage("field", field_seed, &settings, &[], &[FIELD.into()], |d| {
        let dep = match &ap_text {
            Some(text) => ApDeployment {
                positions: ApDeployment::parse_positions(text)?,
                params: cfg.field.propagation,
            },
            None => ApDeployment::random(cfg.field.aps, cfg.field.width, cfg.field.height, cfg.field.propagation, field_seed),
        };
        sample_field(&dep, cfg.field.width, cfg.field.height, cfg.field.spacing, field_seed)?.save(&d.join(FIELD))
    })?;

    // Datasets.
    let data_seed = seed::derive_label(master, "data");
    let settings = toml_of(&[("mobility", &cfg.mobility)])
        + &toml_of(&[("features", &cfg.features)])
        + &toml_of(&[("data", &cfg.data)]);
    let outputs: Vec<String> = [CROWD, CROWD_LONG, HELDOUT_LONG, LABELED, TEST].map(String::from).to_vec();
    r.stage("data", data_seed, &settings, &[FIELD], &outputs, |d| {
        let field = RadioField::load(&d.join(FIELD))?;
        let long_cfg = MobilityConfig {
            t: 2 * cfg.mobility.t - 1,
            ..cfg.mobility.clone()
        };
        let d_cfg = &cfg.data;
        let plan: [(&str, &MobilityConfig, usize, bool); 5] = [
            (CROWD, &cfg.mobility, d_cfg.crowd, false),
            (CROWD_LONG, &long_cfg, d_cfg.crowd_long, false),
            (HELDOUT_LONG, &long_cfg, d_cfg.heldout_pairs.max(1), false),
            (LABELED, &cfg.mobility, d_cfg.labeled, true),
            (TEST, &cfg.mobility, d_cfg.test, true),
        ];
        for (file, mc, count, labeled) in plan {
            let s = seed::derive_label(data_seed, file);
            gen_dataset(&field, mc, &cfg.features, count, labeled, s)?.save(&d.join(file))?;
        }
        Ok(())
    })?;

    let init_seed = seed::derive_label(master, "init");
    let (m, t) = {
        let f = RadioField::load(&dir.join(FIELD))?;
        (f.m, cfg.mobility.t)
    };

    // Stage 1.
    let s1_seed = seed::derive_label(master, "stage1");
    let s1 = cfg.stage1.to_stage_config(&cfg.augment, s1_seed);
    let settings = toml_of(&[("arch", &cfg.arch)]) + &toml_of(&[("stage1", &cfg.stage1)]) + &toml_of(&[("augment", &cfg.augment)]);
    r.stage("stage1", s1_seed, &settings, &[CROWD], &[STAGE1_CKPT.into(), "stage1_trace.csv".into()], |d| {
        let c = TrajectoryDataset::load(&d.join(CROWD))?;
        let mut net = Network::<f32>::new(&cfg.arch, m, t, init_seed)?;
        let trace = train_stage1(&mut net, &c, &s1)?;
        Checkpoint::new(net.store.subset(&[F1, H1]), None).save(&d.join(STAGE1_CKPT))?;
        fs::write(d.join("stage1_trace.csv"), trace_csv(&trace))?;
        Ok(())
    })?;

    // Stage 2.
    let s2_seed = seed::derive_label(master, "stage2");
    let s2 = cfg.stage2.to_stage_config(&cfg.augment, s2_seed);
    let settings = toml_of(&[("arch", &cfg.arch)]) + &toml_of(&[("stage2", &cfg.stage2)]) + &toml_of(&[("augment", &cfg.augment)]);
    let outputs: Vec<String> = [STAGE2_CKPT, "stage2_trace.csv", "meet_in_middle.csv"].map(String::from).to_vec();
    r.stage("stage2", s2_seed, &settings, &[STAGE1_CKPT, CROWD_LONG, HELDOUT_LONG], &outputs, |d| {
        let ck1 = Checkpoint::load(&d.join(STAGE1_CKPT))?;
        let long = TrajectoryDataset::load(&d.join(CROWD_LONG))?;
        let mut net = network_from(&cfg.arch, m, t, init_seed, &[(&ck1, &[F1])])?;
        let trace = train_stage2(&mut net, &long, &s2)?;
        Checkpoint::new(net.store.subset(&[F1, F2, H2]), None).save(&d.join(STAGE2_CKPT))?;
        fs::write(d.join("stage2_trace.csv"), trace_csv(&trace))?;
        let held = TrajectoryDataset::load(&d.join(HELDOUT_LONG))?;
        let pairs = pair_similarities(&mut net, &held)?;
        let mut s = format!("# fraction_se_ge_st={:.6}\nindex,s_t,s_e\n", meet_in_middle_fraction(&pairs));
        for (k, p) in pairs.iter().enumerate() {
            let _ = writeln!(s, "{k},{:.6},{:.6}", p.s_t, p.s_e);
        }
        fs::write(d.join("meet_in_middle.csv"), s)?;
        Ok(())
    })?;

    // Pseudo-labels for every threshold of interest.
    let deltas = cfg.labeling.all_deltas();
    let mut outputs: Vec<String> = deltas.iter().flat_map(|d| [cprime_file(*d), labels_file(*d)]).collect();
    outputs.push(LABELING_SUMMARY.into());
    let settings = toml_of(&[("arch", &cfg.arch)]) + &toml_of(&[("labeling", &cfg.labeling)]);
    r.stage("label", 0, &settings, &[STAGE2_CKPT, CROWD, LABELED], &outputs, |d| {
        let ck2 = Checkpoint::load(&d.join(STAGE2_CKPT))?;
        let c = TrajectoryDataset::load(&d.join(CROWD))?;
        let ct = TrajectoryDataset::load(&d.join(LABELED))?;
        let mut net = network_from(&cfg.arch, m, t, init_seed, &[(&ck2, &[F1, F2])])?;
        let mut summary = String::from("delta,total,labeled,dropped,drop_rate,cdf68,cdf95\n");
        for dl in &deltas {
            let (cp, rep) = build_refined(&mut net, &c, &ct, &cfg.labeling.label_config(*dl))?;
            cp.save(&d.join(cprime_file(*dl)))?;
            fs::write(d.join(labels_file(*dl)), rep.to_csv())?;
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                summary,
                "{},{},{},{},{:.6},{},{}",
                delta_tag(*dl),
                rep.total,
                rep.labeled,
                rep.dropped,
                rep.drop_rate,
                opt(rep.cdf68),
                opt(rep.cdf95)
            );
        }
        fs::write(d.join(LABELING_SUMMARY), summary)?;
        Ok(())
    })?;

    // Localization models.
    let loc_settings = toml_of(&[("arch", &cfg.arch)]) + &toml_of(&[("localization", &cfg.localization)]);
    let bounds = (cfg.field.width, cfg.field.height);
    let k = cfg.localization.knn_k;
    r.stage("knn", 0, &format!("k={k}"), &[LABELED, TEST], &["eval_knn.csv".into(), "eval_knn.meta".into()], |d| {
        let ct = TrajectoryDataset::load(&d.join(LABELED))?;
        let test = TrajectoryDataset::load(&d.join(TEST))?;
        save_eval(d, "knn", &knn_baseline(&ct, &test, k)?)?;
        write_meta(&d.join("eval_knn.meta"), "KNN", 0, None, ct.len())
    })?;

    let ncp_seed = seed::derive_label(master, "ncp");
    let outs: Vec<String> = ["loc_ncp.ckpt", "eval_ncp.csv", "eval_ncp.meta"].map(String::from).to_vec();
    r.stage("ncp", ncp_seed, &loc_settings, &[LABELED, TEST], &outs, |d| {
        let ct = TrajectoryDataset::load(&d.join(LABELED))?;
        let test = TrajectoryDataset::load(&d.join(TEST))?;
        let lc = cfg.localization.to_loc_config(seed::derive_label(ncp_seed, "train"));
        let (net, rep) = ncp_baseline(&cfg.arch, &ct, &test, bounds, &lc, seed::derive_label(ncp_seed, "init"))?;
        Checkpoint::new(net.store.subset(&[F1, F2, LOC]), None).save(&d.join("loc_ncp.ckpt"))?;
        save_eval(d, "ncp", &rep)?;
        write_meta(&d.join("eval_ncp.meta"), "NCP", 0, None, ct.len())
    })?;

    let full_seed = seed::derive_label(master, "full");
    let cprime = cprime_file(delta);
    for (slug, name, with_c) in [("full", "FULL", false), ("full_cprime", "FULL+C'", true)] {
        let outs: Vec<String> = vec![format!("loc_{slug}.ckpt"), format!("eval_{slug}.csv"), format!("eval_{slug}.meta")];
        let mut inputs = vec![STAGE2_CKPT, LABELED, TEST];
        if with_c {
            inputs.push(&cprime);
        }
        r.stage(slug, full_seed, &loc_settings, &inputs, &outs, |d| {
            let ck2 = Checkpoint::load(&d.join(STAGE2_CKPT))?;
            let ct = TrajectoryDataset::load(&d.join(LABELED))?;
            let test = TrajectoryDataset::load(&d.join(TEST))?;
            let (train, used) = if with_c {
                let cp = TrajectoryDataset::load(&d.join(&cprime))?;
                (ct.union(&cp)?, cp.len())
            } else {
                (ct, 0)
            };
            let mut net = network_from(&cfg.arch, m, t, init_seed, &[(&ck2, &[F1, F2])])?;
            set_bounds(&mut net, bounds.0, bounds.1)?;
            train_loc(&mut net, &train, &cfg.localization.to_loc_config(full_seed))?;
            let rep = evaluate(&mut net, &test)?;
            Checkpoint::new(net.store.subset(&[F1, F2, LOC]), None).save(&d.join(&outs[0]))?;
            save_eval(d, slug, &rep)?;
            write_meta(&d.join(&outs[2]), name, used, with_c.then_some(delta), train.len())
        })?;
    }

    let mut inputs: Vec<String> = Vec::new();
    let mut outputs: Vec<String> = vec![SUMMARY.into()];
    for (slug, _) in MODELS {
        inputs.push(format!("eval_{slug}.csv"));
        inputs.push(format!("eval_{slug}.meta"));
        outputs.push(format!("cdf_{slug}.csv"));
    }
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    r.stage("report", 0, "", &inputs, &outputs, |d| report(d).map(|_| ()))?;
    let report = report(&dir)?;
    for w in &report.warnings {
        (r.log)(&format!("warning: {w}"));
    }
    r.summary.report = report;
    Ok(r.summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub crowdsourced_c: Option<usize>,
    pub delta: Option<f64>,
    pub train_size: Option<usize>,
    pub cdf68: f64,
    pub cdf95: f64,
    pub sorted_errors: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,crowdsourced_c,delta,train_size,cdf68,cdf95\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4}",
                r.model,
                opt(r.crowdsourced_c.map(|v| v.to_string())),
                opt(r.delta.map(delta_tag)),
                opt(r.train_size.map(|v| v.to_string())),
                r.cdf68,
                r.cdf95
            );
        }
        s
    }
}

fn read_errors(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|c| c == "err_m")
        .ok_or_else(|| Error::Dataset(format!("{} has no err_m column", path.display())))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Dataset(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

fn read_meta(path: &Path) -> Option<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect(),
    )
}

/// Collect every `eval_<model>.csv` in `dir` into `summary.csv` plus one
/// `cdf_<model>.csv` of sorted errors per model. Missing or unreadable
/// reports become warnings.
pub fn report(dir: &Path) -> Result<Report> {
    let mut slugs: Vec<String> = MODELS.iter().map(|(s, _)| s.to_string()).collect();
    if let Ok(entries) = fs::read_dir(dir) {
        let mut extra: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let slug = name.strip_prefix("eval_")?.strip_suffix(".csv")?.to_string();
                (!slugs.contains(&slug)).then_some(slug)
            })
            .collect();
        extra.sort();
        slugs.extend(extra);
    }
    let mut rep = Report::default();
    for slug in &slugs {
        let csv = dir.join(format!("eval_{slug}.csv"));
        if !csv.exists() {
            rep.warnings.push(format!("no evaluation report for `{slug}`"));
            continue;
        }
        let mut errors = match read_errors(&csv) {
            Ok(e) if !e.is_empty() => e,
            Ok(_) => {
                rep.warnings.push(format!("{} is empty", csv.display()));
                continue;
            }
            Err(e) => {
                rep.warnings.push(e.to_string());
                continue;
            }
        };
        errors.sort_by(f64::total_cmp);
        let (cdf68, cdf95) = crate::localization::cdf_pair(&errors);
        let meta = read_meta(&dir.join(format!("eval_{slug}.meta")));
        if meta.is_none() {
            rep.warnings.push(format!("no metadata for `{slug}`"));
        }
        let get = |k: &str| meta.as_ref().and_then(|m| m.get(k)).filter(|v| !v.is_empty()).cloned();
        let default_name = MODELS.iter().find(|(s, _)| s == slug).map_or(slug.as_str(), |(_, n)| n);
        rep.rows.push(ReportRow {
            model: get("model").unwrap_or_else(|| default_name.to_string()),
            crowdsourced_c: get("crowdsourced_c").and_then(|v| v.parse().ok()),
            delta: get("delta").and_then(|v| v.parse().ok()),
            train_size: get("train_size").and_then(|v| v.parse().ok()),
            cdf68,
            cdf95,
            sorted_errors: errors,
        });
        let curve: String = std::iter::once("rank,err_m\n".to_string())
            .chain(rep.rows.last().unwrap().sorted_errors.iter().enumerate().map(|(i, e)| format!("{},{e:.6}\n", i + 1)))
            .collect();
        if fs::create_dir_all(dir).is_ok() {
            fs::write(dir.join(format!("cdf_{slug}.csv")), curve)?;
        }
    }
    if dir.exists() {
        fs::write(dir.join(SUMMARY), rep.to_csv())?;
    }
    Ok(rep)
}
