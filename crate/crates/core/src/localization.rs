//! Endpoint localization on top of the learned encoders, evaluation and
//! baselines.

use serde::{Deserialize, Serialize};
use rayon::prelude::*;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::labeling::distance;
use crate::mobility::{Features, Pos, TrajectoryDataset};
use crate::model::{ArchConfig, Network, BOUNDS, F1, F2, LOC};
use crate::neural::{mse_loss, AdamConfig, Mode, Optimizer, Tensor};
use crate::seed;

/// Nearest-rank percentile of an ascending slice: the `ceil(p/100 * n)`-th
/// smallest value. `p` is in whole percent.
pub fn percentile(sorted: &[f64], p: u32) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let n = sorted.len();
    let rank = ((p as usize * n).div_ceil(100)).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocConfig {
    pub finetune_encoders: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LocConfig {
    fn default() -> Self {
        LocConfig {
            finetune_encoders: true,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl LocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Record the field extent in the network so predictions can be mapped and clamped.
pub fn set_bounds(net: &mut Network<f32>, width: f64, height: f64) -> Result<()> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Domain(format!("field bounds must be positive, got {width}x{height}")));
    }
    let id = net.store.id(BOUNDS).expect("network has a bounds buffer");
    net.store.value_mut(id).data = vec![width as f32, height as f32];
    Ok(())
}

pub fn bounds(net: &Network<f32>) -> Result<(f32, f32)> {
    let b = &net.store.get(BOUNDS).expect("network has a bounds buffer").value.data;
    if !(b[0] > 0.0 && b[1] > 0.0) {
        return Err(Error::Checkpoint("localization head has no field bounds; train it first".into()));
    }
    Ok((b[0], b[1]))
}

/// Map raw head outputs to meters: the head predicts offsets from the field
/// centre in units of the half extent.
fn to_positions(raw: &Tensor<f32>, w: f32, h: f32) -> Tensor<f32> {
    let mut out = raw.clone();
    for r in out.data.chunks_exact_mut(2) {
        r[0] = 0.5 * w + 0.5 * w * r[0];
        r[1] = 0.5 * h + 0.5 * h * r[1];
    }
    out
}

/// Train the position head (and, if configured, both encoders) by mean squared
/// error in m². Returns the mean loss per epoch.
pub fn train_loc(net: &mut Network<f32>, train: &TrajectoryDataset, cfg: &LocConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("localization training set is empty".into()));
    }
    if !train.labeled {
        return Err(Error::Dataset("localization training set must be labeled".into()));
    }
    let (w, h) = bounds(net)?;
    let fine = cfg.finetune_encoders;
    net.store.set_frozen(&[F1, F2], !fine);
    net.store.set_frozen(&[LOC], false);

    let xs: Vec<&Features> = train.items.iter().map(|it| &it.features).collect();
    let labels: Vec<f32> = train
        .items
        .iter()
        .flat_map(|it| it.label.expect("validated labeled dataset"))
        .collect();
    // Frozen encoders run in inference mode, so their outputs can be computed once.
    let cached = if fine { None } else { Some(net.embed_endpoints(&xs)?) };

    let mut opt = Optimizer::adam(cfg.adam);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seed::rng(seed::derive_label(cfg.seed, "loc-order"));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if fine && idx.len() < 2 {
                continue;
            }
            let target = Tensor::from_vec(
                &[idx.len(), 2],
                idx.iter().flat_map(|&i| [labels[2 * i], labels[2 * i + 1]]).collect(),
            );
            net.store.zero_grads();
            let loss = if let Some(emb) = &cached {
                let e = Tensor::from_vec(
                    &[idx.len(), net.arch.f2_out],
                    idx.iter().flat_map(|&i| emb[i].iter().copied()).collect(),
                );
                let (raw, tl) = net.loc.forward(&mut net.store, e, Mode::Train)?;
                let (loss, dpos) = mse_loss(&to_positions(&raw, w, h), &target)?;
                net.loc.backward(&mut net.store, tl, scale_grad(dpos, w, h))?;
                loss
            } else {
                let x = net.batch(&idx.iter().map(|&i| xs[i]).collect::<Vec<_>>())?;
                let (z, t1) = net.f1.forward(&mut net.store, x, Mode::Train)?;
                let (e, t2) = net.f2.forward(&mut net.store, z, Mode::Train)?;
                let (raw, tl) = net.loc.forward(&mut net.store, e, Mode::Train)?;
                let (loss, dpos) = mse_loss(&to_positions(&raw, w, h), &target)?;
                let de = net.loc.backward(&mut net.store, tl, scale_grad(dpos, w, h))?;
                let dz = net.f2.backward(&mut net.store, t2, de)?;
                net.f1.backward(&mut net.store, t1, dz)?;
                loss
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!("localization loss became {loss}")));
            }
            opt.step(&mut net.store, cfg.lr)?;
            sum += loss;
            n += 1;
        }
        trace.push(if n == 0 { 0.0 } else { sum / n as f64 });
    }
    Ok(trace)
}

fn scale_grad(mut d: Tensor<f32>, w: f32, h: f32) -> Tensor<f32> {
    for r in d.data.chunks_exact_mut(2) {
        r[0] *= 0.5 * w;
        r[1] *= 0.5 * h;
    }
    d
}

/// Predicted endpoints in meters, clamped to the field.
pub fn predict(net: &mut Network<f32>, xs: &[&Features]) -> Result<Vec<Pos>> {
    let (w, h) = bounds(net)?;
    let emb = net.embed_endpoints(xs)?;
    let mut out = Vec::with_capacity(xs.len());
    for chunk in emb.chunks(256) {
        let e = Tensor::from_vec(&[chunk.len(), net.arch.f2_out], chunk.concat());
        let raw = net.loc.infer(&mut net.store, e, Mode::Eval)?;
        let pos = to_positions(&raw, w, h);
        out.extend(pos.data.chunks_exact(2).map(|p| [p[0].clamp(0.0, w), p[1].clamp(0.0, h)]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub truths: Vec<Pos>,
    pub predictions: Vec<Pos>,
    pub errors: Vec<f64>,
    pub cdf68: f64,
    pub cdf95: f64,
}

impl EvalReport {
    pub fn from_predictions(truths: Vec<Pos>, predictions: Vec<Pos>) -> Result<Self> {
        if truths.is_empty() {
            return Err(Error::Config("evaluation set is empty".into()));
        }
        if truths.len() != predictions.len() {
            return Err(Error::dim("evaluate", format!("{} truths vs {} predictions", truths.len(), predictions.len())));
        }
        let errors: Vec<f64> = truths.iter().zip(&predictions).map(|(t, p)| distance(*t, *p)).collect();
        let (cdf68, cdf95) = cdf_pair(&errors);
        Ok(EvalReport {
            truths,
            predictions,
            errors,
            cdf68,
            cdf95,
        })
    }

    pub fn count(&self) -> usize {
        self.errors.len()
    }

    pub fn sorted_errors(&self) -> Vec<f64> {
        let mut e = self.errors.clone();
        e.sort_by(f64::total_cmp);
        e
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,true_x,true_y,pred_x,pred_y,err_m\n");
        for (k, ((t, p), e)) in self.truths.iter().zip(&self.predictions).zip(&self.errors).enumerate() {
            s.push_str(&format!("{k},{},{},{},{},{e:.6}\n", t[0], t[1], p[0], p[1]));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!("count={} cdf68={:.4} cdf95={:.4}", self.count(), self.cdf68, self.cdf95)
    }
}

/// CDF68 and CDF95 of a non-empty error list.
pub fn cdf_pair(errors: &[f64]) -> (f64, f64) {
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    (percentile(&e, 68), percentile(&e, 95))
}

fn truths(test: &TrajectoryDataset) -> Result<Vec<Pos>> {
    if !test.labeled {
        return Err(Error::Dataset("evaluation set must be labeled".into()));
    }
    Ok(test.items.iter().map(|it| it.label.expect("validated labeled dataset")).collect())
}

pub fn evaluate(net: &mut Network<f32>, test: &TrajectoryDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let t = truths(test)?;
    let xs: Vec<&Features> = test.items.iter().map(|it| &it.features).collect();
    EvalReport::from_predictions(t, predict(net, &xs)?)
}

/// Predict each test endpoint as the mean label of its `k` nearest training
/// trajectories (Euclidean distance over the flattened feature matrix).
pub fn knn_predict(train: &TrajectoryDataset, xs: &[&Features], k: usize) -> Result<Vec<Pos>> {
    if !train.labeled {
        return Err(Error::Dataset("KNN training set must be labeled".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k must lie in 1..={}, got {k}", train.len())));
    }
    if let Some(x) = xs.iter().find(|x| x.m != train.m || x.t != train.t) {
        return Err(Error::Dataset(format!(
            "query is {}x{}, training set is {}x{}",
            x.m, x.t, train.m, train.t
        )));
    }
    Ok(xs
        .par_iter()
        .map(|x| {
            let mut d: Vec<(f64, usize)> = train
                .items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let s: f64 = it
                        .features
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                        .sum();
                    (s, i)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            for &(_, i) in &d[..k] {
                let l = train.items[i].label.expect("validated labeled dataset");
                sx += l[0] as f64;
                sy += l[1] as f64;
            }
            [(sx / k as f64) as f32, (sy / k as f64) as f32]
        })
        .collect())
}

pub fn knn_baseline(train: &TrajectoryDataset, test: &TrajectoryDataset, k: usize) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let t = truths(test)?;
    let xs: Vec<&Features> = test.items.iter().map(|it| &it.features).collect();
    EvalReport::from_predictions(t, knn_predict(train, &xs, k)?)
}

/// The localization network trained from random initialisation on labeled
/// data alone.
pub fn ncp_baseline(
    arch: &ArchConfig,
    train: &TrajectoryDataset,
    test: &TrajectoryDataset,
    bounds_wh: (f64, f64),
    cfg: &LocConfig,
    init_seed: u64,
) -> Result<(Network<f32>, EvalReport)> {
    let mut net = Network::<f32>::new(arch, train.m, train.t, init_seed)?;
    set_bounds(&mut net, bounds_wh.0, bounds_wh.1)?;
    let cfg = LocConfig {
        finetune_encoders: true,
        ..cfg.clone()
    };
    train_loc(&mut net, train, &cfg)?;
    let report = evaluate(&mut net, test)?;
    Ok((net, report))
}
