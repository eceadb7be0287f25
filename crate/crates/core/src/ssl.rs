//! Two-stage Siamese representation learning.
//!
//! Stage 1 trains the trajectory encoder `f1` and predictor `h1` on
//! (trajectory, augmented trajectory) pairs. Stage 2 freezes `f1` and trains
//! the endpoint encoder `f2` and predictor `h2` on cut-and-flip pairs.
//! Both minimise the symmetric negative-cosine loss with stop-gradient on
//! the encoder outputs.

use serde::{Deserialize, Serialize};
use rand::seq::SliceRandom;

use crate::augment::{cut_and_flip, stage1_view, AugmentConfig};
use crate::error::{Error, Result};
use crate::mobility::{Features, TrajectoryDataset};
use crate::model::{Network, F1, F2, H1, H2};
use crate::neural::{
    cosine_similarity, simsiam_loss, LrSchedule, Mode, Optimizer, ParamStore, Real, Sequential, SgdConfig, Tensor,
};
use crate::seed;

/// Samples used for the per-epoch collapse monitor.
pub const MONITOR_SAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
    /// Stage 2 only: layer stage-1 augmentations on both cut-and-flip halves.
    pub pair_noise: bool,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 100,
            batch_size: 256,
            schedule: LrSchedule::default(),
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
            pair_noise: false,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        self.schedule.validate()
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean cosine similarity between predictions and paired targets.
    pub pair_sim: f64,
    /// Per-dimension std of L2-normalised encoder outputs on a fixed sample.
    pub embed_std: f64,
    pub lr: f64,
}

pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,embed_std,lr\n");
    for e in trace {
        s.push_str(&format!("{},{:.6},{:.6},{:.8}\n", e.epoch, e.mean_loss, e.embed_std, e.lr));
    }
    s
}

/// Mean per-dimension standard deviation of L2-normalised vectors. Sits near
/// `1/sqrt(d)` for well-spread embeddings and at 0 under collapse.
pub fn normalized_std(vectors: &[Vec<f32>]) -> f64 {
    let Some(d) = vectors.first().map(Vec::len) else {
        return 0.0;
    };
    let n = vectors.len() as f64;
    let normed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| *x as f64 / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for k in 0..d {
        let mean = normed.iter().map(|v| v[k]).sum::<f64>() / n;
        let var = normed.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / d as f64
}

/// Run `enc` then `pred` on both views, apply the loss, back-propagate.
/// Returns (loss, mean pair similarity).
/// One Siamese forward/backward pass on views `a` and `b`, accumulating
/// gradients into `store`. Returns (loss, mean pair similarity).
pub fn siamese_step<T: Real>(
    net_store: &mut ParamStore<T>,
    enc: &Sequential,
    pred: &Sequential,
    a: Tensor<T>,
    b: Tensor<T>,
) -> Result<(f64, f64)> {
    let (z1, tz1) = enc.forward(net_store, a, Mode::Train)?;
    let (p1, tp1) = pred.forward(net_store, z1.clone(), Mode::Train)?;
    let (z2, tz2) = enc.forward(net_store, b, Mode::Train)?;
    let (p2, tp2) = pred.forward(net_store, z2.clone(), Mode::Train)?;
    let out = simsiam_loss(&p1, &z2, &p2, &z1)?;
    // z1, z2 enter the loss as constants; gradients reach the encoder only
    // through the predictor outputs.
    let dz1 = pred.backward(net_store, tp1, out.d_p1)?;
    enc.backward(net_store, tz1, dz1)?;
    let dz2 = pred.backward(net_store, tp2, out.d_p2)?;
    enc.backward(net_store, tz2, dz2)?;
    Ok((out.loss, 0.5 * (out.sim_a + out.sim_b)))
}

fn batches(n: usize, batch: usize, seed_v: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_v));
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Stage 1: train `f1`/`h1` on (x, augment(x)) pairs. Labels are ignored.
pub fn train_stage1(net: &mut Network<f32>, data: &TrajectoryDataset, cfg: &StageConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    cfg.augment.validate(data.t)?;
    if data.m != net.m || data.t != net.t {
        return Err(Error::dim(F1, format!("data is {}x{}, network {}x{}", data.m, data.t, net.m, net.t)));
    }
    if data.len() < 2 {
        return Err(Error::Config("stage 1 needs at least 2 trajectories".into()));
    }
    net.store.set_frozen(&[F1, H1], false);
    let mut opt = Optimizer::sgd(cfg.sgd);
    let monitor: Vec<&Features> = data.items.iter().take(MONITOR_SAMPLES).map(|it| &it.features).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let (mut loss_sum, mut sim_sum, mut count) = (0.0, 0.0, 0usize);
        let epoch_seed = seed::derive_many(cfg.seed, &[1, epoch as u64]);
        for (bi, idx) in batches(data.len(), cfg.batch_size, epoch_seed).into_iter().enumerate() {
            let mut rng = seed::rng(seed::derive(epoch_seed, bi as u64 + 1));
            let views: Vec<Features> = idx
                .iter()
                .map(|&i| stage1_view(&data.items[i].features, &cfg.augment, &mut rng))
                .collect();
            let a = net.batch(&idx.iter().map(|&i| &data.items[i].features).collect::<Vec<_>>())?;
            let b = net.batch(&views.iter().collect::<Vec<_>>())?;
            net.store.zero_grads();
            let (loss, sim) = siamese_step(&mut net.store, &net.f1, &net.h1, a, b)?;
            opt.step(&mut net.store, lr)?;
            loss_sum += loss;
            sim_sum += sim;
            count += 1;
        }
        let embed_std = normalized_std(&net.embed_trajectories(&monitor)?);
        trace.push(EpochStats {
            epoch,
            mean_loss: loss_sum / count as f64,
            pair_sim: sim_sum / count as f64,
            embed_std,
            lr,
        });
    }
    Ok(trace)
}

fn f1_embed_tensor(net: &mut Network<f32>, xs: &[&Features]) -> Result<Tensor<f32>> {
    let emb = net.embed_trajectories(xs)?;
    let w = net.arch.f1_out;
    Ok(Tensor::from_vec(&[emb.len(), w], emb.concat()))
}

/// Stage 2: freeze `f1`, train `f2`/`h2` on cut-and-flip pairs drawn from
/// length-`2t-1` sequences. `f1` runs in inference mode and is never updated.
pub fn train_stage2(net: &mut Network<f32>, long: &TrajectoryDataset, cfg: &StageConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if long.t % 2 == 0 || long.t < 3 {
        return Err(Error::Domain(format!("stage 2 needs odd-length sequences, got length {}", long.t)));
    }
    let t = (long.t + 1) / 2;
    if long.m != net.m || t != net.t {
        return Err(Error::dim(
            F1,
            format!("cut-and-flip halves are {}x{t}, network expects {}x{}", long.m, net.m, net.t),
        ));
    }
    if cfg.pair_noise {
        cfg.augment.validate(t)?;
    }
    if long.len() < 2 {
        return Err(Error::Config("stage 2 needs at least 2 sequences".into()));
    }
    net.store.set_frozen(&[F1], true);
    net.store.set_frozen(&[F2, H2], false);

    let halves: Vec<(Features, Features)> = long
        .items
        .iter()
        .map(|it| cut_and_flip(&it.features))
        .collect::<Result<_>>()?;
    // With no per-epoch noise the frozen encoder's outputs never change.
    let cached = if cfg.pair_noise {
        None
    } else {
        let a: Vec<&Features> = halves.iter().map(|h| &h.0).collect();
        let b: Vec<&Features> = halves.iter().map(|h| &h.1).collect();
        Some((f1_embed_tensor(net, &a)?, f1_embed_tensor(net, &b)?))
    };
    let monitor: Vec<&Features> = halves.iter().take(MONITOR_SAMPLES).map(|h| &h.0).collect();
    let w = net.arch.f1_out;
    let mut opt = Optimizer::sgd(cfg.sgd);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        let (mut loss_sum, mut sim_sum, mut count) = (0.0, 0.0, 0usize);
        let epoch_seed = seed::derive_many(cfg.seed, &[2, epoch as u64]);
        for (bi, idx) in batches(long.len(), cfg.batch_size, epoch_seed).into_iter().enumerate() {
            let (a, b) = match &cached {
                Some((ea, eb)) => {
                    let pick = |e: &Tensor<f32>| {
                        let data: Vec<f32> = idx.iter().flat_map(|&i| e.row(i).iter().copied()).collect();
                        Tensor::from_vec(&[idx.len(), w], data)
                    };
                    (pick(ea), pick(eb))
                }
                None => {
                    let mut rng = seed::rng(seed::derive(epoch_seed, bi as u64 + 1));
                    let va: Vec<Features> =
                        idx.iter().map(|&i| stage1_view(&halves[i].0, &cfg.augment, &mut rng)).collect();
                    let vb: Vec<Features> =
                        idx.iter().map(|&i| stage1_view(&halves[i].1, &cfg.augment, &mut rng)).collect();
                    (
                        f1_embed_tensor(net, &va.iter().collect::<Vec<_>>())?,
                        f1_embed_tensor(net, &vb.iter().collect::<Vec<_>>())?,
                    )
                }
            };
            net.store.zero_grads();
            let (loss, sim) = siamese_step(&mut net.store, &net.f2, &net.h2, a, b)?;
            opt.step(&mut net.store, lr)?;
            loss_sum += loss;
            sim_sum += sim;
            count += 1;
        }
        let embed_std = normalized_std(&net.embed_endpoints(&monitor)?);
        trace.push(EpochStats {
            epoch,
            mean_loss: loss_sum / count as f64,
            pair_sim: sim_sum / count as f64,
            embed_std,
            lr,
        });
    }
    Ok(trace)
}

/// Trajectory and endpoint similarity of one same-endpoint pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSimilarity {
    pub s_t: f64,
    pub s_e: f64,
}

fn cos32(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    cosine_similarity(&a, &b)
}

/// For each length-`2t-1` sequence, compare the two cut-and-flip halves
/// (which end at the same position) in trajectory space and endpoint space.
pub fn pair_similarities(net: &mut Network<f32>, long: &TrajectoryDataset) -> Result<Vec<PairSimilarity>> {
    let halves: Vec<(Features, Features)> = long
        .items
        .iter()
        .map(|it| cut_and_flip(&it.features))
        .collect::<Result<_>>()?;
    let a: Vec<&Features> = halves.iter().map(|h| &h.0).collect();
    let b: Vec<&Features> = halves.iter().map(|h| &h.1).collect();
    let (ta, tb) = (net.embed_trajectories(&a)?, net.embed_trajectories(&b)?);
    let (ea, eb) = (net.embed_endpoints(&a)?, net.embed_endpoints(&b)?);
    (0..halves.len())
        .map(|k| {
            Ok(PairSimilarity {
                s_t: cos32(&ta[k], &tb[k])?,
                s_e: cos32(&ea[k], &eb[k])?,
            })
        })
        .collect()
}

/// Fraction of pairs whose endpoint similarity is at least their trajectory similarity.
pub fn meet_in_middle_fraction(pairs: &[PairSimilarity]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|p| p.s_e >= p.s_t).count() as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::{gen_dataset, FeatureConfig, MobilityConfig};
    use crate::model::ArchConfig;
    use crate::radio_sim::{sample_field, ApDeployment, PropagationParams};

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            conv_channels: 8,
            f1_out: 16,
            h1_hidden: 8,
            f2_hidden: 16,
            f2_out: 8,
            h2_hidden: 4,
            loc_hidden: 8,
            ..Default::default()
        }
    }

    fn data(t: usize, n: usize) -> TrajectoryDataset {
        let dep = ApDeployment::random(4, 20.0, 20.0, PropagationParams::default(), 1);
        let f = sample_field(&dep, 20.0, 20.0, 0.5, 2).unwrap();
        let cfg = MobilityConfig { t, ..Default::default() };
        gen_dataset(&f, &cfg, &FeatureConfig::default(), n, false, 3).unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let ds = data(15, 40);
        let mut net = Network::<f32>::new(&tiny_arch(), 4, 15, 0).unwrap();
        let cfg = StageConfig {
            epochs: 2,
            batch_size: 16,
            schedule: LrSchedule::constant(0.0),
            sgd: SgdConfig { momentum: 0.9, weight_decay: 0.0 },
            ..Default::default()
        };
        let before = net.store.digest(&[F1, H1]);
        let trace = train_stage1(&mut net, &ds, &cfg).unwrap();
        assert_eq!(trace.len(), 2);
        // BN running statistics move; learned weights do not.
        let weights: Vec<_> = net
            .store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::neural::ParamKind::Weight && (e.name.starts_with("f1.") || e.name.starts_with("h1.")))
            .map(|e| e.value.clone())
            .collect();
        let fresh = Network::<f32>::new(&tiny_arch(), 4, 15, 0).unwrap();
        let fresh_w: Vec<_> = fresh
            .store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::neural::ParamKind::Weight && (e.name.starts_with("f1.") || e.name.starts_with("h1.")))
            .map(|e| e.value.clone())
            .collect();
        assert_eq!(weights, fresh_w);
        assert_ne!(before, net.store.digest(&[F1, H1]));
    }

    #[test]
    fn stage2_keeps_f1_bitwise() {
        let long = data(29, 40);
        let mut net = Network::<f32>::new(&tiny_arch(), 4, 15, 0).unwrap();
        let before = net.store.digest(&[F1]);
        let h2_before = net.store.digest(&[F2, H2]);
        let cfg = StageConfig { epochs: 2, batch_size: 16, ..Default::default() };
        train_stage2(&mut net, &long, &cfg).unwrap();
        assert_eq!(before, net.store.digest(&[F1]));
        assert_ne!(h2_before, net.store.digest(&[F2, H2]));
        assert!(net.store.all_frozen(F1));

        let noisy = StageConfig { pair_noise: true, ..cfg };
        train_stage2(&mut net, &long, &noisy).unwrap();
        assert_eq!(before, net.store.digest(&[F1]));
    }

    #[test]
    fn stage2_rejects_even_lengths_and_tiny_batches() {
        let even = data(28, 8);
        let mut net = Network::<f32>::new(&tiny_arch(), 4, 14, 0).unwrap();
        assert!(matches!(train_stage2(&mut net, &even, &StageConfig::default()), Err(Error::Domain(_))));
        let ds = data(15, 8);
        let mut net = Network::<f32>::new(&tiny_arch(), 4, 15, 0).unwrap();
        let cfg = StageConfig { batch_size: 1, ..Default::default() };
        assert!(matches!(train_stage1(&mut net, &ds, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn normalized_std_detects_collapse() {
        let same = vec![vec![1.0f32, 2.0, 3.0]; 10];
        assert!(normalized_std(&same) < 1e-12);
        let spread = vec![vec![1.0f32, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        assert!(normalized_std(&spread) > 0.5);
    }
}
