//! Levy-walk trajectory generation over a [`RadioField`] and the trajectory
//! dataset container/format.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::radio_sim::{Point, RadioField};
use crate::seed;

const DATASET_MAGIC: &[u8; 4] = b"WTRJ";
const DATASET_VERSION: u16 = 1;
const FLAG_LABELED: u16 = 1;
const FLAG_PATHS: u16 = 2;

/// A position in meters, stored in single precision as in the dataset file.
pub type Pos = [f32; 2];

/// An `m x t` feature matrix, AP-major: entry `(i, j)` is AP `i` at step `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub m: usize,
    pub t: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(m: usize, t: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != m * t {
            return Err(Error::dim("features", format!("{} values for a {m}x{t} matrix", data.len())));
        }
        Ok(Features { m, t, data })
    }

    pub fn zeros(m: usize, t: usize) -> Self {
        Features { m, t, data: vec![0.0; m * t] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::dim("features", "ragged rows"));
        }
        Features::new(rows.len(), t, rows.concat())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.t + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.t + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.t..(i + 1) * self.t]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.m).map(|i| self.get(i, j)).collect()
    }

    /// Columns `start..end` (exclusive) as a new matrix.
    pub fn slice_time(&self, start: usize, end: usize) -> Features {
        let t = end - start;
        let mut data = Vec::with_capacity(self.m * t);
        for i in 0..self.m {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Features { m: self.m, t, data }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub features: Features,
    /// Endpoint label in meters.
    pub label: Option<Pos>,
    /// Ground-truth positions, one per step. Evaluation only.
    pub path: Option<Vec<Pos>>,
}

impl Trajectory {
    pub fn endpoint(&self) -> Option<Pos> {
        self.path.as_ref().and_then(|p| p.last().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub m: usize,
    pub t: usize,
    pub labeled: bool,
    pub items: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Seconds between consecutive samples.
    pub step_period: f64,
    /// Samples per trajectory.
    pub t: usize,
    /// Tail exponent of the flight-length power law.
    pub levy_alpha: f64,
    /// Shortest flight (m).
    pub flight_min: f64,
    /// Longest flight (m); `None` truncates at the field diagonal.
    pub flight_max: Option<f64>,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            speed_min: 0.7,
            speed_max: 1.3,
            step_period: 1.0,
            t: 15,
            levy_alpha: 1.6,
            flight_min: 2.0,
            flight_max: None,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::Config(format!(
                "need 0 < speed_min <= speed_max, got {} / {}",
                self.speed_min, self.speed_max
            )));
        }
        if self.t < 2 {
            return Err(Error::Config(format!("trajectory length t must be >= 2, got {}", self.t)));
        }
        if !(self.step_period > 0.0 && self.levy_alpha > 0.0 && self.flight_min > 0.0) {
            return Err(Error::Config("step_period, levy_alpha and flight_min must be positive".into()));
        }
        Ok(())
    }
}

/// Signal-to-feature mapping: additive Gaussian noise then affine map of
/// `[lo, hi]` dBm onto `[0, 1]` with clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Noise standard deviation (dBm).
    pub noise_sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            noise_sigma: 3.0,
            lo: -100.0,
            hi: -20.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::Config(format!(
                "normalization range needs lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Map a raw RSSI (dBm) onto `[0, 1]`; the out-of-range sentinel maps to 0.
    pub fn normalize(&self, raw: f64) -> f32 {
        if !raw.is_finite() {
            return 0.0;
        }
        ((raw - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) as f32
    }
}

/// Draw a flight length from a Pareto law with exponent `alpha` truncated to `[lo, hi]`.
fn truncated_pareto<R: Rng + ?Sized>(rng: &mut R, alpha: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let u: f64 = rng.random();
    let tail = (lo / hi).powf(alpha);
    lo * (1.0 - u * (1.0 - tail)).powf(-1.0 / alpha)
}

/// Generate one Levy-walk path of `cfg.t` grid-snapped positions.
///
/// Each flight has a uniform heading, a length from the truncated power law
/// and a constant speed; it is walked in whole steps of `speed * step_period`.
/// A step that would leave the field has the offending heading component
/// mirrored first.
pub fn gen_path(field: &RadioField, cfg: &MobilityConfig, seed: u64) -> Result<Vec<Point>> {
    cfg.validate()?;
    let (w, h) = (field.width, field.height);
    let flight_max = cfg.flight_max.unwrap_or_else(|| field.diagonal());
    let mut rng = seed::rng(seed);
    let mut pos = Point::new(rng.random::<f64>() * w, rng.random::<f64>() * h);
    let mut out = Vec::with_capacity(cfg.t);
    out.push(field.snap(pos)?);

    let mut remaining = 0usize;
    let (mut dx, mut dy, mut step) = (0.0f64, 0.0f64, 0.0f64);
    while out.len() < cfg.t {
        if remaining == 0 {
            let len = truncated_pareto(&mut rng, cfg.levy_alpha, cfg.flight_min, flight_max);
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let speed = if cfg.speed_max > cfg.speed_min {
                rng.random_range(cfg.speed_min..=cfg.speed_max)
            } else {
                cfg.speed_min
            };
            step = speed * cfg.step_period;
            dx = theta.cos();
            dy = theta.sin();
            remaining = ((len / step).round() as usize).max(1);
        }
        let nx = pos.x + step * dx;
        if !(0.0..=w).contains(&nx) {
            dx = -dx;
        }
        let ny = pos.y + step * dy;
        if !(0.0..=h).contains(&ny) {
            dy = -dy;
        }
        pos = Point::new((pos.x + step * dx).clamp(0.0, w), (pos.y + step * dy).clamp(0.0, h));
        remaining -= 1;
        out.push(field.snap(pos)?);
    }
    Ok(out)
}

/// Read the field along `path`, add measurement noise and normalize.
pub fn attach_features<R: Rng + ?Sized>(
    path: &[Point],
    field: &RadioField,
    fc: &FeatureConfig,
    rng: &mut R,
) -> Result<Features> {
    fc.validate()?;
    let t = path.len();
    let m = field.m;
    let noise = Normal::new(0.0, fc.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut feat = Features::zeros(m, t);
    for (j, q) in path.iter().enumerate() {
        let v = field.rssi_at(*q)?;
        for (i, &raw) in v.iter().enumerate() {
            let value = if raw.is_finite() {
                let eps = if fc.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                fc.normalize(raw + eps)
            } else {
                0.0
            };
            feat.set(i, j, value);
        }
    }
    Ok(feat)
}

/// Generate `count` trajectories. Item `k` uses seed `derive(seed, k)`, so
/// the output does not depend on how the work is scheduled.
pub fn gen_dataset(
    field: &RadioField,
    cfg: &MobilityConfig,
    fc: &FeatureConfig,
    count: usize,
    labeled: bool,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    cfg.validate()?;
    fc.validate()?;
    let items = (0..count)
        .into_par_iter()
        .map(|k| -> Result<Trajectory> {
            let item_seed = seed::derive(seed, k as u64);
            let path = gen_path(field, cfg, seed::derive_label(item_seed, "path"))?;
            let mut rng = seed::rng(seed::derive_label(item_seed, "noise"));
            let features = attach_features(&path, field, fc, &mut rng)?;
            let path: Vec<Pos> = path.iter().map(|p| [p.x as f32, p.y as f32]).collect();
            Ok(Trajectory {
                features,
                label: if labeled { path.last().copied() } else { None },
                path: Some(path),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        m: field.m,
        t: cfg.t,
        labeled,
        items,
    })
}

impl TrajectoryDataset {
    pub fn new(m: usize, t: usize, labeled: bool, items: Vec<Trajectory>) -> Result<Self> {
        let ds = TrajectoryDataset { m, t, labeled, items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, it) in self.items.iter().enumerate() {
            if it.features.m != self.m || it.features.t != self.t {
                return Err(Error::Dataset(format!(
                    "item {k} is {}x{}, dataset is {}x{}",
                    it.features.m, it.features.t, self.m, self.t
                )));
            }
            if self.labeled && it.label.is_none() {
                return Err(Error::Dataset(format!("item {k} of a labeled dataset has no label")));
            }
            if let Some(p) = &it.path {
                if p.len() != self.t {
                    return Err(Error::Dataset(format!("item {k} path has {} points", p.len())));
                }
            }
        }
        Ok(())
    }

    /// Same dataset with every label removed.
    pub fn strip_labels(&self) -> TrajectoryDataset {
        TrajectoryDataset {
            m: self.m,
            t: self.t,
            labeled: false,
            items: self
                .items
                .iter()
                .map(|it| Trajectory { label: None, ..it.clone() })
                .collect(),
        }
    }

    /// Concatenate two labeled datasets of matching shape.
    pub fn union(&self, other: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        if self.m != other.m || self.t != other.t {
            return Err(Error::Dataset(format!(
                "cannot join {}x{} with {}x{}",
                self.m, self.t, other.m, other.t
            )));
        }
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        TrajectoryDataset::new(self.m, self.t, self.labeled && other.labeled, items)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.validate()?;
        let paths = !self.items.is_empty() && self.items.iter().all(|it| it.path.is_some());
        if !paths && self.items.iter().any(|it| it.path.is_some()) {
            return Err(Error::Dataset("paths must be present on all items or none".into()));
        }
        if self.m > u16::MAX as usize || self.t > u16::MAX as usize {
            return Err(Error::Dataset("m and t must fit in u16".into()));
        }
        let mut flags = 0u16;
        if self.labeled {
            flags |= FLAG_LABELED;
        }
        if paths {
            flags |= FLAG_PATHS;
        }
        let mut w = ByteWriter::new(w);
        w.bytes(DATASET_MAGIC)?;
        w.u16(DATASET_VERSION)?;
        w.u16(flags)?;
        w.u16(self.m as u16)?;
        w.u16(self.t as u16)?;
        w.u64(self.items.len() as u64)?;
        for it in &self.items {
            for &v in &it.features.data {
                w.f32(v)?;
            }
            if self.labeled {
                let l = it.label.expect("validated");
                w.f32(l[0])?;
                w.f32(l[1])?;
            }
            if paths {
                for p in it.path.as_ref().expect("checked") {
                    w.f32(p[0])?;
                    w.f32(p[1])?;
                }
            }
        }
        w.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let flags_at = r.offset();
        let flags = r.u16()?;
        if flags & !(FLAG_LABELED | FLAG_PATHS) != 0 {
            return r.fail(flags_at, format!("unknown flag bits {flags:#06x}"));
        }
        let m = r.u16()? as usize;
        let t = r.u16()? as usize;
        let count = r.u64()? as usize;
        let labeled = flags & FLAG_LABELED != 0;
        let paths = flags & FLAG_PATHS != 0;
        let mut items = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let features = Features { m, t, data: r.f32_vec(m * t)? };
            let label = if labeled { Some([r.f32()?, r.f32()?]) } else { None };
            let path = if paths {
                let flat = r.f32_vec(2 * t)?;
                Some(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
            } else {
                None
            };
            items.push(Trajectory { features, label, path });
        }
        r.expect_eof()?;
        Ok(TrajectoryDataset { m, t, labeled, items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio_sim::{sample_field, ApDeployment, PropagationParams};

    fn field() -> RadioField {
        let dep = ApDeployment::random(4, 20.0, 20.0, PropagationParams::default(), 1);
        sample_field(&dep, 20.0, 20.0, 0.5, 2).unwrap()
    }

    #[test]
    fn fixed_speed_steps() {
        let f = field();
        let cfg = MobilityConfig { speed_min: 1.0, speed_max: 1.0, ..Default::default() };
        for s in 0..20 {
            let p = gen_path(&f, &cfg, s).unwrap();
            assert_eq!(p.len(), 15);
            for w in p.windows(2) {
                let d = w[0].dist(&w[1]);
                assert!((d - 1.0).abs() <= f.spacing * 2f64.sqrt() + 1e-9, "{d}");
            }
        }
    }

    #[test]
    fn paths_are_deterministic_and_on_grid() {
        let f = field();
        let cfg = MobilityConfig::default();
        let a = gen_path(&f, &cfg, 5).unwrap();
        assert_eq!(a, gen_path(&f, &cfg, 5).unwrap());
        for p in &a {
            assert_eq!(f.snap(*p).unwrap(), *p);
        }
    }

    #[test]
    fn normalization_endpoints() {
        let fc = FeatureConfig::default();
        assert_eq!(fc.normalize(-100.0), 0.0);
        assert_eq!(fc.normalize(-20.0), 1.0);
        assert_eq!(fc.normalize(-60.0), 0.5);
        assert_eq!(fc.normalize(-150.0), 0.0);
        assert_eq!(fc.normalize(f64::INFINITY), 0.0);
        let bad = FeatureConfig { lo: -20.0, hi: -20.0, ..fc };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_feature_is_zero() {
        let dep = ApDeployment {
            positions: vec![Point::new(0.0, 0.0)],
            params: PropagationParams { d_f: 5.0, ..Default::default() },
        };
        let f = sample_field(&dep, 20.0, 20.0, 1.0, 0).unwrap();
        let path = [Point::new(20.0, 20.0), Point::new(1.0, 1.0)];
        let feat = attach_features(&path, &f, &FeatureConfig::default(), &mut seed::rng(0)).unwrap();
        assert_eq!(feat.get(0, 0), 0.0);
        assert!(feat.get(0, 1) > 0.0);
    }

    #[test]
    fn noise_std_matches_config() {
        // Empirical std of N(0, 9) draws over 1e5 samples.
        let noise = Normal::new(0.0, FeatureConfig::default().noise_sigma).unwrap();
        let mut rng = seed::rng(17);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std - 3.0).abs() / 3.0 < 0.02, "{std}");
    }

    #[test]
    fn dataset_generation_and_io() {
        let f = field();
        let ds = gen_dataset(&f, &MobilityConfig::default(), &FeatureConfig::default(), 12, true, 3).unwrap();
        assert_eq!(ds.len(), 12);
        assert!(ds.items.iter().all(|it| it.label.is_some() && it.label == it.endpoint()));
        assert!(ds.items.iter().all(|it| it.features.in_unit_range()));
        let mut a = Vec::new();
        ds.write_to(&mut a).unwrap();
        let again = gen_dataset(&f, &MobilityConfig::default(), &FeatureConfig::default(), 12, true, 3).unwrap();
        let mut b = Vec::new();
        again.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(TrajectoryDataset::read_from(a.as_slice()).unwrap(), ds);

        let mut s = Vec::new();
        ds.strip_labels().write_to(&mut s).unwrap();
        let back = TrajectoryDataset::read_from(s.as_slice()).unwrap();
        assert!(!back.labeled);
        assert!(back.items.iter().all(|it| it.label.is_none() && it.path.is_some()));

        let mut bad = a.clone();
        bad[1] = b'X';
        match TrajectoryDataset::read_from(bad.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let truncated = &a[..a.len() - 3];
        assert!(matches!(TrajectoryDataset::read_from(truncated), Err(Error::Format { .. })));
        let mut badver = a.clone();
        badver[4] = 9;
        assert!(matches!(TrajectoryDataset::read_from(badver.as_slice()), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn single_item_shape() {
        let f = field();
        let ds = gen_dataset(&f, &MobilityConfig::default(), &FeatureConfig::default(), 1, false, 3).unwrap();
        assert_eq!((ds.items[0].features.m, ds.items[0].features.t), (4, 15));
        assert!(gen_dataset(&f, &MobilityConfig::default(), &FeatureConfig::default(), 0, false, 3).is_err());
    }
}
