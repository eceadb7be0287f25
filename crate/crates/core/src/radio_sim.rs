//! Log-normal shadowing radio field synthesis.
//!
//! Path loss at distance `d` is `pl_d0 + 10 n log10(d / d0) + chi` with
//! `chi ~ N(0, sigma^2)`. RSSI is `tx_power - path_loss`, or the
//! out-of-range sentinel beyond `d_f`.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seed;

/// Stored RSSI for a grid point beyond an AP's transmission range.
pub const OUT_OF_RANGE: f64 = f64::INFINITY;

const FIELD_MAGIC: &[u8; 4] = b"WFLD";
const FIELD_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationParams {
    /// Path loss at the reference distance (dB).
    pub pl_d0: f64,
    /// Reference distance (m).
    pub d0: f64,
    /// Path-loss exponent.
    pub n: f64,
    /// Shadowing standard deviation (dB).
    pub sigma: f64,
    /// Maximum transmission range (m).
    pub d_f: f64,
    /// Transmit power (dBm).
    pub tx_power: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            pl_d0: 40.0,
            d0: 1.0,
            n: 4.0,
            sigma: 1.0,
            d_f: 30.0,
            tx_power: 20.0,
        }
    }
}

impl PropagationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d0 > 0.0 && self.n > 0.0 && self.sigma >= 0.0 && self.d_f > self.d0;
        if !ok || !self.pl_d0.is_finite() || !self.tx_power.is_finite() {
            return Err(Error::Config(format!(
                "invalid propagation params {self:?}: need d0 > 0, n > 0, sigma >= 0, d_f > d0"
            )));
        }
        Ok(())
    }

    /// Strongest RSSI any grid point can receive without shadowing.
    pub fn peak_rssi(&self) -> f64 {
        self.tx_power - self.pl_d0
    }
}

/// Log-normal shadowing path loss in dB.
pub fn path_loss(d: f64, p: &PropagationParams, chi: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("path_loss needs d > 0, got {d}")));
    }
    Ok(p.pl_d0 + 10.0 * p.n * (d / p.d0).log10() + chi)
}

/// RSSI (dBm) at `q` from an AP at `ap`, drawing the shadowing term from `rng`.
/// Distances under `d0` are clamped to `d0`.
pub fn rssi_from_ap<R: Rng + ?Sized>(
    ap: Point,
    q: Point,
    p: &PropagationParams,
    rng: &mut R,
) -> Result<f64> {
    let d = ap.dist(&q);
    if d > p.d_f {
        return Ok(OUT_OF_RANGE);
    }
    let chi = if p.sigma > 0.0 {
        Normal::new(0.0, p.sigma)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(p.tx_power - path_loss(d.max(p.d0), p, chi)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApDeployment {
    pub positions: Vec<Point>,
    pub params: PropagationParams,
}

impl ApDeployment {
    /// Uniformly random AP placement inside a `width x height` field.
    pub fn random(count: usize, width: f64, height: f64, params: PropagationParams, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive_label(seed, "ap-placement"));
        let positions = (0..count)
            .map(|_| Point::new(rng.random::<f64>() * width, rng.random::<f64>() * height))
            .collect();
        ApDeployment { positions, params }
    }

    /// Parse explicit AP coordinates: one `x y` pair per line, `#` comments allowed.
    pub fn parse_positions(text: &str) -> Result<Vec<Point>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("AP file line {}: {e}", lineno + 1)))?;
            if nums.len() != 2 {
                return Err(Error::Config(format!(
                    "AP file line {}: expected `x y`, got {} values",
                    lineno + 1,
                    nums.len()
                )));
            }
            out.push(Point::new(nums[0], nums[1]));
        }
        Ok(out)
    }

    pub fn m(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        self.params.validate()?;
        if self.positions.is_empty() {
            return Err(Error::Config("AP deployment is empty".into()));
        }
        if self.positions.len() > u16::MAX as usize {
            return Err(Error::Config("too many APs".into()));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !(0.0..=width).contains(&p.x) || !(0.0..=height).contains(&p.y) {
                return Err(Error::Config(format!(
                    "AP {i} at ({}, {}) lies outside the {width} x {height} field",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Number of grid points along an axis of length `extent`.
pub fn grid_count(extent: f64, spacing: f64) -> usize {
    (extent / spacing + 1e-9).floor() as usize + 1
}

/// Per-AP RSSI sampled on a regular grid. Index order is row (y), column (x), AP.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioField {
    pub width: f64,
    pub height: f64,
    pub spacing: f64,
    pub rows: usize,
    pub cols: usize,
    pub m: usize,
    /// RSSI in dBm; [`OUT_OF_RANGE`] marks grid points beyond `d_f`.
    pub rssi: Vec<f64>,
}

/// Sample every grid point of the field. Each cell draws from its own
/// counter-derived stream, so the result is independent of thread count.
pub fn sample_field(
    deployment: &ApDeployment,
    width: f64,
    height: f64,
    spacing: f64,
    seed: u64,
) -> Result<RadioField> {
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::Config(format!("field must have positive area, got {width} x {height}")));
    }
    if !(spacing > 0.0) {
        return Err(Error::Config(format!("grid spacing must be positive, got {spacing}")));
    }
    deployment.validate(width, height)?;
    let rows = grid_count(height, spacing);
    let cols = grid_count(width, spacing);
    let m = deployment.m();
    let p = deployment.params;
    let cell_seed = seed::derive_label(seed, "shadowing");

    let row_data: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(cols * m);
            for c in 0..cols {
                let q = Point::new(c as f64 * spacing, r as f64 * spacing);
                let mut rng = seed::rng(seed::derive_many(cell_seed, &[r as u64, c as u64]));
                for ap in &deployment.positions {
                    out.push(rssi_from_ap(*ap, q, &p, &mut rng)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(RadioField {
        width,
        height,
        spacing,
        rows,
        cols,
        m,
        rssi: row_data.concat(),
    })
}

impl RadioField {
    pub fn grid_point(&self, row: usize, col: usize) -> Point {
        Point::new(col as f64 * self.spacing, row as f64 * self.spacing)
    }

    pub fn at_index(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.cols + col) * self.m;
        &self.rssi[base..base + self.m]
    }

    fn nearest_axis(v: f64, spacing: f64, count: usize) -> usize {
        // Ties (exactly half-way) go to the lower index.
        let idx = (v / spacing - 0.5).ceil().max(0.0) as usize;
        idx.min(count - 1)
    }

    /// Grid index (row, col) nearest to `q`.
    pub fn nearest_index(&self, q: Point) -> Result<(usize, usize)> {
        let tol = 1e-9 * self.width.max(self.height);
        if !(q.x >= -tol && q.x <= self.width + tol && q.y >= -tol && q.y <= self.height + tol) {
            return Err(Error::Domain(format!(
                "point ({}, {}) outside the {} x {} field",
                q.x, q.y, self.width, self.height
            )));
        }
        Ok((
            Self::nearest_axis(q.y, self.spacing, self.rows),
            Self::nearest_axis(q.x, self.spacing, self.cols),
        ))
    }

    /// RSSI vector at the grid point nearest to `q`.
    pub fn rssi_at(&self, q: Point) -> Result<&[f64]> {
        let (r, c) = self.nearest_index(q)?;
        Ok(self.at_index(r, c))
    }

    pub fn snap(&self, q: Point) -> Result<Point> {
        let (r, c) = self.nearest_index(q)?;
        Ok(self.grid_point(r, c))
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = ByteWriter::new(w);
        w.bytes(FIELD_MAGIC)?;
        w.u16(FIELD_VERSION)?;
        w.f64(self.width)?;
        w.f64(self.height)?;
        w.f64(self.spacing)?;
        w.u16(self.m as u16)?;
        w.u32(self.rows as u32)?;
        w.u32(self.cols as u32)?;
        for &v in &self.rssi {
            w.f32(v as f32)?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(FIELD_MAGIC)?;
        r.version(FIELD_VERSION)?;
        let width = r.f64()?;
        let height = r.f64()?;
        let spacing = r.f64()?;
        let m = r.u16()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows != grid_count(height, spacing) || cols != grid_count(width, spacing) || m == 0 {
            return Err(Error::Format {
                offset: 30,
                msg: format!("grid {rows}x{cols}x{m} inconsistent with {width} x {height} @ {spacing}"),
            });
        }
        let mut rssi = Vec::with_capacity(rows * cols * m);
        for _ in 0..rows * cols * m {
            rssi.push(r.f32()? as f64);
        }
        r.expect_eof()?;
        Ok(RadioField {
            width,
            height,
            spacing,
            rows,
            cols,
            m,
            rssi,
        })
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

    fn params() -> PropagationParams {
        PropagationParams::default()
    }

    #[test]
    fn path_loss_reference_points() {
        let p = params();
        assert_eq!(path_loss(p.d0, &p, 0.0).unwrap(), p.pl_d0);
        assert_eq!(path_loss(10.0 * p.d0, &p, 0.0).unwrap(), p.pl_d0 + 40.0);
        // 40 + 40 * log10(2) + 1.5 = 53.5411998...
        let v = path_loss(2.0, &p, 1.5).unwrap();
        assert!((v - 53.541_199_826_559_25).abs() < 1e-9, "{v}");
    }

    #[test]
    fn path_loss_rejects_nonpositive_distance() {
        assert!(matches!(path_loss(0.0, &params(), 0.0), Err(Error::Domain(_))));
        assert!(matches!(path_loss(-1.0, &params(), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn rssi_out_of_range_and_reference() {
        let p = params();
        let mut rng = seed::rng(1);
        let ap = Point::new(0.0, 0.0);
        assert_eq!(rssi_from_ap(ap, Point::new(31.0, 0.0), &p, &mut rng).unwrap(), OUT_OF_RANGE);
        let flat = PropagationParams { sigma: 0.0, ..p };
        let v = rssi_from_ap(ap, Point::new(1.0, 0.0), &flat, &mut rng).unwrap();
        assert_eq!(v, flat.tx_power - flat.pl_d0);
        // Sub-reference distances clamp to d0.
        let v = rssi_from_ap(ap, Point::new(0.2, 0.0), &flat, &mut rng).unwrap();
        assert_eq!(v, flat.tx_power - flat.pl_d0);
    }

    #[test]
    fn rssi_matches_scalar_recomputation() {
        let p = params();
        let ap = Point::new(0.0, 0.0);
        let q = Point::new(9.0, 12.0);
        let v = rssi_from_ap(ap, q, &p, &mut seed::rng(99)).unwrap();
        let chi: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut seed::rng(99));
        let expect = 20.0 - (40.0 + 40.0 * 15f64.log10() + chi);
        assert_eq!(v, expect);
    }

    #[test]
    fn grid_shapes() {
        let small = ApDeployment { positions: vec![Point::new(0.5, 0.5)], params: params() };
        let f = sample_field(&small, 1.0, 1.0, 1.0, 3).unwrap();
        assert_eq!((f.rows, f.cols, f.m), (2, 2, 1));
        assert_eq!(grid_count(60.0, 0.1), 601);
        assert_eq!(grid_count(120.0, 0.1), 1201);
        assert!(matches!(sample_field(&small, 0.0, 1.0, 1.0, 3), Err(Error::Config(_))));
        assert!(matches!(sample_field(&small, 1.0, 1.0, 0.0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_grid_rules() {
        let dep = ApDeployment { positions: vec![Point::new(0.5, 0.5)], params: params() };
        let f = sample_field(&dep, 1.0, 1.0, 0.1, 3).unwrap();
        assert_eq!(f.nearest_index(Point::new(0.04, 0.04)).unwrap(), (0, 0));
        assert_eq!(f.nearest_index(Point::new(0.05, 0.05)).unwrap(), (0, 0));
        assert_eq!(f.nearest_index(Point::new(0.06, 0.05)).unwrap(), (0, 1));
        assert_eq!(f.nearest_index(Point::new(0.3, 0.7)).unwrap(), (7, 3));
        assert_eq!(f.rssi_at(f.grid_point(4, 2)).unwrap(), f.at_index(4, 2));
        assert!(matches!(f.rssi_at(Point::new(1.5, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_zero_field_is_closed_form() {
        let p = PropagationParams { sigma: 0.0, ..params() };
        let dep = ApDeployment::random(4, 40.0, 20.0, p, 11);
        let f = sample_field(&dep, 40.0, 20.0, 0.5, 5).unwrap();
        for r in 0..f.rows {
            for c in 0..f.cols {
                let q = f.grid_point(r, c);
                for (a, ap) in dep.positions.iter().enumerate() {
                    let d = ap.dist(&q);
                    let got = f.at_index(r, c)[a];
                    if d > p.d_f {
                        assert_eq!(got, OUT_OF_RANGE);
                    } else {
                        let want = p.tx_power - p.pl_d0 - 10.0 * p.n * (d.max(p.d0) / p.d0).log10();
                        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn field_is_seed_deterministic_and_round_trips() {
        let dep = ApDeployment::random(3, 10.0, 8.0, params(), 2);
        let a = sample_field(&dep, 10.0, 8.0, 0.5, 9).unwrap();
        let b = sample_field(&dep, 10.0, 8.0, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let back = RadioField::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.rows, a.rows);
        for (x, y) in a.rssi.iter().zip(&back.rssi) {
            assert_eq!(*x as f32, *y as f32);
        }
        buf[0] = b'X';
        assert!(matches!(RadioField::read_from(buf.as_slice()), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn parse_ap_file() {
        let pts = ApDeployment::parse_positions("# aps\n1 2\n 3.5\t4\n\n").unwrap();
        assert_eq!(pts, vec![Point::new(1.0, 2.0), Point::new(3.5, 4.0)]);
        assert!(ApDeployment::parse_positions("1 2 3").is_err());
    }
}
