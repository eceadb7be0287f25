//! Trajectory augmentations: flipping, additive noise, scaling, masking and
//! cut-and-flip. All outputs stay in `[0, 1]`.

use serde::{Deserialize, Serialize};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mobility::Features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Variance of the additive Gaussian term, in normalized units.
    pub additive_alpha: f64,
    /// Half-width of the uniform scaling term.
    pub scale_beta: f64,
    pub mask_len_min: usize,
    pub mask_len_max: usize,
    /// Masked segments per trajectory.
    pub mask_segments: usize,
    /// Fraction of entries touched by additive and scaling.
    pub entry_prob: f64,
    pub p_flip: f64,
    pub p_additive: f64,
    pub p_scale: f64,
    pub p_mask: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            additive_alpha: 0.2,
            scale_beta: 0.1,
            mask_len_min: 3,
            mask_len_max: 9,
            mask_segments: 4,
            entry_prob: 0.5,
            p_flip: 0.5,
            p_additive: 0.5,
            p_scale: 0.5,
            p_mask: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if !(self.additive_alpha >= 0.0) {
            return Err(Error::Config("additive_alpha must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.scale_beta) {
            return Err(Error::Config("scale_beta must lie in [0, 1)".into()));
        }
        if self.mask_segments > 0
            && !(1 <= self.mask_len_min && self.mask_len_min <= self.mask_len_max && self.mask_len_max < t)
        {
            return Err(Error::Config(format!(
                "mask lengths need 1 <= {} <= {} < t = {t}",
                self.mask_len_min, self.mask_len_max
            )));
        }
        for p in [self.entry_prob, self.p_flip, self.p_additive, self.p_scale, self.p_mask] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Reverse the temporal axis.
pub fn flip(x: &Features) -> Features {
    let mut out = x.clone();
    for i in 0..x.m {
        let row = &mut out.data[i * x.t..(i + 1) * x.t];
        row.reverse();
    }
    out
}

/// Add `N(0, alpha)` (variance `alpha`) to each entry selected with
/// probability `entry_prob`, then clip.
pub fn additive<R: Rng + ?Sized>(x: &Features, alpha: f64, entry_prob: f64, rng: &mut R) -> Features {
    additive_impl(x, alpha, entry_prob, rng, true)
}

fn additive_impl<R: Rng + ?Sized>(
    x: &Features,
    alpha: f64,
    entry_prob: f64,
    rng: &mut R,
    clip: bool,
) -> Features {
    let mut out = x.clone();
    if alpha <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, alpha.sqrt()).expect("alpha > 0");
    for v in out.data.iter_mut() {
        if rng.random_bool(entry_prob) {
            let y = *v as f64 + noise.sample(rng);
            *v = if clip { y.clamp(0.0, 1.0) } else { y } as f32;
        }
    }
    out
}

/// Multiply each selected entry by `1 + U(-beta, beta)`, then clip.
pub fn scale<R: Rng + ?Sized>(x: &Features, beta: f64, entry_prob: f64, rng: &mut R) -> Features {
    let mut out = x.clone();
    if beta <= 0.0 {
        return out;
    }
    for v in out.data.iter_mut() {
        if rng.random_bool(entry_prob) {
            let eps = rng.random_range(-beta..=beta);
            *v = (*v as f64 * (1.0 + eps)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Treat `row[start..start + len]` as missing and fill it with the value just
/// before it, or just after it when the segment starts the row. Returns
/// `false` (leaving `x` untouched) when the segment covers the whole row or
/// runs past its end.
pub fn mask_segment(x: &mut Features, row: usize, start: usize, len: usize) -> bool {
    let t = x.t;
    if len == 0 || len >= t || start + len > t {
        return false;
    }
    let fill = if start > 0 { x.get(row, start - 1) } else { x.get(row, start + len) };
    for j in start..start + len {
        x.set(row, j, fill);
    }
    true
}

/// Mask `cfg.mask_segments` random segments, each on a random AP row with
/// length drawn uniformly from `mask_len_min..=mask_len_max`.
pub fn mask<R: Rng + ?Sized>(x: &Features, cfg: &AugmentConfig, rng: &mut R) -> Features {
    let mut out = x.clone();
    if cfg.mask_segments == 0 || x.m == 0 {
        return out;
    }
    for _ in 0..cfg.mask_segments {
        let len = rng.random_range(cfg.mask_len_min..=cfg.mask_len_max);
        let row = rng.random_range(0..x.m);
        if len >= x.t {
            continue;
        }
        let start = rng.random_range(0..=x.t - len);
        mask_segment(&mut out, row, start, len);
    }
    out
}

/// Split a length-`2t-1` sequence at its middle column into `Z1` (first `t`
/// columns) and the reversed last `t` columns. Both end on the middle column.
pub fn cut_and_flip(x: &Features) -> Result<(Features, Features)> {
    let len = x.t;
    if len < 3 || len % 2 == 0 {
        return Err(Error::Domain(format!(
            "cut-and-flip needs an odd temporal length >= 3, got {len}"
        )));
    }
    let t = (len + 1) / 2;
    let z1 = x.slice_time(0, t);
    let z2 = x.slice_time(t - 1, len);
    Ok((z1, flip(&z2)))
}

/// Same split applied to a ground-truth path.
pub fn cut_and_flip_path<P: Clone>(path: &[P]) -> Result<(Vec<P>, Vec<P>)> {
    let len = path.len();
    if len < 3 || len % 2 == 0 {
        return Err(Error::Domain(format!("cut-and-flip needs an odd length >= 3, got {len}")));
    }
    let t = (len + 1) / 2;
    let first = path[..t].to_vec();
    let mut second = path[t - 1..].to_vec();
    second.reverse();
    Ok((first, second))
}

/// Stage-1 positive view: each of mask, scale, additive, flip is applied with
/// its configured probability; when none fires, one is forced at random.
pub fn stage1_view<R: Rng + ?Sized>(x: &Features, cfg: &AugmentConfig, rng: &mut R) -> Features {
    let probs = [cfg.p_mask, cfg.p_scale, cfg.p_additive, cfg.p_flip];
    let mut on = probs.map(|p| rng.random_bool(p));
    if !on.iter().any(|&b| b) {
        on[rng.random_range(0..4)] = true;
    }
    let mut out = x.clone();
    if on[0] {
        out = mask(&out, cfg, rng);
    }
    if on[1] {
        out = scale(&out, cfg.scale_beta, cfg.entry_prob, rng);
    }
    if on[2] {
        out = additive(&out, cfg.additive_alpha, cfg.entry_prob, rng);
    }
    if on[3] {
        out = flip(&out);
    }
    out
}
