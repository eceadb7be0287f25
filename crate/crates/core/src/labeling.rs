//! Pseudo-labeling of unlabeled trajectories by endpoint-embedding
//! similarity to a small labeled anchor set.

use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::localization::percentile;
use crate::mobility::{Features, Pos, Trajectory, TrajectoryDataset};
use crate::model::Network;

pub const DEFAULT_EPS_W: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Weight grows linearly from `eps_w` at the threshold to `1 + eps_w` at a perfect match.
    Similarity,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelConfig {
    pub delta: f64,
    pub weighting: Weighting,
    pub eps_w: f64,
}

impl PseudoLabelConfig {
    pub fn new(delta: f64) -> Self {
        PseudoLabelConfig {
            delta,
            weighting: Weighting::Similarity,
            eps_w: DEFAULT_EPS_W,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1], got {}", self.delta)));
        }
        if !(self.eps_w > 0.0 && self.eps_w.is_finite()) {
            return Err(Error::Config(format!("eps_w must be positive, got {}", self.eps_w)));
        }
        Ok(())
    }

    fn weight(&self, cos: f64) -> f64 {
        match self.weighting {
            Weighting::Uniform => 1.0,
            Weighting::Similarity if self.delta >= 1.0 => 1.0 + self.eps_w,
            Weighting::Similarity => (cos - self.delta) / (1.0 - self.delta) + self.eps_w,
        }
    }
}

/// A labeled reference point: unit-normalised endpoint embedding plus position.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub embedding: Vec<f64>,
    pub label: Pos,
}

impl Anchor {
    pub fn new(embedding: &[f32], label: Pos) -> Result<Self> {
        Ok(Anchor {
            embedding: unit(embedding)?,
            label,
        })
    }
}

fn unit(v: &[f32]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(format!("embedding has norm {norm}")));
    }
    Ok(v.iter().map(|x| *x as f64 / norm).collect())
}

/// Outcome of labeling one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDecision {
    pub label: Option<Pos>,
    pub candidates: usize,
    pub sim_max: f64,
}

/// Label one endpoint embedding against the anchors, or drop it if no anchor
/// reaches the threshold.
pub fn pseudo_label_one(embedding: &[f32], anchors: &[Anchor], cfg: &PseudoLabelConfig) -> Result<LabelDecision> {
    if anchors.is_empty() {
        return Err(Error::Config("pseudo-labeling needs at least one anchor".into()));
    }
    let e = unit(embedding)?;
    let (mut wsum, mut x, mut y) = (0.0f64, 0.0f64, 0.0f64);
    let mut candidates = 0;
    let mut sim_max = f64::NEG_INFINITY;
    for a in anchors {
        if a.embedding.len() != e.len() {
            return Err(Error::dim("anchors", format!("anchor width {} vs {}", a.embedding.len(), e.len())));
        }
        let cos = e.iter().zip(&a.embedding).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0);
        sim_max = sim_max.max(cos);
        if cos >= cfg.delta {
            let w = cfg.weight(cos);
            wsum += w;
            x += w * a.label[0] as f64;
            y += w * a.label[1] as f64;
            candidates += 1;
        }
    }
    let label = (candidates > 0).then(|| [(x / wsum) as f32, (y / wsum) as f32]);
    Ok(LabelDecision {
        label,
        candidates,
        sim_max,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingReport {
    pub delta: f64,
    pub total: usize,
    pub labeled: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub decisions: Vec<LabelDecision>,
    /// Distance from each pseudo-label to the true endpoint; `None` for
    /// dropped items or when the input carries no ground truth.
    pub errors: Vec<Option<f64>>,
    pub cdf68: Option<f64>,
    pub cdf95: Option<f64>,
}

impl LabelingReport {
    pub fn to_csv(&self) -> String {
        let with_err = self.cdf68.is_some();
        let mut s = String::from("index,candidates,sim_max,label_x,label_y");
        s.push_str(if with_err { ",err_m\n" } else { "\n" });
        for (k, d) in self.decisions.iter().enumerate() {
            let (lx, ly) = match d.label {
                Some(l) => (l[0].to_string(), l[1].to_string()),
                None => (String::new(), String::new()),
            };
            s.push_str(&format!("{k},{},{:.6},{lx},{ly}", d.candidates, d.sim_max));
            if with_err {
                match self.errors[k] {
                    Some(e) => s.push_str(&format!(",{e:.6}\n")),
                    None => s.push_str(",\n"),
                }
            } else {
                s.push('\n');
            }
        }
        s
    }
}

pub fn anchors_from(net: &mut Network<f32>, labeled: &TrajectoryDataset) -> Result<Vec<Anchor>> {
    if !labeled.labeled {
        return Err(Error::Dataset("anchor set must be labeled".into()));
    }
    let xs: Vec<&Features> = labeled.items.iter().map(|it| &it.features).collect();
    let emb = net.embed_endpoints(&xs)?;
    emb.iter()
        .zip(&labeled.items)
        .map(|(e, it)| Anchor::new(e, it.label.expect("validated labeled dataset")))
        .collect()
}

/// Label every trajectory of `c` against the labeled set `c_tilde`. Returns
/// the refined set (kept items with their pseudo-labels, ground-truth paths
/// removed) and a report.
pub fn build_refined(
    net: &mut Network<f32>,
    c: &TrajectoryDataset,
    c_tilde: &TrajectoryDataset,
    cfg: &PseudoLabelConfig,
) -> Result<(TrajectoryDataset, LabelingReport)> {
    cfg.validate()?;
    if c.m != c_tilde.m || c.t != c_tilde.t {
        return Err(Error::Dataset(format!(
            "unlabeled set is {}x{}, labeled set is {}x{}",
            c.m, c.t, c_tilde.m, c_tilde.t
        )));
    }
    let anchors = anchors_from(net, c_tilde)?;
    let xs: Vec<&Features> = c.items.iter().map(|it| &it.features).collect();
    let emb = net.embed_endpoints(&xs)?;
    let decisions: Vec<LabelDecision> = emb
        .par_iter()
        .map(|e| pseudo_label_one(e, &anchors, cfg))
        .collect::<Result<_>>()?;

    let mut items = Vec::new();
    let mut errors = Vec::with_capacity(decisions.len());
    for (it, d) in c.items.iter().zip(&decisions) {
        errors.push(match (d.label, it.endpoint()) {
            (Some(l), Some(truth)) => Some(distance(l, truth)),
            _ => None,
        });
        if let Some(l) = d.label {
            items.push(Trajectory {
                features: it.features.clone(),
                label: Some(l),
                path: None,
            });
        }
    }
    let has_truth = !c.items.is_empty() && c.items.iter().all(|it| it.path.is_some());
    let mut known: Vec<f64> = errors.iter().flatten().copied().collect();
    let (cdf68, cdf95) = if has_truth && !known.is_empty() {
        known.sort_by(f64::total_cmp);
        (Some(percentile(&known, 68)), Some(percentile(&known, 95)))
    } else {
        (None, None)
    };
    let total = c.len();
    let labeled = items.len();
    let report = LabelingReport {
        delta: cfg.delta,
        total,
        labeled,
        dropped: total - labeled,
        drop_rate: if total == 0 { 0.0 } else { (total - labeled) as f64 / total as f64 },
        decisions,
        errors: if has_truth { errors } else { vec![None; total] },
        cdf68,
        cdf95,
    };
    Ok((TrajectoryDataset::new(c.m, c.t, true, items)?, report))
}

pub(crate) fn distance(a: Pos, b: Pos) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    (dx * dx + dy * dy).sqrt()
}
