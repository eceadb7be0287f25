//! Central finite-difference gradient checks in 64-bit precision.

use rand::Rng;

use super::layers::Mode;
use super::loss::simsiam_loss;
use super::net::Sequential;
use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest norm-relative error over all checked tensors.
    pub max_rel_err: f64,
    /// Tensor with the largest error.
    pub worst: String,
    pub checked_tensors: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let err = rel_err(analytic, numeric);
        self.checked_tensors += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = name.to_string();
        }
    }
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

fn projected(net: &Sequential, store: &mut ParamStore<f64>, x: &Tensor<f64>, r: &[f64], mode: Mode) -> Result<f64> {
    let y = net.infer(store, x.clone(), mode)?;
    Ok(y.data.iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Check input and parameter gradients of `net` under the scalar loss
/// `sum(r * net(x))` for a random projection `r`.
pub fn check_sequential(
    net: &Sequential,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    seed_v: u64,
) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed_v);
    let batch = x.shape[0];
    let out_len = batch * net.out_features();
    let r: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    store.zero_grads();
    let (y, tape) = net.forward(store, x.clone(), mode)?;
    let dx = net.backward(store, tape, Tensor::from_vec(&y.shape, r.clone()))?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked_tensors: 0,
    };

    let mut num_dx = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data[i] += FD_STEP;
        let up = projected(net, store, &xp, &r, mode)?;
        xp.data[i] -= 2.0 * FD_STEP;
        let down = projected(net, store, &xp, &r, mode)?;
        num_dx[i] = (up - down) / (2.0 * FD_STEP);
    }
    report.record("input", &dx.data, &num_dx);

    let names: Vec<(usize, String)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Weight && !e.frozen && e.name.starts_with(&net.name))
        .map(|(i, e)| (i, e.name.clone()))
        .collect();
    for (idx, name) in names {
        let analytic = store.entries()[idx].grad.data.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = store.entries()[idx].value.data[j];
            store.entries_mut()[idx].value.data[j] = orig + FD_STEP;
            let up = projected(net, store, x, &r, mode)?;
            store.entries_mut()[idx].value.data[j] = orig - FD_STEP;
            let down = projected(net, store, x, &r, mode)?;
            store.entries_mut()[idx].value.data[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        report.record(&name, &analytic, &numeric);
    }
    Ok(report)
}

/// Check the Siamese loss gradient with respect to both predictor outputs,
/// holding the (stop-gradient) targets fixed.
pub fn check_simsiam(p1: &Tensor<f64>, z2: &Tensor<f64>, p2: &Tensor<f64>, z1: &Tensor<f64>) -> Result<GradCheckReport> {
    let out = simsiam_loss(p1, z2, p2, z1)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked_tensors: 0,
    };
    for (which, analytic) in [("p1", &out.d_p1), ("p2", &out.d_p2)] {
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let eval = |delta: f64| -> Result<f64> {
                let (mut a, mut b) = (p1.clone(), p2.clone());
                if which == "p1" {
                    a.data[j] += delta;
                } else {
                    b.data[j] += delta;
                }
                Ok(simsiam_loss(&a, z2, &b, z1)?.loss)
            };
            numeric[j] = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        }
        report.record(which, &analytic.data, &numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::LayerSpec;

    fn random_input(shape: &[usize], seed_v: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seed_v);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn every_layer_kind_passes() {
        let cases: Vec<(Vec<LayerSpec>, Vec<usize>)> = vec![
            (vec![LayerSpec::ReflectionPad1d { pad: 2 }], vec![3, 5]),
            (vec![LayerSpec::Conv1d { out_channels: 4, kernel: 3 }], vec![3, 6]),
            (vec![LayerSpec::batch_norm()], vec![3, 4]),
            (vec![LayerSpec::batch_norm()], vec![5]),
            (vec![LayerSpec::Relu], vec![7]),
            (vec![LayerSpec::AvgPoolTime], vec![2, 5]),
            (vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 3 }], vec![2, 3]),
            (vec![LayerSpec::Linear { out_features: 4 }], vec![6]),
        ];
        for (k, (specs, shape)) in cases.iter().enumerate() {
            for mode in [Mode::Train, Mode::Eval] {
                let mut store = ParamStore::<f64>::new();
                let net = Sequential::build("g", specs, shape, &mut store, &mut seed::rng(k as u64)).unwrap();
                let mut full = vec![4];
                full.extend(shape);
                let x = random_input(&full, 100 + k as u64);
                let rep = check_sequential(&net, &mut store, &x, mode, 7).unwrap();
                assert!(rep.max_rel_err < 1e-4, "case {k} {mode:?}: {rep:?}");
            }
        }
    }

    #[test]
    fn siamese_loss_passes() {
        let p1 = random_input(&[3, 5], 1);
        let z2 = random_input(&[3, 5], 2);
        let p2 = random_input(&[3, 5], 3);
        let z1 = random_input(&[3, 5], 4);
        let rep = check_simsiam(&p1, &z2, &p2, &z1).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
