//! The five sub-networks: trajectory encoder `f1` with predictor `h1`,
//! endpoint encoder `f2` with predictor `h2`, and the position head `loc`.
//! All share one [`ParamStore`], namespaced by sub-network.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::mobility::Features;
use crate::neural::{LayerSpec, Mode, ParamKind, ParamStore, Real, Sequential, Tensor};
use crate::seed;

pub const F1: &str = "f1";
pub const H1: &str = "h1";
pub const F2: &str = "f2";
pub const H2: &str = "h2";
pub const LOC: &str = "loc";
/// Buffer holding the field `[width, height]` the localization head maps into.
pub const BOUNDS: &str = "loc.bounds";

/// How the trajectory encoder collapses the time axis before its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average over time steps.
    Average,
    /// Keep every time step (`channels * t` features).
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub conv_channels: usize,
    pub conv_blocks: usize,
    pub kernel: usize,
    pub pooling: Pooling,
    pub f1_out: usize,
    pub h1_hidden: usize,
    pub f2_hidden: usize,
    pub f2_out: usize,
    pub h2_hidden: usize,
    pub loc_hidden: usize,
    /// End both encoders with a batch-norm layer so embeddings are centred.
    pub output_bn: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_channels: 64,
            conv_blocks: 3,
            kernel: 3,
            pooling: Pooling::Average,
            f1_out: 128,
            h1_hidden: 64,
            f2_hidden: 128,
            f2_out: 64,
            h2_hidden: 32,
            loc_hidden: 64,
            output_bn: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {}", self.kernel)));
        }
        let widths = [
            self.conv_channels,
            self.conv_blocks,
            self.f1_out,
            self.h1_hidden,
            self.f2_hidden,
            self.f2_out,
            self.h2_hidden,
            self.loc_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        Ok(())
    }

    pub fn f1_specs(&self) -> Vec<LayerSpec> {
        let mut s = Vec::new();
        for _ in 0..self.conv_blocks {
            s.push(LayerSpec::ReflectionPad1d { pad: self.kernel / 2 });
            s.push(LayerSpec::Conv1d { out_channels: self.conv_channels, kernel: self.kernel });
            s.push(LayerSpec::batch_norm());
            s.push(LayerSpec::Relu);
        }
        s.push(match self.pooling {
            Pooling::Average => LayerSpec::AvgPoolTime,
            Pooling::Flatten => LayerSpec::Flatten,
        });
        s.push(LayerSpec::Linear { out_features: self.f1_out });
        if self.output_bn {
            s.push(LayerSpec::batch_norm());
        }
        s
    }

    fn mlp(hidden: usize, out: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear { out_features: hidden },
            LayerSpec::batch_norm(),
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: out },
        ]
    }

    pub fn h1_specs(&self) -> Vec<LayerSpec> {
        Self::mlp(self.h1_hidden, self.f1_out)
    }

    pub fn f2_specs(&self) -> Vec<LayerSpec> {
        let mut s = Self::mlp(self.f2_hidden, self.f2_out);
        if self.output_bn {
            s.push(LayerSpec::batch_norm());
        }
        s
    }

    pub fn h2_specs(&self) -> Vec<LayerSpec> {
        Self::mlp(self.h2_hidden, self.f2_out)
    }

    pub fn loc_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear { out_features: self.loc_hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: 2 },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub arch: ArchConfig,
    pub m: usize,
    pub t: usize,
    pub store: ParamStore<T>,
    pub f1: Sequential,
    pub h1: Sequential,
    pub f2: Sequential,
    pub h2: Sequential,
    pub loc: Sequential,
}

impl<T: Real> Network<T> {
    /// Build all sub-networks for `m` APs and sequence length `t`. Each
    /// sub-network draws its initial weights from its own seed stream.
    pub fn new(arch: &ArchConfig, m: usize, t: usize, seed_v: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut build = |name: &str, specs: Vec<LayerSpec>, shape: &[usize]| {
            let mut rng = seed::rng(seed::derive_label(seed_v, name));
            Sequential::build(name, &specs, shape, &mut store, &mut rng)
        };
        let f1 = build(F1, arch.f1_specs(), &[m, t])?;
        let h1 = build(H1, arch.h1_specs(), &[arch.f1_out])?;
        let f2 = build(F2, arch.f2_specs(), &[arch.f1_out])?;
        let h2 = build(H2, arch.h2_specs(), &[arch.f2_out])?;
        let loc = build(LOC, arch.loc_specs(), &[arch.f2_out])?;
        store.add(BOUNDS, Tensor::zeros(&[2]), ParamKind::Buffer);
        Ok(Network {
            arch: arch.clone(),
            m,
            t,
            store,
            f1,
            h1,
            f2,
            h2,
            loc,
        })
    }

    /// Stack feature matrices into a `[B, m, t]` tensor.
    pub fn batch(&self, xs: &[&Features]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(xs.len() * self.m * self.t);
        for x in xs {
            if x.m != self.m || x.t != self.t {
                return Err(Error::dim(
                    F1,
                    format!("trajectory is {}x{}, network expects {}x{}", x.m, x.t, self.m, self.t),
                ));
            }
            data.extend(x.data.iter().map(|v| T::from_f64(*v as f64)));
        }
        Ok(Tensor::from_vec(&[xs.len(), self.m, self.t], data))
    }

    /// Trajectory embeddings `F1(x)` in inference mode.
    pub fn embed_trajectories(&mut self, xs: &[&Features]) -> Result<Vec<Vec<f32>>> {
        self.embed(xs, false)
    }

    /// Endpoint embeddings `F2(F1(x))` in inference mode.
    pub fn embed_endpoints(&mut self, xs: &[&Features]) -> Result<Vec<Vec<f32>>> {
        self.embed(xs, true)
    }

    fn embed(&mut self, xs: &[&Features], endpoint: bool) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let x = self.batch(chunk)?;
            let mut z = self.f1.infer(&mut self.store, x, Mode::Eval)?;
            if endpoint {
                z = self.f2.infer(&mut self.store, z, Mode::Eval)?;
            }
            let w = z.shape[1];
            out.extend(z.data.chunks_exact(w).map(|r| r.iter().map(|v| v.as_f64() as f32).collect()));
        }
        Ok(out)
    }
}

pub fn embed_trajectory(net: &mut Network<f32>, x: &Features) -> Result<Vec<f32>> {
    Ok(net.embed_trajectories(&[x])?.remove(0))
}

pub fn embed_endpoint(net: &mut Network<f32>, x: &Features) -> Result<Vec<f32>> {
    Ok(net.embed_endpoints(&[x])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_init_streams() {
        let arch = ArchConfig { conv_channels: 8, f1_out: 16, h1_hidden: 8, f2_hidden: 16, f2_out: 8, h2_hidden: 4, loc_hidden: 8, ..Default::default() };
        let a = Network::<f32>::new(&arch, 5, 15, 1).unwrap();
        assert_eq!(a.f1.out_shape, vec![16]);
        assert_eq!(a.f2.out_shape, vec![8]);
        assert_eq!(a.loc.out_shape, vec![2]);
        let b = Network::<f32>::new(&arch, 5, 15, 1).unwrap();
        assert_eq!(a.store.digest(&[F1]), b.store.digest(&[F1]));
        let c = Network::<f32>::new(&arch, 5, 15, 2).unwrap();
        assert_ne!(a.store.digest(&[F1]), c.store.digest(&[F1]));
        let flat = ArchConfig { pooling: Pooling::Flatten, ..arch };
        let d = Network::<f32>::new(&flat, 5, 15, 1).unwrap();
        assert_eq!(d.store.get("f1.fc13.weight").unwrap().value.shape, vec![16, 8 * 15]);
    }

    #[test]
    fn embeddings_are_deterministic_and_batch_independent() {
        let arch = ArchConfig { conv_channels: 8, f1_out: 16, h1_hidden: 8, f2_hidden: 16, f2_out: 8, h2_hidden: 4, loc_hidden: 8, ..Default::default() };
        let mut net = Network::<f32>::new(&arch, 3, 15, 4).unwrap();
        let mut rng = seed::rng(3);
        use rand::Rng;
        let xs: Vec<Features> = (0..300)
            .map(|_| Features::new(3, 15, (0..45).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect();
        let refs: Vec<&Features> = xs.iter().collect();
        let all = net.embed_endpoints(&refs).unwrap();
        for k in [0, 17, 299] {
            assert_eq!(embed_endpoint(&mut net, &xs[k]).unwrap(), all[k]);
        }
        let wrong = Features::zeros(4, 15);
        assert!(matches!(net.embed_trajectories(&[&wrong]), Err(Error::Dimension { .. })));
    }
}
