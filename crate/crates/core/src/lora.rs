//! Low-rank adapters: `W_eff = W + (alpha / rank) · B · A` with `W` frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::TensorFile;
use crate::model::forward::{self, Batch};
use crate::model::{LayerParams, Matrix, ParamSet, Real};

/// A per-layer weight matrix that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Wq,
        LoraTarget::Wk,
        LoraTarget::Wv,
        LoraTarget::Wo,
        LoraTarget::W1,
        LoraTarget::W2,
    ];

    pub const ATTENTION: [LoraTarget; 4] =
        [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
            LoraTarget::Wo => "wo",
            LoraTarget::W1 => "w1",
            LoraTarget::W2 => "w2",
        }
    }

    pub fn weight<F>(self, layer: &LayerParams<F>) -> &Matrix<F> {
        match self {
            LoraTarget::Wq => &layer.wq,
            LoraTarget::Wk => &layer.wk,
            LoraTarget::Wv => &layer.wv,
            LoraTarget::Wo => &layer.wo,
            LoraTarget::W1 => &layer.w1,
            LoraTarget::W2 => &layer.w2,
        }
    }

    pub fn weight_mut<F>(self, layer: &mut LayerParams<F>) -> &mut Matrix<F> {
        match self {
            LoraTarget::Wq => &mut layer.wq,
            LoraTarget::Wk => &mut layer.wk,
            LoraTarget::Wv => &mut layer.wv,
            LoraTarget::Wo => &mut layer.wo,
            LoraTarget::W1 => &mut layer.w1,
            LoraTarget::W2 => &mut layer.w2,
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidLora(format!("unknown target matrix `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
    #[serde(default)]
    pub init_seed: u64,
    /// Base tensors (by name, e.g. `tok_emb`, `pos_emb`, `head`) trained
    /// in full next to the adapter.
    #[serde(default)]
    pub modules_to_save: BTreeSet<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: LoraTarget::ATTENTION.into_iter().collect(),
            init_seed: 0,
            modules_to_save: BTreeSet::new(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn with_targets<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        self.targets = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<_>>()?;
        Ok(self)
    }
}

/// `A: [rank, d_in]`, `B: [d_out, rank]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair<F> {
    pub a: Matrix<F>,
    pub b: Matrix<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    pub config: LoraConfig,
    pub layers: Vec<BTreeMap<LoraTarget, LoraPair<F>>>,
}

impl<F: Real> LoraAdapter<F> {
    /// Fresh adapter for `params`: `A` seeded normal, `B` zero.
    pub fn new(params: &ParamSet<F>, config: &LoraConfig) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::InvalidLora("rank must be at least 1".into()));
        }
        if !(config.alpha > 0.0) {
            return Err(Error::InvalidLora(format!("alpha must be > 0, got {}", config.alpha)));
        }
        if config.targets.is_empty() {
            return Err(Error::InvalidLora("no target matrices".into()));
        }
        let names: BTreeSet<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let unknown: Vec<&str> = config
            .modules_to_save
            .iter()
            .filter(|m| !names.contains(*m))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::InvalidLora(format!("unknown modules_to_save: {}", unknown.join(", "))));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let mut map = BTreeMap::new();
            for &t in &config.targets {
                let (d_out, d_in) = t.weight(layer).shape();
                if config.rank > d_out.min(d_in) {
                    return Err(Error::InvalidLora(format!(
                        "rank {} exceeds min dimension of layers.{i}.{t} ({d_out}x{d_in})",
                        config.rank
                    )));
                }
                let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
                let a = Matrix::from_vec(
                    config.rank,
                    d_in,
                    (0..config.rank * d_in)
                        .map(|_| F::lit(dist.sample(&mut rng)))
                        .collect(),
                );
                map.insert(
                    t,
                    LoraPair {
                        a,
                        b: Matrix::zeros(d_out, config.rank),
                    },
                );
            }
            layers.push(map);
        }
        Ok(LoraAdapter {
            config: config.clone(),
            layers,
        })
    }

    pub fn scale(&self) -> F {
        F::lit(self.config.scale())
    }

    pub fn get(&self, layer: usize, target: LoraTarget) -> Option<&LoraPair<F>> {
        self.layers.get(layer).and_then(|m| m.get(&target))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = Vec::new();
        for (i, m) in self.layers.iter().enumerate() {
            for (t, p) in m {
                out.push((format!("layers.{i}.{t}.lora_a"), &p.a));
                out.push((format!("layers.{i}.{t}.lora_b"), &p.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out = Vec::new();
        for (i, m) in self.layers.iter_mut().enumerate() {
            for (t, p) in m.iter_mut() {
                out.push((format!("layers.{i}.{t}.lora_a"), &mut p.a));
                out.push((format!("layers.{i}.{t}.lora_b"), &mut p.b));
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|(&t, p)| {
                            (
                                t,
                                LoraPair {
                                    a: p.a.cast(),
                                    b: p.b.cast(),
                                },
                            )
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// `(alpha / rank) · B · A` for one target.
    pub fn delta(&self, layer: usize, target: LoraTarget) -> Option<Matrix<F>> {
        self.get(layer, target).map(|p| {
            let mut d = p.b.matmul(&p.a);
            d.scale(self.scale());
            d
        })
    }
}

impl LoraAdapter<f32> {
    /// Adapter checkpoint: config plus A/B tensors, independent of the base.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "n_layers": self.layers.len(),
        });
        TensorFile {
            kind: "lora_adapter".into(),
            header,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = TensorFile::load(path)?;
        if file.kind != "lora_adapter" {
            return Err(Error::Checkpoint(format!("expected lora_adapter, found {}", file.kind)));
        }
        let config: LoraConfig = serde_json::from_value(file.header["config"].clone())?;
        let n_layers = file.header["n_layers"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("adapter header lacks n_layers".into()))?
            as usize;
        let mut tensors: BTreeMap<String, Matrix<f32>> = file.tensors.into_iter().collect();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mut map = BTreeMap::new();
            for &t in &config.targets {
                let mut take = |suffix: &str| {
                    let key = format!("layers.{i}.{t}.{suffix}");
                    tensors
                        .remove(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("adapter lacks tensor {key}")))
                };
                let a = take("lora_a")?;
                let b = take("lora_b")?;
                map.insert(t, LoraPair { a, b });
            }
            layers.push(map);
        }
        Ok(LoraAdapter { config, layers })
    }
}

/// A frozen base model plus a trainable adapter.
#[derive(Debug, Clone)]
pub struct AdaptedModel<F> {
    pub base: ParamSet<F>,
    pub adapter: LoraAdapter<F>,
}

/// Wraps `params` with a fresh adapter. The adapted model initially computes
/// exactly what the base does.
pub fn attach<F: Real>(params: ParamSet<F>, config: &LoraConfig) -> Result<AdaptedModel<F>> {
    let adapter = LoraAdapter::new(&params, config)?;
    Ok(AdaptedModel {
        base: params,
        adapter,
    })
}

impl<F: Real> AdaptedModel<F> {
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<F>> {
        forward::forward_with(&self.base, Some(&self.adapter), tokens)
    }

    pub fn merge(&self) -> ParamSet<F> {
        merge(self)
    }
}

/// Loss and gradients with respect to the adapter only.
pub fn grad_adapter<F: Real>(
    adapted: &AdaptedModel<F>,
    batch: &Batch,
) -> Result<(F, LoraAdapter<F>)> {
    let (loss, grads) =
        forward::loss_and_grad(&adapted.base, Some(&adapted.adapter), batch, false)?;
    Ok((loss, grads.adapter.expect("adapter gradients requested")))
}

/// Base parameters with every `(alpha / rank) · B · A` folded into its weight.
pub fn merge<F: Real>(adapted: &AdaptedModel<F>) -> ParamSet<F> {
    let mut out = adapted.base.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        for &t in &adapted.adapter.config.targets {
            if let Some(delta) = adapted.adapter.delta(i, t) {
                t.weight_mut(layer).add_assign(&delta);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn base() -> ParamSet<f32> {
        let mut c = ModelConfig::tiny(270, 16);
        c.d_model = 16;
        c.d_ff = 32;
        c.n_heads = 2;
        ParamSet::init(&c).unwrap()
    }

    #[test]
    fn fresh_attach_is_identity() {
        let p = base();
        let tokens = [1u32, 5, 9, 200, 3];
        let adapted = attach(p.clone(), &LoraConfig::default()).unwrap();
        assert_eq!(
            adapted.forward(&tokens).unwrap(),
            forward::forward(&p, &tokens).unwrap()
        );
        assert_eq!(merge(&adapted), p);
    }

    #[test]
    fn trainable_count_formula() {
        let p = base();
        let cfg = LoraConfig {
            rank: 4,
            targets: LoraTarget::ALL.into_iter().collect(),
            ..Default::default()
        };
        let a = LoraAdapter::new(&p, &cfg).unwrap();
        let d = p.config.d_model;
        let f = p.config.d_ff;
        let per_layer = 4 * 4 * (d + d) + 4 * (d + f) * 2;
        assert_eq!(a.trainable_count(), per_layer * p.config.n_layers);
    }

    #[test]
    fn invalid_configs() {
        let p = base();
        let too_big = LoraConfig {
            rank: 17,
            ..Default::default()
        };
        assert!(matches!(LoraAdapter::new(&p, &too_big), Err(Error::InvalidLora(_))));
        assert!(LoraConfig::default().with_targets(&["wz"]).is_err());
        let zero = LoraConfig {
            rank: 0,
            ..Default::default()
        };
        assert!(LoraAdapter::new(&p, &zero).is_err());
    }

    #[test]
    fn adapter_file_roundtrip() {
        let p = base();
        let mut a = LoraAdapter::new(&p, &LoraConfig::default()).unwrap();
        a.layers[0].get_mut(&LoraTarget::Wq).unwrap().b.data[3] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        a.save(&path).unwrap();
        assert_eq!(LoraAdapter::load(&path).unwrap(), a);
    }
}
