use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::tensor::{Matrix, Real};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<F> {
    pub ln1_g: Matrix<F>,
    pub ln1_b: Matrix<F>,
    pub wq: Matrix<F>,
    pub wk: Matrix<F>,
    pub wv: Matrix<F>,
    pub wo: Matrix<F>,
    pub ln2_g: Matrix<F>,
    pub ln2_b: Matrix<F>,
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
}

/// All weights of the model. Linear weights are stored `[d_out, d_in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<F> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<F>,
    pub pos_emb: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Matrix<F>,
    pub lnf_b: Matrix<F>,
    pub head: Matrix<F>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| F::lit(dist.sample(&mut self.rng)))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Sine/cosine table used as the starting point of the learned position
/// embeddings.
fn sinusoid<F: Real>(n: usize, d: usize, amp: f64) -> Matrix<F> {
    let mut m = Matrix::zeros(n, d);
    for p in 0..n {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / d as f64);
            m.row_mut(p)[2 * i] = F::lit(amp * (p as f64 * freq).sin());
            m.row_mut(p)[2 * i + 1] = F::lit(amp * (p as f64 * freq).cos());
        }
    }
    m
}

impl<F: Real> ParamSet<F> {
    /// Seeded init: scaled normal matrices, sinusoidal positions, zero
    /// biases, unit norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let d = config.d_model;
        let f = config.d_ff;
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let ones = |n| Matrix::filled(1, n, F::one());
        let zeros = |n| Matrix::zeros(1, n);
        let tok_emb = init.normal(config.vocab_size, d, 0.1);
        let pos_emb = sinusoid(config.max_seq_len, d, 0.1);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let in_std = 1.0 / (d as f64).sqrt();
            layers.push(LayerParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: init.normal(d, d, in_std),
                wk: init.normal(d, d, in_std),
                wv: init.normal(d, d, in_std),
                wo: init.normal(d, d, in_std * resid),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: init.normal(f, d, in_std),
                b1: zeros(f),
                w2: init.normal(d, f, resid / (f as f64).sqrt()),
                b2: zeros(d),
            });
        }
        Ok(ParamSet {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            head: init.normal(config.vocab_size, d, 0.02),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            } = l;
            for (n, t) in [
                ("ln1_g", ln1_g),
                ("ln1_b", ln1_b),
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("ln2_g", ln2_g),
                ("ln2_b", ln2_b),
                ("w1", w1),
                ("b1", b1),
                ("w2", w2),
                ("b2", b2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &mut self.lnf_g));
        out.push(("lnf_b".to_string(), &mut self.lnf_b));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::<G> {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: Vec::new(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            head: self.head.cast(),
        };
        out.layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_g: l.ln1_g.cast(),
                ln1_b: l.ln1_b.cast(),
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                ln2_g: l.ln2_g.cast(),
                ln2_b: l.ln2_b.cast(),
                w1: l.w1.cast(),
                b1: l.b1.cast(),
                w2: l.w2.cast(),
                b2: l.b2.cast(),
            })
            .collect();
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Weight decay skips norm gains/offsets and biases.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with("ln") || leaf == "b1" || leaf == "b2")
}
