use std::collections::BTreeMap;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::real::Real;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    /// Desk-scale default.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8192,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 1024,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.d_ff", self.d_ff),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.d_model",
                format!("{} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("model.norm_eps", "must be > 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Base parameter count, from shapes alone.
    pub fn param_count(&self) -> usize {
        base_shapes(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// The seven projections of a layer, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Gate, Proj::Down];

    pub fn suffix(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Up => "up",
            Proj::Gate => "gate",
            Proj::Down => "down",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Proj> {
        Proj::ALL.into_iter().find(|p| p.suffix() == s)
    }

    pub fn path(self, layer: usize) -> String {
        let block = match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => "attn",
            _ => "ffn",
        };
        format!("layers.{layer}.{block}.{}", self.suffix())
    }

    /// `(d_out, d_in)`
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => (cfg.d_model, cfg.d_model),
            Proj::Up | Proj::Gate => (cfg.d_ff, cfg.d_model),
            Proj::Down => (cfg.d_model, cfg.d_ff),
        }
    }

    /// Slot within a layer's parameter block.
    fn slot(self) -> usize {
        match self {
            Proj::Q => 1,
            Proj::K => 2,
            Proj::V => 3,
            Proj::O => 4,
            Proj::Up => 6,
            Proj::Gate => 7,
            Proj::Down => 8,
        }
    }
}

pub(crate) const PER_LAYER: usize = 9;
pub(crate) const NORM1: usize = 0;
pub(crate) const NORM2: usize = 5;

pub(crate) fn idx_tok() -> usize {
    0
}
pub(crate) fn idx_pos() -> usize {
    1
}
pub(crate) fn idx_layer(layer: usize, slot: usize) -> usize {
    2 + PER_LAYER * layer + slot
}
pub(crate) fn idx_proj(layer: usize, p: Proj) -> usize {
    idx_layer(layer, p.slot())
}
pub(crate) fn idx_final_norm(n_layers: usize) -> usize {
    2 + PER_LAYER * n_layers
}
pub(crate) fn idx_lm_head(n_layers: usize) -> usize {
    3 + PER_LAYER * n_layers
}
pub(crate) fn base_len(n_layers: usize) -> usize {
    4 + PER_LAYER * n_layers
}

/// Canonical base paths and shapes, in index order.
pub fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("embed.tok".to_string(), vec![cfg.vocab_size, d]),
        ("embed.pos".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for i in 0..cfg.n_layers {
        out.push((format!("layers.{i}.norm1"), vec![d]));
        for p in &Proj::ALL[..4] {
            let (o, n) = p.dims(cfg);
            out.push((p.path(i), vec![o, n]));
        }
        out.push((format!("layers.{i}.norm2"), vec![d]));
        for p in &Proj::ALL[4..] {
            let (o, n) = p.dims(cfg);
            out.push((p.path(i), vec![o, n]));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![cfg.vocab_size, d]));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F16,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F16(Vec<f16>),
    F32(Vec<f32>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F16(v) => v.len(),
            Storage::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F16(_) => DType::F16,
            Storage::F32(_) => DType::F32,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Storage::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Storage::F32(v) => v.clone(),
        }
    }

    pub fn to_real<F: Real>(&self) -> Vec<F> {
        match self {
            Storage::F16(v) => v.iter().map(|x| F::from_f32(x.to_f32())).collect(),
            Storage::F32(v) => v.iter().map(|&x| F::from_f32(x)).collect(),
        }
    }

    pub fn le_bytes(&self) -> Vec<u8> {
        match self {
            Storage::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

/// A named tensor. Frozen tensors live in 16-bit storage, trainable ones in
/// 32-bit; the dtype is the trainability flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Storage,
}

impl Param {
    pub fn trainable(path: String, shape: Vec<usize>, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Param { path, shape, data: Storage::F32(values) }
    }

    pub fn frozen(path: String, shape: Vec<usize>, values: &[f32]) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Param {
            path,
            shape,
            data: Storage::F16(values.iter().map(|&x| f16::from_f32(x)).collect()),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.data, Storage::F32(_))
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values_f32(&self) -> Vec<f32> {
        self.data.to_f32()
    }

    pub fn freeze(&mut self) {
        if let Storage::F32(v) = &self.data {
            let q = v.iter().map(|&x| f16::from_f32(x)).collect();
            self.data = Storage::F16(q);
        }
    }
}

/// Where the adapter pair of one host projection lives in the parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSlot {
    pub layer: usize,
    pub proj: Proj,
    pub host: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    pub cfg: LoraConfig,
    pub slots: Vec<AdapterSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(crate) cfg: ModelConfig,
    pub(crate) params: Vec<Param>,
    pub(crate) lora: Option<LoraState>,
}

/// Deterministic seeded initialization. Every tensor starts trainable.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
    let mut params = Vec::new();
    for (path, shape) in base_shapes(cfg) {
        let n: usize = shape.iter().product();
        let values = if shape.len() == 1 {
            vec![1.0f32; n]
        } else {
            let std = if path.starts_with("embed.") {
                1.0
            } else {
                let mut s = 1.0 / (shape[1] as f32).sqrt();
                if path.ends_with(".o") || path.ends_with(".down") {
                    s *= residual_scale;
                }
                s
            };
            gaussian(&mut rng, n, std)
        };
        params.push(Param::trainable(path, shape, values));
    }
    Ok(ModelState { cfg: *cfg, params, lora: None })
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("std is finite and positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn lora(&self) -> Option<&LoraState> {
        self.lora.as_ref()
    }

    pub fn param(&self, path: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.path == path)
    }

    pub fn paths(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.path.as_str()).collect()
    }

    pub fn trainable_paths(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.path.as_str())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.is_trainable()).map(Param::numel).sum()
    }

    /// Move every tensor to frozen 16-bit storage.
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.freeze();
        }
    }

    pub fn frozen(mut self) -> Self {
        self.freeze_all();
        self
    }

    /// Mutable views of the trainable tensors, in canonical order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f32])> {
        self.params.iter_mut().filter_map(|p| match &mut p.data {
            Storage::F32(v) => Some((p.path.as_str(), v.as_mut_slice())),
            Storage::F16(_) => None,
        })
    }

    /// SHA-256 over the frozen tensors (path, dtype, bytes).
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.is_trainable()) {
            h.update(p.path.as_bytes());
            h.update(p.data.le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Materialize every tensor in compute precision.
    pub fn weights<F: Real>(&self) -> Weights<F> {
        let mut adapter_of = vec![None; self.params.len()];
        let (scaling, dropout_p, rank) = match &self.lora {
            Some(l) => {
                for s in &l.slots {
                    adapter_of[s.host] = Some((s.a, s.b));
                }
                (F::from_f64(l.cfg.scaling()), l.cfg.dropout_p, l.cfg.rank)
            }
            None => (F::ZERO, 0.0, 0),
        };
        Weights {
            cfg: self.cfg,
            values: self.params.iter().map(|p| p.data.to_real()).collect(),
            trainable: self.params.iter().map(Param::is_trainable).collect(),
            adapter_of,
            scaling,
            dropout_p,
            rank,
        }
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: Vec<Param>, lora: Option<LoraState>) -> Result<Self> {
        cfg.validate()?;
        let expected = base_shapes(&cfg);
        if params.len() < expected.len() {
            return Err(Error::Format(format!(
                "expected at least {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((path, shape), p) in expected.iter().zip(&params) {
            if &p.path != path || &p.shape != shape {
                return Err(Error::Shape {
                    path: path.clone(),
                    expected: format!("{path} {shape:?}"),
                    got: format!("{} {:?}", p.path, p.shape),
                });
            }
        }
        Ok(ModelState { cfg, params, lora })
    }
}

/// All tensors of a model in compute precision, indexed like
/// [`ModelState::params`].
#[derive(Debug, Clone)]
pub struct Weights<F> {
    pub(crate) cfg: ModelConfig,
    pub(crate) values: Vec<Vec<F>>,
    pub(crate) trainable: Vec<bool>,
    pub(crate) adapter_of: Vec<Option<(usize, usize)>>,
    pub(crate) scaling: F,
    pub(crate) dropout_p: f32,
    pub(crate) rank: usize,
}

impl<F: Real> Weights<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self, index: usize) -> &[F] {
        &self.values[index]
    }

    pub fn values_mut(&mut self, index: usize) -> &mut [F] {
        &mut self.values[index]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    /// Mark every tensor trainable (finite-difference checks).
    pub fn set_all_trainable(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = true);
    }

    pub(crate) fn zero_grads(&self) -> Vec<Option<Vec<F>>> {
        self.values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| t.then(|| vec![F::ZERO; v.len()]))
            .collect()
    }
}

/// Gradients keyed by trainable parameter path. Values are held in f64 so
/// accumulation and clipping add no rounding of their own.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradSet {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl GradSet {
    pub fn from_indexed<F: Real>(state: &ModelState, grads: Vec<Option<Vec<F>>>) -> Self {
        let entries = state
            .params
            .iter()
            .zip(grads)
            .filter_map(|(p, g)| g.map(|g| (p.path.clone(), g.into_iter().map(F::to_f64).collect())))
            .collect();
        GradSet { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, path: &str) -> Option<&[f64]> {
        self.entries.get(path).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// L2 norm over every entry, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|g| !g.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            max_seq_len: 8,
            norm_eps: 1e-5,
            seed: 3,
        }
    }

    #[test]
    fn shapes_follow_config() {
        let s = init_model(&tiny()).unwrap();
        assert_eq!(s.param("layers.0.attn.q").unwrap().shape, vec![16, 16]);
        assert_eq!(s.param("layers.1.ffn.down").unwrap().shape, vec![16, 32]);
        assert_eq!(s.params().len(), base_len(2));
        assert_eq!(s.params()[idx_proj(1, Proj::Gate)].path, "layers.1.ffn.gate");
        assert_eq!(s.params()[idx_layer(0, NORM2)].path, "layers.0.norm2");
        assert_eq!(s.params()[idx_lm_head(2)].path, "lm_head");
        assert_eq!(s.params()[idx_final_norm(2)].path, "final_norm");
        let total: usize = s.params().iter().map(Param::numel).sum();
        assert_eq!(total, tiny().param_count());
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_model(&tiny()).unwrap(), init_model(&tiny()).unwrap());
        let other = ModelConfig { seed: 4, ..tiny() };
        assert_ne!(init_model(&tiny()).unwrap(), init_model(&other).unwrap());
    }

    #[test]
    fn invalid_config() {
        let bad = ModelConfig { d_model: 10, n_heads: 4, ..tiny() };
        let err = init_model(&bad).unwrap_err();
        assert!(err.to_string().contains("n_heads"));
        assert!(init_model(&ModelConfig { n_layers: 0, ..tiny() }).is_err());
    }

    #[test]
    fn half_storage_within_quantum() {
        let s = init_model(&tiny()).unwrap();
        let before = s.param("layers.0.attn.k").unwrap().values_f32();
        let frozen = s.clone().frozen();
        let p = frozen.param("layers.0.attn.k").unwrap();
        assert!(!p.is_trainable());
        for (x, y) in before.iter().zip(p.values_f32()) {
            // Half-precision spacing at |x| is at most 2^-10 |x| (normals)
            // or 2^-24 (subnormals); rounding error is half of that.
            let quantum = (x.abs() * 2f32.powi(-10)).max(2f32.powi(-24));
            assert!((x - y).abs() <= quantum, "{x} -> {y}");
        }
        // Trainable tensors round-trip exactly.
        let t = s.param("layers.0.attn.k").unwrap();
        assert_eq!(t.values_f32(), before);
    }

    #[test]
    fn grad_norm_and_scale() {
        let mut g = GradSet::default();
        g.entries.insert("a".into(), vec![3.0]);
        g.entries.insert("b".into(), vec![0.0, 4.0]);
        assert_eq!(g.global_norm(), 5.0);
        g.scale(0.2);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        g.entries.insert("c".into(), vec![f64::NAN]);
        assert_eq!(g.first_non_finite(), Some("c"));
    }
}
