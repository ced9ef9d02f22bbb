//! Low-rank adapters on the seven projection matrices.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::checkpoint::LoraMeta;
use crate::model::{
    base_len, gaussian, idx_proj, read_container, write_container, AdapterSlot, LoraState, ModelConfig,
    ModelState, Param, Proj,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f32,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout_p: 0.1,
            targets: Proj::ALL.iter().map(|p| p.suffix().to_string()).collect(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Targeted projections in canonical order.
    pub fn target_projs(&self) -> Result<Vec<Proj>> {
        let mut out = Vec::new();
        for t in &self.targets {
            let p = Proj::from_suffix(t)
                .ok_or_else(|| Error::config("lora.targets", format!("unknown target suffix {t:?}")))?;
            out.push(p);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("lora.rank", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("lora.dropout_p", "must be in [0, 1)"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("lora.alpha", "must be finite"));
        }
        self.target_projs().map(|_| ())
    }
}

pub(crate) fn slots_for(
    model: &ModelConfig,
    cfg: &LoraConfig,
    hosts: &[(usize, Proj)],
    n_base: usize,
) -> Result<LoraState> {
    let slots = hosts
        .iter()
        .enumerate()
        .map(|(i, &(layer, proj))| {
            if layer >= model.n_layers {
                return Err(Error::Lora(format!("adapter host layer {layer} out of range")));
            }
            Ok(AdapterSlot {
                layer,
                proj,
                host: idx_proj(layer, proj),
                a: n_base + 2 * i,
                b: n_base + 2 * i + 1,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoraState { cfg: cfg.clone(), slots })
}

/// Freeze every base tensor and add a zero-initialized adapter pair to each
/// targeted projection. `seed` drives the gaussian init of `A`.
pub fn attach(state: &ModelState, cfg: &LoraConfig, seed: u64) -> Result<ModelState> {
    if state.lora.is_some() {
        return Err(Error::Lora("adapters already attached".into()));
    }
    cfg.validate()?;
    let targets = cfg.target_projs()?;
    let mcfg = state.cfg;
    let mut params = state.params.clone();
    for p in &mut params {
        p.freeze();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hosts = Vec::new();
    for layer in 0..mcfg.n_layers {
        for &proj in &targets {
            let (d_out, d_in) = proj.dims(&mcfg);
            let host = proj.path(layer);
            let a = gaussian(&mut rng, cfg.rank * d_in, 1.0 / (d_in as f32).sqrt());
            params.push(Param::trainable(format!("{host}.lora_a"), vec![cfg.rank, d_in], a));
            params.push(Param::trainable(
                format!("{host}.lora_b"),
                vec![d_out, cfg.rank],
                vec![0.0; d_out * cfg.rank],
            ));
            hosts.push((layer, proj));
        }
    }
    let lora = slots_for(&mcfg, cfg, &hosts, base_len(mcfg.n_layers))?;
    Ok(ModelState { cfg: mcfg, params, lora: Some(lora) })
}

/// Fold every adapter into its host: `W + scaling * B A`, computed in
/// 32-bit and stored frozen.
pub fn merge(state: &ModelState) -> Result<ModelState> {
    let lora = state
        .lora
        .as_ref()
        .ok_or_else(|| Error::Lora("no adapters to merge".into()))?;
    let s = lora.cfg.scaling() as f32;
    let r = lora.cfg.rank;
    let mut params = state.params[..base_len(state.cfg.n_layers)].to_vec();
    for slot in &lora.slots {
        let (d_out, d_in) = slot.proj.dims(&state.cfg);
        let mut w = params[slot.host].values_f32();
        let a = state.params[slot.a].values_f32();
        let b = state.params[slot.b].values_f32();
        for o in 0..d_out {
            for k in 0..r {
                let bo = s * b[o * r + k];
                if bo == 0.0 {
                    continue;
                }
                for i in 0..d_in {
                    w[o * d_in + i] += bo * a[k * d_in + i];
                }
            }
        }
        let host = &params[slot.host];
        params[slot.host] = Param::frozen(host.path.clone(), host.shape.clone(), &w);
    }
    Ok(ModelState { cfg: state.cfg, params, lora: None })
}

/// Adapter parameters over base parameters, from shapes alone.
pub fn trainable_ratio(model: &ModelConfig, cfg: &LoraConfig) -> Result<f64> {
    model.validate()?;
    cfg.validate()?;
    let per_layer: usize = cfg
        .target_projs()?
        .iter()
        .map(|p| {
            let (d_out, d_in) = p.dims(model);
            cfg.rank * (d_in + d_out)
        })
        .sum();
    Ok((per_layer * model.n_layers) as f64 / model.param_count() as f64)
}

fn adapter_meta(state: &ModelState, lora: &LoraState) -> serde_json::Value {
    json!({
        "kind": "adapter",
        "model_config": state.cfg,
        "lora": LoraMeta::from_state(lora),
        "base_fingerprint": state.frozen_fingerprint(),
    })
}

/// Adapter tensors of an adapted state, in container form.
pub fn encode_adapters(state: &ModelState) -> Result<Vec<u8>> {
    let lora = state.lora.as_ref().ok_or_else(|| Error::Lora("no adapters attached".into()))?;
    let n = base_len(state.cfg.n_layers);
    crate::model::encode_container(&adapter_meta(state, lora), &state.params[n..])
}

pub fn save_adapters(state: &ModelState, path: &Path) -> Result<()> {
    let lora = state.lora.as_ref().ok_or_else(|| Error::Lora("no adapters attached".into()))?;
    let n = base_len(state.cfg.n_layers);
    write_container(path, &adapter_meta(state, lora), &state.params[n..])
}

/// Attach saved adapters to a matching base.
pub fn load_adapters(base: &ModelState, path: &Path) -> Result<ModelState> {
    let (meta, tensors) = read_container(path)?;
    if meta["kind"] != "adapter" {
        return Err(Error::Format(format!("{} is not an adapter checkpoint", path.display())));
    }
    let mcfg: ModelConfig = serde_json::from_value(meta["model_config"].clone())?;
    if mcfg != base.cfg {
        return Err(Error::Lora("adapter was trained on a different model configuration".into()));
    }
    let lmeta: LoraMeta = serde_json::from_value(meta["lora"].clone())?;
    let mut state = attach(base, &lmeta.config, 0)?;
    if meta["base_fingerprint"] != state.frozen_fingerprint().as_str() {
        return Err(Error::Lora("base weights differ from the ones the adapter was trained on".into()));
    }
    let n = base_len(mcfg.n_layers);
    if tensors.len() != state.params.len() - n {
        return Err(Error::Format(format!(
            "expected {} adapter tensors, found {}",
            state.params.len() - n,
            tensors.len()
        )));
    }
    for (slot, t) in state.params[n..].iter_mut().zip(tensors) {
        if slot.path != t.path || slot.shape != t.shape || !t.is_trainable() {
            return Err(Error::Shape {
                path: slot.path.clone(),
                expected: format!("{:?} f32", slot.shape),
                got: format!("{} {:?}", t.path, t.shape),
            });
        }
        *slot = t;
    }
    Ok(state)
}
