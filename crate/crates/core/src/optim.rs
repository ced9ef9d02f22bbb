//! AdamW with decoupled decay, cosine schedule with linear warmup, and
//! global-norm clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{read_container, write_container, GradSet, ModelState, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub lr_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_ratio: 0.1,
            total_steps: 1,
            lr_floor: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("optim.warmup_ratio", "must be in [0, 1)"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("optim.total_steps", "must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("optim.clip_norm", "must be > 0"));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("optim.base_lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta1", "betas must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }
}

pub fn lr_at(step: usize, cfg: &OptimConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let w = cfg.warmup_steps();
    if step < w {
        return Ok(cfg.base_lr * (step + 1) as f64 / w as f64);
    }
    if total == w {
        return Ok(cfg.lr_floor);
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    Ok(cfg.lr_floor + (cfg.base_lr - cfg.lr_floor) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Scale `grads` so their global L2 norm is at most `clip_norm`. Returns the
/// norm before clipping. `step` tags the error on non-finite input.
pub fn clip_global_norm(grads: &mut GradSet, clip_norm: f64, step: usize) -> Result<f64> {
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::NonFinite { step, path: path.to_string() });
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

/// First and second moments per trainable path, plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(state: &ModelState) -> Self {
        let mut m = BTreeMap::new();
        for p in state.params().iter().filter(|p| p.is_trainable()) {
            m.insert(p.path.clone(), vec![0.0; p.numel()]);
        }
        OptimState { v: m.clone(), m, t: 0 }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (k, m) in &self.m {
            tensors.push(Param::trainable(format!("{k}.m"), vec![m.len()], m.clone()));
            tensors.push(Param::trainable(format!("{k}.v"), vec![m.len()], self.v[k].clone()));
        }
        write_container(path, &json!({"kind": "optimizer", "t": self.t}), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container(path)?;
        if meta["kind"] != "optimizer" {
            return Err(Error::Format(format!("{} is not an optimizer checkpoint", path.display())));
        }
        let mut out = OptimState { t: meta["t"].as_u64().unwrap_or(0), ..Default::default() };
        for p in tensors {
            let values = p.values_f32();
            if let Some(k) = p.path.strip_suffix(".m") {
                out.m.insert(k.to_string(), values);
            } else if let Some(k) = p.path.strip_suffix(".v") {
                out.v.insert(k.to_string(), values);
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor {}", p.path)));
            }
        }
        Ok(out)
    }
}

/// Scalar update for step `t` (1-based). Returns `(theta, m, v)`.
pub fn adamw_update(theta: f64, g: f64, m: f64, v: f64, t: u64, lr: f64, cfg: &OptimConfig) -> (f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let mhat = m / (1.0 - cfg.beta1.powi(t as i32));
    let vhat = v / (1.0 - cfg.beta2.powi(t as i32));
    let theta = theta - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * theta);
    (theta, m, v)
}

/// One decoupled-decay Adam update of every trainable tensor. Arithmetic is
/// done in f64 per element and stored back in f32.
pub fn adamw_step(
    state: &mut ModelState,
    grads: &GradSet,
    opt: &mut OptimState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    let expected: Vec<String> = state.trainable_paths().into_iter().map(String::from).collect();
    let mut got: Vec<&str> = grads.keys().collect();
    got.sort_unstable();
    let mut want: Vec<&str> = expected.iter().map(String::as_str).collect();
    want.sort_unstable();
    if got != want {
        return Err(Error::Shape {
            path: "grads".into(),
            expected: format!("{want:?}"),
            got: format!("{got:?}"),
        });
    }
    opt.t += 1;
    for (path, theta) in state.trainable_mut() {
        let g = grads.get(path).expect("checked above");
        let m = opt.m.entry(path.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        let v = opt.v.entry(path.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
        if g.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
            return Err(Error::Shape {
                path: path.to_string(),
                expected: theta.len().to_string(),
                got: g.len().to_string(),
            });
        }
        for i in 0..theta.len() {
            let (th, mi, vi) = adamw_update(
                f64::from(theta[i]),
                g[i],
                f64::from(m[i]),
                f64::from(v[i]),
                opt.t,
                lr,
                cfg,
            );
            theta[i] = th as f32;
            m[i] = mi as f32;
            v[i] = vi as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> OptimConfig {
        OptimConfig { base_lr: 1e-3, total_steps: total, ..Default::default() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(100);
        assert_eq!(c.warmup_steps(), 10);
        assert_eq!(lr_at(10, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(100, &c).unwrap(), 0.0);
        assert!((lr_at(55, &c).unwrap() - 0.5e-3).abs() < 1e-15);
        assert_eq!(lr_at(0, &c).unwrap(), 1e-4);
        assert!(matches!(lr_at(101, &c), Err(Error::StepOutOfRange { step: 101, total: 100 })));
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let c = OptimConfig { lr_floor: 1e-5, ..cfg(37) };
        let w = c.warmup_steps();
        let lrs: Vec<f64> = (0..=37).map(|s| lr_at(s, &c).unwrap()).collect();
        assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0]));
        assert!(lrs[..w].windows(2).all(|p| p[1] > p[0]));
        assert_eq!(lrs[37], 1e-5);
    }

    #[test]
    fn clip_examples() {
        let mut g = GradSet::default();
        g.entries.insert("a".into(), vec![2.0, 0.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0, 0).unwrap(), 2.0);
        assert_eq!(g.get("a").unwrap(), &[1.0, 0.0]);
        let mut small = GradSet::default();
        small.entries.insert("a".into(), vec![0.3, 0.4]);
        clip_global_norm(&mut small, 1.0, 0).unwrap();
        assert_eq!(small.get("a").unwrap(), &[0.3, 0.4]);
        small.entries.insert("b".into(), vec![f64::INFINITY]);
        assert!(matches!(clip_global_norm(&mut small, 1.0, 7), Err(Error::NonFinite { step: 7, .. })));
    }
}
