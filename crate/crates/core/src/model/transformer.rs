//! Forward and reverse-mode passes of the decoder, written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    logsumexp, matmul_w_acc, matmul_wt, outer_acc, rmsnorm, rmsnorm_backward, silu, silu_grad,
    softmax_in_place,
};
use super::real::Real;
use super::state::{
    idx_final_norm, idx_layer, idx_lm_head, idx_pos, idx_proj, idx_tok, GradSet, ModelState, Proj,
    Weights, NORM1, NORM2,
};
use crate::error::{Error, Result};

pub type Grads<F> = Vec<Option<Vec<F>>>;

/// Counts layer-activation sets resident at once: stored block inputs plus
/// per-layer caches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivationMeter {
    live: usize,
    peak: usize,
}

impl ActivationMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn acquire(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one sequence's dropout masks.
pub fn dropout_key(seed: u64, epoch: usize, step: usize, seq: usize) -> u64 {
    let mut k = splitmix(seed);
    for v in [epoch as u64, step as u64, seq as u64] {
        k = splitmix(k ^ v);
    }
    k
}

/// Inverted-dropout scale per element (`0` or `1/(1-p)`).
fn dropout_mask<F: Real>(key: u64, layer: usize, proj: Proj, n: usize, p: f32) -> Vec<F> {
    let seed = splitmix(splitmix(key ^ (layer as u64) << 8) ^ proj as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = F::from_f64(1.0 / (1.0 - f64::from(p)));
    (0..n)
        .map(|_| if rng.random::<f32>() < p { F::ZERO } else { keep })
        .collect()
}

struct LinCache<F> {
    /// Adapter input after dropout; `None` when it equals the host input.
    xd: Option<Vec<F>>,
    mask: Option<Vec<F>>,
    /// `A xd`, rows x r.
    z: Vec<F>,
}

struct LayerCache<F> {
    x: Vec<F>,
    inv1: Vec<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    x1: Vec<F>,
    inv2: Vec<F>,
    h2: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
    act: Vec<F>,
    lin: [Option<LinCache<F>>; 7],
}

impl<F: Real> Weights<F> {
    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Loss("empty sequence".into()));
        }
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max: self.cfg.max_seq_len });
        }
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id, index, vocab_size: self.cfg.vocab_size });
        }
        Ok(())
    }

    fn eps(&self) -> F {
        F::from_f32(self.cfg.norm_eps)
    }

    fn linear(
        &self,
        layer: usize,
        proj: Proj,
        x: &[F],
        rows: usize,
        dropout: Option<u64>,
    ) -> (Vec<F>, Option<LinCache<F>>) {
        let (d_out, d_in) = proj.dims(&self.cfg);
        let host = idx_proj(layer, proj);
        let mut y = matmul_wt(x, &self.values[host], rows, d_in, d_out);
        let Some((a, b)) = self.adapter_of[host] else {
            return (y, None);
        };
        let r = self.rank;
        let (xd, mask) = match dropout {
            Some(key) if self.dropout_p > 0.0 => {
                let mask = dropout_mask::<F>(key, layer, proj, x.len(), self.dropout_p);
                let xd = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                (Some(xd), Some(mask))
            }
            _ => (None, None),
        };
        let z = matmul_wt(xd.as_deref().unwrap_or(x), &self.values[a], rows, d_in, r);
        let bz = matmul_wt(&z, &self.values[b], rows, r, d_out);
        for (yi, &di) in y.iter_mut().zip(&bz) {
            *yi += self.scaling * di;
        }
        (y, Some(LinCache { xd, mask, z }))
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        layer: usize,
        proj: Proj,
        x: &[F],
        cache: Option<&LinCache<F>>,
        dy: &[F],
        rows: usize,
        dx: &mut [F],
        grads: &mut Grads<F>,
    ) {
        let (d_out, d_in) = proj.dims(&self.cfg);
        let host = idx_proj(layer, proj);
        matmul_w_acc(dy, &self.values[host], rows, d_in, d_out, dx);
        if let Some(gw) = grads[host].as_mut() {
            outer_acc(dy, x, rows, d_in, d_out, gw);
        }
        let (Some((a, b)), Some(c)) = (self.adapter_of[host], cache) else {
            return;
        };
        let r = self.rank;
        let sdy: Vec<F> = dy.iter().map(|&g| g * self.scaling).collect();
        if let Some(gb) = grads[b].as_mut() {
            outer_acc(&sdy, &c.z, rows, r, d_out, gb);
        }
        let mut dz = vec![F::ZERO; rows * r];
        matmul_w_acc(&sdy, &self.values[b], rows, r, d_out, &mut dz);
        let xd = c.xd.as_deref().unwrap_or(x);
        if let Some(ga) = grads[a].as_mut() {
            outer_acc(&dz, xd, rows, d_in, r, ga);
        }
        match &c.mask {
            None => matmul_w_acc(&dz, &self.values[a], rows, d_in, r, dx),
            Some(mask) => {
                let mut dxd = vec![F::ZERO; rows * d_in];
                matmul_w_acc(&dz, &self.values[a], rows, d_in, r, &mut dxd);
                for ((d, &g), &m) in dx.iter_mut().zip(&dxd).zip(mask) {
                    *d += g * m;
                }
            }
        }
    }

    fn embed(&self, ids: &[u32]) -> Vec<F> {
        let d = self.cfg.d_model;
        let tok = &self.values[idx_tok()];
        let pos = &self.values[idx_pos()];
        let mut x = vec![F::ZERO; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                x[t * d + j] = tok[id * d + j] + pos[t * d + j];
            }
        }
        x
    }

    fn layer_forward(&self, layer: usize, x: Vec<F>, dropout: Option<u64>) -> (Vec<F>, LayerCache<F>) {
        let cfg = &self.cfg;
        let (d, t_len, dff) = (cfg.d_model, x.len() / cfg.d_model, cfg.d_ff);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = F::ONE / F::from_usize(dh).sqrt();

        let (h1, inv1) = rmsnorm(&x, &self.values[idx_layer(layer, NORM1)], t_len, self.eps());
        let (q, cq) = self.linear(layer, Proj::Q, &h1, t_len, dropout);
        let (k, ck) = self.linear(layer, Proj::K, &h1, t_len, dropout);
        let (v, cv) = self.linear(layer, Proj::V, &h1, t_len, dropout);

        let mut probs = vec![F::ZERO; nh * t_len * t_len];
        let mut ctx = vec![F::ZERO; t_len * d];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..t_len {
                let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let qt = &q[t * d + off..t * d + off + dh];
                for s in 0..=t {
                    row[s] = super::kernels::dot(qt, &k[s * d + off..s * d + off + dh]) * scale;
                }
                softmax_in_place(&mut row[..=t]);
                let ct = &mut ctx[t * d + off..t * d + off + dh];
                for s in 0..=t {
                    super::kernels::axpy(row[s], &v[s * d + off..s * d + off + dh], ct);
                }
            }
        }
        let (attn, co) = self.linear(layer, Proj::O, &ctx, t_len, dropout);
        let x1: Vec<F> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();

        let (h2, inv2) = rmsnorm(&x1, &self.values[idx_layer(layer, NORM2)], t_len, self.eps());
        let (u, cu) = self.linear(layer, Proj::Up, &h2, t_len, dropout);
        let (g, cg) = self.linear(layer, Proj::Gate, &h2, t_len, dropout);
        let act: Vec<F> = g.iter().zip(&u).map(|(&gi, &ui)| silu(gi) * ui).collect();
        debug_assert_eq!(act.len(), t_len * dff);
        let (f, cd) = self.linear(layer, Proj::Down, &act, t_len, dropout);
        let out: Vec<F> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();

        let cache = LayerCache {
            x,
            inv1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            x1,
            inv2,
            h2,
            u,
            g,
            act,
            lin: [cq, ck, cv, co, cu, cg, cd],
        };
        (out, cache)
    }

    /// Returns the gradient with respect to the layer input.
    fn layer_backward(&self, layer: usize, c: &LayerCache<F>, dout: Vec<F>, grads: &mut Grads<F>) -> Vec<F> {
        let cfg = &self.cfg;
        let (d, dff) = (cfg.d_model, cfg.d_ff);
        let t_len = c.x.len() / d;
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = F::ONE / F::from_usize(dh).sqrt();
        let lin = |p: Proj| c.lin[Proj::ALL.iter().position(|&q| q == p).unwrap()].as_ref();

        // Feed-forward branch.
        let mut dx1 = dout.clone();
        let mut dact = vec![F::ZERO; t_len * dff];
        self.linear_backward(layer, Proj::Down, &c.act, lin(Proj::Down), &dout, t_len, &mut dact, grads);
        let mut du = vec![F::ZERO; t_len * dff];
        let mut dg = vec![F::ZERO; t_len * dff];
        for i in 0..t_len * dff {
            du[i] = dact[i] * silu(c.g[i]);
            dg[i] = dact[i] * c.u[i] * silu_grad(c.g[i]);
        }
        let mut dh2 = vec![F::ZERO; t_len * d];
        self.linear_backward(layer, Proj::Up, &c.h2, lin(Proj::Up), &du, t_len, &mut dh2, grads);
        self.linear_backward(layer, Proj::Gate, &c.h2, lin(Proj::Gate), &dg, t_len, &mut dh2, grads);
        let n2 = idx_layer(layer, NORM2);
        rmsnorm_backward(&dh2, &c.x1, &self.values[n2], &c.inv2, &mut dx1, grads[n2].as_deref_mut());

        // Attention branch.
        let mut dctx = vec![F::ZERO; t_len * d];
        self.linear_backward(layer, Proj::O, &c.ctx, lin(Proj::O), &dx1, t_len, &mut dctx, grads);
        let mut dq = vec![F::ZERO; t_len * d];
        let mut dk = vec![F::ZERO; t_len * d];
        let mut dv = vec![F::ZERO; t_len * d];
        let mut dp = vec![F::ZERO; t_len];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..t_len {
                let p = &c.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let dct = &dctx[t * d + off..t * d + off + dh];
                let mut sum = F::ZERO;
                for s in 0..=t {
                    dp[s] = super::kernels::dot(dct, &c.v[s * d + off..s * d + off + dh]);
                    super::kernels::axpy(p[s], dct, &mut dv[s * d + off..s * d + off + dh]);
                    sum += p[s] * dp[s];
                }
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - sum) * scale;
                    if ds == F::ZERO {
                        continue;
                    }
                    super::kernels::axpy(ds, &c.k[s * d + off..s * d + off + dh], &mut dq[t * d + off..t * d + off + dh]);
                    super::kernels::axpy(ds, &c.q[t * d + off..t * d + off + dh], &mut dk[s * d + off..s * d + off + dh]);
                }
            }
        }
        let mut dh1 = vec![F::ZERO; t_len * d];
        self.linear_backward(layer, Proj::Q, &c.h1, lin(Proj::Q), &dq, t_len, &mut dh1, grads);
        self.linear_backward(layer, Proj::K, &c.h1, lin(Proj::K), &dk, t_len, &mut dh1, grads);
        self.linear_backward(layer, Proj::V, &c.h1, lin(Proj::V), &dv, t_len, &mut dh1, grads);
        let mut dx = dx1;
        let n1 = idx_layer(layer, NORM1);
        rmsnorm_backward(&dh1, &c.x, &self.values[n1], &c.inv1, &mut dx, grads[n1].as_deref_mut());
        dx
    }

    /// Final norm and output head. Returns `(hf, inv_rms, logits)`.
    fn head(&self, x: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let rows = x.len() / d;
        let (hf, inv) = rmsnorm(x, &self.values[idx_final_norm(self.cfg.n_layers)], rows, self.eps());
        let logits = matmul_wt(&hf, &self.values[idx_lm_head(self.cfg.n_layers)], rows, d, v);
        (hf, inv, logits)
    }

    /// Logits, `T x vocab_size` row-major. `dropout` is `None` in evaluation
    /// mode.
    pub fn logits(&self, ids: &[u32], dropout: Option<u64>) -> Result<Vec<F>> {
        self.check_ids(ids)?;
        let mut x = self.embed(ids);
        for layer in 0..self.cfg.n_layers {
            x = self.layer_forward(layer, x, dropout).0;
        }
        Ok(self.head(&x).2)
    }

    /// `log p(ids[t+1] | ids[..=t])` for `t` in `0..T-1`, evaluation mode.
    pub fn token_logprobs(&self, ids: &[u32]) -> Result<Vec<F>> {
        let logits = self.logits(ids, None)?;
        Ok(next_token_logprobs(&logits, self.cfg.vocab_size, ids))
    }

    /// Masked mean next-token NLL.
    pub fn loss(&self, ids: &[u32], mask: Option<&[bool]>, dropout: Option<u64>) -> Result<F> {
        let logits = self.logits(ids, dropout)?;
        clm_loss(&logits, self.cfg.vocab_size, ids, mask)
    }

    /// Loss and gradients for every trainable tensor. `segments` selects
    /// checkpointed execution with that many contiguous layer blocks.
    pub fn grad(
        &self,
        ids: &[u32],
        mask: Option<&[bool]>,
        dropout: Option<u64>,
        segments: Option<usize>,
        meter: &mut ActivationMeter,
    ) -> Result<(F, Grads<F>)> {
        self.check_ids(ids)?;
        let n = self.cfg.n_layers;
        if let Some(s) = segments {
            if s == 0 || s > n {
                return Err(Error::config("segments", format!("{s} outside [1, {n}]")));
            }
        }
        let segments = segments.filter(|&s| s < n);
        let (d, vsz) = (self.cfg.d_model, self.cfg.vocab_size);
        let t_len = ids.len();
        let count = prediction_count(t_len, mask)?;

        let mut grads = self.zero_grads();
        let x0 = self.embed(ids);

        // Forward: full caches, or only block inputs when checkpointing.
        let blocks = segments.map(|s| block_bounds(n, s));
        let mut caches = Vec::new();
        let mut block_inputs = Vec::new();
        let mut x = x0;
        match &blocks {
            None => {
                for layer in 0..n {
                    meter.acquire(1);
                    let (out, cache) = self.layer_forward(layer, x, dropout);
                    caches.push(cache);
                    x = out;
                }
            }
            Some(bounds) => {
                for &(start, end) in bounds {
                    meter.acquire(1);
                    block_inputs.push(x.clone());
                    for layer in start..end {
                        meter.acquire(1);
                        x = self.layer_forward(layer, x, dropout).0;
                        meter.release(1);
                    }
                }
            }
        }

        let (hf, inv_f, logits) = self.head(&x);
        let (loss, dlogits) = loss_and_dlogits(&logits, vsz, ids, mask, count);

        let head_idx = idx_lm_head(n);
        let mut dhf = vec![F::ZERO; t_len * d];
        matmul_w_acc(&dlogits, &self.values[head_idx], t_len, d, vsz, &mut dhf);
        if let Some(g) = grads[head_idx].as_mut() {
            outer_acc(&dlogits, &hf, t_len, d, vsz, g);
        }
        let fn_idx = idx_final_norm(n);
        let mut dx = vec![F::ZERO; t_len * d];
        rmsnorm_backward(&dhf, &x, &self.values[fn_idx], &inv_f, &mut dx, grads[fn_idx].as_deref_mut());

        match blocks {
            None => {
                for layer in (0..n).rev() {
                    let cache = caches.pop().expect("one cache per layer");
                    dx = self.layer_backward(layer, &cache, dx, &mut grads);
                    drop(cache);
                    meter.release(1);
                }
            }
            Some(bounds) => {
                for &(start, end) in bounds.iter().rev() {
                    let mut x = block_inputs.pop().expect("one input per block");
                    let mut local = Vec::with_capacity(end - start);
                    for layer in start..end {
                        meter.acquire(1);
                        let (out, cache) = self.layer_forward(layer, x, dropout);
                        local.push(cache);
                        x = out;
                    }
                    for layer in (start..end).rev() {
                        let cache = local.pop().expect("recomputed cache");
                        dx = self.layer_backward(layer, &cache, dx, &mut grads);
                        meter.release(1);
                    }
                    meter.release(1);
                }
            }
        }

        let tok = idx_tok();
        if let Some(g) = grads[tok].as_mut() {
            for (t, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    g[id * d + j] += dx[t * d + j];
                }
            }
        }
        if let Some(g) = grads[idx_pos()].as_mut() {
            for (gi, &di) in g.iter_mut().zip(&dx) {
                *gi += di;
            }
        }
        Ok((loss, grads))
    }
}

/// `s` contiguous blocks over `n` layers; sizes differ by at most one.
pub fn block_bounds(n: usize, s: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (n / s, n % s);
    let mut out = Vec::with_capacity(s);
    let mut start = 0;
    for i in 0..s {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

fn prediction_count(t_len: usize, mask: Option<&[bool]>) -> Result<usize> {
    if t_len < 2 {
        return Err(Error::Loss(format!("need at least 2 tokens, got {t_len}")));
    }
    match mask {
        None => Ok(t_len - 1),
        Some(m) => {
            if m.len() != t_len - 1 {
                return Err(Error::Loss(format!("mask length {} != {}", m.len(), t_len - 1)));
            }
            match m.iter().filter(|&&b| b).count() {
                0 => Err(Error::Loss("every position is masked".into())),
                c => Ok(c),
            }
        }
    }
}

fn next_token_logprobs<F: Real>(logits: &[F], vocab: usize, ids: &[u32]) -> Vec<F> {
    (0..ids.len().saturating_sub(1))
        .map(|t| {
            let row = &logits[t * vocab..(t + 1) * vocab];
            row[ids[t + 1] as usize] - logsumexp(row)
        })
        .collect()
}

fn loss_and_dlogits<F: Real>(
    logits: &[F],
    vocab: usize,
    ids: &[u32],
    mask: Option<&[bool]>,
    count: usize,
) -> (F, Vec<F>) {
    let inv_n = F::ONE / F::from_usize(count);
    let mut d = vec![F::ZERO; logits.len()];
    let mut loss = F::ZERO;
    for t in 0..ids.len() - 1 {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let row = &mut d[t * vocab..(t + 1) * vocab];
        row.copy_from_slice(&logits[t * vocab..(t + 1) * vocab]);
        let y = ids[t + 1] as usize;
        let lse = softmax_in_place(row);
        loss -= logits[t * vocab + y] - lse;
        row[y] -= F::ONE;
        for g in row.iter_mut() {
            *g *= inv_n;
        }
    }
    (loss * inv_n, d)
}

/// Mean masked next-token negative log-likelihood in nats. `mask[t]`
/// covers the prediction of `ids[t + 1]` from `logits[t]`.
pub fn clm_loss<F: Real>(logits: &[F], vocab: usize, ids: &[u32], mask: Option<&[bool]>) -> Result<F> {
    let count = prediction_count(ids.len(), mask)?;
    if logits.len() != ids.len() * vocab {
        return Err(Error::Loss(format!(
            "logits hold {} values, expected {} x {vocab}",
            logits.len(),
            ids.len()
        )));
    }
    let lp = next_token_logprobs(logits, vocab, ids);
    let mut sum = F::ZERO;
    for (t, &v) in lp.iter().enumerate() {
        if mask.is_none_or(|m| m[t]) {
            sum -= v;
        }
    }
    Ok(sum / F::from_usize(count))
}

/// Evaluation-mode logits of a state in 32-bit arithmetic.
pub fn forward(state: &ModelState, ids: &[u32]) -> Result<Vec<f32>> {
    state.weights::<f32>().logits(ids, None)
}

/// Loss and exact gradients for the state's trainable tensors, evaluation
/// mode (no dropout).
pub fn backward(state: &ModelState, ids: &[u32], mask: Option<&[bool]>) -> Result<(f32, GradSet)> {
    let w = state.weights::<f32>();
    let (loss, g) = w.grad(ids, mask, None, None, &mut ActivationMeter::new())?;
    Ok((loss, GradSet::from_indexed(state, g)))
}

/// As [`backward`] with `segments` checkpointed layer blocks. Returns the
/// activation meter alongside.
pub fn backward_checkpointed(
    state: &ModelState,
    ids: &[u32],
    mask: Option<&[bool]>,
    segments: usize,
) -> Result<(f32, GradSet, ActivationMeter)> {
    let w = state.weights::<f32>();
    let mut meter = ActivationMeter::new();
    let (loss, g) = w.grad(ids, mask, None, Some(segments), &mut meter)?;
    Ok((loss, GradSet::from_indexed(state, g), meter))
}
