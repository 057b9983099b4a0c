//! Parameter storage, Adam, and the layer building blocks shared by the
//! learned components (codec, surrogate, adapter, diffusion transformer).

use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct ParamEntry {
    name: String,
    tensor: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameter set with Adam state. Serialization goes through the
/// checkpoint container in `io::ckpt`.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    adam_step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let m = Tensor::zeros(tensor.shape());
        let v = Tensor::zeros(tensor.shape());
        self.entries.push(ParamEntry { name, tensor, m, v });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Insert a parameter onto a tape as a gradient-receiving leaf.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Value {
        tape.param_leaf(id.0, self.tensor(id).clone())
    }

    /// Insert a parameter as a constant (frozen) leaf: no gradient flows to it.
    pub fn frozen_leaf(&self, tape: &mut Tape, id: ParamId) -> Value {
        tape.constant(self.tensor(id).clone())
    }

    /// One Adam update from gradients keyed by parameter index.
    pub fn adam_step(&mut self, grads: &HashMap<usize, Tensor>, hp: &AdamParams) {
        self.adam_step += 1;
        let t = self.adam_step as f64;
        let bc1 = 1.0 - hp.beta1.powf(t);
        let bc2 = 1.0 - hp.beta2.powf(t);
        for (idx, entry) in self.entries.iter_mut().enumerate() {
            let Some(g) = grads.get(&idx) else { continue };
            debug_assert_eq!(g.numel(), entry.tensor.numel());
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let p = entry.tensor.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
    }

    /// SHA-256 over the parameters' little-endian f32 bytes, in name order.
    /// This is the identity used by the stage-isolation checks.
    pub fn param_hash(&self) -> String {
        let mut sorted: Vec<&ParamEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut hasher = Sha256::new();
        for e in sorted {
            hasher.update(e.name.as_bytes());
            for &x in e.tensor.data() {
                hasher.update((x as f32).to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

pub fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..Default::default()
        }
    }
}

pub mod init {
    use super::*;

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Tensor {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Tensor::from_vec(&[out_dim, in_dim], data)
    }

    /// Kaiming-style uniform for conv kernels [O,C,kh,kw].
    pub fn conv(rng: &mut impl Rng, o: usize, c: usize, kh: usize, kw: usize) -> Tensor {
        let fan_in = c * kh * kw;
        let a = (1.0 / fan_in as f64).sqrt();
        let data = (0..o * fan_in).map(|_| rng.random_range(-a..a)).collect();
        Tensor::from_vec(&[o, c, kh, kw], data)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init::xavier(rng, out_dim, in_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Value, frozen: bool) -> Value {
        let leaf = |t: &mut Tape, id| {
            if frozen {
                store.frozen_leaf(t, id)
            } else {
                store.leaf(t, id)
            }
        };
        let w = leaf(tape, self.w);
        let b = self.b.map(|b| leaf(tape, b));
        tape.linear(x, w, b)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Value, frozen: bool) -> Value {
        let (g, b) = if frozen {
            (
                store.frozen_leaf(tape, self.gamma),
                store.frozen_leaf(tape, self.beta),
            )
        } else {
            (store.leaf(tape, self.gamma), store.leaf(tape, self.beta))
        };
        tape.layer_norm(x, g, b, self.eps)
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: store.add(format!("{name}.w"), init::conv(rng, out_ch, in_ch, k, k)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Value, frozen: bool) -> Value {
        let (w, b) = if frozen {
            (
                store.frozen_leaf(tape, self.w),
                store.frozen_leaf(tape, self.b),
            )
        } else {
            (store.leaf(tape, self.w), store.leaf(tape, self.b))
        };
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Rotary tables: cos/sin of shape [T, D/2] for positions scaled by the usual
/// geometric frequency schedule.
pub fn rope_tables(positions: &[f64], half_dim: usize, base: f64) -> (Tensor, Tensor) {
    let t = positions.len();
    let mut cos = Vec::with_capacity(t * half_dim);
    let mut sin = Vec::with_capacity(t * half_dim);
    for &p in positions {
        for i in 0..half_dim {
            let freq = base.powf(-(i as f64) / half_dim as f64);
            cos.push((p * freq).cos());
            sin.push((p * freq).sin());
        }
    }
    (
        Tensor::from_vec(&[t, half_dim], cos),
        Tensor::from_vec(&[t, half_dim], sin),
    )
}

/// Sinusoidal embedding of a scalar (timestep) into `dim` features.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Tensor {
    assert_eq!(dim % 2, 0);
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        data.push((value * freq).sin());
        data.push((value * freq).cos());
    }
    Tensor::from_vec(&[dim], data)
}

/// Multi-head self-attention over tokens [T, C] with optional rotary tables
/// ([T, head_dim/2]) shared across heads.
pub struct Attention {
    pub wqkv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0);
        Attention {
            wqkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            wo: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Value,
        rope: Option<(&Tensor, &Tensor)>,
        frozen: bool,
    ) -> Value {
        let shape = tape.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "attention expects [T, C]");
        let (t, c) = (shape[0], shape[1]);
        let hd = c / self.heads;
        let qkv = self.wqkv.forward(tape, store, x, frozen); // [T, 3C]
        let q = tape.slice(qkv, 1, 0, c);
        let k = tape.slice(qkv, 1, c, c);
        let v = tape.slice(qkv, 1, 2 * c, c);
        // [T, C] -> [H, T, hd]
        let to_heads = |tape: &mut Tape, x: Value| {
            let r = tape.reshape(x, &[t, self.heads, hd]);
            tape.permute(r, &[1, 0, 2])
        };
        let mut qh = to_heads(tape, q);
        let mut kh = to_heads(tape, k);
        let vh = to_heads(tape, v);
        if let Some((cos, sin)) = rope {
            qh = tape.rope(qh, cos, sin);
            kh = tape.rope(kh, cos, sin);
        }
        let kt = tape.permute(kh, &[0, 2, 1]); // [H, hd, T]
        let scores = tape.bmm(qh, kt); // [H, T, T]
        let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = tape.softmax_last(scaled);
        let ctx = tape.bmm(attn, vh); // [H, T, hd]
        let merged = tape.permute(ctx, &[1, 0, 2]); // [T, H, hd]
        let flat = tape.reshape(merged, &[t, c]);
        self.wo.forward(tape, store, flat, frozen)
    }
}

/// Pre-norm transformer block: x + attn(LN(x)), then x + mlp(LN(x)).
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * mlp_ratio, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * mlp_ratio, dim, true),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Value,
        rope: Option<(&Tensor, &Tensor)>,
        frozen: bool,
    ) -> Value {
        let n1 = self.ln1.forward(tape, store, x, frozen);
        let a = self.attn.forward(tape, store, n1, rope, frozen);
        let x = tape.add(x, a);
        let n2 = self.ln2.forward(tape, store, x, frozen);
        let h = self.fc1.forward(tape, store, n2, frozen);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h, frozen);
        tape.add(x, h)
    }
}

/// Mean squared error between a value and a constant target.
pub fn mse_to_const(tape: &mut Tape, x: Value, target: &Tensor) -> Value {
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// Masked MSE: mean over mask-selected elements (mask is 0/1, constant).
pub fn masked_mse_to_const(tape: &mut Tape, x: Value, target: &Tensor, mask: &Tensor) -> Value {
    let count: f64 = mask.data().iter().sum();
    let m = tape.constant(mask.clone());
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t);
    let dm = tape.mul(d, m);
    let sq = tape.mul(dm, dm);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / count.max(1.0))
}

/// Mean absolute error against a constant target.
pub fn l1_to_const(tape: &mut Tape, x: Value, target: &Tensor) -> Value {
    let t = tape.constant(target.clone());
    let d = tape.sub(x, t);
    let a = tape.abs(d);
    tape.mean_all(a)
}

/// Central finite-difference check of a scalar loss against backprop on
/// `n_probes` randomly chosen parameter coordinates. Returns the max relative
/// error observed.
pub fn gradient_check(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    build: impl Fn(&mut Tape, &ParamStore) -> Value,
    n_probes: usize,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    assert_eq!(tape.value(loss).numel(), 1);
    let grads = tape.backward(loss).params(&tape);

    let mut worst: f64 = 0.0;
    for _ in 0..n_probes {
        let pid = ParamId(rng.random_range(0..store.len()));
        let n = store.tensor(pid).numel();
        let i = rng.random_range(0..n);
        let orig = store.tensor(pid).data()[i];

        store.tensor_mut(pid).data_mut()[i] = orig + h;
        let mut t1 = Tape::new();
        let l1 = build(&mut t1, store);
        let f_plus = t1.value(l1).data()[0];

        store.tensor_mut(pid).data_mut()[i] = orig - h;
        let mut t2 = Tape::new();
        let l2 = build(&mut t2, store);
        let f_minus = t2.value(l2).data()[0];

        store.tensor_mut(pid).data_mut()[i] = orig;

        let fd = (f_plus - f_minus) / (2.0 * h);
        let analytic = grads.get(&pid.0).map(|g| g.data()[i]).unwrap_or(0.0);
        let denom = fd.abs().max(analytic.abs()).max(1e-7);
        worst = worst.max((fd - analytic).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adam_descends_on_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let hp = AdamParams::with_lr(0.1);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = store.leaf(&mut tape, p);
            let sq = tape.mul(x, x);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss).params(&tape);
            store.adam_step(&grads, &hp);
        }
        for &v in store.tensor(p).data() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn transformer_block_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, &mut rng, "blk", 8, 2, 2);
        let x = Tensor::randn(&mut rng, &[5, 8]);
        let target = Tensor::randn(&mut rng, &[5, 8]);
        let worst = gradient_check(
            &mut store,
            &mut rng,
            |tape, store| {
                let inp = tape.constant(x.clone());
                let y = block.forward(tape, store, inp, None, false);
                mse_to_const(tape, y, &target)
            },
            32,
            1e-5,
        );
        assert!(worst < 1e-3, "transformer grad check failed: {worst}");
    }

    #[test]
    fn param_hash_tracks_values() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::randn(&mut rng, &[4]));
        let h1 = store.param_hash();
        assert_eq!(h1, store.param_hash());
        store.tensor_mut(id).data_mut()[0] += 1.0;
        assert_ne!(h1, store.param_hash());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true);
        let x = Tensor::randn(&mut rng, &[4, 3]);
        let mut tape = Tape::new();
        let inp = tape.param_leaf(999, x);
        let y = lin.forward(&mut tape, &store, inp, true);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).params(&tape);
        // Gradient reaches the input but not the frozen weights.
        assert!(grads.contains_key(&999));
        assert!(!grads.contains_key(&lin.w.0));
    }
}
