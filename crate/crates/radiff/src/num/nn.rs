use std::cell::RefCell;
use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;

use super::tape::{Tape, Tx};
use super::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Named parameter store. Iteration order is the name order, which keeps
/// every consumer (optimizer, checkpoints, checksums) deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Order-sensitive digest of all parameter bytes, for frozen-model and
    /// determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.map {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &t.data {
                for b in v.to_le_bits_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn absorb(&mut self, prefix: &str, other: Params) {
        for (name, t) in other.map {
            self.insert(format!("{prefix}.{name}"), t);
        }
    }
}

trait ToLeBytes {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}

impl ToLeBytes for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

/// Forward-pass context tying a parameter store to a fresh tape. Leaves are
/// created lazily and cached so the same parameter maps to one tape node.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a Params,
    leaves: RefCell<HashMap<String, Tx>>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a Params) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Parameter leaf with gradient tracking.
    pub fn p(&self, name: &str) -> Tx {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let leaf = self.tape.leaf(self.params.get(name));
        self.leaves.borrow_mut().insert(name.to_string(), leaf.clone());
        leaf
    }

    pub fn constant(&self, t: &Tensor) -> Tx {
        self.tape.constant(t)
    }

    pub fn param_store(&self) -> &Params {
        self.params
    }

    /// Backward from `loss` and collect gradients per parameter name.
    /// Parameters that do not influence the loss get no entry.
    pub fn grads(&self, loss: &Tx) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, leaf) in self.leaves.borrow().iter() {
            if let Some(g) = grads.get(leaf) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Xavier-style uniform-fanin Gaussian init for a linear layer.
pub fn linear_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, d_in: usize, d_out: usize) {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    params.insert(format!("{prefix}.w"), Tensor::randn(rng, &[d_in, d_out], std));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d_out]));
}

pub fn linear(ctx: &Ctx, prefix: &str, x: &Tx) -> Tx {
    x.matmul(&ctx.p(&format!("{prefix}.w")))
        .add_row(&ctx.p(&format!("{prefix}.b")))
}

/// MLP with GELU between layers; `dims` includes input and output widths.
pub fn mlp_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, dims: &[usize]) {
    assert!(dims.len() >= 2, "mlp needs at least input and output dims");
    for i in 0..dims.len() - 1 {
        linear_init(params, rng, &format!("{prefix}.l{i}"), dims[i], dims[i + 1]);
    }
}

pub fn mlp(ctx: &Ctx, prefix: &str, n_layers: usize, x: &Tx) -> Tx {
    let mut h = x.clone();
    for i in 0..n_layers {
        h = linear(ctx, &format!("{prefix}.l{i}"), &h);
        if i + 1 < n_layers {
            h = h.gelu();
        }
    }
    h
}

pub fn layer_norm_init(params: &mut Params, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.g"), Tensor::full(&[1, dim], 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, dim]));
}

pub fn layer_norm(ctx: &Ctx, prefix: &str, x: &Tx) -> Tx {
    x.layer_norm_rows(LN_EPS)
        .mul_row(&ctx.p(&format!("{prefix}.g")))
        .add_row(&ctx.p(&format!("{prefix}.b")))
}

pub fn embedding_init<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    prefix: &str,
    n_rows: usize,
    dim: usize,
) {
    params.insert(format!("{prefix}.table"), Tensor::randn(rng, &[n_rows, dim], 0.02));
}

pub fn embedding_lookup(ctx: &Ctx, prefix: &str, ids: &[usize]) -> Tx {
    ctx.p(&format!("{prefix}.table")).gather_rows(ids)
}

pub struct AttentionInit {
    pub width: usize,
    pub kv_width: usize,
    pub heads: usize,
}

/// Multi-head scaled-dot-product attention with output projection.
pub fn attention_init<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, cfg: &AttentionInit) {
    assert!(
        cfg.width % cfg.heads == 0,
        "attention width {} not divisible by {} heads",
        cfg.width,
        cfg.heads
    );
    linear_init(params, rng, &format!("{prefix}.q"), cfg.width, cfg.width);
    linear_init(params, rng, &format!("{prefix}.k"), cfg.kv_width, cfg.width);
    linear_init(params, rng, &format!("{prefix}.v"), cfg.kv_width, cfg.width);
    linear_init(params, rng, &format!("{prefix}.o"), cfg.width, cfg.width);
}

/// Queries Mxw attend over keys/values Kxkvw. Self-attention is the case
/// where both arguments are the same tokens.
pub fn attention(ctx: &Ctx, prefix: &str, queries: &Tx, keys_values: &Tx, heads: usize) -> Tx {
    let w = ctx.params.get(&format!("{prefix}.q.w")).cols();
    assert!(w % heads == 0, "attention width {w} not divisible by {heads} heads");
    let dh = w / heads;
    let q = linear(ctx, &format!("{prefix}.q"), queries);
    let k = linear(ctx, &format!("{prefix}.k"), keys_values);
    let v = linear(ctx, &format!("{prefix}.v"), keys_values);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out: Option<Tx> = None;
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(s, e);
        let kh = k.slice_cols(s, e);
        let vh = v.slice_cols(s, e);
        let weights = qh.matmul(&kh.t()).scale(scale).softmax_rows();
        let oh = weights.matmul(&vh);
        out = Some(match out {
            Some(acc) => acc.concat_cols(&oh),
            None => oh,
        });
    }
    linear(ctx, &format!("{prefix}.o"), &out.unwrap())
}

/// Per-head attention weights (rows sum to one), exposed for tests.
pub fn attention_weights(ctx: &Ctx, prefix: &str, queries: &Tx, keys_values: &Tx, heads: usize) -> Vec<Tx> {
    let w = ctx.params.get(&format!("{prefix}.q.w")).cols();
    let dh = w / heads;
    let q = linear(ctx, &format!("{prefix}.q"), queries);
    let k = linear(ctx, &format!("{prefix}.k"), keys_values);
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let (s, e) = (h * dh, (h + 1) * dh);
            q.slice_cols(s, e)
                .matmul(&k.slice_cols(s, e).t())
                .scale(scale)
                .softmax_rows()
        })
        .collect()
}
