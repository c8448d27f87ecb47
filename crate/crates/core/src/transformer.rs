//! Transformer building blocks on the [`crate::numcore`] graph.
//!
//! Batches are laid out as `[batch * block_len x hidden]`: the rows of each
//! sentence are contiguous, every sentence in a batch is padded to the same
//! `block_len`, and attention slices the row blocks apart internally.
//! Position-wise ops (projections, norms, FFN, logits) run on the flat
//! matrix.

use crate::error::{Error, Result};
use crate::numcore::{derive_seed, seeded_rng, Element, Graph, ParamStore, Var};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Additive mask value for disallowed attention edges. Large enough to zero
/// the softmax weight in f32 without producing non-finite scores.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
    pub max_positions: usize,
    pub position_mode: PositionMode,
    pub prenorm: bool,
    pub activation: Activation,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_dim and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Per-sentence list of every encoder layer's output, `[len x hidden]` each.
#[derive(Debug, Clone)]
pub struct ContextStack<E: Element> {
    pub layers: Vec<Array2<E>>,
}

impl<E: Element> ContextStack<E> {
    pub fn new(layers: Vec<Array2<E>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Data("context stack needs at least one layer".into()));
        };
        let dim = first.dim();
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(Error::shape(
                    "context_stack",
                    format!("layer {i} is {:?}, expected {:?}", l.dim(), dim),
                ));
            }
            if l.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in stack layer {i}")));
            }
        }
        Ok(ContextStack { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].ncols()
    }
}

/// Parameters bound into one graph as leaf nodes, keyed by name.
pub struct BoundParams {
    map: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Train(format!("parameter {name} not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Bind every parameter of the store into the graph. Frozen parameters come
/// in as constants, so gradients stop at them.
pub fn bind_params<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>) -> BoundParams {
    let mut map = HashMap::new();
    for p in store.iter() {
        let var = g.leaf(p.value.clone(), !p.frozen);
        map.insert(p.name.clone(), var);
    }
    BoundParams { map }
}

/// Pull gradients of all bound parameters back into the store.
pub fn harvest_grads<E: Element>(
    g: &Graph<E>,
    bound: &BoundParams,
    store: &mut ParamStore<E>,
) -> Result<()> {
    for (name, var) in &bound.map {
        if let Some(grad) = g.grad(*var) {
            store.accumulate_grad(name, grad)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

fn fill_normal<E: Element>(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<E> {
    let mut rng = seeded_rng(seed);
    let dist = Normal::new(0.0, std).expect("std is finite");
    Array2::from_shape_fn((rows, cols), |_| E::of_f64(dist.sample(&mut rng)))
}

pub fn init_linear_std<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    seed: u64,
) {
    let name_w = format!("{prefix}.{w}");
    store.insert(
        name_w.clone(),
        fill_normal(fan_in, fan_out, std, derive_seed(seed, &name_w)),
    );
    store.insert(format!("{prefix}.{b}"), Array2::zeros((1, fan_out)));
}

pub fn init_linear<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    init_linear_std(store, prefix, w, b, fan_in, fan_out, std, seed);
}

/// Vocabulary projections start near-uniform so the first loss sits at the
/// ln V baseline.
pub fn init_output_head<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    fan_in: usize,
    vocab_size: usize,
    seed: u64,
) {
    init_linear_std(store, prefix, "w", "b", fan_in, vocab_size, 0.02, seed);
}

pub fn init_layer_norm<E: Element>(store: &mut ParamStore<E>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Array2::from_elem((1, dim), E::one()));
    store.insert(format!("{prefix}.b"), Array2::zeros((1, dim)));
}

pub fn init_embedding<E: Element>(
    store: &mut ParamStore<E>,
    name: &str,
    rows: usize,
    dim: usize,
    seed: u64,
) {
    let std = 1.0 / (dim as f64).sqrt();
    store.insert(name, fill_normal(rows, dim, std, derive_seed(seed, name)));
}

fn init_attention<E: Element>(store: &mut ParamStore<E>, prefix: &str, d: usize, seed: u64) {
    for proj in ["wq", "wk", "wv", "wo"] {
        let b = format!("b{}", &proj[1..]);
        init_linear(store, prefix, proj, &b, d, d, seed);
    }
}

/// Create all parameters of an encoder stack under `prefix`.
pub fn init_encoder_stack<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &TransformerConfig,
    prefix: &str,
    seed: u64,
) {
    let d = cfg.hidden_dim;
    for l in 0..cfg.num_layers {
        let lp = format!("{prefix}.l{l}");
        init_attention(store, &format!("{lp}.self"), d, seed);
        init_layer_norm(store, &format!("{lp}.ln1"), d);
        init_linear(store, &format!("{lp}.ffn"), "w1", "b1", d, cfg.ffn_dim, seed);
        init_linear(store, &format!("{lp}.ffn"), "w2", "b2", cfg.ffn_dim, d, seed);
        init_layer_norm(store, &format!("{lp}.ln2"), d);
    }
    if cfg.prenorm {
        init_layer_norm(store, &format!("{prefix}.final_ln"), d);
    }
}

/// Create all parameters of a decoder stack under `prefix`.
pub fn init_decoder_stack<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &TransformerConfig,
    prefix: &str,
    seed: u64,
) {
    let d = cfg.hidden_dim;
    for l in 0..cfg.num_layers {
        let lp = format!("{prefix}.l{l}");
        init_attention(store, &format!("{lp}.self"), d, seed);
        init_layer_norm(store, &format!("{lp}.ln1"), d);
        init_attention(store, &format!("{lp}.cross"), d, seed);
        init_layer_norm(store, &format!("{lp}.ln2"), d);
        init_linear(store, &format!("{lp}.ffn"), "w1", "b1", d, cfg.ffn_dim, seed);
        init_linear(store, &format!("{lp}.ffn"), "w2", "b2", cfg.ffn_dim, d, seed);
        init_layer_norm(store, &format!("{lp}.ln3"), d);
    }
    if cfg.prenorm {
        init_layer_norm(store, &format!("{prefix}.final_ln"), d);
    }
}

// ---------------------------------------------------------------------------
// masks and positions
// ---------------------------------------------------------------------------

/// `[len x len]` additive mask hiding PAD keys: column j gets `MASK_NEG` when
/// `key_is_pad[j]`.
pub fn padding_mask<E: Element>(key_is_pad: &[bool]) -> Array2<E> {
    let len = key_is_pad.len();
    let neg = E::of_f64(MASK_NEG);
    Array2::from_shape_fn((len, len), |(_, j)| if key_is_pad[j] { neg } else { E::zero() })
}

/// Upper-triangular causal mask: position i may attend to keys 0..=i.
pub fn causal_mask<E: Element>(len: usize) -> Array2<E> {
    let neg = E::of_f64(MASK_NEG);
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { neg } else { E::zero() })
}

/// Causal mask combined with PAD-key hiding.
pub fn causal_padding_mask<E: Element>(key_is_pad: &[bool]) -> Array2<E> {
    let len = key_is_pad.len();
    let neg = E::of_f64(MASK_NEG);
    Array2::from_shape_fn((len, len), |(i, j)| {
        if j > i || key_is_pad[j] {
            neg
        } else {
            E::zero()
        }
    })
}

/// `[rows_q x rows_k]` mask hiding PAD keys of a cross-attention target.
pub fn cross_padding_mask<E: Element>(rows_q: usize, key_is_pad: &[bool]) -> Array2<E> {
    let neg = E::of_f64(MASK_NEG);
    Array2::from_shape_fn((rows_q, key_is_pad.len()), |(_, j)| {
        if key_is_pad[j] {
            neg
        } else {
            E::zero()
        }
    })
}

/// Fixed sinusoidal position table, `[len x dim]`.
pub fn sinusoidal_positions<E: Element>(len: usize, dim: usize) -> Array2<E> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let angle = pos as f64 / 10_000f64.powf(exponent);
        if i % 2 == 0 {
            E::of_f64(angle.sin())
        } else {
            E::of_f64(angle.cos())
        }
    })
}

/// Position rows for a batch of `blocks` sentences of `block_len` each,
/// `[blocks*block_len x dim]`. Learned mode reads `{prefix}.embed.pos` rows
/// verbatim; sinusoidal mode is a constant.
pub fn position_rows<E: Element>(
    g: &mut Graph<E>,
    params: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    block_len: usize,
    blocks: usize,
) -> Result<Var> {
    if block_len > cfg.max_positions {
        return Err(Error::Data(format!(
            "sequence length {block_len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    match cfg.position_mode {
        PositionMode::Learned => {
            let table = params.get(&format!("{prefix}.embed.pos"))?;
            let ids: Vec<usize> = (0..blocks).flat_map(|_| 0..block_len).collect();
            g.embedding_lookup(table, &ids)
        }
        PositionMode::Sinusoidal => {
            let one = sinusoidal_positions::<E>(block_len, cfg.hidden_dim);
            let mut tiled = Array2::zeros((blocks * block_len, cfg.hidden_dim));
            for b in 0..blocks {
                for i in 0..block_len {
                    tiled.row_mut(b * block_len + i).assign(&one.row(i));
                }
            }
            Ok(g.constant(tiled))
        }
    }
}

// ---------------------------------------------------------------------------
// attention and stacks
// ---------------------------------------------------------------------------

fn linear<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    prefix: &str,
    w: &str,
    b: &str,
    x: Var,
) -> Result<Var> {
    let wv = p.get(&format!("{prefix}.{w}"))?;
    let bv = p.get(&format!("{prefix}.{b}"))?;
    let xw = g.matmul(x, wv)?;
    g.add(xw, bv)
}

fn layer_norm_affine<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    let normed = g.layer_norm_rows(x);
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

/// Scaled dot-product multi-head attention over contiguous row blocks.
///
/// `queries` is `[blocks*len_q x d]`, `keys`/`values` are
/// `[blocks*len_k x d]`, and `masks[b]` is the `[len_q x len_k]` additive
/// mask of block b.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    num_heads: usize,
    len_q: usize,
    len_k: usize,
    masks: &[Array2<E>],
    dropout_p: f64,
) -> Result<Var> {
    let (rows_q, d) = g.shape(queries);
    let (rows_k, dk) = g.shape(keys);
    if d != dk || g.shape(values) != (rows_k, d) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q [{rows_q} x {d}], k [{rows_k} x {dk}], v {:?}", g.shape(values)),
        ));
    }
    if rows_q % len_q != 0 || rows_k % len_k != 0 || rows_q / len_q != rows_k / len_k {
        return Err(Error::shape(
            "multi_head_attention",
            format!("rows {rows_q}/{rows_k} not divisible into blocks of {len_q}/{len_k}"),
        ));
    }
    let blocks = rows_q / len_q;
    if masks.len() != blocks {
        return Err(Error::shape(
            "multi_head_attention",
            format!("{} masks for {blocks} blocks", masks.len()),
        ));
    }
    for (b, m) in masks.iter().enumerate() {
        if m.dim() != (len_q, len_k) {
            return Err(Error::shape(
                "multi_head_attention",
                format!("mask {b} is {:?}, expected [{len_q} x {len_k}]", m.dim()),
            ));
        }
    }
    let dh = d / num_heads;
    let scale = E::of_f64(1.0 / (dh as f64).sqrt());

    let q = linear(g, p, prefix, "wq", "bq", queries)?;
    let k = linear(g, p, prefix, "wk", "bk", keys)?;
    let v = linear(g, p, prefix, "wv", "bv", values)?;

    let mut block_outputs = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mask = g.constant(masks[b].clone());
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qb = g.block(q, b * len_q, (b + 1) * len_q, c0, c1)?;
            let kb = g.block(k, b * len_k, (b + 1) * len_k, c0, c1)?;
            let vb = g.block(v, b * len_k, (b + 1) * len_k, c0, c1)?;
            let kt = g.transpose(kb);
            let raw = g.matmul(qb, kt)?;
            let scaled = g.scale(raw, scale);
            let masked = g.add(scaled, mask)?;
            let weights = g.softmax_rows(masked);
            let weights = g.dropout(weights, dropout_p)?;
            heads.push(g.matmul(weights, vb)?);
        }
        block_outputs.push(g.concat_cols(&heads)?);
    }
    let merged = g.concat_rows(&block_outputs)?;
    linear(g, p, prefix, "wo", "bo", merged)
}

fn activation<E: Element>(g: &mut Graph<E>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

fn feed_forward<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear(g, p, prefix, "w1", "b1", x)?;
    let h = activation(g, cfg.activation, h);
    linear(g, p, prefix, "w2", "b2", h)
}

#[allow(clippy::too_many_arguments)]
fn encoder_layer<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    cfg: &TransformerConfig,
    lp: &str,
    x: Var,
    len: usize,
    masks: &[Array2<E>],
) -> Result<Var> {
    let self_prefix = format!("{lp}.self");
    let ffn_prefix = format!("{lp}.ffn");
    if cfg.prenorm {
        let normed = layer_norm_affine(g, p, &format!("{lp}.ln1"), x)?;
        let a = multi_head_attention(
            g, p, &self_prefix, normed, normed, normed, cfg.num_heads, len, len, masks,
            cfg.dropout_p,
        )?;
        let a = g.dropout(a, cfg.dropout_p)?;
        let x = g.add(a, x)?;
        let normed = layer_norm_affine(g, p, &format!("{lp}.ln2"), x)?;
        let f = feed_forward(g, p, cfg, &ffn_prefix, normed)?;
        let f = g.dropout(f, cfg.dropout_p)?;
        g.add(f, x)
    } else {
        let a = multi_head_attention(
            g, p, &self_prefix, x, x, x, cfg.num_heads, len, len, masks, cfg.dropout_p,
        )?;
        let a = g.dropout(a, cfg.dropout_p)?;
        let sum = g.add(a, x)?;
        let x = layer_norm_affine(g, p, &format!("{lp}.ln1"), sum)?;
        let f = feed_forward(g, p, cfg, &ffn_prefix, x)?;
        let f = g.dropout(f, cfg.dropout_p)?;
        let sum = g.add(f, x)?;
        layer_norm_affine(g, p, &format!("{lp}.ln2"), sum)
    }
}

/// Run the encoder stack, returning every layer's output (layer i's output
/// is layer i+1's input). In prenorm mode the last entry additionally passes
/// the final layer norm.
pub fn encoder_forward<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    input: Var,
    block_len: usize,
    masks: &[Array2<E>],
) -> Result<Vec<Var>> {
    cfg.validate()?;
    if block_len > cfg.max_positions {
        return Err(Error::Data(format!(
            "sequence length {block_len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let mut x = input;
    let mut outputs = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        x = encoder_layer(g, p, cfg, &format!("{prefix}.l{l}"), x, block_len, masks)?;
        outputs.push(x);
    }
    if cfg.prenorm {
        let last = layer_norm_affine(g, p, &format!("{prefix}.final_ln"), x)?;
        *outputs.last_mut().expect("num_layers >= 1") = last;
    }
    Ok(outputs)
}

/// Run the causal decoder stack over an embedded target prefix and the
/// encoder output; returns the final hidden states (no output projection).
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<E: Element>(
    g: &mut Graph<E>,
    p: &BoundParams,
    cfg: &TransformerConfig,
    prefix: &str,
    target_input: Var,
    len_t: usize,
    self_masks: &[Array2<E>],
    encoder_out: Var,
    len_s: usize,
    cross_masks: &[Array2<E>],
) -> Result<Var> {
    cfg.validate()?;
    if len_t > cfg.max_positions {
        return Err(Error::Data(format!(
            "target length {len_t} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let mut x = target_input;
    for l in 0..cfg.num_layers {
        let lp = format!("{prefix}.l{l}");
        if cfg.prenorm {
            let normed = layer_norm_affine(g, p, &format!("{lp}.ln1"), x)?;
            let a = multi_head_attention(
                g, p, &format!("{lp}.self"), normed, normed, normed, cfg.num_heads, len_t,
                len_t, self_masks, cfg.dropout_p,
            )?;
            let a = g.dropout(a, cfg.dropout_p)?;
            x = g.add(a, x)?;
            let normed = layer_norm_affine(g, p, &format!("{lp}.ln2"), x)?;
            let c = multi_head_attention(
                g, p, &format!("{lp}.cross"), normed, encoder_out, encoder_out, cfg.num_heads,
                len_t, len_s, cross_masks, cfg.dropout_p,
            )?;
            let c = g.dropout(c, cfg.dropout_p)?;
            x = g.add(c, x)?;
            let normed = layer_norm_affine(g, p, &format!("{lp}.ln3"), x)?;
            let f = feed_forward(g, p, cfg, &format!("{lp}.ffn"), normed)?;
            let f = g.dropout(f, cfg.dropout_p)?;
            x = g.add(f, x)?;
        } else {
            let a = multi_head_attention(
                g, p, &format!("{lp}.self"), x, x, x, cfg.num_heads, len_t, len_t, self_masks,
                cfg.dropout_p,
            )?;
            let a = g.dropout(a, cfg.dropout_p)?;
            let sum = g.add(a, x)?;
            x = layer_norm_affine(g, p, &format!("{lp}.ln1"), sum)?;
            let c = multi_head_attention(
                g, p, &format!("{lp}.cross"), x, encoder_out, encoder_out, cfg.num_heads,
                len_t, len_s, cross_masks, cfg.dropout_p,
            )?;
            let c = g.dropout(c, cfg.dropout_p)?;
            let sum = g.add(c, x)?;
            x = layer_norm_affine(g, p, &format!("{lp}.ln2"), sum)?;
            let f = feed_forward(g, p, cfg, &format!("{lp}.ffn"), x)?;
            let f = g.dropout(f, cfg.dropout_p)?;
            let sum = g.add(f, x)?;
            x = layer_norm_affine(g, p, &format!("{lp}.ln3"), sum)?;
        }
    }
    if cfg.prenorm {
        x = layer_norm_affine(g, p, &format!("{prefix}.final_ln"), x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use ndarray::array;

    fn tiny_cfg(layers: usize, d: usize, heads: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: layers,
            hidden_dim: d,
            ffn_dim: 2 * d,
            num_heads: heads,
            dropout_p: 0.0,
            max_positions: 32,
            position_mode: PositionMode::Sinusoidal,
            prenorm: false,
            activation: Activation::Relu,
        }
    }

    fn identity_attention_store(d: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("attn.{w}"), Array2::from_diag_elem(d, 1.0));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.insert(format!("attn.{b}"), Array2::zeros((1, d)));
        }
        store
    }

    #[test]
    fn single_key_attention_returns_the_value_row() {
        let d = 4;
        let store = identity_attention_store(d);
        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        let q = g.constant(array![[0.3, -1.0, 2.0, 0.7]]);
        let kv = g.constant(array![[1.0, 2.0, 3.0, 4.0]]);
        let mask = Array2::zeros((1, 1));
        let out = multi_head_attention(&mut g, &p, "attn", q, kv, kv, 1, 1, 1, &[mask], 0.0)
            .unwrap();
        for (a, b) in g.value(out).iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        // Changing the value at a masked key must not change the output.
        let d = 2;
        let store = identity_attention_store(d);
        let run = |second_value: f64| {
            let mut g: Graph<f64> = Graph::new();
            let p = bind_params(&mut g, &store);
            let q = g.constant(array![[1.0, 0.0]]);
            let kv = g.constant(array![[0.5, 0.5], [second_value, second_value]]);
            let mut mask = Array2::zeros((1, 2));
            mask[[0, 1]] = MASK_NEG;
            let out =
                multi_head_attention(&mut g, &p, "attn", q, kv, kv, 1, 1, 2, &[mask], 0.0)
                    .unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(7.0), run(-3.0));
    }

    #[test]
    fn two_by_two_attention_matches_hand_arithmetic() {
        // Plain ndarray re-computation as the oracle, identity projections.
        let d = 2;
        let store = identity_attention_store(d);
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let kv = array![[1.0, 2.0], [3.0, -1.0]];

        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        let qv = g.constant(q.clone());
        let kvv = g.constant(kv.clone());
        let mask = Array2::zeros((2, 2));
        let out = multi_head_attention(&mut g, &p, "attn", qv, kvv, kvv, 1, 2, 2, &[mask], 0.0)
            .unwrap();

        let scale = 1.0 / (d as f64).sqrt();
        let scores = q.dot(&kv.t()) * scale;
        let mut expected: Array2<f64> = Array2::zeros((2, 2));
        for i in 0..2 {
            let row = scores.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..2 {
                for c in 0..2 {
                    expected[[i, c]] += exps[j] / z * kv[[j, c]];
                }
            }
        }
        for (a, b) in g.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sinusoidal_position_zero_alternates_zero_one() {
        let pos = sinusoidal_positions::<f64>(3, 6);
        for i in 0..6 {
            let want = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pos[[0, i]], want);
        }
    }

    #[test]
    fn sinusoidal_positions_are_reproducible() {
        assert_eq!(sinusoidal_positions::<f64>(5, 8), sinusoidal_positions::<f64>(5, 8));
    }

    #[test]
    fn learned_positions_return_table_rows_verbatim() {
        let mut cfg = tiny_cfg(1, 4, 1);
        cfg.position_mode = PositionMode::Learned;
        let mut store: ParamStore<f64> = ParamStore::new();
        init_embedding(&mut store, "lm.embed.pos", cfg.max_positions, 4, 3);
        let table = store.get("lm.embed.pos").unwrap().value.clone();
        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        let rows = position_rows(&mut g, &p, &cfg, "lm", 3, 2).unwrap();
        let v = g.value(rows);
        assert_eq!(v.nrows(), 6);
        for b in 0..2 {
            for i in 0..3 {
                for c in 0..4 {
                    assert_eq!(v[[b * 3 + i, c]], table[[i, c]]);
                }
            }
        }
    }

    #[test]
    fn position_rows_reject_overflow() {
        let cfg = tiny_cfg(1, 4, 1);
        let store: ParamStore<f64> = ParamStore::new();
        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        assert!(position_rows(&mut g, &p, &cfg, "x", cfg.max_positions + 1, 1).is_err());
    }

    #[test]
    fn config_rejects_zero_layers_and_bad_heads() {
        let mut cfg = tiny_cfg(1, 8, 2);
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(1, 8, 2);
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    fn encoder_fixture(layers: usize, d: usize) -> (TransformerConfig, ParamStore<f64>) {
        let cfg = tiny_cfg(layers, d, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_encoder_stack(&mut store, &cfg, "enc", 42);
        (cfg, store)
    }

    #[test]
    fn encoder_returns_one_output_per_layer() {
        let (cfg, store) = encoder_fixture(3, 8);
        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        let x = g.constant(Array2::from_elem((5, 8), 0.1));
        let masks = [Array2::zeros((5, 5))];
        let outs = encoder_forward(&mut g, &p, &cfg, "enc", x, 5, &masks).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(g.shape(*o), (5, 8));
        }
    }

    #[test]
    fn pad_positions_do_not_influence_others() {
        let (cfg, store) = encoder_fixture(2, 8);
        let run = |pad_embedding: f64| {
            let mut g: Graph<f64> = Graph::new();
            let p = bind_params(&mut g, &store);
            let mut input = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64).sin());
            input.row_mut(3).fill(pad_embedding); // position 3 is PAD
            let x = g.constant(input);
            let masks = [padding_mask::<f64>(&[false, false, false, true])];
            let outs = encoder_forward(&mut g, &p, &cfg, "enc", x, 4, &masks).unwrap();
            g.value(*outs.last().unwrap()).clone()
        };
        let a = run(0.0);
        let b = run(123.0);
        for i in 0..3 {
            for j in 0..8 {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-9, "row {i} changed");
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let d = 8;
        let cfg = tiny_cfg(2, d, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_decoder_stack(&mut store, &cfg, "dec", 7);
        let enc_out = Array2::from_shape_fn((3, d), |(i, j)| ((i + j) as f64).cos());
        let run = |tail: f64| {
            let mut g: Graph<f64> = Graph::new();
            let p = bind_params(&mut g, &store);
            let mut tgt = Array2::from_shape_fn((4, d), |(i, j)| ((2 * i + j) as f64).sin());
            tgt.row_mut(3).fill(tail); // change the last target position only
            let t = g.constant(tgt);
            let e = g.constant(enc_out.clone());
            let self_masks = [causal_mask::<f64>(4)];
            let cross_masks = [Array2::zeros((4, 3))];
            let out = decoder_forward(
                &mut g, &p, &cfg, "dec", t, 4, &self_masks, e, 3, &cross_masks,
            )
            .unwrap();
            g.value(out).clone()
        };
        let a = run(0.5);
        let b = run(-4.0);
        for i in 0..3 {
            for j in 0..d {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-9, "position {i} leaked");
            }
        }
        assert!((0..d).any(|j| (a[[3, j]] - b[[3, j]]).abs() > 1e-9));
    }

    #[test]
    fn bos_only_prefix_gives_one_row() {
        let d = 8;
        let cfg = tiny_cfg(1, d, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_decoder_stack(&mut store, &cfg, "dec", 9);
        let mut g: Graph<f64> = Graph::new();
        let p = bind_params(&mut g, &store);
        let t = g.constant(Array2::from_elem((1, d), 0.2));
        let e = g.constant(Array2::from_elem((2, d), 0.1));
        let out = decoder_forward(
            &mut g,
            &p,
            &cfg,
            "dec",
            t,
            1,
            &[causal_mask::<f64>(1)],
            e,
            2,
            &[Array2::zeros((1, 2))],
        )
        .unwrap();
        assert_eq!(g.shape(out), (1, d));
    }

    #[test]
    fn encoder_stack_passes_grad_check() {
        let (cfg, store) = encoder_fixture(2, 8);
        let weights = Array2::from_shape_fn((6, 8), |(i, j)| ((i * 3 + j) as f64).sin());
        let masks = [padding_mask::<f64>(&[false, false, true])];
        let x0 = Array2::from_shape_fn((6, 8), |(i, j)| 0.3 * ((i * 7 + j) as f64).cos());
        let err = grad_check(
            |g, x| {
                let p = bind_params(g, &store);
                let outs = encoder_forward(g, &p, &cfg, "enc", x, 3, &[masks[0].clone(), masks[0].clone()])?;
                let w = g.constant(weights.clone());
                let weighted = g.mul(*outs.last().unwrap(), w)?;
                Ok(g.sum(weighted))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "encoder grad err = {err}");
    }

    #[test]
    fn decoder_stack_passes_grad_check_including_params() {
        let d = 8;
        let cfg = tiny_cfg(1, d, 2);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_decoder_stack(&mut store, &cfg, "dec", 21);
        let enc_out = Array2::from_shape_fn((3, d), |(i, j)| ((i + 2 * j) as f64).sin() * 0.5);
        let tgt = Array2::from_shape_fn((4, d), |(i, j)| ((3 * i + j) as f64).cos() * 0.3);
        let weights = Array2::from_shape_fn((4, d), |(i, j)| ((i + j) as f64).sin());

        // gradient w.r.t. the target input
        let err_input = grad_check(
            |g, x| {
                let p = bind_params(g, &store);
                let e = g.constant(enc_out.clone());
                let out = decoder_forward(
                    g, &p, &cfg, "dec", x, 4,
                    &[causal_mask::<f64>(4)],
                    e, 3,
                    &[Array2::zeros((4, 3))],
                )?;
                let w = g.constant(weights.clone());
                let weighted = g.mul(out, w)?;
                Ok(g.sum(weighted))
            },
            &tgt,
            1e-5,
        )
        .unwrap();
        assert!(err_input <= 1e-4, "decoder input grad err = {err_input}");

        // gradient w.r.t. a cross-attention weight matrix
        let wk0 = store.get("dec.l0.cross.wk").unwrap().value.clone();
        let err_param = grad_check(
            |g, x| {
                let mut map = HashMap::new();
                for p in store.iter() {
                    let var = if p.name == "dec.l0.cross.wk" {
                        x
                    } else {
                        g.constant(p.value.clone())
                    };
                    map.insert(p.name.clone(), var);
                }
                let p = BoundParams { map };
                let t = g.constant(tgt.clone());
                let e = g.constant(enc_out.clone());
                let out = decoder_forward(
                    g, &p, &cfg, "dec", t, 4,
                    &[causal_mask::<f64>(4)],
                    e, 3,
                    &[Array2::zeros((4, 3))],
                )?;
                let w = g.constant(weights.clone());
                let weighted = g.mul(out, w)?;
                Ok(g.sum(weighted))
            },
            &wk0,
            1e-5,
        )
        .unwrap();
        assert!(err_param <= 1e-4, "decoder param grad err = {err_param}");
    }

    #[test]
    fn prenorm_encoder_runs_and_grad_checks() {
        let mut cfg = tiny_cfg(2, 8, 2);
        cfg.prenorm = true;
        let mut store: ParamStore<f64> = ParamStore::new();
        init_encoder_stack(&mut store, &cfg, "enc", 5);
        let x0 = Array2::from_shape_fn((3, 8), |(i, j)| 0.2 * ((i * 5 + j) as f64).sin());
        let err = grad_check(
            |g, x| {
                let p = bind_params(g, &store);
                let outs = encoder_forward(g, &p, &cfg, "enc", x, 3, &[Array2::zeros((3, 3))])?;
                let sq = g.mul(*outs.last().unwrap(), *outs.last().unwrap())?;
                Ok(g.sum(sq))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "prenorm grad err = {err}");
    }
}
