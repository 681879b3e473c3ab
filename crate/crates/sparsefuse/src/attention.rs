//! Exact numeric kernels for grouped windowed attention and the
//! transformer micro-structure: PreNorm/PostNorm residual blocks, SwiGLU,
//! sinusoidal positional encodings, and attentive z pooling.
//!
//! Softmax, norm, and reduction accumulations run in f64 regardless of
//! the f32 feature storage; per-group results are written to disjoint
//! output slots so parallel execution is bit-deterministic.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::partition::{PartitionPlan, WindowKey};
use crate::token::TokenSet;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormStyle {
    #[default]
    PreNorm,
    PostNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PeStyle {
    /// Per-axis sinusoids over metric world coordinates.
    #[default]
    Pe3d,
    /// Sinusoids over the local coordinates within the current window only.
    WindowLocal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    #[serde(default)]
    pub norm_style: NormStyle,
    #[serde(default)]
    pub pe_style: PeStyle,
    pub seed: u64,
    /// Metric scale of the slowest positional band (one cycle per
    /// `pe_scale` units); defaults to the scene extent.
    #[serde(default = "default_pe_scale")]
    pub pe_scale: f64,
    /// When set, PE is re-added before every layer instead of once per stage.
    #[serde(default)]
    pub pe_per_layer: bool,
}

fn default_pe_scale() -> f64 {
    108.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 8,
            ffn_hidden: 128,
            norm_style: NormStyle::PreNorm,
            pe_style: PeStyle::Pe3d,
            seed: 0,
            pe_scale: default_pe_scale(),
            pe_per_layer: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Per-layer projection and norm parameters, all row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
    pub norm1_gain: Vec<f32>,
    pub norm1_bias: Vec<f32>,
    pub norm2_gain: Vec<f32>,
    pub norm2_bias: Vec<f32>,
}

/// Seeded uniform(−1/√fan_in, +1/√fan_in) matrix; deterministic per seed.
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| (rng.gen_range(-bound..bound)) as f32)
        .collect()
}

/// Seeded vector with the same distribution as [`seeded_matrix`] rows.
pub fn seeded_vector(len: usize, seed: u64) -> Vec<f32> {
    seeded_matrix(1, len, seed)
}

impl LayerWeights {
    /// Deterministic initialization; distinct sub-seeds per matrix.
    pub fn init(cfg: &ModelConfig, seed: u64) -> LayerWeights {
        let (d, h) = (cfg.dim, cfg.ffn_hidden);
        let sub = |tag: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag);
        LayerWeights {
            wq: seeded_matrix(d, d, sub(1)),
            wk: seeded_matrix(d, d, sub(2)),
            wv: seeded_matrix(d, d, sub(3)),
            wo: seeded_matrix(d, d, sub(4)),
            w_gate: seeded_matrix(h, d, sub(5)),
            w_up: seeded_matrix(h, d, sub(6)),
            w_down: seeded_matrix(d, h, sub(7)),
            norm1_gain: vec![1.0; d],
            norm1_bias: vec![0.0; d],
            norm2_gain: vec![1.0; d],
            norm2_bias: vec![0.0; d],
        }
    }

    /// Zeroes the attention and FFN output projections. Under PreNorm this
    /// turns the layer into an exact identity.
    pub fn zero_output_projections(&mut self) {
        self.wo.iter_mut().for_each(|w| *w = 0.0);
        self.w_down.iter_mut().for_each(|w| *w = 0.0);
    }
}

/// Dot product of f32 products accumulated in f64, eight lanes wide so
/// the convert-and-add chain vectorizes.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() - a.len() % 8;
    let mut acc = [0.0f64; 8];
    for (xa, xb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += (xa[l] * xb[l]) as f64;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += (x * y) as f64;
    }
    let folded = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    folded + tail
}

/// `out = W·x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot_f64(&w[r * cols..(r + 1) * cols], x) as f32;
    }
}

/// LayerNorm with f64 mean/variance accumulation.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f64;
    let mut mean = 0.0f64;
    for &v in x {
        mean += v as f64;
    }
    mean /= n;
    let mut var = 0.0f64;
    for &v in x {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (((x[i] as f64 - mean) * inv) * gain[i] as f64 + bias[i] as f64) as f32;
    }
}

fn silu(t: f64) -> f64 {
    t / (1.0 + (-t).exp())
}

/// exp(x) for x ≤ 0, branch-free polynomial form (round-to-nearest power
/// split plus a degree-13 Taylor kernel). Agrees with libm to ~1 ulp over
/// the softmax range; inputs below -700 flush to zero.
pub fn exp_neg(x: f64) -> f64 {
    debug_assert!(x <= 0.0);
    if x < -700.0 {
        return 0.0;
    }
    const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_2e-10;
    const INV_LN2: f64 = 1.442_695_040_888_963_387;
    let n = (x * INV_LN2).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor kernel, |r| <= ln2/2: error ~1e-16.
    let mut p = 1.0 / 6_227_020_800.0; // 1/13!
    for inv_fact in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        1.0 / 2.0,
        1.0,
        1.0,
    ] {
        p = p * r + inv_fact;
    }
    // 2^n via exponent bits; n is in [-1010, 0] after the cutoff.
    let scale = f64::from_bits(((1023 + n as i64) as u64) << 52);
    p * scale
}

/// Gated feed-forward: `W_down(silu(W_gate·x) ⊙ (W_up·x))`, no biases.
/// The hidden activations stay in f64; only the output rounds to storage.
pub fn swiglu_ffn(x: &[f32], w: &LayerWeights, cfg: &ModelConfig) -> Vec<f32> {
    let (d, h) = (cfg.dim, cfg.ffn_hidden);
    let mut hidden = vec![0.0f64; h];
    for (r, hv) in hidden.iter_mut().enumerate() {
        let gate = dot_f64(&w.w_gate[r * d..(r + 1) * d], x);
        let up = dot_f64(&w.w_up[r * d..(r + 1) * d], x);
        *hv = silu(gate) * up;
    }
    let mut out = vec![0.0f32; d];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w.w_down[r * h..(r + 1) * h];
        let split = h - h % 8;
        let mut acc = [0.0f64; 8];
        for (xa, xb) in row[..split].chunks_exact(8).zip(hidden[..split].chunks_exact(8)) {
            for l in 0..8 {
                acc[l] += xa[l] as f64 * xb[l];
            }
        }
        let mut tail = 0.0f64;
        for (x, y) in row[split..].iter().zip(&hidden[split..]) {
            tail += *x as f64 * *y;
        }
        *o = (((acc[0] + acc[1]) + (acc[2] + acc[3]))
            + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
            + tail) as f32;
    }
    out
}

struct GroupOutput {
    members: Vec<u32>,
    /// `members.len() × dim` attention output, already output-projected.
    out: Vec<f32>,
    /// Softmax row sums, one per (head, query) pair.
    row_sums: Vec<f64>,
}

/// Attention over one group's members (token ids into `features`).
/// Members are processed in ascending token order, which makes the result
/// independent of slot order inside the group.
fn attend_group(
    features: &[f32],
    dim: usize,
    members: &mut Vec<u32>,
    w: &LayerWeights,
    cfg: &ModelConfig,
) -> GroupOutput {
    members.sort_unstable();
    let k = members.len();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = vec![0.0f32; k * dim];
    let mut kk = vec![0.0f32; k * dim];
    let mut v = vec![0.0f32; k * dim];
    for (m, &t) in members.iter().enumerate() {
        let x = &features[t as usize * dim..(t as usize + 1) * dim];
        matvec(&w.wq, dim, dim, x, &mut q[m * dim..(m + 1) * dim]);
        matvec(&w.wk, dim, dim, x, &mut kk[m * dim..(m + 1) * dim]);
        matvec(&w.wv, dim, dim, x, &mut v[m * dim..(m + 1) * dim]);
    }

    let mut mixed = vec![0.0f32; k * dim];
    let mut row_sums = Vec::with_capacity(heads * k);
    let mut logits = vec![0.0f64; k];
    let mut acc = vec![0.0f64; dh];
    for h in 0..heads {
        let off = h * dh;
        for qi in 0..k {
            let qv = &q[qi * dim + off..qi * dim + off + dh];
            let mut max = f64::NEG_INFINITY;
            for kj in 0..k {
                let l = dot_f64(qv, &kk[kj * dim + off..kj * dim + off + dh]) * scale;
                logits[kj] = l;
                max = max.max(l);
            }
            let mut denom = 0.0f64;
            for l in logits[..k].iter_mut() {
                *l = exp_neg(*l - max);
                denom += *l;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut row_sum = 0.0f64;
            let split = dh - dh % 8;
            for kj in 0..k {
                let a = logits[kj] / denom;
                row_sum += a;
                let vj = &v[kj * dim + off..kj * dim + off + dh];
                for (av, vs) in acc[..split].chunks_exact_mut(8).zip(vj[..split].chunks_exact(8)) {
                    for l in 0..8 {
                        av[l] += a * vs[l] as f64;
                    }
                }
                for (av, vv) in acc[split..].iter_mut().zip(&vj[split..]) {
                    *av += a * *vv as f64;
                }
            }
            row_sums.push(row_sum);
            for d in 0..dh {
                mixed[qi * dim + off + d] = acc[d] as f32;
            }
        }
    }

    let mut out = vec![0.0f32; k * dim];
    for m in 0..k {
        matvec(&w.wo, dim, dim, &mixed[m * dim..(m + 1) * dim], &mut out[m * dim..(m + 1) * dim]);
    }
    GroupOutput { members: std::mem::take(members), out, row_sums }
}

/// Grouped windowed attention over a raw feature matrix: per group,
/// softmax(QKᵀ/√d_head)·V over valid members only, heads concatenated and
/// output-projected. Tokens in different groups never interact; padded
/// slots contribute nothing and receive nothing.
pub fn grouped_attention_features(
    features: &[f32],
    dim: usize,
    plan: &PartitionPlan,
    w: &LayerWeights,
    cfg: &ModelConfig,
) -> Vec<f32> {
    let groups: Vec<GroupOutput> = (0..plan.num_groups())
        .into_par_iter()
        .map(|g| {
            let mut members: Vec<u32> = plan.group_members(g).collect();
            attend_group(features, dim, &mut members, w, cfg)
        })
        .collect();

    let mut out = vec![0.0f32; features.len()];
    for g in groups {
        for (m, &t) in g.members.iter().enumerate() {
            out[t as usize * dim..(t as usize + 1) * dim]
                .copy_from_slice(&g.out[m * dim..(m + 1) * dim]);
        }
    }
    out
}

/// [`grouped_attention_features`] over a token set.
pub fn grouped_attention(
    tokens: &TokenSet,
    plan: &PartitionPlan,
    w: &LayerWeights,
    cfg: &ModelConfig,
) -> Vec<f32> {
    grouped_attention_features(&tokens.features, tokens.dim, plan, w, cfg)
}

/// Softmax row sums from the attention kernel, one entry per
/// (group, head, query); each must be 1 within accumulation error.
pub fn attention_row_sums(
    features: &[f32],
    dim: usize,
    plan: &PartitionPlan,
    w: &LayerWeights,
    cfg: &ModelConfig,
) -> Vec<f64> {
    (0..plan.num_groups())
        .into_par_iter()
        .flat_map_iter(|g| {
            let mut members: Vec<u32> = plan.group_members(g).collect();
            attend_group(features, dim, &mut members, w, cfg).row_sums
        })
        .collect()
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn ffn_pass(features: &mut [f32], input: &[f32], w: &LayerWeights, cfg: &ModelConfig) {
    let dim = cfg.dim;
    features
        .par_chunks_mut(dim)
        .zip(input.par_chunks(dim))
        .for_each(|(x, inp)| {
            let f = swiglu_ffn(inp, w, cfg);
            add_assign(x, &f);
        });
}

fn norm_all(features: &[f32], dim: usize, gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; features.len()];
    out.par_chunks_mut(dim)
        .zip(features.par_chunks(dim))
        .for_each(|(o, x)| layer_norm(x, gain, bias, o));
    out
}

/// One transformer layer over a raw feature matrix.
///
/// PreNorm: `x ← x + Attn(LN(x)); x ← x + FFN(LN(x))`.
/// PostNorm: `x ← LN(x + Attn(x)); x ← LN(x + FFN(x))`.
pub fn transformer_layer_features(
    features: &mut Vec<f32>,
    dim: usize,
    plan: &PartitionPlan,
    w: &LayerWeights,
    cfg: &ModelConfig,
) {
    match cfg.norm_style {
        NormStyle::PreNorm => {
            let normed = norm_all(features, dim, &w.norm1_gain, &w.norm1_bias);
            let attn = grouped_attention_features(&normed, dim, plan, w, cfg);
            add_assign(features, &attn);
            let normed = norm_all(features, dim, &w.norm2_gain, &w.norm2_bias);
            ffn_pass(features, &normed, w, cfg);
        }
        NormStyle::PostNorm => {
            let attn = grouped_attention_features(features, dim, plan, w, cfg);
            add_assign(features, &attn);
            *features = norm_all(features, dim, &w.norm1_gain, &w.norm1_bias);
            let input = features.clone();
            ffn_pass(features, &input, w, cfg);
            *features = norm_all(features, dim, &w.norm2_gain, &w.norm2_bias);
        }
    }
}

/// [`transformer_layer_features`] applied to a token set in place.
pub fn transformer_layer(
    tokens: &mut TokenSet,
    plan: &PartitionPlan,
    w: &LayerWeights,
    cfg: &ModelConfig,
) {
    let dim = tokens.dim;
    transformer_layer_features(&mut tokens.features, dim, plan, w, cfg);
}

// --- positional encoding ---------------------------------------------

/// Frequency ladder: `dim/6` bands per axis spanning a factor of 10⁴.
fn pe_bands(dim: usize) -> usize {
    dim / 6
}

/// Per-axis sinusoidal encoding of a coordinate triple, each axis
/// normalized by its own scale. The building block behind both PE styles.
pub fn positional_encoding_scaled(coords: [f64; 3], scales: [f64; 3], dim: usize) -> Vec<f64> {
    let bands = pe_bands(dim);
    let mut pe = vec![0.0f64; dim];
    if bands == 0 {
        return pe;
    }
    let span = if bands > 1 { (bands - 1) as f64 } else { 1.0 };
    for axis in 0..3 {
        let c = coords[axis] / scales[axis];
        for b in 0..bands {
            let freq = 10_000.0f64.powf(b as f64 / span);
            let angle = c * std::f64::consts::TAU * freq;
            let base = axis * 2 * bands + 2 * b;
            pe[base] = angle.sin();
            pe[base + 1] = angle.cos();
        }
    }
    pe
}

/// 3D positional encoding over metric world coordinates. The trailing
/// `dim mod 6` entries stay zero.
pub fn positional_encoding_3d(p: Vec3, cfg: &ModelConfig) -> Vec<f64> {
    positional_encoding_scaled([p.x, p.y, p.z], [cfg.pe_scale; 3], cfg.dim)
}

/// Window-local positional encoding: sinusoids over the local coordinates
/// only, scaled by the window shape. Tokens with equal locals coincide.
pub fn positional_encoding_window(
    key: &WindowKey,
    window_shape: [f64; 3],
    cfg: &ModelConfig,
) -> Vec<f64> {
    positional_encoding_scaled([key.lx, key.ly, key.lz], window_shape, cfg.dim)
}

// --- attentive z pooling ----------------------------------------------

/// Merges tokens sharing (ix, iy, ⌊iz/factor⌋) into one token whose
/// feature is the softmax(⟨s, f⟩)-weighted sum; level_z divides by factor.
pub fn attentive_pool_z(tokens: &TokenSet, factor: u32, score: &[f32]) -> Result<TokenSet> {
    if factor == 0 || tokens.level_z % factor != 0 {
        return Err(Error::InvalidConfig(format!(
            "level_z {} is not divisible by pooling factor {factor}",
            tokens.level_z
        )));
    }
    if factor == 1 {
        return Ok(tokens.clone());
    }
    let dim = tokens.dim;
    debug_assert_eq!(score.len(), dim);

    let column = |i: usize| {
        let t = &tokens.tokens[i];
        (t.index[0], t.index[1], t.index[2].div_euclid(factor as i32))
    };
    let mut order: Vec<u32> = (0..tokens.len() as u32).collect();
    order.sort_by_key(|&i| column(i as usize));

    let mut cell = tokens.cell;
    cell[2] *= factor as f64;
    let mut dims = tokens.dims;
    dims[2] = dims[2].div_ceil(factor as usize);

    let mut out = TokenSet {
        tokens: Vec::new(),
        features: Vec::new(),
        dim,
        level_z: tokens.level_z / factor,
        origin: tokens.origin,
        cell,
        dims,
    };

    let mut run_start = 0usize;
    while run_start < order.len() {
        let col = column(order[run_start] as usize);
        let mut run_end = run_start + 1;
        while run_end < order.len() && column(order[run_end] as usize) == col {
            run_end += 1;
        }
        let members = &order[run_start..run_end];

        let scores: Vec<f64> = members
            .iter()
            .map(|&i| dot_f64(score, tokens.feature(i as usize)))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| exp_neg(s - max)).collect();
        let denom: f64 = exps.iter().sum();

        let mut merged = vec![0.0f64; dim];
        for (&i, e) in members.iter().zip(&exps) {
            let a = e / denom;
            for (d, m) in merged.iter_mut().enumerate() {
                *m += a * tokens.feature(i as usize)[d] as f64;
            }
        }

        let index = [col.0, col.1, col.2];
        let center = Vec3::new(
            out.origin.x + (index[0] as f64 + 0.5) * cell[0],
            out.origin.y + (index[1] as f64 + 0.5) * cell[1],
            out.origin.z + (index[2] as f64 + 0.5) * cell[2],
        );
        out.tokens.push(crate::token::Token {
            index,
            coord3d: center,
            pixel: None,
            modality: crate::token::Modality::Lidar,
            camera_id: None,
        });
        out.features.extend(merged.iter().map(|&m| m as f32));
        run_start = run_end;
    }
    Ok(out)
}

// --- weight serialization ----------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct WeightsManifest {
    dim: usize,
    ffn_hidden: usize,
    layers: usize,
    /// (name, rows, cols, f32 offset into the blob) per tensor.
    tensors: Vec<(String, usize, usize, usize)>,
}

fn layer_tensors(w: &LayerWeights, dim: usize, hidden: usize) -> Vec<(&'static str, usize, usize, &[f32])> {
    vec![
        ("wq", dim, dim, &w.wq),
        ("wk", dim, dim, &w.wk),
        ("wv", dim, dim, &w.wv),
        ("wo", dim, dim, &w.wo),
        ("w_gate", hidden, dim, &w.w_gate),
        ("w_up", hidden, dim, &w.w_up),
        ("w_down", dim, hidden, &w.w_down),
        ("norm1_gain", 1, dim, &w.norm1_gain),
        ("norm1_bias", 1, dim, &w.norm1_bias),
        ("norm2_gain", 1, dim, &w.norm2_gain),
        ("norm2_bias", 1, dim, &w.norm2_bias),
    ]
}

/// Writes a layer stack as a flat little-endian f32 blob plus a JSON
/// shape manifest, so a run can be reproduced bit-exactly elsewhere.
pub fn write_weights(
    blob_path: &Path,
    manifest_path: &Path,
    layers: &[LayerWeights],
    cfg: &ModelConfig,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        for (name, rows, cols, data) in layer_tensors(layer, cfg.dim, cfg.ffn_hidden) {
            tensors.push((format!("layer{li}.{name}"), rows, cols, blob.len() / 4));
            for &v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = WeightsManifest {
        dim: cfg.dim,
        ffn_hidden: cfg.ffn_hidden,
        layers: layers.len(),
        tensors,
    };
    std::fs::write(blob_path, blob)?;
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_weights(blob_path: &Path, manifest_path: &Path) -> Result<Vec<LayerWeights>> {
    let manifest: WeightsManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let blob = std::fs::read(blob_path)?;
    let malformed = |what: &str| Error::MalformedFile {
        path: blob_path.display().to_string(),
        what: what.into(),
    };
    if blob.len() % 4 != 0 {
        return Err(malformed("blob length"));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let mut layers = Vec::with_capacity(manifest.layers);
    let mut cursor = manifest.tensors.iter();
    for li in 0..manifest.layers {
        let mut take = |name: &str| -> Result<Vec<f32>> {
            let (tname, rows, cols, off) =
                cursor.next().ok_or_else(|| malformed("tensor list"))?;
            if tname != &format!("layer{li}.{name}") {
                return Err(malformed("tensor order"));
            }
            let end = off + rows * cols;
            if end > floats.len() {
                return Err(malformed("tensor extent"));
            }
            Ok(floats[*off..end].to_vec())
        };
        layers.push(LayerWeights {
            wq: take("wq")?,
            wk: take("wk")?,
            wv: take("wv")?,
            wo: take("wo")?,
            w_gate: take("w_gate")?,
            w_up: take("w_up")?,
            w_down: take("w_down")?,
            norm1_gain: take("norm1_gain")?,
            norm1_bias: take("norm1_bias")?,
            norm2_gain: take("norm2_gain")?,
            norm2_bias: take("norm2_bias")?,
        });
    }
    Ok(layers)
}
