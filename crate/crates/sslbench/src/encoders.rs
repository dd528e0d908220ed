//! Miniature image encoders: a convolutional-residual pyramid and a
//! ViT-style token encoder with optional non-overlapping window attention,
//! plus EMA shadows, position-embedding interpolation, and the single-file
//! checkpoint format.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use autograd::{Arr, BatchNorm, Binder, Conv2d, LayerNorm, Linear, Mode, ParamSet, Tape, Var};

use crate::{Error, Result};

/// Kaiming-style normal initializer (`std = sqrt(2 / fan_in)`), deterministic
/// under the seed. Fan-in is the product of all dimensions but the last for
/// matrices, and `c_in·k·k` for convolution kernels `[c_out, c_in, k, k]`.
pub fn kaiming_init(seed: u64) -> impl FnMut(&[usize]) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |shape: &[usize]| {
        let fan_in = match shape.len() {
            0 | 1 => shape.iter().product::<usize>().max(1),
            2 => shape[0],
            _ => shape[1..].iter().product(),
        };
        let std = (2.0 / fan_in as f64).sqrt();
        Arr::from_shape_fn(ndarray::IxDyn(shape), |_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    }
}

// ---------------------------------------------------------------------------
// Convolutional encoder
// ---------------------------------------------------------------------------

/// Architecture of [`ConvEncoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ResBlock {
    fn new(pset: &mut ParamSet, name: &str, c: usize, init: &mut dyn FnMut(&[usize]) -> Arr) -> Self {
        Self {
            conv1: Conv2d::new(pset, &format!("{name}.conv1"), c, c, 3, 1, 1, init),
            bn1: BatchNorm::new(pset, &format!("{name}.bn1"), c),
            conv2: Conv2d::new(pset, &format!("{name}.conv2"), c, c, 3, 1, 1, init),
            bn2: BatchNorm::new(pset, &format!("{name}.bn2"), c),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        x: Var,
        mode: Mode,
    ) -> Var {
        let h = self.conv1.forward(tape, binder, pset, x);
        let h = self.bn1.forward(tape, binder, pset, h, mode);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, binder, pset, h);
        let h = self.bn2.forward(tape, binder, pset, h, mode);
        let s = tape.add(h, x);
        tape.relu(s)
    }
}

struct ConvStage {
    down: Conv2d,
    bn: BatchNorm,
    blocks: Vec<ResBlock>,
}

/// Small residual encoder producing a per-stage feature pyramid (spatial
/// sides halve each stage) and a globally pooled vector.
pub struct ConvEncoder {
    pub cfg: ConvConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<ConvStage>,
}

/// Per-stage feature maps (shallow to deep) plus the pooled vector.
#[derive(Debug)]
pub struct ConvFeatures {
    pub maps: Vec<Var>,
    pub pooled: Var,
}

impl ConvEncoder {
    /// Parameter names are created under `{name}.`, so checkpoints can be
    /// matched by prefix.
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        cfg: ConvConfig,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Self {
        let w0 = cfg.widths[0];
        let stem = Conv2d::new(pset, &format!("{name}.stem"), 3, w0, 3, 1, 1, init);
        let stem_bn = BatchNorm::new(pset, &format!("{name}.stem_bn"), w0);
        let mut stages = Vec::new();
        let mut c_in = w0;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let sname = format!("{name}.stage{i}");
            let down = Conv2d::new(pset, &format!("{sname}.down"), c_in, c_out, 3, 2, 1, init);
            let bn = BatchNorm::new(pset, &format!("{sname}.down_bn"), c_out);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock::new(pset, &format!("{sname}.block{b}"), c_out, init))
                .collect();
            stages.push(ConvStage { down, bn, blocks });
            c_in = c_out;
        }
        Self { cfg, stem, stem_bn, stages }
    }

    pub fn feature_dim(&self) -> usize {
        *self.cfg.widths.last().unwrap()
    }

    /// Forward a batch `[N, 3, S, S]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        x: Var,
        mode: Mode,
    ) -> Result<ConvFeatures> {
        let shape = tape.value(x).shape().to_vec();
        let side = shape[shape.len() - 1];
        let div = 1usize << self.stages.len();
        if side % div != 0 {
            return Err(Error::Invalid(format!(
                "input side {side} must be divisible by {div} ({} stages)",
                self.stages.len()
            )));
        }
        let mut h = self.stem.forward(tape, binder, pset, x);
        h = self.stem_bn.forward(tape, binder, pset, h, mode);
        h = tape.relu(h);
        let mut maps = Vec::new();
        for stage in &self.stages {
            h = stage.down.forward(tape, binder, pset, h);
            h = stage.bn.forward(tape, binder, pset, h, mode);
            h = tape.relu(h);
            for block in &stage.blocks {
                h = block.forward(tape, binder, pset, h, mode);
            }
            maps.push(h);
        }
        let pooled = tape.global_avg_pool(h);
        Ok(ConvFeatures { maps, pooled })
    }
}

// ---------------------------------------------------------------------------
// Transformer trunk and ViT encoder
// ---------------------------------------------------------------------------

/// Architecture of [`ViTEncoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Window side in tokens for windowed blocks; 0 = global attention in
    /// every block. When nonzero, blocks at depth multiples of `depth/4`
    /// stay global and all others use windows.
    pub window: usize,
    pub frozen_patch_embed: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 32,
            depth: 4,
            heads: 4,
            window: 0,
            frozen_patch_embed: false,
        }
    }
}

struct TrunkBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    /// 0 = global attention in this block.
    window: usize,
}

/// Stack of pre-norm attention + MLP blocks, shared by the image encoder and
/// the masked-reconstruction decoder.
pub struct TransformerTrunk {
    pub dim: usize,
    pub heads: usize,
    blocks: Vec<TrunkBlock>,
}

/// Token layout seen by window attention.
#[derive(Debug, Clone, Copy)]
pub enum AttnLayout {
    /// Tokens carry no grid structure (or windows are disabled).
    Global,
    /// Token 0 is the class token; tokens 1.. form a `g × g` row-major grid.
    Grid { g: usize },
}

impl TransformerTrunk {
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        window_of: impl Fn(usize) -> usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        let blocks = (0..depth)
            .map(|i| {
                let b = format!("{name}.block{i}");
                TrunkBlock {
                    ln1: LayerNorm::new(pset, &format!("{b}.ln1"), dim),
                    wq: Linear::new(pset, &format!("{b}.wq"), dim, dim, init),
                    wk: Linear::new(pset, &format!("{b}.wk"), dim, dim, init),
                    wv: Linear::new(pset, &format!("{b}.wv"), dim, dim, init),
                    wo: Linear::new(pset, &format!("{b}.wo"), dim, dim, init),
                    ln2: LayerNorm::new(pset, &format!("{b}.ln2"), dim),
                    fc1: Linear::new(pset, &format!("{b}.fc1"), dim, dim * 4, init),
                    fc2: Linear::new(pset, &format!("{b}.fc2"), dim * 4, dim, init),
                    window: window_of(i),
                }
            })
            .collect();
        Self { dim, heads, blocks }
    }

    /// `q [B, M, dh]` against `k, v [B, K, dh]`.
    fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, dh: usize) -> Var {
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.batch_matmul(q, kt);
        let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scores);
        tape.batch_matmul(probs, v)
    }

    /// Split `[N, T, D]` into `[N·H, T, dh]`.
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Var {
        let sh = tape.value(x).shape().to_vec();
        let (n, t) = (sh[0], sh[1]);
        let dh = self.dim / self.heads;
        let x = tape.reshape(x, &[n, t, self.heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[n * self.heads, t, dh])
    }

    /// Inverse of [`split_heads`].
    fn merge_heads(&self, tape: &mut Tape, x: Var, n: usize) -> Var {
        let sh = tape.value(x).shape().to_vec();
        let t = sh[1];
        let dh = self.dim / self.heads;
        let x = tape.reshape(x, &[n, self.heads, t, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[n, t, self.dim])
    }

    /// Gather token subset `toks` from `x [B, T, dh]` (same subset for every
    /// batch row) -> `[B, |toks|, dh]`.
    fn gather_tokens(tape: &mut Tape, x: Var, toks: &[usize]) -> Var {
        let sh = tape.value(x).shape().to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let flat = tape.reshape(x, &[b * t, d]);
        let mut idx = Vec::with_capacity(b * toks.len());
        for row in 0..b {
            for &tok in toks {
                idx.push(row * t + tok);
            }
        }
        let sel = tape.select_rows(flat, &idx);
        tape.reshape(sel, &[b, toks.len(), d])
    }

    /// Run all blocks; returns each block's output in order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &ParamSet,
        x: Var,
        layout: AttnLayout,
    ) -> Vec<Var> {
        let n = tape.value(x).shape()[0];
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let normed = block.ln1.forward(tape, binder, pset, h);
            let q = block.wq.forward(tape, binder, pset, normed);
            let k = block.wk.forward(tape, binder, pset, normed);
            let v = block.wv.forward(tape, binder, pset, normed);
            let (qh, kh, vh) = (
                self.split_heads(tape, q),
                self.split_heads(tape, k),
                self.split_heads(tape, v),
            );
            // attention consumes pre-split q/k/v with identical token order
            let attended = self.attention_qkv(tape, block, qh, kh, vh, layout);
            let merged = self.merge_heads(tape, attended, n);
            let proj = block.wo.forward(tape, binder, pset, merged);
            h = tape.add(h, proj);
            let normed = block.ln2.forward(tape, binder, pset, h);
            let m = block.fc1.forward(tape, binder, pset, normed);
            let m = tape.gelu(m);
            let m = block.fc2.forward(tape, binder, pset, m);
            h = tape.add(h, m);
            outs.push(h);
        }
        outs
    }

    fn attention_qkv(
        &self,
        tape: &mut Tape,
        block: &TrunkBlock,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
    ) -> Var {
        let dh = self.dim / self.heads;
        let t_all = tape.value(q).shape()[1];
        let wins: Option<Vec<Vec<usize>>> = match (block.window, layout) {
            (0, _) | (_, AttnLayout::Global) => None,
            (ws, AttnLayout::Grid { g }) => {
                assert!(
                    g % ws == 0,
                    "window size {ws} does not divide token grid side {g}"
                );
                assert_eq!(t_all, g * g + 1, "grid layout expects cls + g² tokens");
                if ws == g {
                    None // a single full-grid window equals global attention
                } else {
                    let mut wins = Vec::new();
                    for wy in 0..g / ws {
                        for wx in 0..g / ws {
                            let mut toks = Vec::with_capacity(ws * ws);
                            for y in 0..ws {
                                for x in 0..ws {
                                    toks.push(1 + (wy * ws + y) * g + (wx * ws + x));
                                }
                            }
                            wins.push(toks);
                        }
                    }
                    Some(wins)
                }
            }
        };
        match wins {
            None => Self::attend(tape, q, k, v, dh),
            Some(wins) => {
                let qc = tape.slice_axis(q, 1, 0, 1);
                let oc = Self::attend(tape, qc, k, v, dh);
                let mut parts = vec![oc];
                let mut order = vec![0usize];
                for toks in &wins {
                    let qw = Self::gather_tokens(tape, q, toks);
                    let mut kv_toks = Vec::with_capacity(toks.len() + 1);
                    kv_toks.push(0);
                    kv_toks.extend_from_slice(toks);
                    let kw = Self::gather_tokens(tape, k, &kv_toks);
                    let vw = Self::gather_tokens(tape, v, &kv_toks);
                    parts.push(Self::attend(tape, qw, kw, vw, dh));
                    order.extend_from_slice(toks);
                }
                let stacked = tape.concat(1, &parts);
                let mut inv = vec![0usize; t_all];
                for (pos, &tok) in order.iter().enumerate() {
                    inv[tok] = pos;
                }
                Self::gather_tokens(tape, stacked, &inv)
            }
        }
    }
}

/// Cut an image batch `[N, 3, S, S]` into flattened patches `[N, T, 3·p²]`
/// (patch grid row-major; within a patch, channel-major then row-major).
pub fn patchify(batch: &Array4<f64>, patch: usize) -> Result<Array3<f64>> {
    let (n, c, h, w) = batch.dim();
    if h != w || h % patch != 0 {
        return Err(Error::Invalid(format!(
            "patchify: side {h}x{w} not square or not divisible by patch {patch}"
        )));
    }
    let g = h / patch;
    let t = g * g;
    let pd = c * patch * patch;
    let mut out = Array3::<f64>::zeros((n, t, pd));
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                let tok = gy * g + gx;
                let mut i = 0;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[[b, tok, i]] = batch[[b, ch, gy * patch + py, gx * patch + px]];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// ViT-style encoder: patch projection, class token, learnable position
/// embeddings, and a transformer trunk with optional window attention.
pub struct ViTEncoder {
    pub cfg: VitConfig,
    /// Token grid side the position embedding was built for.
    pub grid: usize,
    patch_w: autograd::ParamId,
    patch_b: autograd::ParamId,
    cls: autograd::ParamId,
    pos_grid: autograd::ParamId,
    pos_cls: autograd::ParamId,
    ln_f: LayerNorm,
    pub trunk: TransformerTrunk,
}

/// Final-block tokens plus intermediate taps for dense decoding.
#[derive(Debug)]
pub struct VitFeatures {
    /// Patch tokens of the final block after the last layer norm `[N, T, D]`.
    pub tokens: Var,
    /// Class token after the last layer norm `[N, D]`.
    pub cls: Var,
    /// Patch tokens of four evenly spaced blocks (shallow to deep), without
    /// the final layer norm, each `[N, T, D]`.
    pub taps: Vec<Var>,
}

impl ViTEncoder {
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        cfg: VitConfig,
        side: usize,
        init: &mut dyn FnMut(&[usize]) -> Arr,
    ) -> Result<Self> {
        if side % cfg.patch != 0 {
            return Err(Error::Invalid(format!(
                "side {side} not divisible by patch {}",
                cfg.patch
            )));
        }
        if cfg.window > 0 && cfg.depth % 4 != 0 {
            return Err(Error::Invalid(
                "window attention requires depth divisible by 4".into(),
            ));
        }
        let g = side / cfg.patch;
        if cfg.window > 0 && g % cfg.window != 0 {
            return Err(Error::Invalid(format!(
                "window size {} does not divide token grid side {g}",
                cfg.window
            )));
        }
        let t = g * g;
        let pd = 3 * cfg.patch * cfg.patch;
        let patch_w = pset.add(
            format!("{name}.patch.w"),
            init(&[pd, cfg.dim]),
            !cfg.frozen_patch_embed,
        );
        let patch_b = pset.add(
            format!("{name}.patch.b"),
            Arr::zeros(ndarray::IxDyn(&[cfg.dim])),
            !cfg.frozen_patch_embed,
        );
        let cls = pset.add(
            format!("{name}.cls"),
            init(&[cfg.dim]).mapv(|v| v * 0.1),
            true,
        );
        let pos_grid = pset.add(
            format!("{name}.pos_grid"),
            init(&[t, cfg.dim]).mapv(|v| v * 0.1),
            true,
        );
        let pos_cls = pset.add(
            format!("{name}.pos_cls"),
            init(&[cfg.dim]).mapv(|v| v * 0.1),
            true,
        );
        let stride = cfg.depth / 4;
        let window = cfg.window;
        let trunk = TransformerTrunk::new(
            pset,
            &format!("{name}.trunk"),
            cfg.dim,
            cfg.depth,
            cfg.heads,
            // blocks at depth multiples of depth/4 (1-indexed) stay global
            move |i| {
                if window == 0 || (i + 1) % stride.max(1) == 0 {
                    0
                } else {
                    window
                }
            },
            init,
        );
        let ln_f = LayerNorm::new(pset, &format!("{name}.ln_f"), cfg.dim);
        Ok(Self {
            cfg,
            grid: g,
            patch_w,
            patch_b,
            cls,
            pos_grid,
            pos_cls,
            ln_f,
            trunk,
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid * self.grid
    }

    /// Project flattened patches and prepend the class token.
    /// `positions[i]` is the grid position of `patches[:, i, :]`.
    pub fn embed_patches(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &ParamSet,
        patches: &Array3<f64>,
        positions: &[usize],
    ) -> Var {
        let (n, k, _pd) = patches.dim();
        assert_eq!(k, positions.len(), "positions must match patch count");
        let x = tape.leaf(patches.clone().into_dyn());
        let w = binder.bind(tape, pset, self.patch_w);
        let b = binder.bind(tape, pset, self.patch_b);
        let emb = tape.linear(x, w, Some(b)); // [N, K, D]
        let pos = binder.bind(tape, pset, self.pos_grid);
        let pos_sel = tape.select_rows(pos, positions); // [K, D]
        let emb = tape.add_bcast(emb, pos_sel);
        // class token with its own position embedding
        let cls = binder.bind(tape, pset, self.cls);
        let pos_cls = binder.bind(tape, pset, self.pos_cls);
        let cls = tape.add(cls, pos_cls);
        let cls = tape.repeat_rows(cls, n);
        let cls = tape.reshape(cls, &[n, 1, self.cfg.dim]);
        tape.concat(1, &[cls, emb])
    }

    /// Full-image forward. `x` is `[N, 3, S, S]` where `S = grid · patch`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &ParamSet,
        batch: &Array4<f64>,
    ) -> Result<VitFeatures> {
        let side = batch.dim().2;
        if side != self.grid * self.cfg.patch {
            return Err(Error::Invalid(format!(
                "input side {side} does not match configured side {}",
                self.grid * self.cfg.patch
            )));
        }
        let patches = patchify(batch, self.cfg.patch)?;
        let positions: Vec<usize> = (0..self.token_count()).collect();
        let x = self.embed_patches(tape, binder, pset, &patches, &positions);
        let layout = AttnLayout::Grid { g: self.grid };
        let outs = self.trunk.forward(tape, binder, pset, x, layout);
        let depth = outs.len();
        let t = self.token_count();
        let taps: Vec<Var> = (1..=4)
            .map(|k| {
                let idx = (depth * k / 4).max(1) - 1;
                tape.slice_axis(outs[idx], 1, 1, t + 1)
            })
            .collect();
        let last = self.ln_f.forward(tape, binder, pset, outs[depth - 1]);
        let cls = tape.slice_axis(last, 1, 0, 1);
        let n = batch.dim().0;
        let cls = tape.reshape(cls, &[n, self.cfg.dim]);
        let tokens = tape.slice_axis(last, 1, 1, t + 1);
        Ok(VitFeatures { tokens, cls, taps })
    }
}

/// EMA update `φ' = momentum·φ + (1 − momentum)·θ` with shape validation.
pub fn ema_update(shadow: &mut ParamSet, src: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    if shadow.len() != src.len() {
        return Err(Error::Shape("ema: slot count mismatch".into()));
    }
    for (a, b) in shadow.ids().zip(src.ids()) {
        if shadow.value(a).shape() != src.value(b).shape() {
            return Err(Error::Shape(format!(
                "ema: shape mismatch for {}",
                shadow.name(a)
            )));
        }
    }
    shadow.ema_update_from(src, momentum);
    Ok(())
}

/// Bilinearly resize a square grid of position embeddings `[g², D]` to a new
/// grid side. The class-token embedding is stored separately and untouched.
pub fn interpolate_pos_embed(pos: &Array2<f64>, new_side: usize) -> Result<Array2<f64>> {
    let (t, d) = pos.dim();
    let g = (t as f64).sqrt().round() as usize;
    if g * g != t {
        return Err(Error::Invalid(format!("position grid of {t} tokens is not square")));
    }
    if g == new_side {
        return Ok(pos.clone());
    }
    let mut out = Array2::<f64>::zeros((new_side * new_side, d));
    for col in 0..d {
        let plane = Array2::from_shape_fn((g, g), |(y, x)| pos[[y * g + x, col]]);
        let resized =
            crate::imageops::resample_plane(&plane, new_side, new_side, crate::imageops::Filter::Bilinear);
        for y in 0..new_side {
            for x in 0..new_side {
                out[[y * new_side + x, col]] = resized[[y, x]];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SSLBCKPT";

/// JSON header stored in front of the parameter data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Architecture description (config the model was built from).
    pub arch: serde_json::Value,
    pub seed: u64,
    /// Free-form provenance: algorithm, dataset id, config hash, …
    pub provenance: BTreeMap<String, String>,
    pub params: Vec<ParamMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Write all parameters with a provenance header to a single file.
pub fn write_checkpoint(
    path: &Path,
    pset: &ParamSet,
    arch: serde_json::Value,
    seed: u64,
    provenance: BTreeMap<String, String>,
) -> Result<()> {
    let params: Vec<ParamMeta> = pset
        .ids()
        .map(|id| ParamMeta {
            name: pset.name(id).to_string(),
            shape: pset.value(id).shape().to_vec(),
            trainable: pset.is_trainable(id),
        })
        .collect();
    let header = CheckpointHeader {
        format_version: 1,
        arch,
        seed,
        provenance,
        params,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_u64::<LittleEndian>(hjson.len() as u64)?;
    f.write_all(&hjson)?;
    for id in pset.ids() {
        for &v in pset.value(id).as_standard_layout().as_slice().unwrap() {
            f.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Read a checkpoint back into a fresh parameter set.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Invalid(format!("{}: not a checkpoint file", path.display())));
    }
    let hlen = f.read_u64::<LittleEndian>()? as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson)?;
    let header: CheckpointHeader = serde_json::from_slice(&hjson)?;
    let mut pset = ParamSet::new();
    for meta in &header.params {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f.read_f64::<LittleEndian>()?);
        }
        let value = Arr::from_shape_vec(ndarray::IxDyn(&meta.shape), data)
            .map_err(|e| Error::Invalid(format!("checkpoint shape error: {e}")))?;
        pset.add(meta.name.clone(), value, meta.trainable);
    }
    Ok((header, pset))
}

/// Copy values from `src` into equally named, equally shaped slots of `dst`.
/// Returns how many slots were filled.
pub fn load_matching(dst: &mut ParamSet, src: &ParamSet) -> usize {
    let mut filled = 0;
    for sid in src.ids() {
        if let Some(did) = dst.id_by_name(src.name(sid)) {
            if dst.value(did).shape() == src.value(sid).shape() {
                dst.value_mut(did).assign(src.value(sid));
                filled += 1;
            }
        }
    }
    filled
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn batch(n: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, s, s), |_| rng.gen_range(-1.0..1.0))
    }

    fn to_var(tape: &mut Tape, b: &Array4<f64>) -> Var {
        tape.leaf(b.clone().into_dyn())
    }

    #[test]
    fn conv_encoder_shapes() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(0);
        let enc = ConvEncoder::new(&mut pset, "enc", ConvConfig::default(), &mut init);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = to_var(&mut tape, &batch(2, 64, 1));
        let f = enc
            .forward(&mut tape, &mut binder, &mut pset, x, Mode::Eval)
            .unwrap();
        assert_eq!(f.maps.len(), 4);
        assert_eq!(tape.value(f.maps[3]).shape(), &[2, 128, 4, 4]);
        assert_eq!(tape.value(f.pooled).shape(), &[2, 128]);
    }

    #[test]
    fn conv_encoder_rejects_indivisible_side() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(0);
        let enc = ConvEncoder::new(&mut pset, "enc", ConvConfig::default(), &mut init);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = to_var(&mut tape, &batch(1, 24, 1));
        let err = enc
            .forward(&mut tape, &mut binder, &mut pset, x, Mode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("divisible by 16"));
    }

    #[test]
    fn conv_encoder_eval_is_deterministic() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(3);
        let enc = ConvEncoder::new(&mut pset, "enc", ConvConfig::default(), &mut init);
        let b = batch(1, 32, 2);
        let run = |pset: &mut ParamSet| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.leaf(b.clone().into_dyn());
            let f = enc.forward(&mut tape, &mut binder, pset, x, Mode::Eval).unwrap();
            tape.value(f.pooled).clone()
        };
        assert_eq!(run(&mut pset), run(&mut pset));
    }

    #[test]
    fn vit_token_counts() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(0);
        let enc = ViTEncoder::new(&mut pset, "vit", VitConfig::default(), 64, &mut init).unwrap();
        assert_eq!(enc.token_count(), 64);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let f = enc
            .forward(&mut tape, &mut binder, &pset, &batch(2, 64, 4))
            .unwrap();
        assert_eq!(tape.value(f.tokens).shape(), &[2, 64, 32]);
        assert_eq!(tape.value(f.cls).shape(), &[2, 32]);
        assert_eq!(f.taps.len(), 4);
    }

    #[test]
    fn full_grid_window_equals_global() {
        let b = batch(2, 32, 9);
        let outputs: Vec<_> = [0usize, 4]
            .iter()
            .map(|&w| {
                let mut pset = ParamSet::new();
                let mut init = kaiming_init(7);
                let cfg = VitConfig {
                    patch: 8,
                    dim: 16,
                    heads: 2,
                    depth: 4,
                    window: w, // grid side is 4, so window 4 covers the grid
                    frozen_patch_embed: false,
                };
                let enc = ViTEncoder::new(&mut pset, "vit", cfg, 32, &mut init).unwrap();
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let f = enc.forward(&mut tape, &mut binder, &pset, &b).unwrap();
                tape.value(f.tokens).clone()
            })
            .collect();
        let diff = (&outputs[0] - &outputs[1])
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "full-grid window differs from global by {diff}");
    }

    #[test]
    fn window_blocks_are_independent() {
        // 4x4 token grid with 2x2 windows, a single windowed block: zeroing
        // the input tokens of one window must not change another window's
        // attention output within that block
        let g = 4usize;
        let dim = 16usize;
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(11);
        let trunk = TransformerTrunk::new(&mut pset, "trunk", dim, 1, 2, |_| 2, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Array3::from_shape_fn((1, g * g + 1, dim), |_| rng.gen_range(-1.0..1.0));
        let run = |tokens: &Array3<f64>| {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.leaf(tokens.clone().into_dyn());
            let outs = trunk.forward(&mut tape, &mut binder, &pset, x, AttnLayout::Grid { g });
            tape.value(outs[0]).clone()
        };
        let mut zeroed = base.clone();
        // window (0,0): grid positions 0,1,4,5 → sequence tokens 1,2,5,6
        for &tok in &[1usize, 2, 5, 6] {
            for d in 0..dim {
                zeroed[[0, tok, d]] = 0.0;
            }
        }
        let a = run(&base);
        let b = run(&zeroed);
        // window (1,1): grid positions 10,11,14,15 → sequence tokens 11,12,15,16.
        // Attention output = block output minus the residual stream, which the
        // zeroing leaves untouched for these tokens, so compare block outputs.
        for &tok in &[11usize, 12, 15, 16] {
            for d in 0..dim {
                let x = a[[0, tok, d]];
                let y = b[[0, tok, d]];
                assert!(
                    (x - y).abs() < 1e-9,
                    "token {tok} dim {d} changed: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn frozen_patch_embed_is_untrainable() {
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(0);
        let cfg = VitConfig { frozen_patch_embed: true, ..Default::default() };
        let _enc = ViTEncoder::new(&mut pset, "vit", cfg, 64, &mut init).unwrap();
        let wid = pset.id_by_name("vit.patch.w").unwrap();
        assert!(!pset.is_trainable(wid));
        // unfreezing flips the flag
        pset.set_trainable_by_prefix("vit.patch.", true);
        assert!(pset.is_trainable(wid));
    }

    #[test]
    fn ema_contract() {
        let mut pset = ParamSet::new();
        pset.add("p", Arr::ones(ndarray::IxDyn(&[2, 2])), true);
        let mut shadow = pset.clone();
        shadow.value_mut(shadow.id_by_name("p").unwrap()).fill(0.0);
        ema_update(&mut shadow, &pset, 0.9).unwrap();
        let v = shadow.value(shadow.id_by_name("p").unwrap());
        for x in v.iter() {
            assert!((x - 0.1).abs() < 1e-12);
        }
        ema_update(&mut shadow, &pset, 1.0).unwrap();
        for x in shadow.value(shadow.id_by_name("p").unwrap()).iter() {
            assert!((x - 0.1).abs() < 1e-12);
        }
        ema_update(&mut shadow, &pset, 0.0).unwrap();
        for x in shadow.value(shadow.id_by_name("p").unwrap()).iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
        let mut bad = ParamSet::new();
        bad.add("p", Arr::ones(ndarray::IxDyn(&[3])), true);
        assert!(ema_update(&mut bad, &pset, 0.5).is_err());
    }

    #[test]
    fn pos_embed_interpolation() {
        // identity
        let pos = Array2::from_shape_fn((64, 4), |(t, d)| (t * 4 + d) as f64);
        let same = interpolate_pos_embed(&pos, 8).unwrap();
        assert_eq!(same, pos);
        // constant stays constant
        let c = Array2::from_elem((64, 2), 0.7);
        let up = interpolate_pos_embed(&c, 16).unwrap();
        assert_eq!(up.dim(), (256, 2));
        for v in up.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        // 2x2 ramp to 3x3: centre value is the mean of the corners
        let ramp = Array2::from_shape_fn((4, 1), |(t, _)| (t % 2) as f64); // columns 0,1
        let out = interpolate_pos_embed(&ramp, 3).unwrap();
        // middle column of the 3x3 grid = midpoint of 0 and 1
        assert!((out[[1, 0]] - 0.5).abs() < 1e-9);
        assert!((out[[4, 0]] - 0.5).abs() < 1e-9);
        // non-square grid is rejected
        let bad = Array2::zeros((5, 3));
        assert!(interpolate_pos_embed(&bad, 4).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pset = ParamSet::new();
        let mut init = kaiming_init(13);
        pset.add("a.w", init(&[3, 4]), true);
        pset.add("a.frozen", init(&[2]), false);
        let mut prov = BTreeMap::new();
        prov.insert("algorithm".into(), "mocov3".into());
        prov.insert("dataset_id".into(), "synth-1".into());
        let path = dir.path().join("ck.bin");
        write_checkpoint(&path, &pset, serde_json::json!({"kind": "test"}), 42, prov).unwrap();
        let (header, back) = read_checkpoint(&path).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.provenance["algorithm"], "mocov3");
        assert_eq!(back.len(), 2);
        let id = back.id_by_name("a.w").unwrap();
        assert_eq!(back.value(id), pset.value(pset.id_by_name("a.w").unwrap()));
        assert!(!back.is_trainable(back.id_by_name("a.frozen").unwrap()));
        // load into a differently initialized set
        let mut fresh = ParamSet::new();
        let mut init2 = kaiming_init(99);
        fresh.add("a.w", init2(&[3, 4]), true);
        fresh.add("other", init2(&[5]), true);
        assert_eq!(load_matching(&mut fresh, &back), 1);
        assert_eq!(
            fresh.value(fresh.id_by_name("a.w").unwrap()),
            pset.value(pset.id_by_name("a.w").unwrap())
        );
    }
}
