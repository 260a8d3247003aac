//! Tapped pre-norm ViT encoder, per-tap decoders, classification head and
//! image-to-video weight inflation.
//!
//! All parameters live in a [`ParamStore`] under dotted names such as
//! `ventral.block03.attn.qkv.weight`. A dorsal branch that shares its first
//! blocks with the ventral branch simply resolves those block names to the
//! ventral prefix, so both branches read and update one tensor.

mod config;

pub use config::{InputShape, LossOn, ModelConfig, PoolMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::patching::{sincos_pos_embed, GridLayout, MaskSpec};
use crate::targets::{tap_targets, target_dim, TargetKind, TokenGeometry};
use crate::BranchKind;

/// Per-block parameter suffixes, in insertion order.
pub const BLOCK_PARAMS: [&str; 12] = [
    "norm1.weight",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Blocks `1..=upto` of a branch are stored under `owner`'s names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedBlocks {
    pub owner: BranchKind,
    pub upto: usize,
}

/// Static description of one branch: geometry, tap targets and naming.
#[derive(Clone, Debug)]
pub struct Branch {
    pub kind: BranchKind,
    pub cfg: ModelConfig,
    pub input: InputShape,
    pub layout: GridLayout,
    pub targets: Vec<TargetKind>,
    pub target_dims: Vec<usize>,
    pub shared: Option<SharedBlocks>,
    pos: Tensor<f64>,
    dec_pos: Tensor<f64>,
}

impl Branch {
    /// `gabor_kernels` sizes the texture target rows.
    pub fn new(
        kind: BranchKind,
        cfg: ModelConfig,
        input: InputShape,
        gabor_kernels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch;
        if input.height % p != 0 || input.width % p != 0 || input.height == 0 || input.width == 0 {
            return Err(config_err!(
                "{}x{} input not divisible into {p}x{p} patches",
                input.height,
                input.width
            ));
        }
        let (gh, gw) = (input.height / p, input.width / p);
        let layout = match kind {
            BranchKind::Ventral => {
                if input.frames != 1 {
                    return Err(config_err!("image branch takes single frames"));
                }
                GridLayout::Image {
                    gh,
                    gw,
                    patch: p,
                    channels: input.channels,
                }
            }
            BranchKind::Dorsal => {
                if input.frames == 0 || input.frames % cfg.tubelet != 0 {
                    return Err(config_err!(
                        "{} frames not divisible into tubelets of {}",
                        input.frames,
                        cfg.tubelet
                    ));
                }
                GridLayout::Video {
                    gt: input.frames / cfg.tubelet,
                    gh,
                    gw,
                    tubelet: cfg.tubelet,
                    patch: p,
                    channels: input.channels,
                }
            }
        };
        let targets = tap_targets(kind, cfg.num_taps())?;
        let geom = TokenGeometry {
            patch: p,
            tubelet: cfg.tubelet,
        };
        let target_dims = targets
            .iter()
            .map(|&t| target_dim(t, kind, geom, input.channels, gabor_kernels))
            .collect::<Result<Vec<_>>>()?;
        let dims = layout.dims();
        let pos = sincos_pos_embed(&dims, cfg.d_model)?;
        let dec_pos = sincos_pos_embed(&dims, cfg.decoder_width())?;
        Ok(Branch {
            kind,
            cfg,
            input,
            layout,
            targets,
            target_dims,
            shared: None,
            pos,
            dec_pos,
        })
    }

    pub fn with_shared(mut self, shared: Option<SharedBlocks>) -> Result<Self> {
        if let Some(s) = shared {
            if s.owner == self.kind && s.upto > 0 {
                return Err(config_err!("a branch cannot share blocks with itself"));
            }
            if s.upto > self.cfg.depth {
                return Err(config_err!(
                    "shared prefix {} exceeds depth {}",
                    s.upto,
                    self.cfg.depth
                ));
            }
        }
        self.shared = shared.filter(|s| s.upto > 0);
        Ok(self)
    }

    pub fn prefix(&self) -> &'static str {
        self.kind.name()
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.num_tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.layout.token_dim()
    }

    pub fn is_shared_block(&self, block: usize) -> bool {
        self.shared.is_some_and(|s| block <= s.upto)
    }

    /// Storage prefix of 1-based block `block`.
    pub fn block_prefix(&self, block: usize) -> String {
        let owner = match self.shared {
            Some(s) if block <= s.upto => s.owner.name(),
            _ => self.prefix(),
        };
        format!("{owner}.block{block:02}")
    }

    pub fn block_names(&self, block: usize) -> Vec<String> {
        let p = self.block_prefix(block);
        BLOCK_PARAMS.iter().map(|s| format!("{p}.{s}")).collect()
    }

    /// Prefix of the decoder for 0-based tap `tap`.
    pub fn decoder_prefix(&self, tap: usize) -> String {
        format!("{}.decoder{}", self.prefix(), tap + 1)
    }

    fn decoder_is_linear(&self, tap: usize) -> bool {
        self.targets[tap] == TargetKind::Gabor
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix())
    }

    /// Names of every parameter this branch reads for pretraining, in
    /// insertion order.
    pub fn pretrain_param_names(&self, store: &ParamStore<impl Scalar>) -> Vec<String> {
        let own = format!("{}.", self.prefix());
        let mut names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(&own) && !n.contains(".head.") && !n.ends_with("cls_token"))
            .map(str::to_string)
            .collect();
        if let Some(s) = self.shared {
            for b in 1..=s.upto {
                names.extend(self.block_names(b));
            }
        }
        names
    }

    /// Encoder positional rows at `positions`.
    fn pos_rows<S: Scalar>(&self, table: &Tensor<f64>, positions: &[usize]) -> Result<Tensor<S>> {
        Ok(table.gather_rows(positions)?.cast())
    }

    pub fn pos_table(&self) -> &Tensor<f64> {
        &self.pos
    }
}

/// Truncated normal (`|z| <= 2`) and constant initializers over one stream.
struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    fn new(seed: u64, std: f64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    fn trunc_normal<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break S::of(z * self.std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches length")
    }
}

fn insert_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &mut Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.weight"), init.trunc_normal(&[fan_in, fan_out]))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

fn insert_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.weight"), Tensor::full(&[width], S::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))
}

fn insert_block<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &mut Init,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
) -> Result<()> {
    let hidden = width * mlp_ratio;
    insert_norm(store, &format!("{prefix}.norm1"), width)?;
    insert_linear(store, init, &format!("{prefix}.attn.qkv"), width, 3 * width)?;
    insert_linear(store, init, &format!("{prefix}.attn.proj"), width, width)?;
    insert_norm(store, &format!("{prefix}.norm2"), width)?;
    insert_linear(store, init, &format!("{prefix}.mlp.fc1"), width, hidden)?;
    insert_linear(store, init, &format!("{prefix}.mlp.fc2"), hidden, width)
}

/// Fresh encoder, mask token and decoders for `branch`, deterministic in `seed`.
///
/// Blocks stored under another branch's names are expected to exist already
/// and are not created.
pub fn init_branch<S: Scalar>(store: &mut ParamStore<S>, branch: &Branch, seed: u64) -> Result<()> {
    let cfg = &branch.cfg;
    let mut init = Init::new(seed, cfg.init_std);
    insert_linear(store, &mut init, &branch.name("embed"), branch.token_dim(), cfg.d_model)?;
    for b in 1..=cfg.depth {
        if branch.is_shared_block(b) {
            check_present(store, &branch.block_names(b))?;
        } else {
            insert_block(store, &mut init, &branch.block_prefix(b), cfg.d_model, cfg.mlp_ratio)?;
        }
    }
    init_decoders(store, branch, &mut init)
}

fn init_decoders<S: Scalar>(store: &mut ParamStore<S>, branch: &Branch, init: &mut Init) -> Result<()> {
    let cfg = &branch.cfg;
    let dd = cfg.decoder_width();
    store.insert(branch.name("mask_token"), init.trunc_normal(&[1, dd]))?;
    for tap in 0..cfg.num_taps() {
        let p = branch.decoder_prefix(tap);
        insert_norm(store, &format!("{p}.norm"), cfg.d_model)?;
        insert_linear(store, init, &format!("{p}.embed"), cfg.d_model, dd)?;
        if !branch.decoder_is_linear(tap) {
            for k in 1..=cfg.decoder_depth {
                insert_block(store, init, &format!("{p}.block{k:02}"), dd, cfg.mlp_ratio)?;
            }
            insert_norm(store, &format!("{p}.norm_out"), dd)?;
        }
        insert_linear(store, init, &format!("{p}.head"), dd, branch.target_dims[tap])?;
    }
    Ok(())
}

fn check_present<S: Scalar>(store: &ParamStore<S>, names: &[String]) -> Result<()> {
    match names.iter().find(|n| !store.contains(n)) {
        Some(n) => Err(config_err!("shared parameter {n} is missing")),
        None => Ok(()),
    }
}

/// A standalone store holding one freshly initialized branch.
pub fn init_encoder<S: Scalar>(branch: &Branch, seed: u64) -> Result<ParamStore<S>> {
    if branch.shared.is_some() {
        return Err(config_err!("a standalone encoder cannot share blocks"));
    }
    let mut store = ParamStore::new();
    init_branch(&mut store, branch, seed)?;
    Ok(store)
}

/// Classification head (and class token when pooling by it).
pub fn init_head<S: Scalar>(
    store: &mut ParamStore<S>,
    branch: &Branch,
    classes: usize,
    pool: PoolMode,
    seed: u64,
) -> Result<()> {
    if classes < 2 {
        return Err(config_err!("a classifier needs at least 2 classes, got {classes}"));
    }
    let d = branch.cfg.d_model;
    let mut init = Init::new(seed, branch.cfg.init_std);
    insert_norm(store, &branch.name("head.norm"), d)?;
    insert_linear(store, &mut init, &branch.name("head.fc"), d, classes)?;
    if pool == PoolMode::ClassToken {
        store.insert(branch.name("cls_token"), init.trunc_normal(&[1, d]))?;
    }
    Ok(())
}

fn linear<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

fn norm<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    prefix: &str,
    eps: f64,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b, eps)
}

/// Pre-norm transformer block over `batch` sequences of `seq` rows.
#[allow(clippy::too_many_arguments)]
fn block<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = norm(g, store, x, &format!("{prefix}.norm1"), eps)?;
    let qkv = linear(g, store, h, &format!("{prefix}.attn.qkv"))?;
    let a = g.attention(qkv, batch, seq, heads)?;
    let a = linear(g, store, a, &format!("{prefix}.attn.proj"))?;
    let x = g.add(x, a)?;
    let h = norm(g, store, x, &format!("{prefix}.norm2"), eps)?;
    let h = linear(g, store, h, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h);
    let h = linear(g, store, h, &format!("{prefix}.mlp.fc2"))?;
    g.add(x, h)
}

/// Token embedding plus (optionally) the positional code of each row.
///
/// `tokens` is `(batch * n, token_dim)`, `positions` gives each row's grid index.
pub fn embed_tokens<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    tokens: &Tensor<S>,
    positions: &[usize],
    with_pos: bool,
) -> Result<Var> {
    if tokens.ndim() != 2 || tokens.cols() != branch.token_dim() {
        return Err(shape_err!(
            "tokens {:?} do not match token dim {}",
            tokens.shape(),
            branch.token_dim()
        ));
    }
    if positions.len() != tokens.rows() {
        return Err(shape_err!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.rows()
        ));
    }
    let x = g.constant(tokens.clone());
    let x = linear(g, store, x, &branch.name("embed"))?;
    if !with_pos {
        return Ok(x);
    }
    let p = g.constant(branch.pos_rows(&branch.pos, positions)?);
    g.add(x, p)
}

fn run_blocks<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    mut x: Var,
    batch: usize,
) -> Result<Vec<Var>> {
    let cfg = &branch.cfg;
    let rows = g.value(x).rows();
    if batch == 0 || rows % batch != 0 {
        return Err(shape_err!("{rows} rows do not split into {batch} sequences"));
    }
    let seq = rows / batch;
    let mut taps = Vec::with_capacity(cfg.num_taps());
    for b in 1..=cfg.depth {
        x = block(g, store, &branch.block_prefix(b), x, batch, seq, cfg.heads, cfg.ln_eps)?;
        if cfg.separation.contains(&b) {
            taps.push(x);
        }
    }
    Ok(taps)
}

/// Embeds `batch` equal-length token sequences and returns the activation
/// after every tapped block; the last entry is the full-depth output.
pub fn encoder_forward_with_taps<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    tokens: &Tensor<S>,
    positions: &[usize],
    batch: usize,
    with_pos: bool,
) -> Result<Vec<Var>> {
    let x = embed_tokens(g, store, branch, tokens, positions, with_pos)?;
    run_blocks(g, store, branch, x, batch)
}

/// Rows each sample contributes to the decoder output, in order.
pub fn output_positions(mask: &MaskSpec, loss_on: LossOn) -> Vec<usize> {
    match loss_on {
        LossOn::Masked => mask.masked.clone(),
        LossOn::All => (0..mask.num_tokens).collect(),
    }
}

/// Predictions of decoder `tap` for every sample's output positions
/// (see [`output_positions`]), samples concatenated in order.
///
/// `tap_act` holds the encoder rows of the visible tokens, `(batch * n_vis, d)`.
pub fn decoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    tap: usize,
    tap_act: Var,
    masks: &[MaskSpec],
    loss_on: LossOn,
) -> Result<Var> {
    let cfg = &branch.cfg;
    if tap >= cfg.num_taps() {
        return Err(config_err!("tap {tap} out of range for {} taps", cfg.num_taps()));
    }
    let n = branch.num_tokens();
    let batch = masks.len();
    let n_vis = masks.first().map_or(0, |m| m.visible.len());
    if batch == 0 {
        return Err(contract_err!("decoder needs at least one mask"));
    }
    if masks.iter().any(|m| m.num_tokens != n || m.visible.len() != n_vis) {
        return Err(contract_err!(
            "masks must cover {n} tokens with equal visible counts"
        ));
    }
    if g.shape(tap_act) != [batch * n_vis, cfg.d_model] {
        return Err(shape_err!(
            "tap activation {:?} does not match {batch} x {n_vis} visible rows",
            g.shape(tap_act)
        ));
    }
    let dd = cfg.decoder_width();
    let p = branch.decoder_prefix(tap);
    let h = norm(g, store, tap_act, &format!("{p}.norm"), cfg.ln_eps)?;
    let h = linear(g, store, h, &format!("{p}.embed"))?;
    let mt = g.param(store, &branch.name("mask_token"))?;
    let src = g.concat_rows(&[h, mt])?;
    let mt_row = batch * n_vis;

    // source row of position j in sample b: its visible embedding or the mask token
    let slot: Vec<Vec<usize>> = masks
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let mut s = vec![mt_row; n];
            for (k, &j) in m.visible.iter().enumerate() {
                s[j] = b * n_vis + k;
            }
            s
        })
        .collect();
    let outs: Vec<Vec<usize>> = masks.iter().map(|m| output_positions(m, loss_on)).collect();

    let z = if branch.decoder_is_linear(tap) {
        let ctx = if n_vis > 0 {
            g.mean_groups(h, batch)?
        } else {
            g.constant(Tensor::zeros(&[batch, dd]))
        };
        let src_idx = outs
            .iter()
            .enumerate()
            .flat_map(|(b, o)| o.iter().map(|&j| slot[b][j]).collect::<Vec<_>>())
            .collect();
        let ctx_idx = outs
            .iter()
            .enumerate()
            .flat_map(|(b, o)| std::iter::repeat(b).take(o.len()))
            .collect();
        let pos: Vec<usize> = outs.concat();
        let z = g.gather_rows(src, src_idx)?;
        let c = g.gather_rows(ctx, ctx_idx)?;
        let z = g.add(z, c)?;
        let pc = g.constant(branch.pos_rows(&branch.dec_pos, &pos)?);
        let z = g.add(z, pc)?;
        g.gelu(z)
    } else {
        let full_idx: Vec<usize> = slot.concat();
        let all_pos: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let z = g.gather_rows(src, full_idx)?;
        let pc = g.constant(branch.pos_rows(&branch.dec_pos, &all_pos)?);
        let mut z = g.add(z, pc)?;
        for k in 1..=cfg.decoder_depth {
            z = block(
                g,
                store,
                &format!("{p}.block{k:02}"),
                z,
                batch,
                n,
                cfg.decoder_heads(),
                cfg.ln_eps,
            )?;
        }
        let z = norm(g, store, z, &format!("{p}.norm_out"), cfg.ln_eps)?;
        let rows = outs
            .iter()
            .enumerate()
            .flat_map(|(b, o)| o.iter().map(move |&j| b * n + j))
            .collect();
        g.gather_rows(z, rows)?
    };
    linear(g, store, z, &format!("{p}.head"))
}

/// Pooled final-block features of full (unmasked) token grids, `(batch, d)`.
///
/// `tokens` is `(batch * N, token_dim)` in grid order.
pub fn encode_pooled<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    tokens: &Tensor<S>,
    batch: usize,
    pool: PoolMode,
) -> Result<Var> {
    let n = branch.num_tokens();
    if tokens.ndim() != 2 || tokens.rows() != batch * n {
        return Err(shape_err!(
            "expected {batch} x {n} tokens, got {:?}",
            tokens.shape()
        ));
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
    let x = embed_tokens(g, store, branch, tokens, &positions, true)?;
    match pool {
        PoolMode::Mean => {
            let out = *run_blocks(g, store, branch, x, batch)?.last().expect("at least one tap");
            g.mean_groups(out, batch)
        }
        PoolMode::ClassToken => {
            let cls = g.param(store, &branch.name("cls_token"))?;
            let src = g.concat_rows(&[x, cls])?;
            let cls_row = batch * n;
            let idx = (0..batch)
                .flat_map(|b| std::iter::once(cls_row).chain(b * n..(b + 1) * n))
                .collect();
            let x = g.gather_rows(src, idx)?;
            let out = *run_blocks(g, store, branch, x, batch)?.last().expect("at least one tap");
            g.gather_rows(out, (0..batch).map(|b| b * (n + 1)).collect())
        }
    }
}

/// Layer norm and linear classifier over pooled features.
pub fn head_logits<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    features: Var,
) -> Result<Var> {
    let h = norm(g, store, features, &branch.name("head.norm"), branch.cfg.ln_eps)?;
    linear(g, store, h, &branch.name("head.fc"))
}

/// Class logits `(batch, classes)` for full token grids.
pub fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    tokens: &Tensor<S>,
    batch: usize,
    pool: PoolMode,
) -> Result<Var> {
    let f = encode_pooled(g, store, branch, tokens, batch, pool)?;
    head_logits(g, store, branch, f)
}

/// Initializes the dorsal branch from ventral weights.
///
/// The cube embedding repeats the patch embedding across the tubelet's
/// frames, scaled by `1 / tubelet`, so a static clip embeds exactly like its
/// frame. Unshared blocks are copied verbatim; mask token and decoders are
/// drawn fresh from `seed`.
pub fn inflate_ventral_to_dorsal<S: Scalar>(
    store: &mut ParamStore<S>,
    ventral: &Branch,
    dorsal: &Branch,
    seed: u64,
) -> Result<()> {
    let (vc, dc) = (&ventral.cfg, &dorsal.cfg);
    if ventral.kind != BranchKind::Ventral || dorsal.kind != BranchKind::Dorsal {
        return Err(config_err!("inflation maps a ventral branch onto a dorsal one"));
    }
    if vc.d_model != dc.d_model || vc.depth != dc.depth || vc.heads != dc.heads || vc.mlp_ratio != dc.mlp_ratio {
        return Err(config_err!(
            "encoder shapes differ: d_model {}/{}, depth {}/{}, heads {}/{}",
            vc.d_model,
            dc.d_model,
            vc.depth,
            dc.depth,
            vc.heads,
            dc.heads
        ));
    }
    if vc.patch != dc.patch || ventral.input.channels != dorsal.input.channels {
        return Err(config_err!("patch size and channels must match for inflation"));
    }
    if dorsal.shared.is_some_and(|s| s.owner != BranchKind::Ventral) {
        return Err(config_err!("dorsal blocks can only be shared with the ventral branch"));
    }
    let ct = dc.tubelet;
    let w = store.value(&ventral.name("embed.weight"))?;
    let scale = S::one() / S::of(ct as f64);
    let mut data = Vec::with_capacity(w.numel() * ct);
    for _ in 0..ct {
        data.extend(w.data().iter().map(|&v| v * scale));
    }
    let weight = Tensor::new(vec![w.rows() * ct, w.cols()], data)?;
    let bias = store.value(&ventral.name("embed.bias"))?.clone();
    store.insert(dorsal.name("embed.weight"), weight)?;
    store.insert(dorsal.name("embed.bias"), bias)?;
    for b in 1..=dc.depth {
        if dorsal.is_shared_block(b) {
            continue;
        }
        for (src, dst) in ventral.block_names(b).iter().zip(dorsal.block_names(b)) {
            let v = store.value(src)?.clone();
            store.insert(dst, v)?;
        }
    }
    let mut init = Init::new(seed, dc.init_std);
    init_decoders(store, dorsal, &mut init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::sample_tube_mask;

    fn image_shape() -> InputShape {
        InputShape {
            frames: 1,
            height: 32,
            width: 32,
            channels: 3,
        }
    }

    fn clip_shape() -> InputShape {
        InputShape {
            frames: 8,
            ..image_shape()
        }
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            depth: 4,
            separation: vec![1, 2, 4],
            d_model: 32,
            heads: 4,
            ..Default::default()
        }
    }

    fn rand_tokens<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| S::of(rng.gen_range(-1.0..1.0))).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn block_count(d: usize, r: usize) -> usize {
        // two norms, qkv, proj, fc1, fc2
        4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * r * d + r * d) + (r * d * d + d)
    }

    #[test]
    fn same_seed_bit_identical() {
        let b = Branch::new(BranchKind::Ventral, toy_cfg(), image_shape(), 8).unwrap();
        let a = init_encoder::<f32>(&b, 5).unwrap();
        assert_eq!(a, init_encoder::<f32>(&b, 5).unwrap());
        assert_ne!(a, init_encoder::<f32>(&b, 6).unwrap());
    }

    #[test]
    fn default_parameter_census() {
        let cfg = ModelConfig::default();
        let b = Branch::new(BranchKind::Ventral, cfg.clone(), image_shape(), 8).unwrap();
        let s = init_encoder::<f32>(&b, 0).unwrap();
        let (d, dd, r) = (96, 48, 4);
        assert_eq!(block_count(d, r), 12 * d * d + 13 * d);
        let embed = 48 * d + d;
        let blocks = 12 * (12 * d * d + 13 * d);
        let enc = s.num_elements_with_prefix("ventral.embed") + s.num_elements_with_prefix("ventral.block");
        assert_eq!(enc, embed + blocks);
        let dec_in = 2 * d + d * dd + dd;
        let linear_dec = dec_in + dd * 128 + 128;
        let tf = |out: usize| dec_in + (12 * dd * dd + 13 * dd) + 2 * dd + dd * out + out;
        let total = embed + blocks + dd + linear_dec + tf(16) + tf(48);
        assert_eq!(s.num_elements(), total);
        assert_eq!(b.targets.len(), 3);
        for tap in 0..3 {
            assert!(s.contains(&format!("ventral.decoder{}.head.weight", tap + 1)));
        }
        assert!(!s.contains("ventral.decoder4.head.weight"));
        // the texture decoder carries no attention
        assert!(!s.names().any(|n| n.starts_with("ventral.decoder1.") && n.contains("attn")));
        assert!(s.names().any(|n| n.starts_with("ventral.decoder2.") && n.contains("attn")));
    }

    #[test]
    fn init_statistics() {
        let b = Branch::new(BranchKind::Ventral, ModelConfig::default(), image_shape(), 8).unwrap();
        let s = init_encoder::<f64>(&b, 1).unwrap();
        let w = s.value("ventral.block01.mlp.fc1.weight").unwrap();
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        // truncation at 2 sigma shrinks the spread to about 0.88 of std
        assert!((sd - 0.02 * 0.8796).abs() < 1e-3, "{sd}");
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(s.value("ventral.block01.mlp.fc1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.value("ventral.block01.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = toy_cfg();
        cfg.separation = vec![2, 2, 4];
        assert!(Branch::new(BranchKind::Ventral, cfg.clone(), image_shape(), 8).is_err());
        cfg.separation = vec![1, 3];
        assert!(Branch::new(BranchKind::Ventral, cfg.clone(), image_shape(), 8).is_err());
        cfg = toy_cfg();
        cfg.heads = 5;
        assert!(Branch::new(BranchKind::Ventral, cfg, image_shape(), 8).is_err());
    }

    #[test]
    fn tap_shapes() {
        let b = Branch::new(BranchKind::Dorsal, ModelConfig::default(), clip_shape(), 8).unwrap();
        let s = init_encoder::<f32>(&b, 0).unwrap();
        let mask = sample_tube_mask(64, 4, 0.9, 3).unwrap();
        assert_eq!(mask.visible.len(), 24);
        let positions: Vec<usize> = mask.visible.iter().copied().chain(0..2).collect();
        let tokens = rand_tokens::<f32>(26, 96, 1);
        let mut g = Graph::new();
        let taps = encoder_forward_with_taps(&mut g, &s, &b, &tokens, &positions, 1, true).unwrap();
        assert_eq!(taps.len(), 3);
        for t in taps {
            assert_eq!(g.shape(t), &[26, 96]);
        }
        let bad = rand_tokens::<f32>(26, 95, 1);
        assert!(encoder_forward_with_taps(&mut g, &s, &b, &bad, &positions, 1, true).is_err());
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let b = Branch::new(BranchKind::Ventral, toy_cfg(), image_shape(), 8).unwrap();
        let s = init_encoder::<f64>(&b, 2).unwrap();
        let tokens = rand_tokens::<f64>(10, 48, 4);
        let perm = [3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let permuted = tokens.gather_rows(&perm).unwrap();
        let pos: Vec<usize> = (0..10).collect();
        let mut g = Graph::new();
        let a = encoder_forward_with_taps(&mut g, &s, &b, &tokens, &pos, 1, false).unwrap();
        let p = encoder_forward_with_taps(&mut g, &s, &b, &permuted, &pos, 1, false).unwrap();
        for (ta, tp) in a.iter().zip(&p) {
            let expect = g.value(*ta).gather_rows(&perm).unwrap();
            assert!(expect.max_abs_diff(g.value(*tp)) < 1e-12);
        }
    }

    #[test]
    fn last_tap_is_plain_encoder_output() {
        let b = Branch::new(BranchKind::Ventral, ModelConfig::default(), image_shape(), 8).unwrap();
        let s = init_encoder::<f32>(&b, 3).unwrap();
        let tokens = rand_tokens::<f32>(16, 48, 5);
        let pos: Vec<usize> = (0..16).map(|i| i * 3).collect();
        let mut g = Graph::new();
        let taps = encoder_forward_with_taps(&mut g, &s, &b, &tokens, &pos, 1, true).unwrap();
        // independent composition of the same blocks, no taps recorded
        let mut g2 = Graph::new();
        let mut x = embed_tokens(&mut g2, &s, &b, &tokens, &pos, true).unwrap();
        for k in 1..=12 {
            x = block(&mut g2, &s, &format!("ventral.block{k:02}"), x, 1, 16, 4, 1e-6).unwrap();
        }
        assert_eq!(g.value(taps[2]), g2.value(x));
    }

    #[test]
    fn decoder_output_rows() {
        let b = Branch::new(BranchKind::Dorsal, ModelConfig::default(), clip_shape(), 8).unwrap();
        let s = init_encoder::<f32>(&b, 0).unwrap();
        assert_eq!(b.target_dims, vec![2 * 16 * 8, 2 * 16, 48]);
        let mask = sample_tube_mask(64, 4, 0.9, 3).unwrap();
        let tokens = rand_tokens::<f32>(24, 96, 1);
        let mut g = Graph::new();
        let taps = encoder_forward_with_taps(&mut g, &s, &b, &tokens, &mask.visible, 1, true).unwrap();
        for (tap, &dim) in b.target_dims.iter().enumerate() {
            let out = decoder_forward(&mut g, &s, &b, tap, taps[tap], &[mask.clone()], LossOn::Masked).unwrap();
            assert_eq!(g.shape(out), &[232, dim]);
            let all = decoder_forward(&mut g, &s, &b, tap, taps[tap], &[mask.clone()], LossOn::All).unwrap();
            assert_eq!(g.shape(all), &[256, dim]);
        }

        let none = MaskSpec::none(256);
        let tokens = rand_tokens::<f32>(256, 96, 2);
        let taps = encoder_forward_with_taps(&mut g, &s, &b, &tokens, &none.visible, 1, true).unwrap();
        for tap in 0..3 {
            let out = decoder_forward(&mut g, &s, &b, tap, taps[tap], &[none.clone()], LossOn::Masked).unwrap();
            assert_eq!(g.shape(out)[0], 0);
        }
    }

    #[test]
    fn inflation_contracts() {
        let cfg = toy_cfg();
        let v = Branch::new(BranchKind::Ventral, cfg.clone(), image_shape(), 8).unwrap();
        let d = Branch::new(BranchKind::Dorsal, cfg.clone(), clip_shape(), 8).unwrap();
        let mut s = init_encoder::<f32>(&v, 1).unwrap();
        inflate_ventral_to_dorsal(&mut s, &v, &d, 2).unwrap();
        for blk in 1..=4 {
            for (a, b) in v.block_names(blk).iter().zip(d.block_names(blk)) {
                assert_eq!(s.value(a).unwrap(), s.value(&b).unwrap());
            }
        }
        let vh = s.value("ventral.decoder2.embed.weight").unwrap();
        assert_ne!(vh, s.value("dorsal.decoder2.embed.weight").unwrap());
        assert_ne!(s.value("ventral.mask_token").unwrap(), s.value("dorsal.mask_token").unwrap());

        // a static cube embeds like its frame patch
        let frame = rand_tokens::<f32>(1, 48, 9);
        let cube = Tensor::new(vec![1, 96], [frame.data(), frame.data()].concat()).unwrap();
        let mut g = Graph::new();
        let ev = embed_tokens(&mut g, &s, &v, &frame, &[0], false).unwrap();
        let ed = embed_tokens(&mut g, &s, &d, &cube, &[0], false).unwrap();
        assert!(g.value(ev).max_abs_diff(g.value(ed)) < 1e-6);

        let mut other = cfg;
        other.d_model = 64;
        let d2 = Branch::new(BranchKind::Dorsal, other, clip_shape(), 8).unwrap();
        let mut s2 = init_encoder::<f32>(&v, 1).unwrap();
        assert!(matches!(
            inflate_ventral_to_dorsal(&mut s2, &v, &d2, 2),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn shared_blocks_resolve_to_owner() {
        let cfg = toy_cfg();
        let v = Branch::new(BranchKind::Ventral, cfg.clone(), image_shape(), 8).unwrap();
        let d = Branch::new(BranchKind::Dorsal, cfg, clip_shape(), 8)
            .unwrap()
            .with_shared(Some(SharedBlocks {
                owner: BranchKind::Ventral,
                upto: 2,
            }))
            .unwrap();
        assert_eq!(d.block_prefix(2), "ventral.block02");
        assert_eq!(d.block_prefix(3), "dorsal.block03");
        let mut s = init_encoder::<f32>(&v, 1).unwrap();
        inflate_ventral_to_dorsal(&mut s, &v, &d, 2).unwrap();
        assert!(!s.contains("dorsal.block01.norm1.weight"));
        assert!(s.contains("dorsal.block03.norm1.weight"));
    }

    #[test]
    fn head_shapes_and_zero_head() {
        let cfg = toy_cfg();
        let b = Branch::new(BranchKind::Dorsal, cfg, clip_shape(), 8).unwrap();
        let mut s = init_encoder::<f32>(&b, 1).unwrap();
        init_head(&mut s, &b, 4, PoolMode::ClassToken, 3).unwrap();
        let tokens = rand_tokens::<f32>(8 * 256, 96, 4);
        for pool in [PoolMode::Mean, PoolMode::ClassToken] {
            let mut g = Graph::new();
            let l = head_forward(&mut g, &s, &b, &tokens, 8, pool).unwrap();
            assert_eq!(g.shape(l), &[8, 4]);
        }
        s.set("dorsal.head.fc.weight", Tensor::zeros(&[32, 4]));
        let mut g = Graph::new();
        let l = head_forward(&mut g, &s, &b, &tokens, 8, PoolMode::Mean).unwrap();
        let v = g.value(l);
        for r in 0..8 {
            assert!(v.row(r).iter().all(|&x| x == v.row(r)[0]));
        }
        assert!("bogus".parse::<PoolMode>().is_err());
    }

    #[test]
    fn mean_pool_invariant_to_joint_permutation() {
        let b = Branch::new(BranchKind::Ventral, toy_cfg(), image_shape(), 8).unwrap();
        let mut s = init_encoder::<f64>(&b, 1).unwrap();
        init_head(&mut s, &b, 4, PoolMode::Mean, 3).unwrap();
        let tokens = rand_tokens::<f64>(64, 48, 4);
        let perm: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 64).collect();
        let mut g = Graph::new();
        let x = embed_tokens(&mut g, &s, &b, &tokens, &(0..64).collect::<Vec<_>>(), true).unwrap();
        let out = *run_blocks(&mut g, &s, &b, x, 1).unwrap().last().unwrap();
        let pooled = g.mean_groups(out, 1).unwrap();
        let la = head_logits(&mut g, &s, &b, pooled).unwrap();
        // tokens and their positions permuted together
        let x = embed_tokens(&mut g, &s, &b, &tokens.gather_rows(&perm).unwrap(), &perm, true).unwrap();
        let out = *run_blocks(&mut g, &s, &b, x, 1).unwrap().last().unwrap();
        let pooled = g.mean_groups(out, 1).unwrap();
        let lb = head_logits(&mut g, &s, &b, pooled).unwrap();
        assert!(g.value(la).max_abs_diff(g.value(lb)) < 1e-12);
    }
}
