//! Weighted multi-tap reconstruction losses, the joint two-branch objective
//! with partial weight sharing, pretraining loops and finetuning.

mod finetune;
mod schedule;

pub use finetune::{
    accuracy, finetune, EpochReport, FinetuneConfig, FinetuneReport, LabeledTokens,
};
pub use schedule::{lr_at_step, LrSchedule};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{
    decoder_forward, encoder_forward_with_taps, inflate_ventral_to_dorsal, output_positions,
    Branch, LossOn, SharedBlocks,
};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimState, ParamStore, Scalar, Tensor, Var};
use crate::patching::{
    cubify_clip, patchify_image, sample_random_mask, sample_tube_mask, Clip, Image, MaskConfig,
    MaskSpec, MaskStrategy,
};
use crate::targets::{build_target_set, BranchInput, GaborKernel, TargetConfig, TargetSet, TokenGeometry};
use crate::BranchKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    None,
    #[default]
    Partial,
    All,
}

impl std::str::FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Sharing::None),
            "partial" => Ok(Sharing::Partial),
            "all" => Ok(Sharing::All),
            other => Err(config_err!("unknown sharing mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the video objective in the joint loss.
    pub lambda: f64,
    /// Per-tap loss weights, shared by both branches.
    pub tap_weights: Vec<f64>,
    pub sharing: Sharing,
    /// Last shared block under partial sharing; defaults to the second tap.
    pub shared_prefix: Option<usize>,
    pub mask: MaskConfig,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub adamw: AdamWConfig,
    /// Images per ventral step, clips per joint step.
    pub batch_size: usize,
    /// Ventral frames drawn from each clip during joint steps.
    pub frames_per_clip: usize,
    pub seed: u64,
    pub loss_on: LossOn,
    /// Train on the first `batch_size` samples with one fixed set of masks.
    pub fixed_batch: bool,
    /// Record elapsed milliseconds in every report (breaks byte-identical metrics).
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            tap_weights: vec![1.0; 3],
            sharing: Sharing::Partial,
            shared_prefix: None,
            mask: MaskConfig::default(),
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 50,
            total_steps: 1000,
            adamw: AdamWConfig::default(),
            batch_size: 8,
            frames_per_clip: 1,
            seed: 0,
            loss_on: LossOn::Masked,
            fixed_batch: false,
            log_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self, taps: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config_err!("lambda must be a finite non-negative value"));
        }
        if self.tap_weights.len() != taps {
            return Err(config_err!(
                "{} tap weights for {taps} taps",
                self.tap_weights.len()
            ));
        }
        if self.tap_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(config_err!("tap weights must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.frames_per_clip == 0 {
            return Err(config_err!("batch size and frames per clip must be positive"));
        }
        self.mask.validate()?;
        self.schedule().validate()
    }

    /// Number of leading encoder blocks stored once for both branches.
    pub fn shared_blocks(&self, separation: &[usize], depth: usize) -> Result<usize> {
        let bound = separation
            .get(1)
            .or(separation.first())
            .copied()
            .ok_or_else(|| config_err!("empty separation"))?;
        match self.sharing {
            Sharing::None => Ok(0),
            Sharing::All => Ok(depth),
            Sharing::Partial => {
                let k = self.shared_prefix.unwrap_or(bound);
                if k == 0 || k > bound {
                    return Err(config_err!(
                        "shared prefix {k} must lie in 1..={bound} (second tap)"
                    ));
                }
                Ok(k)
            }
        }
    }
}

/// Per-step losses of both branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub ventral_taps: Vec<f64>,
    pub dorsal_taps: Vec<f64>,
    pub l_v: f64,
    pub l_d: f64,
    pub l: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

pub fn loss_joint(l_v: f64, l_d: f64, lambda: f64) -> f64 {
    l_v + lambda * l_d
}

/// A sample cut into tokens, with its per-tap targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub grid: Tensor<f32>,
    pub targets: TargetSet,
}

pub fn tokenize(branch: &Branch, input: BranchInput<'_>) -> Result<Tensor<f32>> {
    let grid = match (branch.kind, input) {
        (BranchKind::Ventral, BranchInput::Image(img)) => patchify_image(img, branch.cfg.patch)?,
        (BranchKind::Dorsal, BranchInput::Clip(c)) => {
            cubify_clip(c, branch.cfg.tubelet, branch.cfg.patch)?
        }
        _ => return Err(config_err!("{} branch got the wrong input kind", branch.prefix())),
    };
    if grid.layout != branch.layout {
        return Err(config_err!(
            "input grid {:?} does not match branch grid {:?}",
            grid.layout,
            branch.layout
        ));
    }
    Ok(grid.tokens)
}

/// Everything needed to supervise one sample: raw tokens and tap targets.
pub struct TargetBuilder<'a> {
    pub cfg: &'a TargetConfig,
    pub bank: &'a [GaborKernel],
}

impl TargetBuilder<'_> {
    pub fn prepare(&self, branch: &Branch, input: BranchInput<'_>) -> Result<Prepared> {
        let grid = tokenize(branch, input)?;
        let geom = TokenGeometry {
            patch: branch.cfg.patch,
            tubelet: branch.cfg.tubelet,
        };
        let targets = build_target_set(input, &branch.targets, self.cfg, self.bank, geom)?;
        Ok(Prepared { grid, targets })
    }
}

/// Visible tokens of a batch with the targets each decoder must produce.
#[derive(Clone, Debug)]
pub struct MaskedBatch<S> {
    pub tokens: Tensor<S>,
    pub positions: Vec<usize>,
    pub masks: Vec<MaskSpec>,
    /// Per tap, rows for every sample's output positions in sample order.
    pub targets: Vec<Tensor<S>>,
}

impl MaskedBatch<f32> {
    pub fn assemble(samples: &[&Prepared], masks: Vec<MaskSpec>, loss_on: LossOn) -> Result<Self> {
        if samples.is_empty() || samples.len() != masks.len() {
            return Err(config_err!(
                "{} samples for {} masks",
                samples.len(),
                masks.len()
            ));
        }
        let cols = samples[0].grid.cols();
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let taps = samples[0].targets.maps.len();
        let mut targets: Vec<(Vec<f32>, usize, usize)> = samples[0]
            .targets
            .maps
            .iter()
            .map(|m| (Vec::new(), 0, m.cols()))
            .collect();
        for (s, m) in samples.iter().zip(&masks) {
            tokens.extend_from_slice(s.grid.gather_rows(&m.visible)?.data());
            positions.extend_from_slice(&m.visible);
            let out = output_positions(m, loss_on);
            for (t, map) in targets.iter_mut().zip(&s.targets.maps) {
                t.0.extend_from_slice(map.gather_rows(&out)?.data());
                t.1 += out.len();
            }
        }
        debug_assert_eq!(targets.len(), taps);
        Ok(MaskedBatch {
            tokens: Tensor::new(vec![positions.len(), cols], tokens)?,
            positions,
            masks,
            targets: targets
                .into_iter()
                .map(|(d, r, c)| Tensor::new(vec![r, c], d))
                .collect::<Result<_>>()?,
        })
    }

    pub fn cast<T: Scalar>(&self) -> MaskedBatch<T> {
        MaskedBatch {
            tokens: self.tokens.cast(),
            positions: self.positions.clone(),
            masks: self.masks.clone(),
            targets: self.targets.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Weighted sum of the per-tap reconstruction errors of one branch.
#[derive(Clone, Debug)]
pub struct BranchLoss {
    pub total: Var,
    pub taps: Vec<Var>,
}

pub fn branch_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    branch: &Branch,
    batch: &MaskedBatch<S>,
    weights: &[f64],
    loss_on: LossOn,
) -> Result<BranchLoss> {
    let taps_n = branch.cfg.num_taps();
    if weights.len() != taps_n || batch.targets.len() != taps_n {
        return Err(config_err!(
            "{} branch has {taps_n} taps but got {} weights and {} targets",
            branch.prefix(),
            weights.len(),
            batch.targets.len()
        ));
    }
    for (i, t) in batch.targets.iter().enumerate() {
        if t.cols() != branch.target_dims[i] {
            return Err(config_err!(
                "tap {} expects {} target width {}, got {}",
                i + 1,
                branch.targets[i].name(),
                branch.target_dims[i],
                t.cols()
            ));
        }
    }
    let acts = encoder_forward_with_taps(
        g,
        store,
        branch,
        &batch.tokens,
        &batch.positions,
        batch.masks.len(),
        true,
    )?;
    let mut taps = Vec::with_capacity(taps_n);
    let mut total: Option<Var> = None;
    for (i, &act) in acts.iter().enumerate() {
        let pred = decoder_forward(g, store, branch, i, act, &batch.masks, loss_on)?;
        let mse = g.mse(pred, batch.targets[i].clone())?;
        taps.push(mse);
        let w = g.scale(mse, weights[i]);
        total = Some(match total {
            None => w,
            Some(t) => g.add(t, w)?,
        });
    }
    Ok(BranchLoss {
        total: total.expect("at least one tap"),
        taps,
    })
}

/// `L = L_V + lambda * L_D` on the graph.
pub fn joint_loss_var<S: Scalar>(g: &mut Graph<S>, l_v: Var, l_d: Var, lambda: f64) -> Result<Var> {
    let d = g.scale(l_d, lambda);
    g.add(l_v, d)
}

/// Both branch batches for one joint step.
pub struct JointBatch<'a, S> {
    pub ventral: &'a MaskedBatch<S>,
    pub dorsal: &'a MaskedBatch<S>,
}

pub struct JointLoss {
    pub l: Var,
    pub ventral: BranchLoss,
    pub dorsal: BranchLoss,
}

pub fn joint_losses<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    ventral: &Branch,
    dorsal: &Branch,
    batch: JointBatch<'_, S>,
    cfg: &TrainConfig,
) -> Result<JointLoss> {
    let lv = branch_loss(g, store, ventral, batch.ventral, &cfg.tap_weights, cfg.loss_on)?;
    let ld = branch_loss(g, store, dorsal, batch.dorsal, &cfg.tap_weights, cfg.loss_on)?;
    let l = joint_loss_var(g, lv.total, ld.total, cfg.lambda)?;
    Ok(JointLoss {
        l,
        ventral: lv,
        dorsal: ld,
    })
}

fn item<S: Scalar>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().f64()
}

fn check_finite(step: usize, r: &LossReport) -> Result<()> {
    if r.l.is_finite() && r.l_v.is_finite() && r.l_d.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "non-finite loss at step {step}: L={} L_V={} L_D={} ventral taps {:?} dorsal taps {:?}",
        r.l, r.l_v, r.l_d, r.ventral_taps, r.dorsal_taps
    )))
}

/// Optimizer state and sampling stream of a running pretraining.
pub struct Trainer {
    pub optim: OptimState<f32>,
    rng: ChaCha8Rng,
    started: Instant,
}

impl Trainer {
    pub fn new(seed: u64) -> Self {
        Trainer {
            optim: OptimState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            started: Instant::now(),
        }
    }

    fn wall_ms(&self, cfg: &TrainConfig) -> Option<u64> {
        cfg.log_wall_ms.then(|| self.started.elapsed().as_millis() as u64)
    }

    fn seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

fn image_mask(branch: &Branch, cfg: &TrainConfig, seed: u64) -> Result<MaskSpec> {
    sample_random_mask(branch.num_tokens(), cfg.mask.ratio_image, seed)
}

fn clip_mask(branch: &Branch, cfg: &TrainConfig, seed: u64) -> Result<MaskSpec> {
    match cfg.mask.video_strategy {
        MaskStrategy::Tube => sample_tube_mask(
            branch.layout.spatial_tokens(),
            branch.layout.temporal_cubes(),
            cfg.mask.ratio_video,
            seed,
        ),
        MaskStrategy::Random => sample_random_mask(branch.num_tokens(), cfg.mask.ratio_video, seed),
    }
}

/// Backward through `loss` and one AdamW update at `lr`.
fn apply_update(
    g: &Graph<f32>,
    loss: Var,
    store: &mut ParamStore<f32>,
    optim: &mut OptimState<f32>,
    lr: f64,
    adamw: &AdamWConfig,
) -> Result<()> {
    store.zero_grad();
    g.backward(loss, store)?;
    if lr > 0.0 {
        adamw_step(store, optim, lr, adamw)?;
    }
    Ok(())
}

/// One ventral update on an assembled batch.
pub fn ventral_step(
    store: &mut ParamStore<f32>,
    trainer: &mut Trainer,
    branch: &Branch,
    batch: &MaskedBatch<f32>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let lv = branch_loss(&mut g, store, branch, batch, &cfg.tap_weights, cfg.loss_on)?;
    let l_v = item(&g, lv.total);
    let lr = lr_at_step(step, &cfg.schedule());
    let report = LossReport {
        step,
        lr,
        ventral_taps: lv.taps.iter().map(|&t| item(&g, t)).collect(),
        dorsal_taps: Vec::new(),
        l_v,
        l_d: 0.0,
        l: l_v,
        wall_ms: trainer.wall_ms(cfg),
    };
    check_finite(step, &report)?;
    apply_update(&g, lv.total, store, &mut trainer.optim, lr, &cfg.adamw)?;
    Ok(report)
}

/// One joint update: both objectives, one backward pass, one optimizer step.
/// Shared blocks receive the sum of both branches' gradients.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    store: &mut ParamStore<f32>,
    trainer: &mut Trainer,
    ventral: &Branch,
    dorsal: &Branch,
    batch: JointBatch<'_, f32>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let jl = joint_losses(&mut g, store, ventral, dorsal, batch, cfg)?;
    let lr = lr_at_step(step, &cfg.schedule());
    let report = LossReport {
        step,
        lr,
        ventral_taps: jl.ventral.taps.iter().map(|&t| item(&g, t)).collect(),
        dorsal_taps: jl.dorsal.taps.iter().map(|&t| item(&g, t)).collect(),
        l_v: item(&g, jl.ventral.total),
        l_d: item(&g, jl.dorsal.total),
        l: item(&g, jl.l),
        wall_ms: trainer.wall_ms(cfg),
    };
    check_finite(step, &report)?;
    apply_update(&g, jl.l, store, &mut trainer.optim, lr, &cfg.adamw)?;
    Ok(report)
}

/// Lazily built per-sample tokens and targets.
struct Cache {
    items: Vec<Option<Prepared>>,
}

impl Cache {
    fn new(n: usize) -> Self {
        Cache {
            items: (0..n).map(|_| None).collect(),
        }
    }

    fn get(&mut self, i: usize, build: impl FnOnce() -> Result<Prepared>) -> Result<&Prepared> {
        if self.items[i].is_none() {
            self.items[i] = Some(build()?);
        }
        Ok(self.items[i].as_ref().expect("just filled"))
    }
}

fn draw_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

/// Masked image modeling on the ventral branch alone.
///
/// `on_report` sees every step's losses (computed before that step's update).
pub fn pretrain_ventral(
    store: &mut ParamStore<f32>,
    branch: &Branch,
    images: &[Image],
    targets: &TargetBuilder<'_>,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if images.is_empty() {
        return Err(config_err!("ventral pretraining needs at least one image"));
    }
    cfg.validate(branch.cfg.num_taps())?;
    let mut trainer = Trainer::new(cfg.seed);
    let mut cache = Cache::new(images.len());
    let mut fixed: Option<MaskedBatch<f32>> = None;
    let mut reports = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let batch = match &fixed {
            Some(b) => b.clone(),
            None => {
                let idx = if cfg.fixed_batch {
                    (0..cfg.batch_size.min(images.len())).collect()
                } else {
                    draw_indices(&mut trainer.rng, images.len(), cfg.batch_size)
                };
                let masks = idx
                    .iter()
                    .map(|_| {
                        let s = trainer.seed();
                        image_mask(branch, cfg, s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for &i in &idx {
                    cache.get(i, || targets.prepare(branch, BranchInput::Image(&images[i])))?;
                }
                let samples: Vec<&Prepared> =
                    idx.iter().map(|&i| cache.items[i].as_ref().unwrap()).collect();
                let b = MaskedBatch::assemble(&samples, masks, cfg.loss_on)?;
                if cfg.fixed_batch {
                    fixed = Some(b.clone());
                }
                b
            }
        };
        let r = ventral_step(store, &mut trainer, branch, &batch, cfg, step)?;
        on_report(&r)?;
        reports.push(r);
    }
    Ok(reports)
}

/// Installs the configured block sharing on `dorsal`, inflates its weights
/// from the ventral branch in `store` and returns the ready dorsal branch.
pub fn setup_dorsal(
    store: &mut ParamStore<f32>,
    ventral: &Branch,
    dorsal: Branch,
    cfg: &TrainConfig,
) -> Result<Branch> {
    let upto = cfg.shared_blocks(&dorsal.cfg.separation, dorsal.cfg.depth)?;
    let dorsal = dorsal.with_shared(Some(SharedBlocks {
        owner: BranchKind::Ventral,
        upto,
    }))?;
    inflate_ventral_to_dorsal(store, ventral, &dorsal, cfg.seed ^ 0x5eed_d0a5)?;
    Ok(dorsal)
}

/// Joint image/video masked modeling. The dorsal branch is initialized from
/// the ventral weights already in `store`; ventral frames are drawn from the
/// same clips as the video batch.
pub fn pretrain_joint(
    store: &mut ParamStore<f32>,
    ventral: &Branch,
    dorsal: Branch,
    clips: &[Clip],
    targets: &TargetBuilder<'_>,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&LossReport) -> Result<()>,
) -> Result<(Branch, Vec<LossReport>)> {
    if clips.is_empty() {
        return Err(config_err!("joint pretraining needs at least one clip"));
    }
    cfg.validate(ventral.cfg.num_taps())?;
    if dorsal.cfg.num_taps() != ventral.cfg.num_taps() {
        return Err(config_err!("both branches need the same number of taps"));
    }
    let dorsal = setup_dorsal(store, ventral, dorsal, cfg)?;
    let frames = clips[0].frames;
    let mut trainer = Trainer::new(cfg.seed);
    let mut clip_cache = Cache::new(clips.len());
    let mut frame_cache = Cache::new(clips.len() * frames);
    let mut fixed: Option<(MaskedBatch<f32>, MaskedBatch<f32>)> = None;
    let mut reports = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let (vb, db) = match &fixed {
            Some(b) => b.clone(),
            None => {
                let idx: Vec<usize> = if cfg.fixed_batch {
                    (0..cfg.batch_size.min(clips.len())).collect()
                } else {
                    draw_indices(&mut trainer.rng, clips.len(), cfg.batch_size)
                };
                let mut frame_idx = Vec::with_capacity(idx.len() * cfg.frames_per_clip);
                for &c in &idx {
                    if clips[c].frames != frames {
                        return Err(Error::Data(format!("clip {c} has {} frames, expected {frames}", clips[c].frames)));
                    }
                    for _ in 0..cfg.frames_per_clip {
                        frame_idx.push((c, trainer.rng.gen_range(0..frames)));
                    }
                }
                let dmasks = idx
                    .iter()
                    .map(|_| {
                        let s = trainer.seed();
                        clip_mask(&dorsal, cfg, s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let vmasks = frame_idx
                    .iter()
                    .map(|_| {
                        let s = trainer.seed();
                        image_mask(ventral, cfg, s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for &c in &idx {
                    clip_cache.get(c, || targets.prepare(&dorsal, BranchInput::Clip(&clips[c])))?;
                }
                for &(c, t) in &frame_idx {
                    frame_cache.get(c * frames + t, || {
                        targets.prepare(ventral, BranchInput::Image(&clips[c].frame(t)))
                    })?;
                }
                let ds: Vec<&Prepared> =
                    idx.iter().map(|&c| clip_cache.items[c].as_ref().unwrap()).collect();
                let vs: Vec<&Prepared> = frame_idx
                    .iter()
                    .map(|&(c, t)| frame_cache.items[c * frames + t].as_ref().unwrap())
                    .collect();
                let db = MaskedBatch::assemble(&ds, dmasks, cfg.loss_on)?;
                let vb = MaskedBatch::assemble(&vs, vmasks, cfg.loss_on)?;
                if cfg.fixed_batch {
                    fixed = Some((vb.clone(), db.clone()));
                }
                (vb, db)
            }
        };
        let batch = JointBatch {
            ventral: &vb,
            dorsal: &db,
        };
        let r = joint_step(store, &mut trainer, ventral, &dorsal, batch, cfg, step)?;
        on_report(&r)?;
        reports.push(r);
    }
    Ok((dorsal, reports))
}

/// Names read only by the dorsal branch: its embedding, unshared blocks,
/// mask token, decoders and head.
pub fn dorsal_exclusive_names(store: &ParamStore<impl Scalar>) -> Vec<String> {
    store
        .names()
        .filter(|n| n.starts_with("dorsal."))
        .map(str::to_string)
        .collect()
}

/// Names stored once and read by both branches.
pub fn shared_names(dorsal: &Branch) -> Vec<String> {
    match dorsal.shared {
        Some(s) => (1..=s.upto).flat_map(|b| dorsal.block_names(b)).collect(),
        None => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_encoder, InputShape, ModelConfig};
    use crate::targets::{build_gabor_bank, GaborBankConfig};

    fn toy_model() -> ModelConfig {
        ModelConfig {
            depth: 4,
            separation: vec![1, 2, 4],
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    fn shapes() -> (InputShape, InputShape) {
        let img = InputShape {
            frames: 1,
            height: 16,
            width: 16,
            channels: 3,
        };
        (img, InputShape { frames: 4, ..img })
    }

    fn noise_clip(seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..4 * 16 * 16 * 3).map(|_| rng.gen::<f32>()).collect();
        Clip::new(4, 16, 16, 3, data).unwrap()
    }

    fn setup(cfg: &TrainConfig) -> (ParamStore<f32>, Branch, Branch) {
        let (is, cs) = shapes();
        let v = Branch::new(BranchKind::Ventral, toy_model(), is, 8).unwrap();
        let d = Branch::new(BranchKind::Dorsal, toy_model(), cs, 8).unwrap();
        let mut store = init_encoder(&v, 1).unwrap();
        let d = setup_dorsal(&mut store, &v, d, cfg).unwrap();
        (store, v, d)
    }

    fn batches(v: &Branch, d: &Branch, cfg: &TrainConfig) -> (MaskedBatch<f32>, MaskedBatch<f32>) {
        let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
        let tc = TargetConfig::default();
        let tb = TargetBuilder { cfg: &tc, bank: &bank };
        let clips: Vec<Clip> = (0..2).map(noise_clip).collect();
        let dp: Vec<Prepared> = clips.iter().map(|c| tb.prepare(d, BranchInput::Clip(c)).unwrap()).collect();
        let vp: Vec<Prepared> = clips
            .iter()
            .map(|c| tb.prepare(v, BranchInput::Image(&c.frame(1))).unwrap())
            .collect();
        let dm = (0..2).map(|s| clip_mask(d, cfg, s).unwrap()).collect();
        let vm = (0..2).map(|s| image_mask(v, cfg, s + 10).unwrap()).collect();
        (
            MaskedBatch::assemble(&vp.iter().collect::<Vec<_>>(), vm, cfg.loss_on).unwrap(),
            MaskedBatch::assemble(&dp.iter().collect::<Vec<_>>(), dm, cfg.loss_on).unwrap(),
        )
    }

    #[test]
    fn joint_arithmetic() {
        assert_eq!(loss_joint(0.5, 0.3, 1.0), 0.8);
        assert_eq!(loss_joint(0.5, 0.3, 0.0), 0.5);
        assert!((loss_joint(0.0, 0.3, 2.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn tap_mse_arithmetic() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let l = g.mse(p, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let p2 = g.constant(Tensor::from_f64(&[1, 2], &[2.0, 2.0]).unwrap());
        let l2 = g.mse(p2, Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(l2).item(), 4.0);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let cfg = TrainConfig {
            tap_weights: vec![0.0; 3],
            ..Default::default()
        };
        let (store, v, d) = setup(&cfg);
        let (vb, _) = batches(&v, &d, &cfg);
        let mut g = Graph::new();
        let l = branch_loss(&mut g, &store, &v, &vb, &cfg.tap_weights, cfg.loss_on).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
        assert!(g.value(l.taps[2]).item() > 0.0);
    }

    #[test]
    fn target_width_mismatch_is_config_error() {
        let cfg = TrainConfig::default();
        let (store, v, d) = setup(&cfg);
        let (mut vb, _) = batches(&v, &d, &cfg);
        vb.targets[0] = Tensor::zeros(&[vb.targets[0].rows(), 3]);
        let mut g = Graph::new();
        let r = branch_loss(&mut g, &store, &v, &vb, &cfg.tap_weights, cfg.loss_on);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn sharing_bounds() {
        let c = TrainConfig::default();
        assert_eq!(c.shared_blocks(&[2, 4, 12], 12).unwrap(), 4);
        let c = TrainConfig {
            shared_prefix: Some(5),
            ..Default::default()
        };
        assert!(c.shared_blocks(&[2, 4, 12], 12).is_err());
        let c = TrainConfig {
            sharing: Sharing::All,
            ..Default::default()
        };
        assert_eq!(c.shared_blocks(&[2, 4, 12], 12).unwrap(), 12);
        assert_eq!(c.shared_blocks(&[12], 12).unwrap(), 12);
    }

    #[test]
    fn lambda_zero_blocks_dorsal_gradients() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (mut store, v, d) = setup(&cfg);
        let (vb, db) = batches(&v, &d, &cfg);
        let mut g = Graph::new();
        let jl = joint_losses(&mut g, &store, &v, &d, JointBatch { ventral: &vb, dorsal: &db }, &cfg).unwrap();
        assert_eq!(g.value(jl.l).item(), g.value(jl.ventral.total).item());
        store.zero_grad();
        g.backward(jl.l, &mut store).unwrap();
        for n in dorsal_exclusive_names(&store) {
            if let Some(gr) = store.grad(&n) {
                assert!(gr.data().iter().all(|&x| x == 0.0), "{n}");
            }
        }
    }

    #[test]
    fn fixed_steps_deterministic_and_shared_equal() {
        let cfg = TrainConfig {
            total_steps: 3,
            warmup_steps: 1,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let (is, cs) = shapes();
            let v = Branch::new(BranchKind::Ventral, toy_model(), is, 8).unwrap();
            let d = Branch::new(BranchKind::Dorsal, toy_model(), cs, 8).unwrap();
            let mut store = init_encoder(&v, 1).unwrap();
            let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
            let tc = TargetConfig::default();
            let tb = TargetBuilder { cfg: &tc, bank: &bank };
            let clips: Vec<Clip> = (0..3).map(noise_clip).collect();
            let (d, reps) = pretrain_joint(&mut store, &v, d, &clips, &tb, &cfg, |_| Ok(())).unwrap();
            (store, d, reps)
        };
        let (s1, d, r1) = run();
        let (s2, _, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(s1, s2);
        // single storage: shared names exist once, under the ventral prefix
        assert_eq!(d.shared.unwrap().upto, 2);
        assert!(!s1.contains("dorsal.block01.norm1.weight"));
        for r in &r1 {
            assert!((r.l - (r.l_v + r.l_d)).abs() / r.l.max(1.0) < 1e-6);
        }
    }

    #[test]
    fn zero_steps_leave_params_untouched() {
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..Default::default()
        };
        let (is, _) = shapes();
        let v = Branch::new(BranchKind::Ventral, toy_model(), is, 8).unwrap();
        let mut store = init_encoder(&v, 1).unwrap();
        let before = store.clone();
        let bank = build_gabor_bank(&GaborBankConfig::default()).unwrap();
        let tc = TargetConfig::default();
        let tb = TargetBuilder { cfg: &tc, bank: &bank };
        let imgs = vec![noise_clip(0).frame(0)];
        let r = pretrain_ventral(&mut store, &v, &imgs, &tb, &cfg, |_| Ok(())).unwrap();
        assert!(r.is_empty());
        assert_eq!(store, before);
        assert!(pretrain_ventral(&mut store, &v, &[], &tb, &cfg, |_| Ok(())).is_err());
    }
}
