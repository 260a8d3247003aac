use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at_step, LrSchedule};
use crate::error::{config_err, Error, Result};
use crate::model::{encode_pooled, head_logits, init_head, Branch, PoolMode};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimState, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub adamw: AdamWConfig,
    /// Train the head only, on frozen encoder features.
    pub probe: bool,
    pub pool: PoolMode,
    pub seed: u64,
    /// Evaluate the test split after every epoch instead of only the last.
    pub eval_every_epoch: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 16,
            batch_size: 4,
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 10,
            adamw: AdamWConfig::default(),
            probe: false,
            pool: PoolMode::Mean,
            seed: 0,
            eval_every_epoch: false,
        }
    }
}

/// Full token grids `(N, token_dim)` with class labels.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTokens<'a> {
    pub grids: &'a [Tensor<f32>],
    pub labels: &'a [usize],
}

impl LabeledTokens<'_> {
    fn check(&self, classes: usize, what: &str) -> Result<()> {
        if self.grids.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{what}: {} samples but {} labels",
                self.grids.len(),
                self.labels.len()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "{what}: label {l} of sample {i} outside 0..{classes}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochReport>,
    pub test_acc: f64,
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row = logits.row(*r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn stack(grids: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let cols = grids[idx[0]].cols();
    let rows: usize = idx.iter().map(|&i| grids[i].rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for &i in idx {
        data.extend_from_slice(grids[i].data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Pooled encoder features of every grid, `(n, d)`, in chunks of `chunk`.
fn features(
    store: &ParamStore<f32>,
    branch: &Branch,
    grids: &[Tensor<f32>],
    pool: PoolMode,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let d = branch.cfg.d_model;
    let mut data = Vec::with_capacity(grids.len() * d);
    let idx: Vec<usize> = (0..grids.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let f = encode_pooled(&mut g, store, branch, &stack(grids, part)?, part.len(), pool)?;
        data.extend_from_slice(g.value(f).data());
    }
    Tensor::new(vec![grids.len(), d], data)
}

fn logits_for(
    store: &ParamStore<f32>,
    branch: &Branch,
    set: LabeledTokens<'_>,
    feats: Option<&Tensor<f32>>,
    pool: PoolMode,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let owned;
    let feats = match feats {
        Some(f) => f,
        None => {
            owned = features(store, branch, set.grids, pool, chunk)?;
            &owned
        }
    };
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let l = head_logits(&mut g, store, branch, f)?;
    Ok(g.value(l).clone())
}

/// Supervised classification on full token grids with cross-entropy.
///
/// Creates the head on first use. In probe mode only the head (and class
/// token) train and encoder features are computed once.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    store: &mut ParamStore<f32>,
    branch: &Branch,
    train: LabeledTokens<'_>,
    test: LabeledTokens<'_>,
    classes: usize,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<FinetuneReport> {
    train.check(classes, "train split")?;
    test.check(classes, "test split")?;
    if train.grids.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(config_err!("finetuning needs positive epochs and batch size"));
    }
    if cfg.probe && cfg.pool == PoolMode::ClassToken {
        return Err(config_err!("a frozen encoder has no trained class token; probe with mean pooling"));
    }
    let head = format!("{}.head.fc.weight", branch.prefix());
    if !store.contains(&head) {
        init_head(store, branch, classes, cfg.pool, cfg.seed)?;
    } else if store.value(&head)?.cols() != classes {
        return Err(config_err!("existing head has {} classes, need {classes}", store.value(&head)?.cols()));
    }
    let head_prefix = format!("{}.head.", branch.prefix());
    let cls = format!("{}.cls_token", branch.prefix());
    let own = format!("{}.", branch.prefix());
    let shared: Vec<String> = match branch.shared {
        Some(s) => (1..=s.upto).flat_map(|b| branch.block_names(b)).collect(),
        None => Vec::new(),
    };
    let probe = cfg.probe;
    store.set_requires_grad(|_| true, false);
    store.set_requires_grad(
        |n| {
            n.starts_with(&head_prefix)
                || n == cls
                || (!probe && (n.starts_with(&own) || shared.iter().any(|s| s == n)))
        },
        true,
    );

    let n = train.grids.len();
    let spe = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * spe;
    let sched = LrSchedule {
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps.min(total.saturating_sub(1)),
        total_steps: total,
    };
    sched.validate()?;
    let chunk = cfg.batch_size;
    let train_feats = if probe {
        Some(features(store, branch, train.grids, cfg.pool, chunk)?)
    } else {
        None
    };
    let test_feats = if probe && !test.grids.is_empty() {
        Some(features(store, branch, test.grids, cfg.pool, chunk)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = OptimState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut test_acc = 0.0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        let mut lr = 0.0;
        for part in order.chunks(cfg.batch_size) {
            step += 1;
            let labels: Vec<usize> = part.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let logits = match &train_feats {
                Some(f) => {
                    let fv = g.constant(f.gather_rows(part)?);
                    head_logits(&mut g, store, branch, fv)?
                }
                None => {
                    let f = encode_pooled(&mut g, store, branch, &stack(train.grids, part)?, part.len(), cfg.pool)?;
                    head_logits(&mut g, store, branch, f)?
                }
            };
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite finetune loss at step {step}")));
            }
            loss_sum += lv * part.len() as f64;
            hits += accuracy(g.value(logits), &labels) * part.len() as f64;
            store.zero_grad();
            g.backward(loss, store)?;
            lr = lr_at_step(step, &sched);
            if lr > 0.0 {
                adamw_step(store, &mut optim, lr, &cfg.adamw)?;
            }
        }
        let eval = cfg.eval_every_epoch || epoch == cfg.epochs;
        let acc = if eval && !test.grids.is_empty() {
            let l = logits_for(store, branch, test, test_feats.as_ref(), cfg.pool, chunk)?;
            Some(accuracy(&l, test.labels))
        } else {
            None
        };
        if let Some(a) = acc {
            test_acc = a;
        }
        let r = EpochReport {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: hits / n as f64,
            test_acc: acc,
        };
        on_epoch(&r)?;
        reports.push(r);
    }
    store.set_requires_grad(|_| true, true);
    store.zero_grad();
    Ok(FinetuneReport {
        epochs: reports,
        test_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_encoder, InputShape, ModelConfig};
    use crate::BranchKind;
    use rand::Rng;

    fn setup() -> (Branch, ParamStore<f32>, Vec<Tensor<f32>>, Vec<usize>) {
        let cfg = ModelConfig {
            depth: 2,
            separation: vec![1, 2],
            d_model: 16,
            heads: 2,
            ..Default::default()
        };
        let shape = InputShape {
            frames: 1,
            height: 8,
            width: 8,
            channels: 3,
        };
        let b = Branch::new(BranchKind::Ventral, cfg, shape, 8).unwrap();
        let s = init_encoder(&b, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // class is encoded by the sign of the mean intensity
        let mut grids = Vec::new();
        let mut labels = Vec::new();
        for i in 0..16 {
            let l = i % 2;
            let off = if l == 0 { -0.5 } else { 0.5 };
            let data = (0..4 * 48).map(|_| off + rng.gen_range(-0.1..0.1)).collect();
            grids.push(Tensor::new(vec![4, 48], data).unwrap());
            labels.push(l);
        }
        (b, s, grids, labels)
    }

    #[test]
    fn accuracy_ties_take_lowest() {
        let l = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(accuracy(&l, &[0, 1]), 1.0);
        assert_eq!(accuracy(&l, &[1, 1]), 0.5);
    }

    #[test]
    fn probe_freezes_encoder_and_learns() {
        let (b, mut s, grids, labels) = setup();
        let before = s.clone();
        let cfg = FinetuneConfig {
            probe: true,
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-2,
            warmup_steps: 2,
            ..Default::default()
        };
        let set = LabeledTokens {
            grids: &grids,
            labels: &labels,
        };
        let r = finetune(&mut s, &b, set, set, 2, &cfg, |_| Ok(())).unwrap();
        for (n, p) in before.iter() {
            assert_eq!(&p.value, s.value(n).unwrap(), "{n} changed");
        }
        assert_eq!(r.test_acc, 1.0);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let (b, mut s, grids, mut labels) = setup();
        labels[3] = 7;
        let set = LabeledTokens {
            grids: &grids,
            labels: &labels,
        };
        let r = finetune(&mut s, &b, set, set, 2, &FinetuneConfig::default(), |_| Ok(()));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn full_finetune_updates_encoder() {
        let (b, mut s, grids, labels) = setup();
        let before = s.value("ventral.block01.attn.qkv.weight").unwrap().clone();
        let cfg = FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            pool: PoolMode::ClassToken,
            ..Default::default()
        };
        let set = LabeledTokens {
            grids: &grids,
            labels: &labels,
        };
        finetune(&mut s, &b, set, set, 2, &cfg, |_| Ok(())).unwrap();
        assert_ne!(&before, s.value("ventral.block01.attn.qkv.weight").unwrap());
        // decoders are not part of classification
        assert!(s.grad("ventral.decoder1.head.weight").is_none());
    }
}
