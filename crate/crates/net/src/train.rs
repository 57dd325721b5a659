//! Training loop, held-out evaluation and whole-image prediction.

use std::path::Path;

use gridpoint_core::detect::ProbMap;
use gridpoint_core::patches::{augment, AugmentPolicy, PatchPair, PatchSource};
use gridpoint_core::seed;
use gridpoint_core::Gray;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::checkpoint::ModelCheckpoint;
use crate::error::{NetError, Result};
use crate::loss::{correct_pixels, weighted_bce, weighted_bce_grad};
use crate::model::{backward, batch_input, build_model, forward, forward_logits, Mode, ParamSet};
use crate::ops::Act;
use crate::optim::{Adam, AdamConfig};

pub const POS_WEIGHT_CAP: f64 = 50.0;
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Positive-class loss weight; `None` derives it from the training labels.
    pub pos_weight: Option<f64>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::paper()
    }
}

impl HyperParams {
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 100,
            steps_per_epoch: 1000,
            pos_weight: None,
            seed: 0,
        }
    }

    /// A run that fits on a laptop in minutes.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            steps_per_epoch: 200,
            ..Self::paper()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NetError::Hyper(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
        ] {
            if v == 0 {
                return Err(NetError::Hyper(format!("{name} must be positive")));
            }
        }
        if let Some(w) = self.pos_weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(NetError::Hyper(format!("pos_weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        s += &format!(
            "{},{:.6},{:.6},{},{}\n",
            r.epoch,
            r.train_loss,
            r.train_acc,
            opt(r.val_loss),
            opt(r.val_acc)
        );
    }
    s
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| NetError::io(path, e))
}

/// Background over grid pixel count, capped.
pub fn auto_pos_weight<'a>(labels: impl IntoIterator<Item = &'a Array2<u8>>) -> f64 {
    let (mut fg, mut total) = (0usize, 0usize);
    for l in labels {
        fg += l.iter().filter(|&&v| v != 0).count();
        total += l.len();
    }
    if fg == 0 {
        return POS_WEIGHT_CAP;
    }
    ((total - fg) as f64 / fg as f64).min(POS_WEIGHT_CAP)
}

fn label_matrix(pairs: &[&PatchPair]) -> Array2<f32> {
    let data: Vec<f32> = pairs.iter().flat_map(|p| p.label.iter().map(|&v| v as f32)).collect();
    Array2::from_shape_vec((1, data.len()), data).expect("one row")
}

fn input_of(pairs: &[&PatchPair]) -> Result<Act<f32>> {
    let images: Vec<&Gray> = pairs.iter().map(|p| &p.input).collect();
    batch_input(&images)
}

/// Trains on a manifest's training split and reports on its validation split.
pub fn train(spec: &ArchSpec, source: &PatchSource, hp: &HyperParams) -> Result<ModelCheckpoint> {
    let train_set = source.train_pairs()?;
    let val_set = source.val_pairs()?;
    train_on(spec, &train_set, &val_set, &source.manifest.policy, hp, |_| {})
}

/// Trains on explicit patch lists. `on_epoch` sees every finished record.
pub fn train_on(
    spec: &ArchSpec,
    train_set: &[PatchPair],
    val_set: &[PatchPair],
    policy: &AugmentPolicy,
    hp: &HyperParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelCheckpoint> {
    hp.validate()?;
    let first = train_set.first().ok_or(NetError::Empty("training set"))?;
    let (ph, pw) = first.input.dim();
    let m = spec.size_multiple();
    if ph % m != 0 || pw % m != 0 {
        return Err(NetError::Shape(format!("patch size {pw}x{ph} must be divisible by {m}")));
    }
    let pos_weight = hp.pos_weight.unwrap_or_else(|| auto_pos_weight(train_set.iter().map(|p| &p.label)));
    let mut params: ParamSet<f32> = build_model(spec, seed::derive(hp.seed, &[0]))?;
    let mut opt = Adam::new(&params, AdamConfig::default());
    let mut cp = ModelCheckpoint {
        arch: spec.clone(),
        hyper: hp.clone(),
        pos_weight,
        history: Vec::new(),
        complete: false,
        params: params.clone(),
    };
    log::info!(
        "training {} params on {} patches ({} held out), positive weight {pos_weight:.3}",
        params.param_count(),
        train_set.len(),
        val_set.len()
    );

    for epoch in 0..hp.epochs {
        let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
        for step in 0..hp.steps_per_epoch {
            let mut rng = seed::rng(seed::derive(hp.seed, &[1, epoch as u64, step as u64]));
            let batch: Vec<PatchPair> = (0..hp.batch_size)
                .map(|i| {
                    let pick = &train_set[rng.random_range(0..train_set.len())];
                    augment(pick, policy, seed::derive(hp.seed, &[2, epoch as u64, step as u64, i as u64]))
                })
                .collect();
            let refs: Vec<&PatchPair> = batch.iter().collect();
            let x = input_of(&refs)?;
            let y = label_matrix(&refs);
            let (z, cache) = forward_logits(&params, x, Mode::Train(&mut rng), true)?;
            let (loss, dz) = weighted_bce_grad(&z.data, &y, pos_weight);
            if !loss.is_finite() {
                return Err(NetError::NonFinite {
                    epoch,
                    step,
                    learning_rate: hp.learning_rate,
                    loss,
                    partial: Box::new(cp),
                });
            }
            let grads = backward(&params, &cache.expect("kept"), &dz);
            opt.step(&mut params, &grads, hp.learning_rate);
            loss_sum += loss;
            correct += correct_pixels(&z.data, &y);
            pixels += y.len();
        }
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_params(&params, pos_weight, val_set)?;
            (Some(l), Some(a))
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / hp.steps_per_epoch as f64,
            train_acc: correct as f64 / pixels as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val loss {:?} val acc {:?}",
            rec.train_loss,
            rec.train_acc,
            rec.val_loss,
            rec.val_acc
        );
        on_epoch(&rec);
        cp.history.push(rec);
        cp.params = params.clone();
    }
    cp.complete = true;
    Ok(cp)
}

fn evaluate_params(params: &ParamSet<f32>, pos_weight: f64, patches: &[PatchPair]) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Err(NetError::Empty("evaluation patches"));
    }
    let (mut loss_sum, mut correct, mut pixels) = (0.0, 0usize, 0usize);
    for chunk in patches.chunks(EVAL_BATCH) {
        let refs: Vec<&PatchPair> = chunk.iter().collect();
        let y = label_matrix(&refs);
        let (z, _) = forward_logits::<f32, rand_chacha::ChaCha8Rng>(params, input_of(&refs)?, Mode::Infer, false)?;
        loss_sum += weighted_bce(&z.data, &y, pos_weight) * y.len() as f64;
        correct += correct_pixels(&z.data, &y);
        pixels += y.len();
    }
    Ok((loss_sum / pixels as f64, correct as f64 / pixels as f64))
}

/// Mean weighted loss and pixel accuracy in inference mode.
pub fn evaluate(cp: &ModelCheckpoint, patches: &[PatchPair]) -> Result<(f64, f64)> {
    evaluate_params(&cp.params, cp.pos_weight, patches)
}

/// One inference pass over a whole image, no tiling.
pub fn predict_full(cp: &ModelCheckpoint, image: &Gray) -> Result<ProbMap> {
    let (h, w) = image.dim();
    let y = forward(&cp.params, batch_input(&[image])?)?;
    Ok(y.data.into_shape_with_order((h, w)).expect("one plane"))
}
