//! The optimization loop: epoch shuffling, per-sample augmentation, softmax
//! Dice loss, Adam with polynomial decay, loss tracing, and checkpoints.
//!
//! Every random draw derives statelessly from `(seed, purpose, step|epoch)`,
//! so runs are bit-reproducible and a resumed run replays the remainder of
//! an uninterrupted one exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, TrainMeta};
use super::optim::{adam_step, poly_lr, AdamHyper, AdamState, OptimError};
use crate::data::augment::{augment, center_crop, normalize_sample, sample_rng};
use crate::data::{rawvol, DataError, VolumeSample};
use crate::layers::Mode;
use crate::metrics::softmax_dice_loss;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset at {0} contains no cases")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step} on batch [{cases}]")]
    NonFiniteLoss { step: u64, cases: String },
    #[error("checkpoint config does not match the requested run: {0}")]
    ResumeMismatch(String),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr0: f64,
    pub lr_power: f64,
    pub hyper: AdamHyper,
    /// Apply the augmentation pipeline (crop/flip/intensity). Disabled runs
    /// center-crop only.
    pub augment: bool,
    /// Write `checkpoint-epoch{N}.ckpt` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 1,
            seed: 0,
            lr0: 4e-4,
            lr_power: 0.9,
            hyper: AdamHyper::default(),
            augment: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.17e},{:.17e}\n", r.step, r.epoch, r.lr, r.loss));
    }
    out
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub trace: Vec<TraceRow>,
    pub final_checkpoint: PathBuf,
}

fn stack_batch(
    samples: &[VolumeSample],
) -> Result<(Tensor<f32>, Vec<u8>), TrainError> {
    let first = &samples[0];
    let (nx, ny, nz) = first.extent;
    let c = first.channels;
    let vox = nx * ny * nz;
    let mut data = Vec::with_capacity(samples.len() * c * vox);
    let mut labels = Vec::with_capacity(samples.len() * vox);
    for s in samples {
        data.extend_from_slice(&s.modalities);
        labels.extend_from_slice(s.label.as_deref().ok_or_else(|| {
            DataError::Shape {
                case_id: s.case_id.clone(),
                what: "training sample has no label volume".into(),
            }
        })?);
    }
    Ok((
        Tensor::from_vec(data, &[samples.len(), c, nx, ny, nz]),
        labels,
    ))
}

/// Train from scratch or resume from a checkpoint. Loads the whole dataset
/// into memory (desk-scale corpora), shuffles per epoch from the seed, and
/// writes `loss.csv`, periodic checkpoints, and `checkpoint-final.ckpt`
/// under `out_dir`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |e: std::io::Error| TrainError::Io { path: p, source: e }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let case_ids = crate::data::list_cases(dataset_root)?;
    if case_ids.is_empty() {
        return Err(TrainError::EmptyDataset(dataset_root.display().to_string()));
    }
    let mut dataset = Vec::with_capacity(case_ids.len());
    for id in &case_ids {
        let mut sample = rawvol::read_case(&dataset_root.join(id))?;
        normalize_sample(&mut sample);
        dataset.push(sample);
    }

    let (mut model, mut adam, start_step, start_epoch) = match resume {
        Some(path) => {
            let (model, adam, meta) = load_checkpoint::<f32>(path)?;
            if model.config != *model_cfg {
                return Err(TrainError::ResumeMismatch(format!(
                    "checkpoint built for a different model configuration ({})",
                    path.display()
                )));
            }
            if meta.seed != cfg.seed {
                return Err(TrainError::ResumeMismatch(format!(
                    "checkpoint seed {} != requested seed {}",
                    meta.seed, cfg.seed
                )));
            }
            let epoch = meta.epoch;
            (model, adam, meta.step, epoch)
        }
        None => {
            let model = Model::<f32>::build(model_cfg, cfg.seed)?;
            let adam = AdamState::new(&model);
            (model, adam, 0, 0)
        }
    };

    let steps_per_epoch = case_ids.len().div_ceil(cfg.batch_size) as u64;
    let max_steps = cfg.epochs as u64 * steps_per_epoch;
    let extent = model_cfg.input_extent;

    let mut trace = Vec::new();
    let mut step = start_step;
    for epoch in start_epoch..cfg.epochs as u64 {
        // Epoch ordering derives from (seed, epoch) alone.
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, "epoch_shuffle", epoch as usize));

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VolumeSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset[i];
                    if cfg.augment {
                        augment(
                            s,
                            extent,
                            &mut sample_rng(cfg.seed, &s.case_id, epoch as usize),
                        )
                    } else {
                        center_crop(s, extent)
                    }
                })
                .collect();
            let (x, labels) = stack_batch(&batch)?;
            model.zero_grads();
            let mut dropout_rng = sample_rng(cfg.seed, "dropout", step as usize);
            let logits = model.forward(&x, Mode::Train, &mut dropout_rng)?;
            let loss = softmax_dice_loss(&logits, &labels)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                let cases: Vec<&str> =
                    batch.iter().map(|s| s.case_id.as_str()).collect();
                return Err(TrainError::NonFiniteLoss {
                    step,
                    cases: cases.join(", "),
                });
            }
            loss.backward()?;
            let lr = poly_lr(step, max_steps, cfg.lr0, cfg.lr_power);
            adam_step(&mut model, &mut adam, lr, &cfg.hyper)?;
            trace.push(TraceRow {
                step,
                epoch,
                lr,
                loss: loss_val,
            });
            step += 1;
        }

        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every as u64 == 0 {
            let path = out_dir.join(format!("checkpoint-epoch{:04}.ckpt", epoch + 1));
            save_checkpoint(
                &model,
                &adam,
                &TrainMeta {
                    step,
                    epoch: epoch + 1,
                    seed: cfg.seed,
                },
                &path,
            )?;
        }
    }

    let final_path = out_dir.join("checkpoint-final.ckpt");
    save_checkpoint(
        &model,
        &adam,
        &TrainMeta {
            step,
            epoch: cfg.epochs as u64,
            seed: cfg.seed,
        },
        &final_path,
    )?;
    let trace_path = out_dir.join("loss.csv");
    let mut f = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    f.write_all(trace_csv(&trace).as_bytes())
        .map_err(io_err(&trace_path))?;

    Ok(TrainOutcome {
        model,
        trace,
        final_checkpoint: final_path,
    })
}
