//! Iterative-click training: two forward passes per sample, focal + triplet token loss,
//! AdamW with step-wise learning-rate drops, per-epoch checkpoints and loss logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::clicks::ClickState;
use crate::config::ModelConfig;
use crate::data::{augment, gen_synthetic, Sample};
use crate::error::{Error, Result};
use crate::eval::BINARIZE_THRESHOLD;
use crate::loss::{focal_loss, rasterize_token_gt, total_loss, triplet_token_loss, FocalParams, LossReport, PairCounts, TripletInput};
use crate::model::MstModel;
use crate::mst::{Mode, Scale};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::{self, Execution};
use crate::simulate::{next_click, sample_training_clicks};
use crate::tensor::Tensor;
use crate::autograd::Graph;

/// Flat training configuration, mirrored one-to-one by the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `"desk"` or `"full"` architecture.
    pub model: String,
    /// Enables the multi-scale fusion blocks; `false` trains the plain ViT twin.
    pub mst: bool,
    /// Adds the triplet token loss to the segmentation loss.
    pub contrastive: bool,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Zero-based epochs at whose start the learning rate is divided by ten.
    pub lr_drop_epochs: Vec<usize>,
    pub weight_decay: f64,
    pub max_clicks: usize,
    pub click_decay: f64,
    pub augment: bool,
    /// Seeds initialisation, batching, augmentation, clicks and scale choice.
    pub seed: u64,
    /// Seeds the synthetic training set.
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Each drop divides the learning rate by this factor.
    pub const LR_DROP_FACTOR: f64 = 10.0;

    pub fn desk() -> Self {
        Self {
            model: "desk".into(),
            mst: true,
            contrastive: true,
            epochs: 20,
            samples_per_epoch: 512,
            batch_size: 8,
            lr: 3e-4,
            lr_drop_epochs: vec![12, 16],
            weight_decay: 0.01,
            max_clicks: 24,
            click_decay: 0.8,
            augment: true,
            seed: 0,
            data_seed: 1,
        }
    }

    /// The full-scale schedule. Not trainable on a CPU; kept as a reference preset.
    pub fn full() -> Self {
        Self {
            model: "full".into(),
            epochs: 230,
            samples_per_epoch: 30000,
            lr: 5e-6,
            lr_drop_epochs: vec![50, 70],
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.click_decay > 0.0 && self.click_decay <= 1.0) {
            return bad(format!("click decay {} outside (0, 1]", self.click_decay));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("lr drop epochs {:?} are not sorted", self.lr_drop_epochs));
        }
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 || self.max_clicks == 0 {
            return bad("epochs, samples, batch size and max clicks must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("invalid learning rate {}", self.lr));
        }
        self.model_config().map(|_| ())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match self.model.as_str() {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        Ok(if self.mst { base } else { base.without_mst() })
    }

    /// Learning rate in zero-based `epoch`: divided by ten once per drop epoch reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr / Self::LR_DROP_FACTOR.powi(drops as i32)
    }
}

/// Seeds derived from the run seed; distinct streams never share state.
fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x5851_F42D_4C95_7F2D;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
    }
    h
}

/// The click state for the gradient pass: initial sampled clicks, the first-pass prediction
/// as previous mask, and one corrective click from its largest error.
pub fn prepare_second_pass(
    model: &MstModel<f32>,
    sample: &Sample,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClickState> {
    let mut state = sample_training_clicks(&sample.mask, None, config.click_decay, config.max_clicks, rng)?;
    let probs = model.predict(&sample.image, &state)?;
    let pred = probs.threshold(BINARIZE_THRESHOLD);
    state.set_mask(probs)?;
    if state.len() < config.max_clicks {
        if let Some(click) = next_click(&pred, &sample.mask)? {
            state.push(click)?;
        }
    }
    Ok(state)
}

pub struct SampleGrad {
    pub grads: Vec<Tensor<f32>>,
    pub loss: LossReport,
}

/// Loss and parameter gradients of one sample at a fixed click state.
pub fn sample_gradient(
    model: &MstModel<f32>,
    sample: &Sample,
    state: &ClickState,
    contrastive: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let out = model.forward(&mut g, &p, &sample.image, state, &mut Mode::Train(rng))?;
    let seg = focal_loss(&mut g, out.logits, &sample.mask, FocalParams::default())?;
    let mut pairs = PairCounts::default();
    let con = if contrastive && !out.traces.is_empty() {
        let mut per_block = Vec::with_capacity(out.traces.len());
        for trace in &out.traces {
            let mut inputs = Vec::with_capacity(2);
            for scale in [Scale::Tiny, Scale::Large] {
                let sel = trace.result(scale);
                let labels = rasterize_token_gt(&sample.mask, scale.patch())?;
                inputs.push(TripletInput {
                    scale,
                    selected: sel.selected,
                    labels: sel.indices.iter().map(|&i| labels[i]).collect(),
                });
            }
            let (l, c) = triplet_token_loss(&mut g, trace.kernel.vector, &inputs, rng)?;
            pairs.tiny += c.tiny;
            pairs.large += c.large;
            per_block.push(l);
        }
        let mut acc = per_block[0];
        for &l in &per_block[1..] {
            acc = g.add(acc, l)?;
        }
        g.scale(acc, 1.0 / per_block.len() as f32)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = total_loss(&mut g, seg, con)?;
    let loss = LossReport {
        seg: g.item(seg) as f64,
        contrastive: g.item(con) as f64,
        total: g.item(total) as f64,
        pairs,
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss of sample {} (seg {}, contrastive {})",
            sample.id, loss.seg, loss.contrastive
        )));
    }
    g.backward(total)?;
    Ok(SampleGrad {
        grads: p.grads(&g),
        loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub seg: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub contrastive: f64,
    pub total: f64,
    pub steps: usize,
}

pub struct TrainReport {
    pub model: MstModel<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where a run writes checkpoints and logs; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: MstModel<f32>,
    pub optimizer: AdamW<f32>,
    pub exec: Execution,
}

impl Trainer {
    /// Fresh model initialised from the run seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = MstModel::new(config.model_config()?, stream_seed(config.seed, &[0]))?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: MstModel<f32>) -> Self {
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            model.params().tensors(),
        );
        Self {
            config,
            model,
            optimizer,
            exec: Execution::default(),
        }
    }

    /// Order in which `epoch` visits the training set.
    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        order.truncate(self.config.samples_per_epoch.min(n));
        order
    }

    /// One optimiser step over `batch`: per-sample gradients in parallel, summed in batch
    /// order, averaged, then a single AdamW update.
    pub fn step(&mut self, batch: &[Sample], epoch: usize, step: usize) -> Result<LossReport> {
        let config = &self.config;
        let model = &self.model;
        let indexed: Vec<(usize, &Sample)> = batch.iter().enumerate().collect();
        let results = parallel::map(self.exec, &indexed, |&(i, s)| {
            let seed = stream_seed(config.seed, &[2, epoch as u64, step as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = if config.augment {
                augment(s, stream_seed(seed, &[3]))
            } else {
                s.clone()
            };
            let state = prepare_second_pass(model, &sample, config, &mut rng)?;
            sample_gradient(model, &sample, &state, config.contrastive, &mut rng)
        });
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut report = LossReport::default();
        for r in results {
            let r = r?;
            report.seg += r.loss.seg;
            report.contrastive += r.loss.contrastive;
            report.total += r.loss.total;
            report.pairs.tiny += r.loss.pairs.tiny;
            report.pairs.large += r.loss.pairs.large;
            match &mut sum {
                None => sum = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        report.seg /= n;
        report.contrastive /= n;
        report.total /= n;
        let inv = 1.0 / batch.len() as f32;
        let grads: Vec<Option<Tensor<f32>>> = sum
            .unwrap_or_default()
            .into_iter()
            .map(|g| Some(g.map(|v| v * inv)))
            .collect();
        self.optimizer.set_lr(self.config.lr_at(epoch));
        self.optimizer.step(self.model.params_mut().tensors_mut(), &grads)?;
        Ok(report)
    }

    /// Full run over `data`; `on_epoch` sees each finished epoch.
    pub fn train(
        mut self,
        data: &[Sample],
        output: &TrainOutput,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(dir) = &output.dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), self.config.to_toml())?;
        }
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        let mut checkpoints = Vec::new();
        for epoch in 0..self.config.epochs {
            let lr = self.config.lr_at(epoch);
            let order = self.epoch_order(epoch, data.len());
            let mut acc = (0.0, 0.0, 0.0);
            let mut n_steps = 0;
            for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
                let report = match self.step(&batch, epoch, step) {
                    Ok(r) => r,
                    Err(e) => {
                        if let (Error::NonFinite(_), Some(dir)) = (&e, &output.dir) {
                            dump_diagnostics(dir, epoch, step, &batch, &e)?;
                        }
                        return Err(e);
                    }
                };
                steps.push(StepLog {
                    epoch,
                    step,
                    lr,
                    seg: report.seg,
                    contrastive: report.contrastive,
                    total: report.total,
                });
                acc.0 += report.seg;
                acc.1 += report.contrastive;
                acc.2 += report.total;
                n_steps += 1;
            }
            let k = n_steps.max(1) as f64;
            let log = EpochLog {
                epoch,
                lr,
                seg: acc.0 / k,
                contrastive: acc.1 / k,
                total: acc.2 / k,
                steps: n_steps,
            };
            if let Some(dir) = &output.dir {
                let path = dir.join(format!("epoch_{:03}.json", epoch + 1));
                checkpoint::save(&self.model, &path, Some(epoch + 1))?;
                checkpoints.push(path);
                write_logs(dir, &steps, &epochs, &log)?;
            }
            on_epoch(&log);
            epochs.push(log);
        }
        Ok(TrainReport {
            model: self.model,
            steps,
            epochs,
            checkpoints,
        })
    }
}

fn write_logs(dir: &Path, steps: &[StepLog], done: &[EpochLog], current: &EpochLog) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("loss_steps.csv"))?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    for e in done.iter().chain(std::iter::once(current)) {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

fn dump_diagnostics(dir: &Path, epoch: usize, step: usize, batch: &[Sample], err: &Error) -> Result<()> {
    let mut f = fs::File::create(dir.join("diagnostics.json"))?;
    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
    let body = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "error": err.to_string(),
        "samples": ids,
    });
    f.write_all(serde_json::to_string_pretty(&body)?.as_bytes())?;
    Ok(())
}

/// Generates the synthetic training set a config describes.
pub fn training_set(config: &TrainConfig) -> Result<Vec<Sample>> {
    let side = config.model_config()?.image_size;
    gen_synthetic(config.data_seed, config.samples_per_epoch, side)
}
