//! The `mst` command line: training, click-simulation evaluation, selection dumps and the
//! HTTP service.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mst_core::checkpoint;
use mst_core::clicks::ClickState;
use mst_core::data::{gen_synthetic, load_dataset, save_dataset, Sample};
use mst_core::debug::write_selection_dump;
use mst_core::eval::{
    aggregate, default_bin_edges, evaluate_dataset, noc_scale_bins, write_report, EvalOptions,
    EvalRecord, Protocol, ScaleBin, Summary,
};
use mst_core::parallel::Execution;
use mst_core::raster::Mask;
use mst_core::simulate::next_click;
use mst_core::train::{training_set, TrainConfig, TrainOutput, Trainer};
use mst_core::MstModel;

/// Where evaluation samples come from: a directory written by [`save_dataset`] or a
/// seeded synthetic set, written `synthetic:SEED:COUNT`.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Dir(PathBuf),
    Synthetic { seed: u64, count: usize },
}

impl FromStr for DatasetSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(rest) => {
                let (seed, count) = rest
                    .split_once(':')
                    .context("expected synthetic:SEED:COUNT")?;
                Ok(Self::Synthetic {
                    seed: seed.parse().context("synthetic seed")?,
                    count: count.parse().context("synthetic count")?,
                })
            }
            None => Ok(Self::Dir(PathBuf::from(s))),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, side: usize) -> Result<Vec<Sample>> {
        let samples = match self {
            Self::Dir(dir) => load_dataset(dir, Some(side))
                .with_context(|| format!("loading dataset {}", dir.display()))?,
            Self::Synthetic { seed, count } => gen_synthetic(*seed, *count, side)?,
        };
        if samples.is_empty() {
            bail!("dataset is empty");
        }
        Ok(samples)
    }
}

/// Comma-separated IOU targets such as `0.80,0.85,0.90`.
pub fn parse_targets(s: &str) -> Result<Vec<f64>> {
    let targets = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad target {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    if targets.is_empty() || targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("targets must lie in [0, 1]");
    }
    Ok(targets)
}

/// Trains from `config` (the desk preset when absent) and writes checkpoints, loss logs
/// and `final.json` into `out`.
pub fn run_train(config: Option<&Path>, out: &Path, exec: Execution) -> Result<PathBuf> {
    let config = match config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::desk(),
    };
    let data = training_set(&config)?;
    let mut trainer = Trainer::new(config)?;
    trainer.exec = exec;
    let output = TrainOutput {
        dir: Some(out.to_path_buf()),
    };
    let report = trainer.train(&data, &output, |e| {
        tracing::info!(
            epoch = e.epoch + 1,
            lr = e.lr,
            seg = e.seg,
            contrastive = e.contrastive,
            total = e.total,
            "epoch done"
        );
    })?;
    let path = out.join("final.json");
    let hash = checkpoint::save(&report.model, &path, Some(report.epochs.len()))?;
    tracing::info!(checkpoint = %path.display(), %hash, "training finished");
    Ok(path)
}

pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub summaries: Vec<Summary>,
    pub bins: Vec<ScaleBin>,
}

/// Click-simulation evaluation of `model` on `samples`; writes the per-sample CSV to
/// `report` when given.
pub fn run_eval(
    model: &MstModel<f32>,
    samples: &[Sample],
    options: &EvalOptions,
    report: Option<&Path>,
    exec: Execution,
) -> Result<EvalOutcome> {
    let records = evaluate_dataset(model, samples, options, exec)?;
    if let Some(path) = report {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_report(&records, options, file)?;
    }
    let summaries = options
        .targets
        .iter()
        .map(|&t| aggregate(&records, t))
        .collect::<mst_core::Result<Vec<_>>>()?;
    let first = options.targets[0];
    let bins = noc_scale_bins(&records, first, &default_bin_edges())?;
    Ok(EvalOutcome {
        records,
        summaries,
        bins,
    })
}

/// Human-readable NoC / NoF table followed by the NoC-Scale bins.
pub fn format_outcome(outcome: &EvalOutcome, max_clicks: usize) -> String {
    let mut s = String::new();
    let n = outcome.records.len();
    writeln!(s, "samples: {n}, click budget: {max_clicks}").unwrap();
    for sum in &outcome.summaries {
        writeln!(
            s,
            "NoC@{:.0}: {:.3}   NoF@{:.0}: {}",
            sum.target * 100.0,
            sum.mean_noc,
            sum.target * 100.0,
            sum.nof
        )
        .unwrap();
    }
    if let Some(first) = outcome.summaries.first() {
        writeln!(s, "NoC-Scale @{:.0} (target area ratio):", first.target * 100.0).unwrap();
    }
    for b in &outcome.bins {
        let noc = b.mean_noc.map_or("-".to_string(), |v| format!("{v:.3}"));
        writeln!(s, "  [{:.1}, {:.1})  n={:<4} NoC={noc}", b.lo, b.hi, b.count).unwrap();
    }
    s
}

/// Writes a selection dump (overlay PNGs plus CSV) per sample after its first simulated click.
pub fn run_select(model: &MstModel<f32>, samples: &[Sample], out: &Path) -> Result<()> {
    if !model.config().has_mst() {
        bail!("checkpoint has no fusion blocks, nothing is selected");
    }
    for s in samples {
        let mut state = ClickState::new(s.image.width, s.image.height);
        let empty = Mask::empty(s.mask.width, s.mask.height);
        if let Some(c) = next_click(&empty, &s.mask)? {
            state.push(c)?;
        }
        let (_, summaries) = model.predict_with_selection(&s.image, &state)?;
        write_selection_dump(&out.join(&s.id), &s.image, &state, &summaries)?;
    }
    Ok(())
}

/// Writes a seeded synthetic set to `out` so it can be reused as a directory dataset.
pub fn run_gen_data(seed: u64, count: usize, side: usize, out: &Path) -> Result<()> {
    save_dataset(&gen_synthetic(seed, count, side)?, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<checkpoint::Loaded<f32>> {
    checkpoint::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn parse_protocol(s: &str) -> Result<Protocol> {
    Ok(s.parse()?)
}
