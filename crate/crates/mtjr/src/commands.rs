//! The command implementations behind the `mtjr` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mtjr_core::data::{generate_corpus, Split, SyntheticCorpusSpec, Utterance, ACCENT_NAMES};
use mtjr_core::decode::{evaluate, DecodeConfig, EvalReport};
use mtjr_core::model::Model;
use mtjr_core::train::{finetune_init, train_model, EpochMetrics, TrainOutcome};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{self, ResultRow, SweepPoint};
use crate::{checkpoint, dataset};

pub const CHECKPOINT_FILE: &str = "checkpoint.mtjc";
pub const METRICS_FILE: &str = "metrics.csv";

/// Seconds of audio per raw feature frame (10 ms hop).
const FRAME_SECONDS: f64 = 0.01;

/// Worker threads allowed by `MTJR_THREADS`, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var("MTJR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub split: Split,
    pub utterances: usize,
    pub frames: usize,
    pub per_accent: Vec<usize>,
    pub features_crc32: u32,
}

impl SplitSummary {
    pub fn hours(&self) -> f64 {
        self.frames as f64 * FRAME_SECONDS / 3600.0
    }
}

impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<5} {:>6} utts {:>7.3} h", self.split.name(), self.utterances, self.hours())?;
        for (name, n) in ACCENT_NAMES.iter().zip(&self.per_accent) {
            write!(f, "  {name} {n}")?;
        }
        write!(f, "  crc32 {:08x}", self.features_crc32)
    }
}

/// Reads a corpus spec (JSON; omitted fields take defaults).
pub fn load_corpus_spec(path: &Path) -> Result<SyntheticCorpusSpec> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let spec: SyntheticCorpusSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Generates every non-empty split of `spec` into `out/<split>/`.
pub fn gen_data(spec: &SyntheticCorpusSpec, out: &Path) -> Result<Vec<SplitSummary>> {
    spec.validate()?;
    let mut summaries = Vec::new();
    for split in Split::ALL {
        if spec.size(split) == 0 {
            continue;
        }
        let corpus = generate_corpus(spec, split)?;
        let features_crc32 = dataset::save(&out.join(split.name()), &corpus)?;
        let mut per_accent = vec![0; spec.accent_count];
        for u in &corpus {
            per_accent[u.accent_id] += 1;
        }
        summaries.push(SplitSummary {
            split,
            utterances: corpus.len(),
            frames: corpus.iter().map(|u| u.features.rows).sum(),
            per_accent,
            features_crc32,
        });
    }
    Ok(summaries)
}

/// Trains per `cfg` (fine-tuning from `cfg.init_from` when set), writing the
/// checkpoint and the per-epoch metrics under `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    for field in cfg.ignored_fields() {
        log::warn!("mode {} ignores {field}", cfg.mode().name());
    }
    let trainer = cfg.trainer_config()?;
    let corpus = dataset::load(&cfg.train_data)?;
    let dev = match &cfg.dev_data {
        Some(dir) => dataset::load(dir)?,
        None => Vec::new(),
    };
    let model = match &cfg.init_from {
        Some(path) => {
            let pretrained = checkpoint::load(path)?;
            log::info!("fine-tuning from {} (step {})", path.display(), pretrained.step());
            finetune_init(&pretrained, &cfg.model, cfg.seed)?
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(Error::io(&cfg.out_dir))?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut log_so_far: Vec<EpochMetrics> = Vec::new();
    let mut write_error = None;
    let outcome = train_model(&trainer, model, &corpus, &dev, &mut |m| {
        log::info!("epoch {} total {:.4} lr {:.3e}", m.epoch, m.total, m.lr);
        log_so_far.push(m.clone());
        if let Err(e) = report::write_metrics(&metrics_path, &log_so_far) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    report::write_metrics(&metrics_path, &outcome.metrics)?;
    checkpoint::save(&cfg.out_dir.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on a dataset; transcripts are decoded only for
/// modes that train speech recognition.
pub fn eval_report(ckpt_path: &Path, data: &[Utterance], decode: &DecodeConfig) -> Result<EvalReport> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let decode = ckpt.mode.trains_asr().then_some(decode);
    let report = evaluate(&ckpt.model, ckpt.mode, ckpt.sharing, data, decode)?;
    if report.empty_references > 0 {
        log::warn!("{} utterances with empty references left out of the WER", report.empty_references);
    }
    Ok(report)
}

/// Evaluates and writes a one-row results CSV to `out`.
pub fn eval(
    ckpt_path: &Path,
    data_dir: &Path,
    out: &Path,
    decode: &DecodeConfig,
    system: &str,
    split: &str,
) -> Result<ResultRow> {
    let data = dataset::load(data_dir)?;
    let report = eval_report(ckpt_path, &data, decode)?;
    let row = ResultRow { system: system.to_owned(), split: split.to_owned(), report };
    report::write_results(out, std::slice::from_ref(&row))?;
    Ok(row)
}

/// The two swept settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Lambda,
    #[value(name = "tap_layer")]
    TapLayer,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::TapLayer => "tap_layer",
        }
    }

    /// `base` with this setting replaced by `value`, output in its own
    /// subdirectory.
    pub fn apply(self, base: &RunConfig, index: usize, value: f64, root: &Path) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Lambda => cfg.loss.lambda = value,
            SweepParam::TapLayer => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("tap_layer value {value} is not a layer number")));
                }
                cfg.tap_layer = Some(value as usize);
            }
        }
        cfg.out_dir = root.join(format!("{index:02}-{value}"));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains and evaluates one run per value with every other setting fixed.
/// Values run on up to `threads` workers; `sweep.csv` and `curves.csv`
/// under `<out_dir>/sweep-<param>/` are rewritten as values complete, in
/// value order.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64], threads: usize) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let root = base.out_dir.join(format!("sweep-{}", param.name()));
    let configs =
        values.iter().enumerate().map(|(i, &v)| param.apply(base, i, v, &root)).collect::<Result<Vec<_>>>()?;
    let eval_dir: PathBuf = base
        .test_data
        .clone()
        .or_else(|| base.dev_data.clone())
        .ok_or_else(|| Error::Config("sweep needs test_data or dev_data for evaluation".into()))?;
    let eval_data = dataset::load(&eval_dir)?;
    fs::create_dir_all(&root).map_err(Error::io(&root))?;

    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<SweepPoint>>> = Mutex::new(vec![None; values.len()]);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let run_one = |i: usize| -> Result<SweepPoint> {
        let cfg = &configs[i];
        let outcome = train(cfg)?;
        let report = eval_report(&cfg.out_dir.join(CHECKPOINT_FILE), &eval_data, &cfg.decode)?;
        Ok(SweepPoint {
            value: values[i],
            wer: report.wer.map(|w| w.wer),
            acc: report.accent_accuracy,
            metrics: outcome.metrics,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, values.len()) {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= values.len() {
                    return;
                }
                match run_one(i) {
                    Ok(point) => {
                        let mut done = done.lock().expect("lock");
                        done[i] = Some(point);
                        let finished: Vec<SweepPoint> = done.iter().flatten().cloned().collect();
                        if let Err(e) = report::write_sweep(&root, &finished) {
                            failure.lock().expect("lock").get_or_insert(e);
                        }
                    }
                    Err(e) => {
                        failure.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    Ok(done.into_inner().expect("lock").into_iter().map(|p| p.expect("every value ran")).collect())
}
