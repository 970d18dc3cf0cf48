//! Training loop, evaluation, prediction, weight-trace summaries and the
//! gradient-check suite behind the command-line tool.
//!
//! A training run writes into its output directory:
//! `config.toml`, `train_log.csv` (one row per step), `weight_trace.csv`
//! (one row per epoch and level), `val_metrics.csv` when a validation set is
//! given, and `model.ckpt` plus `manifest.txt`, rewritten at each epoch end.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{self, ModalFeatures, Scheme, SchemeOutputs};
use crate::iigm::{iigm_group, GuidanceConvs, GuidedPyramid};
use crate::losses::{self, total_loss, LossReport};
use crate::metrics::{self, MetricReport, Scores};
use crate::network::{EncoderConfig, Model, ModelConfig, LEVELS};
use crate::optim::Adam;
use crate::params::{Bound, ConvParams, InitScheme, ParamStore};
use crate::synthdata::{self, DatasetIndex, Sample};
use crate::tensor::{gradcheck, gradcheck_smooth, ConvGeometry, Graph, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRACE_FILE: &str = "weight_trace.csv";
pub const VAL_FILE: &str = "val_metrics.csv";

/// Epochs averaged by the weight-trace summary.
pub const TRACE_WINDOW: usize = 5;

/// Bilinear resize of a `[C,H,W]` image.
pub fn resize_image(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::dim("rank", format!("image must be [C,H,W], got {:?}", s)));
    }
    if (s[1], s[2]) == (h, w) {
        return Ok(t.clone());
    }
    let g = Graph::new();
    let x = g.input(t.clone().reshape([1, s[0], s[1], s[2]])?);
    let y = g.bilinear_resize(x, h, w)?;
    let out = g.value(y).clone();
    out.reshape([s[0], h, w])
}

/// A sample at the model's input size; the mask is re-binarized at 0.5.
fn fit(s: &Sample, n: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let gt = resize_image(&s.gt, n, n)?.map(|v| (v >= 0.5) as u8 as f64);
    Ok((resize_image(&s.rgb, n, n)?, resize_image(&s.aux, n, n)?, gt))
}

struct Batch {
    rgb: Tensor,
    aux: Tensor,
    gt: Tensor,
}

fn make_batch(samples: &[&Sample], n: usize) -> Result<Batch> {
    let fitted = samples.iter().map(|s| fit(s, n)).collect::<Result<Vec<_>>>()?;
    let stack = |k: usize| -> Result<Tensor> {
        let parts: Vec<&Tensor> = fitted
            .iter()
            .map(|f| match k {
                0 => &f.0,
                1 => &f.1,
                _ => &f.2,
            })
            .collect();
        Tensor::stack(&parts)
    };
    Ok(Batch {
        rgb: stack(0)?,
        aux: stack(1)?,
        gt: stack(2)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRow {
    pub epoch: usize,
    /// 1-based across the whole run.
    pub step: usize,
    pub report: LossReport,
}

/// Mean ensemble weight per scheme at one level over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub level: usize,
    /// In [`Scheme::ALL`] order; `None` for schemes not in the bank.
    pub weights: [Option<f64>; 5],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub trace: Vec<TraceRow>,
    pub val: Vec<(usize, Scores)>,
}

impl TrainLog {
    /// Mean total loss of one epoch's steps.
    pub fn epoch_loss(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.report.total).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub log: TrainLog,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

struct Logs {
    dir: PathBuf,
    steps: csv::Writer<BufWriter<File>>,
    trace: csv::Writer<BufWriter<File>>,
    val: Option<csv::Writer<BufWriter<File>>>,
}

impl Logs {
    fn open(dir: &Path, with_val: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut steps = csv::Writer::from_writer(create(&dir.join(TRAIN_LOG_FILE))?);
        let mut head = vec!["epoch", "step"];
        head.extend(LossReport::CSV_HEADER);
        steps.write_record(&head).map_err(|e| csv_err(dir, e))?;
        let mut trace = csv::Writer::from_writer(create(&dir.join(TRACE_FILE))?);
        let mut head = vec!["epoch".to_string(), "level".to_string()];
        head.extend(Scheme::ALL.iter().map(|s| s.code().to_string()));
        trace.write_record(&head).map_err(|e| csv_err(dir, e))?;
        let val = if with_val {
            let mut w = csv::Writer::from_writer(create(&dir.join(VAL_FILE))?);
            w.write_record(["epoch", "E", "wF", "F_mean", "F_max", "MAE"])
                .map_err(|e| csv_err(dir, e))?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps,
            trace,
            val,
        })
    }

    fn step(&mut self, r: &StepRow) -> Result<()> {
        let mut row = vec![r.epoch.to_string(), r.step.to_string()];
        row.extend(r.report.fields().iter().map(|v| v.to_string()));
        self.steps.write_record(&row).map_err(|e| csv_err(&self.dir, e))
    }

    fn trace(&mut self, r: &TraceRow) -> Result<()> {
        let mut row = vec![r.epoch.to_string(), r.level.to_string()];
        row.extend(r.weights.iter().map(|w| w.map(|v| v.to_string()).unwrap_or_default()));
        self.trace.write_record(&row).map_err(|e| csv_err(&self.dir, e))
    }

    fn val(&mut self, epoch: usize, s: &Scores) -> Result<()> {
        if let Some(w) = &mut self.val {
            let row = [s.e_measure, s.weighted_f, s.f_mean, s.f_max, s.mae].map(|v| v.to_string());
            let mut all = vec![epoch.to_string()];
            all.extend(row);
            w.write_record(&all).map_err(|e| csv_err(&self.dir, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let dir = self.dir.clone();
        self.steps.flush().map_err(|e| Error::io(&dir, e))?;
        self.trace.flush().map_err(|e| Error::io(&dir, e))?;
        if let Some(w) = &mut self.val {
            w.flush().map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Writes `model.ckpt` and `manifest.txt` into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), store)?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, checkpoint::manifest(&cfg.to_toml(), store)).map_err(|e| Error::io(&m, e))
}

/// Rebuilds the model described by the manifest beside `ckpt` and loads its
/// parameters.
pub fn load_run(ckpt: &Path) -> Result<(RunConfig, Model, ParamStore)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let body = text
        .strip_prefix("# configuration\n")
        .and_then(|t| t.split("\n# parameters").next())
        .ok_or_else(|| Error::format(&mpath, "missing configuration section"))?;
    let cfg = RunConfig::from_toml(body).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let (model, mut store) = Model::build(cfg.model_config()?, InitScheme::Zeros, cfg.seed)?;
    checkpoint::load_into(ckpt, &mut store)?;
    Ok((cfg, model, store))
}

/// Structural checks for every sample, plus label postconditions where
/// labels are present. Fails on the first bad sample.
pub fn check_dataset(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    for s in samples {
        if s.labels.is_empty() {
            synthdata::validate_structure(s)?;
        } else {
            synthdata::validate(s)?;
        }
    }
    Ok(())
}

fn open_split(path: &Option<PathBuf>, what: &str) -> Result<Vec<Sample>> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("no {} dataset configured (data.{})", what, what)))?;
    DatasetIndex::open(p)?.load_all()
}

/// Trains on the configured datasets and writes the run into `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<Trained> {
    let train_set = open_split(&cfg.data.train, "train")?;
    let val_set = match &cfg.data.val {
        Some(_) => Some(open_split(&cfg.data.val, "val")?),
        None => None,
    };
    train_samples(cfg, &train_set, val_set.as_deref(), Some(&cfg.out))
}

/// Trains on in-memory samples. With `out`, logs and checkpoints are written
/// as the run proceeds.
pub fn train_samples(cfg: &RunConfig, train: &[Sample], val: Option<&[Sample]>, out: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    check_dataset(train)?;
    if let Some(v) = val {
        check_dataset(v)?;
    }
    let model_cfg = cfg.model_config()?;
    let n = model_cfg.encoder.input_size;
    let (model, mut store) = Model::build(model_cfg, InitScheme::Uniform, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam(), &store)?;
    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let c = dir.join(CONFIG_FILE);
            fs::write(&c, cfg.to_toml()).map_err(|e| Error::io(&c, e))?;
            Some(Logs::open(dir, val.is_some())?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<usize, ([f64; 5], usize)> = BTreeMap::new();
        for chunk in order.chunks(cfg.optim.batch_size) {
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let b = make_batch(&picked, n)?;
            let g = Graph::new();
            let p = store.bind(&g);
            let fwd = model.forward(&g, &p, g.input(b.rgb.clone()), g.input(b.aux))?;
            let loss = total_loss(&g, &fwd.saliency, &b.gt, &b.rgb, &cfg.loss)?;
            if !loss.report.total.is_finite() {
                return Err(Error::Contract(format!("loss diverged at epoch {} step {}", epoch, step + 1)));
            }
            let mut grads = g.backward(loss.total)?;
            opt.step(&mut store, &p, &mut grads)?;
            step += 1;
            let row = StepRow {
                epoch,
                step,
                report: loss.report,
            };
            if let Some(l) = &mut logs {
                l.step(&row)?;
            }
            log.steps.push(row);
            for (level, weights) in &fwd.scheme_weights {
                let e = sums.entry(*level).or_insert(([0.0; 5], 0));
                for (s, w) in weights {
                    e.0[s.position()] += w;
                }
                e.1 += 1;
            }
        }
        let present: Vec<Scheme> = model
            .config()
            .ablation
            .bank_mode()?
            .map(|m| m.schemes)
            .unwrap_or_default();
        for (level, (acc, count)) in sums {
            let mut weights = [None; 5];
            for s in &present {
                weights[s.position()] = Some(acc[s.position()] / count as f64);
            }
            let row = TraceRow { epoch, level, weights };
            if let Some(l) = &mut logs {
                l.trace(&row)?;
            }
            log.trace.push(row);
        }
        if let Some(v) = val {
            let r = evaluate_samples(&model, &store, v, cfg.optim.batch_size)?;
            if let Some(l) = &mut logs {
                l.val(epoch, &r.overall)?;
            }
            log.val.push((epoch, r.overall));
        }
        if let (Some(l), Some(dir)) = (&mut logs, out) {
            l.flush()?;
            save_run(dir, cfg, &store)?;
        }
        log::info!(
            "epoch {}/{}: mean loss {:.5}",
            epoch,
            cfg.optim.epochs,
            log.epoch_loss(epoch).unwrap_or(f64::NAN)
        );
    }
    Ok(Trained { model, store, log })
}

/// `S_2` for each sample at the sample's own extent, `[1,1,H,W]`.
pub fn predict_samples(model: &Model, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<Vec<Tensor>> {
    let n = model.config().encoder.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = make_batch(&refs, n)?;
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let fwd = model.forward(&g, &p, g.input(b.rgb), g.input(b.aux))?;
        let s2 = g.value(fwd.saliency.final_map()).clone();
        for (k, s) in chunk.iter().enumerate() {
            let (h, w) = s.extent();
            let map = resize_image(&s2.batch_item(k)?.reshape([1, n, n])?, h, w)?;
            out.push(map.reshape([1, 1, h, w])?);
        }
    }
    Ok(out)
}

/// Metric report; per-challenge columns appear when every sample is labelled.
pub fn evaluate_samples(model: &Model, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_samples(model, store, samples, batch)?;
    let gts: Vec<Tensor> = samples.iter().map(|s| s.gt.clone()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.labels.clone()).collect();
    let labelled = labels.iter().all(|l| !l.is_empty());
    metrics::report(&preds, &gts, labelled.then_some(&labels[..]))
}

/// Evaluates a saved run on a dataset directory and writes `metrics.csv` and
/// `metrics.txt` into `out`.
pub fn evaluate(ckpt: &Path, dataset: &Path, out: &Path) -> Result<MetricReport> {
    let (cfg, model, store) = load_run(ckpt)?;
    let index = DatasetIndex::open(dataset)?;
    if index.is_empty() {
        return Err(Error::Contract(format!("dataset {} is empty", dataset.display())));
    }
    let mut samples = index.load_all()?;
    if !index.has_labels() {
        samples.iter_mut().for_each(|s| s.labels.clear());
    }
    let report = evaluate_samples(&model, &store, &samples, cfg.optim.batch_size)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = dataset.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    report.save(out, &method_name(&cfg), &name)?;
    Ok(report)
}

/// Short label for the configured variant.
pub fn method_name(cfg: &RunConfig) -> String {
    let a = &cfg.ablation;
    let mut parts = vec!["lafb".to_string()];
    if a.no_afb {
        parts.push("no-afb".into());
    }
    if a.no_aem {
        parts.push("no-aem".into());
    }
    if a.no_iigm {
        parts.push("no-iigm".into());
    }
    if !a.schemes.trim().is_empty() {
        parts.push(a.schemes.replace(',', "+"));
    }
    parts.join("-")
}

/// `[1,H,W]` saliency of one image pair at the pair's extent.
pub fn predict_pair(model: &Model, store: &ParamStore, rgb: &Tensor, aux: &Tensor) -> Result<Tensor> {
    if rgb.shape() != aux.shape() {
        return Err(Error::dim(
            "shape",
            format!("rgb {:?} and auxiliary {:?} images differ", rgb.shape(), aux.shape()),
        ));
    }
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let s = Sample {
        id: "input".into(),
        rgb: rgb.clone(),
        aux: aux.clone(),
        gt: Tensor::zeros([1, h, w]),
        labels: Vec::new(),
    };
    let map = predict_samples(model, store, &[s], 1)?.remove(0);
    map.reshape([1, h, w])
}

/// Predicts from two PNG files and writes an 8-bit grayscale PNG.
pub fn predict_files(ckpt: &Path, rgb: &Path, aux: &Path, out: &Path) -> Result<Tensor> {
    let (_, model, store) = load_run(ckpt)?;
    let r = synthdata::load_rgb_png(rgb)?;
    let a = synthdata::load_rgb_png(aux)?;
    let map = predict_pair(&model, &store, &r, &a)?;
    let (h, w) = (map.shape()[1], map.shape()[2]);
    synthdata::save_gray_png(out, &map, h, w)?;
    Ok(map)
}

/// Weight-trace rows from `weight_trace.csv`.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 7 {
            return Err(Error::format(path, format!("expected 7 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("`{}` is not a number", &rec[i])))
        };
        let mut weights = [None; 5];
        for (k, w) in weights.iter_mut().enumerate() {
            if !rec[2 + k].trim().is_empty() {
                *w = Some(num(2 + k)?);
            }
        }
        out.push(TraceRow {
            epoch: num(0)? as usize,
            level: num(1)? as usize,
            weights,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSummary {
    pub means: Vec<(Scheme, f64)>,
    /// The scheme with the strictly largest mean.
    pub dominant: Option<Scheme>,
}

impl LevelSummary {
    fn new(means: Vec<(Scheme, f64)>) -> Self {
        let mut dominant = None;
        if let Some(&(s, best)) = means.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            if means.iter().filter(|(_, v)| *v == best).count() == 1 {
                dominant = Some(s);
            }
        }
        Self { means, dominant }
    }

    pub fn mean_of(&self, s: Scheme) -> Option<f64> {
        self.means.iter().find(|(x, _)| *x == s).map(|(_, v)| *v)
    }

    /// `s`'s mean minus the average of the other schemes' means.
    pub fn margin(&self, s: Scheme) -> Option<f64> {
        let own = self.mean_of(s)?;
        let others: Vec<f64> = self.means.iter().filter(|(x, _)| *x != s).map(|(_, v)| *v).collect();
        if others.is_empty() {
            return None;
        }
        Some(own - others.iter().sum::<f64>() / others.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    /// Epochs averaged.
    pub epochs: Vec<usize>,
    /// Set when fewer than [`TRACE_WINDOW`] epochs were available.
    pub short: bool,
    pub levels: BTreeMap<usize, LevelSummary>,
    /// Per-scheme means averaged over levels.
    pub overall: LevelSummary,
}

impl TraceSummary {
    pub fn table(&self, matched: Option<Scheme>) -> String {
        let mut out = String::from("level");
        let schemes: Vec<Scheme> = self.overall.means.iter().map(|(s, _)| *s).collect();
        for s in &schemes {
            out.push_str(&format!("  {:>7}", s.code()));
        }
        out.push_str("  dominant");
        if let Some(m) = matched {
            out.push_str(&format!("  {}_dominant  {}_margin", m.code(), m.code()));
        }
        out.push('\n');
        let rows = self
            .levels
            .iter()
            .map(|(l, s)| (format!("{:>5}", l), s))
            .chain(std::iter::once(("  all".to_string(), &self.overall)));
        for (name, s) in rows {
            out.push_str(&name);
            for (_, v) in &s.means {
                out.push_str(&format!("  {:>7.4}", v));
            }
            out.push_str(&format!("  {:>8}", s.dominant.map(|d| d.code()).unwrap_or("none")));
            if let Some(m) = matched {
                let margin = s.margin(m).map(|v| format!("{:+.4}", v)).unwrap_or_else(|| "n/a".into());
                out.push_str(&format!("  {:>11}  {:>9}", s.dominant == Some(m), margin));
            }
            out.push('\n');
        }
        if self.short {
            out.push_str(&format!(
                "note: only {} epoch(s) available, fewer than {}\n",
                self.epochs.len(),
                TRACE_WINDOW
            ));
        }
        out
    }
}

/// Mean weight per scheme over the last [`TRACE_WINDOW`] epochs, per level
/// and overall.
pub fn weight_trace(rows: &[TraceRow]) -> Result<TraceSummary> {
    if rows.is_empty() {
        return Err(Error::Contract("weight trace has no rows".into()));
    }
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let short = epochs.len() < TRACE_WINDOW;
    let epochs = epochs[epochs.len().saturating_sub(TRACE_WINDOW)..].to_vec();
    let mut acc: BTreeMap<usize, ([f64; 5], [usize; 5])> = BTreeMap::new();
    for r in rows.iter().filter(|r| epochs.contains(&r.epoch)) {
        let e = acc.entry(r.level).or_insert(([0.0; 5], [0; 5]));
        for (k, w) in r.weights.iter().enumerate() {
            if let Some(v) = w {
                e.0[k] += v;
                e.1[k] += 1;
            }
        }
    }
    let levels: BTreeMap<usize, LevelSummary> = acc
        .into_iter()
        .map(|(level, (sum, count))| {
            let means = Scheme::ALL
                .iter()
                .filter(|s| count[s.position()] > 0)
                .map(|s| (*s, sum[s.position()] / count[s.position()] as f64))
                .collect();
            (level, LevelSummary::new(means))
        })
        .collect();
    let overall = Scheme::ALL
        .iter()
        .filter_map(|s| {
            let v: Vec<f64> = levels.values().filter_map(|l| l.mean_of(*s)).collect();
            (!v.is_empty()).then(|| (*s, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    Ok(TraceSummary {
        epochs,
        short,
        levels,
        overall: LevelSummary::new(overall),
    })
}

/// One line of the gradient suite.
#[derive(Clone, Debug, PartialEq)]
pub struct GradLine {
    pub name: String,
    pub max_error: f64,
    pub checked: usize,
    /// Entries skipped because a ReLU kink lies within the step.
    pub skipped: usize,
}

impl GradLine {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol && self.skipped * 20 <= self.checked + self.skipped
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(x * probe)` so every output entry gets a distinct weight.
fn probe(g: &Graph, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = rand_t(&g.shape(x), &mut rng);
    Ok(g.sum(g.mul(x, g.input(p))?))
}

fn conv_leaves(p: &ConvParams) -> [Tensor; 2] {
    [p.weight.clone(), p.bias.clone()]
}

fn rebind(g: &Graph, p: &ConvParams, w: Var, b: Var) -> crate::params::BoundConv {
    let mut c = p.bind(g, false);
    c.weight = w;
    c.bias = b;
    c
}

fn all_entries(leaves: &[Tensor]) -> Vec<(usize, usize)> {
    leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |e| (li, e)))
        .collect()
}

/// Checks every entry, skipping those within one step of a ReLU kink.
fn smooth_line<F>(name: &str, f: F, leaves: &[Tensor]) -> Result<GradLine>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let r = gradcheck_smooth(f, leaves, &all_entries(leaves), 1e-3)?;
    Ok(GradLine {
        name: name.to_string(),
        max_error: r.max_error,
        checked: r.checked,
        skipped: r.skipped,
    })
}

fn full_line(name: &str, err: f64, leaves: &[Tensor]) -> GradLine {
    GradLine {
        name: name.to_string(),
        max_error: err,
        checked: leaves.iter().map(Tensor::len).sum(),
        skipped: 0,
    }
}

/// Finite-difference checks of every primitive and composite on random
/// tensors with extents of at most 8.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    let x = rand_t(&[2, 3, 5, 6], &mut rng);
    let y = rand_t(&[2, 3, 5, 6], &mut rng);

    type Unary = fn(&Graph, Var) -> Result<Var>;
    let unary: [(&str, Unary); 8] = [
        ("scalar_mul", |g, v| Ok(g.scalar_mul(v, -1.7))),
        ("sigmoid", |g, v| Ok(g.sigmoid(v))),
        ("relu", |g, v| Ok(g.relu(v))),
        ("bilinear_resize_up", |g, v| g.bilinear_resize(v, 8, 7)),
        ("bilinear_resize_down", |g, v| g.bilinear_resize(v, 3, 4)),
        ("global_avg_pool", |g, v| g.global_avg_pool(v)),
        ("global_max_pool", |g, v| g.global_max_pool(v)),
        ("sum", |g, v| Ok(g.sum(v))),
    ];
    for (k, (name, op)) in unary.into_iter().enumerate() {
        let leaves = [x.clone()];
        let err = gradcheck(|g, v| probe(g, op(g, v[0])?, 100 + k as u64), &leaves)?;
        lines.push(full_line(name, err, &leaves));
    }
    type Binary = fn(&Graph, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("concat_channels", |g, a, b| g.concat_channels(&[a, b])),
    ];
    for (k, (name, op)) in binary.into_iter().enumerate() {
        let leaves = [x.clone(), y.clone()];
        let err = gradcheck(|g, v| probe(g, op(g, v[0], v[1])?, 200 + k as u64), &leaves)?;
        lines.push(full_line(name, err, &leaves));
    }
    let scale = Tensor::from_fn([2, 3, 1, 1], |i| 0.3 + 0.1 * i as f64);
    let leaves = [x.clone(), scale];
    let err = gradcheck(|g, v| probe(g, g.scale_channels(v[0], v[1])?, 210), &leaves)?;
    lines.push(full_line("scale_channels", err, &leaves));

    for (name, geom, k) in [
        ("conv2d_3x3", ConvGeometry::same3(1), 3),
        ("conv2d_dilated", ConvGeometry::same3(2), 3),
        ("conv2d_strided", ConvGeometry { stride: 2, padding: 1, dilation: 1 }, 3),
        ("conv2d_1x1", ConvGeometry::default(), 1),
    ] {
        let p = ConvParams::uniform(4, 3, k, geom, &mut rng);
        let leaves = [x.clone(), p.weight.clone(), p.bias.clone()];
        let err = gradcheck(|g, v| probe(g, g.conv2d(v[0], v[1], v[2], geom)?, 220), &leaves)?;
        lines.push(full_line(name, err, &leaves));
    }

    lines.extend(scheme_lines(&mut rng)?);
    lines.extend(guidance_lines(&mut rng)?);
    lines.extend(loss_lines(&mut rng)?);
    lines.push(end_to_end_line(seed)?);
    Ok(lines)
}

fn scheme_lines(rng: &mut ChaCha8Rng) -> Result<Vec<GradLine>> {
    let c = 2;
    let fr = rand_t(&[2, c, 6, 6], rng);
    let fa = rand_t(&[2, c, 6, 6], rng);
    let same = ConvGeometry::same3(1);
    let cb = ConvParams::uniform(c, 2 * c, 3, same, rng);
    let sv = ConvParams::uniform(c, 2 * c, 3, ConvGeometry::same3(2), rng);
    let ic_in = ConvParams::uniform(2 * c, 2 * c, 3, same, rng);
    let ic_out = ConvParams::uniform(c, 2 * c, 3, same, rng);
    let li = ConvParams::uniform(c, c, 3, same, rng);
    let td = ConvParams::uniform(c, c, 3, same, rng);
    let width = 5 * c;
    let avg = ConvParams::uniform(width, width, 1, ConvGeometry::default(), rng);
    let max = ConvParams::uniform(width, width, 1, ConvGeometry::default(), rng);
    let mut lines = Vec::new();

    let single: [(&str, &ConvParams); 4] = [("scheme_cb", &cb), ("scheme_sv", &sv), ("scheme_li", &li), ("scheme_td", &td)];
    for (name, p) in single {
        let mut leaves = vec![fr.clone(), fa.clone()];
        leaves.extend(conv_leaves(p));
        let line = smooth_line(
            name,
            |g, v| {
                let m = ModalFeatures::new(g, 3, v[0], v[1])?;
                let conv = rebind(g, p, v[2], v[3]);
                let out = match name {
                    "scheme_cb" => fusion::fuse_cb(g, &m, &conv)?,
                    "scheme_sv" => fusion::fuse_sv(g, &m, &conv)?,
                    "scheme_li" => fusion::fuse_li(g, &m, &conv)?.1,
                    _ => fusion::fuse_td(g, &m, &conv)?.1,
                };
                probe(g, out, 300)
            },
            &leaves,
        )?;
        lines.push(line);
    }

    let mut leaves = vec![fr.clone(), fa.clone()];
    leaves.extend(conv_leaves(&ic_in));
    leaves.extend(conv_leaves(&ic_out));
    let line = smooth_line(
        "scheme_ic",
        |g, v| {
            let m = ModalFeatures::new(g, 3, v[0], v[1])?;
            let out = fusion::fuse_ic(g, &m, &rebind(g, &ic_in, v[2], v[3]), &rebind(g, &ic_out, v[4], v[5]))?;
            probe(g, out, 301)
        },
        &leaves,
    )?;
    lines.push(line);

    // ensemble over five scheme-shaped inputs
    let parts: Vec<Tensor> = (0..5).map(|_| rand_t(&[2, c, 4, 4], rng)).collect();
    let mut leaves = parts.clone();
    leaves.extend(conv_leaves(&avg));
    leaves.extend(conv_leaves(&max));
    let line = smooth_line(
        "aem",
        |g, v| {
            let outs = Scheme::ALL.iter().zip(&v[..5]).map(|(s, x)| (*s, *x)).collect();
            let s = SchemeOutputs::new(g, outs)?;
            let (_, out) = fusion::aem(g, &s, &rebind(g, &avg, v[5], v[6]), &rebind(g, &max, v[7], v[8]))?;
            probe(g, out.fb, 302)
        },
        &leaves,
    )?;
    lines.push(line);
    Ok(lines)
}

fn guidance_lines(rng: &mut ChaCha8Rng) -> Result<Vec<GradLine>> {
    let same = ConvGeometry::same3(1);
    let lo = rand_t(&[1, 2, 8, 8], rng);
    let mid = rand_t(&[1, 3, 4, 4], rng);
    let hi = rand_t(&[1, 2, 2, 2], rng);
    let hm = ConvParams::uniform(2, 3, 3, same, rng);
    let hh = ConvParams::uniform(2, 2, 3, same, rng);
    let ll = ConvParams::uniform(2, 2, 3, same, rng);
    let lm = ConvParams::uniform(2, 3, 3, same, rng);
    let mut leaves = vec![lo, mid, hi];
    for p in [&hm, &hh, &ll, &lm] {
        leaves.extend(conv_leaves(p));
    }
    let line = smooth_line(
        "iigm_group",
        |g, v| {
            let convs = GuidanceConvs {
                high_from_mid: rebind(g, &hm, v[3], v[4]),
                high_from_hi: rebind(g, &hh, v[5], v[6]),
                low_from_lo: rebind(g, &ll, v[7], v[8]),
                low_from_mid: rebind(g, &lm, v[9], v[10]),
            };
            let out = iigm_group(g, v[0], v[1], v[2], &convs)?;
            let a = probe(g, out.i_lo, 400)?;
            let b = probe(g, out.i_hi, 401)?;
            g.add(a, b)
        },
        &leaves,
    )?;
    let mut lines = vec![line];

    let cfg = ModelConfig {
        encoder: EncoderConfig {
            input_size: 32,
            stem_channels: 2,
            channels: [2, 2, 3, 3],
        },
        decoder_width: 3,
        ablation: Default::default(),
    };
    let (model, store) = Model::build(cfg, InitScheme::Uniform, rng.gen())?;
    let width = model.bank_width(3);
    let leaves = [rand_t(&[1, width, 6, 6], rng)];
    let rfb_ids: Vec<usize> = store
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with("rfb.l3."))
        .map(|(i, _)| i)
        .collect();
    let mut rfb_leaves = leaves.to_vec();
    rfb_leaves.extend(rfb_ids.iter().map(|&i| store.iter().nth(i).expect("listed").1.clone()));
    let entries: Vec<(usize, usize)> = rfb_leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |e| (li, e)))
        .collect();
    let r = gradcheck_smooth(
        |g, v| {
            let mut vars: Vec<Var> = store.iter().map(|(_, t)| g.input(t.clone())).collect();
            for (k, &i) in rfb_ids.iter().enumerate() {
                vars[i] = v[1 + k];
            }
            let p = Bound::from_vars(&store, vars)?;
            probe(g, model.rfb(3).forward(g, &p, v[0])?, 402)
        },
        &rfb_leaves,
        &entries,
        1e-3,
    )?;
    lines.push(GradLine {
        name: "rfb".into(),
        max_error: r.max_error,
        checked: r.checked,
        skipped: r.skipped,
    });

    let levels: Vec<Tensor> = LEVELS
        .iter()
        .map(|&l| rand_t(&[1, model.bank_width(l), 32 >> l, 32 >> l], rng))
        .collect();
    let entries: Vec<(usize, usize)> = levels
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |e| (li, e)))
        .collect();
    let r = gradcheck_smooth(
        |g, v| {
            let p = store.bind_frozen(g);
            let guided = GuidedPyramid {
                levels: LEVELS.iter().copied().zip(v.iter().copied()).collect(),
            };
            let out = model.decode(g, &p, &guided)?;
            let mut total = probe(g, out.at(2), 403)?;
            for l in 3..=5 {
                total = g.add(total, g.sum(out.at(l)))?;
            }
            Ok(total)
        },
        &levels,
        &entries,
        1e-3,
    )?;
    lines.push(GradLine {
        name: "decode".into(),
        max_error: r.max_error,
        checked: r.checked,
        skipped: r.skipped,
    });
    Ok(lines)
}

fn loss_lines(rng: &mut ChaCha8Rng) -> Result<Vec<GradLine>> {
    let s = Tensor::from_fn([2, 1, 6, 5], |_| rng.gen_range(0.05..0.95));
    let gt = Tensor::from_fn([2, 1, 6, 5], |_| rng.gen_bool(0.4) as u8 as f64);
    let rgb = Tensor::from_fn([2, 3, 6, 5], |_| rng.gen_range(0.0..1.0));
    let leaves = [s];
    let mut lines = Vec::new();
    for name in ["bce", "dice", "smoothness"] {
        let err = gradcheck(
            |g, v| match name {
                "bce" => losses::bce(g, v[0], &gt),
                "dice" => losses::dice(g, v[0], &gt),
                _ => losses::smoothness(g, v[0], &rgb),
            },
            &leaves,
        )?;
        lines.push(full_line(name, err, &leaves));
    }
    Ok(lines)
}

/// `sum(S_2)` of a small full model over about 1% of its parameters.
fn end_to_end_line(seed: u64) -> Result<GradLine> {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            input_size: 32,
            stem_channels: 2,
            channels: [2, 2, 3, 3],
        },
        decoder_width: 4,
        ablation: Default::default(),
    };
    let (model, store) = Model::build(cfg, InitScheme::Uniform, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let rgb = Tensor::from_fn([1, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let aux = Tensor::from_fn([1, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let leaves: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let total = store.scalar_count();
    let entries: Vec<(usize, usize)> = (0..(total / 100).max(1))
        .map(|_| {
            let li = rng.gen_range(0..leaves.len());
            (li, rng.gen_range(0..leaves[li].len()))
        })
        .collect();
    let r = gradcheck_smooth(
        |g, v| {
            let p = Bound::from_vars(&store, v.to_vec())?;
            let out = model.forward(g, &p, g.input(rgb.clone()), g.input(aux.clone()))?;
            Ok(g.sum(out.saliency.final_map()))
        },
        &leaves,
        &entries,
        1e-3,
    )?;
    Ok(GradLine {
        name: "end_to_end".into(),
        max_error: r.max_error,
        checked: r.checked,
        skipped: r.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(epochs: usize, w: [f64; 5]) -> Vec<TraceRow> {
        (1..=epochs)
            .flat_map(|e| {
                LEVELS.iter().map(move |&l| TraceRow {
                    epoch: e,
                    level: l,
                    weights: w.map(Some),
                })
            })
            .collect()
    }

    #[test]
    fn largest_column_dominates() {
        let s = weight_trace(&rows(8, [0.4, 0.5, 0.45, 0.7, 0.3])).unwrap();
        assert!(!s.short);
        assert_eq!(s.epochs, vec![4, 5, 6, 7, 8]);
        assert_eq!(s.overall.dominant, Some(Scheme::Li));
        assert_eq!(s.levels[&5].dominant, Some(Scheme::Li));
        assert!(s.levels[&5].margin(Scheme::Li).unwrap() > 0.0);
        assert!(s.table(Some(Scheme::Li)).contains("true"));
    }

    #[test]
    fn uniform_trace_has_no_dominant_and_short_runs_are_flagged() {
        let s = weight_trace(&rows(3, [0.5; 5])).unwrap();
        assert!(s.short);
        assert_eq!(s.overall.dominant, None);
        assert!(s.levels.values().all(|l| l.dominant.is_none()));
        assert!(s.table(None).contains("fewer than 5"));
        assert!(matches!(weight_trace(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn resize_identity_and_shape() {
        let t = Tensor::from_fn([3, 4, 4], |i| i as f64);
        assert_eq!(resize_image(&t, 4, 4).unwrap(), t);
        assert_eq!(resize_image(&t, 8, 6).unwrap().shape(), &[3, 8, 6]);
    }
}
