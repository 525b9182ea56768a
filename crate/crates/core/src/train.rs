//! Training loop, evaluation, metrics files and the filter-vs-dropout
//! comparison harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, augment, batch_indices, collate, eval_transform, AugmentPolicy, Dataset, EvalPolicy};
use crate::error::{Error, Result};
use crate::filter_attention::Variant;
use crate::model::{build_model, Checkpoint, CheckpointMeta, Model, ModelConfig};
use crate::nn::{Ctx, Mode};
use crate::optim::{cosine_lr, AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{DType, Element, Tensor};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        #[serde(default = "four")]
        num_classes: usize,
        train: usize,
        val: usize,
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_val: Option<usize>,
    },
}

fn four() -> usize {
    4
}

impl DataSpec {
    /// Raw `(train, val)` sets, pixels in `[0, 1]`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Synthetic { num_classes, train, val, seed } => {
                // disjoint streams for the two splits
                let tr = data::synth_dataset(*num_classes, *train, *seed)?;
                let va = data::synth_dataset(*num_classes, *val, seed.wrapping_add(0x5eed_0000_0001))?;
                Ok((tr, va))
            }
            DataSpec::Cifar10 { train, val, limit_train, limit_val } => {
                let mut tr = data::load_cifar10_binary(train)?;
                let mut va = data::load_cifar10_binary(val)?;
                if let Some(n) = limit_train {
                    tr.images.truncate(*n);
                }
                if let Some(n) = limit_val {
                    va.images.truncate(*n);
                }
                Ok((tr, va))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSpec,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// `t_max` of `None` decays over `epochs`.
    #[serde(default)]
    pub lr_max: Option<f64>,
    #[serde(default)]
    pub lr_min: Option<f64>,
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default)]
    pub augment: AugmentPolicy,
    pub eval: EvalPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Element type of the run; the CLI dispatches on it.
    #[serde(default)]
    pub dtype: DType,
}

fn default_batch() -> usize {
    64
}

impl TrainConfig {
    /// Epoch count of the reference synthetic run.
    pub const REFERENCE_EPOCHS: usize = 8;

    /// Reference model on the 4-class synthetic set, no crop or flip.
    pub fn synthetic_reference(epochs: usize) -> Self {
        Self {
            model: ModelConfig::reference(4),
            data: DataSpec::Synthetic { num_classes: 4, train: 2000, val: 400, seed: 0 },
            epochs,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            lr_max: Some(2e-3),
            lr_min: None,
            t_max: None,
            augment: AugmentPolicy::default(),
            eval: EvalPolicy { resize: 64, crop: 64, normalization: Default::default() },
            seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        let d = CosineSchedule::default();
        CosineSchedule {
            lr_max: self.lr_max.unwrap_or(d.lr_max),
            lr_min: self.lr_min.unwrap_or(d.lr_min),
            t_max: self.t_max.unwrap_or(self.epochs).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.plan()?;
        self.augment.validate()?;
        self.eval.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs > self.schedule().t_max {
            return Err(Error::config("t_max", format!("{} is shorter than {} epochs", self.schedule().t_max, self.epochs)));
        }
        if self.eval.crop != self.model.input_size {
            return Err(Error::config("eval.crop", format!("{} differs from model input {}", self.eval.crop, self.model.input_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.lr, self.seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("metrics row has {} fields, expected 7", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad metrics field {s:?}")));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| Error::Format(format!("bad epoch {:?}", f[0])))?,
            train_loss: num(f[1])?,
            train_acc: num(f[2])?,
            val_loss: num(f[3])?,
            val_acc: num(f[4])?,
            lr: num(f[5])?,
            seconds: num(f[6])?,
        })
    }

    /// Same numbers apart from wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        MetricsRecord { seconds: 0.0, ..self.clone() } == MetricsRecord { seconds: 0.0, ..other.clone() }
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{}", r.csv_row()).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRecord::parse_csv_row).collect()
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy and number of correct top-1 predictions.
pub fn loss_and_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize)> {
    let [b, n] = logits.shape()[..] else {
        return Err(Error::dim("loss_and_correct", logits.shape(), &[labels.len()]));
    };
    if b != labels.len() {
        return Err(Error::dim("loss_and_correct", logits.shape(), &[labels.len()]));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        let row64: Vec<f64> = row.iter().map(|v| v.to_f64c()).collect();
        let mx = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row64.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row64[label];
        correct += usize::from(argmax(row) == label);
    }
    Ok((loss, correct))
}

/// Mean loss and accuracy in evaluation mode. `ds` must already carry the
/// evaluation transform. Parameters are not touched.
pub fn evaluate<T: Element>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::contract("evaluate on an empty dataset"));
    }
    let (mut loss, mut correct) = (0.0, 0);
    for idx in batch_indices(ds.len(), batch_size, None)? {
        let (x, labels) = collate::<T>(idx.iter().map(|&i| &ds.images[i]))?;
        let logits = model.predict(&x)?;
        let (l, c) = loss_and_correct(&logits, &labels)?;
        loss += l;
        correct += c;
    }
    let n = ds.len();
    Ok(EvalResult { loss: loss / n as f64, accuracy: correct as f64 / n as f64, count: n })
}

/// splitmix64 over the seed and a path of counters.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint (written by an earlier run of the same config).
    pub resume: Option<PathBuf>,
    /// Stop after this many total epochs even if the config asks for more.
    pub stop_after: Option<usize>,
    /// Evaluate once before the first update.
    pub initial_eval: bool,
}

pub struct TrainOutcome<T: Element> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub metrics: Vec<MetricsRecord>,
    pub initial_eval: Option<EvalResult>,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    epochs: usize,
    steps: u64,
    best_val_acc: Option<f64>,
    best_epoch: Option<usize>,
    initial_eval: Option<EvalResult>,
    final_metrics: Option<&'a MetricsRecord>,
    records: &'a [MetricsRecord],
}

fn first_non_finite<T: Element>(model: &Model<T>, grads: &[Option<Vec<T>>]) -> String {
    for (p, g) in model.params.iter().zip(grads) {
        if !p.value.all_finite() {
            return p.name.clone();
        }
        if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return format!("grad of {}", p.name);
        }
    }
    "loss".into()
}

pub fn train<T: Element>(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (train_raw, val_raw) = cfg.data.load()?;
    if train_raw.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let val = val_raw.map(|im| eval_transform(im, &cfg.eval));
    train_on(cfg, opts, &train_raw, &val)
}

/// [`train`] with datasets supplied by the caller; `val` must already carry
/// the evaluation transform.
pub fn train_on<T: Element>(cfg: &TrainConfig, opts: &TrainOptions, train_raw: &Dataset, val: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let mut model = build_model::<T>(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut start = 0;

    if let Some(path) = &opts.resume {
        let ck = Checkpoint::<T>::load(path)?;
        let saved: TrainConfig = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| Error::Format(format!("checkpoint carries no training config: {e}")))?;
        if &saved != cfg {
            return Err(Error::config("resume", "checkpoint was written by a different training config"));
        }
        ck.load_into(&mut model)?;
        opt = AdamW::restore(cfg.optimizer, ck.meta.optimizer_step, &model.params, |n| ck.get(n))?;
        start = ck.meta.epoch;
        best = ck.meta.best_val_acc.zip(ck.meta.best_epoch);
        if let Some(dir) = &opts.out_dir {
            let csv = dir.join("metrics.csv");
            if csv.exists() {
                metrics = read_metrics_csv(&csv)?;
                metrics.truncate(start);
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }

    let initial_eval = if opts.initial_eval { Some(evaluate(&model, val, cfg.batch_size)?) } else { None };
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start..end {
        let t0 = Instant::now();
        let lr = cosine_lr(&schedule, epoch)?;
        let batches = batch_indices(train_raw.len(), cfg.batch_size, Some(derive_seed(cfg.seed, &[epoch as u64])))?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in batches.iter().enumerate() {
            let step_seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let mut aug_rng = ChaCha8Rng::seed_from_u64(step_seed);
            let items: Vec<_> = idx.iter().map(|&i| augment(&train_raw.images[i], &cfg.augment, &mut aug_rng)).collect();
            let (x, labels) = collate::<T>(&items)?;
            let mut ctx = Ctx::new(Mode::Train, true, derive_seed(step_seed, &[1]));
            let xv = ctx.input(x);
            let logits = model.forward(&mut ctx, xv)?;
            let loss = ctx.tape.cross_entropy(logits, &labels)?;
            let loss_v = ctx.tape.value(loss).data()[0];
            let (_, c) = loss_and_correct(ctx.tape.value(logits), &labels)?;
            ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&model.params);
            if !loss_v.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("epoch {} step {step}: {}", epoch + 1, first_non_finite(&model, &grads))));
            }
            opt.step(&mut model.params, &grads, lr)?;
            loss_sum += loss_v.to_f64c() * labels.len() as f64;
            correct += c;
        }
        let v = evaluate(&model, val, cfg.batch_size)?;
        let n = train_raw.len() as f64;
        let rec = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: v.loss,
            val_acc: v.accuracy,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>3}  train {:.4} / {:.3}  val {:.4} / {:.3}  lr {:.2e}  {:.1}s",
            rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.lr, rec.seconds
        );
        let improved = best.is_none_or(|(b, _)| rec.val_acc > b);
        if improved {
            best = Some((rec.val_acc, rec.epoch));
        }
        metrics.push(rec);

        if let Some(dir) = &opts.out_dir {
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                seed: cfg.seed,
                best_val_acc: best.map(|b| b.0),
                best_epoch: best.map(|b| b.1),
                optimizer_step: opt.step,
                extra: serde_json::to_value(cfg)?,
            };
            let ck = Checkpoint::from_model(&model, meta, opt.state_tensors(&model.params));
            ck.save(dir.join("last.ckpt"))?;
            if improved {
                ck.save(dir.join("best.ckpt"))?;
            }
            write_metrics_csv(dir.join("metrics.csv"), &metrics)?;
        }
    }

    let outcome = TrainOutcome {
        steps: opt.step,
        model,
        optimizer: opt,
        metrics,
        initial_eval,
        best_val_acc: best.map(|b| b.0),
        best_epoch: best.map(|b| b.1),
    };
    if let Some(dir) = &opts.out_dir {
        let summary = Summary {
            epochs: outcome.metrics.len(),
            steps: outcome.steps,
            best_val_acc: outcome.best_val_acc,
            best_epoch: outcome.best_epoch,
            initial_eval: outcome.initial_eval,
            final_metrics: outcome.metrics.last(),
            records: &outcome.metrics,
        };
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(outcome)
}

/// One variant's run inside an ablation.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: Variant,
    pub initial: EvalResult,
    pub metrics: Vec<MetricsRecord>,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// Seeds where the filter variant's final accuracy ≥ the dropout variant's.
    pub filter_not_worse: usize,
    pub seeds: usize,
}

impl AblationReport {
    pub fn pair(&self, seed: u64) -> Option<(&AblationRun, &AblationRun)> {
        let find = |v| self.runs.iter().find(|r| r.seed == seed && r.variant == v);
        find(Variant::Filter).zip(find(Variant::Dropout))
    }

    /// `epoch,seed,filter_val_acc,dropout_val_acc` with epoch 0 = before training.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,seed,filter_val_acc,dropout_val_acc\n");
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        for seed in seeds {
            let Some((f, d)) = self.pair(seed) else { continue };
            writeln!(s, "0,{seed},{},{}", f.initial.accuracy, d.initial.accuracy).expect("string write");
            for (a, b) in f.metrics.iter().zip(&d.metrics) {
                writeln!(s, "{},{seed},{},{}", a.epoch, a.val_acc, b.val_acc).expect("string write");
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>10} {:>10}\n", "seed", "variant", "final_acc", "best_acc");
        for r in &self.runs {
            let v = if r.variant == Variant::Filter { "filter" } else { "dropout" };
            writeln!(s, "{:>6} {:>9} {:>10.4} {:>10.4}", r.seed, v, r.final_val_acc, r.best_val_acc).expect("string write");
        }
        writeln!(s, "filter >= dropout (final) in {}/{} seeds", self.filter_not_worse, self.seeds).expect("string write");
        s
    }
}

/// Trains both selection variants per seed from the same initial weights and
/// data order.
pub fn ablate<T: Element>(base: &TrainConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    let (train_raw, val_raw) = base.data.load()?;
    let val = val_raw.map(|im| eval_transform(im, &base.eval));
    let mut runs = Vec::with_capacity(2 * seeds.len());
    let mut filter_not_worse = 0;
    for &seed in seeds {
        let mut finals = [0.0; 2];
        for (vi, variant) in [Variant::Filter, Variant::Dropout].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            let name = if variant == Variant::Filter { "filter" } else { "dropout" };
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("seed{seed}")).join(name)),
                initial_eval: true,
                ..Default::default()
            };
            info!("ablation seed {seed}, {name} variant");
            let out = train_on::<T>(&cfg, &opts, &train_raw, &val)?;
            let final_val_acc = out.metrics.last().map_or(0.0, |m| m.val_acc);
            finals[vi] = final_val_acc;
            runs.push(AblationRun {
                seed,
                variant,
                initial: out.initial_eval.expect("requested"),
                metrics: out.metrics,
                final_val_acc,
                best_val_acc: out.best_val_acc.unwrap_or(0.0),
            });
        }
        filter_not_worse += usize::from(finals[0] >= finals[1]);
    }
    let report = AblationReport { runs, filter_not_worse, seeds: seeds.len() };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("curves.csv"), report.curves_csv())?;
        fs::write(dir.join("summary.txt"), report.table())?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}
