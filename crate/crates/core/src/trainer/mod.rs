//! Training loop, evaluation, mask-ratio sweeps and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod sweep;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use metrics::{confusions, macro_average, predict_concepts, psnr, BinaryScores, Confusion, PSNR_CAP};
pub use sweep::{mask_ratio_sweep, write_sweep_csv, SweepRow, SWEEP_HEADER};

use crate::data::{prototype_ids, ConceptBank, Dataset};
use crate::error::{Error, Result};
use crate::losses::{objective, LossValues, LossWeights, Objective, SingleHotMask};
use crate::model::config::parse_switch;
use crate::model::{MaskPlan, MaskShape, Mcm, ModelConfig};
use crate::nn::{AdamWConfig, AdamWState};
use crate::tensor::{Real, Tensor};

pub const LOG_HEADER: &str = "step,l_re,l_dis,l_concept,total,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub mask_shape: MaskShape,
    pub weights: LossWeights,
    /// Replace the inverse-frequency weights by their batch mean.
    pub uniform_weights: bool,
    pub optim: AdamWConfig,
    pub init_seed: u64,
    pub data_seed: u64,
    pub mask_seed: u64,
    /// Steps between progress reports; 0 disables them.
    pub eval_interval: usize,
    /// Evaluation mask ratio; the training ratio when unset.
    pub test_mask_ratio: Option<f64>,
}

impl TrainConfig {
    /// Batch 32, 250 epochs, lr 1e-3, weight decay 0.01. The concept weight
    /// scale is half the batch, so a concept present in half the batch gets
    /// weight 1.
    pub fn tiny() -> Self {
        Self {
            epochs: 250,
            steps: None,
            batch_size: 32,
            mask_ratio: 0.25,
            mask_shape: MaskShape::Random,
            weights: LossWeights {
                scale: 16.0,
                ..LossWeights::default()
            },
            uniform_weights: false,
            optim: AdamWConfig::default(),
            init_seed: 0,
            data_seed: 1,
            mask_seed: 2,
            eval_interval: 0,
            test_mask_ratio: None,
        }
    }

    /// Batch 1024, 500 epochs, lr 1e-3, weight decay 0.01.
    pub fn small() -> Self {
        let tiny = Self::tiny();
        Self {
            epochs: 500,
            batch_size: 1024,
            weights: LossWeights {
                scale: 512.0,
                ..tiny.weights
            },
            ..tiny
        }
    }

    pub fn test_ratio(&self) -> f64 {
        self.test_mask_ratio.unwrap_or(self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, r) in [
            ("mask_ratio", Some(self.mask_ratio)),
            ("test_mask_ratio", self.test_mask_ratio),
        ] {
            if let Some(r) = r {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
                }
            }
        }
        let o = &self.optim;
        if !(o.lr > 0.0
            && o.weight_decay >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.weights.validate()
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        let o = &self.optim;
        let switch = |b: bool| if b { "on" } else { "off" }.to_string();
        vec![
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.map_or("auto".into(), |s| s.to_string())),
            ("batch_size", self.batch_size.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("mask_shape", self.mask_shape.as_str().to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("weight_scale", w.scale.to_string()),
            ("eps_freq", w.eps_freq.to_string()),
            ("uniform_weights", switch(self.uniform_weights)),
            ("lr", o.lr.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("mask_seed", self.mask_seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            (
                "test_mask_ratio",
                self.test_mask_ratio.map_or("train".into(), |r| r.to_string()),
            ),
        ]
    }

    /// Overrides fields from `key=value` pairs; unknown keys are left for the
    /// caller. Returns the keys consumed.
    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<Vec<String>> {
        let mut used = Vec::new();
        for (k, v) in pairs {
            let bad = || Error::Config(format!("invalid value {v:?} for {k}"));
            let f = || v.parse::<f64>().map_err(|_| bad());
            let u = || v.parse::<u64>().map_err(|_| bad());
            match k.as_str() {
                "epochs" => self.epochs = u()? as usize,
                "steps" => self.steps = if v == "auto" { None } else { Some(u()? as usize) },
                "batch_size" => self.batch_size = u()? as usize,
                "mask_ratio" => self.mask_ratio = f()?,
                "mask_shape" => self.mask_shape = MaskShape::parse(v)?,
                "alpha" => self.weights.alpha = f()?,
                "beta" => self.weights.beta = f()?,
                "weight_scale" => self.weights.scale = f()?,
                "eps_freq" => self.weights.eps_freq = f()?,
                "uniform_weights" => self.uniform_weights = parse_switch(v)?,
                "lr" => self.optim.lr = f()?,
                "weight_decay" => self.optim.weight_decay = f()?,
                "beta1" => self.optim.beta1 = f()?,
                "beta2" => self.optim.beta2 = f()?,
                "adam_eps" => self.optim.eps = f()?,
                "init_seed" => self.init_seed = u()?,
                "data_seed" => self.data_seed = u()?,
                "mask_seed" => self.mask_seed = u()?,
                "eval_interval" => self.eval_interval = u()? as usize,
                "test_mask_ratio" => self.test_mask_ratio = if v == "train" { None } else { Some(f()?) },
                _ => continue,
            }
            used.push(k.clone());
        }
        Ok(used)
    }
}

/// `key=value` lines.
pub fn pairs_text(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

/// Parses `key=value` lines, ignoring blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {} repeated", n + 1, k.trim())));
        }
    }
    Ok(out)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    /// 1-based optimizer step.
    pub step: u64,
    pub losses: LossValues,
    pub wall_ms: f64,
}

pub fn write_log(mut w: impl Write, records: &[LogRecord], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for r in records {
        let l = &r.losses;
        writeln!(
            w,
            "{},{},{},{},{},{:.3}",
            r.step, l.re, l.dis, l.concept, l.total, r.wall_ms
        )?;
    }
    Ok(())
}

/// Patches and prototype ids of a whole dataset, ready for batching.
pub struct Prepared<T> {
    pub n: usize,
    patches: Vec<T>,
    ids: Vec<usize>,
    attributes: Vec<Vec<bool>>,
    per_record: usize,
    dims: [usize; 2],
}

impl<T: Real> Prepared<T> {
    pub fn new(model: &Mcm<T>, data: &Dataset, bank: &ConceptBank) -> Result<Self> {
        data.check_bank(bank)?;
        model.check_bank(bank)?;
        if data.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        let cfg = model.cfg();
        let dims = [cfg.num_patches(), cfg.patch_dim()];
        let mut patches = Vec::with_capacity(data.len() * dims[0] * dims[1]);
        let mut ids = Vec::with_capacity(data.len() * cfg.concepts);
        for r in &data.records {
            let img = r.image.cast::<T>();
            patches.extend(model.patches(&[&img])?.into_data());
            ids.extend(prototype_ids(&r.attributes));
        }
        Ok(Self {
            n: data.len(),
            patches,
            ids,
            attributes: data.records.iter().map(|r| r.attributes.clone()).collect(),
            per_record: dims[0] * dims[1],
            dims,
        })
    }

    /// `[b, N, D]` patches and flattened prototype ids of `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let m = self.ids.len() / self.n;
        let mut x = Vec::with_capacity(indices.len() * self.per_record);
        let mut ids = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            x.extend_from_slice(&self.patches[i * self.per_record..(i + 1) * self.per_record]);
            ids.extend_from_slice(&self.ids[i * m..(i + 1) * m]);
        }
        let t = Tensor::new([indices.len(), self.dims[0], self.dims[1]], x).expect("batch shape");
        (t, ids)
    }

    pub fn attributes(&self, i: usize) -> &[bool] {
        &self.attributes[i]
    }
}

pub struct Trainer<T> {
    pub model: Mcm<T>,
    pub optim: AdamWState<T>,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Mcm::new(model_cfg, cfg.init_seed)?;
        let optim = AdamWState::new(&model.params, cfg.optim);
        Ok(Self {
            model,
            optim,
            cfg,
            step: 0,
            epoch_order: None,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        match self.cfg.steps {
            Some(s) => s as u64,
            None => self.cfg.epochs as u64 * self.steps_per_epoch(n),
        }
    }

    /// Dataset indices of the batch used at 0-based `step`.
    pub fn batch_indices(&mut self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, k) = (step / spe, (step % spe) as usize);
        if self
            .epoch_order
            .as_ref()
            .is_none_or(|(e, o)| *e != epoch || o.len() != n)
        {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.cfg.data_seed, epoch));
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().expect("epoch order").1;
        let b = self.cfg.batch_size;
        order[k * b..((k + 1) * b).min(n)].to_vec()
    }

    /// Mask plan and swap position of 0-based `step`.
    pub fn step_plan(&self, step: u64) -> Result<(MaskPlan, SingleHotMask)> {
        let mut rng = stream_rng(self.cfg.mask_seed, step);
        let seed = rng.next_u64();
        let u = SingleHotMask::sample(self.model.cfg().concepts, &mut rng);
        let plan = MaskPlan::new(self.model.cfg().grid(), self.cfg.mask_ratio, seed, self.cfg.mask_shape)?;
        Ok((plan, u))
    }

    /// Forward, backward and one AdamW update.
    pub fn train_step(&mut self, data: &Prepared<T>, bank: &ConceptBank) -> Result<LogRecord> {
        let start = Instant::now();
        let step = self.step;
        let indices = self.batch_indices(data.n, step);
        let (x, ids) = data.batch(&indices);
        let (plan, u) = self.step_plan(step)?;
        let obj = Objective {
            plan: &plan,
            prototype_ids: &ids,
            u,
            weights: self.cfg.weights,
            uniform_weights: self.cfg.uniform_weights,
        };
        let (bound, grads, losses) = {
            let mut pass = self.model.pass(bank)?;
            let input = pass.tape.constant(x);
            let (total, losses, _) = objective(&mut pass, input, &obj).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", step + 1)),
                other => other,
            })?;
            let grads = pass.tape.backward(total)?;
            (pass.p, grads, losses)
        };
        let params = &mut self.model.params;
        params.zero_grads();
        params.accumulate_grads(&bound, &grads);
        self.optim.step(params)?;
        params.zero_grads();
        self.step += 1;
        Ok(LogRecord {
            step: self.step,
            losses,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until the configured step count, or for at most `limit` more
    /// steps.
    pub fn run(&mut self, data: &Prepared<T>, bank: &ConceptBank, limit: Option<u64>) -> Result<Vec<LogRecord>> {
        let end = self.total_steps(data.n);
        let end = limit.map_or(end, |l| end.min(self.step + l));
        let mut log = Vec::new();
        while self.step < end {
            log.push(self.train_step(data, bank)?);
        }
        Ok(log)
    }

    /// Prepares `data` and trains to completion.
    pub fn train(&mut self, data: &Dataset, bank: &ConceptBank) -> Result<Vec<LogRecord>> {
        let prepared = Prepared::new(&self.model, data, bank)?;
        self.run(&prepared, bank, None)
    }

    pub fn evaluate(&self, data: &Dataset, bank: &ConceptBank, test_r: f64, seed: u64) -> Result<MetricsReport> {
        evaluate(
            &self.model,
            data,
            bank,
            &EvalOptions {
                test_ratio: test_r,
                seed,
                shape: self.cfg.mask_shape,
                batch_size: self.cfg.batch_size,
                weights: self.cfg.weights,
            },
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub test_ratio: f64,
    pub seed: u64,
    pub shape: MaskShape,
    pub batch_size: usize,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_concept: Vec<BinaryScores>,
    pub masked_mse: f64,
    pub masked_psnr: f64,
    /// Loss components averaged over samples.
    pub losses: LossValues,
    pub samples: usize,
    pub wall_seconds: f64,
}

impl MetricsReport {
    pub fn to_text(&self, concepts: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples      {}", self.samples);
        let _ = writeln!(s, "accuracy     {:.4}", self.accuracy);
        let _ = writeln!(s, "precision    {:.4}", self.precision);
        let _ = writeln!(s, "recall       {:.4}", self.recall);
        let _ = writeln!(s, "f1           {:.4}", self.f1);
        let _ = writeln!(s, "masked_mse   {:.6}", self.masked_mse);
        let _ = writeln!(s, "masked_psnr  {:.3}", self.masked_psnr);
        let l = &self.losses;
        let _ = writeln!(
            s,
            "l_re {:.6}  l_dis {:.6}  l_concept {:.6}  total {:.6}",
            l.re, l.dis, l.concept, l.total
        );
        for (name, c) in concepts.iter().zip(&self.per_concept) {
            let _ = writeln!(
                s,
                "  {name:<24} acc {:.4}  prec {:.4}  rec {:.4}  f1 {:.4}",
                c.accuracy, c.precision, c.recall, c.f1
            );
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "accuracy,precision,recall,f1,masked_mse,masked_psnr,l_re,l_dis,l_concept,total"
    }

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.masked_mse,
            self.masked_psnr,
            l.re,
            l.dis,
            l.concept,
            l.total
        )
    }
}

/// Concept metrics, masked reconstruction error and losses over `data` in
/// order. Batch `k` is masked with a plan seeded by `(seed, k)`. With nothing
/// masked the masked-region error is 0 and the PSNR sits at [`PSNR_CAP`].
pub fn evaluate<T: Real>(
    model: &Mcm<T>,
    data: &Dataset,
    bank: &ConceptBank,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let prepared = Prepared::new(model, data, bank)?;
    let mut predicted = Vec::with_capacity(data.len());
    let (mut sq_err, mut count) = (0.0f64, 0usize);
    let mut sums = LossValues::default();
    let bs = opts.batch_size.max(1);
    let indices: Vec<usize> = (0..data.len()).collect();
    for (k, chunk) in indices.chunks(bs).enumerate() {
        let mut rng = stream_rng(opts.seed, k as u64);
        let plan = MaskPlan::new(model.cfg().grid(), opts.test_ratio, rng.next_u64(), opts.shape)?;
        let u = SingleHotMask::sample(model.cfg().concepts, &mut rng);
        let (x, ids) = prepared.batch(chunk);
        let mut pass = model.pass(bank)?;
        let input = pass.tape.constant(x.clone());
        let obj = Objective {
            plan: &plan,
            prototype_ids: &ids,
            u,
            weights: opts.weights,
            uniform_weights: false,
        };
        let (_, losses, out) = objective(&mut pass, input, &obj)?;
        let w = chunk.len() as f64;
        sums.re += losses.re * w;
        sums.dis += losses.dis * w;
        sums.concept += losses.concept * w;
        sums.total += losses.total * w;
        let concepts = pass.tape.value(out.concepts);
        predicted.extend(predict_concepts(concepts, pass.tape.value(pass.bank))?);
        let recon = pass.tape.value(out.recon);
        let (n, d) = (plan.n(), model.cfg().patch_dim());
        let rows = plan.masked();
        for i in 0..chunk.len() {
            for &r in rows {
                let at = (i * n + r) * d;
                for (a, b) in recon.data()[at..at + d].iter().zip(&x.data()[at..at + d]) {
                    let e = a.as_f64() - b.as_f64();
                    sq_err += e * e;
                }
            }
            count += rows.len() * d;
        }
    }
    let actual: Vec<Vec<bool>> = (0..data.len()).map(|i| prepared.attributes(i).to_vec()).collect();
    let per_concept: Vec<BinaryScores> = confusions(&predicted, &actual)?.iter().map(Confusion::scores).collect();
    let avg = macro_average(&per_concept);
    let masked_mse = sq_err / count.max(1) as f64;
    let n = data.len() as f64;
    Ok(MetricsReport {
        accuracy: avg.accuracy,
        precision: avg.precision,
        recall: avg.recall,
        f1: avg.f1,
        per_concept,
        masked_mse,
        masked_psnr: psnr(masked_mse),
        losses: LossValues {
            re: sums.re / n,
            dis: sums.dis / n,
            concept: sums.concept / n,
            total: sums.total / n,
        },
        samples: data.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
