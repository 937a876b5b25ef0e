use std::fmt::Write as _;

use super::checkpoint::Checkpoint;
use super::config::{best_checkpoint_path, TrainConfig};
use super::data::{mask_tensor, preprocess, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::image::pgm::write_atomic;
use crate::image::BinaryImage;
use crate::loss::{adaptive_threshold, total_loss, F1Aggregation, ProbMap};
use crate::model::{Mode, Model, Param};
use crate::tensor::{clip_grad_norm, cosine_lr, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    /// Optimizer updates applied before this evaluation.
    pub step: usize,
    pub threshold: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Event<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// CSV with one `train` row per logged step and one `eval` row per evaluation.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("kind,step,lr,loss,threshold,f1\n");
        let mut evals = self.evals.iter().peekable();
        for r in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step <= r.step) {
                let _ = writeln!(s, "eval,{},,,{},{}", e.step, e.threshold, e.f1);
            }
            let _ = writeln!(s, "train,{},{},{},,", r.step, r.lr, r.loss);
        }
        for e in evals {
            let _ = writeln!(s, "eval,{},,,{},{}", e.step, e.threshold, e.f1);
        }
        s
    }
}

/// Network inputs and targets prepared once per run.
struct Prepared {
    ids: Vec<String>,
    inputs: Vec<Tensor<f32>>,
    targets: Vec<Tensor<f32>>,
    skeletons: Vec<BinaryImage>,
}

impl Prepared {
    fn new(cfg: &TrainConfig, ds: &Dataset) -> Self {
        Self {
            ids: ds.ids(),
            inputs: ds.samples.iter().map(|s| preprocess(cfg.input_mode, &s.shape)).collect(),
            targets: ds.samples.iter().map(|s| mask_tensor(&s.skeleton)).collect(),
            skeletons: ds.samples.iter().map(|s| s.skeleton.clone()).collect(),
        }
    }
}

/// Logistic sigmoid kept strictly inside (0, 1) for any finite logit, so a
/// threshold of 1.0 never selects a pixel.
fn sigmoid(x: f64) -> f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    (1.0 / (1.0 + (-x).exp())).min(BELOW_ONE)
}

/// Eval-mode sigmoid probabilities for one `[1, C, H, W]` input.
pub fn predict_probs(model: &Model<f32>, input: &Tensor<f32>) -> Result<ProbMap> {
    let [b, _, h, w] = input.dims4("predict")?;
    if b != 1 {
        return Err(Error::shape("predict", "axis 0 (batch)", format!("expected 1 image, got {b}")));
    }
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let pass = model.forward(&mut g, x, Mode::Eval)?;
    let values = g.value(pass.main).data().iter().map(|&v| sigmoid(v as f64)).collect();
    ProbMap::new(w, h, values)
}

/// Adaptive-threshold F1 of `model` over a prepared set.
fn evaluate(model: &Model<f32>, set: &Prepared, agg: F1Aggregation) -> Result<(f64, f64)> {
    let probs = set
        .inputs
        .iter()
        .map(|x| predict_probs(model, x))
        .collect::<Result<Vec<_>>>()?;
    adaptive_threshold(&probs, &set.skeletons, agg)
}

pub struct Trainer {
    config: TrainConfig,
    checkpoint: Checkpoint,
    train: Prepared,
    eval: Prepared,
    sampler: BatchSampler,
}

impl Trainer {
    /// Trains on `train`, evaluating on `eval`. The caller chooses the sets;
    /// [`train_from_config`] builds them with the configured split.
    pub fn new(config: TrainConfig, train: &Dataset, eval: &Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Invalid(format!(
                "need non-empty train and evaluation sets, got {} and {}",
                train.len(),
                eval.len()
            )));
        }
        let checkpoint = Checkpoint::fresh(config.clone())?;
        let train = Prepared::new(&config, train);
        let eval = Prepared::new(&config, eval);
        for x in train.inputs.iter().chain(&eval.inputs) {
            checkpoint.model.check_input(x.shape())?;
        }
        let sampler = BatchSampler::new(train.inputs.len(), config.model.seed);
        Ok(Self {
            config,
            checkpoint,
            train,
            eval,
            sampler,
        })
    }

    /// Runs `total_steps` updates at `lr(0) .. lr(total_steps - 1)`, then logs one
    /// forward-only row at `total_steps` (where the schedule reaches `lr_min`).
    pub fn run(mut self, observer: &mut dyn FnMut(Event<'_>)) -> Result<TrainOutcome> {
        let cfg = self.config.clone();
        let sched = cfg.schedule();
        let mut steps = Vec::with_capacity(cfg.total_steps + 1);
        let mut evals = Vec::new();
        let mut best: Option<EvalRecord> = None;
        let mut stopped_early = false;
        let best_path = cfg.checkpoint.as_deref().map(best_checkpoint_path);

        for t in 0..=cfg.total_steps {
            let lr = cosine_lr(&sched, t)?;
            let batch = self.sampler.next_batch(cfg.batch_size);
            let x = Tensor::stack_batch(&batch.iter().map(|&i| self.train.inputs[i].clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack_batch(&batch.iter().map(|&i| self.train.targets[i].clone()).collect::<Vec<_>>())?;
            let model = &mut self.checkpoint.model;
            let mut g = Graph::new();
            let xi = g.input(x);
            let pass = model.forward(&mut g, xi, Mode::Train)?;
            let loss = total_loss(&mut g, pass.main, &pass.aux, &y, &cfg.loss)?;
            let value = g.value(loss.total).item() as f64;
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| self.train.ids[i].as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    step: t,
                    ids: ids.join(","),
                });
            }
            let rec = StepRecord { step: t, lr, loss: value };
            observer(Event::Step(&rec));
            steps.push(rec);
            if t == cfg.total_steps {
                break;
            }

            g.backward(loss.total)?;
            model.zero_grad();
            model.accumulate_grads(&g, &pass);
            model.update_running_stats(&pass);
            drop(g);
            if let Some(c) = cfg.grad_clip {
                let mut grads: Vec<&mut Tensor<f32>> = model.params.params.iter_mut().map(|p| &mut p.grad).collect();
                clip_grad_norm(&mut grads, c);
            }
            let (mut values, grads): (Vec<&mut Tensor<f32>>, Vec<&Tensor<f32>>) = model
                .params
                .params
                .iter_mut()
                .map(|Param { value, grad, .. }| (value, &*grad))
                .unzip();
            self.checkpoint.optimizer.step(&mut values, &grads, lr)?;
            self.checkpoint.step = self.checkpoint.optimizer.steps;

            let done = t + 1;
            if done % cfg.eval_interval == 0 || done == cfg.total_steps {
                let (threshold, f1) = evaluate(&self.checkpoint.model, &self.eval, cfg.f1_aggregation)?;
                let rec = EvalRecord { step: done, threshold, f1 };
                observer(Event::Eval(&rec));
                evals.push(rec);
                self.checkpoint.threshold = Some(threshold);
                if best.is_none_or(|b| f1 > b.f1) {
                    best = Some(rec);
                    if let Some(p) = &best_path {
                        self.checkpoint.save(p)?;
                    }
                }
                if cfg.stop_at_f1.is_some_and(|s| f1 >= s) {
                    stopped_early = true;
                    break;
                }
            }
        }

        if let Some(p) = &cfg.checkpoint {
            self.checkpoint.save(p)?;
        }
        let outcome = TrainOutcome {
            checkpoint: self.checkpoint,
            steps,
            evals,
            best,
            stopped_early,
        };
        if let Some(p) = &cfg.log_path {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_atomic(p, outcome.log_csv().as_bytes())?;
        }
        Ok(outcome)
    }
}

/// Loads the configured data, splits it and trains.
pub fn train_from_config(config: &TrainConfig, observer: &mut dyn FnMut(Event<'_>)) -> Result<TrainOutcome> {
    config.validate()?;
    let data = Dataset::load(&config.shapes_dir, &config.skeletons_dir)?;
    let (train, eval) = data.split(config.split_ratio, config.split_seed)?;
    Trainer::new(config.clone(), &train, &eval)?.run(observer)
}
