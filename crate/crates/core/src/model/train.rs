use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::data::{Dataset, Sample};
use super::layers::{classifier_forward, traced_classifier};
use super::params::ParamStore;
use super::ModelConfig;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds parameter init and minibatch sampling.
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One optimizer step; loss and accuracy are measured on the minibatch
/// before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Completed steps.
    pub step: usize,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(params: ParamStore, rng: Rng) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(&params),
            v: zeros(&params),
            params,
            step: 0,
            rng,
        }
    }

    fn adam_update(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            *m = m
                .zip_map(g, "adam", |m, g| BETA1 * m + (1.0 - BETA1) * g)
                .expect("same shape");
            *v = v
                .zip_map(g, "adam", |v, g| BETA2 * v + (1.0 - BETA2) * g * g)
                .expect("same shape");
            let step = m
                .zip_map(v, "adam", |m, v| {
                    lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS)
                })
                .expect("same shape");
            *p = p.sub(&step).expect("same shape");
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<StepRecord>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }
}

fn argmax(v: &Tensor) -> usize {
    v.data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

/// Mean cross-entropy of a minibatch and the gradient of every parameter.
fn batch_gradients(
    cfg: &ModelConfig,
    params: &ParamStore,
    batch: &[&Sample],
) -> Result<(f64, f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut total: Option<Var> = None;
    let mut correct = 0usize;
    for s in batch {
        let t = tape.leaf(s.tokens.clone());
        let logits = traced_classifier(&mut tape, t, cfg, &bound)?.logits;
        if argmax(tape.value(logits)) == s.label {
            correct += 1;
        }
        let loss = tape.cross_entropy(logits, s.label)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty minibatch".into()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss = tape.value(mean).item();
    let grads = tape.backward(mean)?;
    let named = bound
        .iter()
        .map(|(n, v)| (n.to_string(), grads.wrt(&tape, v)))
        .collect();
    Ok((loss, correct as f64 / batch.len() as f64, named))
}

/// [`train_toy_with`] using batch size 32 and seed 0.
pub fn train_toy(cfg: &ModelConfig, data: &Dataset, steps: usize, lr: f64) -> Result<TrainOutcome> {
    train_toy_with(cfg, data, &TrainOptions::new(steps, lr))
}

/// Adam on minibatch cross-entropy from a fresh initialization.
pub fn train_toy_with(
    cfg: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::Config(format!("invalid learning rate {}", opts.lr)));
    }
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let root = Rng::new(opts.seed);
    let params = ParamStore::init(cfg, &mut root.fork(0))?;
    let mut state = TrainState::new(params, root.fork(1));
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<&Sample> = (0..opts.batch_size)
            .map(|_| &data.samples[state.rng.below(data.len())])
            .collect();
        let (loss, accuracy, grads) = batch_gradients(cfg, &state.params, &batch)?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(StepRecord {
            step,
            loss,
            accuracy,
        });
        state.adam_update(&grads, opts.lr);
    }
    Ok(TrainOutcome { trace, state })
}

/// Fraction of `data` classified correctly.
pub fn evaluate(cfg: &ModelConfig, params: &ParamStore, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut cost = Cost::new();
    let mut correct = 0usize;
    for s in &data.samples {
        if argmax(&classifier_forward(&s.tokens, cfg, params, &mut cost)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Central-difference check of the cross-entropy gradient of every
/// parameter for one sample, in parameter-name order.
pub fn parameter_grad_check(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &Sample,
    h: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    params
        .iter()
        .map(|(name, value)| {
            let report = grad_check(
                |tape, x| {
                    let bound = params.bind_with(tape, Some((name, x)));
                    let t = tape.leaf(sample.tokens.clone());
                    let logits = traced_classifier(tape, t, cfg, &bound)?.logits;
                    tape.cross_entropy(logits, sample.label)
                },
                value,
                h,
            )?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Writes `step,loss,accuracy` rows.
pub fn write_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,loss,accuracy\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.accuracy));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
