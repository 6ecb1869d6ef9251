//! Training loop, optimizer and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Corpus, Dialogue, LabelMap};
use crate::encoder::UtteranceTokens;
use crate::error::{Error, Result};
use crate::model::{argmax, dropout_mask, Model, OnlinePredictor, TrainConfig};
use crate::segment::{masked_loss, split_dialogue, DialogueWindow};
use crate::tensor::{Tape, Tensor, Var};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::invalid("Adam::update: parameter count changed"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            if g.len() != m.len() || p.numel() != m.len() {
                return Err(Error::shape("Adam::update", format!("{} values", m.len()), format!("{}", g.len())));
            }
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= self.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub label: String,
    pub total: usize,
    pub correct: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassCounts>,
}

impl Metrics {
    pub fn from_predictions(labels: &LabelMap, gold: &[usize], predicted: &[usize]) -> Metrics {
        let mut per_class: Vec<ClassCounts> = labels
            .names()
            .iter()
            .map(|l| ClassCounts {
                label: l.clone(),
                total: 0,
                correct: 0,
                predicted: 0,
            })
            .collect();
        let mut correct = 0;
        for (&g, &p) in gold.iter().zip(predicted) {
            per_class[g].total += 1;
            per_class[p].predicted += 1;
            if g == p {
                per_class[g].correct += 1;
                correct += 1;
            }
        }
        let total = gold.len();
        Metrics {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Mean window loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// A dialogue converted to token ids and label ids.
#[derive(Debug, Clone)]
pub struct PreparedDialogue {
    pub id: String,
    pub tokens: Vec<UtteranceTokens>,
    pub labels: Vec<usize>,
}

pub fn prepare(model: &Model, dialogues: &[Dialogue]) -> Result<Vec<PreparedDialogue>> {
    model.labels.check_covers(dialogues)?;
    dialogues
        .iter()
        .map(|d| {
            Ok(PreparedDialogue {
                id: d.id.clone(),
                tokens: d.utterances.iter().map(|u| model.tokens(&u.text)).collect::<Result<_>>()?,
                labels: d.utterances.iter().map(|u| model.labels.id(&u.act).expect("covered")).collect(),
            })
        })
        .collect()
}

/// Fresh model whose vocabulary and label map come from the training split.
pub fn model_for_corpus(corpus: &Corpus, config: TrainConfig) -> Result<Model> {
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let vocab = build_vocab(corpus, config.vocab_size)?;
    let labels = LabelMap::from_corpus(corpus)?;
    labels.check_covers(&corpus.valid)?;
    labels.check_covers(&corpus.test)?;
    Model::init(config, vocab, labels)
}

/// Builds a model from the corpus and fits it.
pub fn train(corpus: &Corpus, config: TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = model_for_corpus(corpus, config)?;
    let report = fit(&mut model, corpus, |_| {})?;
    Ok((model, report))
}

struct WindowRef {
    dialogue: usize,
    window: DialogueWindow,
}

/// Windows grouped by length, in length order.
fn length_buckets(data: &[PreparedDialogue], config: &TrainConfig) -> Result<Vec<Vec<WindowRef>>> {
    let mut buckets: BTreeMap<usize, Vec<WindowRef>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        for window in split_dialogue(&d.id, d.tokens.len(), config.window, config.padding)? {
            buckets.entry(window.len()).or_default().push(WindowRef { dialogue: i, window });
        }
    }
    Ok(buckets.into_values().collect())
}

/// Returns the mean window loss and per-parameter gradients of one batch.
fn batch_step(
    model: &Model,
    data: &[PreparedDialogue],
    batch: &[&WindowRef],
    rng: &mut ChaCha8Rng,
    correct: &mut usize,
    seen: &mut usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let len = batch[0].window.len();
    let utterances: Vec<UtteranceTokens> = batch
        .iter()
        .flat_map(|w| w.window.indices.clone().map(|i| data[w.dialogue].tokens[i].clone()))
        .collect();
    let mut s_all = model.encode(&mut tape, &bound, &utterances)?;
    if cfg.dropout > 0.0 {
        let mask = dropout_mask(utterances.len(), cfg.hidden_dim, cfg.dropout, rng);
        let mask = tape.constant(&[utterances.len(), cfg.hidden_dim], mask)?;
        s_all = tape.mul(s_all, mask)?;
    }
    let mut losses: Vec<Var> = Vec::with_capacity(batch.len());
    for (b, w) in batch.iter().enumerate() {
        let s = tape.slice_rows(s_all, b * len..(b + 1) * len)?;
        let out = model.forward_encoded(&mut tape, &bound, s)?;
        let labels: Vec<usize> = w.window.indices.clone().map(|i| data[w.dialogue].labels[i]).collect();
        let loss = masked_loss(&mut tape, out.logits, &labels, &w.window.mask, cfg.loss_divisor())?;
        let logits = tape.tensor(out.logits);
        for t in w.window.masked_positions() {
            *seen += 1;
            if argmax(logits.row(t)) == labels[t] {
                *correct += 1;
            }
        }
        losses.push(loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    let vars = bound.vars();
    let params = model.named_params();
    let out = vars
        .iter()
        .zip(&params)
        .map(|(v, (_, p))| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    Ok((value, out))
}

/// Trains `model` in place on the training split, keeping the parameters of
/// the epoch with the best validation accuracy (the last epoch when there is
/// no validation split). `on_epoch` sees each epoch's metrics as they land.
pub fn fit<F: FnMut(&EpochMetrics)>(model: &mut Model, corpus: &Corpus, mut on_epoch: F) -> Result<TrainReport> {
    model.config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let train = prepare(model, &corpus.train)?;
    let valid = prepare(model, &corpus.valid)?;
    let buckets = length_buckets(&train, &model.config)?;
    let shapes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(model.config.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_0f_ba7c);

    let mut report = TrainReport {
        epochs: Vec::new(),
        batch_losses: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, Model)> = None;

    for epoch in 1..=model.config.epochs {
        let mut batches: Vec<Vec<&WindowRef>> = Vec::new();
        for bucket in &buckets {
            let mut order: Vec<&WindowRef> = bucket.iter().collect();
            order.shuffle(&mut rng);
            batches.extend(order.chunks(model.config.batch_size).map(<[_]>::to_vec));
        }
        batches.shuffle(&mut rng);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: bi + 1,
                detail,
            };
            let (loss, mut grads) = match batch_step(model, &train, batch, &mut rng, &mut correct, &mut seen) {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            let norm = clip_grad_norm(&mut grads, model.config.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm is {norm}")));
            }
            let mut params: Vec<&mut Tensor> = model.named_params_mut().into_iter().map(|(_, t)| t).collect();
            adam.update(&mut params, &grads)?;
            loss_sum += loss;
            report.batch_losses.push(loss);
        }

        let valid_accuracy = if valid.is_empty() {
            None
        } else {
            let setting = if model.config.online { Setting::Online } else { Setting::Offline };
            Some(evaluate_prepared(model, &valid, setting)?.accuracy)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            valid_accuracy,
        };
        on_epoch(&metrics);
        let score = valid_accuracy.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score > *b || valid_accuracy.is_none()) {
            best = Some((score, model.clone()));
            report.best_epoch = epoch;
        }
        report.epochs.push(metrics);
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(report)
}

/// Predicted label ids for every utterance of a dialogue.
fn predict_dialogue(model: &Model, d: &PreparedDialogue, setting: Setting) -> Result<Vec<usize>> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let s = model.encode(&mut tape, &bound, &d.tokens)?;
    let encoded = tape.tensor(s);
    match setting {
        Setting::Offline => {
            let mut out = vec![0; d.tokens.len()];
            for w in split_dialogue(&d.id, d.tokens.len(), cfg.window, cfg.padding)? {
                let logits = model.logits_from_encoded(&encoded, w.indices.clone())?;
                for t in w.masked_positions() {
                    out[w.indices.start + t] = argmax(logits.row(t));
                }
            }
            Ok(out)
        }
        Setting::Online => {
            let mut online = OnlinePredictor::new(model);
            (0..encoded.rows()).map(|r| online.push_encoded(encoded.row(r))).collect()
        }
    }
}

/// Predictions for each dialogue, in input order.
pub fn predict(model: &Model, dialogues: &[Dialogue], setting: Setting) -> Result<Vec<Vec<usize>>> {
    let data = prepare(model, dialogues)?;
    data.par_iter().map(|d| predict_dialogue(model, d, setting)).collect()
}

fn evaluate_prepared(model: &Model, data: &[PreparedDialogue], setting: Setting) -> Result<Metrics> {
    let predicted: Vec<Vec<usize>> = data.par_iter().map(|d| predict_dialogue(model, d, setting)).collect::<Result<_>>()?;
    let gold: Vec<usize> = data.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let predicted: Vec<usize> = predicted.into_iter().flatten().collect();
    Ok(Metrics::from_predictions(&model.labels, &gold, &predicted))
}

/// Accuracy over every utterance of `dialogues`. Offline predicts each
/// window's core from its padded context; online predicts each utterance
/// from itself and preceding context only.
pub fn evaluate(model: &Model, dialogues: &[Dialogue], setting: Setting) -> Result<Metrics> {
    let data = prepare(model, dialogues)?;
    evaluate_prepared(model, &data, setting)
}
