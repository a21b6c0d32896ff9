//! Training loop, evaluation and experiment drivers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{iou, mean_average_precision, RetrievalEntry, RetrievalIndex, RetrievalReport};
use crate::model::{stream_rng, CapsuleChoice, Model, PreparedCloud, SampleGradients, STREAM_SHUFFLE};
use crate::nn::{update_running_stats, ParamGrads};
use crate::optim::{cosine_lr, Adam};
use crate::par::{map_indexed, Execution};

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub label: usize,
    pub prepared: PreparedCloud,
}

/// Groups every cloud once; the clouds must already be normalized and
/// resampled to the model's input size.
pub fn prepare_samples(model: &Model, data: &Dataset, exec: Execution) -> Result<Vec<TrainSample>> {
    let want = model.config.input_points;
    if let Some(s) = data.samples.iter().find(|s| s.cloud.len() != want) {
        return Err(Error::InvalidArgument(format!("sample {} has {} points, model expects {want}", s.id, s.cloud.len())));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= model.config.num_classes) {
        return Err(Error::InvalidArgument(format!("sample {} has label {} for {} classes", s.id, s.label, model.config.num_classes)));
    }
    map_indexed(exec, data.len(), |i| {
        let s = &data.samples[i];
        Ok(TrainSample { id: s.id.clone(), label: s.label, prepared: model.prepare(&s.cloud)? })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub reconstruction: Option<f64>,
    pub segmentation: Option<f64>,
    pub train_accuracy: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optim: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(model: Model, exec: Execution) -> Self {
        let optim = Adam::new(&model.config.optimizer, &model.params);
        Self { model, optim, epoch: 0, step: 0, exec }
    }

    pub fn resume(ckpt: &Checkpoint, exec: Execution) -> Result<Self> {
        let model = ckpt.to_model()?;
        let optim = match &ckpt.optimizer {
            Some(o) => o.clone(),
            None => Adam::new(&model.config.optimizer, &model.params),
        };
        Ok(Self { model, optim, epoch: ckpt.epoch as usize, step: ckpt.step as usize, exec })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.epoch as u64, self.step as u64, Some(&self.optim))
    }

    /// Visit order of this trainer's next epoch; depends only on seed and epoch.
    pub fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.model.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_SHUFFLE);
        order.shuffle(&mut rng);
        order
    }

    fn learning_rate(&self, steps_per_epoch: usize) -> f64 {
        let o = &self.model.config.optimizer;
        if o.cosine_decay {
            cosine_lr(o.learning_rate, self.step, o.epochs * steps_per_epoch)
        } else {
            o.learning_rate
        }
    }

    /// Per-sample gradients of one batch, in batch order.
    pub fn batch_gradients(&self, data: &[TrainSample], batch: &[usize]) -> Result<Vec<SampleGradients>> {
        let model = &self.model;
        map_indexed(self.exec, batch.len(), |k| {
            let s = &data[batch[k]];
            model.sample_gradients(&s.prepared, s.label)
        })
        .into_iter()
        .collect()
    }

    pub fn train_epoch(&mut self, data: &[TrainSample]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let start = Instant::now();
        let bs = self.model.config.optimizer.batch_size;
        let steps_per_epoch = data.len().div_ceil(bs);
        let order = self.epoch_order(data.len());
        let (mut loss, mut margin, mut rec, mut seg, mut correct) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let (mut has_rec, mut has_seg) = (false, false);
        let mut lr = self.learning_rate(steps_per_epoch);
        for batch in order.chunks(bs) {
            let results = self.batch_gradients(data, batch)?;
            let mut grads = ParamGrads::zeros(self.model.params.len());
            let mut stats = Vec::new();
            for (r, &i) in results.iter().zip(batch) {
                grads.add_assign(&r.grads);
                stats.extend(r.bn_stats.iter().cloned());
                loss += r.report.loss;
                margin += r.report.margin;
                if let Some(x) = r.report.reconstruction {
                    rec += x;
                    has_rec = true;
                }
                if let Some(x) = r.report.segmentation {
                    seg += x;
                    has_seg = true;
                }
                correct += usize::from(r.report.predicted == data[i].label);
            }
            grads.scale(1.0 / batch.len() as f64);
            lr = self.learning_rate(steps_per_epoch);
            self.optim.step(&mut self.model.params, &grads, lr)?;
            update_running_stats(&mut self.model.params, &stats);
            self.step += 1;
            if let Some(e) = self.model.params.entries().iter().find(|e| e.tensor.data().iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence(format!("parameter {} became non-finite at step {}", e.name, self.step)));
            }
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss / n,
            margin: margin / n,
            reconstruction: has_rec.then_some(rec / n),
            segmentation: has_seg.then_some(seg / n),
            train_accuracy: correct as f64 / n,
            learning_rate: lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub lengths: Vec<Vec<f64>>,
}

pub fn evaluate(model: &Model, data: &[TrainSample], exec: Execution) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let preds: Vec<_> = map_indexed(exec, data.len(), |i| model.predict_prepared(&data[i].prepared)).into_iter().collect::<Result<_>>()?;
    let correct = preds.iter().zip(data).filter(|(p, s)| p.class == s.label).count();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        predictions: preds.iter().map(|p| p.class).collect(),
        lengths: preds.into_iter().map(|p| p.lengths).collect(),
    })
}

/// mAP of the length vectors with the test set as both queries and gallery.
pub fn evaluate_retrieval(model: &Model, data: &[TrainSample], exec: Execution) -> Result<RetrievalReport> {
    let eval = evaluate(model, data, exec)?;
    let entries: Vec<RetrievalEntry> = data.iter().zip(eval.lengths).map(|(s, v)| RetrievalEntry { id: s.id.clone(), lengths: v, label: s.label }).collect();
    let mut index = RetrievalIndex::new();
    for e in &entries {
        index.insert(e.clone())?;
    }
    mean_average_precision(&entries, &index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationEvaluation {
    /// Mean over shapes of each shape's mean part IoU.
    pub mean_iou: f64,
    pub per_part: Vec<f64>,
}

pub fn evaluate_segmentation(model: &Model, data: &[TrainSample], choice: Option<CapsuleChoice>, exec: Execution) -> Result<SegmentationEvaluation> {
    let head = model.segmentation.as_ref().ok_or_else(|| Error::Config("model was not trained with a segmentation head".into()))?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let parts: Vec<usize> = (0..head.parts).collect();
    let scores: Vec<(Vec<f64>, f64)> = map_indexed(exec, data.len(), |i| {
        let s = &data[i];
        let gt = s.prepared.cloud.part_labels().ok_or_else(|| Error::InvalidArgument(format!("sample {} has no part labels", s.id)))?;
        let pred = model.segment_parts(&s.prepared, choice.unwrap_or(CapsuleChoice::Predicted))?;
        iou(&pred, gt, &parts)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mut per_part = vec![0.0; parts.len()];
    for (p, _) in &scores {
        per_part.iter_mut().zip(p).for_each(|(a, b)| *a += b / n);
    }
    Ok(SegmentationEvaluation { mean_iou: scores.iter().map(|(_, m)| m).sum::<f64>() / n, per_part })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[(EpochMetrics, Option<f64>)]) -> String {
    let mut s = String::from("epoch,loss,margin,reconstruction,segmentation,train_accuracy,test_accuracy,learning_rate,seconds\n");
    for (m, test) in rows {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{},{},{:.6},{},{:.8e},{:.3}",
            m.epoch,
            m.loss,
            m.margin,
            fmt_opt(m.reconstruction),
            fmt_opt(m.segmentation),
            m.train_accuracy,
            fmt_opt(*test),
            m.learning_rate,
            m.seconds
        );
    }
    s
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<(EpochMetrics, Option<f64>)>,
    pub final_test_accuracy: Option<f64>,
}

/// Trains for the configured epochs, writing `metrics.csv` and
/// `checkpoint.p2sc` into `out_dir` after every epoch.
pub fn run_training(trainer: &mut Trainer, train: &[TrainSample], test: Option<&[TrainSample]>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut history = Vec::new();
    let epochs = trainer.model.config.optimizer.epochs;
    while trainer.epoch < epochs {
        let m = trainer.train_epoch(train)?;
        let test_acc = match test {
            Some(t) if !t.is_empty() => Some(evaluate(&trainer.model, t, trainer.exec)?.accuracy),
            _ => None,
        };
        log::info!(
            "epoch {:>3}  loss {:.5}  train acc {:.3}  test acc {}  ({:.1}s)",
            m.epoch,
            m.loss,
            m.train_accuracy,
            test_acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into()),
            m.seconds
        );
        history.push((m, test_acc));
        if let Some(dir) = out_dir {
            write_file(&dir.join("metrics.csv"), &metrics_csv(&history))?;
            trainer.checkpoint().save(&dir.join("checkpoint.p2sc"))?;
        }
    }
    let final_test_accuracy = history.last().and_then(|(_, t)| *t);
    Ok(TrainOutcome { history, final_test_accuracy })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub iters: usize,
    pub final_loss: f64,
    pub test_accuracy: f64,
    /// The first-iteration digit capsules equal those of a one-iteration run.
    pub first_iteration_matches: bool,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("routing_iters,final_loss,test_accuracy,first_iteration_matches\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.8},{:.6},{}", r.iters, r.final_loss, r.test_accuracy, r.first_iteration_matches);
    }
    s
}

/// Same parameters, different iteration counts: the digit capsules after the
/// first iteration must agree bit for bit.
pub fn first_iteration_matches(model: &Model, iters: usize, x: &PreparedCloud) -> Result<bool> {
    let run = |n: usize| -> Result<Vec<f64>> {
        let mut m = model.clone();
        m.config.routing_iters = n;
        let mut f = m.eval_forward();
        let out = m.forward(&mut f, x)?;
        let trace = out.routing.ok_or_else(|| Error::Config("model has no routing".into()))?;
        Ok(f.g.value(trace.per_iteration[0]).to_vec())
    };
    Ok(run(1)? == run(iters)?)
}

/// Trains one model per routing-iteration count and compares them.
pub fn routing_sweep(base: &Model, iters: &[usize], train: &[TrainSample], test: &[TrainSample], exec: Execution) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(iters.len());
    for &n in iters {
        let mut cfg = base.config.clone();
        cfg.routing_iters = n;
        let model = Model::new(cfg)?;
        let matches = first_iteration_matches(&model, n, &test[0].prepared)?;
        let mut trainer = Trainer::new(model, exec);
        let out = run_training(&mut trainer, train, Some(test), None)?;
        let last = out.history.last().expect("at least one epoch");
        rows.push(SweepRow { iters: n, final_loss: last.0.loss, test_accuracy: last.1.unwrap_or(0.0), first_iteration_matches: matches });
    }
    Ok(rows)
}
