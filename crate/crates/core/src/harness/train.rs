use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{HarnessError, MetricsReport, Result, RunConfig};
use crate::preprocess::{Corpus, DriverData, ProfileFeatures, ProfileNormalizer};
use crate::siamese::{make_pairs, PairExample, PairSampler, SiameseModel};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_accuracy,val_recall,val_f1,seconds";

/// Disjoint views of one corpus.
#[derive(Clone, Debug, Default)]
pub struct DataSplit {
    /// Training drivers minus their validation days.
    pub train: Corpus,
    /// Trailing days of the training drivers.
    pub val: Corpus,
    /// Drivers never seen in training.
    pub test: Corpus,
}

/// Hold out `round(n · test_fraction)` drivers (seeded choice), then move
/// the last `val_days` days of every remaining driver that has more days
/// than that into the validation set.
pub fn split_corpus(corpus: &Corpus, test_fraction: f64, val_days: usize, seed: u64) -> DataSplit {
    let n = corpus.drivers.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5350_4c49_54));
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let mut split = DataSplit::default();
    for (driver, test) in corpus.drivers.iter().zip(is_test) {
        if test {
            split.test.drivers.push(driver.clone());
            continue;
        }
        let keep = driver.days.len().saturating_sub(val_days);
        if keep == 0 || val_days == 0 {
            split.train.drivers.push(driver.clone());
            continue;
        }
        split.train.drivers.push(DriverData {
            id: driver.id.clone(),
            days: driver.days[..keep].to_vec(),
        });
        split.val.drivers.push(DriverData {
            id: driver.id.clone(),
            days: driver.days[keep..].to_vec(),
        });
    }
    split
}

fn fit_normalizer(corpus: &Corpus) -> Result<ProfileNormalizer> {
    let profiles: Vec<ProfileFeatures> = corpus.drivers.iter().flat_map(|d| &d.days).map(|d| d.profile).collect();
    Ok(ProfileNormalizer::fit(&profiles)?)
}

fn materialize(corpus: &Corpus, normalizer: &ProfileNormalizer, sampler: &PairSampler) -> Result<Vec<PairExample>> {
    let stream = make_pairs(corpus, sampler)?;
    stream
        .pairs
        .iter()
        .map(|p| p.materialize(corpus, normalizer).map_err(HarnessError::from))
        .collect()
}

/// Mean loss and mean gradient over `batch`. Pairs are processed in
/// parallel; the reduction runs in input order so results do not depend
/// on the thread count.
fn batch_gradients(model: &SiameseModel, batch: &[PairExample]) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<_> = batch.par_iter().map(|p| model.loss_and_grads(p)).collect();
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in &mut sum {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, sum))
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::Numerical(format!("loss became {loss} at step {step}")))
    }
}

/// Score `pairs` and compute metrics at `threshold`.
pub fn score_pairs(model: &SiameseModel, pairs: &[PairExample]) -> Result<Vec<f64>> {
    let scores: Vec<_> = pairs.par_iter().map(|p| model.score(&p.a, &p.b)).collect();
    scores.into_iter().map(|s| s.map_err(HarnessError::from)).collect()
}

/// Sampler behind [`evaluate`].
pub fn eval_sampler(config: &RunConfig, seed: u64) -> PairSampler {
    PairSampler {
        n_pairs: config.eval_pairs,
        same_ratio: 0.5,
        balanced: true,
        seed,
    }
}

/// Balanced pairs drawn from `corpus` with `seed`, scored and summarised.
pub fn evaluate(
    model: &SiameseModel,
    normalizer: &ProfileNormalizer,
    corpus: &Corpus,
    config: &RunConfig,
    seed: u64,
) -> Result<(MetricsReport, Vec<f64>, Vec<u8>)> {
    let pairs = materialize(corpus, normalizer, &eval_sampler(config, seed))?;
    let scores = score_pairs(model, &pairs)?;
    let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let report = MetricsReport::from_scores(&scores, &labels, config.threshold, config.digest());
    Ok((report, scores, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let (a, r, f) = match &self.val {
            Some(m) => (m.accuracy.to_string(), m.recall.to_string(), m.f1.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        format!("{},{},{a},{r},{f},{:.3}", self.epoch, self.train_loss, self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub model: SiameseModel,
    pub normalizer: ProfileNormalizer,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Seeded training with early stopping on validation accuracy (or on
/// training loss when there is no validation data). `on_epoch` sees every
/// epoch's log, the current model and whether it is the best so far.
pub fn train<F>(config: &RunConfig, split: &DataSplit, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &SiameseModel, &ProfileNormalizer, bool) -> Result<()>,
{
    config.validate()?;
    let normalizer = fit_normalizer(&split.train)?;
    let mut model = SiameseModel::new(&config.model, config.seed)?;
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.learning_rate))?;

    let val_pairs = if split.val.drivers.len() >= 2 {
        let sampler = PairSampler {
            n_pairs: config.eval_pairs,
            same_ratio: 0.5,
            balanced: true,
            seed: config.seed ^ 0x5641_4c,
        };
        Some(materialize(&split.val, &normalizer, &sampler)?)
    } else {
        log::warn!("no validation drivers; early stopping uses training loss");
        None
    };

    let mut best: Option<(f64, usize, SiameseModel)> = None;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut steps = 0;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let sampler = PairSampler {
            n_pairs: config.train_pairs,
            same_ratio: config.same_ratio,
            balanced: false,
            seed: config.seed.wrapping_add(epoch as u64),
        };
        let pairs = materialize(&split.train, &normalizer, &sampler)?;
        let mut loss_sum = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            let (loss, grads) = batch_gradients(&model, batch)?;
            check_loss(loss, steps)?;
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss * batch.len() as f64;
            steps += 1;
        }
        let train_loss = loss_sum / pairs.len().max(1) as f64;

        let val = match &val_pairs {
            Some(p) => {
                let scores = score_pairs(&model, p)?;
                let labels: Vec<u8> = p.iter().map(|e| e.label).collect();
                Some(MetricsReport::from_scores(&scores, &labels, config.threshold, config.digest()))
            }
            None => None,
        };
        // higher is better
        let criterion = val.as_ref().map_or(-train_loss, |m| m.accuracy);
        let log_line = EpochLog {
            epoch,
            train_loss,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", log_line.csv_line());

        let improved = best.as_ref().is_none_or(|(b, _, _)| criterion > *b);
        on_epoch(&log_line, &model, &normalizer, improved)?;
        epochs.push(log_line);
        if improved {
            best = Some((criterion, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (_, best_epoch, best_model) =
        best.ok_or_else(|| HarnessError::Config("max_epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        model: best_model,
        normalizer,
        epochs,
        best_epoch,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub reached: bool,
}

/// Full-batch Adam on a fixed set of pairs until the mean loss drops below
/// `target` or `max_steps` updates have been made.
pub fn overfit(
    model: &mut SiameseModel,
    pairs: &[PairExample],
    lr: f64,
    max_steps: usize,
    target: f64,
) -> Result<OverfitReport> {
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(lr))?;
    let mut losses = Vec::new();
    for step in 0..=max_steps {
        let (loss, grads) = batch_gradients(model, pairs)?;
        check_loss(loss, step)?;
        losses.push(loss);
        if loss < target {
            return Ok(OverfitReport {
                steps: step,
                losses,
                reached: true,
            });
        }
        if step == max_steps {
            break;
        }
        adam.step(&mut model.params, &grads)?;
    }
    Ok(OverfitReport {
        steps: max_steps,
        losses,
        reached: false,
    })
}
