use std::time::Instant;

use super::{evaluate, split_corpus, train, MetricsReport, Result, RunConfig, TrainOutcome};
use crate::preprocess::{run_pipeline, Corpus};
use crate::synth::{gen_corpus, SynthSpec};

/// Result of one generate, train and test cycle.
#[derive(Clone, Debug)]
pub struct SyntheticRun {
    pub test: MetricsReport,
    pub outcome: TrainOutcome,
    pub corpus: Corpus,
    pub seconds: f64,
}

/// Generate a corpus from `spec`, push it through the preprocessing
/// pipeline, train on the non-held-out drivers and evaluate on balanced
/// pairs of the held-out ones.
pub fn synthetic_run(spec: &SynthSpec, config: &RunConfig) -> Result<SyntheticRun> {
    let started = Instant::now();
    let mut raw = Vec::new();
    gen_corpus(spec, &mut raw)?;
    let (corpus, _) = run_pipeline(raw.as_slice(), &config.preprocess)?;
    let split = split_corpus(&corpus, config.test_fraction, config.val_days, config.seed);
    let outcome = train(config, &split, |_, _, _, _| Ok(()))?;
    let (test, _, _) = evaluate(&outcome.model, &outcome.normalizer, &split.test, config, config.seed ^ 0x7E57)?;
    Ok(SyntheticRun {
        test,
        outcome,
        corpus,
        seconds: started.elapsed().as_secs_f64(),
    })
}
