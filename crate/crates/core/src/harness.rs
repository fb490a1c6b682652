//! Experiment orchestration: run adaptation methods over corpora in
//! parallel, aggregate corpus-level WER/WERR tables, sweep hyperparameter
//! axes, and bucket results by utterance length. Output formatting is
//! pinned (fixed column order, 6 significant digits) so reruns of the same
//! configuration are byte-identical.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_adaptation, AdaptConfig, AdaptMethod, AdaptTrace};
use crate::corpus::Utterance;
use crate::error::{contract, Error, Result};
use crate::eval::{corpus_wer, wer, werr, Transcript, WerReport};
use crate::model::{ModelState, ParamPartition};

/// Per-utterance outcome of one method run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UttOutcome {
    pub id: String,
    pub duration_frames: usize,
    pub report: WerReport,
    pub retained_fraction: f64,
    pub trace: AdaptTrace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub corpus_wer: f64,
    pub utterances: Vec<UttOutcome>,
}

impl MethodOutcome {
    pub fn mean_retained_fraction(&self) -> f64 {
        if self.utterances.is_empty() {
            return 0.0;
        }
        self.utterances.iter().map(|u| u.retained_fraction).sum::<f64>() / self.utterances.len() as f64
    }

    /// Corpus WER using each utterance's record at iteration `t` instead of
    /// the final one. Traces must reach `t`.
    pub fn corpus_wer_at_iteration(&self, t: usize, corpus: &[Utterance]) -> Result<f64> {
        let mut reports = Vec::with_capacity(self.utterances.len());
        for (outcome, utt) in self.utterances.iter().zip(corpus) {
            let record = outcome.trace.records.get(t).ok_or_else(|| {
                Error::Contract(format!("trace for {} has no record {t}", outcome.id))
            })?;
            let hyp = Transcript::from_text(&record.hypothesis);
            reports.push(wer(&utt.transcript, &hyp)?);
        }
        Ok(corpus_wer(&reports))
    }
}

/// Runs one adaptation method over a corpus with `jobs` parallel workers.
/// Each utterance adapts a private copy of the shared read-only snapshot;
/// results are keyed by utterance order, so the job count cannot change any
/// number.
pub fn run_method(
    model: &ModelState,
    corpus: &[Utterance],
    config: &AdaptConfig,
    jobs: usize,
) -> Result<MethodOutcome> {
    contract!(jobs >= 1, "jobs must be >= 1");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;

    let outcomes: Result<Vec<UttOutcome>> = pool.install(|| {
        corpus
            .par_iter()
            .map(|utt| {
                let (hypothesis, trace) = run_adaptation(model, utt, config)?;
                let report = wer(&utt.transcript, &hypothesis)?;
                let frames = model.config().output_frames(utt.duration_frames());
                let retained = trace.final_record().retained_frames;
                Ok(UttOutcome {
                    id: utt.id.clone(),
                    duration_frames: utt.duration_frames(),
                    report,
                    retained_fraction: retained as f64 / frames.max(1) as f64,
                    trace,
                })
            })
            .collect()
    });
    let outcomes = outcomes?;
    let reports: Vec<WerReport> = outcomes.iter().map(|u| u.report).collect();
    Ok(MethodOutcome { corpus_wer: corpus_wer(&reports), utterances: outcomes })
}

/// One row of a results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub corpus_tag: String,
    pub method: String,
    pub alpha: f64,
    pub temperature: f64,
    pub iterations: usize,
    pub partition: String,
    pub lr: f64,
    pub wer: f64,
    pub werr: f64,
    pub utterances: usize,
    pub mean_retained_fraction: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn baseline_wer(&self, corpus_tag: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.corpus_tag == corpus_tag && r.method == "none")
            .map(|r| r.wer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "corpus,method,alpha,temperature,iterations,partition,lr,wer,werr,utterances,mean_retained_fraction\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.corpus_tag,
                r.method,
                fmt_float(r.alpha),
                fmt_float(r.temperature),
                r.iterations,
                r.partition,
                fmt_float(r.lr),
                fmt_float(r.wer),
                fmt_float(r.werr),
                r.utterances,
                fmt_float(r.mean_retained_fraction),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Six significant digits, plain decimal, deterministic.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{:.*}", decimals, x);
    // Trim trailing zeros but keep at least one digit after the point.
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0');
        let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
        trimmed.to_string()
    } else {
        s
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

fn row_from_outcome(
    corpus_tag: &str,
    config: &AdaptConfig,
    outcome: &MethodOutcome,
    baseline_wer: f64,
) -> Result<ResultRow> {
    let row_werr = if config.method == AdaptMethod::None || baseline_wer == 0.0 {
        0.0
    } else {
        werr(baseline_wer, outcome.corpus_wer)?
    };
    Ok(ResultRow {
        corpus_tag: corpus_tag.to_string(),
        method: config.method.as_str().to_string(),
        alpha: config.alpha,
        temperature: config.temperature,
        iterations: config.iterations,
        partition: config.partition.as_str().to_string(),
        lr: config.effective_lr(),
        wer: outcome.corpus_wer,
        werr: row_werr,
        utterances: outcome.utterances.len(),
        mean_retained_fraction: outcome.mean_retained_fraction(),
    })
}

/// SDPL only runs the LN selection; sweeps and method lists respect that by
/// pinning its partition (and default learning rate) regardless of the base
/// configuration.
fn config_for_method(base: &AdaptConfig, method: AdaptMethod) -> AdaptConfig {
    let mut cfg = base.clone();
    cfg.method = method;
    if method == AdaptMethod::Sdpl {
        cfg.partition = ParamPartition::Ln;
    }
    cfg
}

/// Per corpus tag: a baseline row plus one row per requested method.
/// Returns the table and every method outcome keyed by (tag, method).
pub fn adapt_over_corpora(
    model: &ModelState,
    corpora: &[(String, Vec<Utterance>)],
    base: &AdaptConfig,
    methods: &[AdaptMethod],
    jobs: usize,
) -> Result<(ResultsTable, Vec<((String, String), MethodOutcome)>)> {
    let mut table = ResultsTable::default();
    let mut outcomes = Vec::new();
    for (tag, corpus) in corpora {
        let baseline_cfg = config_for_method(base, AdaptMethod::None);
        let baseline = run_method(model, corpus, &baseline_cfg, jobs)?;
        let baseline_wer = baseline.corpus_wer;
        table.rows.push(row_from_outcome(tag, &baseline_cfg, &baseline, baseline_wer)?);
        outcomes.push(((tag.clone(), "none".to_string()), baseline));

        for &method in methods.iter().filter(|&&m| m != AdaptMethod::None) {
            let cfg = config_for_method(base, method);
            let outcome = run_method(model, corpus, &cfg, jobs)?;
            table.rows.push(row_from_outcome(tag, &cfg, &outcome, baseline_wer)?);
            outcomes.push(((tag.clone(), method.as_str().to_string()), outcome));
        }
    }
    Ok((table, outcomes))
}

/// Hyperparameter axes for a sweep. Empty axes default to the base value.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SweepAxes {
    pub alphas: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub iterations: Vec<usize>,
    pub partitions: Vec<ParamPartition>,
    pub methods: Vec<AdaptMethod>,
}

/// Full cross-product sweep over one corpus. Returns the table and, when
/// `collect_outcomes`, the outcome per config point for curve emission.
pub fn sweep(
    model: &ModelState,
    corpus_tag: &str,
    corpus: &[Utterance],
    base: &AdaptConfig,
    axes: &SweepAxes,
    jobs: usize,
) -> Result<(ResultsTable, Vec<(AdaptConfig, MethodOutcome)>)> {
    let alphas = non_empty(&axes.alphas, base.alpha);
    let temperatures = non_empty(&axes.temperatures, base.temperature);
    let iterations = non_empty(&axes.iterations, base.iterations);
    let partitions = non_empty(&axes.partitions, base.partition);
    let methods = non_empty(&axes.methods, base.method);

    let mut table = ResultsTable::default();
    let baseline_cfg = config_for_method(base, AdaptMethod::None);
    let baseline = run_method(model, corpus, &baseline_cfg, jobs)?;
    let baseline_wer = baseline.corpus_wer;
    table.rows.push(row_from_outcome(corpus_tag, &baseline_cfg, &baseline, baseline_wer)?);

    let mut outcomes = vec![(baseline_cfg, baseline)];
    for &method in &methods {
        if method == AdaptMethod::None {
            continue;
        }
        for &alpha in &alphas {
            for &temperature in &temperatures {
                for &iters in &iterations {
                    for &partition in &partitions {
                        let mut cfg = config_for_method(base, method);
                        cfg.alpha = alpha;
                        cfg.temperature = temperature;
                        cfg.iterations = iters;
                        if method != AdaptMethod::Sdpl {
                            cfg.partition = partition;
                        }
                        let outcome = run_method(model, corpus, &cfg, jobs)?;
                        table.rows.push(row_from_outcome(corpus_tag, &cfg, &outcome, baseline_wer)?);
                        outcomes.push((cfg, outcome));
                    }
                }
            }
        }
    }
    Ok((table, outcomes))
}

fn non_empty<T: Clone>(axis: &[T], default: T) -> Vec<T> {
    if axis.is_empty() {
        vec![default]
    } else {
        axis.to_vec()
    }
}

/// Per-iteration WER curves as CSV: one row per utterance per iteration.
pub fn curves_csv(entries: &[(String, AdaptConfig, MethodOutcome)]) -> String {
    let mut out = String::from("corpus,method,alpha,temperature,partition,utterance,iteration,wer,loss\n");
    for (tag, cfg, outcome) in entries {
        for utt in &outcome.utterances {
            for rec in &utt.trace.records {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    tag,
                    cfg.method.as_str(),
                    fmt_float(cfg.alpha),
                    fmt_float(cfg.temperature),
                    cfg.partition.as_str(),
                    utt.id,
                    rec.iteration,
                    rec.wer.map(fmt_float).unwrap_or_else(|| "NA".to_string()),
                    fmt_float(rec.loss),
                ));
            }
        }
    }
    out
}

/// One duration bucket of a length analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub utterances: usize,
    pub baseline_wer: f64,
    pub adapted_wer: f64,
    pub werr: f64,
}

/// Buckets utterances into short/long by `short_frames_threshold` (input
/// frames) and reports per-bucket corpus WER and WERR. Empty buckets are
/// omitted.
pub fn length_analysis(
    baseline: &MethodOutcome,
    adapted: &MethodOutcome,
    short_frames_threshold: usize,
) -> Result<Vec<BucketRow>> {
    contract!(
        baseline.utterances.len() == adapted.utterances.len(),
        "length analysis: mismatched corpus sizes"
    );
    let mut rows = Vec::new();
    for (label, short) in [("short", true), ("long", false)] {
        let pairs: Vec<(&UttOutcome, &UttOutcome)> = baseline
            .utterances
            .iter()
            .zip(&adapted.utterances)
            .filter(|(b, _)| (b.duration_frames < short_frames_threshold) == short)
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let base_reports: Vec<WerReport> = pairs.iter().map(|(b, _)| b.report).collect();
        let adapt_reports: Vec<WerReport> = pairs.iter().map(|(_, a)| a.report).collect();
        let baseline_wer = corpus_wer(&base_reports);
        let adapted_wer = corpus_wer(&adapt_reports);
        let bucket_werr = if baseline_wer > 0.0 { werr(baseline_wer, adapted_wer)? } else { 0.0 };
        rows.push(BucketRow {
            bucket: label.to_string(),
            utterances: pairs.len(),
            baseline_wer,
            adapted_wer,
            werr: bucket_werr,
        });
    }
    Ok(rows)
}

pub fn buckets_csv(rows: &[BucketRow]) -> String {
    let mut out = String::from("bucket,utterances,baseline_wer,adapted_wer,werr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.bucket,
            r.utterances,
            fmt_float(r.baseline_wer),
            fmt_float(r.adapted_wer),
            fmt_float(r.werr),
        ));
    }
    out
}
