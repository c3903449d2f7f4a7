//! Pass counts against critical paths, speedup against parallel degree, and
//! a linear latency model.

use std::io::Write;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use thiserror::Error;

use crate::engine::{
    decode_autoregressive_with, decode_oracle_with, decode_parallel_with, DecodeOptions,
    EngineError, NoHooks,
};
use crate::graph::DependencyGraph;
use crate::model::TokenModel;
use crate::scheduler::StopRule;
use crate::template::{TemplateSpec, TokenId};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no prompts to run")]
    NoPrompts,
    #[error("prompt {index}: {source}")]
    Decode {
        index: usize,
        #[source]
        source: EngineError,
    },
    #[error("latency fit needs at least 3 records, got {0}")]
    TooFewRecords(usize),
    #[error("latency fit is degenerate: every pass count is {0}")]
    DegenerateFit(f64),
    #[error("expected {expected} lengths, got {got}")]
    LengthCount { got: usize, expected: usize },
    #[error("length {value} for field {field} is not a finite non-negative number")]
    InvalidLength { field: usize, value: f64 },
    #[error("lengths: {0}")]
    Lengths(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Measurements for one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunRecord {
    pub prompt_index: usize,
    /// Critical path of the graph weighted by the realized lengths.
    pub critical_path: u64,
    pub pass_count: usize,
    pub total_generated: usize,
    pub autoregressive_passes: usize,
    /// Whether the parallel contents matched the per-field oracle.
    pub oracle_match: bool,
    pub wall_time_parallel_ns: u64,
    pub wall_time_ar_ns: u64,
}

impl RunRecord {
    pub fn parallel_degree(&self) -> Ratio<u64> {
        Ratio::new(self.total_generated as u64, self.pass_count as u64)
    }

    pub fn speedup(&self) -> Ratio<u64> {
        Ratio::new(self.autoregressive_passes as u64, self.pass_count as u64)
    }

    pub fn is_optimal(&self) -> bool {
        self.pass_count as u64 == self.critical_path
    }

    pub fn speedup_matches_degree(&self) -> bool {
        self.speedup() == self.parallel_degree()
    }
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectOptions {
    /// Untimed decodes run before measuring, cycling over the prompts.
    pub warmup: usize,
    /// Worker threads; prompts are split between them.
    pub jobs: usize,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            jobs: 1,
        }
    }
}

fn run_one(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    index: usize,
    prompt: &[TokenId],
) -> Result<RunRecord, AnalysisError> {
    let err = |source| AnalysisError::Decode { index, source };
    let natural = DecodeOptions::default();
    let parallel = decode_parallel_with(template, graph, model, prompt, &natural, &mut NoHooks)
        .map_err(err)?;
    // The baseline replays the realized lengths so both decoders generate
    // the same number of tokens per field.
    let replay = DecodeOptions::with_stop(StopRule::Exact(parallel.lengths.clone()));
    let baseline =
        decode_autoregressive_with(template, model, prompt, &replay, &mut NoHooks).map_err(err)?;
    let oracle =
        decode_oracle_with(template, graph, model, prompt, &natural, &mut NoHooks).map_err(err)?;
    let weights: Vec<u64> = parallel.lengths.iter().map(|&l| l as u64).collect();
    Ok(RunRecord {
        prompt_index: index,
        critical_path: graph.critical_path(&weights).0,
        pass_count: parallel.pass_count,
        total_generated: parallel.total_generated,
        autoregressive_passes: baseline.pass_count,
        oracle_match: oracle.contents == parallel.contents,
        wall_time_parallel_ns: parallel.timing.total_ns(),
        wall_time_ar_ns: baseline.timing.total_ns(),
    })
}

/// Decodes every prompt with the parallel, baseline and oracle decoders.
/// Records come back in prompt order whatever `jobs` is.
pub fn collect_runs(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    model: &dyn TokenModel,
    prompts: &[Vec<TokenId>],
    options: CollectOptions,
) -> Result<Vec<RunRecord>, AnalysisError> {
    if prompts.is_empty() {
        return Err(AnalysisError::NoPrompts);
    }
    for i in 0..options.warmup {
        let index = i % prompts.len();
        run_one(template, graph, model, index, &prompts[index])?;
    }
    let jobs = options.jobs.clamp(1, prompts.len());
    if jobs == 1 {
        return prompts
            .iter()
            .enumerate()
            .map(|(i, p)| run_one(template, graph, model, i, p))
            .collect();
    }
    let chunk = prompts.len().div_ceil(jobs);
    let results: Vec<Result<Vec<RunRecord>, AnalysisError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = prompts
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, p)| run_one(template, graph, model, c * chunk + i, p))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut records = Vec::with_capacity(prompts.len());
    for part in results {
        records.extend(part?);
    }
    Ok(records)
}

/// Seeded random prompts of `len` tokens drawn from `1..vocab_size`.
pub fn synthetic_prompts(
    count: usize,
    len: usize,
    vocab_size: usize,
    seed: u64,
) -> Vec<Vec<TokenId>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let high = vocab_size.max(2) as TokenId;
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(1..high)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination, clamped to `[0, 1]`.
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LinearFit, AnalysisError> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewRecords(n));
    }
    let mean_x = xs.iter().sum::<f64>() / n as f64;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateFit(xs[0]));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Parallel wall time against pass count.
pub fn fit_latency(records: &[RunRecord]) -> Result<LinearFit, AnalysisError> {
    let xs: Vec<f64> = records.iter().map(|r| r.pass_count as f64).collect();
    let ys: Vec<f64> = records
        .iter()
        .map(|r| r.wall_time_parallel_ns as f64)
        .collect();
    fit_line(&xs, &ys)
}

/// Reads per-field lengths from JSON: either an array in template order or
/// an object keyed by field name that covers every field.
pub fn load_lengths(document: &str, template: &TemplateSpec) -> Result<Vec<f64>, AnalysisError> {
    let value: serde_json::Value = serde_json::from_str(document)?;
    let lengths = match value {
        serde_json::Value::Array(items) => items
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| AnalysisError::Lengths(format!("not a number: {v}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        serde_json::Value::Object(map) => {
            let mut lengths = vec![None; template.len()];
            for (name, v) in &map {
                let field = template
                    .field_index(name)
                    .ok_or_else(|| AnalysisError::Lengths(format!("unknown field `{name}`")))?;
                lengths[field] = Some(v.as_f64().ok_or_else(|| {
                    AnalysisError::Lengths(format!("`{name}`: not a number: {v}"))
                })?);
            }
            lengths
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    l.ok_or_else(|| {
                        AnalysisError::Lengths(format!(
                            "missing field `{}`",
                            template.field(i).name
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            return Err(AnalysisError::Lengths(
                "expected an array or an object".into(),
            ))
        }
    };
    check_lengths(template, &lengths)?;
    Ok(lengths)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    pub critical_path: f64,
    /// Heaviest path, as field indices.
    pub path: Vec<usize>,
    pub total: f64,
    pub parallel_degree: f64,
}

fn check_lengths(template: &TemplateSpec, lengths: &[f64]) -> Result<(), AnalysisError> {
    if lengths.len() != template.len() {
        return Err(AnalysisError::LengthCount {
            got: lengths.len(),
            expected: template.len(),
        });
    }
    match lengths.iter().position(|l| !l.is_finite() || *l < 0.0) {
        Some(field) => Err(AnalysisError::InvalidLength {
            field,
            value: lengths[field],
        }),
        None => Ok(()),
    }
}

/// Critical path and parallel degree at the given per-field lengths.
///
/// With expected lengths this evaluates the plan at the expectation point,
/// which is not the expected critical path; see [`plan_monte_carlo`].
pub fn plan_expected(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    lengths: &[f64],
) -> Result<Plan, AnalysisError> {
    check_lengths(template, lengths)?;
    let n = graph.node_count();
    let mut best = vec![0.0f64; n];
    let mut from: Vec<Option<usize>> = vec![None; n];
    for &v in graph.topological_order() {
        let mut base = 0.0;
        for &p in graph.predecessors(v) {
            if best[p] > base {
                base = best[p];
                from[v] = Some(p);
            }
        }
        best[v] = base + lengths[v];
    }
    let (mut end, critical_path) =
        best.iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (v, w)| if w > acc.1 { (v, w) } else { acc },
            );
    let mut path = vec![end];
    while let Some(p) = from[end] {
        path.push(p);
        end = p;
    }
    path.reverse();
    let total: f64 = lengths.iter().sum();
    let parallel_degree = if critical_path > 0.0 {
        total / critical_path
    } else {
        0.0
    };
    Ok(Plan {
        critical_path,
        path,
        total,
        parallel_degree,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloPlan {
    pub samples: usize,
    pub mean_critical_path: f64,
    pub mean_total: f64,
    pub mean_parallel_degree: f64,
}

/// Samples Poisson lengths around `means`, clamped to `1..=max_len`, and
/// averages the resulting critical paths and degrees.
pub fn plan_monte_carlo(
    template: &TemplateSpec,
    graph: &DependencyGraph,
    means: &[f64],
    samples: usize,
    seed: u64,
) -> Result<MonteCarloPlan, AnalysisError> {
    check_lengths(template, means)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Option<Poisson<f64>>> = means.iter().map(|&m| Poisson::new(m).ok()).collect();
    let (mut cp_sum, mut total_sum, mut degree_sum) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let lengths: Vec<u64> = dists
            .iter()
            .zip(template.fields())
            .map(|(d, f)| {
                let draw = d.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                (draw as u64).clamp(1, f.max_len as u64)
            })
            .collect();
        let cp = graph.critical_path(&lengths).0 as f64;
        let total = lengths.iter().sum::<u64>() as f64;
        cp_sum += cp;
        total_sum += total;
        degree_sum += total / cp;
    }
    let n = samples.max(1) as f64;
    Ok(MonteCarloPlan {
        samples,
        mean_critical_path: cp_sum / n,
        mean_total: total_sum / n,
        mean_parallel_degree: degree_sum / n,
    })
}

#[derive(Debug, Serialize)]
struct CsvRow {
    pass_count: usize,
    total_generated: usize,
    critical_path: u64,
    parallel_degree: f64,
    speedup: f64,
    wall_time_parallel_ns: Option<u64>,
    wall_time_ar_ns: Option<u64>,
}

/// One row per record. Wall-time columns are left empty without `timing`.
pub fn write_csv<W: Write>(
    records: &[RunRecord],
    out: W,
    timing: bool,
) -> Result<(), AnalysisError> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(CsvRow {
            pass_count: r.pass_count,
            total_generated: r.total_generated,
            critical_path: r.critical_path,
            parallel_degree: ratio_f64(r.parallel_degree()),
            speedup: ratio_f64(r.speedup()),
            wall_time_parallel_ns: timing.then_some(r.wall_time_parallel_ns),
            wall_time_ar_ns: timing.then_some(r.wall_time_ar_ns),
        })?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut count = 0usize;
        let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            count += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        Self {
            mean: sum / count.max(1) as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub records: usize,
    pub pass_count: Stat,
    pub total_generated: Stat,
    pub critical_path: Stat,
    pub parallel_degree: Stat,
    pub speedup: Stat,
    /// Every record has pass count equal to its critical path.
    pub all_optimal: bool,
    /// Every record has speedup equal to its parallel degree, exactly.
    pub speedup_identity: bool,
    /// Every record matched the oracle decode.
    pub all_oracle_match: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_parallel_ns: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ar_ns: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_fit: Option<LinearFit>,
}

impl Summary {
    pub fn new(records: &[RunRecord], timing: bool) -> Self {
        let stat = |f: &dyn Fn(&RunRecord) -> f64| Stat::of(records.iter().map(f));
        Self {
            records: records.len(),
            pass_count: stat(&|r| r.pass_count as f64),
            total_generated: stat(&|r| r.total_generated as f64),
            critical_path: stat(&|r| r.critical_path as f64),
            parallel_degree: stat(&|r| ratio_f64(r.parallel_degree())),
            speedup: stat(&|r| ratio_f64(r.speedup())),
            all_optimal: records.iter().all(RunRecord::is_optimal),
            speedup_identity: records.iter().all(RunRecord::speedup_matches_degree),
            all_oracle_match: records.iter().all(|r| r.oracle_match),
            wall_time_parallel_ns: timing.then(|| stat(&|r| r.wall_time_parallel_ns as f64)),
            wall_time_ar_ns: timing.then(|| stat(&|r| r.wall_time_ar_ns as f64)),
            latency_fit: if timing {
                fit_latency(records).ok()
            } else {
                None
            },
        }
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<(), AnalysisError> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
