//! Per-component latency accounting and the statistics derived from it.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::substrate::DispatchStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyComponent {
    Preprocessing,
    ReasoningVision,
    ReasoningPrefill,
    ReasoningDecode,
    ActionGen,
}

impl LatencyComponent {
    pub const ALL: [LatencyComponent; 5] = [
        Self::Preprocessing,
        Self::ReasoningVision,
        Self::ReasoningPrefill,
        Self::ReasoningDecode,
        Self::ActionGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Preprocessing => "preprocessing",
            Self::ReasoningVision => "reasoning_vision",
            Self::ReasoningPrefill => "reasoning_prefill",
            Self::ReasoningDecode => "reasoning_decode",
            Self::ActionGen => "action_gen",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LatencyComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfilerError {
    #[error("section for {0} is already open")]
    NestedSection(LatencyComponent),
    #[error("no open section for {0}")]
    NoOpenSection(LatencyComponent),
    #[error("sweep has no N=1 baseline")]
    MissingBaseline,
    #[error("baseline latency of {0} is zero")]
    ZeroBaseline(String),
    #[error("decode duration must be positive, got {0} ms")]
    ZeroDuration(f64),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("no reports to aggregate")]
    Empty,
}

/// Open timing section; hand it back to [`Recorder::end`].
#[derive(Debug)]
#[must_use]
pub struct Section {
    component: LatencyComponent,
    start: Instant,
}

/// Accumulates wall-clock time per component for one inference.
#[derive(Debug, Clone)]
pub struct Recorder {
    started: Instant,
    totals: [Duration; 5],
    open: [bool; 5],
    postprocessing: Duration,
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new()
    }
}

impl Recorder {
    pub fn new() -> Self {
        Self {
            started: Instant::now(),
            totals: [Duration::ZERO; 5],
            open: [false; 5],
            postprocessing: Duration::ZERO,
        }
    }

    pub fn begin(&mut self, component: LatencyComponent) -> Result<Section, ProfilerError> {
        let slot = &mut self.open[component.index()];
        if *slot {
            return Err(ProfilerError::NestedSection(component));
        }
        *slot = true;
        Ok(Section {
            component,
            start: Instant::now(),
        })
    }

    pub fn end(&mut self, section: Section) -> Result<Duration, ProfilerError> {
        let elapsed = section.start.elapsed();
        let i = section.component.index();
        if !self.open[i] {
            return Err(ProfilerError::NoOpenSection(section.component));
        }
        self.open[i] = false;
        self.totals[i] += elapsed;
        Ok(elapsed)
    }

    /// Runs `f` inside a section of `component`.
    pub fn time<T>(&mut self, component: LatencyComponent, f: impl FnOnce() -> T) -> Result<T, ProfilerError> {
        let section = self.begin(component)?;
        let out = f();
        self.end(section)?;
        Ok(out)
    }

    pub fn add_postprocessing(&mut self, d: Duration) {
        self.postprocessing += d;
    }

    pub fn component(&self, component: LatencyComponent) -> Duration {
        self.totals[component.index()]
    }

    pub fn postprocessing(&self) -> Duration {
        self.postprocessing
    }

    /// Time since the recorder was created.
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Timing and counters of one inference, or the median over repeats.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyReport {
    pub preprocessing_ms: f64,
    pub reasoning_vision_ms: f64,
    pub reasoning_prefill_ms: f64,
    pub reasoning_decode_ms: f64,
    pub action_gen_ms: f64,
    pub action_gen_iter_ms: Vec<f64>,
    pub total_ms: f64,
    /// Measured but not one of the reported components.
    pub postprocessing_ms: f64,
    pub repeats: usize,
    pub alloc_count: u64,
    pub dispatch_count: u64,
    pub replay_count: u64,
    pub kv_bytes: u64,
    pub cot_tokens: usize,
}

impl LatencyReport {
    pub fn from_recorder(
        rec: &Recorder,
        total: Duration,
        iterations: &[Duration],
        stats: &DispatchStats,
        kv_bytes: u64,
        cot_tokens: usize,
    ) -> Self {
        let c = |component| ms(rec.component(component));
        Self {
            preprocessing_ms: c(LatencyComponent::Preprocessing),
            reasoning_vision_ms: c(LatencyComponent::ReasoningVision),
            reasoning_prefill_ms: c(LatencyComponent::ReasoningPrefill),
            reasoning_decode_ms: c(LatencyComponent::ReasoningDecode),
            action_gen_ms: c(LatencyComponent::ActionGen),
            action_gen_iter_ms: iterations.iter().map(|&d| ms(d)).collect(),
            total_ms: ms(total),
            postprocessing_ms: ms(rec.postprocessing()),
            repeats: 1,
            alloc_count: stats.alloc_count,
            dispatch_count: stats.dispatch_count,
            replay_count: stats.replay_count,
            kv_bytes,
            cot_tokens,
        }
    }

    pub fn component_ms(&self, component: LatencyComponent) -> f64 {
        match component {
            LatencyComponent::Preprocessing => self.preprocessing_ms,
            LatencyComponent::ReasoningVision => self.reasoning_vision_ms,
            LatencyComponent::ReasoningPrefill => self.reasoning_prefill_ms,
            LatencyComponent::ReasoningDecode => self.reasoning_decode_ms,
            LatencyComponent::ActionGen => self.action_gen_ms,
        }
    }

    pub fn components_sum_ms(&self) -> f64 {
        LatencyComponent::ALL.iter().map(|&c| self.component_ms(c)).sum()
    }

    /// Element-wise median of timings over `reports`; counters come from the
    /// first report (they are identical across deterministic repeats).
    pub fn median(reports: &[LatencyReport]) -> Result<LatencyReport, ProfilerError> {
        let first = reports.first().ok_or(ProfilerError::Empty)?;
        let med = |f: &dyn Fn(&LatencyReport) -> f64| median(reports.iter().map(f).collect());
        let iters = first.action_gen_iter_ms.len();
        Ok(LatencyReport {
            preprocessing_ms: med(&|r| r.preprocessing_ms),
            reasoning_vision_ms: med(&|r| r.reasoning_vision_ms),
            reasoning_prefill_ms: med(&|r| r.reasoning_prefill_ms),
            reasoning_decode_ms: med(&|r| r.reasoning_decode_ms),
            action_gen_ms: med(&|r| r.action_gen_ms),
            action_gen_iter_ms: (0..iters)
                .map(|i| med(&|r| r.action_gen_iter_ms.get(i).copied().unwrap_or(0.0)))
                .collect(),
            total_ms: med(&|r| r.total_ms),
            postprocessing_ms: med(&|r| r.postprocessing_ms),
            repeats: reports.len(),
            ..first.clone()
        })
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// `latency(N_max) / latency(1)` from `(n, latency)` points.
pub fn scaling_factor(points: &[(usize, f64)]) -> Result<f64, ProfilerError> {
    let base = points
        .iter()
        .find(|(n, _)| *n == 1)
        .map(|&(_, v)| v)
        .ok_or(ProfilerError::MissingBaseline)?;
    if base == 0.0 {
        return Err(ProfilerError::ZeroBaseline(format!("{points:?}")));
    }
    let top = points.iter().max_by_key(|(n, _)| *n).map(|&(_, v)| v).unwrap_or(base);
    Ok(top / base)
}

/// Latencies per component across a sweep of N, with their scaling factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub sweep: Vec<usize>,
    pub latency_ms: BTreeMap<LatencyComponent, Vec<f64>>,
    pub scaling_factor: BTreeMap<LatencyComponent, f64>,
}

impl ScalingReport {
    pub fn from_sweep(points: &[(usize, LatencyReport)]) -> Result<Self, ProfilerError> {
        let mut latency_ms = BTreeMap::new();
        let mut factors = BTreeMap::new();
        for c in LatencyComponent::ALL {
            let series: Vec<(usize, f64)> = points.iter().map(|(n, r)| (*n, r.component_ms(c))).collect();
            factors.insert(
                c,
                scaling_factor(&series).map_err(|e| match e {
                    ProfilerError::ZeroBaseline(_) => ProfilerError::ZeroBaseline(c.to_string()),
                    other => other,
                })?,
            );
            latency_ms.insert(c, series.into_iter().map(|(_, v)| v).collect());
        }
        Ok(Self {
            sweep: points.iter().map(|(n, _)| *n).collect(),
            latency_ms,
            scaling_factor: factors,
        })
    }
}

pub fn tokens_per_second(tokens: usize, decode_ms: f64) -> Result<f64, ProfilerError> {
    if tokens == 0 {
        return Ok(0.0);
    }
    if decode_ms.is_nan() || decode_ms <= 0.0 {
        return Err(ProfilerError::ZeroDuration(decode_ms));
    }
    Ok(tokens as f64 / (decode_ms / 1e3))
}

/// Share of the total spent generating actions.
pub fn actiongen_proportion(report: &LatencyReport) -> f64 {
    if report.total_ms <= 0.0 {
        return 0.0;
    }
    report.action_gen_ms / report.total_ms
}

/// Least-squares line through the points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit, ProfilerError> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return Err(ProfilerError::TooFewPoints { need: 2, got: n });
    }
    let nf = n as f64;
    let mx = xs[..n].iter().sum::<f64>() / nf;
    let my = ys[..n].iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
