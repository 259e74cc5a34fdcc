//! Task-size sampling strategies for curriculum training.
//!
//! A [`SamplingStrategy`] decides which instance size each training batch
//! uses. Strategies are registered by name in a [`StrategyRegistry`] and
//! selected at runtime from a spec string such as `staircase:4..20` — the
//! trainer only ever sees the trait object.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, next_in_range, next_unit_f64};
use crate::tsp::MIN_SIZE;

use std::collections::BTreeMap;


/// Whether a trial counts toward level advancement (base) or only probes
/// retention of earlier sizes (probe).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialKind {
    Base,
    Probe,
}

/// One batch-sized unit of work requested from a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub size: usize,
    pub kind: TrialKind,
}

/// State-machine outcome reported back to the caller, mostly for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// A full base window finished at or under the threshold.
    Advance,
    /// Window incomplete, or finished above the threshold.
    Stay,
    /// The end-of-epoch rule fired (level already at the floor stays put).
    Decrement,
    /// Nothing happened.
    NoChange,
}

/// Run-level constants a strategy may need at construction time.
#[derive(Debug, Clone, Copy)]
pub struct StrategyContext {
    /// Master seed; strategies derive their own streams from it.
    pub master_seed: u64,
    /// Batches per epoch, the budget unit for base-window sizing.
    pub batches_per_epoch: usize,
    /// Configured epoch count (before any strategy-specific adjustment).
    pub epochs: usize,
}

/// A task-size curriculum. Implementations must be deterministic given
/// their construction context.
pub trait SamplingStrategy {
    /// Registry name of this strategy's kind.
    fn name(&self) -> &'static str;

    /// The size (and trial kind) for batch `batch_index` of `epoch`.
    fn next_trial(&mut self, epoch: usize, batch_index: usize) -> Trial;

    /// Feeds the measured optimality gap of a completed base trial.
    /// Strategies without adaptive state accept and ignore it.
    fn record_base_outcome(&mut self, measured_gap: f64) -> Result<Transition> {
        validate_gap(measured_gap)?;
        Ok(Transition::Stay)
    }

    /// Called once at each epoch end.
    fn epoch_boundary(&mut self) -> Transition {
        Transition::NoChange
    }

    /// Current difficulty level, for strategies that track one.
    fn level(&self) -> Option<usize> {
        None
    }

    /// Whether the trainer should measure per-batch optimality gaps for
    /// this strategy.
    fn wants_gap(&self) -> bool {
        false
    }

    /// Number of epochs this strategy actually runs given the configured
    /// count. The adaptive staircase trains one epoch fewer to offset the
    /// extra batches its probes consume.
    fn epochs_override(&self, configured: usize) -> usize {
        configured
    }
}

fn validate_gap(gap: f64) -> Result<()> {
    if !gap.is_finite() || gap < 0.0 {
        return Err(Error::Domain(format!(
            "optimality gap must be finite and non-negative, got {gap}"
        )));
    }
    Ok(())
}

fn validate_range(t_min: usize, t_max: usize, spec: &str) -> Result<()> {
    if t_min < MIN_SIZE {
        return Err(Error::StrategyParse {
            spec: spec.to_string(),
            reason: format!("minimum size {t_min} is below the smallest meaningful size {MIN_SIZE}"),
        });
    }
    if t_max < t_min {
        return Err(Error::StrategyParse {
            spec: spec.to_string(),
            reason: format!("range {t_min}..{t_max} is empty"),
        });
    }
    Ok(())
}

/// Always the same size.
pub struct FixedSize {
    n: usize,
}

impl FixedSize {
    pub fn new(n: usize) -> Result<Self> {
        if n < MIN_SIZE {
            return Err(Error::SizeBelowMinimum { n, min: MIN_SIZE });
        }
        Ok(FixedSize { n })
    }
}

impl SamplingStrategy for FixedSize {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn next_trial(&mut self, _epoch: usize, _batch_index: usize) -> Trial {
        Trial {
            size: self.n,
            kind: TrialKind::Base,
        }
    }
}

/// When the uniform strategy redraws its size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedrawMode {
    /// One draw per epoch (the reference behavior).
    PerEpoch,
    /// One draw per batch (ablation).
    PerBatch,
}

/// Uniformly random size over a range.
pub struct UniformRange {
    t_min: usize,
    t_max: usize,
    mode: RedrawMode,
    master_seed: u64,
}

impl UniformRange {
    pub fn new(t_min: usize, t_max: usize, mode: RedrawMode, master_seed: u64) -> Result<Self> {
        validate_range(t_min, t_max, "uniform")?;
        Ok(UniformRange {
            t_min,
            t_max,
            mode,
            master_seed,
        })
    }

    fn draw(&self, indices: &[u64]) -> usize {
        let seed = derive_seed(self.master_seed, "uniform-size", indices);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        next_in_range(&mut rng, self.t_min, self.t_max)
    }
}

impl SamplingStrategy for UniformRange {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn next_trial(&mut self, epoch: usize, batch_index: usize) -> Trial {
        let size = match self.mode {
            RedrawMode::PerEpoch => self.draw(&[epoch as u64]),
            RedrawMode::PerBatch => self.draw(&[epoch as u64, batch_index as u64]),
        };
        Trial {
            size,
            kind: TrialKind::Base,
        }
    }
}

/// Monotone epoch-to-size schedule: sizes get equal contiguous epoch
/// blocks, with the remainder going to the largest sizes. With fewer epochs
/// than sizes the schedule is an endpoint-pinned subsampling of the range.
pub fn classic_schedule(t_min: usize, t_max: usize, epochs_total: usize) -> Result<Vec<usize>> {
    validate_range(t_min, t_max, "classic")?;
    if epochs_total == 0 {
        return Err(Error::Config("classic schedule needs at least one epoch".into()));
    }
    let sizes: Vec<usize> = (t_min..=t_max).collect();
    let e = epochs_total;
    let s = sizes.len();
    let mut schedule = Vec::with_capacity(e);
    if e >= s {
        let block = e / s;
        let remainder = e % s;
        for (i, &size) in sizes.iter().enumerate() {
            // The last `remainder` sizes absorb one extra epoch each.
            let extra = usize::from(i >= s - remainder);
            for _ in 0..block + extra {
                schedule.push(size);
            }
        }
    } else if e == 1 {
        schedule.push(t_max);
    } else {
        for k in 0..e {
            let frac = k as f64 / (e - 1) as f64;
            let size = t_min as f64 + frac * (t_max - t_min) as f64;
            schedule.push(size.round() as usize);
        }
    }
    debug_assert_eq!(schedule.len(), e);
    Ok(schedule)
}

/// Classic curriculum: monotonically increasing sizes over the run.
pub struct ClassicRange {
    schedule: Vec<usize>,
}

impl ClassicRange {
    pub fn new(t_min: usize, t_max: usize, epochs_total: usize) -> Result<Self> {
        Ok(ClassicRange {
            schedule: classic_schedule(t_min, t_max, epochs_total)?,
        })
    }
}

impl SamplingStrategy for ClassicRange {
    fn name(&self) -> &'static str {
        "classic"
    }

    fn next_trial(&mut self, epoch: usize, _batch_index: usize) -> Trial {
        // Clamp defensively: callers should not run past the schedule.
        let idx = epoch.min(self.schedule.len() - 1);
        Trial {
            size: self.schedule[idx],
            kind: TrialKind::Base,
        }
    }
}

/// The fraction of the epoch budget the level-`t` base window uses,
/// exactly as the source formula states it. Exposed for audit; see
/// [`n_base`] for the interpretation actually applied.
pub fn raw_base_ratio(t: usize, t_min: usize, t_max: usize) -> f64 {
    (10 + t - t_min) as f64 / (t_max - t_min) as f64
}

/// Base trials required at level `t` before an advancement decision:
/// `clamp(round(B * (10 + t - t_min) / (t_max - t_min)), 1, B)`.
pub fn n_base(batches_per_epoch: usize, t: usize, t_min: usize, t_max: usize) -> Result<usize> {
    if t_max <= t_min {
        return Err(Error::Config(format!(
            "base-window sizing needs t_max > t_min, got {t_min}..{t_max}"
        )));
    }
    if t < t_min || t > t_max {
        return Err(Error::Domain(format!(
            "level {t} outside [{t_min}, {t_max}]"
        )));
    }
    let b = batches_per_epoch as f64;
    let window = (b * raw_base_ratio(t, t_min, t_max)).round() as usize;
    Ok(window.clamp(1, batches_per_epoch))
}

/// Adaptive staircase: trains at level `t`, advancing when the mean base
/// gap over a full window reaches the threshold, decrementing at epoch end
/// if no window advanced, and interleaving uniformly drawn probe trials
/// that never touch the advancement statistics.
pub struct Staircase {
    t_min: usize,
    t_max: usize,
    alpha: f64,
    probe_prob: f64,
    batches_per_epoch: usize,
    t: usize,
    window_sum: f64,
    window_count: usize,
    advanced_this_epoch: bool,
    rng: ChaCha8Rng,
}

impl Staircase {
    pub fn new(
        t_min: usize,
        t_max: usize,
        alpha: f64,
        probe_prob: f64,
        ctx: &StrategyContext,
    ) -> Result<Self> {
        validate_range(t_min, t_max, "staircase")?;
        if t_max == t_min {
            return Err(Error::Config(
                "staircase needs a non-degenerate size range".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::StrategyParse {
                spec: "staircase".into(),
                reason: format!("alpha must lie in (0, 1), got {alpha}"),
            });
        }
        if !(0.0..=1.0).contains(&probe_prob) {
            return Err(Error::StrategyParse {
                spec: "staircase".into(),
                reason: format!("probe probability must lie in [0, 1], got {probe_prob}"),
            });
        }
        if ctx.batches_per_epoch == 0 {
            return Err(Error::Config("batches_per_epoch must be positive".into()));
        }
        Ok(Staircase {
            t_min,
            t_max,
            alpha,
            probe_prob,
            batches_per_epoch: ctx.batches_per_epoch,
            t: t_min,
            window_sum: 0.0,
            window_count: 0,
            advanced_this_epoch: false,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(ctx.master_seed, "staircase", &[])),
        })
    }

    pub fn level_value(&self) -> usize {
        self.t
    }

    fn window_target(&self) -> usize {
        n_base(self.batches_per_epoch, self.t, self.t_min, self.t_max)
            .expect("range validated at construction")
    }
}

impl SamplingStrategy for Staircase {
    fn name(&self) -> &'static str {
        "staircase"
    }

    fn next_trial(&mut self, _epoch: usize, _batch_index: usize) -> Trial {
        let is_probe = next_unit_f64(&mut self.rng) < self.probe_prob;
        if is_probe {
            let size = next_in_range(&mut self.rng, self.t_min, self.t);
            Trial {
                size,
                kind: TrialKind::Probe,
            }
        } else {
            Trial {
                size: self.t,
                kind: TrialKind::Base,
            }
        }
    }

    fn record_base_outcome(&mut self, measured_gap: f64) -> Result<Transition> {
        validate_gap(measured_gap)?;
        self.window_sum += measured_gap;
        self.window_count += 1;
        if self.window_count < self.window_target() {
            return Ok(Transition::Stay);
        }
        let mean = self.window_sum / self.window_count as f64;
        self.window_sum = 0.0;
        self.window_count = 0;
        if mean <= self.alpha {
            self.t = (self.t + 1).min(self.t_max);
            self.advanced_this_epoch = true;
            Ok(Transition::Advance)
        } else {
            Ok(Transition::Stay)
        }
    }

    fn epoch_boundary(&mut self) -> Transition {
        let advanced = std::mem::take(&mut self.advanced_this_epoch);
        if advanced {
            Transition::NoChange
        } else {
            // The rule fires even at the floor; the window restarts either
            // way so stale gaps from the old level cannot leak in.
            self.t = self.t.saturating_sub(1).max(self.t_min);
            self.window_sum = 0.0;
            self.window_count = 0;
            Transition::Decrement
        }
    }

    fn level(&self) -> Option<usize> {
        Some(self.t)
    }

    fn wants_gap(&self) -> bool {
        true
    }

    fn epochs_override(&self, configured: usize) -> usize {
        configured.saturating_sub(1)
    }
}

/// Factory signature stored in the registry: arguments after the kind
/// prefix, plus the run context.
pub type StrategyFactory =
    fn(args: &str, ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>>;

/// Name-keyed strategy construction. The built-in set covers the four
/// strategy kinds; callers may register additional ones.
pub struct StrategyRegistry {
    factories: BTreeMap<&'static str, StrategyFactory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("fixed", make_fixed);
        reg.register("uniform", make_uniform);
        reg.register("classic", make_classic);
        reg.register("staircase", make_staircase);
        reg
    }

    pub fn register(&mut self, name: &'static str, factory: StrategyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    /// Builds a strategy from a spec string like `fixed:20` or
    /// `staircase:4..100,alpha=0.05`.
    pub fn parse(&self, spec: &str, ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>> {
        let (kind, args) = match spec.split_once(':') {
            Some((kind, args)) => (kind.trim(), args.trim()),
            None => (spec.trim(), ""),
        };
        let factory = self.factories.get(kind).ok_or_else(|| Error::StrategyParse {
            spec: spec.to_string(),
            reason: format!(
                "unknown strategy kind '{kind}' (registered: {})",
                self.names().join(", ")
            ),
        })?;
        factory(args, ctx)
    }
}

/// Parses `A..B` into an inclusive size range.
fn parse_range(text: &str, spec: &str) -> Result<(usize, usize)> {
    let err = |reason: String| Error::StrategyParse {
        spec: spec.to_string(),
        reason,
    };
    let (lo, hi) = text
        .split_once("..")
        .ok_or_else(|| err(format!("expected a range like 4..20, got '{text}'")))?;
    let t_min: usize = lo
        .trim()
        .parse()
        .map_err(|_| err(format!("range start '{lo}' is not an integer")))?;
    let t_max: usize = hi
        .trim()
        .parse()
        .map_err(|_| err(format!("range end '{hi}' is not an integer")))?;
    Ok((t_min, t_max))
}

/// Splits `A..B,k=v,...` into the range text and key=value options.
fn split_options<'a>(args: &'a str, spec: &str) -> Result<(&'a str, Vec<(&'a str, &'a str)>)> {
    let mut parts = args.split(',').map(str::trim);
    let head = parts.next().unwrap_or("");
    let mut options = Vec::new();
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| Error::StrategyParse {
            spec: spec.to_string(),
            reason: format!("expected key=value, got '{part}'"),
        })?;
        options.push((key.trim(), value.trim()));
    }
    Ok((head, options))
}

fn make_fixed(args: &str, _ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>> {
    let spec = format!("fixed:{args}");
    let n: usize = args.trim().parse().map_err(|_| Error::StrategyParse {
        spec: spec.clone(),
        reason: format!("'{args}' is not an integer size"),
    })?;
    let strategy = FixedSize::new(n).map_err(|e| Error::StrategyParse {
        spec,
        reason: e.to_string(),
    })?;
    Ok(Box::new(strategy))
}

fn make_uniform(args: &str, ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>> {
    let spec = format!("uniform:{args}");
    let (range_text, options) = split_options(args, &spec)?;
    let (t_min, t_max) = parse_range(range_text, &spec)?;
    let mut mode = RedrawMode::PerEpoch;
    for (key, value) in options {
        match (key, value) {
            ("mode", "epoch") => mode = RedrawMode::PerEpoch,
            ("mode", "batch") => mode = RedrawMode::PerBatch,
            ("mode", other) => {
                return Err(Error::StrategyParse {
                    spec,
                    reason: format!("mode must be 'epoch' or 'batch', got '{other}'"),
                })
            }
            (other, _) => {
                return Err(Error::StrategyParse {
                    spec,
                    reason: format!("unknown option '{other}'"),
                })
            }
        }
    }
    Ok(Box::new(UniformRange::new(
        t_min,
        t_max,
        mode,
        ctx.master_seed,
    )?))
}

fn make_classic(args: &str, ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>> {
    let spec = format!("classic:{args}");
    let (range_text, options) = split_options(args, &spec)?;
    if let Some((key, _)) = options.first() {
        return Err(Error::StrategyParse {
            spec,
            reason: format!("unknown option '{key}'"),
        });
    }
    let (t_min, t_max) = parse_range(range_text, &spec)?;
    Ok(Box::new(ClassicRange::new(t_min, t_max, ctx.epochs)?))
}

fn make_staircase(args: &str, ctx: &StrategyContext) -> Result<Box<dyn SamplingStrategy>> {
    let spec = format!("staircase:{args}");
    let (range_text, options) = split_options(args, &spec)?;
    let (t_min, t_max) = parse_range(range_text, &spec)?;
    let mut alpha = 0.05;
    let mut probe_prob = 0.5;
    for (key, value) in options {
        let parsed: f64 = value.parse().map_err(|_| Error::StrategyParse {
            spec: spec.clone(),
            reason: format!("'{value}' is not a number for option '{key}'"),
        })?;
        match key {
            "alpha" => alpha = parsed,
            "probe" => probe_prob = parsed,
            other => {
                return Err(Error::StrategyParse {
                    spec,
                    reason: format!("unknown option '{other}'"),
                })
            }
        }
    }
    Ok(Box::new(Staircase::new(t_min, t_max, alpha, probe_prob, ctx)?))
}
