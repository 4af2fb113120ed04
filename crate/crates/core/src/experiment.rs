//! Light-driven synthetic neurons and the sequence-scoring pipeline.
//!
//! Each neuron fires as an inhomogeneous Poisson process whose rate follows
//! the optical power of its attached uLED, with an absolute refractory
//! period after every spike. Spike times are stored per trial relative to
//! the pattern onset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asic::AsicState;
use crate::calibration::CalibrationTable;
use crate::probe::{LedId, ProbeModel};
use crate::seed::{stream_rng, Stream};
use crate::sequencer::{
    compile, make_sequence_script, simulate, CommandStream, CompileOptions, SequenceError, SequenceMeta,
    SequenceSpec, StimScript, Trace,
};
use crate::stats::{median, spearman, wilcoxon_signed_rank, StatsError, WilcoxonMethod, WilcoxonResult};

/// Smoothing kernel width for single-trial rates.
pub const DEFAULT_SIGMA_MS: f64 = 5.0;
/// Spike padding on each side of the pattern, wide enough to hold the
/// smoothing kernel's tails.
pub const PAD_MS: f64 = 30.0;
/// Rate grid spacing.
pub const GRID_MS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("neuron {0}: {1}")]
    InvalidNeuron(u32, &'static str),
    #[error("neuron {neuron} is attached to uLED {led}, which has no channel")]
    Unconnected { neuron: u32, led: LedId },
    #[error("neuron {neuron} is attached to uLED {led}, which is not in the sequence")]
    NotInSequence { neuron: u32, led: LedId },
    #[error("empty or inverted window")]
    EmptyWindow,
    #[error("bin width must be positive")]
    BadBin,
    #[error("no events")]
    NoEvents,
    #[error("need at least {need} trials, got {got}")]
    TooFewTrials { need: usize, got: usize },
    #[error("no neurons")]
    NoNeurons,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("malformed spike file at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronModel {
    pub id: u32,
    pub attached_led: LedId,
    /// Local optical power below which light has no effect, uW.
    pub threshold_uw: f64,
    /// Added firing rate per uW above threshold, Hz/uW.
    pub gain_hz_per_uw: f64,
    pub baseline_hz: f64,
    /// Power above which the local population would enter an oscillatory
    /// regime; only reported, not modelled.
    pub population_threshold_uw: f64,
    pub refractory_ms: f64,
}

impl NeuronModel {
    /// A strongly light-driven unit near `led`.
    pub fn synthetic(id: u32, attached_led: LedId) -> Self {
        NeuronModel {
            id,
            attached_led,
            threshold_uw: 0.1,
            gain_hz_per_uw: 200.0,
            baseline_hz: 5.0,
            population_threshold_uw: 2.0,
            refractory_ms: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m| Err(ExperimentError::InvalidNeuron(self.id, m));
        if !(self.threshold_uw >= 0.0) || !(self.threshold_uw < self.population_threshold_uw) {
            return bad("need 0 <= threshold < population threshold");
        }
        if !(self.baseline_hz >= 0.0) || !self.baseline_hz.is_finite() {
            return bad("baseline must be non-negative");
        }
        if !(self.gain_hz_per_uw >= 0.0) || !self.gain_hz_per_uw.is_finite() {
            return bad("gain must be non-negative");
        }
        if !(self.refractory_ms >= 0.0) || !self.refractory_ms.is_finite() {
            return bad("refractory period must be non-negative");
        }
        Ok(())
    }

    /// Firing rate at local power `p_uw`, Hz.
    pub fn rate_hz(&self, p_uw: f64) -> f64 {
        self.baseline_hz + self.gain_hz_per_uw * (p_uw - self.threshold_uw).max(0.0)
    }
}

/// `n` units spread evenly over the uLEDs of a sequence.
pub fn synthetic_neurons(leds: &[LedId], n: usize) -> Vec<NeuronModel> {
    (0..n)
        .filter(|_| !leds.is_empty())
        .map(|k| NeuronModel::synthetic(k as u32, leds[k * leds.len() / n]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub neuron: u32,
    /// Spike times in ms relative to each trial's onset.
    pub trials: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrains {
    pub n_trials: usize,
    /// Span covered by the spike times, ms relative to onset.
    pub window_ms: (f64, f64),
    pub trains: Vec<SpikeTrain>,
    /// Neurons whose local power crossed their population threshold.
    pub population_regime: Vec<u32>,
}

impl SpikeTrains {
    pub fn train(&self, neuron: u32) -> Option<&SpikeTrain> {
        self.trains.iter().find(|t| t.neuron == neuron)
    }

    pub fn total_spikes(&self) -> usize {
        self.trains.iter().flat_map(|t| &t.trials).map(Vec::len).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,neuron,spike_time_ms\n");
        for trial in 0..self.n_trials {
            for t in &self.trains {
                for s in &t.trials[trial] {
                    writeln!(out, "{trial},{},{s}", t.neuron).unwrap();
                }
            }
        }
        out
    }

    /// Parse a spike file. Neurons and trial count come from the experiment
    /// record, since silent units and trials leave no rows.
    pub fn from_csv(
        text: &str,
        neurons: &[u32],
        n_trials: usize,
        window_ms: (f64, f64),
    ) -> Result<Self, ExperimentError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "trial,neuron,spike_time_ms" => {}
            _ => {
                return Err(ExperimentError::Format {
                    line: 1,
                    msg: "expected header trial,neuron,spike_time_ms".into(),
                })
            }
        }
        let index: BTreeMap<u32, usize> = neurons.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut trains: Vec<SpikeTrain> = neurons
            .iter()
            .map(|&neuron| SpikeTrain {
                neuron,
                trials: vec![Vec::new(); n_trials],
            })
            .collect();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| ExperimentError::Format {
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let trial: usize = f[0].parse().map_err(|_| bad("bad trial"))?;
            let neuron: u32 = f[1].parse().map_err(|_| bad("bad neuron"))?;
            let t: f64 = f[2].parse().map_err(|_| bad("bad spike time"))?;
            if trial >= n_trials {
                return Err(bad("trial out of range"));
            }
            let &k = index.get(&neuron).ok_or_else(|| bad("unknown neuron"))?;
            if !t.is_finite() {
                return Err(bad("bad spike time"));
            }
            let times = &mut trains[k].trials[trial];
            if times.last().is_some_and(|&p| p >= t) {
                return Err(bad("spike times must increase within a trial"));
            }
            times.push(t);
        }
        Ok(SpikeTrains {
            n_trials,
            window_ms,
            trains,
            population_regime: Vec::new(),
        })
    }
}

/// Piecewise-constant rate: `(start_ms, rate per ms)`, ordered by start.
type RateSegments = Vec<(f64, f64)>;

fn rate_segments(neuron: &NeuronModel, steps: &[(f64, f64)], onset_us: f64, window: (f64, f64)) -> (RateSegments, f64) {
    let from_us = onset_us + window.0 * 1e3;
    let to_us = onset_us + window.1 * 1e3;
    let first = steps.partition_point(|s| s.0 <= from_us);
    let p0 = if first == 0 { 0.0 } else { steps[first - 1].1 };
    let mut peak = p0;
    let mut segs = vec![(window.0, neuron.rate_hz(p0) * 1e-3)];
    for &(t_us, p) in steps[first..].iter().take_while(|s| s.0 < to_us) {
        peak = peak.max(p);
        let r = neuron.rate_hz(p) * 1e-3;
        if segs.last().is_some_and(|s| s.1 != r) {
            segs.push(((t_us - onset_us) * 1e-3, r));
        }
    }
    (segs, peak)
}

/// Time-rescaled Poisson draw with a dead time after each spike.
fn draw_train<R: Rng + ?Sized>(segs: &[(f64, f64)], end_ms: f64, refractory_ms: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = segs[0].0;
    let mut i = 0;
    'spikes: loop {
        let mut need: f64 = rng.sample(Exp1);
        loop {
            while i + 1 < segs.len() && segs[i + 1].0 <= t {
                i += 1;
            }
            let seg_end = segs.get(i + 1).map_or(end_ms, |s| s.0.min(end_ms));
            let rate = segs[i].1;
            let avail = rate * (seg_end - t);
            if rate > 0.0 && avail >= need {
                t += need / rate;
                break;
            }
            need -= avail;
            t = seg_end;
            if t >= end_ms {
                break 'spikes;
            }
        }
        if t >= end_ms {
            break;
        }
        if out.last().is_some_and(|&p| t <= p) {
            continue;
        }
        out.push(t);
        t += refractory_ms;
        if t >= end_ms {
            break;
        }
    }
    out
}

/// Spikes for every neuron and trial. `onsets_us[k]` is trial `k`'s
/// pattern onset in trace time; spike times cover `window_ms` around it.
pub fn generate_spikes(
    neurons: &[NeuronModel],
    trace: &Trace,
    probe: &ProbeModel,
    onsets_us: &[f64],
    window_ms: (f64, f64),
    seed: u64,
) -> Result<SpikeTrains, ExperimentError> {
    if !(window_ms.1 > window_ms.0) {
        return Err(ExperimentError::EmptyWindow);
    }
    let mut trains = Vec::with_capacity(neurons.len());
    let mut population_regime = Vec::new();
    for (k, n) in neurons.iter().enumerate() {
        n.validate()?;
        let ch = probe.channel_of(n.attached_led).ok_or(ExperimentError::Unconnected {
            neuron: n.id,
            led: n.attached_led,
        })?;
        let steps = trace.power_steps(ch);
        let mut peak: f64 = 0.0;
        let mut cached: Option<(f64, RateSegments)> = None;
        let trials = onsets_us
            .iter()
            .enumerate()
            .map(|(trial, &onset)| {
                if cached.as_ref().is_none_or(|c| c.0 != onset) {
                    let (segs, p) = rate_segments(n, &steps, onset, window_ms);
                    peak = peak.max(p);
                    cached = Some((onset, segs));
                }
                let segs = &cached.as_ref().expect("cached").1;
                let mut rng = stream_rng(seed, Stream::Spikes, trial as u64 * 65536 + k as u64);
                draw_train(segs, window_ms.1, n.refractory_ms, &mut rng)
            })
            .collect();
        if peak > n.population_threshold_uw {
            population_regime.push(n.id);
        }
        trains.push(SpikeTrain { neuron: n.id, trials });
    }
    Ok(SpikeTrains {
        n_trials: onsets_us.len(),
        window_ms,
        trains,
        population_regime,
    })
}

/// Null control: each trial keeps its spike count, with times redrawn
/// uniformly over the window.
pub fn shuffle_spikes(trains: &SpikeTrains, seed: u64) -> SpikeTrains {
    let (lo, hi) = trains.window_ms;
    let mut out = trains.clone();
    for (k, t) in out.trains.iter_mut().enumerate() {
        for (trial, times) in t.trials.iter_mut().enumerate() {
            let mut rng = stream_rng(seed, Stream::Shuffle, trial as u64 * 65536 + k as u64);
            for s in times.iter_mut() {
                *s = rng.random_range(lo..hi);
            }
            times.sort_by(f64::total_cmp);
        }
    }
    out.population_regime.clear();
    out
}

/// Events as `(trial, time_ms)` for [`psth`].
pub fn onset_events(n_trials: usize, at_ms: f64) -> Vec<(usize, f64)> {
    (0..n_trials).map(|k| (k, at_ms)).collect()
}

/// Spike counts per bin around each event, averaged over events. Bin `b`
/// spans `[lo + b * bin, lo + (b + 1) * bin)` relative to the event.
pub fn psth(
    train: &SpikeTrain,
    events: &[(usize, f64)],
    bin_ms: f64,
    window_ms: (f64, f64),
) -> Result<Vec<f64>, ExperimentError> {
    if events.is_empty() {
        return Err(ExperimentError::NoEvents);
    }
    if !(bin_ms > 0.0) {
        return Err(ExperimentError::BadBin);
    }
    if !(window_ms.1 > window_ms.0) {
        return Err(ExperimentError::EmptyWindow);
    }
    let bins = ((window_ms.1 - window_ms.0) / bin_ms).round().max(1.0) as usize;
    let mut h = vec![0.0; bins];
    for &(trial, at) in events {
        let Some(times) = train.trials.get(trial) else { continue };
        for &s in times {
            let rel = s - at - window_ms.0;
            if rel < 0.0 {
                continue;
            }
            let b = (rel / bin_ms).floor() as usize;
            if b < bins {
                h[b] += 1.0;
            }
        }
    }
    let n = events.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    Ok(h)
}

/// Rescale a histogram to a peak of 1; all-zero histograms stay zero.
pub fn scale_unit(h: &[f64]) -> Vec<f64> {
    let max = h.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        h.iter().map(|c| c / max).collect()
    } else {
        h.to_vec()
    }
}

/// Index of the largest bin, first one on ties.
pub fn argmax(h: &[f64]) -> Option<usize> {
    h.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Grid points `lo, lo + 1, ...` below `hi`, ms.
pub fn grid_ms(lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / GRID_MS).ceil().max(0.0) as usize;
    (0..n).map(|k| lo + k as f64 * GRID_MS).collect()
}

/// Sum of unit-mass Gaussians at the spike times, in spikes per ms.
pub fn smooth_rate(spikes: &[f64], sigma_ms: f64, grid: &[f64]) -> Vec<f64> {
    assert!(sigma_ms > 0.0, "kernel width must be positive");
    let norm = 1.0 / (sigma_ms * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 8.0 * sigma_ms;
    let mut out = vec![0.0; grid.len()];
    for &s in spikes {
        let lo = grid.partition_point(|&g| g < s - reach);
        for (g, o) in grid[lo..].iter().zip(&mut out[lo..]) {
            if *g > s + reach {
                break;
            }
            let z = (g - s) / sigma_ms;
            *o += norm * (-0.5 * z * z).exp();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    /// Spearman correlation of each scored trial.
    pub rho: Vec<f64>,
    /// Trials left out because the correlation was undefined.
    pub excluded_trials: Vec<usize>,
    pub median_rho: f64,
    pub w_plus: f64,
    pub n: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

impl SequenceResult {
    pub fn excluded(&self) -> usize {
        self.excluded_trials.len()
    }
}

/// Neurons ordered by their uLED's place in the sequence, then by id.
pub fn sequence_order(neurons: &[NeuronModel], meta: &SequenceMeta) -> Result<Vec<(usize, NeuronModel)>, ExperimentError> {
    let mut v = neurons
        .iter()
        .map(|n| {
            meta.slot_of(n.attached_led)
                .map(|s| (s, *n))
                .ok_or(ExperimentError::NotInSequence {
                    neuron: n.id,
                    led: n.attached_led,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    v.sort_by_key(|(s, n)| (*s, n.id));
    Ok(v)
}

/// Correlate each trial's concatenated unit rates with the commanded
/// illumination of the units' uLEDs, then test the correlations against a
/// zero median.
pub fn score_sequence(
    trains: &SpikeTrains,
    meta: &SequenceMeta,
    neurons: &[NeuronModel],
) -> Result<SequenceResult, ExperimentError> {
    if trains.n_trials < 2 {
        return Err(ExperimentError::TooFewTrials {
            need: 2,
            got: trains.n_trials,
        });
    }
    if neurons.is_empty() {
        return Err(ExperimentError::NoNeurons);
    }
    let order = sequence_order(neurons, meta)?;
    let grid = grid_ms(0.0, meta.pattern_ms);
    let pattern: Vec<f64> = order
        .iter()
        .flat_map(|(slot, _)| grid.iter().map(|&t| meta.commanded_power(*slot, t)))
        .collect();
    let units: Vec<&SpikeTrain> = order
        .iter()
        .map(|(_, n)| {
            trains.train(n.id).ok_or(ExperimentError::Format {
                line: 0,
                msg: format!("no spike train for neuron {}", n.id),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut rho = Vec::with_capacity(trains.n_trials);
    let mut excluded_trials = Vec::new();
    for trial in 0..trains.n_trials {
        let rate: Vec<f64> = units
            .iter()
            .flat_map(|u| smooth_rate(&u.trials[trial], DEFAULT_SIGMA_MS, &grid))
            .collect();
        match spearman(&pattern, &rate) {
            Ok(r) => rho.push(r),
            Err(StatsError::Constant) => excluded_trials.push(trial),
            Err(e) => return Err(e.into()),
        }
    }
    let WilcoxonResult {
        w_plus,
        n,
        p_value,
        method,
    } = wilcoxon_signed_rank(&rho, 0.0, WilcoxonMethod::Exact)?;
    Ok(SequenceResult {
        median_rho: median(&rho),
        rho,
        excluded_trials,
        w_plus,
        n,
        p_value,
        method,
    })
}

/// Peak bin of each unit's trial-averaged response over the pattern, in
/// sequence order.
pub fn psth_peak_order(
    trains: &SpikeTrains,
    meta: &SequenceMeta,
    neurons: &[NeuronModel],
    bin_ms: f64,
) -> Result<Vec<(u32, usize)>, ExperimentError> {
    let events = onset_events(trains.n_trials, 0.0);
    neurons
        .iter()
        .map(|n| {
            let t = trains.train(n.id).ok_or(ExperimentError::NoNeurons)?;
            let h = psth(t, &events, bin_ms, (0.0, meta.pattern_ms))?;
            Ok((n.id, argmax(&h).unwrap_or(0)))
        })
        .collect()
}

/// Everything a sequence experiment produces. Every trial repeats the same
/// slot-aligned pattern, so one trial's stream and trace stand for all.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub meta: SequenceMeta,
    pub neurons: Vec<NeuronModel>,
    /// One trial with the pattern onset at time zero.
    pub trial_stream: CommandStream,
    pub trial_trace: Trace,
    pub spikes: SpikeTrains,
}

impl ExperimentRun {
    pub fn window_ms(pattern_ms: f64) -> (f64, f64) {
        (-PAD_MS, pattern_ms + PAD_MS)
    }
}

/// Compile and simulate the sequence, then draw spikes for every trial.
pub fn run_sequence(
    spec: &SequenceSpec,
    neurons: &[NeuronModel],
    probe: &ProbeModel,
    table: &CalibrationTable,
    asic: &AsicState,
    seed: u64,
) -> Result<ExperimentRun, ExperimentError> {
    let (_, meta) = make_sequence_script(spec, probe, seed)?;
    let trial = StimScript {
        events: meta.trial_events(0.0),
    };
    let trial_stream = compile(&trial, table, &CompileOptions::default())?;
    let trial_trace = simulate(&trial_stream, asic, probe)?;
    let onsets = vec![0.0; spec.n_trials];
    let spikes = generate_spikes(
        neurons,
        &trial_trace,
        probe,
        &onsets,
        ExperimentRun::window_ms(meta.pattern_ms),
        seed,
    )?;
    Ok(ExperimentRun {
        meta,
        neurons: neurons.to_vec(),
        trial_stream,
        trial_trace,
        spikes,
    })
}
