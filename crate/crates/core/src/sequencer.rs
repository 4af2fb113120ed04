//! Stimulation scripts, round-robin command scheduling and zero-order-hold
//! output traces.
//!
//! The link carries one frame per 6.25 us slot. Channels with an ongoing
//! event are visited in ascending order, so with `N` active channels each one
//! is refreshed every `N` slots. A channel whose event ends gets one explicit
//! zero frame and drops out of the rotation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asic::{AsicError, AsicState};
use crate::calibration::{CalibrationError, CalibrationTable};
use crate::probe::{LedId, ProbeModel};
use crate::protocol::{decode_frame, encode, Frame, NUM_CHANNELS, SLOT_PERIOD_US};
use crate::seed::{stream_rng, Stream};

/// Longest hold between refreshes of an active channel.
pub const MAX_REFRESH_US: f64 = 200.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("{active} simultaneous channels need a {refresh_us} us refresh, above the {limit_us} us limit")]
    InfeasibleBandwidth {
        active: usize,
        refresh_us: f64,
        limit_us: f64,
    },
    #[error("event {0}: channel out of range")]
    BadChannel(usize),
    #[error("event {0}: duration must be positive and start non-negative")]
    BadTiming(usize),
    #[error("events {0} and {1} overlap on the same channel")]
    Overlap(usize, usize),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Asic(#[from] AsicError),
    #[error("uLED {0} is not connected to any channel")]
    Unconnected(LedId),
    #[error("per-uLED duration {0} ms outside [15, 20] ms")]
    BadPulseLength(f64),
    #[error("empty uLED sequence")]
    EmptySequence,
    #[error("malformed file at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    Constant {
        power_uw: f64,
    },
    /// Raised cosine, `peak * (1 - cos(2 pi f t)) / 2`; zero at both ends of
    /// every cycle.
    Sinusoid {
        freq_hz: f64,
        peak_uw: f64,
    },
    /// Plateau with half-sine ramps of `edge_ms` on either side.
    FlankedPulse {
        plateau_uw: f64,
        plateau_ms: f64,
        edge_ms: f64,
    },
}

impl Waveform {
    pub fn peak(&self) -> f64 {
        match *self {
            Waveform::Constant { power_uw } => power_uw,
            Waveform::Sinusoid { peak_uw, .. } => peak_uw,
            Waveform::FlankedPulse { plateau_uw, .. } => plateau_uw,
        }
    }

    /// Natural length of a flanked pulse, us.
    pub fn pulse_length_us(&self) -> Option<f64> {
        match *self {
            Waveform::FlankedPulse {
                plateau_ms, edge_ms, ..
            } => Some((plateau_ms + 2.0 * edge_ms) * 1e3),
            _ => None,
        }
    }

    /// Power at `t_us` after the event start.
    pub fn sample(&self, t_us: f64) -> f64 {
        let t_us = t_us.max(0.0);
        match *self {
            Waveform::Constant { power_uw } => power_uw,
            Waveform::Sinusoid { freq_hz, peak_uw } => {
                peak_uw * 0.5 * (1.0 - (2.0 * PI * freq_hz * t_us * 1e-6).cos())
            }
            Waveform::FlankedPulse {
                plateau_uw,
                plateau_ms,
                edge_ms,
            } => {
                let t = t_us * 1e-3;
                let total = plateau_ms + 2.0 * edge_ms;
                let ramp = |x: f64| plateau_uw * 0.5 * (1.0 - (PI * x / edge_ms).cos());
                if t >= total {
                    0.0
                } else if t < edge_ms {
                    ramp(t)
                } else if t <= edge_ms + plateau_ms {
                    plateau_uw
                } else {
                    ramp(total - t)
                }
            }
        }
    }
}

pub fn waveform_sample(waveform: &Waveform, t_us: f64) -> f64 {
    waveform.sample(t_us)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimEvent {
    pub channel: usize,
    pub waveform: Waveform,
    pub start_us: f64,
    pub duration_us: f64,
}

impl StimEvent {
    pub fn end_us(&self) -> f64 {
        self.start_us + self.duration_us
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StimScript {
    pub events: Vec<StimEvent>,
}

impl StimScript {
    pub fn validate(&self) -> Result<(), SequenceError> {
        for (i, e) in self.events.iter().enumerate() {
            if e.channel >= NUM_CHANNELS {
                return Err(SequenceError::BadChannel(i));
            }
            if !(e.duration_us > 0.0) || !(e.start_us >= 0.0) || !e.end_us().is_finite() {
                return Err(SequenceError::BadTiming(i));
            }
        }
        let mut order: Vec<usize> = (0..self.events.len()).collect();
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&self.events[a], &self.events[b]);
            ea.channel.cmp(&eb.channel).then(ea.start_us.total_cmp(&eb.start_us))
        });
        for w in order.windows(2) {
            let (a, b) = (&self.events[w[0]], &self.events[w[1]]);
            if a.channel == b.channel && b.start_us < a.end_us() {
                return Err(SequenceError::Overlap(w[0], w[1]));
            }
        }
        Ok(())
    }

    pub fn end_us(&self) -> f64 {
        self.events.iter().map(StimEvent::end_us).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub slot_period_us: f64,
    pub max_refresh_us: f64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            slot_period_us: SLOT_PERIOD_US,
            max_refresh_us: MAX_REFRESH_US,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamItem {
    pub slot: u64,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandStream {
    pub slot_period_us: f64,
    pub items: Vec<StreamItem>,
}

impl CommandStream {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,frame_hex\n");
        for it in &self.items {
            writeln!(out, "{},{:04x}", it.slot, it.frame).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, slot_period_us: f64) -> Result<Self, SequenceError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "slot,frame_hex" => {}
            _ => {
                return Err(SequenceError::Format {
                    line: 1,
                    msg: "expected header slot,frame_hex".into(),
                })
            }
        }
        let mut items: Vec<StreamItem> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| SequenceError::Format {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (slot, hex) = line.split_once(',').ok_or_else(|| bad("expected two fields"))?;
            let slot: u64 = slot.trim().parse().map_err(|_| bad("bad slot"))?;
            let hex = hex.trim();
            if hex.len() != 4 {
                return Err(bad("frame must be 4 hex digits"));
            }
            let word = u16::from_str_radix(hex, 16).map_err(|_| bad("bad hex"))?;
            if items.last().is_some_and(|p| p.slot >= slot) {
                return Err(bad("slots must be strictly increasing"));
            }
            items.push(StreamItem {
                slot,
                frame: Frame(word),
            });
        }
        Ok(CommandStream {
            slot_period_us,
            items,
        })
    }

    /// Slots at which `channel` was addressed.
    pub fn slots_for(&self, channel: usize) -> Vec<u64> {
        self.items
            .iter()
            .filter(|it| decode_frame(it.frame).address() == channel)
            .map(|it| it.slot)
            .collect()
    }
}

fn slot_of(t_us: f64, period: f64) -> u64 {
    // ceil, tolerant of representation error in t / period
    let x = t_us / period;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Turn a script into a slot-stamped frame stream.
pub fn compile(
    script: &StimScript,
    table: &CalibrationTable,
    options: &CompileOptions,
) -> Result<CommandStream, SequenceError> {
    script.validate()?;
    let period = options.slot_period_us;
    for e in &script.events {
        if e.waveform.peak() > table.target_max_power() * (1.0 + 1e-12) || e.waveform.peak() < 0.0 {
            return Err(CalibrationError::OutOfRange {
                desired: e.waveform.peak(),
                max: table.target_max_power(),
            }
            .into());
        }
    }

    let spans: Vec<(u64, u64)> = script
        .events
        .iter()
        .map(|e| {
            let s0 = slot_of(e.start_us, period);
            let s1 = slot_of(e.end_us(), period).max(s0 + 1);
            (s0, s1)
        })
        .collect();
    let mut bounds: Vec<u64> = spans.iter().flat_map(|&(a, b)| [a, b]).collect();
    bounds.sort_unstable();
    bounds.dedup();

    let mut items = Vec::new();
    let mut cursor = 0u64;
    let mut previous: Vec<usize> = Vec::new();
    for (k, &b) in bounds.iter().enumerate() {
        let seg_end = bounds.get(k + 1).copied();
        // (channel, event index), ascending by channel
        let mut active: Vec<(usize, usize)> = spans
            .iter()
            .enumerate()
            .filter(|(_, &(s0, s1))| s0 <= b && b < s1)
            .map(|(i, _)| (script.events[i].channel, i))
            .collect();
        active.sort_unstable();

        let n = active.len();
        let refresh = n as f64 * period;
        if refresh > options.max_refresh_us * (1.0 + 1e-12) {
            return Err(SequenceError::InfeasibleBandwidth {
                active: n,
                refresh_us: refresh,
                limit_us: options.max_refresh_us,
            });
        }

        cursor = cursor.max(b);
        for &ch in &previous {
            if !active.iter().any(|&(c, _)| c == ch) {
                items.push(StreamItem {
                    slot: cursor,
                    frame: encode(ch as u16, 0).expect("valid"),
                });
                cursor += 1;
            }
        }
        previous = active.iter().map(|&(c, _)| c).collect();

        let Some(end) = seg_end else { break };
        if n == 0 {
            continue;
        }
        let rotation_start = cursor;
        while cursor < end {
            let (ch, ev) = active[((cursor - rotation_start) % n as u64) as usize];
            let e = &script.events[ev];
            let t = (cursor as f64 * period - e.start_us).clamp(0.0, e.duration_us);
            let power = e.waveform.sample(t).clamp(0.0, table.target_max_power());
            let code = table.lookup(ch, power)?;
            items.push(StreamItem {
                slot: cursor,
                frame: encode(ch as u16, code).expect("valid"),
            });
            cursor += 1;
        }
    }
    Ok(CommandStream {
        slot_period_us: period,
        items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub slot: u64,
    pub code: u16,
    pub current_a: f64,
    pub power_uw: f64,
    pub voltage_v: f64,
}

/// Per-channel output, stored as the sequence of updates. The output holds
/// each value until the channel's next update.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub slot_period_us: f64,
    /// One past the last simulated slot.
    pub end_slot: u64,
    pub channels: BTreeMap<usize, Vec<TracePoint>>,
}

impl Trace {
    /// Output of `channel` during `slot` (zero before its first update).
    pub fn at(&self, channel: usize, slot: u64) -> TracePoint {
        let zero = TracePoint {
            slot,
            code: 0,
            current_a: 0.0,
            power_uw: 0.0,
            voltage_v: 0.0,
        };
        let Some(pts) = self.channels.get(&channel) else {
            return zero;
        };
        let i = pts.partition_point(|p| p.slot <= slot);
        if i == 0 {
            zero
        } else {
            pts[i - 1]
        }
    }

    /// Dense per-slot view of one channel over `[0, end_slot)`.
    pub fn dense(&self, channel: usize) -> Vec<TracePoint> {
        (0..self.end_slot).map(|s| self.at(channel, s)).collect()
    }

    /// Updates to `channel` inside `[from_us, to_us)`.
    pub fn updates_between(&self, channel: usize, from_us: f64, to_us: f64) -> usize {
        self.channels.get(&channel).map_or(0, |pts| {
            pts.iter()
                .filter(|p| {
                    let t = p.slot as f64 * self.slot_period_us;
                    t >= from_us && t < to_us
                })
                .count()
        })
    }

    /// Optical power of `channel` as a step function: `(start_us, power)`.
    pub fn power_steps(&self, channel: usize) -> Vec<(f64, f64)> {
        self.channels.get(&channel).map_or_else(Vec::new, |pts| {
            pts.iter()
                .map(|p| (p.slot as f64 * self.slot_period_us, p.power_uw))
                .collect()
        })
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(u64, usize, TracePoint)> = self
            .channels
            .iter()
            .flat_map(|(&ch, pts)| pts.iter().map(move |p| (p.slot, ch, *p)))
            .collect();
        rows.sort_by_key(|r| (r.0, r.1));
        let mut out = String::from("time_us,channel,code,current_a,power_uw,voltage_v\n");
        for (_, ch, p) in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                p.slot as f64 * self.slot_period_us,
                ch,
                p.code,
                p.current_a,
                p.power_uw,
                p.voltage_v
            )
            .unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, slot_period_us: f64) -> Result<Self, SequenceError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "time_us,channel,code,current_a,power_uw,voltage_v" => {}
            _ => {
                return Err(SequenceError::Format {
                    line: 1,
                    msg: "missing trace header".into(),
                })
            }
        }
        let mut channels: BTreeMap<usize, Vec<TracePoint>> = BTreeMap::new();
        let mut end_slot = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || SequenceError::Format {
                line: i + 1,
                msg: "expected time_us,channel,code,current_a,power_uw,voltage_v".into(),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let t: f64 = f[0].parse().map_err(|_| bad())?;
            let slot = (t / slot_period_us).round() as u64;
            let ch: usize = f[1].parse().map_err(|_| bad())?;
            channels.entry(ch).or_default().push(TracePoint {
                slot,
                code: f[2].parse().map_err(|_| bad())?,
                current_a: f[3].parse().map_err(|_| bad())?,
                power_uw: f[4].parse().map_err(|_| bad())?,
                voltage_v: f[5].parse().map_err(|_| bad())?,
            });
            end_slot = end_slot.max(slot + 1);
        }
        Ok(Trace {
            slot_period_us,
            end_slot,
            channels,
        })
    }
}

/// Output updates in each full cycle of a sinusoid event; empty for other
/// waveforms.
pub fn steps_per_cycle(trace: &Trace, event: &StimEvent) -> Vec<usize> {
    let Waveform::Sinusoid { freq_hz, .. } = event.waveform else {
        return Vec::new();
    };
    let period_us = 1e6 / freq_hz;
    let cycles = (event.duration_us / period_us + 1e-9).floor() as usize;
    (0..cycles)
        .map(|k| {
            let t0 = event.start_us + k as f64 * period_us;
            trace.updates_between(event.channel, t0, t0 + period_us)
        })
        .collect()
}

/// Replay the stream slot by slot through the chip into the probe.
pub fn simulate(
    stream: &CommandStream,
    asic: &AsicState,
    probe: &ProbeModel,
) -> Result<Trace, SequenceError> {
    asic.require_on()?;
    let mut state = asic.clone();
    let mut channels: BTreeMap<usize, Vec<TracePoint>> = BTreeMap::new();
    for it in &stream.items {
        state.apply_frame_mut(it.frame)?;
        let cmd = decode_frame(it.frame);
        let ch = cmd.address();
        let point = match probe.load(ch) {
            Some(load) => {
                let out = state.resolve_output(ch, load)?;
                TracePoint {
                    slot: it.slot,
                    code: cmd.value(),
                    current_a: out.actual_current,
                    power_uw: load.led_power(out.actual_current),
                    voltage_v: out.output_voltage,
                }
            }
            None => TracePoint {
                slot: it.slot,
                code: cmd.value(),
                current_a: 0.0,
                power_uw: 0.0,
                voltage_v: 0.0,
            },
        };
        channels.entry(ch).or_default().push(point);
    }
    Ok(Trace {
        slot_period_us: stream.slot_period_us,
        end_slot: stream.items.last().map_or(0, |it| it.slot + 1),
        channels,
    })
}

/// Parameters of a multi-uLED sequence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// uLEDs in activation order.
    pub leds: Vec<LedId>,
    /// Length of each uLED's single sinusoid cycle, 15-20 ms.
    pub per_led_ms: f64,
    pub peak_uw: f64,
    pub n_trials: usize,
    /// Quiet time between the end of one pattern and the next pattern.
    pub inter_trial_ms: f64,
    /// Extra random gap added per trial, uniform in `[0, jitter_ms]`.
    #[serde(default)]
    pub jitter_ms: f64,
    /// Dark lead-in before the first trial.
    #[serde(default = "default_lead_ms")]
    pub lead_ms: f64,
}

fn default_lead_ms() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub leds: Vec<LedId>,
    pub channels: Vec<usize>,
    pub per_led_ms: f64,
    pub pattern_ms: f64,
    pub peak_uw: f64,
    /// Pattern onset of each trial, us, slot aligned.
    pub trial_starts_us: Vec<f64>,
}

impl SequenceMeta {
    /// Position of `led` in the activation order.
    pub fn slot_of(&self, led: LedId) -> Option<usize> {
        self.leds.iter().position(|&l| l == led)
    }

    /// Commanded power of the uLED at `slot` in the order, `t_ms` after
    /// pattern onset.
    pub fn commanded_power(&self, slot: usize, t_ms: f64) -> f64 {
        let start = slot as f64 * self.per_led_ms;
        if t_ms < start || t_ms >= start + self.per_led_ms {
            return 0.0;
        }
        Waveform::Sinusoid {
            freq_hz: 1e3 / self.per_led_ms,
            peak_uw: self.peak_uw,
        }
        .sample((t_ms - start) * 1e3)
    }

    /// One trial's events with the pattern starting at `onset_us`.
    pub fn trial_events(&self, onset_us: f64) -> Vec<StimEvent> {
        self.channels
            .iter()
            .enumerate()
            .map(|(k, &ch)| StimEvent {
                channel: ch,
                waveform: Waveform::Sinusoid {
                    freq_hz: 1e3 / self.per_led_ms,
                    peak_uw: self.peak_uw,
                },
                start_us: onset_us + k as f64 * self.per_led_ms * 1e3,
                duration_us: self.per_led_ms * 1e3,
            })
            .collect()
    }
}

/// Back-to-back single-cycle sinusoids on each uLED in the given order,
/// repeated `n_trials` times.
pub fn make_sequence_script(
    spec: &SequenceSpec,
    probe: &ProbeModel,
    seed: u64,
) -> Result<(StimScript, SequenceMeta), SequenceError> {
    if spec.leds.is_empty() {
        return Err(SequenceError::EmptySequence);
    }
    if !(15.0..=20.0).contains(&spec.per_led_ms) {
        return Err(SequenceError::BadPulseLength(spec.per_led_ms));
    }
    let channels = spec
        .leds
        .iter()
        .map(|&id| probe.channel_of(id).ok_or(SequenceError::Unconnected(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let pattern_ms = spec.per_led_ms * spec.leds.len() as f64;
    let mut rng = stream_rng(seed, Stream::Script, 0);
    let align = |t_us: f64| (t_us / SLOT_PERIOD_US).ceil() * SLOT_PERIOD_US;
    let mut t = align(spec.lead_ms * 1e3);
    let mut trial_starts_us = Vec::with_capacity(spec.n_trials);
    for _ in 0..spec.n_trials {
        trial_starts_us.push(t);
        let jitter = if spec.jitter_ms > 0.0 {
            rng.random_range(0.0..spec.jitter_ms)
        } else {
            0.0
        };
        t = align(t + (pattern_ms + spec.inter_trial_ms + jitter) * 1e3);
    }
    let meta = SequenceMeta {
        leds: spec.leds.clone(),
        channels,
        per_led_ms: spec.per_led_ms,
        pattern_ms,
        peak_uw: spec.peak_uw,
        trial_starts_us,
    };
    let events = meta
        .trial_starts_us
        .iter()
        .flat_map(|&t0| meta.trial_events(t0))
        .collect();
    Ok((StimScript { events }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asic::AsicConfig;
    use crate::calibration::{build_table, CalibrationOptions, IpCurve, IpSample};
    use crate::protocol::MAX_CODE;

    /// Table whose codes equal the row index on every channel, target 12 uW.
    fn identity_table() -> CalibrationTable {
        let curves: Vec<IpCurve> = (0..NUM_CHANNELS)
            .map(|ch| IpCurve {
                channel: ch,
                reps: 1,
                dead: false,
                samples: (0..=MAX_CODE)
                    .map(|code| IpSample {
                        code,
                        current_a: 0.0,
                        power_uw: if code == MAX_CODE { 12.2 } else { code as f64 * 12.0 / 1024.0 },
                        current_cv: 0.0,
                        power_cv: 0.0,
                    })
                    .collect(),
            })
            .collect();
        build_table(&curves, &CalibrationOptions::default()).unwrap()
    }

    fn sine_script(channels: usize, freq_hz: f64, dur_us: f64) -> StimScript {
        StimScript {
            events: (0..channels)
                .map(|ch| StimEvent {
                    channel: ch,
                    waveform: Waveform::Sinusoid {
                        freq_hz,
                        peak_uw: 10.0,
                    },
                    start_us: 0.0,
                    duration_us: dur_us,
                })
                .collect(),
        }
    }

    #[test]
    fn waveform_examples() {
        let p = 3.0;
        let pulse = Waveform::FlankedPulse {
            plateau_uw: p,
            plateau_ms: 30.0,
            edge_ms: 5.0,
        };
        assert_eq!(pulse.sample(0.0), 0.0);
        assert!(pulse.sample(40_000.0).abs() < 1e-12);
        assert_eq!(pulse.sample(20_000.0), p);
        assert!((pulse.sample(2_500.0) - p / 2.0).abs() < 1e-12);
        assert!((pulse.sample(37_500.0) - p / 2.0).abs() < 1e-12);
        let sine = Waveform::Sinusoid {
            freq_hz: 1000.0,
            peak_uw: 2.0,
        };
        assert_eq!(sine.sample(0.0), 0.0);
        assert!((sine.sample(500.0) - 2.0).abs() < 1e-12);
        assert_eq!(Waveform::Constant { power_uw: 1.5 }.sample(123.0), 1.5);
    }

    #[test]
    fn flanked_pulse_slope_bound() {
        let (peak, edge_ms) = (5.0, 5.0);
        let pulse = Waveform::FlankedPulse {
            plateau_uw: peak,
            plateau_ms: 30.0,
            edge_ms,
        };
        let bound = peak * PI * SLOT_PERIOD_US / (2.0 * edge_ms * 1e3);
        let n = (40_000.0 / SLOT_PERIOD_US) as usize;
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let a = pulse.sample(k as f64 * SLOT_PERIOD_US);
            let b = pulse.sample((k + 1) as f64 * SLOT_PERIOD_US);
            worst = worst.max((b - a).abs());
        }
        assert!(worst <= bound * (1.0 + 1e-9), "{worst} > {bound}");
        assert!(worst > 0.9 * bound);
    }

    #[test]
    fn refresh_periods() {
        let table = identity_table();
        for (n, period_slots) in [(12usize, 12u64), (32, 32), (1, 1)] {
            let s = compile(&sine_script(n, 1000.0, 5000.0), &table, &CompileOptions::default()).unwrap();
            for ch in 0..n {
                let slots = s.slots_for(ch);
                // last visit is the explicit zero frame
                let steady = &slots[..slots.len() - 1];
                assert!(steady.windows(2).all(|w| w[1] - w[0] == period_slots));
            }
        }
        assert_eq!(12.0 * SLOT_PERIOD_US, 75.0);
        assert_eq!(32.0 * SLOT_PERIOD_US, 200.0);
    }

    #[test]
    fn single_channel_sine_has_160_updates_per_cycle() {
        let s = compile(&sine_script(1, 1000.0, 1000.0), &identity_table(), &CompileOptions::default()).unwrap();
        // 160 rotation frames plus the trailing zero frame
        assert_eq!(s.items.len(), 161);
        assert!(s.items.windows(2).all(|w| w[1].slot > w[0].slot));
    }

    #[test]
    fn bandwidth_limit() {
        let opts = CompileOptions {
            slot_period_us: 12.5,
            ..CompileOptions::default()
        };
        let err = compile(&sine_script(17, 1000.0, 1000.0), &identity_table(), &opts).unwrap_err();
        assert!(matches!(err, SequenceError::InfeasibleBandwidth { active: 17, .. }));
        let mut bad = sine_script(1, 1000.0, 1000.0);
        bad.events[0].channel = 32;
        assert_eq!(
            compile(&bad, &identity_table(), &CompileOptions::default()),
            Err(SequenceError::BadChannel(0))
        );
    }

    #[test]
    fn power_above_table_rejected() {
        let mut s = sine_script(1, 1000.0, 1000.0);
        s.events[0].waveform = Waveform::Constant { power_uw: 13.0 };
        assert!(matches!(
            compile(&s, &identity_table(), &CompileOptions::default()),
            Err(SequenceError::Calibration(CalibrationError::OutOfRange { .. }))
        ));
    }

    #[test]
    fn overlap_rejected() {
        let mut s = sine_script(1, 1000.0, 1000.0);
        let mut e = s.events[0];
        e.start_us = 500.0;
        s.events.push(e);
        assert_eq!(s.validate(), Err(SequenceError::Overlap(0, 1)));
    }

    #[test]
    fn stream_round_trip_reconstructs_codes() {
        let table = identity_table();
        let script = sine_script(6, 1000.0, 2000.0);
        let s = compile(&script, &table, &CompileOptions::default()).unwrap();
        let back = CommandStream::from_csv(&s.to_csv(), SLOT_PERIOD_US).unwrap();
        assert_eq!(back, s);
        let mut per_channel: BTreeMap<usize, Vec<(u64, u16)>> = BTreeMap::new();
        for it in &back.items {
            let c = decode_frame(it.frame);
            per_channel.entry(c.address()).or_default().push((it.slot, c.value()));
        }
        for (ch, visits) in per_channel {
            let e = &script.events[ch];
            for &(slot, code) in &visits[..visits.len() - 1] {
                let t = slot as f64 * SLOT_PERIOD_US - e.start_us;
                let want = table.lookup(ch, e.waveform.sample(t)).unwrap();
                assert_eq!(code, want);
            }
            assert_eq!(visits.last().unwrap().1, 0);
        }
    }

    #[test]
    fn zoh_steps_at_twelve_channels() {
        let table = identity_table();
        let s = compile(&sine_script(12, 1000.0, 5000.0), &table, &CompileOptions::default()).unwrap();
        let asic = AsicState::powered(AsicConfig::default()).unwrap();
        let probe = ProbeModel::default();
        let trace = simulate(&s, &asic, &probe).unwrap();
        for cycle in 0..4 {
            let t0 = cycle as f64 * 1000.0;
            let steps = trace.updates_between(3, t0, t0 + 1000.0);
            assert!(steps == 13 || steps == 14, "{steps}");
        }
        let script = sine_script(12, 1000.0, 5000.0);
        let per_cycle = steps_per_cycle(&trace, &script.events[3]);
        assert_eq!(per_cycle.len(), 5);
        assert!(per_cycle.iter().all(|s| (13..=14).contains(s)));
    }

    #[test]
    fn simulate_edge_cases() {
        let asic = AsicState::powered(AsicConfig::default()).unwrap();
        let probe = ProbeModel::default();
        let zero = CommandStream {
            slot_period_us: SLOT_PERIOD_US,
            items: (0..50)
                .map(|k| StreamItem {
                    slot: k,
                    frame: encode((k % 12) as u16, 0).unwrap(),
                })
                .collect(),
        };
        let trace = simulate(&zero, &asic, &probe).unwrap();
        assert!(trace.channels.values().flatten().all(|p| p.current_a == 0.0 && p.power_uw == 0.0));

        let step = CommandStream {
            slot_period_us: SLOT_PERIOD_US,
            items: vec![StreamItem {
                slot: 10,
                frame: encode(0, 300).unwrap(),
            }],
        };
        let trace = simulate(&step, &asic, &probe).unwrap();
        let dense: Vec<f64> = (0..20).map(|s| trace.at(0, s).current_a).collect();
        let transitions = dense.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 1);
        assert_eq!(trace.at(0, 15).code, 300);
        assert!(simulate(&step, &AsicState::new(AsicConfig::default()).unwrap(), &probe).is_err());

        let csv = trace.to_csv();
        assert_eq!(Trace::from_csv(&csv, SLOT_PERIOD_US).unwrap().channels, trace.channels);
    }

    #[test]
    fn zero_frame_then_leave() {
        let table = identity_table();
        let script = StimScript {
            events: vec![
                StimEvent {
                    channel: 2,
                    waveform: Waveform::Constant { power_uw: 5.0 },
                    start_us: 0.0,
                    duration_us: 62.5,
                },
                StimEvent {
                    channel: 4,
                    waveform: Waveform::Constant { power_uw: 6.0 },
                    start_us: 62.5,
                    duration_us: 62.5,
                },
            ],
        };
        let s = compile(&script, &table, &CompileOptions::default()).unwrap();
        let decoded: Vec<(u64, usize, u16)> = s
            .items
            .iter()
            .map(|it| {
                let c = decode_frame(it.frame);
                (it.slot, c.address(), c.value())
            })
            .collect();
        assert_eq!(decoded[9], (9, 2, table.lookup(2, 5.0).unwrap()));
        assert_eq!(decoded[10], (10, 2, 0));
        assert_eq!(decoded[11].1, 4);
        assert_eq!(decoded.last().unwrap().2, 0);
        assert_eq!(decoded.iter().filter(|d| d.1 == 2).count(), 11);
    }

    #[test]
    fn sequence_scripts() {
        let probe = ProbeModel::default();
        let leds: Vec<LedId> = (0..3)
            .flat_map(|s| (0..3).map(move |p| LedId::new(s, p)))
            .collect();
        let spec = SequenceSpec {
            leds: leds.clone(),
            per_led_ms: 15.0,
            peak_uw: 1.0,
            n_trials: 3,
            inter_trial_ms: 100.0,
            jitter_ms: 10.0,
            lead_ms: 50.0,
        };
        let (script, meta) = make_sequence_script(&spec, &probe, 5).unwrap();
        assert_eq!(meta.pattern_ms, 135.0);
        assert_eq!(script.events.len(), 27);
        script.validate().unwrap();
        let (again, _) = make_sequence_script(&spec, &probe, 5).unwrap();
        assert_eq!(script, again);
        assert_eq!(meta.slot_of(LedId::new(1, 0)), Some(3));

        let one = SequenceSpec {
            leds: vec![LedId::new(0, 0)],
            ..spec.clone()
        };
        let (s1, m1) = make_sequence_script(&one, &probe, 5).unwrap();
        assert_eq!(s1.events.len(), 3);
        assert_eq!(m1.pattern_ms, 15.0);

        let too_long = SequenceSpec {
            per_led_ms: 25.0,
            ..spec.clone()
        };
        assert_eq!(
            make_sequence_script(&too_long, &probe, 5).unwrap_err(),
            SequenceError::BadPulseLength(25.0)
        );
        let unplugged = SequenceSpec {
            leds: vec![LedId::new(7, 0)],
            ..spec
        };
        assert!(matches!(
            make_sequence_script(&unplugged, &probe, 5),
            Err(SequenceError::Unconnected(_))
        ));
    }
}
