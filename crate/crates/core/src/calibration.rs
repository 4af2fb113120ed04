//! Light-output calibration.
//!
//! Every code of every connected channel is measured (current and optical
//! power, repeated). The table maps 1024 evenly spaced desired powers to the
//! code whose measured output came closest. All channels share one target
//! maximum, the weakest channel's peak rounded down, so none of them is ever
//! asked for more than it can deliver.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asic::{AsicError, AsicState};
use crate::probe::ProbeModel;
use crate::protocol::{encode, CODE_LEVELS, MAX_CODE, NUM_CHANNELS};
use crate::seed::{stream_rng, Stream};

pub const TABLE_ROWS: usize = CODE_LEVELS as usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error(transparent)]
    Asic(#[from] AsicError),
    #[error("repetitions must be >= 1")]
    NoRepetitions,
    #[error("no live channel to calibrate")]
    AllDead,
    #[error("weakest channel peak {0} uW is below the target granularity")]
    TargetTooSmall(f64),
    #[error("desired power {desired} uW outside [0, {max}] uW")]
    OutOfRange { desired: f64, max: f64 },
    #[error("channel {0} out of range")]
    BadChannel(usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("malformed file at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpSample {
    pub code: u16,
    pub current_a: f64,
    pub power_uw: f64,
    pub current_cv: f64,
    pub power_cv: f64,
}

/// Measured current and light output of one channel over all codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpCurve {
    pub channel: usize,
    pub reps: usize,
    pub samples: Vec<IpSample>,
    /// No light at any code (failed uLED).
    pub dead: bool,
}

impl IpCurve {
    pub fn max_power(&self) -> f64 {
        self.samples.iter().map(|s| s.power_uw).fold(0.0, f64::max)
    }

    pub fn powers(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.power_uw).collect()
    }

    /// Power measured at `code`, if that code was swept.
    pub fn power_at(&self, code: u16) -> Option<f64> {
        match self.samples.get(code as usize) {
            Some(s) if s.code == code => Some(s.power_uw),
            _ => self.samples.iter().find(|s| s.code == code).map(|s| s.power_uw),
        }
    }
}

fn mean_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.iter().all(|x| *x == xs[0]) {
        return (xs[0], 0.0);
    }
    if xs.len() < 2 || mean == 0.0 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean.abs())
}

/// Sweep codes 0..=1023 on every connected channel with `reps` noisy
/// readings per code. Each channel draws from its own sub-stream of `seed`.
pub fn measure_ip_curves(
    asic: &AsicState,
    probe: &ProbeModel,
    reps: usize,
    seed: u64,
) -> Result<Vec<IpCurve>, CalibrationError> {
    if reps == 0 {
        return Err(CalibrationError::NoRepetitions);
    }
    asic.require_on()?;
    let mut curves = Vec::new();
    let mut currents = vec![0.0; reps];
    let mut powers = vec![0.0; reps];
    for ch in probe.connected_channels() {
        let load = *probe.load(ch).expect("connected");
        let mut rng = stream_rng(seed, Stream::MeasurementNoise, ch as u64);
        let mut state = asic.clone();
        let mut samples = Vec::with_capacity(TABLE_ROWS);
        for code in 0..=MAX_CODE {
            state.apply_frame_mut(encode(ch as u16, code).expect("valid"))?;
            let out = state.resolve_output(ch, &load)?;
            state.channels[ch].actual_current = out.actual_current;
            let p_true = load.led_power(out.actual_current);
            for k in 0..reps {
                currents[k] = state.observe_current(ch, &mut rng);
                powers[k] = state.observe_power(p_true, &mut rng);
            }
            let (current_a, current_cv) = mean_cv(&currents);
            let (power_uw, power_cv) = mean_cv(&powers);
            samples.push(IpSample {
                code,
                current_a,
                power_uw,
                current_cv,
                power_cv,
            });
        }
        let dead = !load.is_ok() || samples.iter().all(|s| s.power_uw <= 0.0);
        curves.push(IpCurve {
            channel: ch,
            reps,
            samples,
            dead,
        });
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelStatus {
    Live,
    Dead,
    Unconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// The weakest peak is rounded down to a multiple of this, uW.
    pub granularity_uw: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { granularity_uw: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    target_max_power: f64,
    entries: Vec<[u16; NUM_CHANNELS]>,
    status: [ChannelStatus; NUM_CHANNELS],
}

impl CalibrationTable {
    pub fn target_max_power(&self) -> f64 {
        self.target_max_power
    }

    /// Power step between rows, uW.
    pub fn lsb(&self) -> f64 {
        self.target_max_power / TABLE_ROWS as f64
    }

    pub fn desired(&self, row: usize) -> f64 {
        row as f64 * self.lsb()
    }

    pub fn entry(&self, row: usize, channel: usize) -> u16 {
        self.entries[row][channel]
    }

    pub fn column(&self, channel: usize) -> Vec<u16> {
        self.entries.iter().map(|r| r[channel]).collect()
    }

    pub fn status(&self, channel: usize) -> ChannelStatus {
        self.status[channel]
    }

    /// Nearest row to `desired`, ties toward the lower row.
    pub fn row_for(&self, desired: f64) -> Result<usize, CalibrationError> {
        let max = self.target_max_power;
        if !(desired >= 0.0) || desired > max * (1.0 + 1e-12) {
            return Err(CalibrationError::OutOfRange { desired, max });
        }
        let x = desired / self.lsb();
        let lower = x.floor();
        let row = if x - lower > 0.5 { lower + 1.0 } else { lower };
        Ok((row as usize).min(TABLE_ROWS - 1))
    }

    pub fn lookup(&self, channel: usize, desired: f64) -> Result<u16, CalibrationError> {
        if channel >= NUM_CHANNELS {
            return Err(CalibrationError::BadChannel(channel));
        }
        Ok(self.entries[self.row_for(desired)?][channel])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let list = |want: ChannelStatus| {
            (0..NUM_CHANNELS)
                .filter(|&c| self.status[c] == want)
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "target_max_power_uw,lsb_uw,dead_channels,unconnected_channels").unwrap();
        writeln!(
            out,
            "{},{},{},{}",
            self.target_max_power,
            self.lsb(),
            list(ChannelStatus::Dead),
            list(ChannelStatus::Unconnected)
        )
        .unwrap();
        out.push_str("row");
        for c in 0..NUM_CHANNELS {
            write!(out, ",ch{c}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.entries.iter().enumerate() {
            write!(out, "{r}").unwrap();
            for code in row {
                write!(out, ",{code}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CalibrationError> {
        let fmt = |line: usize, msg: &str| CalibrationError::Format {
            line,
            msg: msg.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != TABLE_ROWS + 3 {
            return Err(fmt(lines.len(), "expected 3 header lines and 1024 rows"));
        }
        let meta: Vec<&str> = lines[1].split(',').collect();
        if meta.len() != 4 {
            return Err(fmt(2, "expected 4 header fields"));
        }
        let target_max_power: f64 = meta[0].trim().parse().map_err(|_| fmt(2, "bad target"))?;
        let mut status = [ChannelStatus::Live; NUM_CHANNELS];
        for (field, kind) in [(meta[2], ChannelStatus::Dead), (meta[3], ChannelStatus::Unconnected)] {
            for tok in field.split_whitespace() {
                let c: usize = tok.parse().map_err(|_| fmt(2, "bad channel list"))?;
                if c >= NUM_CHANNELS {
                    return Err(fmt(2, "channel out of range"));
                }
                status[c] = kind;
            }
        }
        let mut entries = Vec::with_capacity(TABLE_ROWS);
        for (r, line) in lines[3..].iter().enumerate() {
            let lineno = r + 4;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != NUM_CHANNELS + 1 {
                return Err(fmt(lineno, "expected 33 fields"));
            }
            if fields[0].trim().parse::<usize>().ok() != Some(r) {
                return Err(fmt(lineno, "row index out of sequence"));
            }
            let mut row = [0u16; NUM_CHANNELS];
            for (c, f) in fields[1..].iter().enumerate() {
                let code: u16 = f.trim().parse().map_err(|_| fmt(lineno, "bad code"))?;
                if code > MAX_CODE {
                    return Err(fmt(lineno, "code out of range"));
                }
                row[c] = code;
            }
            entries.push(row);
        }
        Ok(CalibrationTable {
            target_max_power,
            entries,
            status,
        })
    }
}

/// For a desired power, the code with the closest measured power. Ties go
/// to the lower code.
struct NearestCode {
    /// (power, code) sorted by power then code.
    sorted: Vec<(f64, u16)>,
}

impl NearestCode {
    fn new(curve: &IpCurve) -> Self {
        let mut sorted: Vec<(f64, u16)> = curve.samples.iter().map(|s| (s.power_uw, s.code)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        NearestCode { sorted }
    }

    /// Lowest code among entries whose power equals `sorted[i].0`.
    fn min_code_of_group(&self, i: usize) -> u16 {
        let p = self.sorted[i].0;
        let start = self.sorted.partition_point(|e| e.0 < p);
        self.sorted[start].1
    }

    fn find(&self, desired: f64) -> u16 {
        let p = self.sorted.partition_point(|e| e.0 < desired);
        let above = (p < self.sorted.len()).then(|| (self.sorted[p].0 - desired, self.sorted[p].1));
        let below = (p > 0).then(|| (desired - self.sorted[p - 1].0, self.min_code_of_group(p - 1)));
        match (below, above) {
            (Some(b), Some(a)) => {
                if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b.1
                } else {
                    a.1
                }
            }
            (Some(b), None) => b.1,
            (None, Some(a)) => a.1,
            (None, None) => 0,
        }
    }
}

pub fn build_table(
    curves: &[IpCurve],
    options: &CalibrationOptions,
) -> Result<CalibrationTable, CalibrationError> {
    let mut status = [ChannelStatus::Unconnected; NUM_CHANNELS];
    let mut weakest = f64::INFINITY;
    for c in curves {
        if c.channel >= NUM_CHANNELS {
            return Err(CalibrationError::BadChannel(c.channel));
        }
        if c.dead || c.max_power() <= 0.0 {
            status[c.channel] = ChannelStatus::Dead;
        } else {
            status[c.channel] = ChannelStatus::Live;
            weakest = weakest.min(c.max_power());
        }
    }
    if !weakest.is_finite() {
        return Err(CalibrationError::AllDead);
    }
    let g = options.granularity_uw;
    let target = if g > 0.0 { (weakest / g).floor() * g } else { weakest };
    if !(target > 0.0) {
        return Err(CalibrationError::TargetTooSmall(weakest));
    }
    let lsb = target / TABLE_ROWS as f64;
    let mut entries = vec![[0u16; NUM_CHANNELS]; TABLE_ROWS];
    for c in curves.iter().filter(|c| status[c.channel] == ChannelStatus::Live) {
        let nearest = NearestCode::new(c);
        for (r, row) in entries.iter_mut().enumerate() {
            row[c.channel] = nearest.find(r as f64 * lsb);
        }
    }
    Ok(CalibrationTable {
        target_max_power: target,
        entries,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub channel: usize,
    pub phase: Phase,
    pub lsb: f64,
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
}

impl LinearityReport {
    pub fn max_abs_dnl(&self) -> f64 {
        self.dnl.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_inl(&self) -> f64 {
        self.inl.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// DNL and INL of `response[k]` against the ideal line `k * lsb`, in LSB.
pub fn linearity(
    channel: usize,
    phase: Phase,
    response: &[f64],
    lsb: f64,
) -> Result<LinearityReport, CalibrationError> {
    if response.len() < 2 {
        return Err(CalibrationError::TooFewSamples(response.len()));
    }
    let dnl = response.windows(2).map(|w| (w[1] - w[0]) / lsb - 1.0).collect();
    let inl = response
        .iter()
        .enumerate()
        .map(|(k, p)| (p - k as f64 * lsb) / lsb)
        .collect();
    Ok(LinearityReport {
        channel,
        phase,
        lsb,
        dnl,
        inl,
    })
}

/// Measured power at each row's table entry: the calibrated response as the
/// measurements predict it.
pub fn calibrated_response(table: &CalibrationTable, curve: &IpCurve) -> Vec<f64> {
    (0..TABLE_ROWS)
        .map(|r| curve.power_at(table.entry(r, curve.channel)).unwrap_or(0.0))
        .collect()
}

/// Noise-free light output when each row's code is driven into the probe.
pub fn driven_response(
    table: &CalibrationTable,
    asic: &AsicState,
    probe: &ProbeModel,
    channel: usize,
) -> Result<Vec<f64>, CalibrationError> {
    let load = probe.load(channel).ok_or(CalibrationError::BadChannel(channel))?;
    let mut state = asic.clone();
    (0..TABLE_ROWS)
        .map(|r| {
            let code = table.entry(r, channel);
            state.apply_frame_mut(encode(channel as u16, code).expect("valid"))?;
            let out = state.resolve_output(channel, load)?;
            Ok(load.led_power(out.actual_current))
        })
        .collect()
}

pub fn ip_curves_to_csv(curves: &[IpCurve]) -> String {
    let mut out = String::from("channel,code,current_a,power_uw,current_cv,power_cv\n");
    for c in curves {
        for s in &c.samples {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.channel, s.code, s.current_a, s.power_uw, s.current_cv, s.power_cv
            )
            .unwrap();
        }
    }
    out
}

/// Parse the IP-curve CSV. `reps` is not stored in the file and is set to 0;
/// a channel is marked dead when it never emits light.
pub fn ip_curves_from_csv(text: &str) -> Result<Vec<IpCurve>, CalibrationError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "channel,code,current_a,power_uw,current_cv,power_cv" => {}
        _ => {
            return Err(CalibrationError::Format {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut curves: Vec<IpCurve> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CalibrationError::Format {
            line: lineno,
            msg: "expected channel,code,current_a,power_uw,current_cv,power_cv".into(),
        };
        if f.len() != 6 {
            return Err(bad());
        }
        let channel: usize = f[0].parse().map_err(|_| bad())?;
        let sample = IpSample {
            code: f[1].parse().map_err(|_| bad())?,
            current_a: f[2].parse().map_err(|_| bad())?,
            power_uw: f[3].parse().map_err(|_| bad())?,
            current_cv: f[4].parse().map_err(|_| bad())?,
            power_cv: f[5].parse().map_err(|_| bad())?,
        };
        match curves.last_mut() {
            Some(c) if c.channel == channel => {
                if c.samples.last().is_some_and(|s| s.code >= sample.code) {
                    return Err(CalibrationError::Format {
                        line: lineno,
                        msg: "codes must be strictly increasing".into(),
                    });
                }
                c.samples.push(sample)
            }
            _ => curves.push(IpCurve {
                channel,
                reps: 0,
                samples: vec![sample],
                dead: false,
            }),
        }
    }
    for c in &mut curves {
        c.dead = c.max_power() <= 0.0;
    }
    Ok(curves)
}
