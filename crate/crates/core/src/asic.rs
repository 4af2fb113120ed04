//! Behavioral model of the 32-channel current-source chip.
//!
//! Each channel holds its last commanded code (zero-order hold). The code
//! drives an R-2R DAC (0 to 0.38 V), an OTA with a feedback resistor, and a
//! 1:64 output mirror. A 1 uA bias keeps the feedback transistor on and is
//! subtracted again (64 uA) at the output, so the net transfer stays linear.
//! Output voltage is capped by the supply-limited compliance; whatever the
//! load cannot accept at that voltage is simply not delivered.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{LedState, MicroLedModel, ProbeModel, DEFAULT_COMPLIANCE_V};
use crate::protocol::{decode_frame, Frame, CODE_LEVELS, MAX_CODE, NUM_CHANNELS};

/// DAC output at code 1024.
pub const DAC_FULL_SCALE_V: f64 = 0.38;
pub const BIAS_CURRENT_A: f64 = 1e-6;
pub const MIRROR_RATIO: f64 = 64.0;
pub const DEFAULT_FULL_SCALE_A: f64 = 1e-3;

/// Board idle draw including regulators, mW.
pub const BOARD_IDLE_MW: f64 = 84.0;
/// Extra board draw per mA of total output, mW/mA.
pub const BOARD_MW_PER_MA: f64 = 6.95;
/// Simulated idle draw of the chip alone, mW.
pub const ASIC_IDLE_MW: f64 = 16.0;

/// Probe-adjacent coupling, 1:417 (about -52.4 dB).
pub const DEFAULT_CROSSTALK_GAIN: f64 = 1.0 / 417.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsicError {
    #[error("chip is not fully powered (state {0:?})")]
    PoweredOff(PowerState),
    #[error("chip is permanently faulted")]
    Faulted,
    #[error("channel {0} out of range")]
    BadChannel(usize),
    #[error("code {0} out of range")]
    BadCode(u16),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerState {
    Off,
    AnalogOn,
    DigitalOn,
    FullyOn,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rail {
    Analog1v2,
    Digital1v2,
    Negative1v2,
    High5v,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEvent {
    pub rail: Rail,
    pub direction: Direction,
    pub time_us: f64,
}

impl PowerEvent {
    pub fn new(rail: Rail, direction: Direction, time_us: f64) -> Self {
        PowerEvent {
            rail,
            direction,
            time_us,
        }
    }

    /// Analog, digital, then negative and high together.
    pub fn power_up(t0_us: f64) -> Vec<PowerEvent> {
        use Direction::On;
        vec![
            PowerEvent::new(Rail::Analog1v2, On, t0_us),
            PowerEvent::new(Rail::Digital1v2, On, t0_us + 1000.0),
            PowerEvent::new(Rail::Negative1v2, On, t0_us + 2000.0),
            PowerEvent::new(Rail::High5v, On, t0_us + 2000.0),
        ]
    }

    /// Reverse of [`power_up`](Self::power_up).
    pub fn power_down(t0_us: f64) -> Vec<PowerEvent> {
        use Direction::Off;
        vec![
            PowerEvent::new(Rail::High5v, Off, t0_us),
            PowerEvent::new(Rail::Negative1v2, Off, t0_us),
            PowerEvent::new(Rail::Digital1v2, Off, t0_us + 1000.0),
            PowerEvent::new(Rail::Analog1v2, Off, t0_us + 2000.0),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampRegion {
    pub code_low: u16,
    pub code_high: u16,
    pub v_out_min: f64,
    pub v_out_max: f64,
}

/// Synthetic operating rectangles for the three output-clamp settings. Zero
/// output sits in the lowest one; 5 V at full scale in the highest one.
pub const DEFAULT_CLAMP_REGIONS: [ClampRegion; 3] = [
    ClampRegion {
        code_low: 1,
        code_high: 341,
        v_out_min: 0.0,
        v_out_max: 4.0,
    },
    ClampRegion {
        code_low: 342,
        code_high: 682,
        v_out_min: 2.0,
        v_out_max: 4.8,
    },
    ClampRegion {
        code_low: 683,
        code_high: 1023,
        v_out_min: 2.5,
        v_out_max: 5.0,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsicConfig {
    pub v_compliance: f64,
    /// Output current at code 1024, A.
    pub full_scale: f64,
    pub clamp_regions: [ClampRegion; 3],
    pub crosstalk_gain: f64,
    /// Relative measurement noise (SD / mean).
    pub noise_cv: f64,
    /// Absolute current-meter noise floor, A.
    pub noise_floor_a: f64,
    /// Per-channel multiplicative gain error.
    pub channel_gain: [f64; NUM_CHANNELS],
    /// How long the hold capacitor keeps the supplies up after a disconnect.
    pub hold_window_us: f64,
}

impl Default for AsicConfig {
    fn default() -> Self {
        AsicConfig {
            v_compliance: DEFAULT_COMPLIANCE_V,
            full_scale: DEFAULT_FULL_SCALE_A,
            clamp_regions: DEFAULT_CLAMP_REGIONS,
            crosstalk_gain: DEFAULT_CROSSTALK_GAIN,
            noise_cv: 0.0005,
            noise_floor_a: 50e-9,
            channel_gain: [1.0; NUM_CHANNELS],
            hold_window_us: 10_000.0,
        }
    }
}

impl AsicConfig {
    pub fn validate(&self) -> Result<(), AsicError> {
        let mut next = 1u16;
        for r in &self.clamp_regions {
            if r.code_low != next || r.code_high < r.code_low || r.v_out_max < r.v_out_min {
                return Err(AsicError::Config(
                    "clamp regions must partition codes 1..1023 in order".into(),
                ));
            }
            next = r.code_high + 1;
        }
        if next != CODE_LEVELS {
            return Err(AsicError::Config("clamp regions must end at code 1023".into()));
        }
        if !(self.full_scale > 0.0 && self.v_compliance > 0.0) {
            return Err(AsicError::Config("full scale and compliance must be positive".into()));
        }
        if self.channel_gain.iter().any(|g| !(*g > 0.0)) {
            return Err(AsicError::Config("channel gains must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate quantities of the code-to-current path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferBreakdown {
    /// DAC output, V.
    pub v_in: f64,
    /// Feedback resistor giving `full_scale` at code 1024, ohm.
    pub r_feedback: f64,
    /// Signal current into the mirror (without bias), A.
    pub mirror_signal: f64,
    /// Current through the feedback transistor including bias, A.
    pub feedback_current: f64,
    /// Mirror output after bias subtraction, A.
    pub output: f64,
}

pub fn transfer_breakdown(code: u16, full_scale: f64) -> TransferBreakdown {
    let v_in = DAC_FULL_SCALE_V * code as f64 / CODE_LEVELS as f64;
    let r_feedback = DAC_FULL_SCALE_V / (full_scale / MIRROR_RATIO);
    let mirror_signal = v_in / r_feedback;
    let feedback_current = mirror_signal + BIAS_CURRENT_A;
    let output = MIRROR_RATIO * feedback_current - MIRROR_RATIO * BIAS_CURRENT_A;
    TransferBreakdown {
        v_in,
        r_feedback,
        mirror_signal,
        feedback_current,
        output,
    }
}

/// `code / 1024 * full_scale`.
pub fn ideal_transfer(code: u16, full_scale: f64) -> f64 {
    code as f64 / CODE_LEVELS as f64 * full_scale
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelState {
    pub latched_code: u16,
    pub commanded_current: f64,
    pub actual_current: f64,
    pub output_voltage: f64,
    pub in_region: bool,
}

/// Result of driving one channel into its load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedOutput {
    pub actual_current: f64,
    pub output_voltage: f64,
    pub in_region: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
struct Rails {
    analog: bool,
    digital: bool,
    negative: bool,
    high: bool,
}

impl Rails {
    fn set(&mut self, rail: Rail, on: bool) {
        match rail {
            Rail::Analog1v2 => self.analog = on,
            Rail::Digital1v2 => self.digital = on,
            Rail::Negative1v2 => self.negative = on,
            Rail::High5v => self.high = on,
        }
    }

    /// High-voltage domains up without both 1.2 V rails.
    fn damaging(&self) -> bool {
        (self.high || self.negative) && !(self.analog && self.digital)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsicState {
    pub config: AsicConfig,
    pub channels: [ChannelState; NUM_CHANNELS],
    rails: Rails,
    faulted: bool,
}

impl AsicState {
    /// Unpowered chip with all registers at zero.
    pub fn new(config: AsicConfig) -> Result<Self, AsicError> {
        config.validate()?;
        Ok(AsicState {
            config,
            channels: [ChannelState::default(); NUM_CHANNELS],
            rails: Rails::default(),
            faulted: false,
        })
    }

    /// Chip taken through the regular power-up sequence.
    pub fn powered(config: AsicConfig) -> Result<Self, AsicError> {
        Ok(Self::new(config)?.power_transition(&PowerEvent::power_up(0.0)))
    }

    pub fn power(&self) -> PowerState {
        let r = self.rails;
        if self.faulted {
            PowerState::Faulted
        } else if r.analog && r.digital && r.negative && r.high {
            PowerState::FullyOn
        } else if r.analog && r.digital {
            PowerState::DigitalOn
        } else if r.analog {
            PowerState::AnalogOn
        } else {
            PowerState::Off
        }
    }

    pub fn is_fully_on(&self) -> bool {
        self.power() == PowerState::FullyOn
    }

    pub fn require_on(&self) -> Result<(), AsicError> {
        match self.power() {
            PowerState::FullyOn => Ok(()),
            PowerState::Faulted => Err(AsicError::Faulted),
            other => Err(AsicError::PoweredOff(other)),
        }
    }

    pub fn ideal_current(&self, code: u16) -> Result<f64, AsicError> {
        self.require_on()?;
        if code > MAX_CODE {
            return Err(AsicError::BadCode(code));
        }
        let ideal = ideal_transfer(code, self.config.full_scale);
        debug_assert!({
            let b = transfer_breakdown(code, self.config.full_scale);
            (b.output - ideal).abs() <= 1e-12 * ideal.max(1e-18)
        });
        Ok(ideal)
    }

    fn commanded(&self, channel: usize, code: u16) -> f64 {
        ideal_transfer(code, self.config.full_scale) * self.config.channel_gain[channel]
    }

    pub fn apply_frame(&self, frame: Frame) -> Result<AsicState, AsicError> {
        let mut next = self.clone();
        next.apply_frame_mut(frame)?;
        Ok(next)
    }

    /// In-place variant of [`apply_frame`](Self::apply_frame).
    pub fn apply_frame_mut(&mut self, frame: Frame) -> Result<(), AsicError> {
        self.require_on()?;
        let cmd = decode_frame(frame);
        let ch = cmd.address();
        let commanded = self.commanded(ch, cmd.value());
        let slot = &mut self.channels[ch];
        slot.latched_code = cmd.value();
        slot.commanded_current = commanded;
        Ok(())
    }

    pub fn region_check(&self, code: u16, v_out: f64) -> bool {
        let regions = &self.config.clamp_regions;
        let r = regions
            .iter()
            .find(|r| (r.code_low..=r.code_high).contains(&code))
            .unwrap_or(&regions[0]);
        v_out >= r.v_out_min && v_out <= r.v_out_max
    }

    /// Drive `channel` into `load` and report what actually flows.
    pub fn resolve_output(
        &self,
        channel: usize,
        load: &MicroLedModel,
    ) -> Result<ResolvedOutput, AsicError> {
        self.require_on()?;
        let ch = self.channels.get(channel).ok_or(AsicError::BadChannel(channel))?;
        let code = ch.latched_code;
        let commanded = self.commanded(channel, code);
        let vc = self.config.v_compliance;
        let (actual_current, output_voltage, forced_out) = match load.state {
            LedState::Open => (0.0, vc, true),
            LedState::Short => (commanded, 0.0, false),
            LedState::Ok => {
                let v = load.led_voltage(commanded).expect("ok load");
                if v <= vc {
                    (commanded, v, false)
                } else {
                    (load.led_current(vc).expect("ok load"), vc, false)
                }
            }
        };
        Ok(ResolvedOutput {
            actual_current,
            output_voltage,
            in_region: !forced_out && self.region_check(code, output_voltage),
        })
    }

    /// Resolve every channel against the probe. Unconnected channels
    /// source nothing.
    pub fn resolve_all(&mut self, probe: &ProbeModel) -> Result<(), AsicError> {
        self.require_on()?;
        for ch in 0..NUM_CHANNELS {
            let out = match probe.load(ch) {
                Some(load) => self.resolve_output(ch, load)?,
                None => ResolvedOutput {
                    actual_current: 0.0,
                    output_voltage: 0.0,
                    in_region: self.channels[ch].latched_code == 0,
                },
            };
            let c = &mut self.channels[ch];
            c.actual_current = out.actual_current;
            c.output_voltage = out.output_voltage;
            c.in_region = out.in_region;
        }
        Ok(())
    }

    /// Current coupled into `victim` from its probe neighbours, using the
    /// resolved currents.
    pub fn inject_crosstalk(&self, probe: &ProbeModel, victim: usize) -> Result<f64, AsicError> {
        self.require_on()?;
        if victim >= NUM_CHANNELS {
            return Err(AsicError::BadChannel(victim));
        }
        let aggressors: f64 = probe
            .probe_neighbours(victim)
            .into_iter()
            .map(|ch| self.channels[ch].actual_current)
            .sum();
        Ok(self.config.crosstalk_gain * aggressors)
    }

    pub fn power_transition(&self, events: &[PowerEvent]) -> AsicState {
        let mut next = self.clone();
        for ev in events {
            if next.faulted {
                break;
            }
            next.rails.set(ev.rail, ev.direction == Direction::On);
            if next.rails.damaging() {
                next.faulted = true;
            }
        }
        if next.faulted || !next.is_fully_on() {
            // registers do not survive losing power, and a faulted chip sources nothing
            next.channels = [ChannelState::default(); NUM_CHANNELS];
        }
        next
    }

    /// Supply cable pulled at `at_us`; the sequencer then runs `shutdown`
    /// off the hold capacitor. If any step falls outside the hold window the
    /// rails collapse together and the chip is damaged.
    pub fn disconnect(&self, at_us: f64, shutdown: &[PowerEvent]) -> AsicState {
        let deadline = at_us + self.config.hold_window_us;
        if shutdown.iter().any(|e| e.time_us > deadline || e.time_us < at_us) {
            let mut next = self.clone();
            if next.rails.high || next.rails.negative {
                next.faulted = true;
            }
            next.rails = Rails::default();
            next.channels = [ChannelState::default(); NUM_CHANNELS];
            return next;
        }
        let mut next = self.power_transition(shutdown);
        if !next.faulted && next.rails != Rails::default() {
            // whatever is still up dies with the capacitor
            let mut rails = next.rails;
            rails.analog = false;
            rails.digital = false;
            if rails.damaging() {
                next.faulted = true;
            }
            next.rails = Rails::default();
        }
        next
    }

    /// Board power draw in mW from the resolved output currents.
    pub fn power_consumption(&self) -> f64 {
        if !self.is_fully_on() {
            return 0.0;
        }
        let total_ma: f64 = self.channels.iter().map(|c| c.actual_current).sum::<f64>() * 1e3;
        BOARD_IDLE_MW + BOARD_MW_PER_MA * total_ma
    }

    /// One noisy meter reading of `channel`'s resolved current.
    pub fn observe_current<R: Rng + ?Sized>(&self, channel: usize, rng: &mut R) -> f64 {
        let i = self.channels[channel].actual_current;
        let sd = ((self.config.noise_cv * i).powi(2) + self.config.noise_floor_a.powi(2)).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        i + sd * z
    }

    /// One noisy photometer reading of `power_uw`.
    pub fn observe_power<R: Rng + ?Sized>(&self, power_uw: f64, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        power_uw * (1.0 + self.config.noise_cv * z)
    }
}

/// Last code at which `load` still receives the full commanded current
/// (the compliance knee), or `None` if it never saturates.
pub fn saturation_onset(config: &AsicConfig, channel: usize, load: &MicroLedModel) -> Option<u16> {
    let gain = config.channel_gain[channel];
    let mut last_ok = None;
    for code in 0..=MAX_CODE {
        let i = ideal_transfer(code, config.full_scale) * gain;
        match load.led_voltage(i) {
            Ok(v) if v <= config.v_compliance => last_ok = Some(code),
            _ => return last_ok,
        }
    }
    None
}

/// JSON-friendly view of the chip for snapshot files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub power: PowerState,
    pub codes: Vec<u16>,
    pub outputs: Vec<ResolvedOutput>,
    pub state: AsicState,
}

impl Snapshot {
    pub fn capture(state: &AsicState) -> Self {
        Snapshot {
            power: state.power(),
            codes: state.channels.iter().map(|c| c.latched_code).collect(),
            outputs: state
                .channels
                .iter()
                .map(|c| ResolvedOutput {
                    actual_current: c.actual_current,
                    output_voltage: c.output_voltage,
                    in_region: c.in_region,
                })
                .collect(),
            state: state.clone(),
        }
    }
}
