//! uLED load models and multi-shank probe layout.
//!
//! Electrically each uLED is a diode in series with a resistor,
//! `V = n_vt * ln(1 + I / i_sat) + I * r_series`. Optical output is linear in
//! current above a dead zone. All cathodes share one ground, so the driver
//! always sources current into the anode.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::least_squares;
use crate::protocol::NUM_CHANNELS;

/// Supply-limited compliance of the driver board.
pub const DEFAULT_COMPLIANCE_V: f64 = 4.6;

const BISECTION_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("open uLED: voltage is unbounded")]
    OpenCircuit,
    #[error("shorted uLED: current is unbounded")]
    ShortCircuit,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("channel {0} is out of range or mapped twice")]
    BadChannelMap(usize),
    #[error("unknown uLED id {0}")]
    UnknownLed(String),
    #[error("malformed probe file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedState {
    #[default]
    Ok,
    Open,
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroLedModel {
    /// Diode saturation current, A.
    pub i_sat: f64,
    /// Ideality factor times thermal voltage, V.
    pub n_vt: f64,
    /// Series resistance, ohm.
    pub r_series: f64,
    /// Optical slope efficiency, uW per mA.
    pub eta: f64,
    /// Current below which no light is emitted, A.
    pub i_dead: f64,
    #[serde(default)]
    pub state: LedState,
}

impl MicroLedModel {
    /// Synthetic reference uLED: 3.0 V across the junction and 2.0 V across
    /// the series resistor at 1 mA, so 5.0 V @ 1 mA overall.
    pub fn reference() -> Self {
        MicroLedModel {
            i_sat: 1e-3 / (20f64.exp() - 1.0),
            n_vt: 0.15,
            r_series: 2000.0,
            eta: 18.0,
            i_dead: 10e-6,
            state: LedState::Ok,
        }
    }

    /// Reference junction with the series resistance chosen so the I-V curve
    /// passes through `(current, voltage)`.
    pub fn through_point(current: f64, voltage: f64) -> Result<Self, ProbeError> {
        let mut m = Self::reference();
        let junction = m.n_vt * (current / m.i_sat).ln_1p();
        let r = (voltage - junction) / current;
        if !(r >= 0.0) || !r.is_finite() {
            return Err(ProbeError::InvalidParameter("operating point below the junction curve"));
        }
        m.r_series = r;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let ok = |x: f64| x.is_finite();
        if !(ok(self.i_sat) && self.i_sat > 0.0) {
            return Err(ProbeError::InvalidParameter("i_sat must be > 0"));
        }
        if !(ok(self.n_vt) && self.n_vt > 0.0) {
            return Err(ProbeError::InvalidParameter("n_vt must be > 0"));
        }
        if !(ok(self.r_series) && self.r_series >= 0.0) {
            return Err(ProbeError::InvalidParameter("r_series must be >= 0"));
        }
        if !(ok(self.eta) && self.eta >= 0.0) {
            return Err(ProbeError::InvalidParameter("eta must be >= 0"));
        }
        if !(ok(self.i_dead) && self.i_dead >= 0.0) {
            return Err(ProbeError::InvalidParameter("i_dead must be >= 0"));
        }
        Ok(())
    }

    pub fn is_ok(&self) -> bool {
        self.state == LedState::Ok
    }

    /// Forward voltage at current `i` (A).
    pub fn led_voltage(&self, i: f64) -> Result<f64, ProbeError> {
        match self.state {
            LedState::Open => Err(ProbeError::OpenCircuit),
            LedState::Short => Ok(0.0),
            LedState::Ok => Ok(self.junction_voltage(i.max(0.0)) + i.max(0.0) * self.r_series),
        }
    }

    fn junction_voltage(&self, i: f64) -> f64 {
        self.n_vt * (i / self.i_sat).ln_1p()
    }

    /// Current drawn at forward voltage `v`, by bisection on
    /// [`led_voltage`](Self::led_voltage).
    pub fn led_current(&self, v: f64) -> Result<f64, ProbeError> {
        match self.state {
            LedState::Open => return Ok(0.0),
            LedState::Short => return Err(ProbeError::ShortCircuit),
            LedState::Ok => {}
        }
        if v <= 0.0 {
            return Ok(0.0);
        }
        let forward = |i: f64| self.junction_voltage(i) + i * self.r_series;
        let mut lo = 0.0;
        let mut hi = self.i_sat.max(1e-12);
        while forward(hi) < v {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if forward(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= BISECTION_REL_TOL * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Optical power in uW at current `i` (A).
    pub fn led_power(&self, i: f64) -> f64 {
        if !self.is_ok() {
            return 0.0;
        }
        self.eta * (i - self.i_dead).max(0.0) * 1e3
    }

    pub fn make_failed(&self, kind: LedState) -> Self {
        MicroLedModel {
            state: kind,
            ..*self
        }
    }

    /// Highest current the load accepts under `compliance` volts.
    pub fn compliance_current(&self, compliance: f64) -> Result<f64, ProbeError> {
        self.led_current(compliance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvFit {
    pub i_sat: f64,
    pub n_vt: f64,
    pub r_series: f64,
    /// RMS voltage residual, V.
    pub rms_residual: f64,
}

impl IvFit {
    pub fn into_model(self, eta: f64, i_dead: f64) -> MicroLedModel {
        MicroLedModel {
            i_sat: self.i_sat,
            n_vt: self.n_vt,
            r_series: self.r_series,
            eta,
            i_dead,
            state: LedState::Ok,
        }
    }
}

/// Least-squares fit of the diode + resistor model to `(V, I)` samples,
/// minimizing squared voltage residuals.
///
/// The model is linear in `n_vt` and `r_series` for fixed `i_sat`, so the
/// search is one-dimensional over `ln(i_sat)`: a log-linear fit seeds it and
/// golden-section search refines it.
pub fn fit_iv(points: &[(f64, f64)]) -> Result<IvFit, ProbeError> {
    if points.len() < 3 {
        return Err(ProbeError::TooFewPoints(points.len()));
    }
    let mut pts = points.to_vec();
    if pts.iter().any(|&(v, i)| !(i > 0.0) || !v.is_finite() || !i.is_finite()) {
        return Err(ProbeError::FitFailure("currents must be positive".into()));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    for w in pts.windows(2) {
        if w[1].1 == w[0].1 {
            return Err(ProbeError::FitFailure("duplicate current".into()));
        }
        if w[1].0 <= w[0].0 {
            return Err(ProbeError::FitFailure("I-V samples are not monotone".into()));
        }
    }

    let volts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    // currents in mA for conditioning
    let ma: Vec<f64> = pts.iter().map(|p| p.1 * 1e3).collect();

    // V ~ a + b ln(I) + c I  <=>  i_sat = exp(-a / b) when I >> i_sat
    let seed = {
        let cols = vec![
            vec![1.0; ma.len()],
            ma.iter().map(|i| (i * 1e-3).ln()).collect::<Vec<_>>(),
            ma.clone(),
        ];
        let coef = least_squares(&cols, &volts)
            .ok_or_else(|| ProbeError::FitFailure("singular design".into()))?;
        if !(coef[1] > 0.0) {
            return Err(ProbeError::FitFailure("non-positive slope in ln(I)".into()));
        }
        -coef[0] / coef[1]
    };

    let min_ln_i = (ma[0] * 1e-3).ln();
    let profile = |ln_is: f64| -> Option<(f64, f64, f64)> {
        let is = ln_is.exp();
        let cols = vec![
            ma.iter().map(|i| (i * 1e-3 / is).ln_1p()).collect::<Vec<_>>(),
            ma.clone(),
        ];
        let coef = least_squares(&cols, &volts)?;
        let sse: f64 = ma
            .iter()
            .zip(&volts)
            .map(|(i, v)| {
                let r = coef[0] * (i * 1e-3 / is).ln_1p() + coef[1] * i - v;
                r * r
            })
            .sum();
        Some((sse, coef[0], coef[1] * 1e3))
    };
    let sse_at = |x: f64| profile(x).map(|p| p.0).unwrap_or(f64::INFINITY);

    let seed = if seed.is_finite() { seed.min(min_ln_i) } else { min_ln_i - 10.0 };
    let (mut a, mut b) = (seed - 8.0, (seed + 8.0).min(min_ln_i + 2.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (sse_at(c), sse_at(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = sse_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = sse_at(d);
        }
    }
    let ln_is = 0.5 * (a + b);
    let (sse, n_vt, r) =
        profile(ln_is).ok_or_else(|| ProbeError::FitFailure("singular design".into()))?;
    if !(n_vt > 0.0) {
        return Err(ProbeError::FitFailure("non-positive n_vt".into()));
    }
    if r < -1e-6 {
        return Err(ProbeError::FitFailure("negative series resistance".into()));
    }
    Ok(IvFit {
        i_sat: ln_is.exp(),
        n_vt,
        r_series: r.max(0.0),
        rms_residual: (sse / pts.len() as f64).sqrt(),
    })
}

/// Position of a uLED on the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LedId {
    pub shank: u8,
    pub position: u8,
}

impl LedId {
    pub fn new(shank: u8, position: u8) -> Self {
        LedId { shank, position }
    }
}

impl fmt::Display for LedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}p{}", self.shank, self.position)
    }
}

impl FromStr for LedId {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProbeError::UnknownLed(s.to_string());
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (shank, pos) = rest.split_once('p').ok_or_else(bad)?;
        Ok(LedId {
            shank: shank.parse().map_err(|_| bad())?,
            position: pos.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for LedId {
    type Error = ProbeError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LedId> for String {
    fn from(id: LedId) -> String {
        id.to_string()
    }
}

/// Knobs for the synthetic probe population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub shanks: u8,
    pub leds_per_shank: u8,
    pub compliance_v: f64,
    /// Series resistance range, ohm. The defaults put the 4.6 V compliance
    /// current between 0.6 and 0.9 mA.
    pub r_series: (f64, f64),
    /// Light output at the compliance current, uW.
    pub max_power_uw: (f64, f64),
    /// Dead-zone current range, A.
    pub i_dead: (f64, f64),
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let lo = MicroLedModel::through_point(0.9e-3, DEFAULT_COMPLIANCE_V).unwrap();
        let hi = MicroLedModel::through_point(0.6e-3, DEFAULT_COMPLIANCE_V).unwrap();
        ProbeConfig {
            shanks: 4,
            leds_per_shank: 3,
            compliance_v: DEFAULT_COMPLIANCE_V,
            r_series: (lo.r_series, hi.r_series),
            max_power_uw: (12.5, 17.0),
            i_dead: (5e-6, 20e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub shanks: u8,
    pub leds_per_shank: u8,
    pub leds: BTreeMap<LedId, MicroLedModel>,
    channel_map: BTreeMap<usize, LedId>,
}

impl ProbeModel {
    pub fn new(
        shanks: u8,
        leds_per_shank: u8,
        leds: BTreeMap<LedId, MicroLedModel>,
        channel_map: BTreeMap<usize, LedId>,
    ) -> Result<Self, ProbeError> {
        for m in leds.values() {
            m.validate()?;
        }
        let mut seen = BTreeSet::new();
        for (&ch, id) in &channel_map {
            if ch >= NUM_CHANNELS || !seen.insert(*id) {
                return Err(ProbeError::BadChannelMap(ch));
            }
            if !leds.contains_key(id) {
                return Err(ProbeError::UnknownLed(id.to_string()));
            }
        }
        Ok(ProbeModel {
            shanks,
            leds_per_shank,
            leds,
            channel_map,
        })
    }

    /// Interleaved wiring: channel `position * shanks + shank`, so uLEDs that
    /// neighbour each other on a shank sit `shanks` channels apart on the chip.
    pub fn default_channel_map(shanks: u8, leds_per_shank: u8) -> BTreeMap<usize, LedId> {
        let mut map = BTreeMap::new();
        for p in 0..leds_per_shank {
            for s in 0..shanks {
                let ch = p as usize * shanks as usize + s as usize;
                if ch < NUM_CHANNELS {
                    map.insert(ch, LedId::new(s, p));
                }
            }
        }
        map
    }

    /// Probe with every uLED identical.
    pub fn uniform(shanks: u8, leds_per_shank: u8, model: MicroLedModel) -> Self {
        let leds = (0..shanks)
            .flat_map(|s| (0..leds_per_shank).map(move |p| LedId::new(s, p)))
            .map(|id| (id, model))
            .collect();
        let map = Self::default_channel_map(shanks, leds_per_shank);
        ProbeModel::new(shanks, leds_per_shank, leds, map).expect("uniform probe is valid")
    }

    /// Seeded synthetic population. Maxima are drawn one per stratum of
    /// `max_power_uw` so the population always spans the configured range.
    pub fn synthetic<R: Rng + ?Sized>(config: &ProbeConfig, rng: &mut R) -> Result<Self, ProbeError> {
        let n = config.shanks as usize * config.leds_per_shank as usize;
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        let mut leds = BTreeMap::new();
        let (p_lo, p_hi) = config.max_power_uw;
        let mut k = 0;
        for s in 0..config.shanks {
            for p in 0..config.leds_per_shank {
                let mut m = MicroLedModel::reference();
                m.r_series = uniform(rng, config.r_series);
                m.i_dead = uniform(rng, config.i_dead);
                let u: f64 = rng.random();
                let p_max = p_lo + (p_hi - p_lo) * (strata[k] as f64 + u) / n as f64;
                let i_max = m.compliance_current(config.compliance_v)?;
                if i_max <= m.i_dead {
                    return Err(ProbeError::InvalidParameter("dead zone exceeds compliance current"));
                }
                m.eta = p_max / ((i_max - m.i_dead) * 1e3);
                leds.insert(LedId::new(s, p), m);
                k += 1;
            }
        }
        let map = Self::default_channel_map(config.shanks, config.leds_per_shank);
        ProbeModel::new(config.shanks, config.leds_per_shank, leds, map)
    }

    pub fn channel_map(&self) -> &BTreeMap<usize, LedId> {
        &self.channel_map
    }

    pub fn led_on_channel(&self, channel: usize) -> Option<LedId> {
        self.channel_map.get(&channel).copied()
    }

    pub fn channel_of(&self, led: LedId) -> Option<usize> {
        self.channel_map
            .iter()
            .find_map(|(&ch, &id)| (id == led).then_some(ch))
    }

    pub fn load(&self, channel: usize) -> Option<&MicroLedModel> {
        self.channel_map.get(&channel).and_then(|id| self.leds.get(id))
    }

    pub fn connected_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.channel_map.keys().copied()
    }

    /// Re-bind a channel to another uLED (jumpered side connectors).
    pub fn bind(&mut self, channel: usize, led: Option<LedId>) -> Result<(), ProbeError> {
        if channel >= NUM_CHANNELS {
            return Err(ProbeError::BadChannelMap(channel));
        }
        match led {
            None => {
                self.channel_map.remove(&channel);
            }
            Some(id) => {
                if !self.leds.contains_key(&id) {
                    return Err(ProbeError::UnknownLed(id.to_string()));
                }
                if self.channel_map.iter().any(|(&c, &l)| l == id && c != channel) {
                    return Err(ProbeError::BadChannelMap(channel));
                }
                self.channel_map.insert(channel, id);
            }
        }
        Ok(())
    }

    pub fn set_led(&mut self, id: LedId, model: MicroLedModel) -> Result<(), ProbeError> {
        model.validate()?;
        self.leds.insert(id, model);
        Ok(())
    }

    /// Channels whose uLEDs are direct neighbours of `channel`'s uLED on the
    /// same shank.
    pub fn probe_neighbours(&self, channel: usize) -> Vec<usize> {
        let Some(me) = self.led_on_channel(channel) else {
            return Vec::new();
        };
        self.channel_map
            .iter()
            .filter(|(_, id)| id.shank == me.shank && id.position.abs_diff(me.position) == 1)
            .map(|(&ch, _)| ch)
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, ProbeError> {
        let file: ProbeFile =
            serde_json::from_str(text).map_err(|e| ProbeError::Format(e.to_string()))?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        let file = ProbeFile {
            shanks: self.shanks,
            leds_per_shank: self.leds_per_shank,
            leds: self
                .leds
                .iter()
                .map(|(&id, &model)| LedEntry {
                    id,
                    spec: LedSpec::Model { model },
                })
                .collect(),
            channel_map: self.channel_map.clone(),
        };
        serde_json::to_string_pretty(&file).expect("probe serializes")
    }
}

impl Default for ProbeModel {
    fn default() -> Self {
        ProbeModel::uniform(4, 3, MicroLedModel::reference())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeFile {
    shanks: u8,
    leds_per_shank: u8,
    leds: Vec<LedEntry>,
    channel_map: BTreeMap<usize, LedId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedEntry {
    id: LedId,
    #[serde(flatten)]
    spec: LedSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum LedSpec {
    Model {
        model: MicroLedModel,
    },
    /// Raw `(V, I)` samples to be fitted.
    FitPoints {
        fit_points: Vec<(f64, f64)>,
        eta: f64,
        #[serde(default)]
        i_dead: f64,
        #[serde(default)]
        state: LedState,
    },
}

impl ProbeFile {
    fn into_model(self) -> Result<ProbeModel, ProbeError> {
        let mut leds = BTreeMap::new();
        for entry in self.leds {
            let model = match entry.spec {
                LedSpec::Model { model } => model,
                LedSpec::FitPoints {
                    fit_points,
                    eta,
                    i_dead,
                    state,
                } => fit_iv(&fit_points)?.into_model(eta, i_dead).make_failed(state),
            };
            leds.insert(entry.id, model);
        }
        ProbeModel::new(self.shanks, self.leds_per_shank, leds, self.channel_map)
    }
}
