//! Browser demo: each export runs one emulator scenario and returns JSON for
//! the page to plot. The plain functions carry the logic so they can be
//! tested natively; the `#[wasm_bindgen]` wrappers only serialize.

use optodrive::asic::{saturation_onset, AsicConfig, AsicState};
use optodrive::calibration::{build_table, calibrated_response, linearity, measure_ip_curves, CalibrationOptions, Phase};
use optodrive::probe::{MicroLedModel, ProbeConfig, ProbeModel, DEFAULT_COMPLIANCE_V};
use optodrive::protocol::{encode, MAX_CODE, NUM_CHANNELS, SLOT_PERIOD_US};
use optodrive::seed::{stream_rng, Stream};
use optodrive::sequencer::{compile, simulate, steps_per_cycle, CompileOptions, StimEvent, StimScript, Waveform};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Codes plotted on the I-V sweep.
const IV_STEP: u16 = 4;

#[derive(Debug, Serialize)]
pub struct IvPoint {
    pub code: u16,
    pub commanded_ma: f64,
    pub actual_ma: f64,
    pub voltage_v: f64,
    pub in_region: bool,
}

#[derive(Debug, Serialize)]
pub struct IvCurve {
    pub compliance_v: f64,
    pub compliance_ma: f64,
    /// Last code that still delivers its full current.
    pub onset_code: Option<u16>,
    pub points: Vec<IvPoint>,
}

/// Drive one uLED that reaches the compliance voltage at `compliance_ma`
/// through every code.
pub fn iv_curve_data(compliance_ma: f64) -> Result<IvCurve, String> {
    let load = MicroLedModel::through_point(compliance_ma * 1e-3, DEFAULT_COMPLIANCE_V).map_err(|e| e.to_string())?;
    let probe = ProbeModel::uniform(1, 1, load);
    let load = probe.load(0).ok_or("probe has no channel 0")?;
    let mut asic = AsicState::powered(AsicConfig::default()).map_err(|e| e.to_string())?;
    let codes = (0..=MAX_CODE).step_by(IV_STEP as usize).chain(std::iter::once(MAX_CODE));
    let mut points = Vec::new();
    for code in codes {
        asic.apply_frame_mut(encode(0, code).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let out = asic.resolve_output(0, load).map_err(|e| e.to_string())?;
        points.push(IvPoint {
            code,
            commanded_ma: asic.ideal_current(code).map_err(|e| e.to_string())? * 1e3,
            actual_ma: out.actual_current * 1e3,
            voltage_v: out.output_voltage,
            in_region: out.in_region,
        });
    }
    Ok(IvCurve {
        compliance_v: asic.config.v_compliance,
        compliance_ma,
        onset_code: saturation_onset(&asic.config, 0, load),
        points,
    })
}

#[derive(Debug, Serialize)]
pub struct CalibrationView {
    pub channel: usize,
    pub live_channels: Vec<usize>,
    pub target_uw: f64,
    pub lsb_uw: f64,
    /// Measured light output at each raw code.
    pub pre_uw: Vec<f64>,
    /// Measured light output at each table row's code.
    pub post_uw: Vec<f64>,
    pub pre_max_inl: f64,
    pub post_max_inl: f64,
    pub post_max_dnl: f64,
}

/// Calibrate a synthetic probe drawn from `seed` and show one channel
/// before and after the table.
pub fn calibration_data(seed: u64, reps: usize, channel: usize) -> Result<CalibrationView, String> {
    let probe = ProbeModel::synthetic(&ProbeConfig::default(), &mut stream_rng(seed, Stream::ProbeVariability, 0))
        .map_err(|e| e.to_string())?;
    let asic = AsicState::powered(AsicConfig::default()).map_err(|e| e.to_string())?;
    let curves = measure_ip_curves(&asic, &probe, reps, seed).map_err(|e| e.to_string())?;
    let table = build_table(&curves, &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let live_channels: Vec<usize> = curves.iter().filter(|c| !c.dead).map(|c| c.channel).collect();
    let curve = curves
        .iter()
        .find(|c| c.channel == channel && !c.dead)
        .ok_or_else(|| format!("channel {channel} has no live uLED"))?;
    let lsb = table.lsb();
    let pre_uw = curve.powers();
    let post_uw = calibrated_response(&table, curve);
    let pre = linearity(channel, Phase::Pre, &pre_uw, lsb).map_err(|e| e.to_string())?;
    let post = linearity(channel, Phase::Post, &post_uw, lsb).map_err(|e| e.to_string())?;
    Ok(CalibrationView {
        channel,
        live_channels,
        target_uw: table.target_max_power(),
        lsb_uw: lsb,
        pre_max_inl: pre.max_abs_inl(),
        post_max_inl: post.max_abs_inl(),
        post_max_dnl: post.max_abs_dnl(),
        pre_uw,
        post_uw,
    })
}

#[derive(Debug, Serialize)]
pub struct ZohView {
    pub active_channels: usize,
    pub refresh_us: f64,
    pub freq_hz: f64,
    pub peak_uw: f64,
    /// Held output of channel 0 as `(start_us, power_uw)` steps.
    pub steps: Vec<(f64, f64)>,
    pub steps_per_cycle: Vec<usize>,
    pub end_us: f64,
}

/// Play the same sinusoid on `active` channels and return the held output
/// of the first one.
pub fn zoh_data(active: usize, freq_hz: f64, peak_uw: f64, cycles: usize) -> Result<ZohView, String> {
    if active == 0 || active > NUM_CHANNELS {
        return Err(format!("active channels must be 1 to {NUM_CHANNELS}"));
    }
    // 4 shanks of 8 fill all 32 channels with identical uLEDs
    let probe = ProbeModel::uniform(4, 8, MicroLedModel::reference());
    let config = AsicConfig {
        noise_cv: 0.0,
        noise_floor_a: 0.0,
        ..AsicConfig::default()
    };
    let asic = AsicState::powered(config).map_err(|e| e.to_string())?;
    let curves = measure_ip_curves(&asic, &probe, 1, 0).map_err(|e| e.to_string())?;
    let table = build_table(&curves, &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let duration_us = cycles as f64 * 1e6 / freq_hz;
    let events: Vec<StimEvent> = (0..active)
        .map(|channel| StimEvent {
            channel,
            waveform: Waveform::Sinusoid { freq_hz, peak_uw },
            start_us: 0.0,
            duration_us,
        })
        .collect();
    let script = StimScript { events };
    let stream = compile(&script, &table, &CompileOptions::default()).map_err(|e| e.to_string())?;
    let trace = simulate(&stream, &asic, &probe).map_err(|e| e.to_string())?;
    Ok(ZohView {
        active_channels: active,
        refresh_us: active as f64 * SLOT_PERIOD_US,
        freq_hz,
        peak_uw,
        steps: trace.power_steps(0),
        steps_per_cycle: steps_per_cycle(&trace, &script.events[0]),
        end_us: trace.end_slot as f64 * SLOT_PERIOD_US,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn iv_curve(compliance_ma: f64) -> Result<String, JsError> {
    to_js(iv_curve_data(compliance_ma))
}

#[wasm_bindgen]
pub fn calibration(seed: u32, reps: u32, channel: u32) -> Result<String, JsError> {
    to_js(calibration_data(seed as u64, reps as usize, channel as usize))
}

#[wasm_bindgen]
pub fn zoh_trace(active: u32, freq_hz: f64, peak_uw: f64, cycles: u32) -> Result<String, JsError> {
    to_js(zoh_data(active as usize, freq_hz, peak_uw, cycles as usize))
}
