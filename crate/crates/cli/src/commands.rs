//! Subcommand implementations. Each reads its inputs, runs one stage and
//! writes its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use optodrive::asic::{AsicConfig, AsicState, PowerEvent, PowerState, Snapshot};
use optodrive::calibration::{
    build_table, calibrated_response, ip_curves_to_csv, linearity, measure_ip_curves, CalibrationOptions,
    CalibrationTable, ChannelStatus, LinearityReport, Phase,
};
use optodrive::experiment::{
    psth_peak_order, run_sequence, score_sequence, sequence_order, shuffle_spikes, synthetic_neurons,
    ExperimentRun, NeuronModel, SequenceResult, SpikeTrains,
};
use optodrive::probe::{ProbeConfig, ProbeModel};
use optodrive::protocol::{
    commands_from_csv, commands_to_csv, decode_frame, encode_command, frames_from_hex, frames_to_hex, NUM_CHANNELS,
    SLOT_PERIOD_US,
};
use optodrive::seed::{stream_rng, Stream};
use optodrive::sequencer::{
    compile as compile_script, simulate as simulate_stream, steps_per_cycle, CommandStream, CompileOptions,
    SequenceMeta, SequenceSpec, StimScript, Trace,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Readings per code when a command has to calibrate on its own.
const DEFAULT_REPS: usize = 9;
/// PSTH bin used for peak ordering.
const PEAK_BIN_MS: f64 = 5.0;

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub probe: ProbeModel,
}

impl Context {
    pub fn new(seed: u64, out: PathBuf, probe: Option<PathBuf>) -> Result<Self, CliError> {
        let probe = match probe {
            Some(path) => ProbeModel::from_json(&read(&path)?).map_err(|e| CliError::from(e).context(path.display()))?,
            None => ProbeModel::synthetic(
                &ProbeConfig::default(),
                &mut stream_rng(seed, Stream::ProbeVariability, 0),
            )?,
        };
        Ok(Context { seed, out, probe })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn encode(ctx: &Context, input: &Path) -> Result<(), CliError> {
    let cmds = commands_from_csv(&read(input)?).map_err(|e| CliError::from(e).context(input.display()))?;
    let frames: Vec<_> = cmds.into_iter().map(encode_command).collect();
    ctx.write("frames.hex", &frames_to_hex(&frames))?;
    Ok(())
}

pub fn decode(ctx: &Context, input: &Path) -> Result<(), CliError> {
    let frames = frames_from_hex(&read(input)?).map_err(|e| CliError::from(e).context(input.display()))?;
    let cmds: Vec<_> = frames.into_iter().map(decode_frame).collect();
    ctx.write("commands.csv", &commands_to_csv(&cmds))?;
    Ok(())
}

pub struct CalibrateOptions {
    pub reps: usize,
    pub granularity_uw: f64,
    pub noise_cv: Option<f64>,
    pub noise_floor_a: Option<f64>,
}

#[derive(Serialize)]
struct LinearityFile {
    target_max_power_uw: f64,
    lsb_uw: f64,
    channels: Vec<ChannelLinearity>,
}

#[derive(Serialize)]
struct ChannelLinearity {
    channel: usize,
    max_abs_dnl_pre: f64,
    max_abs_inl_pre: f64,
    max_abs_dnl_post: f64,
    max_abs_inl_post: f64,
    pre: LinearityReport,
    post: LinearityReport,
}

pub fn calibrate(ctx: &Context, opts: &CalibrateOptions) -> Result<(), CliError> {
    let defaults = AsicConfig::default();
    let config = AsicConfig {
        noise_cv: opts.noise_cv.unwrap_or(defaults.noise_cv),
        noise_floor_a: opts.noise_floor_a.unwrap_or(defaults.noise_floor_a),
        ..defaults
    };
    let asic = AsicState::powered(config)?;
    let curves = measure_ip_curves(&asic, &ctx.probe, opts.reps, ctx.seed)?;
    let table = build_table(
        &curves,
        &CalibrationOptions {
            granularity_uw: opts.granularity_uw,
        },
    )?;
    let lsb = table.lsb();
    let mut channels = Vec::new();
    for c in curves.iter().filter(|c| !c.dead) {
        let pre = linearity(c.channel, Phase::Pre, &c.powers(), lsb)?;
        let post = linearity(c.channel, Phase::Post, &calibrated_response(&table, c), lsb)?;
        channels.push(ChannelLinearity {
            channel: c.channel,
            max_abs_dnl_pre: pre.max_abs_dnl(),
            max_abs_inl_pre: pre.max_abs_inl(),
            max_abs_dnl_post: post.max_abs_dnl(),
            max_abs_inl_post: post.max_abs_inl(),
            pre,
            post,
        });
    }
    ctx.write("probe.json", &ctx.probe.to_json())?;
    ctx.write("ip_curves.csv", &ip_curves_to_csv(&curves))?;
    ctx.write("table.csv", &table.to_csv())?;
    ctx.write_json(
        "linearity.json",
        &LinearityFile {
            target_max_power_uw: table.target_max_power(),
            lsb_uw: lsb,
            channels,
        },
    )?;
    let dead: Vec<usize> = (0..NUM_CHANNELS).filter(|&c| table.status(c) == ChannelStatus::Dead).collect();
    println!(
        "target {} uW, lsb {:.4} nW, dead channels {:?}",
        table.target_max_power(),
        lsb * 1e3,
        dead
    );
    Ok(())
}

/// A table must come from a probe with the same live channels.
fn check_table(table: &CalibrationTable, probe: &ProbeModel) -> Result<(), CliError> {
    for ch in 0..NUM_CHANNELS {
        let connected = probe.load(ch).is_some();
        let listed = table.status(ch) != ChannelStatus::Unconnected;
        if connected != listed {
            return Err(CliError::Data(format!(
                "calibration table does not match the probe on channel {ch}"
            )));
        }
    }
    Ok(())
}

fn load_table(ctx: &Context, path: Option<&Path>) -> Result<CalibrationTable, CliError> {
    let table = match path {
        Some(p) => CalibrationTable::from_csv(&read(p)?).map_err(|e| CliError::from(e).context(p.display()))?,
        None => {
            let asic = AsicState::powered(AsicConfig::default())?;
            let curves = measure_ip_curves(&asic, &ctx.probe, DEFAULT_REPS, ctx.seed)?;
            build_table(&curves, &CalibrationOptions::default())?
        }
    };
    check_table(&table, &ctx.probe)?;
    Ok(table)
}

pub fn compile(ctx: &Context, script: &Path, table: &Path) -> Result<(), CliError> {
    let s: StimScript = read_json(script)?;
    let table = CalibrationTable::from_csv(&read(table)?).map_err(|e| CliError::from(e).context(table.display()))?;
    let stream = compile_script(&s, &table, &CompileOptions::default())?;
    ctx.write("stream.csv", &stream.to_csv())?;
    println!("{} frames over {} slots", stream.items.len(), stream.items.last().map_or(0, |i| i.slot + 1));
    Ok(())
}

pub fn simulate(ctx: &Context, stream: &Path) -> Result<(), CliError> {
    let s = CommandStream::from_csv(&read(stream)?, SLOT_PERIOD_US)
        .map_err(|e| CliError::from(e).context(stream.display()))?;
    let asic = AsicState::powered(AsicConfig::default())?;
    let trace = simulate_stream(&s, &asic, &ctx.probe)?;
    ctx.write("trace.csv", &trace.to_csv())?;
    Ok(())
}

pub fn asic_step(
    ctx: &Context,
    state: Option<&Path>,
    power_up: Option<bool>,
    events: Option<&Path>,
    frames: Option<&Path>,
) -> Result<(), CliError> {
    let mut asic = match state {
        Some(p) => read_json::<Snapshot>(p)?.state,
        None => AsicState::new(AsicConfig::default())?,
    };
    let events: Vec<PowerEvent> = match (power_up, events) {
        (Some(true), _) => PowerEvent::power_up(0.0),
        (Some(false), _) => PowerEvent::power_down(0.0),
        (None, Some(p)) => read_json(p)?,
        (None, None) => Vec::new(),
    };
    asic = asic.power_transition(&events);
    let mut result = Ok(());
    if let Some(p) = frames {
        let frames = frames_from_hex(&read(p)?).map_err(|e| CliError::from(e).context(p.display()))?;
        for f in frames {
            if let Err(e) = asic.apply_frame_mut(f) {
                result = Err(CliError::from(e).context(format!("frame {f:04x}")));
                break;
            }
        }
    }
    if asic.is_fully_on() {
        asic.resolve_all(&ctx.probe)?;
    }
    ctx.write_json("snapshot.json", &Snapshot::capture(&asic))?;
    println!("power state {:?}, {:.3} mW", asic.power(), asic.power_consumption());
    if asic.power() == PowerState::Faulted {
        return Err(CliError::Hardware("chip is permanently faulted".into()));
    }
    result
}

fn default_neurons() -> usize {
    7
}

/// One or more sequences shown to the same synthetic units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub sequences: Vec<SequenceSpec>,
    /// Explicit units; otherwise `n_neurons` spread over the first sequence.
    #[serde(default)]
    pub neurons: Option<Vec<NeuronModel>>,
    #[serde(default = "default_neurons")]
    pub n_neurons: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub meta: SequenceMeta,
    pub n_trials: usize,
    pub window_ms: (f64, f64),
    pub spikes: String,
    pub stream: String,
    pub trace: String,
    pub population_regime: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub seed: u64,
    pub neurons: Vec<NeuronModel>,
    pub sequences: Vec<SequenceRecord>,
}

pub fn experiment_run(ctx: &Context, plan: &Path, table: Option<&Path>) -> Result<ExperimentRecord, CliError> {
    let plan: ExperimentPlan = read_json(plan)?;
    let table = load_table(ctx, table)?;
    run_plan(ctx, &plan, &table)
}

fn run_plan(ctx: &Context, plan: &ExperimentPlan, table: &CalibrationTable) -> Result<ExperimentRecord, CliError> {
    let first = plan
        .sequences
        .first()
        .ok_or_else(|| CliError::Data("experiment plan has no sequences".into()))?;
    let neurons = plan
        .neurons
        .clone()
        .unwrap_or_else(|| synthetic_neurons(&first.leds, plan.n_neurons));
    let asic = AsicState::powered(AsicConfig::default())?;
    let mut sequences = Vec::new();
    for (k, spec) in plan.sequences.iter().enumerate() {
        let run = run_sequence(spec, &neurons, &ctx.probe, table, &asic, ctx.seed.wrapping_add(k as u64))
            .map_err(|e| CliError::from(e).context(format!("sequence {k}")))?;
        let names = [
            format!("seq{k}_stream.csv"),
            format!("seq{k}_trace.csv"),
            format!("seq{k}_spikes.csv"),
        ];
        ctx.write(&names[0], &run.trial_stream.to_csv())?;
        ctx.write(&names[1], &run.trial_trace.to_csv())?;
        ctx.write(&names[2], &run.spikes.to_csv())?;
        let [stream, trace, spikes] = names;
        sequences.push(SequenceRecord {
            n_trials: run.spikes.n_trials,
            window_ms: ExperimentRun::window_ms(run.meta.pattern_ms),
            meta: run.meta,
            spikes,
            stream,
            trace,
            population_regime: run.spikes.population_regime,
        });
    }
    let record = ExperimentRecord {
        seed: ctx.seed,
        neurons,
        sequences,
    };
    ctx.write_json("experiment.json", &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceScore {
    pub sequence: usize,
    pub shuffled: bool,
    #[serde(flatten)]
    pub result: SequenceResult,
    /// Units sorted by the peak of their trial-averaged response.
    pub peak_order: Vec<u32>,
    /// Units sorted by their uLED's place in the sequence.
    pub sequence_order: Vec<u32>,
    pub order_matches: bool,
}

pub fn experiment_score(ctx: &Context, record: &Path, shuffle: bool) -> Result<Vec<SequenceScore>, CliError> {
    let rec: ExperimentRecord = read_json(record)?;
    let dir = record.parent().unwrap_or(Path::new("."));
    let ids: Vec<u32> = rec.neurons.iter().map(|n| n.id).collect();
    let mut scores = Vec::new();
    for (k, s) in rec.sequences.iter().enumerate() {
        let path = dir.join(&s.spikes);
        let mut trains = SpikeTrains::from_csv(&read(&path)?, &ids, s.n_trials, s.window_ms)
            .map_err(|e| CliError::from(e).context(path.display()))?;
        if shuffle {
            trains = shuffle_spikes(&trains, ctx.seed.wrapping_add(k as u64));
        }
        scores.push(score_one(k, shuffle, &trains, &s.meta, &rec.neurons)?);
    }
    let name = if shuffle { "result_shuffled.json" } else { "result.json" };
    ctx.write_json(name, &scores)?;
    for s in &scores {
        println!(
            "sequence {}: median rho {:.3}, W {}, p {:.3e}, excluded {}, peak order matches {}",
            s.sequence,
            s.result.median_rho,
            s.result.w_plus,
            s.result.p_value,
            s.result.excluded(),
            s.order_matches
        );
    }
    Ok(scores)
}

fn score_one(
    k: usize,
    shuffled: bool,
    trains: &SpikeTrains,
    meta: &SequenceMeta,
    neurons: &[NeuronModel],
) -> Result<SequenceScore, CliError> {
    let result = score_sequence(trains, meta, neurons).map_err(|e| CliError::from(e).context(format!("sequence {k}")))?;
    let mut peaks = psth_peak_order(trains, meta, neurons, PEAK_BIN_MS)?;
    peaks.sort_by_key(|&(id, bin)| (bin, id));
    let peak_order: Vec<u32> = peaks.into_iter().map(|p| p.0).collect();
    let sequence_order: Vec<u32> = sequence_order(neurons, meta)?.into_iter().map(|(_, n)| n.id).collect();
    Ok(SequenceScore {
        sequence: k,
        shuffled,
        result,
        order_matches: peak_order == sequence_order,
        peak_order,
        sequence_order,
    })
}

/// Pipeline input: a plain stimulus script or an experiment plan.
enum PipelineInput {
    Plan(ExperimentPlan),
    Script(StimScript),
}

impl PipelineInput {
    /// A plan is recognised by its `sequences` key.
    fn read(path: &Path) -> Result<Self, CliError> {
        let value: serde_json::Value = read_json(path)?;
        let parsed = if value.get("sequences").is_some() {
            serde_json::from_value(value).map(PipelineInput::Plan)
        } else {
            serde_json::from_value(value).map(PipelineInput::Script)
        };
        parsed.map_err(|e| CliError::from(e).context(path.display()))
    }
}

#[derive(Debug, Serialize)]
struct ChannelStats {
    channel: usize,
    updates: usize,
    /// Output steps in each full cycle of the channel's sinusoid events.
    steps_per_cycle: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct ScriptStats {
    frames: usize,
    slots: u64,
    channels: Vec<ChannelStats>,
}

pub fn pipeline(ctx: &Context, script: &Path, table: Option<&Path>) -> Result<(), CliError> {
    let input = PipelineInput::read(script)?;
    let table = load_table(ctx, table).map_err(|e| e.context("calibrate"))?;
    match input {
        PipelineInput::Script(s) => {
            let stream = compile_script(&s, &table, &CompileOptions::default()).map_err(|e| CliError::from(e).context("compile"))?;
            ctx.write("stream.csv", &stream.to_csv())?;
            let asic = AsicState::powered(AsicConfig::default())?;
            let trace: Trace =
                simulate_stream(&stream, &asic, &ctx.probe).map_err(|e| CliError::from(e).context("simulate"))?;
            ctx.write("trace.csv", &trace.to_csv())?;
            let channels = trace
                .channels
                .iter()
                .map(|(&ch, pts)| ChannelStats {
                    channel: ch,
                    updates: pts.len(),
                    steps_per_cycle: s
                        .events
                        .iter()
                        .filter(|e| e.channel == ch)
                        .flat_map(|e| steps_per_cycle(&trace, e))
                        .collect(),
                })
                .collect();
            ctx.write_json(
                "stats.json",
                &ScriptStats {
                    frames: stream.items.len(),
                    slots: trace.end_slot,
                    channels,
                },
            )?;
        }
        PipelineInput::Plan(plan) => {
            let record = run_plan(ctx, &plan, &table).map_err(|e| e.context("generate"))?;
            let scores = record
                .sequences
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let path = ctx.out.join(&s.spikes);
                    let ids: Vec<u32> = record.neurons.iter().map(|n| n.id).collect();
                    let trains = SpikeTrains::from_csv(&read(&path)?, &ids, s.n_trials, s.window_ms)?;
                    score_one(k, false, &trains, &s.meta, &record.neurons)
                })
                .collect::<Result<Vec<_>, CliError>>()
                .map_err(|e| e.context("score"))?;
            for s in &scores {
                println!(
                    "sequence {}: median rho {:.3}, p {:.3e}, peak order matches {}",
                    s.sequence, s.result.median_rho, s.result.p_value, s.order_matches
                );
            }
            ctx.write_json("stats.json", &scores)?;
        }
    }
    Ok(())
}
