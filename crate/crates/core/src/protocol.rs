//! 16-bit random-access command protocol.
//!
//! Every command addresses one channel and carries a 10-bit DAC code. The
//! word layout is `[15:11]` address, `[10:1]` value, `[0]` don't-care, sent
//! MSB first. Two timing modes share the same latch: standard SPI wastes one
//! clock cycle per frame while CE is high, the modified mode keeps the clock
//! running and packs frames back to back.

use std::fmt;

use thiserror::Error;

pub const NUM_CHANNELS: usize = 32;
pub const CODE_LEVELS: u16 = 1024;
pub const MAX_CODE: u16 = CODE_LEVELS - 1;
pub const FRAME_BITS: usize = 16;

/// Commands per second the emulated link sustains.
pub const COMMAND_RATE_HZ: f64 = 160_000.0;
/// One command slot at [`COMMAND_RATE_HZ`], in microseconds.
pub const SLOT_PERIOD_US: f64 = 1e6 / COMMAND_RATE_HZ;

const ADDRESS_SHIFT: u32 = 11;
const VALUE_SHIFT: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid command: address {address} (max 31), value {value} (max 1023)")]
    InvalidCommand { address: u16, value: u16 },
    #[error("framing error in frame {frame_index}: {bits} data bits before CE rise")]
    Framing {
        frame_index: usize,
        bits: usize,
        /// Frames fully latched before the malformed one.
        latched: Vec<Command>,
    },
    #[error("empty command sequence")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Command {
    address: u8,
    value: u16,
}

impl Command {
    pub fn new(address: u16, value: u16) -> Result<Self, ProtocolError> {
        if address as usize >= NUM_CHANNELS || value > MAX_CODE {
            return Err(ProtocolError::InvalidCommand { address, value });
        }
        Ok(Command {
            address: address as u8,
            value,
        })
    }

    pub fn address(&self) -> usize {
        self.address as usize
    }

    pub fn value(&self) -> u16 {
        self.value
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}={}", self.address, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame(pub u16);

impl Frame {
    pub fn word(self) -> u16 {
        self.0
    }

    /// Bits in transmission order (MSB first).
    pub fn bits(self) -> impl Iterator<Item = bool> {
        (0..FRAME_BITS).rev().map(move |i| (self.0 >> i) & 1 == 1)
    }
}

impl fmt::LowerHex for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04x}", self.0)
    }
}

impl fmt::UpperHex for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X}", self.0)
    }
}

pub fn encode_command(cmd: Command) -> Frame {
    Frame(((cmd.address as u16) << ADDRESS_SHIFT) | (cmd.value << VALUE_SHIFT))
}

/// Checked encode from raw fields.
pub fn encode(address: u16, value: u16) -> Result<Frame, ProtocolError> {
    Command::new(address, value).map(encode_command)
}

pub fn decode_frame(frame: Frame) -> Command {
    Command {
        address: (frame.0 >> ADDRESS_SHIFT) as u8,
        value: (frame.0 >> VALUE_SHIFT) & MAX_CODE,
    }
}

/// Hex dump: one 4-digit word per line.
pub fn frames_to_hex(frames: &[Frame]) -> String {
    frames.iter().map(|f| format!("{f:04x}\n")).collect()
}

/// Parse a hex dump. Blank lines are skipped.
pub fn frames_from_hex(text: &str) -> Result<Vec<Frame>, ProtocolError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let w = l.trim();
            if w.len() != 4 || !w.chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(ProtocolError::Parse {
                    line: i + 1,
                    msg: format!("expected 4 hex digits, found {w:?}"),
                });
            }
            Ok(Frame(u16::from_str_radix(w, 16).expect("checked digits")))
        })
        .collect()
}

/// Command CSV with header `address,value`. No commands, no output.
pub fn commands_to_csv(cmds: &[Command]) -> String {
    if cmds.is_empty() {
        return String::new();
    }
    let mut out = String::from("address,value\n");
    for c in cmds {
        out.push_str(&format!("{},{}\n", c.address, c.value));
    }
    out
}

pub fn commands_from_csv(text: &str) -> Result<Vec<Command>, ProtocolError> {
    let mut cmds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || (i == 0 && l == "address,value") {
            continue;
        }
        let bad = |msg: String| ProtocolError::Parse { line: i + 1, msg };
        let (a, v) = l
            .split_once(',')
            .ok_or_else(|| bad("expected address,value".into()))?;
        let a: u16 = a.trim().parse().map_err(|_| bad(format!("bad address {a:?}")))?;
        let v: u16 = v.trim().parse().map_err(|_| bad(format!("bad value {v:?}")))?;
        cmds.push(Command::new(a, v).map_err(|e| bad(e.to_string()))?);
    }
    Ok(cmds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpiMode {
    Standard,
    Modified,
}

impl SpiMode {
    pub fn cycles_per_frame(self) -> usize {
        match self {
            SpiMode::Standard => FRAME_BITS + 1,
            SpiMode::Modified => FRAME_BITS,
        }
    }

    /// Serial clock needed to sustain `commands_per_sec`.
    pub fn clock_hz(self, commands_per_sec: f64) -> f64 {
        commands_per_sec * self.cycles_per_frame() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Rise,
    Fall,
}

/// A CE transition at a clock-cycle boundary. `cycle` is the index of the
/// first cycle after the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CeEdge {
    pub cycle: usize,
    pub edge: Edge,
}

/// Data-line levels per clock cycle plus CE edges, in clock-cycle units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitStream {
    pub bits: Vec<bool>,
    pub ce_edges: Vec<CeEdge>,
    pub mode: SpiMode,
}

impl BitStream {
    pub fn cycles(&self) -> usize {
        self.bits.len()
    }

    /// Cut the stream after `cycles` clock cycles, dropping later CE edges.
    pub fn truncated(&self, cycles: usize) -> BitStream {
        let cycles = cycles.min(self.bits.len());
        BitStream {
            bits: self.bits[..cycles].to_vec(),
            ce_edges: self
                .ce_edges
                .iter()
                .copied()
                .filter(|e| e.cycle <= cycles)
                .collect(),
            mode: self.mode,
        }
    }
}

/// Total clock cycles for `n` frames in `mode`.
pub fn stream_cycles(n: usize, mode: SpiMode) -> usize {
    n * mode.cycles_per_frame()
}

pub fn serialize(cmds: &[Command], mode: SpiMode) -> Result<BitStream, ProtocolError> {
    if cmds.is_empty() {
        return Err(ProtocolError::Empty);
    }
    let per_frame = mode.cycles_per_frame();
    let mut bits = Vec::with_capacity(cmds.len() * per_frame);
    let mut ce_edges = Vec::with_capacity(cmds.len() * 2);
    for cmd in cmds {
        let start = bits.len();
        ce_edges.push(CeEdge {
            cycle: start,
            edge: Edge::Fall,
        });
        bits.extend(encode_command(*cmd).bits());
        ce_edges.push(CeEdge {
            cycle: start + FRAME_BITS,
            edge: Edge::Rise,
        });
        if mode == SpiMode::Standard {
            // idle cycle with CE high
            bits.push(false);
        }
    }
    Ok(BitStream {
        bits,
        ce_edges,
        mode,
    })
}

/// Replays a bit stream through the shift register and latch. Data is
/// shifted only while CE is low; the latch fires on CE rise and never on
/// CE fall.
pub fn deserialize(stream: &BitStream) -> Result<Vec<Command>, ProtocolError> {
    let mut out = Vec::new();
    let mut ce_low = false;
    let mut shift: u16 = 0;
    let mut shifted = 0usize;
    let mut edges = stream.ce_edges.iter().peekable();

    let mut fire_edges = |cycle: usize,
                          ce_low: &mut bool,
                          shift: &mut u16,
                          shifted: &mut usize,
                          out: &mut Vec<Command>|
     -> Result<(), ProtocolError> {
        while let Some(e) = edges.next_if(|e| e.cycle <= cycle) {
            match e.edge {
                Edge::Fall => {
                    *ce_low = true;
                    *shifted = 0;
                }
                Edge::Rise => {
                    if *ce_low {
                        if *shifted < FRAME_BITS {
                            return Err(ProtocolError::Framing {
                                frame_index: out.len(),
                                bits: *shifted,
                                latched: out.clone(),
                            });
                        }
                        out.push(decode_frame(Frame(*shift)));
                    }
                    *ce_low = false;
                    *shifted = 0;
                }
            }
        }
        Ok(())
    };

    for (cycle, &bit) in stream.bits.iter().enumerate() {
        fire_edges(cycle, &mut ce_low, &mut shift, &mut shifted, &mut out)?;
        if ce_low {
            shift = (shift << 1) | bit as u16;
            shifted += 1;
        }
    }
    fire_edges(
        stream.bits.len(),
        &mut ce_low,
        &mut shift,
        &mut shifted,
        &mut out,
    )?;
    if ce_low && shifted > 0 {
        return Err(ProtocolError::Framing {
            frame_index: out.len(),
            bits: shifted,
            latched: out,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_and_csv_files() {
        let cmds = vec![Command::new(3, 512).unwrap(), Command::new(31, 1023).unwrap()];
        let frames: Vec<Frame> = cmds.iter().map(|&c| encode_command(c)).collect();
        let hex = frames_to_hex(&frames);
        assert_eq!(hex, "1c00\nfffe\n");
        assert_eq!(frames_from_hex(&hex).unwrap(), frames);
        assert_eq!(commands_from_csv(&commands_to_csv(&cmds)).unwrap(), cmds);
        assert_eq!(frames_from_hex("").unwrap(), vec![]);
        assert_eq!(commands_to_csv(&[]), "");
        assert_eq!(
            frames_from_hex("1c00\n\nzz12\n"),
            Err(ProtocolError::Parse {
                line: 3,
                msg: "expected 4 hex digits, found \"zz12\"".into()
            })
        );
        assert!(matches!(
            commands_from_csv("address,value\n40,1\n"),
            Err(ProtocolError::Parse { line: 2, .. })
        ));
    }

    fn cmd(a: u16, v: u16) -> Command {
        Command::new(a, v).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_command(cmd(0, 0)), Frame(0x0000));
        assert_eq!(encode_command(cmd(31, 1023)), Frame(0xFFFE));
        assert_eq!(encode_command(cmd(5, 300)), Frame(0x2A58));
    }

    #[test]
    fn encode_matches_bit_concatenation() {
        // address bits, then value bits, then a zero: as a string of digits
        for (a, v) in [(5u16, 300u16), (17, 1), (1, 512), (30, 999)] {
            let s = format!("{:05b}{:010b}0", a, v);
            let word = u16::from_str_radix(&s, 2).unwrap();
            assert_eq!(encode(a, v).unwrap(), Frame(word));
        }
    }

    #[test]
    fn invalid_commands_rejected() {
        assert!(matches!(
            Command::new(32, 0),
            Err(ProtocolError::InvalidCommand { .. })
        ));
        assert!(matches!(
            Command::new(0, 1024),
            Err(ProtocolError::InvalidCommand { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_frame(Frame(0x0000)), cmd(0, 0));
        assert_eq!(decode_frame(Frame(0xFFFF)), cmd(31, 1023));
        assert_eq!(decode_frame(Frame(0x2A58)), cmd(5, 300));
    }

    #[test]
    fn exhaustive_round_trip_and_dont_care() {
        for a in 0..32 {
            for v in 0..1024 {
                let c = cmd(a, v);
                let f = encode_command(c);
                assert_eq!(f.0 & 1, 0);
                assert_eq!(decode_frame(f), c);
                assert_eq!(decode_frame(Frame(f.0 ^ 1)), c);
            }
        }
    }

    #[test]
    fn stream_lengths() {
        let one = [cmd(3, 7)];
        assert_eq!(serialize(&one, SpiMode::Modified).unwrap().cycles(), 16);
        assert_eq!(serialize(&one, SpiMode::Standard).unwrap().cycles(), 17);
        let many: Vec<_> = (0..40).map(|i| cmd(i % 32, i * 7)).collect();
        assert_eq!(
            serialize(&many, SpiMode::Modified).unwrap().cycles(),
            16 * 40
        );
        assert_eq!(serialize(&[], SpiMode::Modified), Err(ProtocolError::Empty));
    }

    #[test]
    fn clock_for_full_rate() {
        assert_eq!(SLOT_PERIOD_US, 6.25);
        assert_eq!(SpiMode::Modified.clock_hz(COMMAND_RATE_HZ), 2_560_000.0);
        assert_eq!(SpiMode::Standard.clock_hz(COMMAND_RATE_HZ), 2_720_000.0);
    }

    #[test]
    fn round_trip_both_modes() {
        let xs: Vec<_> = (0..100).map(|i| cmd(i % 32, (i * 37) % 1024)).collect();
        for mode in [SpiMode::Modified, SpiMode::Standard] {
            let s = serialize(&xs, mode).unwrap();
            assert_eq!(deserialize(&s).unwrap(), xs);
        }
    }

    #[test]
    fn cut_stream_reports_frame_zero() {
        let s = serialize(&[cmd(1, 2), cmd(3, 4)], SpiMode::Modified).unwrap();
        match deserialize(&s.truncated(10)) {
            Err(ProtocolError::Framing {
                frame_index,
                bits,
                latched,
            }) => {
                assert_eq!(frame_index, 0);
                assert_eq!(bits, 10);
                assert!(latched.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn early_rise_keeps_latched_prefix() {
        let mut s = serialize(&[cmd(1, 2), cmd(3, 4), cmd(5, 6)], SpiMode::Standard).unwrap();
        // move the second frame's CE rise 6 cycles early
        let rise = s
            .ce_edges
            .iter_mut()
            .filter(|e| e.edge == Edge::Rise)
            .nth(1)
            .unwrap();
        rise.cycle -= 6;
        match deserialize(&s) {
            Err(ProtocolError::Framing {
                frame_index,
                bits,
                latched,
            }) => {
                assert_eq!(frame_index, 1);
                assert_eq!(bits, 10);
                assert_eq!(latched, vec![cmd(1, 2)]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ce_fall_does_not_latch() {
        let s = serialize(&[cmd(9, 9)], SpiMode::Modified).unwrap();
        let falls_only = BitStream {
            ce_edges: s
                .ce_edges
                .iter()
                .copied()
                .filter(|e| e.edge == Edge::Fall)
                .collect(),
            ..s
        };
        // shifted 16 bits but never latched: reported as an unterminated frame
        assert!(matches!(
            deserialize(&falls_only),
            Err(ProtocolError::Framing { frame_index: 0, bits: 16, .. })
        ));
    }
}
