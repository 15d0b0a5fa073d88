//! Event records, CSV / EVT1 codecs and synthetic stream generators.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Timestamps are integer microseconds.
pub type Micros = i64;

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_HEADER_LEN: usize = 12;
/// x u16, y u16, t i64, p i8, then zero padding up to 16 bytes.
pub const EVT1_RECORD_LEN: usize = 16;
const EVT1_PAD: usize = EVT1_RECORD_LEN - 13;

/// Default sampling step of the synthetic generator.
pub const DEFAULT_SAMPLING_STEP: Micros = 100;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid polarity {value} at byte {offset} (expected -1 or 1)")]
    Polarity { offset: usize, value: i64 },
    #[error("timestamp {t} at byte {offset} precedes previous timestamp {previous}")]
    OutOfOrder {
        offset: usize,
        t: Micros,
        previous: Micros,
    },
    #[error("event ({x},{y}) outside sensor {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EventError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_sign(value: i64) -> Option<Self> {
        match value {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn value(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }
}

impl From<Polarity> for i8 {
    fn from(p: Polarity) -> i8 {
        p.value()
    }
}

impl TryFrom<i8> for Polarity {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        Polarity::from_sign(i64::from(v)).ok_or_else(|| format!("invalid polarity {v}"))
    }
}

/// One asynchronous brightness-change record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: Micros,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u32, y: u32, t: Micros, p: Polarity) -> Self {
        Event { x, y, t, p }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.t, self.p.value())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(EventError::InvalidParameter(format!(
                "sensor geometry must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(SensorGeometry { width, height })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn diagonal(&self) -> f64 {
        (f64::from(self.width).powi(2) + f64::from(self.height).powi(2)).sqrt()
    }

    /// Smallest geometry containing every event (at least 1x1).
    pub fn bounding(events: &[Event]) -> Self {
        let width = events.iter().map(|e| e.x + 1).max().unwrap_or(1);
        let height = events.iter().map(|e| e.y + 1).max().unwrap_or(1);
        SensorGeometry { width, height }
    }

    pub fn check(&self, e: &Event) -> Result<()> {
        if self.contains(e.x, e.y) {
            Ok(())
        } else {
            Err(EventError::OutOfBounds {
                x: e.x,
                y: e.y,
                width: self.width,
                height: self.height,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Evt1,
}

impl EventFormat {
    /// Guess from a file extension; anything not `.evt1`/`.evt` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("evt1") | Some("evt") | Some("bin") => EventFormat::Evt1,
            _ => EventFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Reject decreasing timestamps instead of sorting them.
    pub strict: bool,
}

/// Decoded stream. `geometry` is only known for EVT1 input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    pub geometry: Option<SensorGeometry>,
    pub events: Vec<Event>,
}

pub fn read_events<R: Read>(
    mut source: R,
    format: EventFormat,
    options: ReadOptions,
) -> Result<EventStream> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let (geometry, mut events, offsets) = match format {
        EventFormat::Csv => {
            let (events, offsets) = parse_csv(&bytes)?;
            (None, events, offsets)
        }
        EventFormat::Evt1 => {
            let (geometry, events) = parse_evt1(&bytes)?;
            let offsets = (0..events.len())
                .map(|i| EVT1_HEADER_LEN + i * EVT1_RECORD_LEN)
                .collect();
            (Some(geometry), events, offsets)
        }
    };
    if options.strict {
        for (w, off) in events.windows(2).zip(offsets.iter().skip(1)) {
            if w[1].t < w[0].t {
                return Err(EventError::OutOfOrder {
                    offset: *off,
                    t: w[1].t,
                    previous: w[0].t,
                });
            }
        }
    } else {
        // stable: equal timestamps keep file order
        events.sort_by_key(|e| e.t);
    }
    Ok(EventStream { geometry, events })
}

fn parse_csv(bytes: &[u8]) -> Result<(Vec<Event>, Vec<usize>)> {
    let mut events = Vec::new();
    let mut offsets = Vec::new();
    let mut offset = 0usize;
    for raw in bytes.split(|&b| b == b'\n') {
        let line_start = offset;
        offset += raw.len() + 1;
        let line = std::str::from_utf8(raw).map_err(|_| EventError::Parse {
            offset: line_start,
            message: "non-ASCII record".into(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = [0i64; 4];
        let mut n = 0;
        let mut field_start = line_start;
        for part in line.split(',') {
            if n == 4 {
                return Err(EventError::Parse {
                    offset: line_start,
                    message: format!("expected 4 fields in {line:?}"),
                });
            }
            fields[n] = part.trim().parse::<i64>().map_err(|_| EventError::Parse {
                offset: field_start,
                message: format!("invalid integer {part:?}"),
            })?;
            field_start += part.len() + 1;
            n += 1;
        }
        if n != 4 {
            return Err(EventError::Parse {
                offset: line_start,
                message: format!("expected 4 fields in {line:?}"),
            });
        }
        let [x, y, t, p] = fields;
        let coord = |v: i64| {
            u32::try_from(v).map_err(|_| EventError::Parse {
                offset: line_start,
                message: format!("coordinate {v} out of range"),
            })
        };
        let p = Polarity::from_sign(p).ok_or(EventError::Polarity {
            offset: line_start,
            value: p,
        })?;
        events.push(Event::new(coord(x)?, coord(y)?, t, p));
        offsets.push(line_start);
    }
    Ok((events, offsets))
}

fn parse_evt1(bytes: &[u8]) -> Result<(SensorGeometry, Vec<Event>)> {
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(EventError::Parse {
            offset: bytes.len(),
            message: "truncated EVT1 header".into(),
        });
    }
    if &bytes[..4] != EVT1_MAGIC {
        return Err(EventError::Parse {
            offset: 0,
            message: "bad magic (expected EVT1)".into(),
        });
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as u32;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[EVT1_HEADER_LEN..];
    if body.len() != count * EVT1_RECORD_LEN {
        return Err(EventError::Parse {
            offset: EVT1_HEADER_LEN,
            message: format!(
                "header declares {count} records but body holds {} bytes",
                body.len()
            ),
        });
    }
    let geometry = SensorGeometry { width, height };
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(EVT1_RECORD_LEN).enumerate() {
        let offset = EVT1_HEADER_LEN + i * EVT1_RECORD_LEN;
        let x = u16::from_le_bytes([rec[0], rec[1]]) as u32;
        let y = u16::from_le_bytes([rec[2], rec[3]]) as u32;
        let t = i64::from_le_bytes(rec[4..12].try_into().unwrap());
        let pv = rec[12] as i8;
        let p = Polarity::from_sign(i64::from(pv)).ok_or(EventError::Polarity {
            offset: offset + 12,
            value: i64::from(pv),
        })?;
        let e = Event::new(x, y, t, p);
        if !geometry.contains(x, y) {
            return Err(EventError::Parse {
                offset,
                message: format!("event ({x},{y}) outside declared {width}x{height} sensor"),
            });
        }
        events.push(e);
    }
    Ok((geometry, events))
}

pub fn write_events<W: Write>(
    mut sink: W,
    events: &[Event],
    format: EventFormat,
    geometry: SensorGeometry,
) -> Result<()> {
    for e in events {
        geometry.check(e)?;
    }
    match format {
        EventFormat::Csv => {
            let mut out = String::with_capacity(events.len() * 16);
            for e in events {
                out.push_str(&e.to_string());
                out.push('\n');
            }
            sink.write_all(out.as_bytes())?;
        }
        EventFormat::Evt1 => {
            let narrow = |v: u32, what: &str| {
                u16::try_from(v)
                    .map_err(|_| EventError::Encoding(format!("{what} {v} exceeds u16 range")))
            };
            let count = u32::try_from(events.len())
                .map_err(|_| EventError::Encoding("more than u32::MAX events".into()))?;
            let mut out = Vec::with_capacity(EVT1_HEADER_LEN + events.len() * EVT1_RECORD_LEN);
            out.extend_from_slice(EVT1_MAGIC);
            out.extend_from_slice(&narrow(geometry.width, "width")?.to_le_bytes());
            out.extend_from_slice(&narrow(geometry.height, "height")?.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            for e in events {
                out.extend_from_slice(&narrow(e.x, "x")?.to_le_bytes());
                out.extend_from_slice(&narrow(e.y, "y")?.to_le_bytes());
                out.extend_from_slice(&e.t.to_le_bytes());
                out.push(e.p.value() as u8);
                out.extend_from_slice(&[0; EVT1_PAD]);
            }
            sink.write_all(&out)?;
        }
    }
    Ok(())
}

/// Serialize to an in-memory buffer.
pub fn encode_events(
    events: &[Event],
    format: EventFormat,
    geometry: SensorGeometry,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_events(&mut buf, events, format, geometry)?;
    Ok(buf)
}

/// Shift events that repeat a timestamp at the same pixel by +1 µs (repeatedly if
/// needed) so every pixel sees strictly increasing times, then restore global
/// time order. Input must be time sorted. Returns the number of shifted events.
pub fn perturb_duplicates(events: &mut [Event]) -> usize {
    let mut last: HashMap<(u32, u32), Micros> = HashMap::new();
    let mut shifted = 0;
    for e in events.iter_mut() {
        let slot = last.entry((e.x, e.y)).or_insert(Micros::MIN);
        if e.t <= *slot {
            e.t = *slot + 1;
            shifted += 1;
        }
        *slot = e.t;
    }
    if shifted > 0 {
        events.sort_by_key(|e| e.t);
    }
    shifted
}

/// SHA-256 over the canonical little-endian (x, y, t, p) encoding.
pub fn stream_digest(events: &[Event]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.x.to_le_bytes());
        h.update(e.y.to_le_bytes());
        h.update(e.t.to_le_bytes());
        h.update([e.p.value() as u8]);
    }
    format!("{:x}", h.finalize())
}

/// Latent log-brightness field sampled by the synthetic generator.
pub trait Scene {
    fn log_intensity(&self, x: f64, y: f64, t_us: f64) -> f64;
}

impl<F> Scene for F
where
    F: Fn(f64, f64, f64) -> f64,
{
    fn log_intensity(&self, x: f64, y: f64, t_us: f64) -> f64 {
        self(x, y, t_us)
    }
}

/// Vertical edge moving along +x. `softness` = 0 gives a hard step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MovingEdge {
    pub start_x: f64,
    pub speed_px_per_s: f64,
    pub contrast: f64,
    pub softness: f64,
}

impl MovingEdge {
    pub fn position(&self, t_us: f64) -> f64 {
        self.start_x + self.speed_px_per_s * t_us * 1e-6
    }
}

impl Scene for MovingEdge {
    fn log_intensity(&self, x: f64, _y: f64, t_us: f64) -> f64 {
        let d = self.position(t_us) - x;
        if self.softness <= 0.0 {
            if d > 0.0 {
                self.contrast
            } else {
                0.0
            }
        } else {
            self.contrast / (1.0 + (-d / self.softness).exp())
        }
    }
}

/// Sinusoidal grating drifting along its normal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DriftingGrating {
    pub period_px: f64,
    pub speed_px_per_s: f64,
    pub angle_rad: f64,
    pub contrast: f64,
}

impl Scene for DriftingGrating {
    fn log_intensity(&self, x: f64, y: f64, t_us: f64) -> f64 {
        let u = x * self.angle_rad.cos() + y * self.angle_rad.sin()
            - self.speed_px_per_s * t_us * 1e-6;
        self.contrast * (std::f64::consts::TAU * u / self.period_px).sin()
    }
}

/// Per-pixel threshold simulation of a latent log-intensity field. Each pixel
/// keeps the level at its last emission; a sample whose difference from that
/// level reaches `threshold` emits one event with the sign of the difference.
/// Samples are taken at `step, 2*step, ..., <= duration`.
pub fn generate_synthetic(
    scene: &dyn Scene,
    threshold: f64,
    geometry: SensorGeometry,
    duration: Micros,
    step: Micros,
) -> Result<Vec<Event>> {
    if !(threshold > 0.0) {
        return Err(EventError::InvalidParameter(format!(
            "contrast threshold must be positive, got {threshold}"
        )));
    }
    if duration <= 0 || step <= 0 {
        return Err(EventError::InvalidParameter(format!(
            "duration ({duration}) and sampling step ({step}) must be positive"
        )));
    }
    let (w, h) = (geometry.width, geometry.height);
    let mut reference: Vec<f64> = Vec::with_capacity(geometry.pixel_count());
    for y in 0..h {
        for x in 0..w {
            reference.push(scene.log_intensity(f64::from(x), f64::from(y), 0.0));
        }
    }
    let mut events = Vec::new();
    let mut t = step;
    while t <= duration {
        for y in 0..h {
            for x in 0..w {
                let idx = (y * w + x) as usize;
                let level = scene.log_intensity(f64::from(x), f64::from(y), t as f64);
                let inc = level - reference[idx];
                if inc.abs() >= threshold {
                    let p = if inc > 0.0 {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    events.push(Event::new(x, y, t, p));
                    reference[idx] = level;
                }
            }
        }
        t += step;
    }
    Ok(events)
}

/// Exactly `round(rate * duration)` events, one per equal time slot with a
/// uniform jitter inside the slot; coordinates and polarity uniform.
pub fn generate_uniform(
    geometry: SensorGeometry,
    rate_per_s: f64,
    duration: Micros,
    seed: u64,
) -> Result<Vec<Event>> {
    if !(rate_per_s > 0.0) {
        return Err(EventError::InvalidParameter(format!(
            "event rate must be positive, got {rate_per_s}"
        )));
    }
    if duration < 0 {
        return Err(EventError::InvalidParameter(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    let n = (rate_per_s * duration as f64 * 1e-6).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = duration as f64 / n.max(1) as f64;
    let mut events: Vec<Event> = (0..n)
        .map(|i| {
            let t = ((i as f64 + rng.random::<f64>()) * slot).floor() as Micros;
            let x = rng.random_range(0..geometry.width);
            let y = rng.random_range(0..geometry.height);
            let p = if rng.random::<bool>() {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Event::new(x, y, t, p)
        })
        .collect();
    perturb_duplicates(&mut events);
    Ok(events)
}
