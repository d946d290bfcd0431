//! Detector backends and the newline-delimited JSON protocol spoken with
//! external detector processes.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{self, DetectionRecord};
use crate::pipeline::WorkUnit;
use crate::slicing::Annotation;
use crate::synth::{simulate_detector, SimDetectorParams, SimUnit};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("cannot start backend '{cmd}': {error}")]
    Spawn { cmd: String, error: io::Error },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend i/o error: {0}")]
    Io(io::Error),
    #[error("unit {unit_id}: {message}")]
    Unit { unit_id: String, message: String },
    #[error(transparent)]
    Format(#[from] formats::FormatError),
}

impl From<io::Error> for BackendError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// Detection as returned by a backend, in region-local pixels (or resized
/// input pixels when the response carries `input_scale`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub backend_id: String,
    pub max_in_flight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub unit_id: String,
    pub image_path: String,
    /// `[x0, y0, w, h]` in image pixels.
    pub region: [u32; 4],
    pub target_input: u32,
}

impl BackendRequest {
    pub fn from_unit(unit: &WorkUnit) -> Self {
        Self {
            unit_id: unit.unit_id.clone(),
            image_path: unit.image_path.display().to_string(),
            region: unit.region,
            target_input: unit.target_input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub unit_id: String,
    #[serde(default)]
    pub detections: Vec<RawDetection>,
    /// Effective `[sx, sy]` from region pixels to the boxes' frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scale: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BackendResponse {
    pub fn empty(unit_id: &str) -> Self {
        Self {
            unit_id: unit_id.to_string(),
            detections: Vec::new(),
            input_scale: None,
            error: None,
        }
    }
}

/// Something that turns a work unit into raw detections. Implementations
/// must be deterministic and independent of call order.
pub trait DetectorBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    fn detect(&self, unit: &WorkUnit) -> Result<BackendResponse, BackendError>;
}

/// Reads `<dir>/<image_id>.jsonl` interchange files. Tile units take the
/// records whose tile rectangle equals the unit's region; full-image units
/// take untiled records (restricted to the unit's strategy tag when the
/// record has one). A missing file means no detections.
pub struct PrecomputedBackend {
    dir: PathBuf,
    cache: Mutex<HashMap<u64, Arc<Vec<DetectionRecord>>>>,
}

impl PrecomputedBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn records(&self, image_id: u64) -> Result<Arc<Vec<DetectionRecord>>, BackendError> {
        if let Some(r) = self.cache.lock().expect("cache lock").get(&image_id) {
            return Ok(r.clone());
        }
        let path = self.dir.join(format!("{image_id}.jsonl"));
        let recs = if path.exists() {
            formats::read_detections(&path)?
        } else {
            log::debug!("no precomputed detections at {}", path.display());
            Vec::new()
        };
        let recs = Arc::new(recs);
        self.cache.lock().expect("cache lock").insert(image_id, recs.clone());
        Ok(recs)
    }
}

impl DetectorBackend for PrecomputedBackend {
    fn id(&self) -> &str {
        "precomputed"
    }

    fn detect(&self, unit: &WorkUnit) -> Result<BackendResponse, BackendError> {
        let recs = self.records(unit.image_id)?;
        let [x0, y0, w, h] = unit.region;
        let detections = recs
            .iter()
            .filter(|r| r.image_id == unit.image_id)
            .filter_map(|r| match (&unit.tile, &r.tile, &r.box_tile) {
                (Some(_), Some(t), Some(b)) if [t.x0, t.y0, t.width, t.height] == [x0, y0, w, h] => Some(RawDetection {
                    bbox: *b,
                    score: r.score,
                    class_id: r.class_id,
                }),
                (None, None, _) if r.strategy.is_empty() || r.strategy == unit.strategy.tag() => Some(RawDetection {
                    bbox: r.box_global,
                    score: r.score,
                    class_id: r.class_id,
                }),
                _ => None,
            })
            .collect();
        Ok(BackendResponse {
            unit_id: unit.unit_id.clone(),
            detections,
            input_scale: None,
            error: None,
        })
    }
}

struct Pipe {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// External process launched once per run. Requests are sent one at a time.
pub struct SubprocessBackend {
    id: String,
    max_in_flight: usize,
    pipe: Mutex<Pipe>,
}

fn read_line(stdout: &mut BufReader<ChildStdout>) -> Result<String, BackendError> {
    let mut line = String::new();
    if stdout.read_line(&mut line)? == 0 {
        return Err(BackendError::Protocol("backend closed its output".into()));
    }
    Ok(line)
}

impl SubprocessBackend {
    /// Starts `cmd` through `sh -c` and reads the handshake.
    pub fn spawn(cmd: &str) -> Result<Self, BackendError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|error| BackendError::Spawn {
                cmd: cmd.to_string(),
                error,
            })?;
        let stdin = child.stdin.take();
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let line = read_line(&mut stdout)?;
        let hs: Handshake = serde_json::from_str(&line)
            .map_err(|e| BackendError::Protocol(format!("bad handshake '{}': {e}", line.trim())))?;
        if hs.protocol_version != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!(
                "unsupported protocol_version {} (expected {PROTOCOL_VERSION})",
                hs.protocol_version
            )));
        }
        log::info!("backend {} ready (max_in_flight {})", hs.backend_id, hs.max_in_flight);
        Ok(Self {
            id: hs.backend_id,
            max_in_flight: hs.max_in_flight.max(1) as usize,
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }
}

impl DetectorBackend for SubprocessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn detect(&self, unit: &WorkUnit) -> Result<BackendResponse, BackendError> {
        let mut pipe = self.pipe.lock().map_err(|_| BackendError::Protocol("backend pipe poisoned".into()))?;
        let req = serde_json::to_string(&BackendRequest::from_unit(unit)).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let stdin = pipe
            .stdin
            .as_mut()
            .ok_or_else(|| BackendError::Protocol("backend input closed".into()))?;
        writeln!(stdin, "{req}")?;
        stdin.flush()?;
        let line = read_line(&mut pipe.stdout)?;
        let resp: BackendResponse = serde_json::from_str(&line)
            .map_err(|e| BackendError::Protocol(format!("bad response for {}: {e}", unit.unit_id)))?;
        Ok(resp)
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            pipe.stdin.take();
            let _ = pipe.child.wait();
        }
    }
}

/// Seeded simulated detector over known ground truth.
pub struct SimulatedBackend {
    gts: BTreeMap<u64, Vec<Annotation<f64>>>,
    params: SimDetectorParams,
}

impl SimulatedBackend {
    pub fn new(gts: BTreeMap<u64, Vec<Annotation<f64>>>, params: SimDetectorParams) -> Self {
        Self { gts, params }
    }

    pub fn respond(&self, image_id: u64, unit_id: &str, region: [u32; 4], target_input: u32) -> BackendResponse {
        let gts = self.gts.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
        let out = simulate_detector(
            &SimUnit {
                image_id,
                region,
                target_input,
            },
            gts,
            &self.params,
        );
        BackendResponse {
            unit_id: unit_id.to_string(),
            detections: out.detections,
            input_scale: out.input_scale,
            error: None,
        }
    }

    /// Serves the subprocess protocol on the given streams. Images are
    /// identified by file name, looked up in `by_path`.
    pub fn serve<R: BufRead, W: Write>(&self, by_path: &HashMap<String, u64>, input: R, mut output: W) -> io::Result<()> {
        let hs = Handshake {
            protocol_version: PROTOCOL_VERSION,
            backend_id: "sim".into(),
            max_in_flight: 1,
        };
        writeln!(output, "{}", serde_json::to_string(&hs)?)?;
        output.flush()?;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = match serde_json::from_str::<BackendRequest>(&line) {
                Ok(req) => {
                    let name = Path::new(&req.image_path)
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    match by_path.get(&name) {
                        Some(&id) => self.respond(id, &req.unit_id, req.region, req.target_input),
                        None => BackendResponse {
                            error: Some(format!("unknown image {}", req.image_path)),
                            ..BackendResponse::empty(&req.unit_id)
                        },
                    }
                }
                Err(e) => BackendResponse {
                    error: Some(format!("bad request: {e}")),
                    ..BackendResponse::empty("")
                },
            };
            writeln!(output, "{}", serde_json::to_string(&resp)?)?;
            output.flush()?;
        }
        Ok(())
    }
}

impl DetectorBackend for SimulatedBackend {
    fn id(&self) -> &str {
        "sim"
    }

    fn detect(&self, unit: &WorkUnit) -> Result<BackendResponse, BackendError> {
        Ok(self.respond(unit.image_id, &unit.unit_id, unit.region, unit.target_input))
    }
}
