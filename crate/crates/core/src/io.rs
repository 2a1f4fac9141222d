//! Binary file formats: a sectioned, content-hashed container and the
//! checkpoint, grid, point-batch and depth files built on it.
//!
//! Layout: magic `MDIFPACK`, `u32` format version, 4-byte kind tag, `u32`
//! section count, then per section a length-prefixed UTF-8 name and a
//! `u64`-length payload, and finally the SHA-256 of every preceding byte.
//! All integers and floats are little-endian.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{AdamConfig, AdamState, Tensor};
use crate::net::{Model, ModelConfig, TrainState};
use crate::sdf::{Camera, CameraSpec, DepthObservation, PointBatch, PointRole, ScalarGrid3};

const MAGIC: &[u8; 8] = b"MDIFPACK";
/// Version written by this build; any other version is rejected.
pub const CONTAINER_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

/// Kind tag of a container file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Checkpoint,
    Grid,
    Points,
    Depth,
}

impl Kind {
    fn tag(self) -> &'static [u8; 4] {
        match self {
            Kind::Checkpoint => b"CKPT",
            Kind::Grid => b"GRID",
            Kind::Points => b"PNTS",
            Kind::Depth => b"DPTH",
        }
    }

    fn from_tag(tag: &[u8]) -> Result<Self> {
        [Kind::Checkpoint, Kind::Grid, Kind::Points, Kind::Depth]
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown container kind {:?}", String::from_utf8_lossy(tag))))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Little-endian cursor with truncation errors naming the payload.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{} ends at byte {} (needed {} more at {})",
                self.what,
                self.bytes.len(),
                n,
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{}: length overflows", self.what)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("{}: invalid UTF-8", self.what)))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Named byte sections of one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new(kind: Kind) -> Self {
        Self { kind, sections: Vec::new() }
    }

    pub fn push(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(CONTAINER_VERSION);
        w.0.extend_from_slice(self.kind.tag());
        w.u32(self.sections.len() as u32);
        for (name, payload) in &self.sections {
            w.string(name);
            w.u64(payload.len() as u64);
            w.0.extend_from_slice(payload);
        }
        let hash = Sha256::digest(&w.0);
        w.0.extend_from_slice(&hash);
        w.0
    }

    /// Parses and verifies magic, version, content hash and structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "container");
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not an mdif container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "container version mismatch: file has {version}, this build reads {CONTAINER_VERSION}"
            )));
        }
        if bytes.len() < r.pos + 8 + HASH_LEN {
            return Err(Error::Truncated(format!("container is only {} bytes", bytes.len())));
        }
        let (body, hash) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != hash {
            return Err(Error::Format("container content hash mismatch".into()));
        }
        let mut r = ByteReader { bytes: body, pos: r.pos, what: "container" };
        let kind = Kind::from_tag(r.take(4)?)?;
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let n = r.len()?;
            sections.push((name, r.take(n)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { kind, sections })
    }

    pub fn from_bytes_of_kind(bytes: &[u8], kind: Kind) -> Result<Self> {
        let c = Self::from_bytes(bytes)?;
        if c.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} container, found {:?}", c.kind)));
        }
        Ok(c)
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{what}: {e}")))
}

/// Hex SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(&json(config))
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Model, optimizer state and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(state: TrainState) -> Self {
        let provenance = Provenance {
            seed: state.model.config.seed,
            config_hash: config_hash(&state.model.config),
        };
        Self { state, provenance }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let params = st.model.params.tensors();
        let mut c = Container::new(Kind::Checkpoint);
        c.push("config", json(&st.model.config));

        let mut w = ByteWriter::default();
        w.u32(params.len() as u32);
        for (name, t) in st.model.params.tensor_names().iter().zip(&params) {
            w.string(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        c.push("tensors", w.0);

        let mut w = ByteWriter::default();
        w.u32(st.adam.len() as u32);
        for a in &st.adam {
            w.u64(a.t);
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                w.f64(v);
            }
            w.f32s(a.m.data());
            w.f32s(a.v.data());
        }
        c.push("adam", w.0);

        let mut w = ByteWriter::default();
        w.u64(st.iteration);
        w.u64(st.losses.len() as u64);
        w.f32s(&st.losses);
        c.push("progress", w.0);

        c.push("provenance", json(&self.provenance));
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes_of_kind(bytes, Kind::Checkpoint)?;
        let config: ModelConfig = from_json(c.section("config")?, "checkpoint config")?;
        config.validate()?;

        let mut r = ByteReader::new(c.section("tensors")?, "tensor section");
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            names.push(r.string()?);
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            tensors.push(Tensor::from_vec(&shape, r.f32s(len)?)?);
        }
        r.finish()?;
        let model = Model::from_tensors(&config, tensors)?;
        if model.params.tensor_names() != names {
            return Err(Error::Format("checkpoint tensor names do not match the configuration".into()));
        }

        let mut r = ByteReader::new(c.section("adam")?, "adam section");
        let shapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if r.u32()? as usize != shapes.len() {
            return Err(Error::Format("adam state count does not match the parameter count".into()));
        }
        let mut adam = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let t = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let len = shape.iter().product();
            let m = Tensor::from_vec(shape, r.f32s(len)?)?;
            let v = Tensor::from_vec(shape, r.f32s(len)?)?;
            adam.push(AdamState { m, v, t, config });
        }
        r.finish()?;

        let mut r = ByteReader::new(c.section("progress")?, "progress section");
        let iteration = r.u64()?;
        let n = r.len()?;
        let losses = r.f32s(n)?;
        r.finish()?;

        let provenance = from_json(c.section("provenance")?, "checkpoint provenance")?;
        Ok(Self {
            state: TrainState {
                model,
                adam,
                iteration,
                losses,
            },
            provenance,
        })
    }
}

pub fn grid_to_bytes(grid: &ScalarGrid3) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(grid.res() as u32);
    w.f32s(grid.values());
    let mut c = Container::new(Kind::Grid);
    c.push("grid", w.0);
    c.to_bytes()
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<ScalarGrid3> {
    let c = Container::from_bytes_of_kind(bytes, Kind::Grid)?;
    let mut r = ByteReader::new(c.section("grid")?, "grid section");
    let res = r.u32()? as usize;
    let values = r.f32s(res.pow(3))?;
    r.finish()?;
    ScalarGrid3::new(res, values)
}

pub fn points_to_bytes(batch: &PointBatch) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(batch.role.code());
    w.u64(batch.len() as u64);
    w.f32s(batch.positions.as_flattened());
    w.f32s(&batch.gt_sdf);
    let mut c = Container::new(Kind::Points);
    c.push("points", w.0);
    c.to_bytes()
}

pub fn points_from_bytes(bytes: &[u8]) -> Result<PointBatch> {
    let c = Container::from_bytes_of_kind(bytes, Kind::Points)?;
    let mut r = ByteReader::new(c.section("points")?, "point section");
    let role = PointRole::from_code(r.u32()?)?;
    let n = r.len()?;
    let flat = r.f32s(n.checked_mul(3).ok_or_else(|| Error::Format("point count overflows".into()))?)?;
    let gt = r.f32s(n)?;
    r.finish()?;
    let positions = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    PointBatch::new(role, positions, gt)
}

pub fn depth_to_bytes(depth: &DepthObservation) -> Vec<u8> {
    let mut c = Container::new(Kind::Depth);
    c.push("camera", json(&depth.camera.spec));
    let mut w = ByteWriter::default();
    w.f32s(&depth.depth);
    c.push("depth", w.0);
    c.to_bytes()
}

pub fn depth_from_bytes(bytes: &[u8]) -> Result<DepthObservation> {
    let c = Container::from_bytes_of_kind(bytes, Kind::Depth)?;
    let spec: CameraSpec = from_json(c.section("camera")?, "camera")?;
    let camera = Camera::new(spec)?;
    let mut r = ByteReader::new(c.section("depth")?, "depth section");
    let depth = r.f32s(camera.width() * camera.height())?;
    r.finish()?;
    Ok(DepthObservation { camera, depth })
}
