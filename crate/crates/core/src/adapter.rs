//! Out-of-process generator and detector backends.
//!
//! A backend is a child process speaking a framed binary protocol on its
//! standard streams. Every integer is little-endian.
//!
//! ```text
//! request  := "CAMO" version:u8 op:u8 len:u32 payload[len]
//! response := status:u8 len:u32 payload[len]      status 0 ok, 1 error (payload = UTF-8 message)
//! tensor   := ndim:u32 dim:u32 * ndim  value:f32 * prod(dims)   (row-major)
//! string   := len:u32 bytes[len]                                 (UTF-8)
//! ```
//!
//! Images are `[height, width, 3]` tensors. Operations:
//!
//! | op | name                 | request                                          | response |
//! |----|----------------------|--------------------------------------------------|----------|
//! | 0  | info                 | (empty)                                          | generator: `embed_dim:u32 reentrant:u8`; detector: `num_classes:u32` |
//! | 1  | encode               | prompt string                                    | tensor `[n_txt, d]` |
//! | 2  | decode               | conditioning tensor, `seed:u64`, `steps:u32`     | texture tensor |
//! | 3  | decode_gradient      | conditioning, `seed:u64`, `steps:u32`, `rows:u32`, upstream texture tensor | tensor `[rows, d]` |
//! | 4  | detect               | image tensor                                     | tensor `[n, 5 + C]`: `x_min y_min x_max y_max D_o D_c…` |
//! | 5  | detection_gradient   | image tensor, `index:u32`, upstream tensor `[5 + C]` | image-shaped tensor |
//!
//! Values cross the boundary as 32-bit floats, so remote gradients carry
//! single-precision rounding.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::attack::{Detection, DetectionGrad, Detector};
use crate::error::{validate, Error, Result};
use crate::raster::{BBox, Raster};
use crate::renderer::TextureImage;
use crate::texgen::{GeneratorBackend, Matrix, TextFeature};

pub const MAGIC: [u8; 4] = *b"CAMO";
pub const PROTOCOL_VERSION: u8 = 1;
/// Environment variables naming an external backend command.
pub const GENERATOR_CMD_ENV: &str = "CAMO_GENERATOR_CMD";
pub const DETECTOR_CMD_ENV: &str = "CAMO_DETECTOR_CMD";

const MAX_FRAME: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Op {
    Info = 0,
    Encode = 1,
    Decode = 2,
    DecodeGradient = 3,
    Detect = 4,
    DetectionGradient = 5,
}

impl Op {
    fn from_u8(v: u8) -> Option<Op> {
        Some(match v {
            0 => Op::Info,
            1 => Op::Encode,
            2 => Op::Decode,
            3 => Op::DecodeGradient,
            4 => Op::Detect,
            5 => Op::DetectionGradient,
            _ => return None,
        })
    }
}

fn backend_err(e: impl std::fmt::Display) -> Error {
    Error::Backend(e.to_string())
}

/// Payload builder.
#[derive(Default)]
pub struct Encoder(Vec<u8>);

impl Encoder {
    pub fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }

    pub fn u32(mut self, v: usize) -> Self {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn string(self, s: &str) -> Self {
        let mut e = self.u32(s.len());
        e.0.extend_from_slice(s.as_bytes());
        e
    }

    pub fn tensor(self, dims: &[usize], data: &[f64]) -> Self {
        let mut e = self.u32(dims.len());
        for &d in dims {
            e = e.u32(d);
        }
        for &v in data {
            e.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
        e
    }

    pub fn image(self, r: &Raster) -> Self {
        self.tensor(&[r.height(), r.width(), r.channels()], r.data())
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Payload reader.
pub struct Decoder<'a>(&'a [u8]);

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Decoder(bytes)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        validate(self.0.len() >= n, || "truncated backend message".into())?;
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(backend_err)
    }

    pub fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = self.u32()?;
        validate(ndim <= 8, || format!("tensor rank {ndim} is not supported"))?;
        let dims = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_FRAME / 4)
            .ok_or_else(|| backend_err("tensor too large"))?;
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((dims, data))
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let (dims, data) = self.tensor()?;
        validate(dims.len() == 2, || "expected a rank-2 tensor".into())?;
        Matrix::from_vec(dims[0], dims[1], data)
    }

    pub fn image(&mut self) -> Result<Raster> {
        let (dims, data) = self.tensor()?;
        validate(dims.len() == 3, || "expected an image tensor".into())?;
        Raster::from_vec(dims[1], dims[0], dims[2], data)
    }

    pub fn finish(&self) -> Result<()> {
        validate(self.0.is_empty(), || "trailing bytes in backend message".into())
    }
}

fn write_frame(w: &mut impl Write, head: &[u8], payload: &[u8]) -> std::io::Result<()> {
    w.write_all(head)?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

fn read_len(r: &mut impl Read) -> std::io::Result<usize> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large"));
    }
    Ok(n)
}

/// A request/response channel to a backend.
pub trait Transport: Send {
    fn call(&mut self, op: Op, payload: &[u8]) -> Result<Vec<u8>>;
}

/// Client side of one connection.
pub struct Connection<R: Read, W: Write> {
    reader: R,
    writer: W,
}

impl<R: Read, W: Write> Connection<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Connection { reader, writer }
    }
}

impl<R: Read + Send, W: Write + Send> Transport for Connection<R, W> {
    fn call(&mut self, op: Op, payload: &[u8]) -> Result<Vec<u8>> {
        let mut head = MAGIC.to_vec();
        head.extend([PROTOCOL_VERSION, op as u8]);
        write_frame(&mut self.writer, &head, payload).map_err(backend_err)?;
        let mut status = [0u8; 1];
        self.reader.read_exact(&mut status).map_err(backend_err)?;
        let n = read_len(&mut self.reader).map_err(backend_err)?;
        let mut body = vec![0u8; n];
        self.reader.read_exact(&mut body).map_err(backend_err)?;
        match status[0] {
            0 => Ok(body),
            _ => Err(Error::Backend(String::from_utf8_lossy(&body).into_owned())),
        }
    }
}

/// Serves requests until the reader reaches end of stream. Handler errors are
/// reported to the client; malformed frames end the session with an error.
pub fn serve(
    reader: impl Read,
    writer: impl Write,
    mut handler: impl FnMut(Op, &[u8]) -> Result<Vec<u8>>,
) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        let mut head = [0u8; 6];
        match reader.read_exact(&mut head[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(backend_err(e)),
        }
        reader.read_exact(&mut head[1..]).map_err(backend_err)?;
        validate(head[..4] == MAGIC, || "bad frame magic".into())?;
        validate(head[4] == PROTOCOL_VERSION, || format!("unsupported protocol version {}", head[4]))?;
        let n = read_len(&mut reader).map_err(backend_err)?;
        let mut payload = vec![0u8; n];
        reader.read_exact(&mut payload).map_err(backend_err)?;
        let reply = match Op::from_u8(head[5]) {
            Some(op) => handler(op, &payload),
            None => Err(backend_err(format!("unknown op {}", head[5]))),
        };
        match reply {
            Ok(body) => write_frame(&mut writer, &[0], &body),
            Err(e) => write_frame(&mut writer, &[1], e.to_string().as_bytes()),
        }
        .map_err(backend_err)?;
    }
}

fn unsupported(op: Op) -> Error {
    backend_err(format!("operation {op:?} is not served by this backend"))
}

pub fn serve_generator(backend: &dyn GeneratorBackend, reader: impl Read, writer: impl Write) -> Result<()> {
    serve(reader, writer, |op, payload| {
        let mut d = Decoder::new(payload);
        let out = match op {
            Op::Info => Encoder::default().u32(backend.embed_dim()).u8(1),
            Op::Encode => {
                let prompt = d.string()?;
                let f = backend.encode(&prompt)?;
                Encoder::default().tensor(&[f.tokens.rows, f.tokens.cols], &f.tokens.data)
            }
            Op::Decode => {
                let cond = d.matrix()?;
                let (seed, steps) = (d.u64()?, d.u32()?);
                d.finish()?;
                Encoder::default().image(backend.decode(&cond, seed, steps)?.pixels())
            }
            Op::DecodeGradient => {
                let cond = d.matrix()?;
                let (seed, steps, rows) = (d.u64()?, d.u32()?, d.u32()?);
                let upstream = d.image()?;
                d.finish()?;
                let g = backend.decode_gradient(&cond, seed, steps, rows, &upstream)?;
                Encoder::default().tensor(&[g.rows, g.cols], &g.data)
            }
            other => return Err(unsupported(other)),
        };
        Ok(out.finish())
    })
}

fn detection_row(d: &Detection) -> impl Iterator<Item = f64> + '_ {
    d.bbox
        .as_array()
        .into_iter()
        .chain([d.objectness])
        .chain(d.class_conf.iter().copied())
}

pub fn serve_detector(detector: &dyn Detector, reader: impl Read, writer: impl Write) -> Result<()> {
    let c = detector.num_classes();
    serve(reader, writer, |op, payload| {
        let mut d = Decoder::new(payload);
        let out = match op {
            Op::Info => Encoder::default().u32(c),
            Op::Detect => {
                let image = d.image()?;
                d.finish()?;
                let dets = detector.detect(&image)?;
                let data: Vec<f64> = dets.iter().flat_map(detection_row).collect();
                Encoder::default().tensor(&[dets.len(), 5 + c], &data)
            }
            Op::DetectionGradient => {
                let image = d.image()?;
                let index = d.u32()?;
                let (dims, up) = d.tensor()?;
                d.finish()?;
                validate(dims == [5 + c], || "upstream must have 5 + num_classes entries".into())?;
                let upstream = DetectionGrad {
                    d_box: [up[0], up[1], up[2], up[3]],
                    d_objectness: up[4],
                    d_class_conf: up[5..].to_vec(),
                };
                Encoder::default().image(&detector.detection_gradient(&image, index, &upstream)?)
            }
            other => return Err(unsupported(other)),
        };
        Ok(out.finish())
    })
}

/// A backend child process with exclusive access to its pipes.
pub struct ChildProcess {
    child: Child,
    conn: Option<Connection<BufReader<ChildStdout>, BufWriter<ChildStdin>>>,
}

impl ChildProcess {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| backend_err(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(ChildProcess {
            child,
            conn: Some(Connection::new(BufReader::new(stdout), BufWriter::new(stdin))),
        })
    }

}

impl Transport for ChildProcess {
    fn call(&mut self, op: Op, payload: &[u8]) -> Result<Vec<u8>> {
        self.conn.as_mut().expect("open connection").call(op, payload)
    }
}

impl Drop for ChildProcess {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved server exit on its own.
        self.conn.take();
        let _ = self.child.wait();
    }
}

/// Generator served by another process. Requests are serialized.
pub struct RemoteGenerator {
    transport: Mutex<Box<dyn Transport>>,
    embed_dim: usize,
    pub reentrant: bool,
}

impl RemoteGenerator {
    pub fn spawn(command: &str) -> Result<Self> {
        Self::connect(Box::new(ChildProcess::spawn(command)?))
    }

    pub fn connect(mut transport: Box<dyn Transport>) -> Result<Self> {
        let info = transport.call(Op::Info, &[])?;
        let mut d = Decoder::new(&info);
        let embed_dim = d.u32()?;
        let reentrant = d.u8()? != 0;
        Ok(RemoteGenerator {
            transport: Mutex::new(transport),
            embed_dim,
            reentrant,
        })
    }

    fn call(&self, op: Op, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.transport
            .lock()
            .map_err(|_| backend_err("generator connection poisoned"))?
            .call(op, &payload)
    }
}

impl GeneratorBackend for RemoteGenerator {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, prompt: &str) -> Result<TextFeature> {
        let body = self.call(Op::Encode, Encoder::default().string(prompt).finish())?;
        let tokens = Decoder::new(&body).matrix()?;
        Ok(TextFeature {
            prompt: prompt.to_string(),
            tokens,
        })
    }

    fn decode(&self, cond: &Matrix, seed: u64, steps: usize) -> Result<TextureImage> {
        let req = Encoder::default()
            .tensor(&[cond.rows, cond.cols], &cond.data)
            .u64(seed)
            .u32(steps);
        let body = self.call(Op::Decode, req.finish())?;
        TextureImage::new(Decoder::new(&body).image()?)
    }

    fn decode_gradient(
        &self,
        cond: &Matrix,
        seed: u64,
        steps: usize,
        rows: usize,
        upstream: &Raster,
    ) -> Result<Matrix> {
        let req = Encoder::default()
            .tensor(&[cond.rows, cond.cols], &cond.data)
            .u64(seed)
            .u32(steps)
            .u32(rows)
            .image(upstream);
        let body = self.call(Op::DecodeGradient, req.finish())?;
        Decoder::new(&body).matrix()
    }
}

/// Detector served by another process. Requests are serialized.
pub struct RemoteDetector {
    transport: Mutex<Box<dyn Transport>>,
    num_classes: usize,
}

impl RemoteDetector {
    pub fn spawn(command: &str) -> Result<Self> {
        Self::connect(Box::new(ChildProcess::spawn(command)?))
    }

    pub fn connect(mut transport: Box<dyn Transport>) -> Result<Self> {
        let info = transport.call(Op::Info, &[])?;
        let num_classes = Decoder::new(&info).u32()?;
        validate(num_classes > 0, || "detector reports zero classes".into())?;
        Ok(RemoteDetector {
            transport: Mutex::new(transport),
            num_classes,
        })
    }

    fn call(&self, op: Op, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.transport
            .lock()
            .map_err(|_| backend_err("detector connection poisoned"))?
            .call(op, &payload)
    }
}

impl Detector for RemoteDetector {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn detect(&self, image: &Raster) -> Result<Vec<Detection>> {
        let body = self.call(Op::Detect, Encoder::default().image(image).finish())?;
        let (dims, data) = Decoder::new(&body).tensor()?;
        let width = 5 + self.num_classes;
        validate(dims.len() == 2 && dims[1] == width, || "malformed detection tensor".into())?;
        Ok(data
            .chunks_exact(width)
            .map(|r| Detection::new(BBox::new(r[0], r[1], r[2], r[3]), r[4], r[5..].to_vec()))
            .collect())
    }

    fn detection_gradient(&self, image: &Raster, index: usize, upstream: &DetectionGrad) -> Result<Raster> {
        let up: Vec<f64> = upstream
            .d_box
            .iter()
            .copied()
            .chain([upstream.d_objectness])
            .chain(upstream.d_class_conf.iter().copied())
            .collect();
        let req = Encoder::default()
            .image(image)
            .u32(index)
            .tensor(&[up.len()], &up);
        let body = self.call(Op::DetectionGradient, req.finish())?;
        Decoder::new(&body).image()
    }
}
