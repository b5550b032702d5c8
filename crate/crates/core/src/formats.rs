//! On-disk formats.
//!
//! * trajectories: text, one per line, `<id>\t<lon>,<lat>;<lon>,<lat>;...`,
//!   blank lines and `#` comments ignored;
//! * `TSIM`: ground-truth similarity matrix;
//! * `TEMB`: embedding dump;
//! * `TSCK`: model checkpoint.
//!
//! Binary formats are little-endian: 4 magic bytes, a `u32` version, then
//! the payload.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geo::{LocalFrame, NormStats, Point, Trajectory, FEATURES};
use crate::measures::{GroundTruthMatrix, MeasureKind, SimilarityScale};
use crate::model::{BnRunning, Model, ModelConfig};

pub const TSIM_MAGIC: &[u8; 4] = b"TSIM";
pub const TEMB_MAGIC: &[u8; 4] = b"TEMB";
pub const TSCK_MAGIC: &[u8; 4] = b"TSCK";
pub const TSIM_VERSION: u32 = 1;
pub const TEMB_VERSION: u32 = 1;
pub const TSCK_VERSION: u32 = 1;

// ---------------------------------------------------------------- text

/// Parses the trajectory text format. Coordinates are `(lon, lat)` stored as
/// `Point { x: lon, y: lat }`.
pub fn read_trajectories(reader: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        out.push(parse_line(line, line_no)?);
    }
    Ok(out)
}

fn parse_line(line: &str, line_no: usize) -> Result<Trajectory> {
    let err = |message: String| Error::Parse { line: line_no, message };
    let (id, body) = line
        .split_once('\t')
        .ok_or_else(|| err("expected `<id><TAB><points>`".into()))?;
    if id.is_empty() {
        return Err(err("empty trajectory id".into()));
    }
    let mut points = Vec::new();
    for (k, pair) in body.split(';').enumerate() {
        let pair = pair.trim();
        if pair.is_empty() && k > 0 {
            continue;
        }
        let (lon, lat) = pair
            .split_once(',')
            .ok_or_else(|| err(format!("point {k}: expected `lon,lat`, got {pair:?}")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| err(format!("point {k}: bad coordinate {:?}", s.trim())))
        };
        points.push(Point::new(num(lon)?, num(lat)?));
    }
    Ok(Trajectory::new(id, points))
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(BufReader::new(File::open(path)?))
}

pub fn write_trajectories(mut w: impl Write, trajs: &[Trajectory]) -> Result<()> {
    for t in trajs {
        if t.id.is_empty() || t.id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!("trajectory id {:?} cannot be written", t.id)));
        }
        write!(w, "{}\t", t.id)?;
        for (k, p) in t.points.iter().enumerate() {
            if k > 0 {
                w.write_all(b";")?;
            }
            write!(w, "{},{}", p.x, p.y)?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories_file(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(&mut w, trajs)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- binary helpers

struct Reader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| self.eof(e))?;
        Ok(buf)
    }

    fn eof(&self, e: io::Error) -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {} file", self.what))
        } else {
            Error::Io(e)
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.eof(e))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn header(&mut self, magic: &[u8; 4], supported: u32) -> Result<u32> {
        let m = self.array::<4>()?;
        if &m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v == 0 || v > supported {
            return Err(Error::Version { found: v, supported });
        }
        Ok(v)
    }

    fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format(format!("trailing bytes after {} payload", self.what))),
        }
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn save_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- TSIM

pub fn write_tsim(mut w: impl Write, m: &GroundTruthMatrix) -> Result<()> {
    w.write_all(TSIM_MAGIC)?;
    put_u32(&mut w, TSIM_VERSION as usize)?;
    put_u32(&mut w, m.n())?;
    put_f32s(&mut w, m.values())
}

pub fn read_tsim(r: impl Read) -> Result<GroundTruthMatrix> {
    let mut r = Reader { inner: r, what: "TSIM" };
    r.header(TSIM_MAGIC, TSIM_VERSION)?;
    let n = r.usize()?;
    let values = r.f32s(n.checked_mul(n).ok_or_else(|| Error::Format("matrix too large".into()))?)?;
    r.finish()?;
    GroundTruthMatrix::from_values(n, values)
}

pub fn save_tsim(path: &Path, m: &GroundTruthMatrix) -> Result<()> {
    save_with(path, |w| write_tsim(w, m))
}

pub fn load_tsim(path: &Path) -> Result<GroundTruthMatrix> {
    read_tsim(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------- TEMB

/// Row-major `count × d` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub count: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn from_rows(rows: &[Vec<f32>], d: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("every embedding must have {d} values")));
        }
        Ok(Self {
            count: rows.len(),
            d,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> Vec<Vec<f32>> {
        (0..self.count).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn write_temb(mut w: impl Write, e: &Embeddings) -> Result<()> {
    if e.data.len() != e.count * e.d {
        return Err(Error::Shape("embedding data does not match count × d".into()));
    }
    w.write_all(TEMB_MAGIC)?;
    put_u32(&mut w, TEMB_VERSION as usize)?;
    put_u32(&mut w, e.count)?;
    put_u32(&mut w, e.d)?;
    put_f32s(&mut w, &e.data)
}

pub fn read_temb(r: impl Read) -> Result<Embeddings> {
    let mut r = Reader { inner: r, what: "TEMB" };
    r.header(TEMB_MAGIC, TEMB_VERSION)?;
    let count = r.usize()?;
    let d = r.usize()?;
    let data = r.f32s(count.checked_mul(d).ok_or_else(|| Error::Format("dump too large".into()))?)?;
    r.finish()?;
    Ok(Embeddings { count, d, data })
}

pub fn save_temb(path: &Path, e: &Embeddings) -> Result<()> {
    save_with(path, |w| write_temb(w, e))
}

pub fn load_temb(path: &Path) -> Result<Embeddings> {
    read_temb(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------- TSCK

/// Everything needed to embed new raw trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub stats: NormStats,
    pub scale: SimilarityScale,
    pub kind: MeasureKind,
    /// Projection used for the training data.
    pub frame: LocalFrame,
}

const MAX_NAME: usize = 256;

pub fn write_checkpoint(mut w: impl Write, ck: &Checkpoint) -> Result<()> {
    let c = ck.model.config();
    w.write_all(TSCK_MAGIC)?;
    put_u32(&mut w, TSCK_VERSION as usize)?;
    for v in [c.d, c.heads, c.layers, c.kernel, c.ffn_hidden] {
        put_u32(&mut w, v)?;
    }
    put_f64(&mut w, c.leaky_slope)?;
    put_f64(&mut w, c.rope_base)?;
    for v in ck.stats.mean.iter().chain(&ck.stats.std) {
        put_f64(&mut w, *v)?;
    }
    put_f64(&mut w, ck.scale.get())?;
    put_u32(&mut w, ck.kind.code() as usize)?;
    put_f64(&mut w, ck.frame.lat0_deg)?;
    let params = ck.model.params();
    put_u32(&mut w, params.len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.shape().len())?;
        for &s in t.shape() {
            put_u32(&mut w, s)?;
        }
        put_f32s(&mut w, t.data())?;
    }
    let bn = ck.model.bn_running();
    put_u32(&mut w, bn.len())?;
    for r in bn {
        put_u32(&mut w, r.mean.len())?;
        put_f32s(&mut w, &r.mean)?;
        put_f32s(&mut w, &r.var)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r, what: "checkpoint" };
    r.header(TSCK_MAGIC, TSCK_VERSION)?;
    let config = ModelConfig {
        d: r.usize()?,
        heads: r.usize()?,
        layers: r.usize()?,
        kernel: r.usize()?,
        ffn_hidden: r.usize()?,
        leaky_slope: r.f64()?,
        rope_base: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid model configuration: {e}")))?;
    if config.d > 1 << 14 || config.layers > 64 || config.ffn_hidden > 1 << 16 || config.kernel > 64 {
        return Err(Error::Format(format!("implausible model configuration {config:?}")));
    }
    let mut stats = NormStats::identity();
    for i in 0..FEATURES {
        stats.mean[i] = r.f64()?;
    }
    for i in 0..FEATURES {
        stats.std[i] = r.f64()?;
    }
    let scale = SimilarityScale::new(r.f64()?).map_err(|e| Error::Format(e.to_string()))?;
    let code = r.u32()?;
    let kind = MeasureKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown measure code {code}")))?;
    let frame = LocalFrame::new(r.f64()?).map_err(|e| Error::Format(e.to_string()))?;

    let mut model = Model::<f32>::new(config.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .names()
        .iter()
        .zip(model.params().tensors())
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let count = r.usize()?;
    if count != expected.len() {
        return Err(Error::Format(format!("checkpoint has {count} parameters, model needs {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.usize()?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("parameter name length {len} too large")));
        }
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.usize()?;
        if ndim > 4 {
            return Err(Error::Format(format!("parameter {name} has {ndim} axes")));
        }
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(Error::Format(format!(
                "parameter {name} {shape:?} does not match expected {want_name} {want_shape:?}"
            )));
        }
        let data = r.f32s(shape.iter().product())?;
        tensors.push(Tensor::new(&shape, data)?);
    }
    let nbn = r.usize()?;
    if nbn != model.bn_running().len() {
        return Err(Error::Format(format!("checkpoint has {nbn} batch-norm layers")));
    }
    let mut bn = Vec::with_capacity(nbn);
    for _ in 0..nbn {
        let c = r.usize()?;
        if c != config.d {
            return Err(Error::Format(format!("batch-norm width {c}, expected {}", config.d)));
        }
        bn.push(BnRunning {
            mean: r.f32s(c)?,
            var: r.f32s(c)?,
        });
    }
    r.finish()?;
    model.load_state(tensors, bn)?;
    Ok(Checkpoint {
        model,
        stats,
        scale,
        kind,
        frame,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    save_with(path, |w| write_checkpoint(w, ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::synth_generate;
    use crate::geo::SynthConfig;
    use crate::model::encode;

    #[test]
    fn trajectory_text_round_trip() {
        let text = "# header\n\na\t-8.61,41.15;-8.6101,41.1502\nb\t1e-3,2.5\r\n";
        let ts = read_trajectories(text.as_bytes()).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].id, "a");
        assert_eq!(ts[0].points[1], Point::new(-8.6101, 41.1502));
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &ts).unwrap();
        assert_eq!(read_trajectories(&buf[..]).unwrap(), ts);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        for (text, line) in [
            ("a\t1,2\nb\tabc,2\n", 2),
            ("# c\nnotab\n", 2),
            ("a\t1;2\n", 1),
            ("\tx\n", 1),
        ] {
            match read_trajectories(text.as_bytes()) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(write_trajectories(Vec::new(), &[Trajectory::new("a\tb", vec![])]).is_err());
    }

    #[test]
    fn tsim_round_trip_and_corruption() {
        let m = GroundTruthMatrix::from_values(2, vec![1.0, 0.25, 0.25, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_tsim(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 12 + 16);
        assert_eq!(&buf[..4], b"TSIM");
        assert_eq!(read_tsim(&buf[..]).unwrap(), m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tsim(&bad[..]), Err(Error::Format(_))));
        let mut newer = buf.clone();
        newer[4] = 2;
        assert!(matches!(read_tsim(&newer[..]), Err(Error::Version { found: 2, .. })));
        assert!(matches!(read_tsim(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tsim(&extra[..]).is_err());
    }

    #[test]
    fn temb_round_trip() {
        let e = Embeddings::from_rows(&[vec![1.0, -2.5], vec![f32::MIN_POSITIVE, 3.0]], 2).unwrap();
        let mut buf = Vec::new();
        write_temb(&mut buf, &e).unwrap();
        assert_eq!(read_temb(&buf[..]).unwrap(), e);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        buf[1] = b'?';
        assert!(matches!(read_temb(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ts = synth_generate(&SynthConfig {
            count: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = Model::<f32>::new(ModelConfig::new(16, 2, 2).unwrap(), 3).unwrap();
        let stats = NormStats {
            mean: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            std: [1.5; 7],
        };
        let ck = Checkpoint {
            model,
            stats,
            scale: SimilarityScale::new(123.5).unwrap(),
            kind: MeasureKind::Edwp,
            frame: LocalFrame::new(41.15).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, ck);
        for t in &ts {
            assert_eq!(encode(t, &back.model, &back.stats).unwrap(), encode(t, &ck.model, &ck.stats).unwrap());
        }

        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
        let mut newer = buf.clone();
        newer[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&newer[..]), Err(Error::Version { found: 7, .. })));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&buf[..20]), Err(Error::Format(_))));
    }
}
