//! Portable any-map images, checkpoints and plain-text reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, ClipMetrics, JfScore};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RVOSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary P5 graymap with 0/255 values.
pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

/// P5 graymap of a `[H, W]` map in `[0, 1]`, scaled to 0..=255.
pub fn encode_gray_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("graymap {s:?}, expected [H,W]"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// P6 pixmap of a `[H, W, 3]` frame in `[0, 1]`.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = frame.shape()[..] else {
        return Err(Error::Input(format!("pixmap {:?}, expected [H,W,3]", frame.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated any-map header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates header and raster
    Ok((fields, i + 1))
}

/// Parse a P5 graymap; nonzero pixels are foreground.
pub fn decode_mask_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (f, body) = header_fields(bytes, 4)?;
    if f[0] != "P5" || f[3] != "255" {
        return Err(Error::Format(format!("not an 8-bit P5 graymap: {} {}", f[0], f[3])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad size {s:?}")));
    let (w, h) = (parse(&f[1])?, parse(&f[2])?);
    let raster = bytes.get(body..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::Format(format!("{} raster bytes for {w}x{h}", raster.len())));
    }
    BinaryMask::new(h, w, raster.iter().map(|&b| b > 0).collect())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// `<clip>_<frame>.pgm`
pub fn mask_file_name(clip: usize, frame: usize) -> String {
    format!("{clip}_{frame}.pgm")
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version} unsupported")));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

/// Load a checkpoint into `store`; names and shapes must match exactly.
pub fn load_checkpoint_into(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let entries = decode_checkpoint(bytes)?;
    if entries.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for ((name, _), id) in entries.iter().zip(store.ids()) {
        if name != store.name(id) {
            return Err(Error::Format(format!(
                "checkpoint parameter {name:?} where model expects {:?}",
                store.name(id)
            )));
        }
    }
    store.load(entries.into_iter().map(|(_, t)| t).collect())
}

/// Names and shapes of every parameter plus the seed.
pub fn checkpoint_manifest(store: &ParamStore, seed: u64) -> String {
    let mut s = format!("seed = {seed}\nparameters = {}\nvalues = {}\n", store.len(), store.numel());
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{name} = {}", dims.join("x"));
    }
    s
}

/// One clip record of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip: usize,
    pub query: String,
    pub metrics: ClipMetrics,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")
}

/// Key-value metrics report with a fixed field order.
pub fn metrics_report(records: &[ClipRecord], summary: JfScore) -> Result<String> {
    let mut s = String::new();
    for r in records {
        let score = r.metrics.score()?;
        let c = r.clip;
        let _ = writeln!(s, "clip.{c}.query = {}", r.query);
        let _ = writeln!(s, "clip.{c}.frames = {}", r.metrics.js.len());
        let _ = writeln!(s, "clip.{c}.j = {}", join(&r.metrics.js));
        let _ = writeln!(s, "clip.{c}.f = {}", join(&r.metrics.fs));
        let _ = writeln!(s, "clip.{c}.mean_j = {:.6}", score.j);
        let _ = writeln!(s, "clip.{c}.mean_f = {:.6}", score.f);
        let _ = writeln!(s, "clip.{c}.jf = {:.6}", score.jf);
    }
    let _ = writeln!(s, "summary.clips = {}", records.len());
    let _ = writeln!(s, "summary.j = {:.6}", summary.j);
    let _ = writeln!(s, "summary.f = {:.6}", summary.f);
    let _ = writeln!(s, "summary.jf = {:.6}", summary.jf);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::ParamBuilder;

    #[test]
    fn pgm_round_trip() {
        let m = BinaryMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let bytes = encode_mask_pgm(&m);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[255, 0, 255, 0, 0, 255]);
        assert_eq!(decode_mask_pgm(&bytes).unwrap(), m);
        assert!(decode_mask_pgm(&bytes[..13]).is_err());
        assert!(decode_mask_pgm(b"P6\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        b.uniform("a", &[2, 3], 3);
        b.uniform("b.c", &[4], 4);
        let bytes = encode_checkpoint(&store);
        let mut other = store.clone();
        other.tensors_mut()[0] = Tensor::zeros(&[2, 3]);
        load_checkpoint_into(&bytes, &mut other).unwrap();
        assert_eq!(other.tensors(), store.tensors());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let manifest = checkpoint_manifest(&store, 9);
        assert!(manifest.contains("a = 2x3\nb.c = 4\n"));
    }

    #[test]
    fn report_layout() {
        let rec = ClipRecord {
            clip: 3,
            query: "red small disc moving up".into(),
            metrics: ClipMetrics {
                js: vec![1.0, 0.5],
                fs: vec![1.0, 0.25],
            },
        };
        let summary = rec.metrics.score().unwrap();
        let r = metrics_report(&[rec], summary).unwrap();
        assert!(r.starts_with("clip.3.query = red small disc moving up\nclip.3.frames = 2\n"));
        assert!(r.contains("clip.3.j = 1.000000 0.500000\n"));
        assert!(r.ends_with("summary.jf = 0.687500\n"));
    }
}
