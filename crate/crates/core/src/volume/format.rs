//! RM3D scene container and the CSV sample sidecar.
//!
//! Layout (little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 4                | magic `RM3D`                              |
//! | 4                | `u32` version (1)                         |
//! | 12               | `u32` N, H, W                             |
//! | 4·N·H·W          | `f32` volume, layer-major then row-major  |
//! | 4·H·W            | `f32` building heights                    |
//! | 4                | `u32` metadata length                     |
//! | len              | UTF-8 JSON metadata                       |

use std::io::{Read, Write};
use std::path::Path;

use super::{BuildingHeightMap, RadioVolume, SampleObservation, SampleSet, Scene, SceneMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RM3D";
pub const VERSION: u32 = 1;

pub fn save_scene<T: Scalar>(scene: &Scene<T>) -> Result<Vec<u8>> {
    let (n, h, w) = scene.volume.dims();
    let meta = serde_json::to_vec(&scene.meta)?;
    let mut out = Vec::with_capacity(20 + 4 * (n * h * w + h * w) + 4 + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in scene.volume.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    for &v in scene.buildings.heights() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated payload: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::format(self.pos, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn load_scene(bytes: &[u8]) -> Result<Scene<f32>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"RM3D\"")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = cur.u32("N")? as usize;
    let h = cur.u32("H")? as usize;
    let w = cur.u32("W")? as usize;
    let vol_at = cur.pos;
    let volume = cur.f32s(n * h * w, "volume data")?;
    let heights_at = cur.pos;
    let heights = cur.f32s(h * w, "building heights")?;
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_at = cur.pos;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes after metadata"));
    }
    let meta: SceneMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::format(meta_at, format!("metadata JSON: {e}")))?;
    let volume = RadioVolume::new(n, h, w, volume, meta.altitudes_m.clone())
        .map_err(|e| Error::format(vol_at, e.to_string()))?;
    let buildings =
        BuildingHeightMap::new(h, w, heights).map_err(|e| Error::format(heights_at, e.to_string()))?;
    Scene::new(volume, buildings, meta).map_err(|e| Error::format(meta_at, e.to_string()))
}

pub fn write_scene_file<T: Scalar>(path: &Path, scene: &Scene<T>) -> Result<()> {
    let bytes = save_scene(scene)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_scene_file(path: &Path) -> Result<Scene<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_scene(&bytes)
}

/// Writes `x,y,z,value` rows.
pub fn write_samples_csv<W: Write>(out: W, samples: &SampleSet) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for o in samples.observations() {
        wtr.serialize(o)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<SampleSet> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "value"] {
        return Err(Error::invalid(format!("unexpected sample CSV header {headers:?}")));
    }
    let obs = rdr
        .deserialize::<SampleObservation>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    SampleSet::new(obs)
}
