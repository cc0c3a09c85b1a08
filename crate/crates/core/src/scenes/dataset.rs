use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::NUM_CLASSES;
use super::Scene;
use crate::condition::ConditionAttributes;
use crate::error::{Error, Result};
use crate::fusion::NUM_MODALITIES;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CFD1";
pub const DATASET_VERSION: u32 = 1;

const ATTR_BYTES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Per-modality channel statistics used to normalize every split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub modalities: [ModalityStats; NUM_MODALITIES],
}

impl NormStats {
    pub fn compute(scenes: &[Scene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument {
                op: "normalization_stats",
                msg: "no scenes".into(),
            });
        }
        let modalities = std::array::from_fn(|m| {
            let mut sum = [0.0; 3];
            let mut count = 0.0;
            for s in scenes {
                for px in s.images[m].data().chunks(3) {
                    for c in 0..3 {
                        sum[c] += px[c];
                    }
                    count += 1.0;
                }
            }
            let mean = sum.map(|v| v / count);
            let mut var = [0.0; 3];
            for s in scenes {
                for px in s.images[m].data().chunks(3) {
                    for c in 0..3 {
                        var[c] += (px[c] - mean[c]).powi(2);
                    }
                }
            }
            let std = var.map(|v| {
                let sd = (v / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            });
            ModalityStats { mean, std }
        });
        Ok(Self { modalities })
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for (img, st) in out.images.iter_mut().zip(&self.modalities) {
            for px in img.data_mut().chunks_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] - st.mean[c]) / st.std[c];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    split: String,
    scene_count: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    /// Byte offset of each scene block from the start of the block section.
    offsets: Vec<u64>,
    normalization: NormStats,
}

/// One split as stored on disk: raw scenes plus the normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub scenes: Vec<Scene>,
    pub stats: NormStats,
}

impl Dataset {
    /// Scenes with the per-modality normalization applied.
    pub fn normalized(&self) -> Vec<Scene> {
        self.scenes.iter().map(|s| self.stats.apply(s)).collect()
    }
}

fn block_len(h: usize, w: usize) -> usize {
    ATTR_BYTES + 8 + h * w + NUM_MODALITIES * h * w * 3 * 4
}

/// Serializes a split. `stats` defaults to statistics of `scenes` themselves,
/// which is what the training split uses.
pub fn write_dataset_to<W: Write>(
    mut out: W,
    split: &str,
    scenes: &[Scene],
    stats: Option<&NormStats>,
) -> Result<NormStats> {
    let first = scenes.first().ok_or_else(|| Error::InvalidArgument {
        op: "write_dataset",
        msg: "no scenes".into(),
    })?;
    let (h, w) = (first.height, first.width);
    if scenes.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::InvalidArgument {
            op: "write_dataset",
            msg: "scenes differ in size".into(),
        });
    }
    let stats = match stats {
        Some(s) => *s,
        None => NormStats::compute(scenes)?,
    };
    let blen = block_len(h, w) as u64;
    let manifest = Manifest {
        version: DATASET_VERSION,
        split: split.to_string(),
        scene_count: scenes.len(),
        height: h,
        width: w,
        num_classes: NUM_CLASSES,
        offsets: (0..scenes.len() as u64).map(|i| i * blen).collect(),
        normalization: stats,
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in scenes {
        out.write_all(&s.attrs.to_bytes())?;
        out.write_all(&s.seed.to_le_bytes())?;
        out.write_all(&s.semantic_map)?;
        for img in &s.images {
            for &v in img.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(stats)
}

pub fn write_dataset(path: &Path, split: &str, scenes: &[Scene], stats: Option<&NormStats>) -> Result<NormStats> {
    write_dataset_to(BufWriter::new(File::create(path)?), split, scenes, stats)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_dataset_from(buf: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let at = cur.pos;
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Corrupt {
            offset: at as u64,
            msg: format!("unsupported version {version}"),
        });
    }
    let len = cur.u32("manifest length")? as usize;
    let at = cur.pos;
    let manifest: Manifest = serde_json::from_slice(cur.take(len, "manifest")?).map_err(|e| Error::Corrupt {
        offset: at as u64,
        msg: format!("manifest: {e}"),
    })?;
    let (h, w) = (manifest.height, manifest.width);
    let blen = block_len(h, w);
    if manifest.offsets.len() != manifest.scene_count
        || manifest.offsets.iter().enumerate().any(|(i, &o)| o != (i * blen) as u64)
    {
        return Err(Error::Corrupt {
            offset: at as u64,
            msg: "manifest offsets inconsistent with scene size".into(),
        });
    }
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    for _ in 0..manifest.scene_count {
        let at = cur.pos;
        let attr_bytes: [u8; ATTR_BYTES] = cur.take(ATTR_BYTES, "attributes")?.try_into().expect("6 bytes");
        let attrs = ConditionAttributes::from_bytes(attr_bytes)
            .filter(|a| a.validate().is_ok())
            .ok_or_else(|| Error::Corrupt {
                offset: at as u64,
                msg: "invalid attribute bytes".into(),
            })?;
        let seed = u64::from_le_bytes(cur.take(8, "seed")?.try_into().expect("8 bytes"));
        let at = cur.pos;
        let semantic_map = cur.take(h * w, "semantic map")?.to_vec();
        if semantic_map.iter().any(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Corrupt {
                offset: at as u64,
                msg: "class id out of range".into(),
            });
        }
        let mut images = Vec::with_capacity(NUM_MODALITIES);
        for _ in 0..NUM_MODALITIES {
            let at = cur.pos;
            let raw = cur.take(h * w * 3 * 4, "image")?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt {
                    offset: at as u64,
                    msg: "non-finite pixel".into(),
                });
            }
            images.push(Tensor::new(vec![h, w, 3], data)?);
        }
        scenes.push(Scene {
            height: h,
            width: w,
            semantic_map,
            images: images.try_into().expect("four modalities"),
            attrs,
            seed,
        });
    }
    if cur.pos != buf.len() {
        return Err(cur.corrupt("trailing bytes"));
    }
    Ok(Dataset {
        split: manifest.split,
        scenes,
        stats: manifest.normalization,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    read_dataset_from(&buf)
}
