//! Self-describing binary container for attention archives and
//! mask/bias stacks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"SCTC"
//! 4       4           version (u32) = 1
//! 8       4           metadata length M (u32)
//! 12      M           metadata, UTF-8 JSON object with a "kind" field
//! 12+M    4           entry count E (u32)
//! …       24·E        entry table: tag, step, layer, module, rows, cols (u32 each)
//! …       4·Σrows·cols payload: f32, entries in table order, row-major
//! ```
//!
//! Tags: 0 = attention map (`rows` = spatial positions, `cols` = tokens),
//! 1 = control-scale mask, 2 = attention bias (`rows`×`cols` = height×width).
//! Layer 0 is the middle block; layer `l ≥ 1` is decoder block `l`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ArchiveKey, AttentionArchive};
use crate::backbone::LayerId;
use crate::bias::BiasStack;
use crate::error::{Error, Result};
use crate::mask::ControlScaleStack;
use crate::tensor::{AttnMatrix, Grid, Resolution};

pub const MAGIC: &[u8; 4] = b"SCTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum Tag {
    Attention = 0,
    ControlMask = 1,
    Bias = 2,
}

impl Tag {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(Tag::Attention),
            1 => Ok(Tag::ControlMask),
            2 => Ok(Tag::Bias),
            _ => Err(Error::Format(format!("unknown entry tag {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub tag: Tag,
    pub step: u32,
    pub layer: u32,
    pub module: u32,
    pub rows: u32,
    pub cols: u32,
    pub values: Vec<f32>,
}

/// A parsed container: JSON metadata plus tagged float arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let payload: usize = self.entries.iter().map(|e| e.values.len()).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + 24 * self.entries.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.entries.len())?.to_le_bytes());
        for e in &self.entries {
            if e.values.len() != e.rows as usize * e.cols as usize {
                return Err(Error::Format(format!(
                    "entry holds {} values for {}x{}",
                    e.values.len(),
                    e.rows,
                    e.cols
                )));
            }
            for v in [e.tag as u32, e.step, e.layer, e.module, e.rows, e.cols] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut heads = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let tag = Tag::from_u32(r.u32()?)?;
            let [step, layer, module, rows, cols] =
                [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            heads.push((tag, step, layer, module, rows, cols));
        }
        let mut entries = Vec::with_capacity(heads.len());
        for (tag, step, layer, module, rows, cols) in heads {
            let n = rows as usize * cols as usize;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("overflow".into()))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry {
                tag,
                step,
                layer,
                module,
                rows,
                cols,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, entries })
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|k| k.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    layer: LayerId,
    height: usize,
    width: usize,
    modules: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    kind: String,
    token_count: usize,
    layers: Vec<LayerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControlMeta {
    fallback_layers: Vec<LayerId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BiasMeta {
    lambda: f32,
    n_tar: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StacksMeta {
    kind: String,
    control: Option<ControlMeta>,
    bias: Option<BiasMeta>,
}

pub const ARCHIVE_KIND: &str = "attention_archive";
pub const STACKS_KIND: &str = "stacks";

pub fn archive_to_container(archive: &AttentionArchive) -> Result<Container> {
    let meta = ArchiveMeta {
        kind: ARCHIVE_KIND.into(),
        token_count: archive.token_count(),
        layers: archive
            .layer_resolutions()
            .iter()
            .map(|(&layer, res)| LayerMeta {
                layer,
                height: res.height,
                width: res.width,
                modules: archive.modules_per_layer()[&layer],
            })
            .collect(),
    };
    let entries = archive
        .entries()
        .map(|(k, m)| {
            Ok(Entry {
                tag: Tag::Attention,
                step: len_u32(k.step)?,
                layer: k.layer.0,
                module: k.module,
                rows: len_u32(m.rows())?,
                cols: len_u32(m.cols())?,
                values: m.data().to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Container {
        meta: serde_json::to_value(meta)?,
        entries,
    })
}

pub fn archive_from_container(c: &Container) -> Result<AttentionArchive> {
    let meta: ArchiveMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != ARCHIVE_KIND {
        return Err(Error::Format(format!(
            "expected {ARCHIVE_KIND}, got {}",
            meta.kind
        )));
    }
    let res = meta
        .layers
        .iter()
        .map(|l| (l.layer, Resolution::new(l.height, l.width)))
        .collect();
    let modules = meta.layers.iter().map(|l| (l.layer, l.modules)).collect();
    let mut archive = AttentionArchive::new(res, modules, meta.token_count)?;
    for e in &c.entries {
        if e.tag != Tag::Attention {
            return Err(Error::Format("non-attention entry in archive".into()));
        }
        let map = AttnMatrix::new(e.rows as usize, e.cols as usize, e.values.clone())?;
        archive.insert(
            ArchiveKey::new(e.step as usize, LayerId(e.layer), e.module),
            map,
        )?;
    }
    Ok(archive)
}

pub fn stacks_to_container(
    control: Option<&ControlScaleStack>,
    bias: Option<&BiasStack>,
) -> Result<Container> {
    let meta = StacksMeta {
        kind: STACKS_KIND.into(),
        control: control.map(|s| ControlMeta {
            fallback_layers: s.fallback_layers().iter().copied().collect(),
        }),
        bias: bias.map(|b| BiasMeta {
            lambda: b.lambda(),
            n_tar: b.n_tar(),
        }),
    };
    let mut entries = Vec::new();
    if let Some(stack) = control {
        for (&(step, layer), g) in stack.masks() {
            entries.push(grid_entry(Tag::ControlMask, step, layer, 0, g)?);
        }
    }
    if let Some(stack) = bias {
        for (k, g) in stack.biases() {
            entries.push(grid_entry(Tag::Bias, k.step, k.layer, k.module, g)?);
        }
    }
    Ok(Container {
        meta: serde_json::to_value(meta)?,
        entries,
    })
}

fn grid_entry(tag: Tag, step: usize, layer: LayerId, module: u32, g: &Grid) -> Result<Entry> {
    Ok(Entry {
        tag,
        step: len_u32(step)?,
        layer: layer.0,
        module,
        rows: len_u32(g.height())?,
        cols: len_u32(g.width())?,
        values: g.data().to_vec(),
    })
}

pub fn stacks_from_container(
    c: &Container,
) -> Result<(Option<ControlScaleStack>, Option<BiasStack>)> {
    let meta: StacksMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != STACKS_KIND {
        return Err(Error::Format(format!(
            "expected {STACKS_KIND}, got {}",
            meta.kind
        )));
    }
    let mut control = meta.control.as_ref().map(|m| {
        let mut s = ControlScaleStack::new();
        for &l in &m.fallback_layers {
            s.mark_fallback(l);
        }
        s
    });
    let mut biases = BTreeMap::new();
    for e in &c.entries {
        let grid = Grid::new(
            Resolution::new(e.rows as usize, e.cols as usize),
            e.values.clone(),
        )?;
        match e.tag {
            Tag::ControlMask => control
                .as_mut()
                .ok_or_else(|| Error::Format("mask entry without control metadata".into()))?
                .insert(e.step as usize, LayerId(e.layer), grid),
            Tag::Bias => {
                biases.insert(
                    ArchiveKey::new(e.step as usize, LayerId(e.layer), e.module),
                    grid,
                );
            }
            Tag::Attention => return Err(Error::Format("attention entry in stacks".into())),
        }
    }
    let bias = match meta.bias {
        Some(m) => Some(BiasStack::from_parts(biases, m.lambda, m.n_tar)),
        None if biases.is_empty() => None,
        None => return Err(Error::Format("bias entries without bias metadata".into())),
    };
    Ok((control, bias))
}
