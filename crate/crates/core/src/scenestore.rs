//! Single-file scene container.
//!
//! ```text
//! "RLF1" | version u32 | payload length u64 | crc32(payload) u32 | payload
//! ```
//!
//! The payload is little-endian: a header of counts and dimensions, the splat
//! arrays, the three MLP layers, the latents with their view ids, and a JSON
//! metadata block.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splatfield::{AppearanceMlp, AuxLatent, Dense, SceneMetadata, SplatCloud, SplatScene, FEATURE_DIM, LATENT_DIM, MLP_INPUT, MLP_OUTPUT, MLP_WIDTH};

pub const MAGIC: &[u8; 4] = b"RLF1";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8 + 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a scene file (bad magic)")]
    BadMagic,
    #[error("unsupported scene file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("scene file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed scene file: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct MetadataBlock {
    format_version: u32,
    #[serde(flatten)]
    metadata: SceneMetadata,
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.write_f32::<LE>(v).expect("write to Vec");
    }
}

/// Serializes a scene to the container format.
pub fn encode_scene(scene: &SplatScene) -> Vec<u8> {
    let s = &scene.splats;
    let n = s.len();
    let mut p = Vec::with_capacity(n * (3 + 4 + 3 + 1 + FEATURE_DIM) * 4 + scene.mlp.param_count() * 4 + 1024);
    p.write_u64::<LE>(n as u64).unwrap();
    for v in [FEATURE_DIM, MLP_INPUT, MLP_WIDTH, MLP_OUTPUT, scene.latents.len(), LATENT_DIM] {
        p.write_u32::<LE>(v as u32).unwrap();
    }
    p.write_u32::<LE>(0).unwrap();
    put_f32s(&mut p, scene.background);
    put_f32s(&mut p, s.positions.iter().flatten().copied());
    put_f32s(&mut p, s.rotations.iter().flatten().copied());
    put_f32s(&mut p, s.log_scales.iter().flatten().copied());
    put_f32s(&mut p, s.logit_opacities.iter().copied());
    put_f32s(&mut p, s.features.iter().flatten().copied());
    for layer in &scene.mlp.layers {
        p.write_u32::<LE>(layer.inputs as u32).unwrap();
        p.write_u32::<LE>(layer.outputs as u32).unwrap();
        put_f32s(&mut p, layer.weights.iter().copied());
        put_f32s(&mut p, layer.bias.iter().copied());
    }
    for l in &scene.latents {
        p.write_u32::<LE>(l.view_id.len() as u32).unwrap();
        p.extend_from_slice(l.view_id.as_bytes());
        put_f32s(&mut p, l.a.iter().copied());
    }
    let meta = serde_json::to_vec(&MetadataBlock { format_version: VERSION, metadata: scene.metadata.clone() }).expect("metadata serializes");
    p.write_u32::<LE>(meta.len() as u32).unwrap();
    p.extend_from_slice(&meta);

    let mut out = Vec::with_capacity(PREAMBLE + p.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u64::<LE>(p.len() as u64).unwrap();
    out.write_u32::<LE>(crc32fast::hash(&p)).unwrap();
    out.extend_from_slice(&p);
    out
}

fn fmt_err(e: std::io::Error) -> StoreError {
    StoreError::Format(e.to_string())
}

fn read_f32s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f32>, StoreError> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64) * 4 > remaining {
        return Err(StoreError::Format("array runs past end of payload".into()));
    }
    let mut v = vec![0f32; n];
    r.read_f32_into::<LE>(&mut v).map_err(fmt_err)?;
    Ok(v)
}

fn chunked<const N: usize>(v: Vec<f32>) -> Vec<[f32; N]> {
    v.chunks_exact(N).map(|c| c.try_into().expect("exact chunk")).collect()
}

fn expect_dim(name: &str, got: u32, want: usize) -> Result<(), StoreError> {
    if got as usize == want {
        Ok(())
    } else {
        Err(StoreError::Format(format!("{name} is {got}, this build supports {want}")))
    }
}

/// Parses and validates a container.
pub fn decode_scene(bytes: &[u8]) -> Result<SplatScene, StoreError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(StoreError::Format("truncated header".into()));
    }
    let mut r = Cursor::new(&bytes[4..PREAMBLE]);
    let version = r.read_u32::<LE>().map_err(fmt_err)?;
    if version != VERSION {
        return Err(StoreError::Version { found: version, expected: VERSION });
    }
    let len = r.read_u64::<LE>().map_err(fmt_err)?;
    let stored = r.read_u32::<LE>().map_err(fmt_err)?;
    let payload = &bytes[PREAMBLE..];
    let computed = crc32fast::hash(payload);
    if computed != stored || payload.len() as u64 != len {
        return Err(StoreError::Checksum { stored, computed });
    }

    let mut r = Cursor::new(payload);
    let n = r.read_u64::<LE>().map_err(fmt_err)? as usize;
    let mut dims = [0u32; 6];
    for d in &mut dims {
        *d = r.read_u32::<LE>().map_err(fmt_err)?;
    }
    let [feature, input, width, output, n_latents, latent_dim] = dims;
    expect_dim("feature size", feature, FEATURE_DIM)?;
    expect_dim("MLP input size", input, MLP_INPUT)?;
    expect_dim("MLP width", width, MLP_WIDTH)?;
    expect_dim("MLP output size", output, MLP_OUTPUT)?;
    expect_dim("latent size", latent_dim, LATENT_DIM)?;
    let _flags = r.read_u32::<LE>().map_err(fmt_err)?;
    let bg = read_f32s(&mut r, 3)?;
    let splats = SplatCloud {
        positions: chunked::<3>(read_f32s(&mut r, n * 3)?),
        rotations: chunked::<4>(read_f32s(&mut r, n * 4)?),
        log_scales: chunked::<3>(read_f32s(&mut r, n * 3)?),
        logit_opacities: read_f32s(&mut r, n)?,
        features: chunked::<FEATURE_DIM>(read_f32s(&mut r, n * FEATURE_DIM)?),
    };
    let mut layers = Vec::with_capacity(3);
    for (inputs, outputs) in [(MLP_INPUT, MLP_WIDTH), (MLP_WIDTH, MLP_WIDTH), (MLP_WIDTH, MLP_OUTPUT)] {
        let i = r.read_u32::<LE>().map_err(fmt_err)? as usize;
        let o = r.read_u32::<LE>().map_err(fmt_err)? as usize;
        if (i, o) != (inputs, outputs) {
            return Err(StoreError::Format(format!("layer shape {o}x{i}, expected {outputs}x{inputs}")));
        }
        layers.push(Dense { inputs, outputs, weights: read_f32s(&mut r, inputs * outputs)?, bias: read_f32s(&mut r, outputs)? });
    }
    let mlp = AppearanceMlp { layers: layers.try_into().expect("three layers") };
    let mut latents = Vec::with_capacity(n_latents as usize);
    for _ in 0..n_latents {
        let id_len = r.read_u32::<LE>().map_err(fmt_err)? as usize;
        if id_len > payload.len() {
            return Err(StoreError::Format("view id runs past end of payload".into()));
        }
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(fmt_err)?;
        let view_id = String::from_utf8(id).map_err(|_| StoreError::Format("view id is not UTF-8".into()))?;
        latents.push(AuxLatent { view_id, a: read_f32s(&mut r, LATENT_DIM)? });
    }
    let meta_len = r.read_u32::<LE>().map_err(fmt_err)? as usize;
    let start = r.position() as usize;
    let meta_bytes = payload.get(start..start + meta_len).ok_or_else(|| StoreError::Format("metadata runs past end of payload".into()))?;
    if start + meta_len != payload.len() {
        return Err(StoreError::Format("trailing bytes after metadata".into()));
    }
    let meta: MetadataBlock = serde_json::from_slice(meta_bytes).map_err(|e| StoreError::Format(format!("metadata: {e}")))?;
    let scene = SplatScene { splats, mlp, latents, background: [bg[0], bg[1], bg[2]], metadata: meta.metadata };
    scene.validate().map_err(|e| StoreError::Format(e.to_string()))?;
    Ok(scene)
}

/// Writes to a sibling temporary file, then renames into place.
pub fn save_scene(scene: &SplatScene, path: &Path) -> Result<(), StoreError> {
    let io = |source| StoreError::Io { path: path.display().to_string(), source };
    let file_name = path.file_name().ok_or_else(|| io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, encode_scene(scene)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_scene(path: &Path) -> Result<SplatScene, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    decode_scene(&bytes)
}
