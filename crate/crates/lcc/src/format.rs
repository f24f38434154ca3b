//! Binary formats. All integers and floats are little-endian; every file
//! ends with the CRC-32 (IEEE) of all preceding bytes. See `docs/formats.md`.
//!
//! * `LCC1` — a compiled buffer artifact.
//! * `LCCM` — a base-model checkpoint.
//! * `LCCA` — the adapter sidecar written by coupled compiles.

use crate::error::FormatError;
use lcc_core::lora::{LoraAdapter, LoraPair, Projection};
use lcc_core::model::{Fingerprint, ModelConfig, ModelWeights};
use lcc_core::{BufferArtifact, SegmentSet, StorageDtype, Tensor};

pub const ARTIFACT_MAGIC: [u8; 4] = *b"LCC1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LCCM";
pub const ADAPTER_MAGIC: [u8; 4] = *b"LCCA";
pub const VERSION: u16 = 1;

/// Bytes before the artifact payload.
pub const ARTIFACT_HEADER_LEN: usize = 4 + 2 + 32 + 4 * 4 + 8 + 1 + 8 + 4 + 32;
const CRC_LEN: usize = 4;

type Result<T> = std::result::Result<T, FormatError>;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.bytes(&magic);
        w.u16(VERSION);
        w
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u16(&mut self, x: u16) {
        self.bytes(&x.to_le_bytes());
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated {
            needed: self.at.saturating_add(n),
            found: self.buf.len(),
        })?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.arr::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Header("value exceeds usize".into()))
    }
}

/// Magic, version and CRC checks shared by all three formats.
///
/// `declared_len` computes the total length the header promises; when the
/// CRC fails on a stream shorter than that, the stream is reported as
/// truncated rather than corrupted.
fn open<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    min_len: usize,
    declared_len: impl Fn(&'a [u8]) -> Option<usize>,
) -> Result<Reader<'a>> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: min_len,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if found != magic {
        return Err(FormatError::BadMagic { expected: magic, found });
    }
    if bytes.len() < 6 {
        return Err(FormatError::Truncated {
            needed: min_len,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if bytes.len() < min_len {
        return Err(FormatError::Truncated {
            needed: min_len,
            found: bytes.len(),
        });
    }
    let declared = declared_len(bytes);
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return match declared {
            Some(needed) if bytes.len() < needed => Err(FormatError::Truncated {
                needed,
                found: bytes.len(),
            }),
            _ => Err(FormatError::CrcMismatch { stored, computed }),
        };
    }
    match declared {
        Some(n) if bytes.len() > n => return Err(FormatError::TrailingBytes { extra: bytes.len() - n }),
        Some(n) if bytes.len() < n => {
            return Err(FormatError::Truncated {
                needed: n,
                found: bytes.len(),
            })
        }
        None => return Err(FormatError::Header("declared sizes overflow".into())),
        _ => {}
    }
    Ok(Reader {
        buf: &bytes[..bytes.len() - CRC_LEN],
        at: 6,
    })
}

fn dtype_tag(d: StorageDtype) -> u8 {
    match d {
        StorageDtype::F32 => 0,
        StorageDtype::F64 => 1,
    }
}

fn dtype_from_tag(t: u8) -> Option<StorageDtype> {
    match t {
        0 => Some(StorageDtype::F32),
        1 => Some(StorageDtype::F64),
        _ => None,
    }
}

/// Total file size of an artifact with the given shape.
pub fn artifact_file_len(n_layers: usize, n_heads: usize, k_tokens: usize, head_dim: usize, dtype: StorageDtype) -> usize {
    ARTIFACT_HEADER_LEN + dtype.width() * 2 * n_layers * n_heads * k_tokens * head_dim + CRC_LEN
}

fn u32_field(x: usize, name: &str) -> u32 {
    u32::try_from(x).unwrap_or_else(|_| panic!("{name} {x} does not fit the format"))
}

pub fn serialize_artifact(a: &BufferArtifact) -> Vec<u8> {
    let mut w = Writer::new(ARTIFACT_MAGIC);
    w.bytes(&a.model_fingerprint.0);
    for (x, name) in [
        (a.n_layers, "n_layers"),
        (a.n_heads, "n_heads"),
        (a.head_dim, "head_dim"),
        (a.k_tokens, "k_tokens"),
    ] {
        w.u32(u32_field(x, name));
    }
    w.u64(a.first_free_position as u64);
    w.u8(dtype_tag(a.dtype));
    w.u64(a.meta.context_len);
    w.u32(a.meta.ratio);
    w.bytes(&a.meta.config_hash);
    for t in a.keys.iter().chain(&a.values) {
        for &x in t.data() {
            match a.dtype {
                StorageDtype::F32 => w.bytes(&(x as f32).to_le_bytes()),
                StorageDtype::F64 => w.f64(x),
            }
        }
    }
    w.finish()
}

fn artifact_declared_len(bytes: &[u8]) -> Option<usize> {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = 4 + 2 + 32;
    let (l, h, d, k) = (u32_at(dims), u32_at(dims + 4), u32_at(dims + 8), u32_at(dims + 12));
    let width = dtype_from_tag(bytes[dims + 16 + 8])?.width();
    [l, h, k, d, width]
        .iter()
        .try_fold(2usize, |acc, &x| acc.checked_mul(x))?
        .checked_add(ARTIFACT_HEADER_LEN + CRC_LEN)
}

pub fn deserialize_artifact(bytes: &[u8]) -> Result<BufferArtifact> {
    let mut r = open(bytes, ARTIFACT_MAGIC, ARTIFACT_HEADER_LEN + CRC_LEN, artifact_declared_len)?;
    let model_fingerprint = Fingerprint(r.arr()?);
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let head_dim = r.u32()? as usize;
    let k_tokens = r.u32()? as usize;
    let first_free_position = r.usize()?;
    let tag = r.u8()?;
    let dtype = dtype_from_tag(tag).ok_or_else(|| FormatError::Header(format!("unknown dtype tag {tag}")))?;
    let meta = lcc_core::artifact::ArtifactMeta {
        context_len: r.u64()?,
        ratio: r.u32()?,
        config_hash: r.arr()?,
    };
    let per = n_heads * k_tokens * head_dim;
    let read_tensor = |r: &mut Reader| -> Result<Tensor> {
        let data = match dtype {
            StorageDtype::F32 => r
                .take(4 * per)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            StorageDtype::F64 => (0..per).map(|_| r.f64()).collect::<Result<_>>()?,
        };
        Tensor::new(&[n_heads, k_tokens, head_dim], data).map_err(|e| FormatError::Header(e.to_string()))
    };
    let keys = (0..n_layers).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    let values = (0..n_layers).map(|_| read_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
    let a = BufferArtifact {
        model_fingerprint,
        n_layers,
        n_heads,
        head_dim,
        k_tokens,
        first_free_position,
        dtype,
        keys,
        values,
        meta,
    };
    a.validate().map_err(|e| FormatError::Header(e.to_string()))?;
    Ok(a)
}

const CHECKPOINT_HEADER_LEN: usize = 4 + 2 + 7 * 8 + 8;

pub fn serialize_checkpoint(w: &ModelWeights) -> Vec<u8> {
    let mut out = Writer::new(CHECKPOINT_MAGIC);
    let c = &w.config;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.head_dim, c.d_ff, c.max_position] {
        out.u64(v as u64);
    }
    out.f64(c.rope_base);
    for (_, t) in w.named_tensors() {
        t.data().iter().for_each(|&x| out.f64(x));
    }
    out.bytes(&w.fingerprint().0);
    out.finish()
}

fn checkpoint_config(bytes: &[u8]) -> Option<ModelConfig> {
    let at = |i: usize| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap());
    let u = |i: usize| usize::try_from(at(i)).ok();
    Some(ModelConfig {
        vocab_size: u(0)?,
        d_model: u(1)?,
        n_layers: u(2)?,
        n_heads: u(3)?,
        head_dim: u(4)?,
        d_ff: u(5)?,
        max_position: u(6)?,
        rope_base: f64::from_bits(at(7)),
    })
}

fn checkpoint_declared_len(bytes: &[u8]) -> Option<usize> {
    let c = checkpoint_config(bytes)?;
    let mut n = 0usize;
    for shape in ModelWeights::expected_shapes(&c) {
        let len = shape.iter().try_fold(1usize, |a, &x| a.checked_mul(x))?;
        n = n.checked_add(len.checked_mul(8)?)?;
    }
    n.checked_add(CHECKPOINT_HEADER_LEN + 32 + CRC_LEN)
}

/// Parse a checkpoint. The flag says whether the stored fingerprint agrees
/// with the weights; callers map a mismatch to the fingerprint exit code.
pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<(ModelWeights, bool)> {
    let mut r = open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_HEADER_LEN + 32 + CRC_LEN, checkpoint_declared_len)?;
    let config = checkpoint_config(bytes).ok_or_else(|| FormatError::Header("config overflow".into()))?;
    r.at = CHECKPOINT_HEADER_LEN;
    config.validate().map_err(|e| FormatError::Header(e.to_string()))?;
    let mut tensors = Vec::new();
    for shape in ModelWeights::expected_shapes(&config) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(&shape, data).map_err(|e| FormatError::Header(e.to_string()))?);
    }
    let stored = Fingerprint(r.arr()?);
    let w = ModelWeights::from_tensors(config, tensors).map_err(|e| FormatError::Header(e.to_string()))?;
    let ok = w.fingerprint() == stored;
    Ok((w, ok))
}

const ADAPTER_HEADER_LEN: usize = 4 + 2 + 32 + 32 + 4 * 3 + 8 + 1 + 1;

/// Coupled-mode adapter, bound to the model and to the artifact's config
/// hash.
pub fn serialize_adapter(adapter: &LoraAdapter, model: Fingerprint, config_hash: [u8; 32], d_model: usize) -> Vec<u8> {
    let mut w = Writer::new(ADAPTER_MAGIC);
    w.bytes(&model.0);
    w.bytes(&config_hash);
    w.u32(u32_field(adapter.layers.len(), "n_layers"));
    w.u32(u32_field(d_model, "d_model"));
    w.u32(u32_field(adapter.rank, "rank"));
    w.f64(adapter.alpha);
    w.u8(adapter.active.bits());
    let mask = adapter.projections().iter().fold(0u8, |m, p| m | 1 << p.index());
    w.u8(mask);
    for (_, t) in adapter.named_tensors() {
        t.data().iter().for_each(|&x| w.f64(x));
    }
    w.finish()
}

fn adapter_declared_len(bytes: &[u8]) -> Option<usize> {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let o = 4 + 2 + 64;
    let (l, d, r) = (u32_at(o), u32_at(o + 4), u32_at(o + 8));
    let projections = bytes[ADAPTER_HEADER_LEN - 1].count_ones() as usize;
    [l, projections, 2, d, r, 8]
        .iter()
        .try_fold(1usize, |a, &x| a.checked_mul(x))?
        .checked_add(ADAPTER_HEADER_LEN + CRC_LEN)
}

pub struct AdapterFile {
    pub model: Fingerprint,
    pub config_hash: [u8; 32],
    pub adapter: LoraAdapter,
}

pub fn deserialize_adapter(bytes: &[u8]) -> Result<AdapterFile> {
    let mut r = open(bytes, ADAPTER_MAGIC, ADAPTER_HEADER_LEN + CRC_LEN, adapter_declared_len)?;
    let model = Fingerprint(r.arr()?);
    let config_hash = r.arr()?;
    let n_layers = r.u32()? as usize;
    let d = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let active = SegmentSet::from_bits(r.u8()?).ok_or_else(|| FormatError::Header("bad segment set".into()))?;
    let mask = r.u8()?;
    if mask & !0b1111 != 0 {
        return Err(FormatError::Header("bad projection mask".into()));
    }
    let read = |r: &mut Reader, shape: [usize; 2]| -> Result<Tensor> {
        let data = (0..shape[0] * shape[1]).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| FormatError::Header(e.to_string()))
    };
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut slots: [Option<LoraPair>; 4] = [None, None, None, None];
        for p in Projection::ALL {
            if mask & 1 << p.index() != 0 {
                let a = read(&mut r, [rank, d])?;
                let b = read(&mut r, [d, rank])?;
                slots[p.index()] = Some(LoraPair { a, b });
            }
        }
        layers.push(slots);
    }
    Ok(AdapterFile {
        model,
        config_hash,
        adapter: LoraAdapter {
            rank,
            alpha,
            active,
            layers,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcc_core::artifact::ArtifactMeta;
    use lcc_core::kv::KvCache;
    use lcc_core::RngState;

    fn artifact(l: usize, h: usize, k: usize, d: usize, dtype: StorageDtype, seed: u64) -> BufferArtifact {
        let mut rng = RngState::new(seed);
        let rows = (0..l)
            .map(|_| {
                let mut draw = || (0..k * h * d).map(|_| rng.normal()).collect::<Vec<_>>();
                (draw(), draw())
            })
            .collect();
        let cache = KvCache::from_rows(rows, (7..7 + k).collect(), h).unwrap();
        let meta = ArtifactMeta {
            context_len: 7,
            ratio: 16,
            config_hash: [9; 32],
        };
        BufferArtifact::from_cache(Fingerprint([3; 32]), &cache, dtype, meta).unwrap()
    }

    #[test]
    fn smallest_payload_is_sixteen_bytes() {
        let a = artifact(1, 1, 1, 2, StorageDtype::F32, 0);
        let bytes = serialize_artifact(&a);
        assert_eq!(bytes.len() - ARTIFACT_HEADER_LEN - 4, 16);
    }

    #[test]
    fn roundtrip_is_identity() {
        for dtype in [StorageDtype::F32, StorageDtype::F64] {
            let a = artifact(2, 3, 4, 2, dtype, 1);
            let back = deserialize_artifact(&serialize_artifact(&a)).unwrap();
            assert_eq!(back, a);
            for (x, y) in a.keys.iter().chain(&a.values).zip(back.keys.iter().chain(&back.values)) {
                assert!(x.bits_eq(y));
            }
        }
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(deserialize_artifact(&[]), Err(FormatError::Truncated { .. })));
        let bytes = serialize_artifact(&artifact(1, 2, 2, 2, StorageDtype::F32, 2));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_artifact(&bad), Err(FormatError::BadMagic { .. })));
        let mut v999 = bytes.clone();
        v999[4..6].copy_from_slice(&999u16.to_le_bytes());
        let err = deserialize_artifact(&v999).unwrap_err();
        assert!(matches!(err, FormatError::UnsupportedVersion(999)));
        assert!(err.to_string().contains("999"));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 5;
        flipped[last] ^= 0x10;
        assert!(matches!(deserialize_artifact(&flipped), Err(FormatError::CrcMismatch { .. })));
        assert!(matches!(
            deserialize_artifact(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.insert(ARTIFACT_HEADER_LEN, 0);
        assert!(deserialize_artifact(&long).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_fingerprint() {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            head_dim: 2,
            d_ff: 6,
            max_position: 16,
            rope_base: 100.0,
        };
        let w = ModelWeights::init(&cfg, &mut RngState::new(5)).unwrap();
        let bytes = serialize_checkpoint(&w);
        let (back, ok) = deserialize_checkpoint(&bytes).unwrap();
        assert!(ok);
        assert_eq!(back, w);
        assert!(matches!(
            deserialize_checkpoint(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. } | FormatError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn adapter_roundtrip() {
        let cfg = ModelConfig::desk(93);
        let mut a = lcc_core::lora::init_adapter_for(&cfg, 8, 16.0, &[Projection::Q, Projection::V], &mut RngState::new(1))
            .unwrap();
        a.active = SegmentSet::all();
        a.layers[1][0].as_mut().unwrap().b.data_mut()[3] = 0.25;
        let bytes = serialize_adapter(&a, Fingerprint([1; 32]), [2; 32], cfg.d_model);
        let back = deserialize_adapter(&bytes).unwrap();
        assert_eq!(back.adapter, a);
        assert_eq!(back.config_hash, [2; 32]);
    }
}
