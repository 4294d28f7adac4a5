//! Single-file checkpoint container.
//!
//! Layout (all integers are little-endian):
//!
//! ```text
//! offset  size  field
//! ------  ----  -----
//! 0       8     magic "CMRT0001"
//! 8       8     header length H (u64)
//! 16      H     header: one UTF-8 JSON object (tensor table + metadata)
//! P       ...   payload section, P = 16 + H rounded up to a multiple of 64
//! ```
//!
//! The header's tensor table lists, for every tensor in name order:
//! `name`, `dtype` (`"f32"` or `"f64"`), `shape`, `offset`, `length`.
//! `offset` is relative to the payload section base `P` and is always a
//! multiple of 64, so every payload is 64-byte aligned in the file.
//! `length` is the raw byte length (`4·count` for f32, `8·count` for f64);
//! payloads are the row-major element bytes, little-endian. Gaps between
//! payloads are zero padding.
//!
//! Hex-annotated example (one f32 tensor `w` of shape `[2]`, values 1.0, 2.0):
//!
//! ```text
//! 00000000  43 4d 52 54 30 30 30 31  magic "CMRT0001"
//! 00000008  b6 00 00 00 00 00 00 00  header length = 182
//! 00000010  7b 22 74 65 6e 73 6f 72  {"tensor
//! 00000018  73 22 3a 5b 7b 22 6e 61  s":[{"na
//! ...               (JSON continues: {"tensors":[{"name":"w","dtype":"f32",
//! ...                "shape":[2],"offset":0,"length":8}], ...metadata...})
//! 000000c0  00 00 80 3f 00 00 00 40  payload: 1.0f32, 2.0f32
//! ```
//!
//! Files are written deterministically: the same [`Checkpoint`] always
//! produces byte-identical output. Loading streams payloads individually and
//! never allocates more than the header-declared totals (subject to a size
//! cap), so corrupt headers cannot trigger absurd allocations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor, TensorMap};

const MAGIC: &[u8; 8] = b"CMRT0001";
const ALIGN: u64 = 64;
/// Largest header we will parse.
const MAX_HEADER_BYTES: u64 = 64 << 20;
/// Default cap on total declared payload bytes.
pub const DEFAULT_PAYLOAD_CAP: u64 = 4 << 30;

/// A saved model artifact: parameters plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: TensorMap,
    /// Digest of the model configuration that produced `params`; merge and
    /// resume refuse to combine checkpoints whose digests differ.
    pub config_digest: String,
    pub step: u64,
    pub stage_label: String,
    /// Seeds that produced this artifact, outermost first.
    pub seed_record: Vec<u64>,
    /// Free-form provenance (merge coefficients, source labels, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(
        params: TensorMap,
        config_digest: impl Into<String>,
        step: u64,
        stage_label: impl Into<String>,
        seed_record: Vec<u64>,
    ) -> Self {
        Checkpoint {
            params,
            config_digest: config_digest.into(),
            step,
            stage_label: stage_label.into(),
            seed_record,
            meta: BTreeMap::new(),
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderTensor {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    tensors: Vec<HeaderTensor>,
    config_digest: String,
    step: u64,
    stage_label: String,
    seed_record: Vec<u64>,
    meta: BTreeMap<String, String>,
}

fn align_up(x: u64, align: u64) -> u64 {
    x.div_ceil(align) * align
}

/// Write `ckpt` to `path` in the container format above.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0u64;
    for (name, t) in ckpt.params.iter() {
        let length = (t.len() * t.dtype().size_bytes()) as u64;
        tensors.push(HeaderTensor {
            name: name.to_string(),
            dtype: t.dtype(),
            shape: t.shape.clone(),
            offset,
            length,
        });
        offset = align_up(offset + length, ALIGN);
    }
    let header = Header {
        tensors,
        config_digest: ckpt.config_digest.clone(),
        step: ckpt.step,
        stage_label: ckpt.stage_label.clone(),
        seed_record: ckpt.seed_record.clone(),
        meta: ckpt.meta.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut f = File::create(path).map_err(io_err)?;
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    f.write_all(&header_json).map_err(io_err)?;

    let payload_base = align_up(16 + header_json.len() as u64, ALIGN);
    let mut pos = 16 + header_json.len() as u64;
    for (i, (_, t)) in ckpt.params.iter().enumerate() {
        let target = payload_base + header.tensors[i].offset;
        debug_assert!(target >= pos);
        f.write_all(&vec![0u8; (target - pos) as usize]).map_err(io_err)?;
        let bytes = t.to_le_bytes();
        f.write_all(&bytes).map_err(io_err)?;
        pos = target + bytes.len() as u64;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint with the default payload size cap.
pub fn load(path: &Path) -> Result<Checkpoint> {
    load_with_cap(path, DEFAULT_PAYLOAD_CAP)
}

/// Read a checkpoint, rejecting files whose header declares more than
/// `payload_cap` total payload bytes.
pub fn load_with_cap(path: &Path, payload_cap: u64) -> Result<Checkpoint> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut f = File::open(path).map_err(io_err)?;
    let file_len = f.metadata().map_err(io_err)?.len();

    let mut magic = [0u8; 8];
    read_fully(&mut f, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_buf = [0u8; 8];
    read_fully(&mut f, &mut len_buf, path, "header length")?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!(
            "declared header length {header_len} exceeds cap {MAX_HEADER_BYTES}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_fully(&mut f, &mut header_bytes, path, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;

    // Validate the tensor table before touching any payload.
    let mut total: u64 = 0;
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        let expect = (count * t.dtype.size_bytes()) as u64;
        if expect != t.length {
            return Err(Error::Format(format!(
                "tensor '{}': declared length {} does not match shape {:?} ({} bytes)",
                t.name, t.length, t.shape, expect
            )));
        }
        if t.offset % ALIGN != 0 {
            return Err(Error::Format(format!(
                "tensor '{}': offset {} is not {ALIGN}-byte aligned",
                t.name, t.offset
            )));
        }
        total = total
            .checked_add(t.length)
            .ok_or_else(|| Error::Format("declared payload total overflows".into()))?;
    }
    if total > payload_cap {
        return Err(Error::Format(format!(
            "declared payload total {total} bytes exceeds cap {payload_cap}"
        )));
    }
    let mut spans: Vec<(u64, u64, &str)> =
        header.tensors.iter().map(|t| (t.offset, t.length, t.name.as_str())).collect();
    spans.sort();
    for w in spans.windows(2) {
        let (a_off, a_len, a_name) = w[0];
        let (b_off, _, b_name) = w[1];
        if a_off + a_len > b_off {
            return Err(Error::Format(format!(
                "overlapping payloads: '{a_name}' and '{b_name}'"
            )));
        }
    }

    let payload_base = align_up(16 + header_len, ALIGN);
    let mut params = TensorMap::new();
    for t in &header.tensors {
        let start = payload_base + t.offset;
        let end = start + t.length;
        if end > file_len {
            return Err(Error::Format(format!(
                "truncated payload: tensor '{}' needs bytes {start}..{end} but file has {file_len}",
                t.name
            )));
        }
        f.seek(SeekFrom::Start(start)).map_err(io_err)?;
        let mut bytes = vec![0u8; t.length as usize];
        read_fully(&mut f, &mut bytes, path, &t.name)?;
        let tensor = Tensor::from_le_bytes(t.dtype, t.shape.clone(), &bytes)?;
        params.insert(&t.name, tensor)?;
    }

    Ok(Checkpoint {
        params,
        config_digest: header.config_digest,
        step: header.step,
        stage_label: header.stage_label,
        seed_record: header.seed_record,
        meta: header.meta,
    })
}

fn read_fully(f: &mut File, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    f.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated payload: {what} unreadable (unexpected end of file)"))
        } else {
            Error::io(path.to_path_buf(), e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = TensorMap::new();
        params
            .insert("a/weight", Tensor::from_f32(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-40]).unwrap())
            .unwrap();
        params
            .insert("b/bias", Tensor::from_f64(vec![3], vec![std::f64::consts::PI, -1.0, 1e-300]).unwrap())
            .unwrap();
        let mut ckpt = Checkpoint::new(params, "abcd1234", 17, "stage1", vec![42, 7]);
        ckpt.meta.insert("note".into(), "unit test".into());
        ckpt
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config_digest, ckpt.config_digest);
        assert_eq!(back.step, ckpt.step);
        assert_eq!(back.stage_label, ckpt.stage_label);
        assert_eq!(back.seed_record, ckpt.seed_record);
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (name, t) in ckpt.params.iter() {
            let r = back.params.get(name).unwrap();
            assert_eq!(r.shape, t.shape);
            assert_eq!(r.to_le_bytes(), t.to_le_bytes(), "tensor '{name}' not bitwise equal");
        }
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.cmrt");
        let p2 = dir.path().join("two.cmrt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &p1).unwrap();
        save(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_lists_one_entry_with_f32_byte_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        let mut params = TensorMap::new();
        params.insert("w", Tensor::from_f32(vec![2, 3], vec![0.5; 6]).unwrap()).unwrap();
        save(&Checkpoint::new(params, "d", 0, "s", vec![]), &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header.tensors.len(), 1);
        assert_eq!(header.tensors[0].length, 4 * 6);
        assert_eq!(header.tensors[0].offset % ALIGN, 0);
    }

    #[test]
    fn bad_magic_is_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        save(&sample_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "got: {err}");
    }

    #[test]
    fn truncation_names_first_unreadable_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        save(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut into the first payload ("a/weight" sorts first).
        std::fs::write(&path, &bytes[..bytes.len() - 80]).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("a/weight"), "got: {err}");
    }

    /// Rewrite a saved container with a doctored header (payload left as-is).
    fn rewrite_header(path: &Path, edit: impl FnOnce(&mut Header)) {
        let bytes = std::fs::read(path).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let payload_base = align_up(16 + hlen as u64, ALIGN) as usize;
        let payload = bytes[payload_base..].to_vec();
        edit(&mut header);
        let header_json = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.resize(align_up(out.len() as u64, ALIGN) as usize, 0);
        out.extend_from_slice(&payload);
        std::fs::write(path, &out).unwrap();
    }

    #[test]
    fn overlapping_offsets_are_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        save(&sample_checkpoint(), &path).unwrap();
        rewrite_header(&path, |h| h.tensors[1].offset = h.tensors[0].offset);
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("overlapping"), "got: {err}");
    }

    #[test]
    fn declared_size_cap_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        save(&sample_checkpoint(), &path).unwrap();
        rewrite_header(&path, |h| {
            h.tensors[0].shape = vec![1 << 40];
            h.tensors[0].length = 4 << 40;
        });
        let err = load_with_cap(&path, DEFAULT_PAYLOAD_CAP).unwrap_err().to_string();
        assert!(err.contains("cap"), "got: {err}");
    }

    #[test]
    fn tensor_count_matches_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.cmrt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params.len(), 2);
    }
}
