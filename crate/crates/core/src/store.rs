//! On-disk model directories: a JSON manifest plus one little-endian binary
//! blob per array. The byte layout is described in `docs/FORMAT.md`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::csr::CsrKernel;
use crate::data::SyntheticConfig;
use crate::error::{format_err, Error, Result};
use crate::harness::NetworkConfig;
use crate::model::{ConvLayer, LayerWeights, Model, Storage};
use crate::nn::NetSpec;
use crate::quant::codebook::Codebook;
use crate::quant::{ActQuant, QuantInfo};
use crate::shape::ConvShape;
use crate::tensor::Tensor4D;

pub const FORMAT_VERSION: u32 = 1;
pub const BLOB_MAGIC: [u8; 8] = *b"SCVBLOB\0";
pub const HEADER_LEN: usize = 64;
pub const ALIGN: usize = 64;
pub const MANIFEST: &str = "manifest.json";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobDType {
    F32,
    F16,
    U32,
    /// Unsigned codes of `bits` width, packed LSB-first.
    U8Packed,
}

impl BlobDType {
    fn tag(self) -> u32 {
        match self {
            BlobDType::F32 => 0,
            BlobDType::F16 => 1,
            BlobDType::U32 => 2,
            BlobDType::U8Packed => 3,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => BlobDType::F32,
            1 => BlobDType::F16,
            2 => BlobDType::U32,
            3 => BlobDType::U8Packed,
            _ => return Err(format_err!("unknown dtype tag {tag}")),
        })
    }
}

/// Decoded array contents.
#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    U32(Vec<u32>),
    Packed { bits: u32, codes: Vec<u32> },
}

impl BlobData {
    pub fn dtype(&self) -> BlobDType {
        match self {
            BlobData::F32(_) => BlobDType::F32,
            BlobData::F16(_) => BlobDType::F16,
            BlobData::U32(_) => BlobDType::U32,
            BlobData::Packed { .. } => BlobDType::U8Packed,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F16(v) => v.len(),
            BlobData::U32(v) => v.len(),
            BlobData::Packed { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bits(&self) -> u32 {
        match self {
            BlobData::Packed { bits, .. } => *bits,
            _ => 0,
        }
    }
}

fn pack_codes(codes: &[u32], bits: u32) -> Result<Vec<u8>> {
    if !(1..=16).contains(&bits) {
        return Err(format_err!("packed code width {bits} outside 1..=16"));
    }
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        if c >> bits != 0 {
            return Err(format_err!("code {c} does not fit in {bits} bits"));
        }
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                let pos = i * bits as usize + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    Ok(out)
}

fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    (0..count)
        .map(|i| {
            (0..bits as usize).fold(0u32, |c, b| {
                let pos = i * bits as usize + b;
                c | (((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << b
            })
        })
        .collect()
}

fn payload_len(dtype: BlobDType, count: usize, bits: u32) -> usize {
    match dtype {
        BlobDType::F32 | BlobDType::U32 => count * 4,
        BlobDType::F16 => count * 2,
        BlobDType::U8Packed => (count * bits as usize).div_ceil(8),
    }
}

/// Serializes one array: header, payload, zero padding to a multiple of 64.
pub fn encode_blob(data: &BlobData, dims: &[usize]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(format_err!("blobs hold 1 to 4 dimensions, got {}", dims.len()));
    }
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(format_err!("dims {dims:?} describe {count} elements, data has {}", data.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len(data.dtype(), count, data.bits()) + ALIGN);
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&data.dtype().tag().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    out.extend_from_slice(&data.bits().to_le_bytes());
    for i in 0..4 {
        out.extend_from_slice(&(dims.get(i).copied().unwrap_or(0) as u64).to_le_bytes());
    }
    out.extend_from_slice(&(count as u64).to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    match data {
        BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        BlobData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        BlobData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        BlobData::Packed { bits, codes } => out.extend(pack_codes(codes, *bits)?),
    }
    out.resize(out.len().next_multiple_of(ALIGN), 0);
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses a blob, returning its contents and dimensions.
pub fn decode_blob(bytes: &[u8]) -> Result<(BlobData, Vec<usize>)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err!("blob is {} bytes, shorter than its {HEADER_LEN}-byte header", bytes.len()));
    }
    if bytes[..8] != BLOB_MAGIC {
        return Err(format_err!("bad blob magic {:?}", &bytes[..8]));
    }
    let version = u32_at(bytes, 8);
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dtype = BlobDType::from_tag(u32_at(bytes, 12))?;
    let ndim = u32_at(bytes, 16) as usize;
    let bits = u32_at(bytes, 20);
    if !(1..=4).contains(&ndim) {
        return Err(format_err!("blob ndim {ndim} outside 1..=4"));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u64_at(bytes, 24 + 8 * i) as usize).collect();
    if (ndim..4).any(|i| u64_at(bytes, 24 + 8 * i) != 0) {
        return Err(format_err!("unused blob dimensions must be zero"));
    }
    let count = u64_at(bytes, 56) as usize;
    if dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) != Some(count) {
        return Err(format_err!("blob dims {dims:?} disagree with element count {count}"));
    }
    match (dtype, bits) {
        (BlobDType::U8Packed, 1..=16) | (BlobDType::F32 | BlobDType::F16 | BlobDType::U32, 0) => {}
        _ => return Err(format_err!("invalid code width {bits} for {dtype:?}")),
    }
    let len = payload_len(dtype, count, bits);
    let body = bytes
        .get(HEADER_LEN..HEADER_LEN + len)
        .ok_or_else(|| format_err!("blob payload truncated: need {len} bytes, have {}", bytes.len() - HEADER_LEN))?;
    let data = match dtype {
        BlobDType::F32 => BlobData::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        BlobDType::F16 => BlobData::F16(body.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect()),
        BlobDType::U32 => BlobData::U32(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        BlobDType::U8Packed => BlobData::Packed {
            bits,
            codes: unpack_codes(body, bits, count),
        },
    };
    Ok((data, dims))
}

/// Manifest entry for one blob file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    pub dtype: BlobDType,
    pub dims: Vec<usize>,
    pub bytes: u64,
    /// FNV-1a 64 of the whole file, as 16 hex digits.
    pub fnv1a64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookEntry {
    pub centroids: BlobRef,
    pub assignments: BlobRef,
    pub requested_k: usize,
    pub zero_pinned: bool,
    pub index_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub shape: ConvShape,
    pub dtype: String,
    pub storage: Storage,
    pub sparsity: f64,
    pub bias: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colidx: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rowptr: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<CodebookEntry>,
    pub act_quant: Option<ActQuant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadEntry {
    pub weights: BlobRef,
    pub bias: BlobRef,
    pub act_quant: Option<ActQuant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub net: NetSpec,
    pub layers: Vec<LayerEntry>,
    pub head: HeadEntry,
    pub weighted_sparsity: f64,
    pub quantization: Option<QuantInfo>,
    pub dataset: Option<SyntheticConfig>,
    pub provenance: serde_json::Value,
}

struct BlobWriter<'a> {
    dir: &'a Path,
}

impl BlobWriter<'_> {
    fn put(&self, file: String, data: &BlobData, dims: &[usize]) -> Result<BlobRef> {
        let bytes = encode_blob(data, dims)?;
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        Ok(BlobRef {
            file,
            dtype: data.dtype(),
            dims: dims.to_vec(),
            bytes: bytes.len() as u64,
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        })
    }
}

fn plain_name(f: &str) -> bool {
    !(f.is_empty() || f.contains(['/', '\\']) || f.starts_with('.'))
}

fn read_blob(dir: &Path, r: &BlobRef) -> Result<BlobData> {
    if !plain_name(&r.file) {
        return Err(format_err!("blob name `{}` must be a plain file name", r.file));
    }
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = u64::from_str_radix(&r.fnv1a64, 16).map_err(|_| format_err!("bad checksum `{}` for {}", r.fnv1a64, r.file))?;
    let found = fnv1a64(&bytes);
    if found != expected || bytes.len() as u64 != r.bytes {
        return Err(Error::Checksum { path, expected, found });
    }
    let (data, dims) = decode_blob(&bytes).map_err(|e| match e {
        Error::Format(m) => format_err!("{}: {m}", path.display()),
        e => e,
    })?;
    if data.dtype() != r.dtype || dims != r.dims {
        return Err(format_err!(
            "{}: header says {:?} {dims:?}, manifest says {:?} {:?}",
            path.display(),
            data.dtype(),
            r.dtype,
            r.dims
        ));
    }
    Ok(data)
}

fn f32_blob(dir: &Path, r: &BlobRef) -> Result<Vec<f32>> {
    match read_blob(dir, r)? {
        BlobData::F32(v) => Ok(v),
        d => Err(format_err!("{} holds {:?}, expected f32", r.file, d.dtype())),
    }
}

fn u32_blob(dir: &Path, r: &BlobRef) -> Result<Vec<u32>> {
    match read_blob(dir, r)? {
        BlobData::U32(v) => Ok(v),
        d => Err(format_err!("{} holds {:?}, expected u32", r.file, d.dtype())),
    }
}

fn required<'a>(layer: &str, field: &str, r: &'a Option<BlobRef>) -> Result<&'a BlobRef> {
    r.as_ref().ok_or_else(|| format_err!("layer {layer}: manifest lacks `{field}`"))
}

/// Writes `model` into directory `dir`, creating it if needed. Blobs are
/// written first and the manifest last, so a directory with a manifest is
/// always complete.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let previous = read_manifest(dir).ok();
    let w = BlobWriter { dir };
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let stem = format!("{i:02}_{}", l.name.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
        let mut e = LayerEntry {
            name: l.name.clone(),
            kind: "conv2d".into(),
            shape: l.shape,
            dtype: "f32".into(),
            storage: l.weights.storage(),
            sparsity: l.weights.sparsity(),
            bias: w.put(format!("{stem}.bias.bin"), &BlobData::F32(l.bias.clone()), &[l.bias.len()])?,
            weights: None,
            values: None,
            colidx: None,
            rowptr: None,
            sparse_level: None,
            codebook: None,
            act_quant: l.act_quant,
        };
        let kernel = match &l.weights {
            LayerWeights::Dense(t) => {
                e.weights = Some(w.put(format!("{stem}.weights.bin"), &BlobData::F32(t.data().to_vec()), &t.dims())?);
                None
            }
            LayerWeights::Csr(k) => {
                e.values = Some(w.put(format!("{stem}.values.bin"), &BlobData::F32(k.values().to_vec()), &[k.values().len()])?);
                Some(k)
            }
            LayerWeights::Codebook { kernel, codebook } => {
                let centroids = BlobData::F16(codebook.centroids.clone());
                let bits = codebook.index_bits();
                let codes = BlobData::Packed {
                    bits,
                    codes: codebook.assignments.iter().map(|&a| a as u32).collect(),
                };
                e.codebook = Some(CodebookEntry {
                    centroids: w.put(format!("{stem}.centroids.bin"), &centroids, &[codebook.k()])?,
                    assignments: w.put(format!("{stem}.codes.bin"), &codes, &[codebook.assignments.len()])?,
                    requested_k: codebook.requested_k,
                    zero_pinned: codebook.zero_pinned,
                    index_bits: bits,
                });
                Some(kernel)
            }
        };
        if let Some(k) = kernel {
            e.colidx = Some(w.put(format!("{stem}.colidx.bin"), &BlobData::U32(k.colidx().to_vec()), &[k.colidx().len()])?);
            e.rowptr = Some(w.put(format!("{stem}.rowptr.bin"), &BlobData::U32(k.rowptr().to_vec()), &[k.rowptr().len()])?);
            e.sparse_level = Some(k.sparse_level());
        }
        layers.push(e);
    }
    let (classes, features) = (model.classes(), model.features());
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        net: model.spec.clone(),
        layers,
        head: HeadEntry {
            weights: w.put("head.weights.bin".into(), &BlobData::F32(model.head_w.clone()), &[classes, features])?,
            bias: w.put("head.bias.bin".into(), &BlobData::F32(model.head_b.clone()), &[classes])?,
            act_quant: model.head_act_quant,
        },
        weighted_sparsity: model.weighted_sparsity(),
        quantization: model.quant.clone(),
        dataset: model.dataset.clone(),
        provenance: model.provenance.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    let path = dir.join(MANIFEST);
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    // Blobs of an overwritten model that the new manifest no longer uses.
    if let Some(old) = previous {
        let keep: HashSet<PathBuf> = blob_files(&manifest).into_iter().collect();
        for f in blob_files(&old).into_iter().filter(|f| !keep.contains(f) && f.to_str().is_some_and(plain_name)) {
            let p = dir.join(&f);
            if let Err(e) = fs::remove_file(&p) {
                log::warn!("could not remove stale blob {}: {e}", p.display());
            }
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    // Check the version before the schema so newer files fail clearly.
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| format_err!("{}: missing format_version", path.display()))?;
    if version > FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn layer_context(name: &str, e: Error) -> Error {
    match e {
        Error::Invariant(m) => Error::Invariant(format!("layer {name}: {m}")),
        Error::Format(m) => Error::Format(format!("layer {name}: {m}")),
        Error::Shape(m) => Error::Shape(format!("layer {name}: {m}")),
        e => e,
    }
}

fn load_layer(dir: &Path, e: &LayerEntry) -> Result<ConvLayer> {
    if e.kind != "conv2d" || e.dtype != "f32" {
        return Err(format_err!("layer {}: unsupported type {} / dtype {}", e.name, e.kind, e.dtype));
    }
    let csr = |values: Vec<f32>| -> Result<CsrKernel<f32>> {
        let level = e.sparse_level.ok_or_else(|| format_err!("layer {}: manifest lacks `sparse_level`", e.name))?;
        let colidx = u32_blob(dir, required(&e.name, "colidx", &e.colidx)?)?;
        let rowptr = u32_blob(dir, required(&e.name, "rowptr", &e.rowptr)?)?;
        CsrKernel::from_parts(values, colidx, rowptr, level, e.shape)
    };
    let weights = match e.storage {
        Storage::Dense => {
            let r = required(&e.name, "weights", &e.weights)?;
            let dims: [usize; 4] = r.dims.as_slice().try_into().map_err(|_| format_err!("layer {}: weights must be 4-D", e.name))?;
            LayerWeights::Dense(Tensor4D::from_vec(dims, f32_blob(dir, r)?)?)
        }
        Storage::Csr => LayerWeights::Csr(csr(f32_blob(dir, required(&e.name, "values", &e.values)?)?)?),
        Storage::Codebook => {
            let cb = e.codebook.as_ref().ok_or_else(|| format_err!("layer {}: manifest lacks `codebook`", e.name))?;
            let centroids = match read_blob(dir, &cb.centroids)? {
                BlobData::F16(v) => v,
                d => return Err(format_err!("{} holds {:?}, expected f16", cb.centroids.file, d.dtype())),
            };
            let codes = match read_blob(dir, &cb.assignments)? {
                BlobData::Packed { bits, codes } if bits == cb.index_bits => codes,
                d => return Err(format_err!("{} holds {:?}, expected {}-bit codes", cb.assignments.file, d.dtype(), cb.index_bits)),
            };
            let codebook = Codebook {
                centroids,
                assignments: codes.into_iter().map(|c| c as u16).collect(),
                requested_k: cb.requested_k,
                zero_pinned: cb.zero_pinned,
                sse_history: Vec::new(),
            };
            codebook.validate()?;
            if codebook.index_bits() != cb.index_bits {
                return Err(format_err!("codebook of {} centroids cannot use {}-bit codes", codebook.k(), cb.index_bits));
            }
            let kernel = csr(codebook.decode())?;
            LayerWeights::Codebook { kernel, codebook }
        }
    };
    let stray = match e.storage {
        Storage::Dense => e.values.is_some() || e.colidx.is_some() || e.codebook.is_some(),
        Storage::Csr => e.weights.is_some() || e.codebook.is_some(),
        Storage::Codebook => e.weights.is_some() || e.values.is_some(),
    };
    if stray {
        return Err(format_err!("layer {}: arrays present that {:?} storage does not use", e.name, e.storage));
    }
    Ok(ConvLayer {
        name: e.name.clone(),
        shape: e.shape,
        weights,
        bias: f32_blob(dir, &e.bias)?,
        act_quant: e.act_quant,
    })
}

/// Inverse of [`save_model`]. Every checksum is verified and every CSR
/// kernel re-validated before the model is returned.
pub fn load_model(dir: &Path) -> Result<Model> {
    let m = read_manifest(dir)?;
    let layers = m
        .layers
        .iter()
        .map(|e| load_layer(dir, e).map_err(|err| layer_context(&e.name, err)))
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        spec: m.net,
        layers,
        head_w: f32_blob(dir, &m.head.weights)?,
        head_b: f32_blob(dir, &m.head.bias)?,
        head_act_quant: m.head.act_quant,
        quant: m.quantization,
        dataset: m.dataset,
        provenance: m.provenance,
    };
    model.validate()?;
    Ok(model)
}

/// Writes a standalone f32 tensor file (one blob, no manifest).
pub fn save_tensor(t: &Tensor4D<f32>, path: &Path) -> Result<()> {
    let bytes = encode_blob(&BlobData::F32(t.data().to_vec()), &t.dims())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor4D<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_blob(&bytes)? {
        (BlobData::F32(v), dims) if dims.len() == 4 => Tensor4D::from_vec([dims[0], dims[1], dims[2], dims[3]], v),
        (d, dims) => Err(format_err!("{}: expected a 4-D f32 tensor, found {:?} {dims:?}", path.display(), d.dtype())),
    }
}

pub fn save_config(cfg: &NetworkConfig, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        format_version: u32,
        #[serde(flatten)]
        config: &'a NetworkConfig,
    }
    let text = serde_json::to_string_pretty(&Out {
        format_version: FORMAT_VERSION,
        config: cfg,
    })? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_config(path: &Path) -> Result<NetworkConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v > FORMAT_VERSION as u64 => {
            return Err(Error::Version {
                found: v.min(u32::MAX as u64) as u32,
                supported: FORMAT_VERSION,
            })
        }
        Some(_) => {}
        None => return Err(format_err!("{}: missing format_version", path.display())),
    }
    let mut obj = value;
    obj.as_object_mut().expect("checked above").remove("format_version");
    Ok(serde_json::from_value(obj)?)
}

/// Blob files referenced by a manifest, in manifest order.
pub fn blob_files(m: &ModelManifest) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for l in &m.layers {
        out.push(PathBuf::from(&l.bias.file));
        for r in [&l.weights, &l.values, &l.colidx, &l.rowptr].into_iter().flatten() {
            out.push(PathBuf::from(&r.file));
        }
        if let Some(cb) = &l.codebook {
            out.push(PathBuf::from(&cb.centroids.file));
            out.push(PathBuf::from(&cb.assignments.file));
        }
    }
    out.push(PathBuf::from(&m.head.weights.file));
    out.push(PathBuf::from(&m.head.bias.file));
    out
}
