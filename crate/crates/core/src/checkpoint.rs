//! Binary checkpoint format.
//!
//! ```text
//! "PSAT" | version u32 LE | header length u64 LE | JSON header | payload | SHA-256 of everything before it
//! ```
//!
//! The payload is the concatenation of every tensor's little-endian
//! scalars at the offsets listed in the header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::Norm;
use crate::backbone::{build_plan, BackbonePlan, ParamBundle, ParamRole, PlanDescription, UnitShape};
use crate::error::{Error, Result};
use crate::hypernet::{EmbeddingSet, Hypernet, KernelReduction, LayerEmbedding};
use crate::model::{AggregatedModel, Generator, Member};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PSAT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMeta {
    pub reduction: KernelReduction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberMeta {
    pub norm: Option<Norm>,
    pub generator: Option<GeneratorMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: DType,
    pub config_hash: String,
    pub plan: PlanDescription,
    pub unit: UnitShape,
    pub members: Vec<MemberMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub plan: BackbonePlan,
    pub members: Vec<Member<T>>,
    pub config_hash: String,
}

const ROLES: [ParamRole; 8] = [
    ParamRole::ConvWeight,
    ParamRole::ConvBias,
    ParamRole::BnScale,
    ParamRole::BnShift,
    ParamRole::BnRunningMean,
    ParamRole::BnRunningVar,
    ParamRole::FcWeight,
    ParamRole::FcBias,
];

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_param_name(rest: &str) -> Option<(usize, ParamRole)> {
    let rest = rest.strip_prefix("layer")?;
    let (idx, suffix) = rest.split_once('.')?;
    let role = ROLES.into_iter().find(|r| r.suffix() == suffix)?;
    Some((idx.parse().ok()?, role))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_aggregate(agg: &AggregatedModel<T>, config_hash: impl Into<String>) -> Self {
        Self { plan: agg.plan.clone(), members: agg.members.clone(), config_hash: config_hash.into() }
    }

    pub fn into_aggregate(self) -> Result<AggregatedModel<T>> {
        AggregatedModel::new(self.plan, self.members)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            if let Some(g) = &m.generator {
                let h = &g.hypernet;
                for (n, t) in ["w_in", "b_in", "w_out", "b_out"].iter().zip(h.tensors()) {
                    out.push((format!("member{i}.hyper.{n}"), t));
                }
                for e in &g.embeddings.layers {
                    out.push((format!("member{i}.z.layer{}", e.layer), &e.chunks));
                }
            }
            for e in m.params.entries() {
                out.push((format!("member{i}.{}", e.name()), &e.tensor));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (i, m) in self.members.iter().enumerate() {
            m.check(&self.plan).map_err(|e| e.context(format!("member {i}")))?;
        }
        let named = self.named_tensors();
        let mut tensors = Vec::with_capacity(named.len());
        let mut payload = Vec::new();
        for (name, t) in &named {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            dtype: T::DTYPE,
            config_hash: self.config_hash.clone(),
            plan: self.plan.description().clone(),
            unit: self.plan.unit(),
            members: self
                .members
                .iter()
                .map(|m| MemberMeta {
                    norm: m.norm,
                    generator: m.generator.as_ref().map(|g| GeneratorMeta { reduction: g.hypernet.reduction }),
                })
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| fmt_err(e.to_string()))?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = parse(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(fmt_err(format!("checkpoint holds {} tensors, {} requested", header.dtype, T::DTYPE)));
        }
        let plan = build_plan(header.plan.clone(), header.unit).map_err(|e| fmt_err(format!("plan: {e}")))?;
        let slots = plan.param_slots();
        let mut members: Vec<Member<T>> = header
            .members
            .iter()
            .map(|m| Member { norm: m.norm, generator: None, params: ParamBundle::new() })
            .collect();
        let mut hyper: Vec<[Option<Tensor<T>>; 4]> = header.members.iter().map(|_| Default::default()).collect();
        let mut emb: Vec<Vec<LayerEmbedding<T>>> = header.members.iter().map(|_| Vec::new()).collect();
        for e in &header.tensors {
            let start = e.offset as usize;
            let data: Vec<T> =
                payload[start..start + e.nbytes as usize].chunks_exact(T::DTYPE.size_bytes()).map(T::read_le).collect();
            let tensor = Tensor::new(e.shape.clone(), data).map_err(|err| fmt_err(format!("{}: {err}", e.name)))?;
            let bad = || fmt_err(format!("unrecognized tensor name {:?}", e.name));
            let rest = e.name.strip_prefix("member").ok_or_else(bad)?;
            let (idx, rest) = rest.split_once('.').ok_or_else(bad)?;
            let i: usize = idx.parse().map_err(|_| bad())?;
            if i >= members.len() {
                return Err(fmt_err(format!("{}: member index out of range", e.name)));
            }
            if let Some(h) = rest.strip_prefix("hyper.") {
                let k = ["w_in", "b_in", "w_out", "b_out"].iter().position(|n| *n == h).ok_or_else(bad)?;
                if hyper[i][k].replace(tensor).is_some() {
                    return Err(fmt_err(format!("duplicate tensor {}", e.name)));
                }
            } else if let Some(l) = rest.strip_prefix("z.layer") {
                emb[i].push(LayerEmbedding { layer: l.parse().map_err(|_| bad())?, chunks: tensor });
            } else {
                let (layer, role) = parse_param_name(rest).ok_or_else(bad)?;
                let slot = slots.iter().find(|s| s.layer == layer && s.role == role).ok_or_else(bad)?;
                if members[i].params.get(layer, role).is_some() {
                    return Err(fmt_err(format!("duplicate tensor {}", e.name)));
                }
                members[i].params.insert(layer, role, slot.partition, tensor);
            }
        }
        for (i, meta) in header.members.iter().enumerate() {
            let h = std::mem::take(&mut hyper[i]);
            match &meta.generator {
                Some(g) => {
                    let [Some(w_in), Some(b_in), Some(w_out), Some(b_out)] = h else {
                        return Err(fmt_err(format!("member {i}: incomplete hypernetwork")));
                    };
                    let hypernet = Hypernet { w_in, b_in, w_out, b_out, unit: header.unit, reduction: g.reduction };
                    let embeddings = EmbeddingSet { layers: std::mem::take(&mut emb[i]) };
                    members[i].generator = Some(Generator { hypernet, embeddings });
                }
                None => {
                    if h.iter().any(Option::is_some) || !emb[i].is_empty() {
                        return Err(fmt_err(format!("member {i}: generator tensors without a generator")));
                    }
                }
            }
            members[i].check(&plan).map_err(|e| fmt_err(format!("member {i}: {e}")))?;
        }
        Ok(Self { plan, members, config_hash: header.config_hash })
    }

    /// Writes through a temporary file so a failed save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Validates framing, digest and offsets; returns the header and payload.
pub fn parse(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(fmt_err("file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fmt_err(format!("unsupported format version {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fmt_err("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(PREFIX_LEN))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fmt_err("header length out of bounds"))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..hend]).map_err(|e| fmt_err(format!("header: {e}")))?;
    let payload = &body[hend..];
    let mut cursor = 0u64;
    for e in &header.tensors {
        if e.dtype != header.dtype {
            return Err(fmt_err(format!("{}: mixed dtypes", e.name)));
        }
        let expect = e
            .shape
            .iter()
            .try_fold(e.dtype.size_bytes() as u64, |a, &d| a.checked_mul(d as u64))
            .ok_or_else(|| fmt_err(format!("{}: size overflow", e.name)))?;
        if e.nbytes != expect {
            return Err(fmt_err(format!("{}: {} bytes declared for shape {:?}", e.name, e.nbytes, e.shape)));
        }
        if e.offset < cursor {
            return Err(fmt_err(format!("{}: overlapping offset", e.name)));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| fmt_err(format!("{}: offset overflow", e.name)))?;
        if end > payload.len() as u64 {
            return Err(fmt_err(format!("{}: offset out of bounds", e.name)));
        }
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(fmt_err("trailing payload bytes"));
    }
    Ok((header, payload))
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LayerSpec;
    use crate::hypernet::HypernetConfig;

    fn plan() -> BackbonePlan {
        let desc = PlanDescription {
            input_shape: [1, 4, 4],
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv { c_in: 1, c_out: 8, k: 3, stride: 1, padding: 1, generated: false },
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::Relu {},
                LayerSpec::Conv { c_in: 8, c_out: 8, k: 1, stride: 1, padding: 0, generated: true },
                LayerSpec::AvgPool { window: 4, stride: 4 },
                LayerSpec::Fc { in_features: 8, out_features: 2, generated: false },
            ],
        };
        build_plan(desc, UnitShape::new(8, 3)).unwrap()
    }

    fn ckpt() -> Checkpoint<f32> {
        let p = plan();
        let a = Member::hyper(&p, &HypernetConfig::new(4, 8, 3), 1).unwrap().with_norm(Norm::Inf);
        let b = Member::direct(&p, 2).with_norm(Norm::L1);
        Checkpoint { plan: p, members: vec![a, b], config_hash: "abc".into() }
    }

    #[test]
    fn round_trip_and_resave_bitwise() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_byte_flip_is_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        for i in (0..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(Checkpoint::<f32>::from_bytes(&b), Err(Error::Format(_))), "byte {i}");
        }
    }

    #[test]
    fn wrong_dtype_and_version() {
        let mut bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        bytes[4] = 9;
        let err = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn param_names_parse() {
        assert_eq!(parse_param_name("layer12.bn.running_var"), Some((12, ParamRole::BnRunningVar)));
        assert_eq!(parse_param_name("layer1.conv.kernel"), None);
    }
}
