//! Binary checkpoints and JSON run configs.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "D2ST" | u32 version | u8 component | u32 len + JSON metadata
//! u32 n, n × tensor record            (model parameters)
//! u32 m, m × tensor record            (optimizer moments, "opt.m.*" / "opt.v.*")
//! u32 CRC32 of everything above
//!
//! tensor record: u32 len + UTF-8 name | u8 dtype | u32 rank | rank × u64 dims | payload
//! ```
//!
//! Records are written in sorted name order, so identical state gives identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore};
use crate::pipeline::{ModelConfig, StyleModel, APATH_PREFIX, DENOISER_PREFIX, FROZEN_PREFIX, VQ_PREFIX};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const MAGIC: [u8; 4] = *b"D2ST";
pub const FORMAT_VERSION: u32 = 1;
const OPT_FIRST: &str = "opt.m.";
const OPT_SECOND: &str = "opt.v.";

/// Model and training settings, written with every default spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Malformed(format!("run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Which part of the model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Vqae,
    Perceptual,
    Denoiser,
    Full,
}

impl Component {
    pub fn tag(self) -> u8 {
        match self {
            Component::Vqae => 0,
            Component::Perceptual => 1,
            Component::Denoiser => 2,
            Component::Full => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [Component::Vqae, Component::Perceptual, Component::Denoiser, Component::Full]
            .into_iter()
            .find(|c| c.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Vqae => "vqae",
            Component::Perceptual => "perceptual",
            Component::Denoiser => "denoiser",
            Component::Full => "full",
        }
    }

    /// Every tensor name and shape this component must hold under `cfg`.
    pub fn expected_shapes(self, cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut add = |prefix: &str, shapes: Vec<(String, Vec<usize>)>| {
            for (n, s) in shapes {
                out.insert(format!("{prefix}{n}"), s);
            }
        };
        if matches!(self, Component::Vqae | Component::Full) {
            add(VQ_PREFIX, cfg.vq.tensor_shapes());
        }
        if matches!(self, Component::Perceptual | Component::Full) {
            add(FROZEN_PREFIX, cfg.perceptual.tensor_shapes());
            add(APATH_PREFIX, cfg.perceptual.tensor_shapes());
        }
        if matches!(self, Component::Denoiser | Component::Full) {
            add(DENOISER_PREFIX, cfg.denoiser.tensor_shapes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    config: OptimizerConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: RunConfig,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub component: Component,
    pub config: RunConfig,
    pub params: ParamStore<S>,
    pub optimizer: Option<Optimizer<S>>,
}

fn ckpt(e: CheckpointError) -> Error {
    Error::Checkpoint(e)
}

impl<S: Scalar> Checkpoint<S> {
    /// Snapshot of `component`'s tensors from a full model.
    pub fn from_model(model: &StyleModel<S>, component: Component, train: TrainConfig, optimizer: Option<&Optimizer<S>>) -> Self {
        let keep = component.expected_shapes(&model.config);
        let mut params = ParamStore::new();
        for (n, t) in model.params.iter() {
            if keep.contains_key(n) {
                params.insert(n.clone(), t.clone());
            }
        }
        let optimizer = optimizer.map(|o| {
            let mut o = o.clone();
            o.first.retain(|n, _| keep.contains_key(n));
            o.second.retain(|n, _| keep.contains_key(n));
            o
        });
        Checkpoint {
            component,
            config: RunConfig {
                model: model.config.clone(),
                train,
            },
            params,
            optimizer,
        }
    }

    /// Checks the tensor set and shapes against the embedded config.
    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(ckpt(CheckpointError::Empty));
        }
        self.config.model.validate()?;
        let expected = self.component.expected_shapes(&self.config.model);
        for (name, shape) in &expected {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| ckpt(CheckpointError::MissingTensor(name.clone())))?;
            if t.shape() != shape.as_slice() {
                return Err(ckpt(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                }));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains_key(*n)) {
            return Err(ckpt(CheckpointError::Malformed(format!(
                "unexpected tensor {extra} for component {}",
                self.component.name()
            ))));
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in opt.first.iter().chain(&opt.second) {
                match expected.get(name) {
                    Some(s) if t.shape() == s.as_slice() => {}
                    _ => {
                        return Err(ckpt(CheckpointError::Malformed(format!(
                            "optimizer state for {name} does not match a parameter"
                        ))))
                    }
                }
            }
        }
        Ok(())
    }

    /// A full model; fails unless the checkpoint holds every component.
    pub fn into_model(self) -> Result<(StyleModel<S>, Option<Optimizer<S>>)> {
        self.expect_component(Component::Full)?;
        Ok((StyleModel::from_params(self.config.model, self.params)?, self.optimizer))
    }

    pub fn expect_component(&self, c: Component) -> Result<()> {
        if self.component != c {
            return Err(ckpt(CheckpointError::WrongComponent {
                found: self.component.name().into(),
                expected: c.name().into(),
            }));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = Metadata {
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.component.tag());
        put_len(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_len(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t)?;
        }
        let opt: Vec<(String, &Tensor<S>)> = match &self.optimizer {
            Some(o) => o
                .first
                .iter()
                .map(|(n, t)| (format!("{OPT_FIRST}{n}"), t))
                .chain(o.second.iter().map(|(n, t)| (format!("{OPT_SECOND}{n}"), t)))
                .collect(),
            None => Vec::new(),
        };
        put_len(&mut out, opt.len())?;
        for (name, t) in &opt {
            put_tensor(&mut out, name, t)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(ckpt(CheckpointError::Truncated("shorter than the magic".into())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(ckpt(CheckpointError::BadMagic(magic)));
        }
        if bytes.len() < 4 + 4 + 1 + 4 {
            return Err(ckpt(CheckpointError::Truncated("header".into())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ckpt(CheckpointError::CrcMismatch { stored, computed }));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32("version")?;
        if version > FORMAT_VERSION || version == 0 {
            return Err(ckpt(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            }));
        }
        let tag = r.u8("component")?;
        let component = Component::from_tag(tag)
            .ok_or_else(|| ckpt(CheckpointError::Malformed(format!("unknown component tag {tag}"))))?;
        let json_len = r.u32("metadata length")? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(json_len, "metadata")?)
            .map_err(|e| ckpt(CheckpointError::Malformed(format!("metadata: {e}"))))?;

        let mut params = ParamStore::new();
        for (name, t) in r.tensors::<S>()? {
            if params.contains(&name) {
                return Err(ckpt(CheckpointError::Malformed(format!("duplicate tensor {name}"))));
            }
            params.insert(name, t);
        }
        let opt_tensors = r.tensors::<S>()?;
        if r.pos != body.len() {
            return Err(ckpt(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.pos
            ))));
        }
        let optimizer = match meta.optimizer {
            Some(m) => {
                let mut o = Optimizer::new(m.config);
                o.step = m.step;
                for (name, t) in opt_tensors {
                    if let Some(n) = name.strip_prefix(OPT_FIRST) {
                        o.first.insert(n.to_string(), t);
                    } else if let Some(n) = name.strip_prefix(OPT_SECOND) {
                        o.second.insert(n.to_string(), t);
                    } else {
                        return Err(ckpt(CheckpointError::Malformed(format!("unexpected optimizer tensor {name}"))));
                    }
                }
                Some(o)
            }
            None if opt_tensors.is_empty() => None,
            None => {
                return Err(ckpt(CheckpointError::Malformed(
                    "optimizer tensors without optimizer metadata".into(),
                )))
            }
        };
        let c = Checkpoint {
            component,
            config: meta.config,
            params,
            optimizer,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_len(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(S::DTYPE.code());
    put_len(out, t.rank())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match S::DTYPE {
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ckpt(CheckpointError::Truncated(what.into())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensors<S: Scalar>(&mut self) -> Result<Vec<(String, Tensor<S>)>> {
        let n = self.u32("tensor count")? as usize;
        let mut out = Vec::new();
        let mut last: Option<String> = None;
        for _ in 0..n {
            let len = self.u32("name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| ckpt(CheckpointError::Malformed("tensor name is not UTF-8".into())))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(ckpt(CheckpointError::Malformed(format!("tensor {name} out of order"))));
            }
            let code = self.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| ckpt(CheckpointError::Malformed(format!("unknown dtype {code} for {name}"))))?;
            if dtype != S::DTYPE {
                return Err(ckpt(CheckpointError::Malformed(format!(
                    "tensor {name} is {dtype:?}, expected {:?}",
                    S::DTYPE
                ))));
            }
            let rank = self.u32("rank")? as usize;
            if rank > 8 {
                return Err(ckpt(CheckpointError::Malformed(format!("rank {rank} for {name}"))));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut count: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(self.u64("dims")?)
                    .map_err(|_| ckpt(CheckpointError::Malformed("dimension overflow".into())))?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| ckpt(CheckpointError::Malformed("dimension overflow".into())))?;
                shape.push(d);
            }
            let bytes = count
                .checked_mul(dtype.size())
                .ok_or_else(|| ckpt(CheckpointError::Malformed("payload overflow".into())))?;
            let payload = self.take(bytes, "payload")?;
            let data: Vec<S> = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            out.push((name.clone(), Tensor::new(&shape, data)));
            last = Some(name);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tiny_config;
    use crate::training::Stage;

    fn full() -> Checkpoint<f32> {
        let m = StyleModel::<f32>::new(tiny_config(), 3).unwrap();
        Checkpoint::from_model(&m, Component::Full, TrainConfig::for_stage(Stage::Stage1), None)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = full();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
        let n = a.len();
        assert_eq!(crc32fast::hash(&a[..n - 4]).to_le_bytes(), a[n - 4..]);
    }

    #[test]
    fn components_hold_their_tensors() {
        let m = StyleModel::<f32>::new(tiny_config(), 3).unwrap();
        for comp in [Component::Vqae, Component::Perceptual, Component::Denoiser] {
            let c = Checkpoint::from_model(&m, comp, TrainConfig::default(), None);
            assert!(!c.params.is_empty());
            let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back.component, comp);
            assert!(back.clone().into_model().is_err());
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let mut b = full().to_bytes().unwrap();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&b),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
        let mut b = full().to_bytes().unwrap();
        let last = b.len() - 10;
        b[last] ^= 1;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&b),
            Err(Error::Checkpoint(CheckpointError::CrcMismatch { .. }))
        ));
        let mut b = full().to_bytes().unwrap();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&b),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion { found: 2, .. }))
        ));
    }

    #[test]
    fn rejects_missing_and_misshapen_tensors() {
        let mut c = full();
        let mut p = ParamStore::new();
        for (n, t) in c.params.iter().filter(|(n, _)| *n != "vq.codebook") {
            p.insert(n.clone(), t.clone());
        }
        c.params = p;
        assert!(matches!(
            c.to_bytes(),
            Err(Error::Checkpoint(CheckpointError::MissingTensor(n))) if n == "vq.codebook"
        ));
        let mut c = full();
        c.params.insert("vq.codebook", Tensor::zeros(&[2, 2]));
        assert!(matches!(
            c.to_bytes(),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
        let mut c = full();
        c.params = ParamStore::new();
        assert!(matches!(c.to_bytes(), Err(Error::Checkpoint(CheckpointError::Empty))));
    }

    #[test]
    fn run_config_roundtrip() {
        let rc = RunConfig {
            model: tiny_config(),
            train: TrainConfig::for_stage(Stage::Stage2),
        };
        let s = rc.to_json();
        assert_eq!(RunConfig::from_json(&s).unwrap(), rc);
        assert!(s.contains("\"lambda_mlm\""));
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }
}
