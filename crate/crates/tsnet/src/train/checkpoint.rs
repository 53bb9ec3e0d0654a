//! Versioned binary checkpoint holding the model, optimizer moments, and
//! the style table's rng state. Saving a loaded checkpoint reproduces the
//! file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Model, NetworkParams, STYLE_PARAM_NAMES};
use crate::tensor::Tensor;
use crate::tsb::StyleTable;

use super::adam::AdamState;
use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TSNF1";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: Option<TrainConfig>,
    pub iteration: u64,
    pub adam: Option<AdamState<f32>>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn payload(&mut self, t: &Tensor<f32>) {
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u8(DTYPE_F32);
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.payload(t);
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
    fn payload(&mut self, numel: usize) -> Result<Vec<f32>> {
        let raw = self.take(numel * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        if self.u8()? != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = self.payload(numel)?;
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.b.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.b.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            buf: CHECKPOINT_MAGIC.to_vec(),
        };
        w.u32(VERSION);
        w.str(&serde_json::to_string(&self.model.config)?);
        match &self.train_config {
            None => w.u8(0),
            Some(tc) => {
                w.u8(1);
                w.str(&serde_json::to_string(tc)?);
            }
        }
        w.u64(self.iteration);

        let named = self.model.named_tensors();
        w.u32(named.len() as u32);
        for (name, t) in &named {
            w.tensor(name, t);
        }

        match &self.model.style {
            None => w.u8(0),
            Some(st) => {
                w.u8(1);
                w.u32(st.rows_map().len() as u32);
                for (&tsi, &row) in st.rows_map() {
                    w.u32(tsi);
                    w.u32(row as u32);
                }
                let (seed, word_pos) = st.rng_state();
                w.buf.extend_from_slice(&seed);
                w.u128(word_pos);
            }
        }

        match &self.adam {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.u64(adam.step);
                w.u32(adam.m.len() as u32);
                for (name, m) in &adam.m {
                    let v = adam.v.get(name).ok_or_else(|| {
                        Error::Checkpoint(format!("optimizer moment v missing for {name}"))
                    })?;
                    w.str(name);
                    w.u32(m.numel() as u32);
                    w.payload(m);
                    w.payload(v);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: crate::net::NetworkConfig = serde_json::from_str(&r.str()?)?;
        config.validate()?;
        let train_config: Option<TrainConfig> = match r.u8()? {
            0 => None,
            1 => Some(serde_json::from_str(&r.str()?)?),
            t => return Err(Error::Checkpoint(format!("bad train-config tag {t}"))),
        };
        let iteration = r.u64()?;

        let n = r.u32()? as usize;
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }

        let style = match r.u8()? {
            0 => None,
            1 => {
                let n_rows = r.u32()? as usize;
                let mut rows = BTreeMap::new();
                for _ in 0..n_rows {
                    let tsi = r.u32()?;
                    let row = r.u32()? as usize;
                    rows.insert(tsi, row);
                }
                let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
                let word_pos = r.u128()?;
                let mut take = |name: &str| {
                    tensors
                        .remove(name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
                };
                let e = take(STYLE_PARAM_NAMES[0])?;
                let wg = take(STYLE_PARAM_NAMES[1])?;
                let wb = take(STYLE_PARAM_NAMES[2])?;
                let bg = take(STYLE_PARAM_NAMES[3])?;
                let bb = take(STYLE_PARAM_NAMES[4])?;
                Some(StyleTable::from_parts(
                    config.adain_eps,
                    config.style_init_k,
                    e,
                    wg,
                    wb,
                    bg,
                    bb,
                    rows,
                    seed,
                    word_pos,
                )?)
            }
            t => return Err(Error::Checkpoint(format!("bad style tag {t}"))),
        };
        if style.is_some() != (config.head_mode == crate::net::HeadMode::Tsb) {
            return Err(Error::Checkpoint(
                "style section inconsistent with head mode".into(),
            ));
        }

        let reference = NetworkParams::<f32>::init(&config, 0)?;
        if tensors.keys().cloned().collect::<Vec<_>>() != reference.names() {
            return Err(Error::Checkpoint(format!(
                "parameter names do not match config; got {:?}",
                tensors.keys().collect::<Vec<_>>()
            )));
        }
        for (name, t) in &tensors {
            let want = reference.get(name).expect("names checked").shape();
            if t.shape() != want {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }

        let model = Model {
            config,
            params: NetworkParams::from_map(tensors),
            style,
        };
        let shapes: BTreeMap<String, Vec<usize>> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();

        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let mut state = AdamState::new();
                state.step = step;
                for _ in 0..n {
                    let name = r.str()?;
                    let shape = shapes.get(&name).ok_or_else(|| {
                        Error::Checkpoint(format!("optimizer moment for unknown tensor {name}"))
                    })?;
                    let numel = r.u32()? as usize;
                    if numel != shape.iter().product::<usize>() {
                        return Err(Error::Checkpoint(format!("{name}: moment size mismatch")));
                    }
                    let m = r.payload(numel)?;
                    let v = r.payload(numel)?;
                    state.m.insert(name.clone(), Tensor::from_vec(shape, m)?);
                    state.v.insert(name, Tensor::from_vec(shape, v)?);
                }
                Some(state)
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
        };
        r.done()?;

        Ok(Checkpoint {
            model,
            train_config,
            iteration,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HeadMode, NetworkConfig};

    fn tiny_model(head: HeadMode) -> Model<f32> {
        let config = NetworkConfig {
            conv_channels: vec![2, 3],
            rnn_hidden: 4,
            num_classes: 5,
            embedding_dim: 3,
            head_mode: head,
            ..NetworkConfig::default()
        };
        let mut model = Model::new(config, 42).unwrap();
        if let Some(st) = model.style.as_mut() {
            st.register_tsi(0).unwrap();
            st.register_tsi(7).unwrap();
            st.register_tsi(3).unwrap();
        }
        model
    }

    fn fake_adam(model: &Model<f32>) -> AdamState<f32> {
        let mut state = AdamState::new();
        state.step = 17;
        let mut k = 0.0f32;
        for (name, t) in model.named_tensors() {
            k += 1.0;
            state
                .m
                .insert(name.clone(), Tensor::full(&[t.numel()], 0.25 * k));
            state.v.insert(name, Tensor::full(&[t.numel()], 0.5 * k));
        }
        state
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for head in [HeadMode::Tsb, HeadMode::FrnBaseline] {
            let model = tiny_model(head);
            let adam = fake_adam(&model);
            let ck = Checkpoint {
                model,
                train_config: Some(TrainConfig::default()),
                iteration: 123,
                adam: Some(adam),
            };
            let bytes = ck.to_bytes().unwrap();
            let loaded = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(loaded.iteration, 123);
            assert_eq!(loaded.to_bytes().unwrap(), bytes, "{head:?}");
        }
    }

    #[test]
    fn round_trip_without_optional_sections() {
        let ck = Checkpoint {
            model: tiny_model(HeadMode::Tsb),
            train_config: None,
            iteration: 0,
            adam: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(loaded.adam.is_none());
        assert!(loaded.train_config.is_none());
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn loaded_model_preserves_values_and_rows() {
        let model = tiny_model(HeadMode::Tsb);
        let ck = Checkpoint {
            model,
            train_config: None,
            iteration: 5,
            adam: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        for ((an, at), (bn, bt)) in ck
            .model
            .named_tensors()
            .iter()
            .zip(loaded.model.named_tensors().iter())
        {
            assert_eq!(an, bn);
            assert_eq!(at, bt, "{an}");
        }
        let a = ck.model.style.as_ref().unwrap();
        let b = loaded.model.style.as_ref().unwrap();
        assert_eq!(a.rows_map(), b.rows_map());
        assert_eq!(a.rng_state(), b.rng_state());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let ck = Checkpoint {
            model: tiny_model(HeadMode::Tsb),
            train_config: None,
            iteration: 0,
            adam: None,
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn style_section_must_match_head() {
        // A baseline-head config carrying a style table cannot serialize
        // into something loadable.
        let tsb = tiny_model(HeadMode::Tsb);
        let frankenstein = Model {
            config: NetworkConfig {
                head_mode: HeadMode::FrnBaseline,
                ..tsb.config.clone()
            },
            params: tsb.params.clone(),
            style: tsb.style.clone(),
        };
        let ck = Checkpoint {
            model: frankenstein,
            train_config: None,
            iteration: 0,
            adam: None,
        };
        let bytes = ck.to_bytes().unwrap();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(_)) => {}
            Err(e) => panic!("wrong error kind: {e}"),
            Ok(_) => panic!("head/style mismatch was accepted"),
        }
    }
}
