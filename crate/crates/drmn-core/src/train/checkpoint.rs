//! Single-file checkpoint: magic "DRMNCKPT", a dataset-shape echo, the full
//! parameter table (f64, canonical name order), optimizer state, RNG state,
//! and the resolved config as embedded JSON. Save -> load restores training
//! bit-exactly. All integers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::dataset::LevelShape;
use crate::error::{Error, Result};
use crate::eval::EnsembleConfig;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CKPT_MAGIC: &[u8; 8] = b"DRMNCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Dataset dimensions the checkpoint was trained against; evaluation
/// refuses datasets that disagree.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DimsEcho {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub level_shapes: Vec<LevelShape>,
    pub ref_level: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub dims: DimsEcho,
    pub params: BTreeMap<String, Tensor>,
    pub opt: BTreeMap<String, AdamState>,
    pub rng_state: [u64; 4],
    pub train_config: TrainConfig,
    pub ensemble: EnsembleConfig,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigEcho {
    train: TrainConfig,
    ensemble: EnsembleConfig,
    dims: DimsEcho,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                file: self.file.clone(),
                detail: "truncated checkpoint".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            file: self.file.clone(),
            detail: "non-utf8 string".into(),
        })
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_u32(&mut buf, ckpt.epoch as u32);

    put_u32(&mut buf, ckpt.params.len() as u32);
    for (name, t) in &ckpt.params {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &e in t.shape() {
            put_u32(&mut buf, e as u32);
        }
        put_f64s(&mut buf, t.data());
    }

    put_u32(&mut buf, ckpt.opt.len() as u32);
    for (name, st) in &ckpt.opt {
        put_str(&mut buf, name);
        put_u64(&mut buf, st.t);
        put_f64s(&mut buf, &[st.beta1, st.beta2, st.eps]);
        put_u32(&mut buf, st.m.len() as u32);
        put_f64s(&mut buf, &st.m);
        put_f64s(&mut buf, &st.v);
    }

    for w in ckpt.rng_state {
        put_u64(&mut buf, w);
    }

    let echo = ConfigEcho {
        train: ckpt.train_config.clone(),
        ensemble: ckpt.ensemble,
        dims: ckpt.dims.clone(),
    };
    put_str(&mut buf, &serde_json::to_string(&echo)?);

    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        file: path.display().to_string(),
    };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            file: r.file.clone(),
            detail: "bad magic bytes".into(),
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            file: r.file.clone(),
            detail: format!("unsupported version {version}"),
        });
    }
    let epoch = r.u32()? as usize;

    let n_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n)?;
        params.insert(name, Tensor::new(shape, data)?.with_grad());
    }

    let n_opt = r.u32()? as usize;
    let mut opt = BTreeMap::new();
    for _ in 0..n_opt {
        let name = r.string()?;
        let t = r.u64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let n = r.u32()? as usize;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        opt.insert(
            name,
            AdamState {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            },
        );
    }

    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    let echo: ConfigEcho = serde_json::from_str(&r.string()?)?;

    Ok(Checkpoint {
        epoch,
        dims: echo.dims,
        params,
        opt,
        rng_state,
        train_config: echo.train,
        ensemble: echo.ensemble,
    })
}
