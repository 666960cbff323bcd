//! Weight container: named f32 tensors, a deterministic initializer, and
//! the VMTW on-disk format.
//!
//! VMTW layout (all integers little-endian): magic `VMTW`, u32 version (1),
//! u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 ndim,
//! ndim x u64 dims, and the f32 data little-endian, row-major. Tensors
//! appear in manifest order with no padding.
//!
//! Initialization fills every tensor in manifest order from one SplitMix64
//! stream: the top 24 bits of each draw become a uniform value in [0, 1),
//! affine-mapped to [-0.02, 0.02).

use crate::error::{Error, Result};
use crate::model::ViTConfig;
use crate::rng::SplitMix64;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VMTW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn elem_count(dims: &[u64]) -> usize {
        dims.iter().product::<u64>() as usize
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<u64>, data: Vec<f32>) {
        assert_eq!(data.len(), Tensor::elem_count(&dims), "tensor {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Config(format!("tensor name too long: {}", t.name)));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Config(format!(
                "unsupported VMTW version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Config("tensor name is not UTF-8".into()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u64(&mut r)?);
            }
            let elems = Tensor::elem_count(&dims);
            let mut bytes = vec![0u8; elems * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(&name, dims, data);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Config("trailing data after last tensor".into()));
        }
        Ok(store)
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// The full tensor list for a configuration, in storage order.
pub fn manifest(cfg: &ViTConfig) -> Vec<(String, Vec<u64>)> {
    let d = cfg.dim as u64;
    let n = cfg.token_count() as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let patch_dim = cfg.patch_dim() as u64;
    let mut m = vec![
        ("patch_embed.weight".into(), vec![patch_dim, d]),
        ("patch_embed.bias".into(), vec![d]),
    ];
    if cfg.class_token {
        m.push(("cls_token".into(), vec![d]));
    }
    m.push(("pos_embed".into(), vec![n, d]));
    for l in 0..cfg.depth {
        let p = |suffix: &str| format!("block{l}.{suffix}");
        m.push((p("ln1.gamma"), vec![d]));
        m.push((p("ln1.beta"), vec![d]));
        m.push((p("qkv.weight"), vec![d, 3 * d]));
        m.push((p("qkv.bias"), vec![3 * d]));
        m.push((p("attn_out.weight"), vec![d, d]));
        m.push((p("attn_out.bias"), vec![d]));
        m.push((p("ln2.gamma"), vec![d]));
        m.push((p("ln2.beta"), vec![d]));
        m.push((p("mlp_up.weight"), vec![d, hidden]));
        m.push((p("mlp_up.bias"), vec![hidden]));
        m.push((p("mlp_down.weight"), vec![hidden, d]));
        m.push((p("mlp_down.bias"), vec![d]));
    }
    m.push(("final_norm.gamma".into(), vec![d]));
    m.push(("final_norm.beta".into(), vec![d]));
    m.push(("head.weight".into(), vec![d, cfg.classes as u64]));
    m.push(("head.bias".into(), vec![cfg.classes as u64]));
    m
}

/// Deterministic initialization: same seed, bit-identical store everywhere.
pub fn init_weights(cfg: &ViTConfig, seed: u64) -> WeightStore {
    let mut rng = SplitMix64::new(seed);
    let mut store = WeightStore::new();
    for (name, dims) in manifest(cfg) {
        let elems = Tensor::elem_count(&dims);
        let data = (0..elems).map(|_| rng.next_weight()).collect();
        store.insert(&name, dims, data);
    }
    store
}
