//! The `PPWB` weight bundle: a flat, little-endian container of named f32
//! tensors.
//!
//! ```text
//! "PPWB" | version u32 = 1 | count u32
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 (1 = f32)
//!             | ndim u32 | dims u32 × ndim | data f32 × Π dims
//! ```
//!
//! Tensors are written in name order, so equal maps encode to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{DenseFFN, ExpertBlock, MoefiedFFN};
use crate::numkit::Matrix;
use crate::routing::{GateMode, RouterState};

pub const MAGIC: &[u8; 4] = b"PPWB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::Config(format!("dims {dims:?} overflow")))?;
        if n != data.len() {
            return Err(Error::shape("Tensor::new", format!("{dims:?}"), data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data.clone()),
            _ => Err(Error::shape("Tensor::to_matrix", format!("{:?}", self.dims), "2 dims")),
        }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub type Bundle = BTreeMap<String, Tensor>;

pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::Config(format!("{what} does not fit in 32 bits"));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(bundle.len()).map_err(|_| too_big("tensor count"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in bundle {
        if element_count(&t.dims) != Some(t.data.len()) {
            return Err(Error::shape("encode_bundle", name.clone(), t.data.len()));
        }
        let name_len = u32::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let ndim = u32::try_from(t.dims.len()).map_err(|_| too_big("ndim"))?;
        out.extend_from_slice(&ndim.to_le_bytes());
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| too_big("dimension"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {remaining} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"PPWB\""),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut bundle = Bundle::new();
    for _ in 0..count {
        let start = c.pos;
        let name_len = c.u32("name length")? as usize;
        let name_bytes = c.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Parse {
                offset: start + 4,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dtype_at = c.pos;
        let dtype = c.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Parse {
                offset: dtype_at,
                msg: format!("unknown dtype code {dtype} for tensor `{name}`"),
            });
        }
        let ndim = c.u32("ndim")? as usize;
        let dims_at = c.pos;
        let dims = (0..ndim)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes_needed = element_count(&dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Parse {
                offset: dims_at,
                msg: format!("dims {dims:?} of `{name}` overflow"),
            })?;
        let payload = c.take(bytes_needed, "tensor data")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if bundle.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(Error::Parse {
                offset: start,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(bundle)
}

pub fn write_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_bundle(&bytes)
}

pub fn get<'a>(bundle: &'a Bundle, name: &str) -> Result<&'a Tensor> {
    bundle.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

pub fn get_matrix(bundle: &Bundle, name: &str) -> Result<Matrix> {
    get(bundle, name)?.to_matrix()
}

pub fn put_matrix(bundle: &mut Bundle, name: impl Into<String>, m: &Matrix) {
    bundle.insert(name.into(), Tensor::from_matrix(m));
}

/// Layers are numbered from zero without gaps; counts `layer{l}.<suffix>`.
pub fn count_layers(bundle: &Bundle, suffix: &str) -> usize {
    (0..)
        .take_while(|l| bundle.contains_key(&format!("layer{l}.{suffix}")))
        .count()
}

fn index_vector(t: &Tensor, name: &str, n: usize) -> Result<Vec<usize>> {
    if t.data.len() != n {
        return Err(Error::shape("index vector", name.to_string(), n));
    }
    t.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < n {
                Ok(v as usize)
            } else {
                Err(Error::Consistency(format!("`{name}` holds {v}, not an index below {n}")))
            }
        })
        .collect()
}

pub fn put_dense(bundle: &mut Bundle, layer: usize, ffn: &DenseFFN) {
    put_matrix(bundle, format!("layer{layer}.dense.w_gate"), ffn.w_gate());
    put_matrix(bundle, format!("layer{layer}.dense.w_up"), ffn.w_up());
    put_matrix(bundle, format!("layer{layer}.dense.w_down"), ffn.w_down());
}

pub fn get_dense(bundle: &Bundle, layer: usize) -> Result<DenseFFN> {
    DenseFFN::new(
        get_matrix(bundle, &format!("layer{layer}.dense.w_gate"))?,
        get_matrix(bundle, &format!("layer{layer}.dense.w_up"))?,
        get_matrix(bundle, &format!("layer{layer}.dense.w_down"))?,
    )
}

pub fn dense_layers(bundle: &Bundle) -> Result<Vec<DenseFFN>> {
    let n = count_layers(bundle, "dense.w_gate");
    if n == 0 {
        return Err(Error::MissingTensor("layer0.dense.w_gate".into()));
    }
    (0..n).map(|l| get_dense(bundle, l)).collect()
}

/// Stores the permuted layer as three matrices plus the permutation and
/// the expert count.
pub fn put_moefied(bundle: &mut Bundle, layer: usize, m: &MoefiedFFN) {
    let permuted = m.permuted_dense();
    put_matrix(bundle, format!("layer{layer}.moe.w_gate"), permuted.w_gate());
    put_matrix(bundle, format!("layer{layer}.moe.w_up"), permuted.w_up());
    put_matrix(bundle, format!("layer{layer}.moe.w_down"), permuted.w_down());
    bundle.insert(
        format!("layer{layer}.moe.perm"),
        Tensor::vector(m.perm().iter().map(|&p| p as f32).collect()),
    );
    bundle.insert(
        format!("layer{layer}.moe.experts"),
        Tensor::vector(vec![m.num_experts() as f32]),
    );
}

pub fn get_moefied(bundle: &Bundle, layer: usize) -> Result<MoefiedFFN> {
    let name = |s: &str| format!("layer{layer}.moe.{s}");
    let w_gate = get_matrix(bundle, &name("w_gate"))?;
    let w_up = get_matrix(bundle, &name("w_up"))?;
    let w_down = get_matrix(bundle, &name("w_down"))?;
    let d_ff = w_gate.cols();
    let perm = index_vector(get(bundle, &name("perm"))?, &name("perm"), d_ff)?;
    let count = get(bundle, &name("experts"))?;
    let num_experts = match count.data[..] {
        [e] if e >= 1.0 && e.fract() == 0.0 => e as usize,
        _ => return Err(Error::Consistency(format!("`{}` is not a positive count", name("experts")))),
    };
    if d_ff % num_experts != 0 {
        return Err(Error::Consistency(format!("d_ff = {d_ff} is not divisible by {num_experts} experts")));
    }
    let width = d_ff / num_experts;
    let experts = (0..num_experts)
        .map(|e| {
            let cols: Vec<usize> = (e * width..(e + 1) * width).collect();
            ExpertBlock::new(
                w_gate.select_columns(&cols),
                w_up.select_columns(&cols),
                w_down.select_rows(&cols),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MoefiedFFN::from_parts(perm, experts)
}

pub fn moefied_layers(bundle: &Bundle) -> Result<Vec<MoefiedFFN>> {
    let n = count_layers(bundle, "moe.w_gate");
    if n == 0 {
        return Err(Error::MissingTensor("layer0.moe.w_gate".into()));
    }
    (0..n).map(|l| get_moefied(bundle, l)).collect()
}

/// f32 storage of a threshold, read back as the shortest decimal that
/// round-trips, so `0.6` is stored and recovered as `0.6`.
fn widen(v: f32) -> f64 {
    v.to_string().parse().expect("f32 display parses as f64")
}

/// Router weights per layer plus one shared parameter vector
/// `[mode, tau, delta, k, rank_by_gate]`.
pub fn put_routers(bundle: &mut Bundle, routers: &[RouterState]) {
    for (l, r) in routers.iter().enumerate() {
        put_matrix(bundle, format!("layer{l}.router.w"), r.weights());
    }
    if let Some(r) = routers.first() {
        let (delta, k) = match r.mode {
            GateMode::CumulativeMass => (0.0, 0.0),
            GateMode::LteThreshold { delta } => (delta, 0.0),
            GateMode::FixedTopK { k } => (0.0, k as f32),
        };
        bundle.insert(
            "router.params".into(),
            Tensor::vector(vec![
                r.mode.code() as f32,
                r.tau as f32,
                delta,
                k,
                if r.rank_by_gate { 1.0 } else { 0.0 },
            ]),
        );
    }
}

pub fn get_routers(bundle: &Bundle) -> Result<Vec<RouterState>> {
    let n = count_layers(bundle, "router.w");
    if n == 0 {
        return Err(Error::MissingTensor("layer0.router.w".into()));
    }
    let params = get(bundle, "router.params")?;
    let [code, tau, delta, k, by_gate] = params.data[..] else {
        return Err(Error::Consistency("`router.params` must hold 5 values".into()));
    };
    let mode = match code as u32 {
        0 => GateMode::CumulativeMass,
        1 => GateMode::LteThreshold { delta },
        2 => GateMode::FixedTopK { k: k as usize },
        _ => return Err(Error::Consistency(format!("unknown router mode code {code}"))),
    };
    (0..n)
        .map(|l| {
            let mut r = RouterState::new(get_matrix(bundle, &format!("layer{l}.router.w"))?, widen(tau), mode)?;
            r.rank_by_gate = by_gate != 0.0;
            Ok(r)
        })
        .collect()
}

pub fn reference_routers(bundle: &Bundle) -> Result<Vec<Matrix>> {
    let n = count_layers(bundle, "reference.w");
    if n == 0 {
        return Err(Error::MissingTensor("layer0.reference.w".into()));
    }
    (0..n)
        .map(|l| get_matrix(bundle, &format!("layer{l}.reference.w")))
        .collect()
}
