//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SCL1"                      magic
//! u32                         container version
//! u16 len, bytes              role ("CU", "SU1", ...)
//! u32 count, then count x     metadata entries
//!     (u16 len, key bytes, u16 len, value bytes)
//! u32                         number of networks
//! per network:
//!     u16 len, bytes          network name
//!     u32                     layer count
//!     per layer:
//!         u32 rows, u32 cols  weight shape (out, in)
//!         u8                  activation tag
//!         rows*cols f64       weights, row-major
//!         rows f64            biases
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, DenseLayer, DenseNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub meta: BTreeMap<String, String>,
    pub nets: Vec<(String, DenseNet)>,
}

impl Checkpoint {
    pub fn new(role: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            meta: BTreeMap::new(),
            nets: Vec::new(),
        }
    }

    pub fn with_net(mut self, name: &str, net: &DenseNet) -> Self {
        self.nets.push((name.to_owned(), net.clone()));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| Error::Checkpoint(format!("network '{name}' missing from {} checkpoint", self.role)))
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key '{key}' missing")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata key '{key}' has unparsable value '{raw}'")))
    }

    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role != role {
            return Err(Error::Checkpoint(format!(
                "expected a {role} checkpoint, found role '{}'",
                self.role
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.role);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for (name, net) in &self.nets {
            put_str(&mut out, name);
            out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
            for layer in net.layers() {
                out.extend_from_slice(&(layer.outputs() as u32).to_le_bytes());
                out.extend_from_slice(&(layer.inputs() as u32).to_le_bytes());
                out.push(layer.activation.tag());
                for w in layer.weights.iter() {
                    out.extend_from_slice(&w.to_le_bytes());
                }
                for b in layer.biases.iter() {
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SCL1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let role = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let net_count = r.u32()?;
        let mut nets = Vec::with_capacity(net_count as usize);
        for _ in 0..net_count {
            let name = r.string()?;
            let layer_count = r.u32()?;
            let mut layers = Vec::with_capacity(layer_count as usize);
            for _ in 0..layer_count {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let tag = r.u8()?;
                let activation = Activation::from_tag(tag)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))?;
                let weights = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let biases = Array1::from_vec(r.f64s(rows)?);
                layers.push(DenseLayer::new(weights, biases, activation)?);
            }
            let net = DenseNet::new(layers).map_err(|e| Error::Checkpoint(format!("network '{name}': {e}")))?;
            nets.push((name, net));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { role, meta, nets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_owned()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::Rng64;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let layer = DenseLayer::new(ndarray::array![[1.0, 2.0]], ndarray::array![0.5], Activation::Sigmoid).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        let bytes = Checkpoint::new("CU").with_net("n", &net).to_bytes();
        let mut expected = b"SCL1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[2, 0, b'C', b'U']);
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[1, 0, b'n']);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.push(3);
        for v in [1.0f64, 2.0, 0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let net = DenseNet::init(&[3, 2], &[Activation::Relu], &mut Rng64::from_seed(0)).unwrap();
        let mut bytes = Checkpoint::new("SU1").with_net("enc", &net).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_networks(seed in any::<u64>(), widths in proptest::collection::vec(1usize..6, 2..5)) {
            let mut rng = Rng64::from_seed(seed);
            let acts: Vec<Activation> = (0..widths.len() - 1)
                .map(|i| Activation::ALL[(seed as usize + i) % 4])
                .collect();
            let net = DenseNet::init(&widths, &acts, &mut rng).unwrap();
            let ckpt = Checkpoint::new("CU").with_meta("trained", true).with_net("trunk", &net);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(back, ckpt);
        }
    }
}
