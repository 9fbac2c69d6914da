//! Binary checkpoint format: a named-tensor table with a config echo and
//! step counter. Payloads are little-endian f32, so save/load round trips
//! are bit-exact; loads into a mismatched architecture fail with the first
//! offending tensor named. Writes go through a temp file and rename.

use crate::error::{Error, Result};
use crate::nn::ParamContainer;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSRT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: String,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(step: u64, config: String) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config,
            tensors: Vec::new(),
        }
    }

    /// Append every parameter of a container under its prefix, in the
    /// container's canonical traversal order.
    pub fn add<C: ParamContainer<f32>>(&mut self, container: &C, prefix: &str) {
        container.for_each_param(prefix, &mut |name, tensor| {
            self.tensors.push((name, tensor.clone()));
        });
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Require the stored tensor names to be exactly `expected`; any
    /// missing or unknown name is an architecture mismatch.
    pub fn verify_names(&self, expected: &[String]) -> Result<()> {
        use std::collections::BTreeSet;
        let stored: BTreeSet<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let wanted: BTreeSet<&str> = expected.iter().map(|s| s.as_str()).collect();
        if let Some(missing) = wanted.difference(&stored).next() {
            return Err(Error::Architecture(format!(
                "checkpoint is missing tensor {missing}"
            )));
        }
        if let Some(unknown) = stored.difference(&wanted).next() {
            return Err(Error::Architecture(format!(
                "checkpoint carries unknown tensor {unknown}"
            )));
        }
        Ok(())
    }

    /// Copy stored tensors into a container; every parameter must be
    /// present with the exact shape.
    pub fn extract<C: ParamContainer<f32>>(&self, container: &mut C, prefix: &str) -> Result<()> {
        let mut failure: Option<Error> = None;
        container.for_each_param_mut(prefix, &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            match self.get(&name) {
                None => {
                    failure = Some(Error::Architecture(format!(
                        "checkpoint is missing tensor {name}"
                    )));
                }
                Some(stored) if stored.shape != tensor.shape => {
                    failure = Some(Error::Architecture(format!(
                        "tensor {name}: stored shape {:?} vs expected {:?}",
                        stored.shape, tensor.shape
                    )));
                }
                Some(stored) => *tensor = stored.clone(),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(tensor.shape.len() as u8);
            for &d in &tensor.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &tensor.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ssrt.tmp");
        std::fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let step = cur.u64()?;
        let cfg_len = cur.u32()? as usize;
        let config = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Format("config echo is not valid UTF-8".into()))?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor table",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            version,
            step,
            config,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Parsed key=value config echo.
    pub fn config_map(&self) -> BTreeMap<String, String> {
        parse_kv(&self.config)
    }
}

/// Flat key=value text, one pair per line; blank lines and '#' comments
/// are skipped.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

pub fn render_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// SHA-256 over the canonical serialization of a parameter group; the
/// freezing contract compares these before and after training runs.
pub fn weights_checksum<C: ParamContainer<f32>>(container: &C, prefix: &str) -> String {
    let mut hasher = Sha256::new();
    container.for_each_param(prefix, &mut |name, tensor| {
        hasher.update(name.as_bytes());
        hasher.update((tensor.shape.len() as u64).to_le_bytes());
        for &d in &tensor.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            hasher.update(v.to_le_bytes());
        }
    });
    hex(&hasher.finalize())
}

/// Content hash of an input artifact, recorded into run provenance.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn string_sha256(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearLayer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(seed: u64) -> LinearLayer<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearLayer::new(3, 4, true, &mut rng)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ssrt");
        let p2 = dir.path().join("b.ssrt");
        let l = layer(1);
        let mut ck = Checkpoint::new(42, "kind=test\n".into());
        ck.add(&l, "lin");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.step, 42);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_restores_tensors_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssrt");
        let l = layer(2);
        let mut ck = Checkpoint::new(0, String::new());
        ck.add(&l, "lin");
        ck.save(&path).unwrap();

        let mut target = layer(99);
        assert_ne!(target.weight.data, l.weight.data);
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.extract(&mut target, "lin").unwrap();
        assert_eq!(target.weight.data, l.weight.data);
        assert_eq!(target.bias.as_ref().unwrap().data, l.bias.as_ref().unwrap().data);
    }

    #[test]
    fn truncated_file_is_a_format_error_without_partial_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssrt");
        let l = layer(3);
        let mut ck = Checkpoint::new(0, String::new());
        ck.add(&l, "lin");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssrt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn architecture_mismatch_names_the_first_offending_tensor() {
        let l = layer(4);
        let mut ck = Checkpoint::new(0, String::new());
        ck.add(&l, "lin");

        // wrong shape
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut too_wide: LinearLayer<f32> = LinearLayer::new(5, 4, true, &mut rng);
        match ck.extract(&mut too_wide, "lin") {
            Err(Error::Architecture(msg)) => assert!(msg.contains("lin.w"), "{msg}"),
            other => panic!("expected architecture error, got {other:?}"),
        }

        // unknown/missing names through the strict set check
        let err = ck
            .verify_names(&["other.w".to_string()])
            .unwrap_err();
        assert!(matches!(err, Error::Architecture(_)));
    }

    #[test]
    fn checksum_tracks_content() {
        let mut l = layer(6);
        let before = weights_checksum(&l, "lin");
        assert_eq!(before, weights_checksum(&l, "lin"));
        l.weight.data[0] += 1.0;
        assert_ne!(before, weights_checksum(&l, "lin"));
    }

    #[test]
    fn kv_round_trip() {
        let mut map = BTreeMap::new();
        map.insert("canvas".to_string(), "32".to_string());
        map.insert("kind".to_string(), "base".to_string());
        let text = render_kv(&map);
        assert_eq!(parse_kv(&text), map);
    }
}
