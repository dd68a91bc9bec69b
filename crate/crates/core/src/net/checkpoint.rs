//! Binary checkpoints ("KWB1") with a JSON sidecar.
//!
//! Layout, all little-endian: magic, input size, kernel order, stage count
//! and one width per stage as u32, seed as u64, then parameters, Adam first
//! moments and Adam second moments as f32 in declaration order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, Network, NetworkSpec, TrainConfig};
use crate::confidence::LevelStatistic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KWB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub step: u64,
    pub seed: u64,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    /// Mean level statistic over the training scenes.
    pub confidence_training_mean: Option<f64>,
    #[serde(default)]
    pub level_statistic: LevelStatistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub adam: AdamState,
    pub sidecar: Option<Sidecar>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(network: &Network, adam: &AdamState) -> Result<Vec<u8>> {
    let spec = network.spec();
    let n = network.param_count();
    if adam.m.len() != n || adam.v.len() != n {
        return Err(Error::Format(
            "Adam moments do not match the parameter count".into(),
        ));
    }
    let mut out = Vec::with_capacity(32 + 12 * n);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, spec.input_size)?;
    put_u32(&mut out, spec.kernel_order)?;
    put_u32(&mut out, spec.encoder_widths.len())?;
    for &w in &spec.encoder_widths {
        put_u32(&mut out, w)?;
    }
    out.extend_from_slice(&spec.seed.to_le_bytes());
    for tensor in [network.params(), &adam.m, &adam.v] {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(
    path: &Path,
    network: &Network,
    adam: &AdamState,
    sidecar: &Sidecar,
) -> Result<()> {
    fs::write(path, encode_checkpoint(network, adam)?)?;
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f32::from_le_bytes(self.bytes()?) as f64))
            .collect()
    }
}

pub fn decode_checkpoint(bytes: impl Read) -> Result<(Network, AdamState)> {
    let mut r = Reader { inner: bytes };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let input_size = r.u32()?;
    let kernel_order = r.u32()?;
    let stages = r.u32()?;
    if stages > 16 {
        return Err(Error::Format(format!("implausible stage count {stages}")));
    }
    let encoder_widths = (0..stages).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let seed = u64::from_le_bytes(r.bytes()?);
    let spec = NetworkSpec {
        input_size,
        kernel_order,
        encoder_widths,
        seed,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
    let n = Network::zeroed(spec.clone())?.param_count();
    let params = r.f32s(n)?;
    let m = r.f32s(n)?;
    let v = r.f32s(n)?;
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((
        Network::from_params(spec, params)?,
        AdamState { m, v, step: 0 },
    ))
}

/// Reads a checkpoint and, when present, its sidecar (which restores the
/// Adam step count).
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (network, mut adam) =
        decode_checkpoint(fs::File::open(path).map(std::io::BufReader::new)?)?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() {
        let s: Sidecar = serde_json::from_slice(&fs::read(&side)?)?;
        adam.step = s.step;
        Some(s)
    } else {
        None
    };
    Ok(Checkpoint {
        network,
        adam,
        sidecar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetworkSpec {
        NetworkSpec {
            input_size: 8,
            kernel_order: 1,
            encoder_widths: vec![2, 3],
            seed: 42,
        }
    }

    #[test]
    fn round_trip_through_f32() {
        let net = Network::new(spec()).unwrap();
        let mut adam = AdamState::new(net.param_count());
        adam.m
            .iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = i as f64 * 0.5);
        let bytes = encode_checkpoint(&net, &adam).unwrap();
        assert_eq!(&bytes[..4], b"KWB1");
        assert_eq!(bytes.len(), 4 + 4 * 5 + 8 + 12 * net.param_count());
        let (back, moments) = decode_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.spec(), net.spec());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(moments.m, adam.m);
        // Encoding the decoded state reproduces the bytes.
        assert_eq!(encode_checkpoint(&back, &moments).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let net = Network::new(spec()).unwrap();
        let bytes = encode_checkpoint(&net, &AdamState::new(net.param_count())).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kwb");
        let net = Network::new(spec()).unwrap();
        let adam = AdamState::new(net.param_count());
        let side = Sidecar {
            step: 7,
            seed: 42,
            spec: spec(),
            config: TrainConfig::default(),
            confidence_training_mean: Some(3.5),
            level_statistic: LevelStatistic::Rb,
        };
        write_checkpoint(&path, &net, &adam, &side).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.sidecar, Some(side));
        assert_eq!(ck.adam.step, 7);
        assert!(sidecar_path(&path).ends_with("m.kwb.json"));
    }
}
