//! Classifier persistence: a binary f64 parameter archive plus a JSON
//! sidecar. Save -> load -> save reproduces both files byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::{atomic_write, decode_f64_le, encode_f64_le, sha256_hex};
use crate::{Error, Result};

use super::{AccuracyReport, ClassifierHandle, ClassifierSpec, TeacherNet};

const MAGIC: &[u8; 4] = b"CINV";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub schema: String,
    pub spec: ClassifierSpec,
    pub tap_names: Vec<String>,
    pub accuracy: Option<AccuracyReport>,
    pub build_seed: u64,
    pub params_file: String,
    pub params_digest: String,
}

/// Writes `<name>.json` and `<name>.params.bin` under `dir`; returns the
/// sidecar path.
pub fn save_checkpoint(handle: &ClassifierHandle, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let params = encode_params(handle);
    let params_file = format!("{name}.params.bin");
    let sidecar = CheckpointSidecar {
        schema: "classifier-checkpoint/v1".into(),
        spec: handle.spec.clone(),
        tap_names: handle.tap_names.clone(),
        accuracy: handle.accuracy,
        build_seed: handle.build_seed,
        params_digest: sha256_hex(&params),
        params_file: params_file.clone(),
    };
    atomic_write(&dir.join(&params_file), &params)?;
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    let sidecar_path = dir.join(format!("{name}.json"));
    atomic_write(&sidecar_path, &json)?;
    Ok(sidecar_path)
}

/// Loads a checkpoint from its sidecar path.
pub fn load_checkpoint(sidecar_path: &Path) -> Result<ClassifierHandle> {
    let bytes = std::fs::read(sidecar_path)
        .map_err(|e| Error::Io(format!("{}: {e}", sidecar_path.display())))?;
    let sidecar: CheckpointSidecar = serde_json::from_slice(&bytes)?;
    if sidecar.schema != "classifier-checkpoint/v1" {
        return Err(Error::Io(format!("unknown checkpoint schema {}", sidecar.schema)));
    }
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let params_path = dir.join(&sidecar.params_file);
    let params = std::fs::read(&params_path)
        .map_err(|e| Error::Io(format!("{}: {e}", params_path.display())))?;
    if sha256_hex(&params) != sidecar.params_digest {
        return Err(Error::Io(format!(
            "parameter archive {} does not match its recorded digest",
            params_path.display()
        )));
    }
    let mut net = TeacherNet::from_spec(&sidecar.spec, sidecar.build_seed)?;
    decode_params(&mut net, &params)?;
    Ok(ClassifierHandle::from_parts(
        sidecar.spec,
        sidecar.build_seed,
        sidecar.accuracy,
        net,
    ))
}

fn encode_params(handle: &ClassifierHandle) -> Vec<u8> {
    let net = handle.net();
    let params = net.params();
    let bns = net.bn_layers();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
        out.extend_from_slice(&encode_f64_le(&p.value));
    }
    out.extend_from_slice(&(bns.len() as u64).to_le_bytes());
    for bn in &bns {
        out.extend_from_slice(&(bn.channels as u64).to_le_bytes());
        out.extend_from_slice(&encode_f64_le(&bn.running_mean));
        out.extend_from_slice(&encode_f64_le(&bn.running_var));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Io("truncated parameter archive".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
    }
}

fn decode_params(net: &mut TeacherNet, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Io("not a parameter archive".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Io(format!("unsupported archive version {version}")));
    }
    let n_params = r.u64()? as usize;
    let mut params = net.params_mut();
    if n_params != params.len() {
        return Err(Error::Io(format!(
            "archive has {n_params} tensors, architecture expects {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let len = r.u64()? as usize;
        if len != p.value.len() {
            return Err(Error::Io(format!(
                "tensor length {len} does not match architecture ({})",
                p.value.len()
            )));
        }
        let data = decode_f64_le(r.take(len * 8)?)?;
        for (dst, src) in p.value.iter_mut().zip(data) {
            *dst = src;
        }
    }
    drop(params);
    let n_bn = r.u64()? as usize;
    let mut bns = net.bn_layers_mut();
    if n_bn != bns.len() {
        return Err(Error::Io(format!(
            "archive has {n_bn} BN layers, architecture expects {}",
            bns.len()
        )));
    }
    for bn in bns.iter_mut() {
        let ch = r.u64()? as usize;
        if ch != bn.channels {
            return Err(Error::Io(format!(
                "BN channels {ch} do not match architecture ({})",
                bn.channels
            )));
        }
        let mean = decode_f64_le(r.take(ch * 8)?)?;
        let var = decode_f64_le(r.take(ch * 8)?)?;
        bn.running_mean = ndarray::Array1::from_vec(mean);
        bn.running_var = ndarray::Array1::from_vec(var);
    }
    if r.at != bytes.len() {
        return Err(Error::Io("trailing bytes in parameter archive".into()));
    }
    Ok(())
}
