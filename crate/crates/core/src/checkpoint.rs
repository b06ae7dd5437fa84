//! Model checkpoints: a directory holding `params.prtc` (every tensor
//! flattened into one f64 array, in order) and `manifest.txt`.
//!
//! The manifest is line based. `key=value` lines carry configuration and
//! `tensor <name> <d0>x<d1>x…` lines list the tensors in storage order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use crate::consistency::ConsistencyModel;
use crate::data::container::{load_container, save_container, Array};
use crate::diffusion::{karras_schedule, DenoiserModel, SigmaSchedule};
use crate::error::{Error, Result};
use crate::network::{Params, UNet, UNetConfig};
use crate::tensor::Tensor;

pub const PARAMS_FILE: &str = "params.prtc";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>)>,
    path: PathBuf,
}

impl Manifest {
    pub fn new(kind: &str) -> Manifest {
        let mut m = Manifest::default();
        m.set("kind", kind);
        m
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn err(&self, reason: String) -> Error {
        Error::Manifest {
            path: self.path.clone(),
            reason,
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| self.err(format!("missing key '{}'", key)))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.err(format!("'{}' is not an integer: {}", key, v)))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.err(format!("'{}' is not an integer: {}", key, v)))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        v.parse().map_err(|_| self.err(format!("'{}' is not a number: {}", key, v)))
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| self.err(format!("'{}' is not an integer list: {}", key, v)))
            })
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let k = self.get("kind")?;
        if k != kind {
            return Err(self.err(format!("expected a {} checkpoint, found {}", kind, k)));
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Vec<usize>)] {
        &self.tensors
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{}={}\n", k, v));
        }
        for (name, shape) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("tensor {} {}\n", name, dims.join("x")));
        }
        s
    }

    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Manifest> {
        let mut m = Manifest {
            path: path.into(),
            ..Default::default()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(m.err(format!("line {}: malformed tensor entry", n + 1)));
                };
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| m.err(format!("line {}: bad shape '{}'", n + 1, dims)))?;
                m.tensors.push((name.to_string(), shape));
            } else if let Some((k, v)) = line.split_once('=') {
                m.entries.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(m.err(format!("line {}: expected key=value", n + 1)));
            }
        }
        Ok(m)
    }
}

/// Writes `params` and `manifest` into `dir`, creating it if needed.
pub fn save(dir: impl AsRef<Path>, manifest: &Manifest, params: &Params) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = manifest.clone();
    m.tensors = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let flat = params.flatten();
    let n = flat.len();
    save_container(&Array::from_tensor_f64(&Tensor::from_vec(&[n], flat)?), dir.join(PARAMS_FILE))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, m.to_text()).map_err(|e| Error::io(&mp, e))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let mp = dir.as_ref().join(MANIFEST_FILE);
    if !mp.exists() {
        return Err(Error::MissingPath(mp));
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Manifest::parse(&text, mp)
}

/// Reads a checkpoint directory back into a manifest and named tensors.
pub fn load(dir: impl AsRef<Path>) -> Result<(Manifest, Params)> {
    let dir = dir.as_ref();
    let m = load_manifest(dir)?;
    let flat = load_container(dir.join(PARAMS_FILE))?.to_tensor().into_data();
    let expected: usize = m.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if expected != flat.len() {
        return Err(m.err(format!(
            "manifest lists {} values but the parameter file holds {}",
            expected,
            flat.len()
        )));
    }
    let mut off = 0;
    let mut params = Params::default();
    for (name, shape) in &m.tensors {
        let n: usize = shape.iter().product();
        params.names.push(name.clone());
        params.tensors.push(Tensor::from_vec(shape, flat[off..off + n].to_vec())?);
        off += n;
    }
    Ok((m, params))
}

fn describe_model(m: &mut Manifest, cfg: &UNetConfig, schedule: &SigmaSchedule, sigma_data: f64) {
    m.set("base_channels", cfg.base_channels);
    m.set(
        "channel_multipliers",
        cfg.channel_multipliers.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
    );
    m.set("n_res_blocks_per_stage", cfg.n_res_blocks_per_stage);
    m.set("in_channels", cfg.in_channels);
    m.set("resolution", cfg.resolution);
    m.set("init_seed", cfg.seed);
    m.set("schedule_n", schedule.n());
    m.set("eps", format!("{:e}", schedule.eps()));
    m.set("t_max", format!("{:e}", schedule.t_max()));
    m.set("rho", format!("{:e}", schedule.rho()));
    m.set("sigma_data", format!("{:e}", sigma_data));
}

fn read_model(m: &Manifest, params: Params) -> Result<(UNet, Params, SigmaSchedule, f64)> {
    let cfg = UNetConfig {
        base_channels: m.get_usize("base_channels")?,
        channel_multipliers: m.get_usize_list("channel_multipliers")?,
        n_res_blocks_per_stage: m.get_usize("n_res_blocks_per_stage")?,
        in_channels: m.get_usize("in_channels")?,
        resolution: m.get_usize("resolution")?,
        seed: m.get_u64("init_seed")?,
    };
    let net = UNet::new(&cfg)?;
    net.check_params(&params)?;
    if params.names != net.init().names {
        return Err(m.err("tensor names do not match the network layout".into()));
    }
    let schedule = karras_schedule(
        m.get_usize("schedule_n")?,
        m.get_f64("eps")?,
        m.get_f64("t_max")?,
        m.get_f64("rho")?,
    )?;
    let sigma_data = m.get_f64("sigma_data")?;
    if !(sigma_data > 0.0) {
        return Err(m.err("sigma_data must be positive".into()));
    }
    Ok((net, params, schedule, sigma_data))
}

pub fn save_denoiser(dir: impl AsRef<Path>, model: &DenoiserModel) -> Result<()> {
    let mut m = Manifest::new("denoiser");
    describe_model(&mut m, model.net.config(), &model.schedule, model.sigma_data);
    save(dir, &m, &model.params)
}

pub fn load_denoiser(dir: impl AsRef<Path>) -> Result<DenoiserModel> {
    let (m, params) = load(dir)?;
    m.expect_kind("denoiser")?;
    let (net, params, schedule, sigma_data) = read_model(&m, params)?;
    Ok(DenoiserModel {
        net,
        params,
        sigma_data,
        schedule,
    })
}

pub fn save_consistency(dir: impl AsRef<Path>, model: &ConsistencyModel) -> Result<()> {
    let mut m = Manifest::new("consistency");
    describe_model(&mut m, model.net.config(), &model.schedule, model.sigma_data);
    save(dir, &m, &model.params)
}

pub fn load_consistency(dir: impl AsRef<Path>) -> Result<ConsistencyModel> {
    let (m, params) = load(dir)?;
    m.expect_kind("consistency")?;
    let (net, params, schedule, sigma_data) = read_model(&m, params)?;
    Ok(ConsistencyModel {
        net,
        params,
        sigma_data,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoise;

    fn cfg() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            n_res_blocks_per_stage: 1,
            in_channels: 3,
            resolution: 8,
            seed: 1,
        }
    }

    #[test]
    fn denoiser_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenoiserModel::new(&cfg(), 0.5, SigmaSchedule::default()).unwrap();
        save_denoiser(dir.path(), &m).unwrap();
        let back = load_denoiser(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.schedule, m.schedule);
        let x = Tensor::full(&[1, 3, 8, 8], 0.1);
        assert_eq!(denoise(&back, &x, 0.7).unwrap(), denoise(&m, &x, 0.7).unwrap());
        assert!(load_consistency(dir.path()).is_err());
    }

    #[test]
    fn consistency_roundtrip_and_missing_dir() {
        let dir = tempfile::tempdir().unwrap();
        let m = ConsistencyModel::new(&cfg(), 0.5, SigmaSchedule::default()).unwrap();
        save_consistency(dir.path(), &m).unwrap();
        assert_eq!(load_consistency(dir.path()).unwrap().params, m.params);
        assert!(matches!(load_denoiser(dir.path().join("nope")), Err(Error::MissingPath(_))));
    }

    #[test]
    fn manifest_text_roundtrip() {
        let mut m = Manifest::new("x");
        m.set("a", 3);
        m.tensors.push(("w".into(), vec![2, 3]));
        let back = Manifest::parse(&m.to_text(), "").unwrap();
        assert_eq!(back.get_usize("a").unwrap(), 3);
        assert_eq!(back.tensors(), m.tensors());
        assert!(Manifest::parse("garbage line", "").is_err());
    }
}
