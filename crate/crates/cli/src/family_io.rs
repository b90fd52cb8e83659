//! On-disk environment families. The format is a little-endian binary
//! container: a magic string, a versioned header, then per-agent dense
//! tensors in row-major order as 64-bit floats. Reading re-runs the full
//! environment validation, so a corrupt file fails loudly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use sfac_core::mdp::TabularMdp;
use sfac_core::na::DVector;

const MAGIC: &[u8; 8] = b"SFAMILY\0";
const VERSION: u32 = 1;

/// Provenance recorded next to the tensors so a file is self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyHeader {
    pub version: u32,
    pub seed: u64,
    pub n_agents: u32,
    pub n_states: u32,
    pub n_actions: u32,
    pub gamma: f64,
    pub heterogeneity: f64,
    pub reward_scale: f64,
}

pub fn write_family(
    path: &Path,
    envs: &[TabularMdp],
    seed: u64,
    heterogeneity: f64,
    reward_scale: f64,
) -> Result<()> {
    if envs.is_empty() {
        bail!("refusing to write an empty family");
    }
    let n_states = envs[0].n_states();
    let n_actions = envs[0].n_actions();
    let gamma = envs[0].discount();
    for env in envs {
        if env.n_states() != n_states || env.n_actions() != n_actions || env.discount() != gamma
        {
            bail!("family members disagree on shape or discount");
        }
    }

    let file = File::create(path)
        .with_context(|| format!("creating family file {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(envs.len() as u32).to_le_bytes())?;
    w.write_all(&(n_states as u32).to_le_bytes())?;
    w.write_all(&(n_actions as u32).to_le_bytes())?;
    w.write_all(&gamma.to_le_bytes())?;
    w.write_all(&heterogeneity.to_le_bytes())?;
    w.write_all(&reward_scale.to_le_bytes())?;
    for env in envs {
        for &v in env.transition_raw() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in env.reward_raw() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in env.initial_dist().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
        .with_context(|| format!("writing family file {}", path.display()))?;
    Ok(())
}

pub fn read_family(path: &Path) -> Result<(FamilyHeader, Vec<TabularMdp>)> {
    let file = File::open(path)
        .with_context(|| format!("opening family file {}", path.display()))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .with_context(|| format!("reading header of {}", path.display()))?;
    if &magic != MAGIC {
        bail!("{} is not a family file (bad magic)", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        bail!(
            "{} has format version {version}, this build reads version {VERSION}",
            path.display()
        );
    }
    let header = FamilyHeader {
        version,
        seed: read_u64(&mut r)?,
        n_agents: read_u32(&mut r)?,
        n_states: read_u32(&mut r)?,
        n_actions: read_u32(&mut r)?,
        gamma: read_f64(&mut r)?,
        heterogeneity: read_f64(&mut r)?,
        reward_scale: read_f64(&mut r)?,
    };
    let (s, a) = (header.n_states as usize, header.n_actions as usize);
    if header.n_agents == 0 || s == 0 || a == 0 {
        bail!("{} declares an empty family", path.display());
    }

    let tensor_len = s * a * s;
    let mut envs = Vec::with_capacity(header.n_agents as usize);
    for agent in 0..header.n_agents {
        let transition = read_f64_vec(&mut r, tensor_len)
            .with_context(|| format!("agent {agent} transition tensor"))?;
        let reward = read_f64_vec(&mut r, tensor_len)
            .with_context(|| format!("agent {agent} reward tensor"))?;
        let initial = read_f64_vec(&mut r, s)
            .with_context(|| format!("agent {agent} initial distribution"))?;
        let env = TabularMdp::new(
            s,
            a,
            header.gamma,
            transition,
            reward,
            header.reward_scale,
            DVector::from_vec(initial),
        )
        .map_err(|e| anyhow::anyhow!("agent {agent} in {}: {e}", path.display()))?;
        envs.push(env);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        bail!("{} has trailing bytes after the last agent", path.display());
    }
    Ok((header, envs))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).context("truncated family file")?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).context("truncated family file")?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).context("truncated family file")?;
    Ok(f64::from_le_bytes(buf))
}

fn read_f64_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}
