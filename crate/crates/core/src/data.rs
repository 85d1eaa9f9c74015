//! Offline transition data and its on-disk container.
//!
//! A [`TransitionBatch`] holds aligned `(s, a, r, s')` rows in flat row-major
//! arrays, plus optional per-row synthetic next-state atoms (the empirical
//! measures produced by the transition model). Datasets add metadata — the
//! reward affine map, environment parameters, the behavior-noise level and
//! the seed — and serialize to a versioned binary container.

use crate::nn::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("misaligned batch: {0}")]
    Misaligned(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

/// Per-row synthetic next-state sets, `len x m x state_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAtoms {
    pub m: usize,
    pub atoms: Vec<f64>,
}

/// Aligned transition arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub synthetic: Option<SyntheticAtoms>,
}

impl TransitionBatch {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        next_states: Vec<f64>,
    ) -> Result<Self, DataError> {
        let n = rewards.len();
        if states.len() != n * state_dim
            || actions.len() != n * action_dim
            || next_states.len() != n * state_dim
        {
            return Err(DataError::Misaligned(format!(
                "{n} rewards but {} state, {} action, {} next-state scalars",
                states.len(),
                actions.len(),
                next_states.len()
            )));
        }
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            next_states,
            synthetic: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_row(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state_row(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Attaches synthetic next-state atoms; `atoms` must be
    /// `len * m * state_dim` scalars.
    pub fn set_synthetic(&mut self, m: usize, atoms: Vec<f64>) -> Result<(), DataError> {
        if atoms.len() != self.len() * m * self.state_dim {
            return Err(DataError::Misaligned(format!(
                "expected {} synthetic scalars, got {}",
                self.len() * m * self.state_dim,
                atoms.len()
            )));
        }
        self.synthetic = Some(SyntheticAtoms { m, atoms });
        Ok(())
    }

    pub fn synthetic_row(&self, i: usize) -> Option<&[f64]> {
        self.synthetic.as_ref().map(|s| {
            let stride = s.m * self.state_dim;
            &s.atoms[i * stride..(i + 1) * stride]
        })
    }

    /// Gathers the given rows into a new batch (synthetic atoms included).
    pub fn select(&self, indices: &[usize]) -> TransitionBatch {
        let mut out = TransitionBatch {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: Vec::with_capacity(indices.len() * self.state_dim),
            actions: Vec::with_capacity(indices.len() * self.action_dim),
            rewards: Vec::with_capacity(indices.len()),
            next_states: Vec::with_capacity(indices.len() * self.state_dim),
            synthetic: None,
        };
        for &i in indices {
            out.states.extend_from_slice(self.state_row(i));
            out.actions.extend_from_slice(self.action_row(i));
            out.rewards.push(self.rewards[i]);
            out.next_states.extend_from_slice(self.next_state_row(i));
        }
        if let Some(s) = &self.synthetic {
            let stride = s.m * self.state_dim;
            let mut atoms = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                atoms.extend_from_slice(&s.atoms[i * stride..(i + 1) * stride]);
            }
            out.synthetic = Some(SyntheticAtoms { m: s.m, atoms });
        }
        out
    }

    pub fn states_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.state_dim, self.states.clone())
    }

    pub fn actions_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.action_dim, self.actions.clone())
    }

    pub fn next_states_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.state_dim, self.next_states.clone())
    }
}

/// Dataset provenance: the reward affine map (`stored = scale * raw + offset`),
/// environment parameters, behavior-noise level and generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env: String,
    pub reward_scale: f64,
    pub reward_offset: f64,
    pub r_max: f64,
    /// Environment parameters, sorted by name.
    pub env_params: Vec<(String, f64)>,
    pub eps: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub batch: TransitionBatch,
}

const MAGIC: &[u8; 8] = b"DRSACDST";
const VERSION: u32 = 1;

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta_text();
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        let b = &self.batch;
        for dim in [b.len() as u64, b.state_dim as u64, b.action_dim as u64] {
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        for arr in [&b.states, &b.actions, &b.rewards, &b.next_states] {
            for &x in arr.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)
            .map_err(|e| DataError::Io(format!("creating {}: {e}", path.display())))?;
        file.write_all(&buf)
            .map_err(|e| DataError::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| DataError::Io(format!("opening {}: {e}", path.display())))?
            .read_to_end(&mut bytes)
            .map_err(|e| DataError::Io(format!("reading {}: {e}", path.display())))?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], DataError> {
            if *cursor + n > bytes.len() {
                return Err(DataError::Format("unexpected end of dataset".into()));
            }
            let out = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(out)
        };
        if take(&mut cursor, 8)? != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let meta_text = std::str::from_utf8(take(&mut cursor, meta_len)?)
            .map_err(|_| DataError::Format("metadata is not utf-8".into()))?
            .to_string();
        let meta = Self::parse_meta(&meta_text)?;
        let n = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let state_dim = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let action_dim = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let mut read_arr = |len: usize| -> Result<Vec<f64>, DataError> {
            let payload = take(&mut cursor, len * 8)?;
            Ok(payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let states = read_arr(n * state_dim)?;
        let actions = read_arr(n * action_dim)?;
        let rewards = read_arr(n)?;
        let next_states = read_arr(n * state_dim)?;
        if cursor != bytes.len() {
            return Err(DataError::Format("trailing bytes".into()));
        }
        let batch =
            TransitionBatch::new(state_dim, action_dim, states, actions, rewards, next_states)?;
        for (i, &r) in batch.rewards.iter().enumerate() {
            if !(0.0..=meta.r_max + 1e-9).contains(&r) {
                return Err(DataError::Format(format!(
                    "reward {r} at row {i} outside [0, {}]",
                    meta.r_max
                )));
            }
        }
        Ok(Self { meta, batch })
    }

    fn meta_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("env={}\n", self.meta.env));
        out.push_str(&format!("reward_scale={:.16e}\n", self.meta.reward_scale));
        out.push_str(&format!("reward_offset={:.16e}\n", self.meta.reward_offset));
        out.push_str(&format!("r_max={:.16e}\n", self.meta.r_max));
        out.push_str(&format!("eps={:.16e}\n", self.meta.eps));
        out.push_str(&format!("seed={}\n", self.meta.seed));
        for (k, v) in &self.meta.env_params {
            out.push_str(&format!("param.{k}={v:.16e}\n"));
        }
        out
    }

    fn parse_meta(text: &str) -> Result<DatasetMeta, DataError> {
        let mut env = None;
        let mut reward_scale = None;
        let mut reward_offset = None;
        let mut r_max = None;
        let mut eps = None;
        let mut seed = None;
        let mut env_params = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DataError::Format(format!("bad metadata line {line:?}")))?;
            let bad = |k: &str| DataError::Format(format!("cannot parse {k} from {value:?}"));
            match key {
                "env" => env = Some(value.to_string()),
                "reward_scale" => reward_scale = Some(value.parse().map_err(|_| bad(key))?),
                "reward_offset" => reward_offset = Some(value.parse().map_err(|_| bad(key))?),
                "r_max" => r_max = Some(value.parse().map_err(|_| bad(key))?),
                "eps" => eps = Some(value.parse().map_err(|_| bad(key))?),
                "seed" => seed = Some(value.parse().map_err(|_| bad(key))?),
                _ => {
                    if let Some(name) = key.strip_prefix("param.") {
                        env_params.push((name.to_string(), value.parse().map_err(|_| bad(key))?));
                    } else {
                        return Err(DataError::Format(format!("unknown metadata key {key:?}")));
                    }
                }
            }
        }
        let missing = |k: &str| DataError::Format(format!("missing metadata key {k:?}"));
        Ok(DatasetMeta {
            env: env.ok_or_else(|| missing("env"))?,
            reward_scale: reward_scale.ok_or_else(|| missing("reward_scale"))?,
            reward_offset: reward_offset.ok_or_else(|| missing("reward_offset"))?,
            r_max: r_max.ok_or_else(|| missing("r_max"))?,
            env_params,
            eps: eps.ok_or_else(|| missing("eps"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}
