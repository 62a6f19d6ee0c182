//! Trace datasets: loading, synthesis, labeling, splitting, normalization.

mod ascad;
mod container;
mod synth;

pub use ascad::{load_ascad_hdf5, save_ascad_layout};
pub use container::{load_canonical, save_canonical};
pub use synth::{estimate_snr, synthesize, SynthConfig};

use crate::aes::{inv_sbox, inv_shiftrows_partner, sbox};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyMaterial {
    Fixed([u8; 16]),
    PerTrace(Array2<u8>),
}

/// One acquisition: N traces of D samples plus per-trace AES metadata.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub samples: Array2<f64>,
    pub plaintexts: Array2<u8>,
    pub ciphertexts: Option<Array2<u8>>,
    pub masks: Option<Array2<u8>>,
    pub key: KeyMaterial,
    pub source_tag: String,
}

impl TraceSet {
    pub fn n_traces(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples.nrows();
        if n == 0 {
            return Err(Error::Shape("samples: need at least one trace".into()));
        }
        if self.samples.ncols() == 0 {
            return Err(Error::Shape("samples: need at least one sample per trace".into()));
        }
        for (name, arr) in [
            ("plaintexts", Some(&self.plaintexts)),
            ("ciphertexts", self.ciphertexts.as_ref()),
            ("masks", self.masks.as_ref()),
        ]
        .into_iter()
        .filter_map(|(n, a)| a.map(|a| (n, a)))
        {
            if arr.nrows() != n {
                return Err(Error::Shape(format!(
                    "{name}: {} rows but samples has {n}",
                    arr.nrows()
                )));
            }
            if arr.ncols() != 16 {
                return Err(Error::Shape(format!(
                    "{name}: {} columns, expected 16",
                    arr.ncols()
                )));
            }
        }
        if let KeyMaterial::PerTrace(keys) = &self.key {
            if keys.nrows() != n || keys.ncols() != 16 {
                return Err(Error::Shape(format!(
                    "key: shape ({}, {}), expected ({n}, 16)",
                    keys.nrows(),
                    keys.ncols()
                )));
            }
        }
        Ok(())
    }

    /// The single key of the set. Per-trace key material qualifies only when
    /// every row is identical, as required for attack evaluation.
    pub fn fixed_key(&self) -> Result<[u8; 16]> {
        match &self.key {
            KeyMaterial::Fixed(k) => Ok(*k),
            KeyMaterial::PerTrace(keys) => {
                let first = keys.row(0);
                if keys.rows().into_iter().all(|r| r == first) {
                    let mut k = [0u8; 16];
                    k.copy_from_slice(first.as_slice().unwrap());
                    Ok(k)
                } else {
                    Err(Error::Config(
                        "set has per-trace keys; a single fixed key is required".into(),
                    ))
                }
            }
        }
    }

    /// Row subset in the given index order; key material follows.
    pub fn subset(&self, idx: &[usize]) -> Result<TraceSet> {
        let n = self.n_traces();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("trace index {bad} out of range for {n} traces")));
        }
        let take_u8 = |a: &Array2<u8>| {
            let mut out = Array2::<u8>::zeros((idx.len(), a.ncols()));
            for (row, &i) in idx.iter().enumerate() {
                out.row_mut(row).assign(&a.row(i));
            }
            out
        };
        let mut samples = Array2::<f64>::zeros((idx.len(), self.n_samples()));
        for (row, &i) in idx.iter().enumerate() {
            samples.row_mut(row).assign(&self.samples.row(i));
        }
        Ok(TraceSet {
            samples,
            plaintexts: take_u8(&self.plaintexts),
            ciphertexts: self.ciphertexts.as_ref().map(&take_u8),
            masks: self.masks.as_ref().map(&take_u8),
            key: match &self.key {
                KeyMaterial::Fixed(k) => KeyMaterial::Fixed(*k),
                KeyMaterial::PerTrace(keys) => KeyMaterial::PerTrace(take_u8(keys)),
            },
            source_tag: self.source_tag.clone(),
        })
    }
}

/// Intermediate-value models mapping public data and one key byte to the
/// class label a network is trained against. Byte positions are 1-based, as
/// they are conventionally quoted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeakageModel {
    /// Masked first-round Sbox output: Sbox[p_i ^ k] ^ m. The mask byte
    /// defaults to index i - 1 of the mask row and is exposed as a knob
    /// because public datasets differ in their offset conventions.
    SboxXorMask { byte_index: usize, mask_byte: Option<usize> },
    /// First-round Sbox output: Sbox[p_i ^ k].
    Sbox { byte_index: usize },
    /// Hamming-distance register model for the last round:
    /// InvSbox[c_i1 ^ k] ^ c_i2, where i2 is the ShiftRows partner of i1.
    LastRoundHd { i1: usize, i2: usize },
}

impl LeakageModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LeakageModel::SboxXorMask { byte_index, mask_byte } => {
                check_byte_index("byte_index", *byte_index)?;
                if let Some(m) = mask_byte {
                    if *m >= 16 {
                        return Err(Error::Config(format!(
                            "mask_byte {m} out of range 0..=15"
                        )));
                    }
                }
                Ok(())
            }
            LeakageModel::Sbox { byte_index } => check_byte_index("byte_index", *byte_index),
            LeakageModel::LastRoundHd { i1, i2 } => {
                check_byte_index("i1", *i1)?;
                check_byte_index("i2", *i2)?;
                let partner = inv_shiftrows_partner(i1 - 1)? + 1;
                if partner != *i2 {
                    return Err(Error::Config(format!(
                        "i2 = {i2} is not the ShiftRows partner of i1 = {i1} (expected {partner})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// 0-based index of the key byte this model targets.
    pub fn key_index(&self) -> usize {
        match self {
            LeakageModel::SboxXorMask { byte_index, .. } | LeakageModel::Sbox { byte_index } => {
                byte_index - 1
            }
            LeakageModel::LastRoundHd { i1, .. } => i1 - 1,
        }
    }

    /// Label of one trace under key-byte hypothesis `key_byte`.
    pub fn label_from_parts(
        &self,
        plaintext: &[u8],
        ciphertext: Option<&[u8]>,
        masks: Option<&[u8]>,
        key_byte: u8,
    ) -> Result<u8> {
        match self {
            LeakageModel::SboxXorMask { byte_index, mask_byte } => {
                let m = masks.ok_or_else(|| Error::MissingField("masks".into()))?;
                let mi = mask_byte.unwrap_or(byte_index - 1);
                Ok(sbox(plaintext[byte_index - 1] ^ key_byte) ^ m[mi])
            }
            LeakageModel::Sbox { byte_index } => {
                Ok(sbox(plaintext[byte_index - 1] ^ key_byte))
            }
            LeakageModel::LastRoundHd { i1, i2 } => {
                let c = ciphertext.ok_or_else(|| Error::MissingField("ciphertexts".into()))?;
                Ok(inv_sbox(c[i1 - 1] ^ key_byte) ^ c[i2 - 1])
            }
        }
    }
}

fn check_byte_index(name: &str, v: usize) -> Result<()> {
    if (1..=16).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} out of range 1..=16")))
    }
}

/// Class labels for every trace under the given full key.
pub fn compute_labels(ts: &TraceSet, lm: &LeakageModel, key: &[u8; 16]) -> Result<Vec<u8>> {
    lm.validate()?;
    ts.validate()?;
    let kb = key[lm.key_index()];
    let n = ts.n_traces();
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let p = ts.plaintexts.row(j);
        let c = ts.ciphertexts.as_ref().map(|a| a.row(j));
        let m = ts.masks.as_ref().map(|a| a.row(j));
        labels.push(lm.label_from_parts(
            p.as_slice().unwrap(),
            c.as_ref().and_then(|r| r.as_slice()),
            m.as_ref().and_then(|r| r.as_slice()),
            kb,
        )?);
    }
    Ok(labels)
}

/// The key byte an attack on this model recovers.
pub fn target_key_byte(lm: &LeakageModel, key: &[u8; 16]) -> u8 {
    key[lm.key_index()]
}

/// Disjoint profiling/attack partition drawn by seeded shuffle.
pub fn split_profiling_attack(
    ts: &TraceSet,
    n_profiling: usize,
    n_attack: usize,
    seed: u64,
) -> Result<(TraceSet, TraceSet)> {
    let n = ts.n_traces();
    if n_profiling + n_attack > n {
        return Err(Error::Config(format!(
            "n_profiling + n_attack = {} exceeds the {n} available traces",
            n_profiling + n_attack
        )));
    }
    if n_profiling == 0 || n_attack == 0 {
        return Err(Error::Config("both split sizes must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    let prof = ts.subset(&idx[..n_profiling])?;
    let att = ts.subset(&idx[n_profiling..n_profiling + n_attack])?;
    Ok((prof, att))
}

/// Per-column affine normalization fitted on profiling data only, so attack
/// traces never influence the statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

pub fn fit_standardizer(profiling: &TraceSet) -> Result<Standardizer> {
    let n = profiling.n_traces();
    if n < 2 {
        return Err(Error::Config("standardizer needs at least 2 profiling traces".into()));
    }
    let mean = profiling.samples.mean_axis(Axis(0)).unwrap();
    let mut scale = Array1::<f64>::zeros(profiling.n_samples());
    for (j, s) in scale.iter_mut().enumerate() {
        let col = profiling.samples.column(j);
        let var = col.iter().map(|&v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        // Constant columns carry no information; pass them through centered.
        *s = if sd > 0.0 { sd } else { 1.0 };
    }
    Ok(Standardizer { mean: mean.to_vec(), scale: scale.to_vec() })
}

pub fn apply_standardizer(st: &Standardizer, ts: &TraceSet) -> Result<TraceSet> {
    if st.mean.len() != ts.n_samples() {
        return Err(Error::Shape(format!(
            "standardizer fitted on {} columns, set has {}",
            st.mean.len(),
            ts.n_samples()
        )));
    }
    let mut out = ts.clone();
    for mut row in out.samples.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - st.mean[j]) / st.scale[j];
        }
    }
    Ok(out)
}
