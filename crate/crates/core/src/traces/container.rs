//! Canonical on-disk trace container: one HDF5 file with flat datasets.
//! Samples are stored float32 (acquisition precision), metadata uint8.

use super::{KeyMaterial, TraceSet};
use crate::{Error, Result};
use hdf5::types::VarLenUnicode;
use ndarray::Array2;
use std::path::Path;

const SCHEMA_VERSION: i64 = 1;

pub fn save_canonical(ts: &TraceSet, path: &Path) -> Result<()> {
    ts.validate()?;
    let file = hdf5::File::create(path)?;
    file.new_attr::<i64>().create("schema_version")?.write_scalar(&SCHEMA_VERSION)?;
    let tag: VarLenUnicode = ts
        .source_tag
        .parse()
        .map_err(|_| Error::Config("source_tag is not valid unicode".into()))?;
    file.new_attr::<VarLenUnicode>().create("source_tag")?.write_scalar(&tag)?;

    let f32_samples = ts.samples.mapv(|v| v as f32);
    file.new_dataset_builder().with_data(&f32_samples).create("samples")?;
    file.new_dataset_builder().with_data(&ts.plaintexts).create("plaintexts")?;
    if let Some(c) = &ts.ciphertexts {
        file.new_dataset_builder().with_data(c).create("ciphertexts")?;
    }
    if let Some(m) = &ts.masks {
        file.new_dataset_builder().with_data(m).create("masks")?;
    }
    match &ts.key {
        KeyMaterial::Fixed(k) => {
            file.new_dataset_builder().with_data(&k[..]).create("key")?;
        }
        KeyMaterial::PerTrace(keys) => {
            file.new_dataset_builder().with_data(keys).create("key")?;
        }
    }
    Ok(())
}

fn read_u8_n16(file: &hdf5::File, name: &str, n: usize) -> Result<Array2<u8>> {
    let ds = file
        .dataset(name)
        .map_err(|_| Error::MissingField(name.to_string()))?;
    let arr: Array2<u8> = ds
        .read_2d()
        .map_err(|_| Error::Shape(format!("{name}: expected a 2-d uint8 dataset")))?;
    if arr.nrows() != n || arr.ncols() != 16 {
        return Err(Error::Shape(format!(
            "{name}: shape ({}, {}), expected ({n}, 16)",
            arr.nrows(),
            arr.ncols()
        )));
    }
    Ok(arr)
}

pub fn load_canonical(path: &Path) -> Result<TraceSet> {
    let file = hdf5::File::open(path)?;
    let version: i64 = file
        .attr("schema_version")
        .map_err(|_| Error::MissingField("schema_version".into()))?
        .read_scalar()?;
    if version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema_version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let source_tag = match file.attr("source_tag") {
        Ok(attr) => attr.read_scalar::<VarLenUnicode>()?.to_string(),
        Err(_) => String::new(),
    };

    let samples_ds = file
        .dataset("samples")
        .map_err(|_| Error::MissingField("samples".into()))?;
    let samples: Array2<f64> = samples_ds
        .read_2d()
        .map_err(|_| Error::Shape("samples: expected a 2-d float dataset".into()))?;
    let n = samples.nrows();

    let plaintexts = read_u8_n16(&file, "plaintexts", n)?;
    let ciphertexts =
        if file.link_exists("ciphertexts") { Some(read_u8_n16(&file, "ciphertexts", n)?) } else { None };
    let masks = if file.link_exists("masks") { Some(read_u8_n16(&file, "masks", n)?) } else { None };

    let key_ds = file.dataset("key").map_err(|_| Error::MissingField("key".into()))?;
    let key = match key_ds.ndim() {
        1 => {
            let v: Vec<u8> = key_ds.read_raw()?;
            if v.len() != 16 {
                return Err(Error::Shape(format!("key: {} bytes, expected 16", v.len())));
            }
            let mut k = [0u8; 16];
            k.copy_from_slice(&v);
            KeyMaterial::Fixed(k)
        }
        2 => KeyMaterial::PerTrace(read_u8_n16(&file, "key", n)?),
        d => return Err(Error::Shape(format!("key: {d}-d dataset, expected 1-d or 2-d"))),
    };

    let ts = TraceSet { samples, plaintexts, ciphertexts, masks, key, source_tag };
    ts.validate()?;
    Ok(ts)
}
