//! Reader for the ASCAD-style HDF5 layout: per-phase groups holding a trace
//! array and a compound metadata record array. Field names are probed from
//! the file datatype rather than assumed, and each wanted field is read
//! through its own single-member compound so layouts with extra fields or
//! reordered members still load.

use super::{KeyMaterial, TraceSet};
use crate::{Error, Result};
use hdf5::types::{CompoundField, CompoundType, IntSize, TypeDescriptor};
use hdf5::H5Type;
use ndarray::Array2;
use std::mem::{offset_of, size_of};
use std::path::Path;

fn u8_array(len: usize) -> TypeDescriptor {
    TypeDescriptor::FixedArray(Box::new(TypeDescriptor::Unsigned(IntSize::U1)), len)
}

macro_rules! byte_field_record {
    ($name:ident, $field:ident, $len:expr) => {
        #[derive(Clone, Copy)]
        #[repr(C)]
        struct $name {
            $field: [u8; $len],
        }

        unsafe impl H5Type for $name {
            fn type_descriptor() -> TypeDescriptor {
                TypeDescriptor::Compound(CompoundType {
                    fields: vec![CompoundField::new(
                        stringify!($field),
                        u8_array($len),
                        offset_of!($name, $field),
                        0,
                    )],
                    size: size_of::<$name>(),
                })
            }
        }
    };
}

byte_field_record!(PlaintextRec, plaintext, 16);
byte_field_record!(CiphertextRec, ciphertext, 16);
byte_field_record!(KeyRec, key, 16);
byte_field_record!(MasksRec16, masks, 16);
byte_field_record!(MasksRec18, masks, 18);

/// Full record used by the fixture writer.
#[derive(Clone, Copy)]
#[repr(C)]
struct MetaFull {
    plaintext: [u8; 16],
    ciphertext: [u8; 16],
    masks: [u8; 16],
    key: [u8; 16],
}

unsafe impl H5Type for MetaFull {
    fn type_descriptor() -> TypeDescriptor {
        TypeDescriptor::Compound(CompoundType {
            fields: vec![
                CompoundField::new("plaintext", u8_array(16), offset_of!(MetaFull, plaintext), 0),
                CompoundField::new("ciphertext", u8_array(16), offset_of!(MetaFull, ciphertext), 1),
                CompoundField::new("masks", u8_array(16), offset_of!(MetaFull, masks), 2),
                CompoundField::new("key", u8_array(16), offset_of!(MetaFull, key), 3),
            ],
            size: size_of::<MetaFull>(),
        })
    }
}

/// Byte width of a fixed-size uint8 array member, if the field is one.
fn field_width(fields: &[CompoundField], name: &str) -> Option<usize> {
    fields.iter().find(|f| f.name == name).and_then(|f| match &f.ty {
        TypeDescriptor::FixedArray(inner, len) => match **inner {
            TypeDescriptor::Unsigned(IntSize::U1) | TypeDescriptor::Integer(IntSize::U1) => {
                Some(*len)
            }
            _ => None,
        },
        _ => None,
    })
}

fn rows_from<T, F>(records: &[T], width: usize, get: F) -> Array2<u8>
where
    F: Fn(&T) -> &[u8],
{
    let mut out = Array2::<u8>::zeros((records.len(), width));
    for (j, r) in records.iter().enumerate() {
        out.row_mut(j).assign(&ndarray::ArrayView1::from(&get(r)[..width]));
    }
    out
}

pub fn load_ascad_hdf5(path: &Path, group_name: &str) -> Result<TraceSet> {
    let file = hdf5::File::open(path)?;
    let group = file.group(group_name).map_err(|_| {
        Error::Config(format!(
            "group {group_name} not found; file has {:?}",
            file.member_names().unwrap_or_default()
        ))
    })?;

    let traces_ds = group
        .dataset("traces")
        .map_err(|_| Error::MissingField(format!("{group_name}/traces")))?;
    let samples: Array2<f64> = traces_ds
        .read_2d()
        .map_err(|_| Error::Shape(format!("{group_name}/traces: expected a 2-d array")))?;
    let n = samples.nrows();

    let meta_ds = group
        .dataset("metadata")
        .map_err(|_| Error::MissingField(format!("{group_name}/metadata")))?;
    let td = meta_ds.dtype()?.to_descriptor()?;
    let fields = match td {
        TypeDescriptor::Compound(c) => c.fields,
        other => {
            return Err(Error::Shape(format!(
                "{group_name}/metadata: expected a compound record type, found {other}"
            )))
        }
    };
    let names: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
    let missing = |what: &str| {
        Error::MissingField(format!(
            "{group_name}/metadata field {what} (available fields: {names:?})"
        ))
    };

    if field_width(&fields, "plaintext") != Some(16) {
        return Err(missing("plaintext[16]"));
    }
    if field_width(&fields, "key") != Some(16) {
        return Err(missing("key[16]"));
    }

    let plaintext_recs: Vec<PlaintextRec> = meta_ds.read_raw()?;
    if plaintext_recs.len() != n {
        return Err(Error::Shape(format!(
            "{group_name}: {} metadata records for {n} traces",
            plaintext_recs.len()
        )));
    }
    let plaintexts = rows_from(&plaintext_recs, 16, |r| &r.plaintext);

    let ciphertexts = if field_width(&fields, "ciphertext") == Some(16) {
        let recs: Vec<CiphertextRec> = meta_ds.read_raw()?;
        Some(rows_from(&recs, 16, |r| &r.ciphertext))
    } else {
        None
    };

    // Public captures disagree on the mask record width; accept both common
    // layouts and keep the first 16 bytes.
    let masks = match field_width(&fields, "masks") {
        Some(16) => {
            let recs: Vec<MasksRec16> = meta_ds.read_raw()?;
            Some(rows_from(&recs, 16, |r| &r.masks))
        }
        Some(18) => {
            let recs: Vec<MasksRec18> = meta_ds.read_raw()?;
            Some(rows_from(&recs, 16, |r| &r.masks))
        }
        _ => None,
    };

    let key_recs: Vec<KeyRec> = meta_ds.read_raw()?;
    let keys = rows_from(&key_recs, 16, |r| &r.key);
    let first = keys.row(0).to_owned();
    let key = if keys.rows().into_iter().all(|r| r == first) {
        let mut k = [0u8; 16];
        k.copy_from_slice(first.as_slice().unwrap());
        KeyMaterial::Fixed(k)
    } else {
        KeyMaterial::PerTrace(keys)
    };

    let tag = format!(
        "ascad:{}:{group_name}",
        path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let ts = TraceSet { samples, plaintexts, ciphertexts, masks, key, source_tag: tag };
    ts.validate()?;
    Ok(ts)
}

/// Writes a set in the same layout the reader consumes; used to build test
/// fixtures. Absent ciphertexts or masks are stored as zero bytes.
pub fn save_ascad_layout(ts: &TraceSet, path: &Path, group_name: &str) -> Result<()> {
    ts.validate()?;
    let file = if path.exists() { hdf5::File::open_rw(path)? } else { hdf5::File::create(path)? };
    let group = file.create_group(group_name)?;
    group.new_dataset_builder().with_data(&ts.samples).create("traces")?;

    let n = ts.n_traces();
    let zero = [0u8; 16];
    let row16 = |a: &Array2<u8>, j: usize| -> [u8; 16] {
        let mut out = [0u8; 16];
        out.copy_from_slice(a.row(j).as_slice().unwrap());
        out
    };
    let mut records = Vec::with_capacity(n);
    for j in 0..n {
        records.push(MetaFull {
            plaintext: row16(&ts.plaintexts, j),
            ciphertext: ts.ciphertexts.as_ref().map(|a| row16(a, j)).unwrap_or(zero),
            masks: ts.masks.as_ref().map(|a| row16(a, j)).unwrap_or(zero),
            key: match &ts.key {
                KeyMaterial::Fixed(k) => *k,
                KeyMaterial::PerTrace(keys) => row16(keys, j),
            },
        });
    }
    group.new_dataset_builder().with_data(&records[..]).create("metadata")?;
    Ok(())
}
