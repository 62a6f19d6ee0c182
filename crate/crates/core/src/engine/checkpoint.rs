//! Model persistence. A checkpoint is an HDF5 file: JSON attributes for the
//! network config, history and provenance, plus one flat dataset per
//! parameter under /params, named exactly as the graph visitor names them.

use super::{EpochStats, Provenance, TrainedModel};
use crate::engine::ops::ParamView;
use crate::netspec::{build_attention_network, NetworkConfig};
use crate::traces::Standardizer;
use crate::{Error, Result};
use hdf5::types::VarLenUnicode;
use std::path::Path;

const SCHEMA_VERSION: i64 = 1;

fn write_str_attr(loc: &hdf5::Group, name: &str, value: &str) -> Result<()> {
    let v: VarLenUnicode = value
        .parse()
        .map_err(|_| Error::Checkpoint(format!("attribute {name} is not valid unicode")))?;
    loc.new_attr::<VarLenUnicode>().create(name)?.write_scalar(&v)?;
    Ok(())
}

fn read_str_attr(loc: &hdf5::Group, name: &str) -> Result<String> {
    let attr = loc
        .attr(name)
        .map_err(|_| Error::Checkpoint(format!("missing attribute {name}")))?;
    let v: VarLenUnicode = attr.read_scalar()?;
    Ok(v.to_string())
}

pub fn save_model(model: &mut TrainedModel, path: &Path) -> Result<()> {
    let file = hdf5::File::create(path)?;
    let root = file.group("/")?;
    root.new_attr::<i64>().create("schema_version")?.write_scalar(&SCHEMA_VERSION)?;
    write_str_attr(&root, "config", &serde_json::to_string(model.graph.config())?)?;
    write_str_attr(&root, "history", &serde_json::to_string(&model.history)?)?;
    write_str_attr(&root, "provenance", &serde_json::to_string(&model.provenance)?)?;

    let params = file.create_group("params")?;
    let mut failure = None;
    model.graph.for_each_param(&mut |p: ParamView| {
        if failure.is_some() {
            return;
        }
        let shape: Vec<i64> = p.shape.iter().map(|&d| d as i64).collect();
        let result = params
            .new_dataset_builder()
            .with_data(&p.value[..])
            .create(p.name.as_str())
            .and_then(|ds| {
                ds.new_attr::<i64>()
                    .shape(shape.len())
                    .create("shape")?
                    .write(&shape)
            });
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    file.close()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let file = hdf5::File::open(path)?;
    let root = file.group("/")?;
    let version: i64 = root
        .attr("schema_version")
        .map_err(|_| Error::Checkpoint("missing attribute schema_version".into()))?
        .read_scalar()?;
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema_version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let cfg: NetworkConfig = serde_json::from_str(&read_str_attr(&root, "config")?)?;
    let history: Vec<EpochStats> = serde_json::from_str(&read_str_attr(&root, "history")?)?;
    let provenance: Provenance = serde_json::from_str(&read_str_attr(&root, "provenance")?)?;

    let mut graph = build_attention_network(&cfg, 0)?;
    let params = file
        .group("params")
        .map_err(|_| Error::Checkpoint("missing group params".into()))?;
    let mut failure: Option<Error> = None;
    graph.for_each_param(&mut |p: ParamView| {
        if failure.is_some() {
            return;
        }
        let ds = match params.dataset(p.name.as_str()) {
            Ok(ds) => ds,
            Err(_) => {
                failure = Some(Error::Checkpoint(format!("missing parameter {}", p.name)));
                return;
            }
        };
        let data: Vec<f64> = match ds.read_raw() {
            Ok(d) => d,
            Err(e) => {
                failure = Some(e.into());
                return;
            }
        };
        if data.len() != p.value.len() {
            failure = Some(Error::Checkpoint(format!(
                "parameter {} has {} values, expected {}",
                p.name,
                data.len(),
                p.value.len()
            )));
            return;
        }
        p.value.copy_from_slice(&data);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainedModel { graph, history, provenance })
}

/// Attaches the profiling-set standardizer to an existing checkpoint so
/// attack-time preprocessing uses the training statistics.
pub fn save_standardizer(path: &Path, st: &Standardizer) -> Result<()> {
    let file = hdf5::File::open_rw(path)?;
    let root = file.group("/")?;
    write_str_attr(&root, "standardizer", &serde_json::to_string(st)?)?;
    Ok(())
}

pub fn load_standardizer(path: &Path) -> Result<Option<Standardizer>> {
    let file = hdf5::File::open(path)?;
    let root = file.group("/")?;
    if root.attr("standardizer").is_err() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&read_str_attr(&root, "standardizer")?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{CbamConfig, Mode, NetworkConfig};
    use crate::testutil::rand_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn load_err(path: &std::path::Path) -> Error {
        match load_model(path) {
            Err(e) => e,
            Ok(_) => panic!("load unexpectedly succeeded"),
        }
    }

    fn tiny_model() -> TrainedModel {
        let cfg = NetworkConfig {
            input_length: 10,
            n3: 1,
            filters_per_block: vec![2],
            conv_kernel: 3,
            cbam: CbamConfig { reduction_ratio: 2, spatial_kernel: 3, ..CbamConfig::default() },
            fc_hidden_units: 4,
            ..NetworkConfig::default()
        };
        TrainedModel {
            graph: build_attention_network(&cfg, 123).unwrap(),
            history: vec![EpochStats {
                epoch: 0,
                loss: 5.5,
                accuracy: 0.01,
                val_loss: Some(5.6),
                val_accuracy: Some(0.005),
            }],
            provenance: Provenance {
                preset: Some("unit".into()),
                seed: 123,
                dataset_hash: Some("abc".into()),
                tool_version: "0.0.0".into(),
                leakage: Some(crate::traces::LeakageModel::Sbox { byte_index: 1 }),
            },
        }
    }

    #[test]
    fn round_trip_preserves_forward_pass_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.h5");
        let mut model = tiny_model();
        let mut r = ChaCha12Rng::seed_from_u64(5);
        let x: ndarray::Array2<f64> = rand_array(&[3, 10], &mut r).into_dimensionality().unwrap();
        let before = model.graph.forward(&x, Mode::Eval, None);

        save_model(&mut model, &path).unwrap();
        let mut loaded = load_model(&path).unwrap();
        let after = loaded.graph.forward(&x, Mode::Eval, None);
        assert_eq!(before, after);
        assert_eq!(loaded.history.len(), 1);
        assert_eq!(loaded.history[0].val_loss, Some(5.6));
        assert_eq!(loaded.provenance.preset.as_deref(), Some("unit"));
        assert_eq!(loaded.graph.config(), model.graph.config());
    }

    #[test]
    fn loading_rejects_wrong_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.h5");
        {
            let file = hdf5::File::create(&path).unwrap();
            let root = file.group("/").unwrap();
            root.new_attr::<i64>().create("schema_version").unwrap().write_scalar(&99i64).unwrap();
        }
        let err = load_err(&path);
        assert!(err.to_string().contains("schema_version"), "{err}");
    }

    #[test]
    fn loading_rejects_missing_or_misshapen_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.h5");
        let mut model = tiny_model();
        save_model(&mut model, &path).unwrap();

        // Replace one parameter dataset with one of the wrong length.
        {
            let file = hdf5::File::open_rw(&path).unwrap();
            let params = file.group("params").unwrap();
            params.unlink("head.b").unwrap();
            params
                .new_dataset_builder()
                .with_data(&vec![0.0f64; 3][..])
                .create("head.b")
                .unwrap();
        }
        let err = load_err(&path);
        assert!(err.to_string().contains("head.b"), "{err}");

        // Remove it entirely.
        {
            let file = hdf5::File::open_rw(&path).unwrap();
            file.group("params").unwrap().unlink("head.b").unwrap();
        }
        let err = load_err(&path);
        assert!(err.to_string().contains("missing parameter head.b"), "{err}");
    }

    #[test]
    fn standardizer_attribute_is_optional_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.h5");
        let mut model = tiny_model();
        save_model(&mut model, &path).unwrap();
        assert!(load_standardizer(&path).unwrap().is_none());

        let st = Standardizer { mean: vec![0.5; 10], scale: vec![2.0; 10] };
        save_standardizer(&path, &st).unwrap();
        let back = load_standardizer(&path).unwrap().unwrap();
        assert_eq!(back.mean, st.mean);
        assert_eq!(back.scale, st.scale);

        let loaded = load_model(&path).unwrap();
        assert_eq!(
            loaded.provenance.leakage,
            Some(crate::traces::LeakageModel::Sbox { byte_index: 1 })
        );
    }
}
