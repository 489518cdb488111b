//! File formats and (de)serialization.
//!
//! Three JSON artifact kinds:
//!
//! * **Model** — metadata, every parameter tensor keyed by name, the quant
//!   node registry, and the migration log. Tensors serialize as
//!   `{"shape": [...], "data": [...]}` with full-precision floats (serde_json
//!   emits the shortest decimal that parses back to the identical bits).
//! * **Data** — calibration sequences plus a labeled evaluation split.
//! * **Calibration** — per-slot quantization parameters with the method that
//!   produced them; small and human-readable, so it is pretty-printed.
//!
//! Maps are `BTreeMap`s so files are byte-identical across runs.

use crate::error::{Error, Result};
use crate::model::{
    EncoderBlock, LayerNormParams, Linear, MigrationRecord, ModelGraph, ModelMeta, QuantNode,
};
use crate::slot;
use crate::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Token sequences with one binary label each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub sequences: Vec<Vec<u32>>,
    pub labels: Vec<u8>,
}

/// Everything a calibration-plus-evaluation run consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSet {
    pub seq_len: usize,
    pub vocab: usize,
    /// Unlabeled sequences for range fitting and loss search.
    pub calibration: Vec<Vec<u32>>,
    pub eval: LabeledSet,
}

impl DataSet {
    pub fn validate(&self) -> Result<()> {
        let check_seqs = |name: &str, seqs: &[Vec<u32>]| -> Result<()> {
            for s in seqs {
                if s.len() != self.seq_len {
                    return Err(Error::format(format!(
                        "{name} sequence of length {} in a dataset with seq_len {}",
                        s.len(),
                        self.seq_len
                    )));
                }
                if let Some(&id) = s.iter().find(|&&id| id as usize >= self.vocab) {
                    return Err(Error::format(format!(
                        "{name} token id {id} out of range for vocab {}",
                        self.vocab
                    )));
                }
            }
            Ok(())
        };
        check_seqs("calibration", &self.calibration)?;
        check_seqs("eval", &self.eval.sequences)?;
        if self.eval.sequences.len() != self.eval.labels.len() {
            return Err(Error::format(format!(
                "eval has {} sequences but {} labels",
                self.eval.sequences.len(),
                self.eval.labels.len()
            )));
        }
        if let Some(&l) = self.eval.labels.iter().find(|&&l| l > 1) {
            return Err(Error::format(format!("label {l} is not binary")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ModelFile {
    meta: ModelMeta,
    tensors: BTreeMap<String, Tensor>,
    quant_nodes: BTreeMap<String, QuantNode>,
    migration: Vec<MigrationRecord>,
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d shape always consistent")
}

fn insert_linear(map: &mut BTreeMap<String, Tensor>, prefix: &str, lin: &Linear) {
    map.insert(format!("{prefix}.weight"), lin.weight.clone());
    map.insert(format!("{prefix}.bias"), vec_tensor(&lin.bias));
}

pub(crate) fn model_to_file(model: &ModelGraph) -> ModelFile {
    let mut tensors = BTreeMap::new();
    tensors.insert(slot::token_embedding(), model.tok_embedding.clone());
    tensors.insert(slot::position_embedding(), model.pos_embedding.clone());
    for (i, b) in model.blocks.iter().enumerate() {
        for (w, lin) in [
            ("wq", &b.wq),
            ("wk", &b.wk),
            ("wv", &b.wv),
            ("wo", &b.wo),
            ("w1", &b.w1),
            ("w2", &b.w2),
        ] {
            insert_linear(&mut tensors, &format!("block{i}.{w}"), lin);
        }
        for (l, ln) in [("mha_ln", &b.mha_ln), ("ffn_ln", &b.ffn_ln)] {
            tensors.insert(format!("block{i}.{l}.gamma"), vec_tensor(&ln.gamma));
            tensors.insert(format!("block{i}.{l}.beta"), vec_tensor(&ln.beta));
        }
        if let Some(g) = &b.resid1_gamma {
            tensors.insert(format!("block{i}.resid1_gamma"), vec_tensor(g));
        }
        if let Some(g) = &b.resid2_gamma {
            tensors.insert(format!("block{i}.resid2_gamma"), vec_tensor(g));
        }
    }
    insert_linear(&mut tensors, "head", &model.head);
    ModelFile {
        meta: model.meta,
        tensors,
        quant_nodes: model.nodes.clone(),
        migration: model.migration.clone(),
    }
}

fn take_tensor(map: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    map.remove(name)
        .ok_or_else(|| Error::format(format!("model file is missing tensor `{name}`")))
}

fn take_vec(map: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Vec<f64>> {
    let t = take_tensor(map, name)?;
    if t.shape().len() != 1 {
        return Err(Error::format(format!(
            "`{name}` should be 1-d, found shape {:?}",
            t.shape()
        )));
    }
    Ok(t.into_data())
}

fn model_from_file(file: ModelFile) -> Result<ModelGraph> {
    let mut tensors = file.tensors;
    let take_linear = |map: &mut BTreeMap<String, Tensor>, prefix: &str| -> Result<Linear> {
        Ok(Linear {
            weight: take_tensor(map, &format!("{prefix}.weight"))?,
            bias: take_vec(map, &format!("{prefix}.bias"))?,
        })
    };
    let tok_embedding = take_tensor(&mut tensors, &slot::token_embedding())?;
    let pos_embedding = take_tensor(&mut tensors, &slot::position_embedding())?;
    let mut blocks = Vec::with_capacity(file.meta.blocks);
    for i in 0..file.meta.blocks {
        let mut ln = |l: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: take_vec(&mut tensors, &format!("block{i}.{l}.gamma"))?,
                beta: take_vec(&mut tensors, &format!("block{i}.{l}.beta"))?,
            })
        };
        let mha_ln = ln("mha_ln")?;
        let ffn_ln = ln("ffn_ln")?;
        let resid1_gamma = tensors
            .remove(&format!("block{i}.resid1_gamma"))
            .map(Tensor::into_data);
        let resid2_gamma = tensors
            .remove(&format!("block{i}.resid2_gamma"))
            .map(Tensor::into_data);
        blocks.push(EncoderBlock {
            wq: take_linear(&mut tensors, &format!("block{i}.wq"))?,
            wk: take_linear(&mut tensors, &format!("block{i}.wk"))?,
            wv: take_linear(&mut tensors, &format!("block{i}.wv"))?,
            wo: take_linear(&mut tensors, &format!("block{i}.wo"))?,
            mha_ln,
            w1: take_linear(&mut tensors, &format!("block{i}.w1"))?,
            w2: take_linear(&mut tensors, &format!("block{i}.w2"))?,
            ffn_ln,
            resid1_gamma,
            resid2_gamma,
        });
    }
    let head = take_linear(&mut tensors, "head")?;
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::format(format!(
            "model file contains unrecognized tensor `{stray}`"
        )));
    }
    let model = ModelGraph {
        meta: file.meta,
        tok_embedding,
        pos_embedding,
        blocks,
        head,
        nodes: file.quant_nodes,
        migration: file.migration,
    };
    model.validate_dims()?;
    for (name, node) in &model.nodes {
        slot::validate(name, model.meta.blocks)
            .map_err(|_| Error::format(format!("quant node on unknown slot `{name}`")))?;
        if let Some(p) = &node.params {
            p.check()
                .map_err(|e| Error::format(format!("invalid params for `{name}`: {e}")))?;
        }
    }
    Ok(model)
}

fn check_model_finite(model: &ModelGraph) -> Result<()> {
    let all_finite = model.tok_embedding.is_finite()
        && model.pos_embedding.is_finite()
        && model.head.weight.is_finite()
        && model.head.bias.iter().all(|v| v.is_finite())
        && model.blocks.iter().all(|b| {
            [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]
                .iter()
                .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
                && [&b.mha_ln, &b.ffn_ln].iter().all(|ln| {
                    ln.gamma.iter().all(|v| v.is_finite()) && ln.beta.iter().all(|v| v.is_finite())
                })
        });
    if all_finite {
        Ok(())
    } else {
        Err(Error::numerical("model contains non-finite parameters"))
    }
}

pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    check_model_finite(model)?;
    model.validate_dims()?;
    let file = model_to_file(model);
    write_json(path, &file, false)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let file: ModelFile = read_json(path)?;
    let model = model_from_file(file)?;
    check_model_finite(&model)?;
    Ok(model)
}

pub fn save_data(path: &Path, data: &DataSet) -> Result<()> {
    data.validate()?;
    write_json(path, data, false)
}

pub fn load_data(path: &Path) -> Result<DataSet> {
    let data: DataSet = read_json(path)?;
    data.validate()?;
    Ok(data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let text = if pretty {
        serde_json::to_string_pretty(value)?
    } else {
        serde_json::to_string(value)?
    };
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("cannot parse {}: {e}", path.display())))
}

/// Look up the parameter tensor behind a weight/embedding slot name.
pub fn parameter_tensor<'a>(model: &'a ModelGraph, name: &str) -> Result<&'a Tensor> {
    if name == slot::token_embedding() {
        return Ok(&model.tok_embedding);
    }
    if name == slot::position_embedding() {
        return Ok(&model.pos_embedding);
    }
    if name == slot::head_weight() {
        return Ok(&model.head.weight);
    }
    let parse = || -> Option<(usize, &str)> {
        let rest = name.strip_prefix("block")?;
        let (idx, tail) = rest.split_once('.')?;
        let which = tail.strip_suffix(".weight")?;
        Some((idx.parse().ok()?, which))
    };
    if let Some((i, which)) = parse() {
        if let Some(block) = model.blocks.get(i) {
            let lin = match which {
                "wq" => Some(&block.wq),
                "wk" => Some(&block.wk),
                "wv" => Some(&block.wv),
                "wo" => Some(&block.wo),
                "w1" => Some(&block.w1),
                "w2" => Some(&block.w2),
                _ => None,
            };
            if let Some(lin) = lin {
                return Ok(&lin.weight);
            }
        }
    }
    Err(Error::UnknownSlot(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::migration::migrate;
    use crate::model::BitsSpec;
    use crate::testutil::{random_model, rough_calibrate};
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ptq-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn model_round_trips_exactly() {
        let mut model = random_model(201, 2, 8, 2);
        model.place_quant_nodes(BitsSpec::uniform(6)).unwrap();
        rough_calibrate(&mut model);
        let path = tmp("round_trip.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn migrated_model_round_trips_with_shortcuts() {
        let mut model = random_model(202, 2, 8, 2);
        migrate(&mut model).unwrap();
        let path = tmp("migrated.json");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
        assert!(loaded.blocks[1].resid1_gamma.is_some());
        assert_eq!(loaded.migration.len(), 4);
    }

    #[test]
    fn dataset_round_trips_and_validates() {
        let data = DataSet {
            seq_len: 3,
            vocab: 10,
            calibration: vec![vec![0, 1, 2], vec![3, 4, 5]],
            eval: LabeledSet {
                sequences: vec![vec![9, 8, 7]],
                labels: vec![1],
            },
        };
        let path = tmp("data.json");
        save_data(&path, &data).unwrap();
        assert_eq!(load_data(&path).unwrap(), data);

        let mut bad = data.clone();
        bad.eval.labels = vec![2];
        assert!(save_data(&tmp("bad.json"), &bad).is_err());
        let mut bad = data.clone();
        bad.calibration[0][0] = 99;
        assert!(bad.validate().is_err());
        let mut bad = data;
        bad.eval.sequences.push(vec![0, 0, 0]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_tensor_is_a_format_error() {
        let model = random_model(203, 1, 8, 2);
        let mut file = model_to_file(&model);
        file.tensors.remove("block0.wq.weight");
        let path = tmp("missing.json");
        write_json(&path, &file, false).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
        assert!(err.to_string().contains("block0.wq.weight"));
    }

    #[test]
    fn stray_tensor_is_a_format_error() {
        let model = random_model(204, 1, 8, 2);
        let mut file = model_to_file(&model);
        file.tensors
            .insert("block7.mystery".into(), Tensor::zeros(vec![2]));
        let path = tmp("stray.json");
        write_json(&path, &file, false).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn length_mismatched_tensor_fails_to_parse() {
        let text = r#"{"shape": [2, 3], "data": [1.0, 2.0]}"#;
        let r: std::result::Result<Tensor, _> = serde_json::from_str(text);
        assert!(r.is_err());
    }

    #[test]
    fn garbage_file_is_a_format_error() {
        let path = tmp("garbage.json");
        fs::write(&path, "not json at all {{{").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
        assert!(matches!(
            load_model(&tmp("no-such-file.json")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_parameters_are_rejected_on_save() {
        let mut model = random_model(205, 1, 8, 2);
        model.tok_embedding.data_mut()[0] = f64::NAN;
        let err = save_model(&tmp("nan.json"), &model).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn parameter_tensor_resolves_weight_slots() {
        let model = random_model(206, 2, 8, 2);
        for name in slot::parameter_slots(2) {
            let t = parameter_tensor(&model, &name).unwrap();
            assert!(t.numel() > 0);
        }
        assert!(parameter_tensor(&model, "block0.query").is_err());
        assert!(parameter_tensor(&model, "block9.wq.weight").is_err());
    }

    #[test]
    fn wrong_dims_rejected_on_load() {
        let mut model = random_model(207, 1, 8, 2);
        model.pos_embedding = Tensor::zeros(vec![2, 8]); // seq_len is 5
        let file = model_to_file(&model);
        let path = tmp("badshape.json");
        write_json(&path, &file, false).unwrap();
        assert!(load_model(&path).is_err());
    }
}
