//! Self-describing model container: a JSON header followed by raw
//! little-endian f64 blocks in header-declared order.
//!
//! Layout: magic `RHOTICB1`, u32-LE header length, header JSON, blocks.
//! Neural weights serialize per parameter; forest trees flatten to one
//! block per tree (five floats per node); the linear model stores its
//! weight vector and bias.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forest::{DecisionTree, ForestParams, RandomForest, TreeNode};
use super::network::{ArchKind, ArchitectureSpec, Network};
use super::sgd::SgdLinear;
use super::train::{Sample, TrainingMeta};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RHOTICB1";

/// The trained classifier behind a bundle.
#[derive(Debug, Clone)]
pub enum ModelKind {
    Neural(Network),
    Forest(RandomForest),
    Sgd(SgdLinear),
}

/// A trained classifier plus everything needed to apply it.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ArchitectureSpec,
    pub model: ModelKind,
    pub decision_threshold: f64,
    pub training_meta: TrainingMeta,
    /// (steps, per-step features) for sequence models; shallow models use
    /// the flattened length `steps * features / 8`.
    pub input_shape: (usize, usize),
}

impl ModelBundle {
    pub fn is_neural(&self) -> bool {
        matches!(self.model, ModelKind::Neural(_))
    }

    /// Score one sample in [0, 1].
    pub fn score(&self, sample: &Sample) -> Result<f64> {
        match &self.model {
            ModelKind::Neural(net) => net.predict(&sample.steps),
            ModelKind::Forest(forest) => Ok(forest.score(&sample.flat)),
            ModelKind::Sgd(model) => Ok(model.score(&sample.flat)),
        }
    }

    pub fn predict(&self, sample: &Sample) -> Result<bool> {
        Ok(self.score(sample)? >= self.decision_threshold)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tool_version: String,
    model_type: String,
    spec: ArchitectureSpec,
    input_shape: (usize, usize),
    decision_threshold: f64,
    training_meta: TrainingMeta,
    #[serde(default)]
    sgd_epochs_trained: usize,
    #[serde(default)]
    forest_params: Option<ForestParams>,
    blocks: Vec<BlockInfo>,
}

fn tree_to_block(tree: &DecisionTree) -> Vec<f64> {
    let mut out = Vec::with_capacity(tree.nodes.len() * 5);
    for node in &tree.nodes {
        match node {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => out.extend([0.0, *feature as f64, *threshold, *left as f64, *right as f64]),
            TreeNode::Leaf { positive } => {
                out.extend([1.0, if *positive { 1.0 } else { 0.0 }, 0.0, 0.0, 0.0])
            }
        }
    }
    out
}

fn tree_from_block(block: &[f64]) -> Result<DecisionTree> {
    if block.len() % 5 != 0 {
        return Err(Error::Validation("malformed tree block".into()));
    }
    let nodes = block
        .chunks_exact(5)
        .map(|c| {
            if c[0] == 1.0 {
                Ok(TreeNode::Leaf { positive: c[1] == 1.0 })
            } else if c[0] == 0.0 {
                Ok(TreeNode::Split {
                    feature: c[1] as usize,
                    threshold: c[2],
                    left: c[3] as usize,
                    right: c[4] as usize,
                })
            } else {
                Err(Error::Validation("malformed tree node tag".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecisionTree { nodes })
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let (model_type, blocks): (&str, Vec<(String, Vec<f64>)>) = match &bundle.model {
        ModelKind::Neural(net) => (
            "neural",
            net.params()
                .iter()
                .map(|p| (p.name.clone(), p.data.clone()))
                .collect(),
        ),
        ModelKind::Forest(forest) => (
            "forest",
            forest
                .trees
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("tree{i:05}"), tree_to_block(t)))
                .chain([(
                    "n_features".to_string(),
                    vec![forest.n_features as f64],
                )])
                .collect(),
        ),
        ModelKind::Sgd(model) => (
            "sgd",
            vec![
                ("w".to_string(), model.weights.clone()),
                ("b".to_string(), vec![model.bias]),
            ],
        ),
    };

    let header = Header {
        format_version: 1,
        tool_version: crate::VERSION.to_string(),
        model_type: model_type.to_string(),
        spec: bundle.spec.clone(),
        input_shape: bundle.input_shape,
        decision_threshold: bundle.decision_threshold,
        training_meta: bundle.training_meta.clone(),
        sgd_epochs_trained: match &bundle.model {
            ModelKind::Sgd(m) => m.epochs_trained,
            _ => 0,
        },
        forest_params: None,
        blocks: blocks
            .iter()
            .map(|(name, data)| BlockInfo {
                name: name.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Validation(format!("serialize bundle header: {e}")))?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    writer.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    writer
        .write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    writer
        .write_all(&header_json)
        .map_err(|e| Error::io(path, e))?;
    for (_, data) in &blocks {
        for v in data {
            writer
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a model bundle",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    reader
        .read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Validation(format!("bundle header: {e}")))?;

    let mut blocks = Vec::with_capacity(header.blocks.len());
    for info in &header.blocks {
        let mut data = vec![0.0f64; info.len];
        let mut buf = vec![0u8; info.len * 8];
        reader.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        for (v, chunk) in data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        blocks.push((info.name.clone(), data));
    }

    let model = match header.model_type.as_str() {
        "neural" => {
            let mut net = Network::build(
                &header.spec,
                header.input_shape.0,
                header.input_shape.1,
                header.training_meta.seed,
            )?;
            {
                let params = net.params_mut();
                if params.len() != blocks.len() {
                    return Err(Error::Validation(format!(
                        "bundle has {} blocks for {} parameters",
                        blocks.len(),
                        params.len()
                    )));
                }
                for (p, (name, data)) in params.into_iter().zip(&blocks) {
                    if &p.name != name || p.data.len() != data.len() {
                        return Err(Error::Validation(format!(
                            "bundle block {name} does not match parameter {} ({} vs {} values)",
                            p.name,
                            data.len(),
                            p.data.len()
                        )));
                    }
                    p.data.copy_from_slice(data);
                }
            }
            ModelKind::Neural(net)
        }
        "forest" => {
            let mut trees = Vec::new();
            let mut n_features = 0usize;
            for (name, data) in &blocks {
                if name == "n_features" {
                    n_features = data[0] as usize;
                } else {
                    trees.push(tree_from_block(data)?);
                }
            }
            ModelKind::Forest(RandomForest { trees, n_features })
        }
        "sgd" => {
            let weights = blocks
                .iter()
                .find(|(n, _)| n == "w")
                .ok_or_else(|| Error::Validation("bundle missing w block".into()))?
                .1
                .clone();
            let bias = blocks
                .iter()
                .find(|(n, _)| n == "b")
                .ok_or_else(|| Error::Validation("bundle missing b block".into()))?
                .1[0];
            ModelKind::Sgd(SgdLinear {
                weights,
                bias,
                epochs_trained: header.sgd_epochs_trained,
            })
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown bundle model type {other:?}"
            )))
        }
    };

    Ok(ModelBundle {
        spec: header.spec,
        model,
        decision_threshold: header.decision_threshold,
        training_meta: header.training_meta,
        input_shape: header.input_shape,
    })
}

/// Convenience constructors used by the pipeline stages.
impl ModelBundle {
    pub fn neural(
        spec: ArchitectureSpec,
        network: Network,
        meta: TrainingMeta,
        input_shape: (usize, usize),
    ) -> ModelBundle {
        ModelBundle {
            spec,
            model: ModelKind::Neural(network),
            decision_threshold: 0.5,
            training_meta: meta,
            input_shape,
        }
    }

    pub fn forest(forest: RandomForest, seed: u64, input_shape: (usize, usize)) -> ModelBundle {
        ModelBundle {
            spec: ArchitectureSpec {
                kind: ArchKind::RandomForest,
                recurrent_layers: 0,
                recurrent_width: 0,
                conv_layers: 0,
                conv_channels: 0,
                conv_kernel: 0,
                linear_layers: 0,
                linear_width: 0,
                activation: super::layers::Activation::ReLU,
                dropout: 0.0,
            },
            model: ModelKind::Forest(forest),
            decision_threshold: 0.5,
            training_meta: TrainingMeta {
                seed,
                epochs_run: 0,
                best_validation_loss: None,
                best_validation_f1: None,
                optimizer: crate::models::train::OptimizerKind::Adam,
            },
            input_shape,
        }
    }

    pub fn sgd(model: SgdLinear, seed: u64, input_shape: (usize, usize)) -> ModelBundle {
        ModelBundle {
            spec: ArchitectureSpec {
                kind: ArchKind::SgdLinear,
                recurrent_layers: 0,
                recurrent_width: 0,
                conv_layers: 0,
                conv_channels: 0,
                conv_kernel: 0,
                linear_layers: 0,
                linear_width: 0,
                activation: super::layers::Activation::ReLU,
                dropout: 0.0,
            },
            model: ModelKind::Sgd(model),
            decision_threshold: 0.5,
            training_meta: TrainingMeta {
                seed,
                epochs_run: 0,
                best_validation_loss: None,
                best_validation_f1: None,
                optimizer: crate::models::train::OptimizerKind::Adam,
            },
            input_shape,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::layers::Activation;
    use crate::models::train::TrainConfig;

    fn sample(seed: u64) -> Sample {
        let steps: Vec<Vec<f64>> = (0..10)
            .map(|t| {
                (0..8)
                    .map(|f| (((t * 8 + f) as f64) * 0.11 + seed as f64).sin())
                    .collect()
            })
            .collect();
        Sample {
            utterance_id: format!("u{seed}"),
            participant_id: "p0".into(),
            positive: seed % 2 == 0,
            steps: steps.clone(),
            flat: steps.into_iter().flatten().collect(),
        }
    }

    #[test]
    fn neural_bundle_round_trip_bit_identical() {
        let spec = ArchitectureSpec {
            kind: ArchKind::Grnn,
            recurrent_layers: 2,
            recurrent_width: 16,
            conv_layers: 0,
            conv_channels: 0,
            conv_kernel: 3,
            linear_layers: 2,
            linear_width: 8,
            activation: Activation::GELU,
            dropout: 0.3,
        };
        let net = Network::build(&spec, 10, 8, 77).unwrap();
        let bundle = ModelBundle::neural(
            spec,
            net,
            TrainingMeta {
                seed: 77,
                epochs_run: 3,
                best_validation_loss: Some(0.5),
                best_validation_f1: Some(0.8),
                optimizer: crate::models::train::OptimizerKind::Adam,
            },
            (10, 8),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        for s in (0..5).map(sample) {
            let a = bundle.score(&s).unwrap();
            let b = loaded.score(&s).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Writing again produces identical bytes.
        let path2 = dir.path().join("m2.bundle");
        save_bundle(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn forest_and_sgd_round_trip() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64 / 40.0, (i % 7) as f64])
            .collect();
        let ys: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();

        let forest = crate::models::forest::train_random_forest(
            &xs,
            &ys,
            &crate::models::forest::ForestParams {
                n_trees: 5,
                ..Default::default()
            },
            1,
        );
        let bundle = ModelBundle::forest(forest, 1, (10, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bundle");
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        let s = sample(3);
        let flat_sample = Sample {
            flat: vec![0.4, 3.0],
            ..s.clone()
        };
        assert_eq!(
            bundle.score(&flat_sample).unwrap().to_bits(),
            loaded.score(&flat_sample).unwrap().to_bits()
        );

        let sgd = crate::models::sgd::train_sgd_linear(
            &xs,
            &ys,
            &crate::models::sgd::SgdParams::default(),
            2,
        );
        let bundle = ModelBundle::sgd(sgd, 2, (10, 2));
        let path = dir.path().join("s.bundle");
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(
            bundle.score(&flat_sample).unwrap().to_bits(),
            loaded.score(&flat_sample).unwrap().to_bits()
        );
        match (&bundle.model, &loaded.model) {
            (ModelKind::Sgd(a), ModelKind::Sgd(b)) => {
                assert_eq!(a.epochs_trained, b.epochs_trained)
            }
            _ => panic!("wrong model type"),
        }
    }

    #[test]
    fn train_config_defaults_match_contract() {
        let c = TrainConfig::default();
        assert_eq!(c.max_epochs, 25);
        assert_eq!(c.patience, 5);
        assert_eq!(c.batch_size, 64);
    }
}
