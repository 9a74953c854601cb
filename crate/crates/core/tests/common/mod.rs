#![allow(dead_code)]

use fliplab::data::{BlobSpec, Dataset};
use fliplab::model::{Layer, ModelMeta, QuantizedModel, QuantizedTensor, Role};
use fliplab::train::{train_reference, LayerSpec};

/// Small two-exit network trained on a 16-feature blob problem.
pub fn small() -> (QuantizedModel, Dataset) {
    let spec = BlobSpec { samples: 800, dim: 16, informative: 4, ..Default::default() };
    let (train, eval) = spec.generate(3).unwrap().split_at(600);
    let arch = vec![
        LayerSpec::Dense { units: 12, role: Role::AttnQ },
        LayerSpec::Relu,
        LayerSpec::SoftmaxExit,
        LayerSpec::Dense { units: 12, role: Role::Ffn },
        LayerSpec::Relu,
        LayerSpec::SoftmaxExit,
    ];
    let (model, _) = train_reference(&arch, &train, 11, &Default::default()).unwrap();
    (model, eval)
}

/// Dense(3x2) -> LN(3) -> relu -> exit(2x3), hand-picked codes.
pub fn handmade() -> QuantizedModel {
    let d = QuantizedTensor::new(vec![10, -20, 30, 5, -7, 40], 0.05, vec![3, 2]).unwrap();
    let g = QuantizedTensor::new(vec![100, 80, 127], 0.01, vec![3]).unwrap();
    let e = QuantizedTensor::new(vec![50, -60, 10, -30, 70, 20], 0.02, vec![2, 3]).unwrap();
    QuantizedModel::new(
        vec![
            Layer::dense(d, vec![0.1, -0.2, 0.0], Role::AttnV),
            Layer::layer_norm(g, vec![0.0, 0.1, -0.1]),
            Layer::relu(),
            Layer::exit(e, vec![0.05, -0.05]),
        ],
        ModelMeta::default(),
    )
    .unwrap()
}
