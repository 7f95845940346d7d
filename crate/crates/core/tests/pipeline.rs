use std::collections::BTreeSet;

use modquant::calibration::{capture_calibration, CalibrationSet};
use modquant::container::{from_bytes, read_container, to_bytes, write_container, TensorMap};
use modquant::pipeline::{
    quantize_model, quantize_model_logged, size_report, GroupKind, Method, ModelSpec, ModuleKind, QuantizedCheckpoint,
    SyntheticModel,
};
use modquant::quant::QuantConfig;
use modquant::{seeded_random_matrix, DenseMatrix};

fn inputs(n: usize, rows: usize, dim: usize, seed: u64) -> Vec<DenseMatrix> {
    (0..n)
        .map(|i| seeded_random_matrix(rows, dim, seed + i as u64).unwrap())
        .collect()
}

fn fixture(dim: usize) -> (SyntheticModel, CalibrationSet, CalibrationSet) {
    let model = SyntheticModel::generate(&ModelSpec::uniform(2, 2, dim), 11).unwrap();
    let images = inputs(3, 17, dim, 1000);
    let cv = capture_calibration(&model, &images, ModuleKind::Vision).unwrap();
    let cm = capture_calibration(&model, &images, ModuleKind::CrossModal).unwrap();
    (model, cv, cm)
}

fn layer_bytes(ckpt: &QuantizedCheckpoint, name: &str) -> Vec<u8> {
    let mut map = TensorMap::new();
    ckpt.layers[name].write_tensors(&mut map, name).unwrap();
    to_bytes(&map)
}

#[test]
fn vision_layers_ignore_crossmodal_calibration() {
    let (model, cv, cm) = fixture(32);
    let other = CalibrationSet::new(ModuleKind::CrossModal, inputs(4, 9, 32, 555)).unwrap();
    let cfg = QuantConfig::new(4, 16).unwrap();
    let a = quantize_model(&model, Some(&cv), Some(&cm), &cfg, Method::Gptq).unwrap();
    let b = quantize_model(&model, Some(&cv), Some(&other), &cfg, Method::Gptq).unwrap();

    let mut changed = BTreeSet::new();
    for (la, lb) in a.report.layers.iter().zip(&b.report.layers) {
        assert_eq!(la.name, lb.name);
        if la != lb || layer_bytes(&a, &la.name) != layer_bytes(&b, &lb.name) {
            changed.insert(la.module);
        }
        if la.module == ModuleKind::Vision {
            assert_eq!(layer_bytes(&a, &la.name), layer_bytes(&b, &lb.name), "{}", la.name);
        }
    }
    assert_eq!(changed, BTreeSet::from([ModuleKind::CrossModal]));
}

#[test]
fn vision_capture_does_not_depend_on_crossmodal_weights() {
    let (model, cv, _) = fixture(16);
    let mut perturbed = model.clone();
    for layer in &mut perturbed.crossmodal_layers {
        for g in &mut layer.groups {
            for m in &mut g.members {
                m.weight = m.weight.map(|v| v * 3.0 + 1.0);
            }
        }
    }
    let images = inputs(3, 17, 16, 1000);
    let again = capture_calibration(&perturbed, &images, ModuleKind::Vision).unwrap();
    assert_eq!(again, cv);
}

#[test]
fn processing_order_matches_execution_log() {
    let (model, cv, cm) = fixture(16);
    let cfg = QuantConfig::new(4, 8).unwrap();
    let mut log = Vec::new();
    let ckpt = quantize_model_logged(&model, Some(&cv), Some(&cm), &cfg, Method::Gptq, &mut |n| {
        log.push(n.to_string())
    })
    .unwrap();

    let mut documented = vec!["vision.0.proj".to_string(), "vision.1.proj".to_string()];
    for j in 0..2 {
        for kind in GroupKind::ORDER {
            documented.extend(kind.members().iter().map(|m| format!("crossmodal.{j}.{m}")));
        }
    }
    assert_eq!(log, documented);
    assert_eq!(ckpt.report.processing_order(), documented);
}

#[test]
fn groups_of_a_layer_share_calibration_input() {
    let (model, cv, cm) = fixture(16);
    let ckpt = quantize_model(
        &model,
        Some(&cv),
        Some(&cm),
        &QuantConfig::new(4, 8).unwrap(),
        Method::Gptq,
    )
    .unwrap();
    for j in 0..2 {
        let layer: Vec<_> = ckpt
            .report
            .layers
            .iter()
            .filter(|l| l.module == ModuleKind::CrossModal && l.layer_index == j)
            .collect();
        assert_eq!(layer.len(), 6);
        let groups: BTreeSet<_> = layer.iter().map(|l| l.group).collect();
        assert_eq!(groups.len(), 4);
        let hashes: BTreeSet<_> = layer.iter().map(|l| &l.calib_input_hash).collect();
        assert_eq!(hashes.len(), 1, "layer {j}");
        // members of one group see the same Hessian input
        for kind in GroupKind::ORDER {
            let h: BTreeSet<_> = layer
                .iter()
                .filter(|l| l.group == Some(kind))
                .map(|l| &l.hessian_input_hash)
                .collect();
            assert_eq!(h.len(), 1);
        }
    }
}

#[test]
fn identical_inputs_give_identical_containers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = QuantConfig::new(4, 16).unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let (model, cv, cm) = fixture(32);
        let ckpt = quantize_model(&model, Some(&cv), Some(&cm), &cfg, Method::Gptq).unwrap();
        let path = dir.path().join(format!("run{run}.cmdq"));
        write_container(&path, &ckpt.to_tensor_map().unwrap()).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let back = QuantizedCheckpoint::from_tensor_map(&from_bytes(&files[0]).unwrap()).unwrap();
    let reread = read_container(dir.path().join("run0.cmdq")).unwrap();
    assert_eq!(to_bytes(&reread), files[0]);
    assert_eq!(back.layers.len(), 2 + 2 * 6);
}

#[test]
fn model_and_calibration_containers_round_trip() {
    let (model, cv, cm) = fixture(16);
    let m = SyntheticModel::from_tensor_map(&from_bytes(&to_bytes(&model.to_tensor_map().unwrap())).unwrap()).unwrap();
    assert_eq!(m, model);
    for c in [cv, cm] {
        let back =
            CalibrationSet::from_tensor_map(&from_bytes(&to_bytes(&c.to_tensor_map().unwrap())).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

#[test]
fn gptq_pipeline_beats_rtn_in_aggregate() {
    let (model, cv, cm) = fixture(32);
    let cfg = QuantConfig::new(4, 16).unwrap();
    let g = quantize_model(&model, Some(&cv), Some(&cm), &cfg, Method::Gptq).unwrap();
    let total = |f: fn(&modquant::pipeline::LayerReport) -> f64| g.report.layers.iter().map(f).sum::<f64>();
    assert!(total(|l| l.proxy_loss) < total(|l| l.rtn_proxy_loss));
    let sizes = size_report(&g, true).unwrap();
    assert_eq!(sizes.layers.len(), g.layers.len());
    let stored: u64 = g.layers.values().map(|l| l.byte_sizes().total).sum();
    assert_eq!(sizes.quantized_bytes, stored);
}
