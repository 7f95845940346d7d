use std::fs;
use std::path::{Path, PathBuf};

use modquant::calibration::{capture_calibration, CalibrationSet};
use modquant::container::{from_bytes, read_container, to_bytes, write_container, TensorMap};
use modquant::kernel::{autotune, default_candidates, quant_matmul_traced, reference_matmul, SpanRecorder, TileConfig};
use modquant::pack::{
    lanes_per_word, pack_linear, pack_weights, pack_zeros, unpack_weights, unpack_zeros, PackedLinear,
};
use modquant::pipeline::{
    circular_eval_accuracy, quantize_model, size_report, size_report_for_shapes, Method, ModelSpec, ModuleKind,
    QuantizedCheckpoint, QuestionRecord, SyntheticModel,
};
use modquant::quant::{rtn_quantize, QuantConfig};
use modquant::seeded_random_matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BenchArgs, CliError, EvalArgs, GenCalibArgs, GenModelArgs, PackRoundtripArgs, QuantizeArgs, SizeArgs};

type Result<T> = std::result::Result<T, CliError>;

fn read_map(path: &Path) -> Result<TensorMap> {
    match read_container(path) {
        Ok(map) => Ok(map),
        Err(modquant::container::ContainerError::Io(source)) => Err(CliError::Io {
            path: path.to_path_buf(),
            source,
        }),
        Err(e) => Err(CliError::Format(format!("{}: {e}", path.display()))),
    }
}

fn write_map(path: &Path, map: &TensorMap) -> Result<()> {
    write_container(path, map).map_err(|e| match e {
        modquant::container::ContainerError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(path: &Path) -> Result<SyntheticModel> {
    let map = read_map(path)?;
    SyntheticModel::from_tensor_map(&map).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    let map = read_map(path)?;
    CalibrationSet::from_tensor_map(&map).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

pub fn gen_model(a: GenModelArgs) -> Result<()> {
    let crossmodal_dim = a.crossmodal_dim.unwrap_or(a.dim);
    let spec = ModelSpec {
        vision_layers: a.vision_layers,
        crossmodal_layers: a.crossmodal_layers,
        vision_dim: a.dim,
        crossmodal_dim,
        ffn_dim: a.ffn_dim.unwrap_or(2 * crossmodal_dim),
        misc_params: a.misc_params,
    };
    let model = SyntheticModel::generate(&spec, a.seed)?;
    write_map(&a.out, &model.to_tensor_map()?)?;
    println!(
        "wrote {} ({} quantizable weights, {} parameters)",
        a.out.display(),
        model.weights().count(),
        model.quantized_param_count()
    );
    Ok(())
}

pub fn gen_calib(a: GenCalibArgs) -> Result<()> {
    let module = ModuleKind::parse(&a.module)
        .ok_or_else(|| CliError::Usage(format!("unknown module {:?}, expected vision or crossmodal", a.module)))?;
    if a.samples == 0 || a.rows == 0 {
        return Err(CliError::Usage("--samples and --rows must be positive".into()));
    }
    let model = load_model(&a.model)?;
    let inputs = (0..a.samples)
        .map(|i| seeded_random_matrix(a.rows, model.vision_dim, a.seed.wrapping_add(i as u64)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let set = capture_calibration(&model, &inputs, module)?;
    write_map(&a.out, &set.to_tensor_map()?)?;
    println!(
        "wrote {} ({} samples, {} rows of width {})",
        a.out.display(),
        set.samples.len(),
        set.total_rows(),
        set.feature_dim()
    );
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let cfg = QuantConfig::new(a.bits, a.groupsize)?
        .symmetric(a.symmetric)
        .with_damp_ratio(a.damp);
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let calib_v = a.calib_v.as_deref().map(load_calibration).transpose()?;
    let calib_m = a.calib_m.as_deref().map(load_calibration).transpose()?;
    let method = if a.rtn { Method::Rtn } else { Method::Gptq };
    let ckpt = quantize_model(&model, calib_v.as_ref(), calib_m.as_ref(), &cfg, method)?;

    write_map(&a.out, &ckpt.to_tensor_map()?)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &ckpt.report)?;

    let mut loss = 0.0;
    let mut rtn_loss = 0.0;
    for l in &ckpt.report.layers {
        println!(
            "{:<32} {:>5}x{:<5} loss {:.6e}  rtn {:.6e}",
            l.name, l.in_features, l.out_features, l.proxy_loss, l.rtn_proxy_loss
        );
        loss += l.proxy_loss;
        rtn_loss += l.rtn_proxy_loss;
    }
    println!(
        "quantized {} layers ({:?}, {} bits, groupsize {}): total loss {loss:.6e}, rtn {rtn_loss:.6e}",
        ckpt.layers.len(),
        method,
        cfg.bits,
        cfg.groupsize
    );
    println!("wrote {} and {}", a.out.display(), report_path.display());
    Ok(())
}

pub fn pack_roundtrip(a: PackRoundtripArgs) -> Result<()> {
    let lanes = lanes_per_word(a.bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let max = 1u32 << a.bits;
    for case in 0..a.cases {
        let rows = lanes * rng.random_range(1..=8);
        let cols = rng.random_range(1..=16);
        let q: Vec<u32> = (0..rows * cols).map(|_| rng.random_range(0..max)).collect();
        let w = pack_weights(&q, rows, cols, a.bits)?;
        let z = pack_zeros(&q, rows, cols, a.bits)?;
        if unpack_weights(&w, rows, cols, a.bits)? != q || unpack_zeros(&z, rows, cols, a.bits)? != q {
            return Err(CliError::Invariant(format!(
                "case {case}: {rows}x{cols} grid did not survive packing"
            )));
        }
    }
    // full layers through the container as well
    for case in 0..a.cases.div_ceil(50) {
        let k = lanes * rng.random_range(1..=4);
        let d = rng.random_range(1..=12);
        let weights = seeded_random_matrix(k, d, a.seed ^ case as u64)?;
        let q = rtn_quantize(&weights, &QuantConfig::new(a.bits, lanes as i64)?)?;
        let layer = pack_linear(&q, None, lanes as i64)?;
        let mut map = TensorMap::new();
        layer.write_tensors(&mut map, "layer")?;
        let back = PackedLinear::read_tensors(&from_bytes(&to_bytes(&map))?, "layer")?;
        if back != layer || back.unpack_qint()? != q.qint {
            return Err(CliError::Invariant(format!(
                "layer case {case} did not survive the container"
            )));
        }
    }
    println!("pack-roundtrip bits={} seed={} cases={}: ok", a.bits, a.seed, a.cases);
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.m == 0 || a.k == 0 || a.d == 0 {
        return Err(CliError::Usage("--m, --k and --d must be positive".into()));
    }
    let cfg = QuantConfig::new(a.bits, a.groupsize)?;
    let w = seeded_random_matrix(a.k, a.d, a.seed)?;
    let layer = pack_linear(&rtn_quantize(&w, &cfg)?, None, a.groupsize)?;
    let candidates: Vec<TileConfig> = match &a.configs {
        Some(path) => read_json(path)?,
        None => {
            let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
            default_candidates(a.bits, threads)
        }
    };
    let result = autotune(a.m, a.k, a.d, &layer, &candidates, a.runs)?;

    println!("{:<28} {:>14}", "config", "median_ns");
    for (c, t) in &result.table {
        let mark = if *c == result.best { "  <- best" } else { "" };
        println!("{:<28} {:>14}{mark}", c.to_string(), t);
    }
    for (c, why) in &result.rejected {
        println!("{:<28} {:>14}  ({why})", c.to_string(), "rejected");
    }

    let input = seeded_random_matrix(a.m, a.k, a.seed ^ 0xa11ce)?;
    let mut rec = SpanRecorder::new();
    let out = quant_matmul_traced(&input, &layer, &result.best, Some(&mut rec))?;
    let want = reference_matmul(&input, &layer.dequantize(), None)?;
    let err = out.relative_error(&want);
    println!("best {} relative error vs reference {err:.3e}", result.best);
    if err > 1e-5 {
        return Err(CliError::Invariant(format!(
            "kernel deviates from reference by {err:.3e}"
        )));
    }
    if let Some(path) = &a.trace {
        fs::write(path, rec.to_json()).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        println!("wrote {} ({} spans)", path.display(), rec.spans().len());
    }
    Ok(())
}

pub fn size(a: SizeArgs) -> Result<()> {
    let map = read_map(&a.model)?;
    let f16_baseline = !a.f32_baseline;
    let report = match map.meta("kind") {
        Some("checkpoint") => {
            let ckpt = QuantizedCheckpoint::from_tensor_map(&map)
                .map_err(|e| CliError::Format(format!("{}: {e}", a.model.display())))?;
            if a.bits.is_some_and(|b| b != ckpt.report.bits) || a.groupsize.is_some_and(|g| g != ckpt.report.groupsize)
            {
                return Err(CliError::Invariant(format!(
                    "checkpoint was quantized with {} bits, groupsize {}",
                    ckpt.report.bits, ckpt.report.groupsize
                )));
            }
            size_report(&ckpt, f16_baseline)?
        }
        Some("model") => {
            let model = SyntheticModel::from_tensor_map(&map)
                .map_err(|e| CliError::Format(format!("{}: {e}", a.model.display())))?;
            let (Some(bits), Some(groupsize)) = (a.bits, a.groupsize) else {
                return Err(CliError::Usage(
                    "--bits and --groupsize are required for an unquantized model".into(),
                ));
            };
            QuantConfig::new(bits, groupsize)?;
            let shapes: Vec<_> = model
                .weights()
                .map(|w| (w.name.clone(), w.weight.rows(), w.weight.cols()))
                .collect();
            size_report_for_shapes(&shapes, bits, groupsize, model.unquantized_param_count(), f16_baseline)?
        }
        other => {
            return Err(CliError::Format(format!(
                "{}: expected a model or checkpoint container, found kind {other:?}",
                a.model.display()
            )))
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("size report serializes")
    );
    Ok(())
}

pub fn eval_circular(a: EvalArgs) -> Result<()> {
    let records: Vec<QuestionRecord> = read_json(&a.records)?;
    let acc = circular_eval_accuracy(&records)?;
    println!("{acc}");
    Ok(())
}
