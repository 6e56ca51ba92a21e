use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use gptqt_core::bc_gemm::{self, BenchOptions};
use gptqt_core::calib_stats::HessianState;
use gptqt_core::fuse_pack::{self, PackedBCMatrix, GQTQ_MAGIC};
use gptqt_core::gptq_engine::{
    dequantized_row_error, layer_output_error, quantize_layer, EngineConfig, MethodTag, QuantMethod,
};
use gptqt_core::quant_core::PlanConfig;
use gptqt_core::tensor_store::{
    decode_tensor, gen_activations, gen_weights, read_tensor, write_tensor, GQTF_MAGIC,
};
use gptqt_core::{Error as CoreError, TensorF32};

use crate::report::{BenchRow, QuantRow, Report, ReportRow};
use crate::{BenchArgs, CompareArgs, EvalArgs, GenArgs, QuantArgs, QuantizeArgs, ShapeArgs};

/// Bad flags or flag combinations; exits with code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let invalid = e.downcast_ref::<Invalid>().is_some()
        || matches!(
            e.downcast_ref::<CoreError>(),
            Some(CoreError::InvalidConfig(_))
        );
    if invalid {
        2
    } else {
        1
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn load(path: &Path, what: &str) -> Result<TensorF32> {
    read_tensor(path).with_context(|| format!("reading {what} {}", path.display()))
}

const SYNTH_CALIB_OFFSET: u64 = 10_000;
const SYNTH_VAL_OFFSET: u64 = 20_000;

struct Layer {
    name: String,
    w: TensorF32,
    calib: TensorF32,
    val: TensorF32,
}

fn synthetic_layer(shape: &ShapeArgs, seed: u64, name: String) -> Result<Layer> {
    Ok(Layer {
        name,
        w: gen_weights(shape.rows, shape.cols, seed, shape.scale)?,
        calib: gen_activations(
            shape.cols,
            shape.nsamples,
            SYNTH_CALIB_OFFSET + seed,
            shape.rho,
        )?,
        val: gen_activations(
            shape.cols,
            shape.nsamples,
            SYNTH_VAL_OFFSET + seed,
            shape.rho,
        )?,
    })
}

pub fn gen(a: &GenArgs) -> Result<()> {
    if !a.out.is_dir() {
        anyhow::bail!("output directory {} does not exist", a.out.display());
    }
    let layer = synthetic_layer(&a.shape, a.seed, String::new())?;
    for (file, t) in [
        ("weights.gqtf", &layer.w),
        ("calib.gqtf", &layer.calib),
        ("val.gqtf", &layer.val),
    ] {
        let path = a.out.join(file);
        write_tensor(&path, t).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {} {:?}", path.display(), t.dims());
    }
    Ok(())
}

fn method_for(
    tag: MethodTag,
    q: &QuantArgs,
    inter_bits: u32,
    range_bits: u32,
) -> Result<QuantMethod> {
    let method = match tag {
        MethodTag::Gptqt => QuantMethod::gptqt(PlanConfig {
            inter_bits,
            bits: q.bits,
            range_bits,
            grid_points: q.grid_points,
            ..PlanConfig::default()
        }),
        other => QuantMethod::with_defaults(other, q.bits),
    };
    method.validate()?;
    Ok(method)
}

fn check_quant_args(q: &QuantArgs) -> Result<()> {
    if !(q.damp.is_finite() && q.damp > 0.0) {
        return Err(invalid(format!(
            "--damp must be a positive number, got {}",
            q.damp
        )));
    }
    if q.block == 0 {
        return Err(invalid("--block must be at least 1"));
    }
    Ok(())
}

fn settings(q: &QuantArgs, seed: u64, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut s = vec![
        ("method".to_string(), q.method.to_string()),
        ("bits".into(), q.bits.to_string()),
        ("inter_bits".into(), q.inter_bits.to_string()),
        ("range".into(), q.range_bits.to_string()),
        ("grid_points".into(), q.grid_points.to_string()),
        ("damp".into(), q.damp.to_string()),
        ("block".into(), q.block.to_string()),
        ("seed".into(), seed.to_string()),
    ];
    s.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    s
}

/// Quantizes, packs and measures one layer; metrics come from the packed form.
fn run_method(
    layer: &Layer,
    hess: &HessianState,
    method: &QuantMethod,
    block: usize,
) -> Result<(QuantRow, PackedBCMatrix)> {
    let engine = EngineConfig {
        block,
        ..EngineConfig::default()
    };
    let tag = method.tag();
    let q = quantize_layer(&layer.w, hess, method, &engine)
        .with_context(|| format!("layer {}: {tag}", layer.name))?;
    let packed =
        fuse_pack::pack(&q).with_context(|| format!("layer {}: packing {tag}", layer.name))?;
    let wdq = fuse_pack::dequantize_packed(&packed);
    let hdiag = hess.hdiag()?;
    let proxy: f64 = (0..layer.w.rows())
        .map(|r| dequantized_row_error(layer.w.row(r), wdq.row(r), &hdiag))
        .sum();
    let (inter_bits, range_bits) = match method {
        QuantMethod::Gptqt { plan, .. } => (Some(plan.inter_bits), Some(plan.range_bits)),
        _ => (None, None),
    };
    let row = QuantRow {
        layer: layer.name.clone(),
        method: tag.to_string(),
        bits: method.bits(),
        inter_bits,
        range_bits,
        weight_mse: weight_mse(&layer.w, &wdq),
        proxy_loss_diag: proxy,
        output_rel_error: layer_output_error(&layer.w, &wdq, &layer.val)
            .with_context(|| format!("layer {}: output error", layer.name))?,
        plan_secs: q.plan_time.as_secs_f64(),
        quant_secs: q.quant_time.as_secs_f64(),
        pack_bytes: packed.serialized_len(),
    };
    Ok((row, packed))
}

fn weight_mse(w: &TensorF32, wdq: &TensorF32) -> f64 {
    let n = w.data().len().max(1) as f64;
    w.data()
        .iter()
        .zip(wdq.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n
}

fn hessian(layer: &Layer, damp: f64) -> Result<HessianState> {
    HessianState::from_activations(&layer.calib, damp)
        .with_context(|| format!("layer {}: calibration statistics", layer.name))
}

pub fn quantize(a: &QuantizeArgs) -> Result<()> {
    check_quant_args(&a.quant)?;
    let method = method_for(
        a.quant.method,
        &a.quant,
        a.quant.inter_bits,
        a.quant.range_bits,
    )?;
    let w = load(&a.weights, "weights")?;
    let calib = load(&a.calib, "calibration activations")?;
    let val = match &a.val {
        Some(p) => load(p, "validation activations")?,
        None => calib.clone(),
    };
    let name = a
        .weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let layer = Layer {
        name,
        w,
        calib,
        val,
    };
    let hess = hessian(&layer, a.quant.damp)?;
    let (row, packed) = run_method(&layer, &hess, &method, a.quant.block)?;
    fuse_pack::serialize(&packed, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let eval_on = if a.val.is_some() { "val" } else { "calib" };
    let mut report = Report::new(
        "quantize",
        settings(&a.quant, a.seed, &[("eval_on", eval_on.into())]),
    );
    report.rows.push(row);
    report.emit(a.format, a.report.as_deref())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRow {
    pub layer: String,
    pub source: &'static str,
    pub weight_mse: f64,
    pub output_rel_error: f64,
}

impl ReportRow for EvalRow {
    fn check_finite(&self) -> Result<()> {
        if !(self.weight_mse.is_finite() && self.output_rel_error.is_finite()) {
            anyhow::bail!("non-finite metric for {}", self.layer);
        }
        Ok(())
    }
}

fn load_quantized(path: &Path) -> Result<(TensorF32, &'static str)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ctx = || format!("decoding {}", path.display());
    match bytes.get(..4) {
        Some(m) if m == GQTQ_MAGIC => {
            let p = fuse_pack::decode_packed(&bytes).with_context(ctx)?;
            Ok((fuse_pack::dequantize_packed(&p), "gqtq"))
        }
        Some(m) if m == GQTF_MAGIC => Ok((decode_tensor(&bytes).with_context(ctx)?, "gqtf")),
        _ => anyhow::bail!("{} is neither a GQTQ nor a GQTF file", path.display()),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let w = load(&a.weights, "weights")?;
    let val = load(&a.val, "validation activations")?;
    let (wdq, source) = load_quantized(&a.quantized)?;
    if wdq.dims() != w.dims() {
        anyhow::bail!(
            "quantized layer {:?} does not match weights {:?}",
            wdq.dims(),
            w.dims()
        );
    }
    let err = layer_output_error(&w, &wdq, &val).context("output error")?;
    let mut report = Report::new(
        "eval",
        vec![
            ("weights".into(), a.weights.display().to_string()),
            ("quantized".into(), a.quantized.display().to_string()),
        ],
    );
    report.rows.push(EvalRow {
        layer: a
            .weights
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        source,
        weight_mse: weight_mse(&w, &wdq),
        output_rel_error: err,
    });
    report.emit(a.format, a.report.as_deref())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.reps < 3 {
        return Err(invalid(format!(
            "--reps must be at least 3, got {}",
            a.reps
        )));
    }
    if a.bits == 0 || a.bits > 8 {
        return Err(invalid(format!("--bits must be in 1..=8, got {}", a.bits)));
    }
    let opts = BenchOptions {
        reps: a.reps,
        seed: a.seed,
        parallel: a.parallel,
    };
    let rows = bc_gemm::bench_with(&a.sizes.0, a.bits, &opts)?;
    let mut report = Report::new(
        "bench",
        vec![
            ("bits".into(), a.bits.to_string()),
            ("reps".into(), a.reps.to_string()),
            ("seed".into(), a.seed.to_string()),
            ("parallel".into(), a.parallel.to_string()),
            ("group_size".into(), bc_gemm::DEFAULT_GROUP_SIZE.to_string()),
        ],
    );
    report.rows = rows
        .into_iter()
        .map(|r| BenchRow {
            rows: r.rows,
            cols: r.cols,
            bits: r.bits,
            path: r.path.name().to_string(),
            median_secs: r.median_secs,
            speedup_vs_dequant: r.speedup_vs_dequant,
            max_rel_diff: r.max_rel_diff,
        })
        .collect();
    report.emit(a.format, a.report.as_deref())
}

fn compare_layers(a: &CompareArgs) -> Result<Vec<Layer>> {
    if let Some(n) = a.synthetic {
        if n == 0 {
            return Err(invalid("--synthetic needs at least one layer"));
        }
        return (0..n as u64)
            .map(|i| synthetic_layer(&a.shape, a.seed + i, format!("synth-{}", a.seed + i)))
            .collect();
    }
    if a.weights.is_empty() {
        return Err(invalid("compare needs --weights files or --synthetic N"));
    }
    if a.calib.len() != a.weights.len() {
        return Err(invalid(format!(
            "{} --weights but {} --calib; give one calibration file per layer",
            a.weights.len(),
            a.calib.len()
        )));
    }
    if !a.val.is_empty() && a.val.len() != a.weights.len() {
        return Err(invalid("give either no --val or one per layer"));
    }
    let mut layers = Vec::with_capacity(a.weights.len());
    for (i, wp) in a.weights.iter().enumerate() {
        let calib = load(&a.calib[i], "calibration activations")?;
        let val = match a.val.get(i) {
            Some(p) => load(p, "validation activations")?,
            None => calib.clone(),
        };
        layers.push(Layer {
            name: format!(
                "{i}:{}",
                wp.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ),
            w: load(wp, "weights")?,
            calib,
            val,
        });
    }
    Ok(layers)
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    check_quant_args(&a.quant)?;
    let methods: Vec<MethodTag> = if a.methods.is_empty() {
        MethodTag::ALL.to_vec()
    } else {
        a.methods.clone()
    };
    let q = &a.quant;
    let mut configs = Vec::new();
    for &tag in &methods {
        configs.push(method_for(tag, q, q.inter_bits, q.range_bits)?);
    }
    let mut sweeps = Vec::new();
    if a.sweep_inter_bits {
        for n in (3..=6).filter(|&n| n > q.bits) {
            sweeps.push(method_for(MethodTag::Gptqt, q, n, q.range_bits)?);
        }
    }
    if a.sweep_range {
        for r in 0..=2 {
            sweeps.push(method_for(MethodTag::Gptqt, q, q.inter_bits, r)?);
        }
    }
    let layers = compare_layers(a)?;

    let mut extra = vec![
        ("layers", layers.len().to_string()),
        (
            "methods",
            methods
                .iter()
                .map(|m| m.name())
                .collect::<Vec<_>>()
                .join("+"),
        ),
    ];
    if a.synthetic.is_some() {
        extra.push(("rows", a.shape.rows.to_string()));
        extra.push(("cols", a.shape.cols.to_string()));
        extra.push(("nsamples", a.shape.nsamples.to_string()));
        extra.push(("rho", a.shape.rho.to_string()));
    }
    let mut report = Report::new("compare", settings(q, a.seed, &extra));
    let mut sweep_rows = Vec::new();
    // per layer, output error of each entry of `methods`
    let mut errs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for layer in &layers {
        let hess = hessian(layer, q.damp)?;
        let mut per = Vec::with_capacity(configs.len());
        for m in &configs {
            let (row, _) = run_method(layer, &hess, m, q.block)?;
            per.push(row.output_rel_error);
            report.rows.push(row);
        }
        errs.push(per);
        for m in &sweeps {
            sweep_rows.push(run_method(layer, &hess, m, q.block)?.0);
        }
    }
    report.rows.extend(sweep_rows);

    if layers.len() > 1 {
        let nl = layers.len() as f64;
        for (j, tag) in methods.iter().enumerate() {
            let mean = errs.iter().map(|e| e[j]).sum::<f64>() / nl;
            report
                .footer
                .push(format!("mean output_rel_error {tag} {mean:.6}"));
        }
        if let Some(g) = methods.iter().position(|&t| t == MethodTag::Gptqt) {
            for (j, tag) in methods.iter().enumerate().filter(|&(j, _)| j != g) {
                let wins = errs.iter().filter(|e| e[g] < e[j]).count();
                report.footer.push(format!(
                    "gptqt below {tag} on {wins}/{} layers",
                    layers.len()
                ));
            }
        }
    }
    report.emit(a.format, a.report.as_deref())
}
