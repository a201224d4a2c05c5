use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use halo::fsdp::{backward_regather, comm_report, quantized_all_gather, shard, Collective, CommLedger, WorldConfig};
use halo::hadamard::{build_spec, transform_left, transform_right};
use halo::halo::HaloScheme;
use halo::io::{encode_tensor, read_stored, StoredTensor};
use halo::quantize::{dequantize, quantize, Granularity, NumericFormat};
use halo::tensor::{outlier_stats, Axis, Tensor};
use halo::trainer::analysis::placement_ablation;
use halo::trainer::{
    sensitivity_report, train, Dataset, FsdpOptions, GlyphTask, ModelConfig, RegressionTask, ToyModel, TrainConfig,
    Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Config, TaskKind};
use crate::manifest::Run;
use crate::{Failure, Side};

fn input(e: String) -> Failure {
    Failure::Input(e)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Dataset plus a model to train on it, both derived from `seed`.
fn setup(cfg: &Config, scheme: &HaloScheme, seed: u64) -> Result<(Box<dyn Dataset>, ToyModel<f32>), Failure> {
    match cfg.task {
        TaskKind::Regression => {
            // The teacher never carries adapters; they belong to the student.
            let teacher = ModelConfig {
                lora_rank: 0,
                ..cfg.model.clone()
            };
            let task = RegressionTask::new(teacher, cfg.regression.clone(), seed)?;
            let student = task.student(scheme, cfg.model.lora_rank, seed)?;
            Ok((Box::new(task), student))
        }
        TaskKind::Glyph => {
            let task = GlyphTask::new(cfg.glyph.clone(), seed)?;
            if cfg.model.dim != task.input_dim() || cfg.model.out_dim != task.output_dim() {
                return Err(input(format!(
                    "glyph task needs model.dim = {} and model.out_dim = {}",
                    task.input_dim(),
                    task.output_dim()
                )));
            }
            let model = ToyModel::init(cfg.model.clone(), scheme.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok((Box::new(task), model))
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_train(cfg: &Config, raw: &[u8]) -> Result<(), Failure> {
    let scheme = cfg.halo_scheme().map_err(input)?;
    let (data, mut model) = setup(cfg, &scheme, cfg.seed)?;
    let report = train(&mut model, data.as_ref(), &cfg.train)?;

    let mut run = Run::new("train", cfg, raw, vec![cfg.seed])?;
    let mut csv = String::from("step,loss,grad_norm\n");
    for r in &report.records {
        writeln!(csv, "{},{},{}", r.step, r.loss, r.grad_norm).unwrap();
    }
    run.write("loss.csv", csv.as_bytes())?;
    if cfg.save_weights {
        for (name, layer) in model.linear_names().iter().zip(model.linears()) {
            run.write(&format!("weights/{name}.halt"), &encode_tensor(&layer.weight))?;
        }
    }
    let final_loss = report.final_loss();
    run.verdict("final_loss", final_loss);
    run.verdict("eval_loss", report.eval_loss);
    run.verdict("eval_loss_full_precision", report.eval_loss_full_precision);
    run.verdict("quantizer_calls", serde_json::to_value(report.calls).unwrap());
    if let Some(ledger) = &report.ledger {
        run.verdict("communication", serde_json::to_value(comm_report(ledger)).unwrap());
    }
    let manifest = run.finish()?;
    println!(
        "{} {} steps, final loss {}, eval loss {}",
        scheme.placement_string(),
        report.records.len(),
        final_loss.map_or("-".into(), |l| format!("{l:.6e}")),
        report.eval_loss.map_or("-".into(), |l| format!("{l:.6e}")),
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

pub fn cmd_sensitivity(cfg: &Config, raw: &[u8]) -> Result<(), Failure> {
    let format = cfg.numeric_format().map_err(input)?;
    let variants = Variant::standard(format)?;
    let seeds = cfg.seeds();
    let reports = seeds
        .par_iter()
        .map(|&seed| {
            let (data, model) = setup(cfg, &HaloScheme::full_precision(), seed)?;
            Ok(sensitivity_report(&model, &data.batch(0)?, &variants)?)
        })
        .collect::<Result<Vec<_>, Failure>>()?;

    // Medians over seeds, keyed by (layer, variant) in first-report order.
    let mut keys = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &reports {
        let rows = r.rows.iter().map(|c| (c.layer.clone(), c.variant.clone(), c.cosine));
        let weighted = r.weighted.iter().map(|(v, c)| ("weighted".to_string(), v.clone(), *c));
        for (layer, variant, cos) in rows.chain(weighted) {
            let key = (layer, variant);
            if !values.contains_key(&key) {
                keys.push(key.clone());
            }
            values.entry(key).or_default().push(cos);
        }
    }
    let mut csv = String::from("layer,variant,cosine\n");
    for key in &keys {
        writeln!(csv, "{},{},{}", key.0, key.1, median(values[key].clone())).unwrap();
    }
    let weighted = |v: &str| median(values[&("weighted".to_string(), v.to_string())].clone());
    let (fwd, bwd, had) = (weighted("forward"), weighted("backward"), weighted("forward_hadamard"));
    let line = format!("fwd<bwd: {}, had>fwd: {}", pass(fwd < bwd), pass(had > fwd));

    let mut run = Run::new("sensitivity", cfg, raw, seeds)?;
    run.write("sensitivity.csv", csv.as_bytes())?;
    run.verdict(
        "median_weighted_cosine",
        json!({"forward": fwd, "backward": bwd, "forward_hadamard": had}),
    );
    run.verdict("ordering", line.clone());
    let manifest = run.finish()?;
    print!("{csv}");
    println!("{line}");
    println!("manifest: {}", manifest.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &Config, raw: &[u8]) -> Result<(), Failure> {
    let format = cfg.numeric_format().map_err(input)?;
    let target = cfg.ablation_target().map_err(input)?;
    let (data, model) = setup(cfg, &HaloScheme::full_precision(), cfg.seed)?;
    let rows = placement_ablation(&model, &data.batch(0)?, target, format)?;

    let mut csv = String::from("placement,loss,cosine\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.placement, r.loss, r.cosine).unwrap();
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.cosine.total_cmp(&b.cosine))
        .expect("at least one placement");

    let mut run = Run::new("ablate", cfg, raw, vec![cfg.seed])?;
    run.write("ablation.csv", csv.as_bytes())?;
    run.verdict("rows", rows.len());
    run.verdict(
        "best_placement",
        json!({"placement": best.placement, "cosine": best.cosine, "loss": best.loss}),
    );
    let mut summary = format!(
        "{} placements, best {} (cosine {:.6})",
        rows.len(),
        best.placement,
        best.cosine
    );
    if format == NumericFormat::Identity {
        // Without rounding every placement cancels back to the exact products.
        let base = rows[0].loss;
        let ok = rows
            .iter()
            .all(|r| (r.loss - base).abs() <= 1e-4 * base.abs().max(1e-12) && (r.cosine - 1.0).abs() <= 1e-4);
        run.verdict("identity_cancellation", pass(ok));
        summary.push_str(&format!(", identity cancellation: {}", pass(ok)));
    }
    let manifest = run.finish()?;
    println!("{summary}");
    println!("manifest: {}", manifest.display());
    Ok(())
}

pub fn cmd_fsdp(cfg: &Config, raw: &[u8]) -> Result<(), Failure> {
    let format = cfg.numeric_format().map_err(input)?;
    let probe = &cfg.fsdp;
    let world = WorldConfig::new(probe.world_size)?;
    if probe.rows == 0 || probe.cols == 0 {
        return Err(input("fsdp.rows and fsdp.cols must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = Tensor::<f32>::randn(probe.rows, probe.cols, 1.0, &mut rng);

    let mut param = shard(&w, &world, format);
    let mut ledger = CommLedger::new(probe.world_size);
    let gathered = quantized_all_gather(&mut param, probe.hadamard, &mut ledger)?;
    let padded = w.pad_rows(param.padded_weight().rows());
    let rotated = if probe.hadamard {
        transform_right(&padded, &build_spec(probe.cols)?)?
    } else {
        padded
    };
    let reference = quantize(&rotated, format, Granularity::PerTensor, None)?;
    let gather_ok = gathered.bitwise_eq(&reference);

    let again = backward_regather(&param, param.global_scale(), true, 1, &mut ledger)?;
    let regather_ok = again.bitwise_eq(&gathered);
    let backward_scale_reduces = ledger
        .records
        .iter()
        .filter(|r| r.backward && r.collective == Collective::ScaleMaxReduce)
        .count();

    let trace = if probe.trace_steps > 0 {
        let scheme = cfg.halo_scheme().map_err(input)?;
        let run_with = |world_size: usize| -> Result<Vec<u64>, Failure> {
            let (data, mut model) = setup(cfg, &scheme, cfg.seed)?;
            let tc = TrainConfig {
                steps: probe.trace_steps,
                fsdp: Some(FsdpOptions {
                    world_size,
                    checkpointing: probe.checkpointing,
                    check_stale: true,
                }),
                eval_batches: 0,
                ..cfg.train.clone()
            };
            let report = train(&mut model, data.as_ref(), &tc)?;
            Ok(report.losses().iter().map(|l| l.to_bits()).collect())
        };
        Some(run_with(probe.world_size)? == run_with(1)?)
    } else {
        None
    };

    let report = comm_report(&ledger);
    let ok = gather_ok && regather_ok && backward_scale_reduces == 0 && trace != Some(false);
    let doc = json!({
        "world_size": probe.world_size,
        "format": format.name(),
        "weight": {"rows": probe.rows, "cols": probe.cols},
        "hadamard": probe.hadamard,
        "padding": param.padding(),
        "report": report,
        "records": ledger.records,
        "equivalence": {
            "gather_matches_reference": gather_ok,
            "regather_matches_gather": regather_ok,
            "backward_scale_reduces": backward_scale_reduces,
            "loss_trace_matches_single_rank": trace,
            "verdict": pass(ok),
        },
    });
    let mut run = Run::new("fsdp", cfg, raw, vec![cfg.seed])?;
    run.write(
        "ledger.json",
        (serde_json::to_string_pretty(&doc).unwrap() + "\n").as_bytes(),
    )?;
    run.verdict("equivalence", pass(ok));
    run.verdict("ratio", report.ratio);
    run.verdict("padding", param.padding());
    let manifest = run.finish()?;
    println!(
        "world {} {}: gather bytes {}, ratio {:.4}, padding {}, equivalence {}",
        probe.world_size,
        format,
        report.gather_bytes,
        report.ratio,
        param.padding(),
        pass(ok)
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn load_tensor(path: &Path) -> Result<StoredTensor, Failure> {
    read_stored(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Applies the rotation; the Hadamard matrices are symmetric and
/// orthonormal, so the same call also undoes it.
fn rotate(a: &Tensor<f64>, side: Side) -> Result<Tensor<f64>, Failure> {
    Ok(match side {
        Side::None => a.clone(),
        Side::Left => transform_left(a, &build_spec(a.rows())?)?,
        Side::Right => transform_right(a, &build_spec(a.cols())?)?,
    })
}

pub fn cmd_inspect(path: &Path, side: Side, axis: Axis) -> Result<(), Failure> {
    let stored = load_tensor(path)?;
    let dtype = match &stored {
        StoredTensor::F32(_) => "f32".to_string(),
        StoredTensor::F64(_) => "f64".to_string(),
        StoredTensor::Quantized(q) => {
            format!(
                "quantized {} {} ({} scales)",
                q.format(),
                q.granularity(),
                q.scales().len()
            )
        }
    };
    let a = rotate(&stored.into_dense::<f64>(), side)?;
    let stats = outlier_stats(&a, axis);
    let (min, max) = a
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mean = a.data().iter().sum::<f64>() / a.len().max(1) as f64;

    println!("file: {}", path.display());
    println!("shape: {}x{}", a.rows(), a.cols());
    println!("dtype: {dtype}");
    println!("hadamard: {side:?}");
    println!("min: {min:.6e}");
    println!("max: {max:.6e}");
    println!("mean: {mean:.6e}");
    println!("mean_abs: {:.6e}", a.mean_abs());
    println!("max_abs: {:.6e}", a.max_abs());
    println!("outlier_threshold: {:.6e}", stats.threshold);
    println!("outliers: {}", stats.outlier_count);
    let mut worst: Vec<usize> = (0..stats.outliers_per_slice.len())
        .filter(|&i| stats.outliers_per_slice[i] > 0)
        .collect();
    worst.sort_by(|&i, &j| {
        stats.outliers_per_slice[j]
            .cmp(&stats.outliers_per_slice[i])
            .then(i.cmp(&j))
    });
    let name = match axis {
        Axis::Rows => "row",
        Axis::Columns => "column",
    };
    for &i in worst.iter().take(8) {
        println!(
            "  {name} {i}: {} outliers, max_abs {:.6e}",
            stats.outliers_per_slice[i], stats.max_abs[i]
        );
    }
    Ok(())
}

pub fn cmd_quantreport(path: &Path, granularity: Option<&str>) -> Result<(), Failure> {
    let a = load_tensor(path)?.into_dense::<f64>();
    let granularity = granularity
        .map(|g| g.parse::<Granularity>())
        .transpose()
        .map_err(|e| Failure::Input(e.to_string()))?;
    println!("format,granularity,hadamard,mse,max_abs_err,snr_db");
    for format in NumericFormat::ALL {
        if format == NumericFormat::Identity {
            continue;
        }
        let g = granularity.unwrap_or(Granularity::default_for(format));
        for side in [Side::None, Side::Left, Side::Right] {
            let supported = match side {
                Side::None => true,
                Side::Left => build_spec(a.rows()).is_ok(),
                Side::Right => build_spec(a.cols()).is_ok(),
            };
            if !supported {
                continue;
            }
            let q = quantize(&rotate(&a, side)?, format, g, None)?;
            let back = rotate(&dequantize::<f64>(&q), side)?;
            let (mut se, mut power, mut max_err) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in a.data().iter().zip(back.data()) {
                se += (x - y) * (x - y);
                power += x * x;
                max_err = max_err.max((x - y).abs());
            }
            let snr = if se == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (power / se).log10()
            };
            println!(
                "{},{},{},{:.6e},{:.6e},{:.3}",
                format,
                g,
                side.name(),
                se / a.len().max(1) as f64,
                max_err,
                snr
            );
        }
    }
    Ok(())
}
