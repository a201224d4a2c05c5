use halo::fsdp::{
    backward_regather, comm_report, quantized_all_gather, reduce_scatter_grads, shard, Collective, CommLedger,
    WorldConfig,
};
use halo::hadamard::{build_spec, transform_right};
use halo::halo::{HaloScheme, Level};
use halo::quantize::{quantize, Granularity, NumericFormat};
use halo::tensor::Tensor;
use halo::trainer::{train, FsdpOptions, ModelConfig, RegressionConfig, RegressionTask, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORLDS: [usize; 4] = [1, 2, 4, 8];
const COLS: [usize; 6] = [8, 12, 16, 20, 24, 64];
const FORMATS: [NumericFormat; 3] = [NumericFormat::Int8, NumericFormat::Fp8E4M3, NumericFormat::Fp6E3M2];

#[test]
fn gather_matches_single_process_reference() {
    for world_size in WORLDS {
        let world = WorldConfig::new(world_size).unwrap();
        for i in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * world_size as u64 + i);
            let rows = rng.random_range(1..40);
            let cols = COLS[rng.random_range(0..COLS.len())];
            let format = FORMATS[i as usize % FORMATS.len()];
            let hadamard = i % 2 == 0;
            let w = Tensor::<f32>::randn(rows, cols, 1.0, &mut rng);

            let mut param = shard(&w, &world, format);
            let mut ledger = CommLedger::new(world_size);
            let gathered = quantized_all_gather(&mut param, hadamard, &mut ledger).unwrap();

            let padded = w.pad_rows(param.padded_weight().rows());
            let rotated = if hadamard {
                transform_right(&padded, &build_spec(cols).unwrap()).unwrap()
            } else {
                padded
            };
            let reference = quantize(&rotated, format, Granularity::PerTensor, None).unwrap();
            assert!(gathered.bitwise_eq(&reference), "world {world_size} weight {i}");

            let reduces = |l: &CommLedger| l.totals().get(&Collective::ScaleMaxReduce).map_or(0, |t| t.count);
            let before = reduces(&ledger);
            let again = backward_regather(&param, param.global_scale(), true, 1, &mut ledger).unwrap();
            assert!(again.bitwise_eq(&gathered));
            assert_eq!(reduces(&ledger), before);
            assert!(ledger
                .records
                .iter()
                .filter(|r| r.backward)
                .all(|r| r.collective != Collective::ScaleMaxReduce));

            let stripped = param.strip_padding(&gathered).unwrap();
            assert_eq!(stripped.shape(), (rows, cols));
        }
    }
}

#[test]
fn reduce_scatter_equals_sequential_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for world_size in WORLDS {
        let world = WorldConfig::new(world_size).unwrap();
        let grads: Vec<Tensor<f32>> = (0..world_size).map(|_| Tensor::randn(10, 8, 1.0, &mut rng)).collect();
        let param = shard(&grads[0], &world, NumericFormat::Int8);
        let mut ledger = CommLedger::new(world_size);
        let shards = reduce_scatter_grads(&grads, &param, &mut ledger).unwrap();
        let mean = Tensor::from_fn(10, 8, |i, j| {
            let mut acc = 0.0f64;
            for g in &grads {
                acc += g.get(i, j) as f64;
            }
            (acc / world_size as f64) as f32
        });
        assert!(Tensor::vstack(&shards).unwrap().bitwise_eq(&mean));
    }
}

#[test]
fn padding_is_reported() {
    let w = Tensor::<f32>::filled(10, 8, 1.0);
    let p = shard(&w, &WorldConfig::new(3).unwrap(), NumericFormat::Int8);
    assert_eq!(p.padding(), 2);
}

fn task() -> RegressionTask {
    let model = ModelConfig {
        dim: 16,
        ffn_dim: 32,
        blocks: 2,
        out_dim: 4,
        norm_gain: true,
        lora_rank: 0,
    };
    RegressionTask::new(
        model,
        RegressionConfig {
            batch: 16,
            ..Default::default()
        },
        21,
    )
    .unwrap()
}

#[test]
fn loss_traces_do_not_depend_on_world_size() {
    let t = task();
    let scheme = HaloScheme::preset(Level::Halo2, NumericFormat::Int8);
    let run = |world_size: usize, checkpointing: bool| {
        let mut s = t.student(&scheme, 0, 3).unwrap();
        let cfg = TrainConfig {
            steps: 8,
            fsdp: Some(FsdpOptions {
                world_size,
                checkpointing,
                check_stale: true,
            }),
            eval_batches: 0,
            ..Default::default()
        };
        train(&mut s, &t, &cfg).unwrap()
    };
    let bits = |r: &halo::trainer::TrainReport| r.losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let reference = run(1, false);
    for ws in WORLDS {
        let r = run(ws, ws == 4);
        assert_eq!(bits(&r), bits(&reference), "world {ws}");
        let ledger = r.ledger.unwrap();
        let report = comm_report(&ledger);
        if ws == 1 {
            assert_eq!(report.gather_bytes, 0);
        } else {
            assert!(report.gather_bytes > 0);
        }
        if ws == 4 {
            assert!(ledger
                .records
                .iter()
                .filter(|r| r.backward && r.collective == Collective::AllGather)
                .all(|r| r.consumers == 2));
        }
    }
}

#[test]
fn byte_ratios_on_a_large_weight() {
    let w = Tensor::<f32>::from_fn(4096, 4096, |i, j| ((i * 31 + j * 17) % 255) as f32 / 64.0 - 2.0);
    for (format, expected) in [(NumericFormat::Int8, 0.5), (NumericFormat::Fp6E3M2, 0.375)] {
        let mut p = shard(&w, &WorldConfig::new(4).unwrap(), format);
        let mut ledger = CommLedger::new(4);
        quantized_all_gather(&mut p, false, &mut ledger).unwrap();
        let r = comm_report(&ledger);
        // 2 bytes per element in bf16; codes plus one 4-byte scale quantized.
        assert_eq!(r.bf16_gather_payload_bytes, 2 * 4096 * 4096);
        let codes = (4096 * 4096) as f64 * expected * 2.0;
        assert_eq!(r.gather_payload_bytes, codes as u64 + 4);
        assert!((r.ratio - expected).abs() < 5e-4);
        assert_eq!(r.gather_bytes, r.gather_payload_bytes * 3);
    }
}
