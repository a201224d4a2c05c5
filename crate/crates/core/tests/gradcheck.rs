//! Analytic backward passes against central finite differences in f64.

use halo::halo::{HaloLinear, HaloScheme, Level};
use halo::quantize::NumericFormat;
use halo::tensor::{Accumulate, Tensor};
use halo::trainer::analysis::{gradient_gap, model_gradcheck, numeric_gradient};
use halo::trainer::{Batch, ModelConfig, RmsNorm, Targets, ToyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

/// `⟨f(x), r⟩` for a fixed random `r`, so the upstream error is `r`.
fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn rmsnorm_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..5);
        let dim = rng.random_range(2..17);
        let x = Tensor::<f64>::randn(rows, dim, 1.0, &mut rng);
        let r = Tensor::<f64>::randn(rows, dim, 1.0, &mut rng);
        let layer = if seed % 2 == 0 {
            RmsNorm::<f64>::new(dim)
        } else {
            let mut l = RmsNorm::<f64>::new(dim);
            l.gain = Some(Tensor::randn(1, dim, 1.0, &mut rng));
            l
        };
        let (dx, dg) = layer.backward(&x, &r).unwrap();
        let num = numeric_gradient(|t| Ok(probe(&layer.forward(t)?, &r)), &x, H).unwrap();
        let gap = gradient_gap(&dx, &num).unwrap();
        assert!(gap < TOL, "seed {seed}: input gap {gap:e}");
        if let (Some(g), Some(dg)) = (&layer.gain, dg) {
            let num = numeric_gradient(
                |t| {
                    let l = RmsNorm {
                        dim,
                        gain: Some(t.clone()),
                    };
                    Ok(probe(&l.forward(&x)?, &r))
                },
                g,
                H,
            )
            .unwrap();
            let gap = gradient_gap(&dg, &num).unwrap();
            assert!(gap < TOL, "seed {seed}: gain gap {gap:e}");
        }
    }
}

const DIMS: [usize; 4] = [4, 8, 12, 16];

fn random_scheme(rng: &mut ChaCha8Rng) -> HaloScheme {
    let modes = HaloScheme::all_modes(NumericFormat::Identity);
    match rng.random_range(0..4) {
        0 => HaloScheme::preset(Level::Halo0, NumericFormat::Identity),
        1 => HaloScheme::preset(Level::Halo1, NumericFormat::Identity),
        2 => HaloScheme::preset(Level::Halo2, NumericFormat::Identity),
        _ => modes[rng.random_range(0..modes.len())].clone(),
    }
}

#[test]
fn halo_layers_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, m, n) = (
            rng.random_range(1..7),
            DIMS[rng.random_range(0..4)],
            DIMS[rng.random_range(0..4)],
        );
        let scheme = random_scheme(&mut rng);
        let w = Tensor::<f64>::randn(n, m, 1.0, &mut rng);
        let x = Tensor::<f64>::randn(b, m, 1.0, &mut rng);
        let r = Tensor::<f64>::randn(b, n, 1.0, &mut rng);
        let layer = HaloLinear::new(w.clone(), scheme.clone());
        let (_, ctx) = layer.forward(&x).unwrap();
        let g = layer.backward(&ctx, &r).unwrap();

        let num_x = numeric_gradient(|t| Ok(probe(&layer.forward(t)?.0, &r)), &x, H).unwrap();
        let gap = gradient_gap(&g.e_x, &num_x).unwrap();
        assert!(gap < TOL, "seed {seed} {scheme}: input gap {gap:e}");

        let num_w = numeric_gradient(
            |t| Ok(probe(&HaloLinear::new(t.clone(), scheme.clone()).forward(&x)?.0, &r)),
            &w,
            H,
        )
        .unwrap();
        let gap = gradient_gap(g.g_w.as_ref().unwrap(), &num_w).unwrap();
        assert!(gap < TOL, "seed {seed} {scheme}: weight gap {gap:e}");
    }
}

#[test]
fn lora_adapters_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (b, m, n, rank) = (
            rng.random_range(1..7),
            DIMS[rng.random_range(0..4)],
            DIMS[rng.random_range(0..4)],
            rng.random_range(1..5),
        );
        let scheme = HaloScheme::preset(Level::HaloPeft, NumericFormat::Identity);
        let w = Tensor::<f64>::randn(n, m, 1.0, &mut rng);
        let u = Tensor::<f64>::randn(rank, m, 1.0, &mut rng);
        let v = Tensor::<f64>::randn(n, rank, 1.0, &mut rng);
        let x = Tensor::<f64>::randn(b, m, 1.0, &mut rng);
        let r = Tensor::<f64>::randn(b, n, 1.0, &mut rng);
        let build = |u: &Tensor<f64>, v: &Tensor<f64>| {
            HaloLinear::new(w.clone(), scheme.clone())
                .with_lora(u.clone(), v.clone())
                .unwrap()
        };
        let layer = build(&u, &v);
        let (_, ctx) = layer.forward(&x).unwrap();
        let g = layer.backward(&ctx, &r).unwrap();
        assert!(g.g_w.is_none());

        let checks = [
            (
                "input",
                g.e_x.clone(),
                numeric_gradient(|t| Ok(probe(&layer.forward(t)?.0, &r)), &x, H),
            ),
            (
                "u",
                g.g_u.clone().unwrap(),
                numeric_gradient(|t| Ok(probe(&build(t, &v).forward(&x)?.0, &r)), &u, H),
            ),
            (
                "v",
                g.g_v.clone().unwrap(),
                numeric_gradient(|t| Ok(probe(&build(&u, t).forward(&x)?.0, &r)), &v, H),
            ),
        ];
        for (what, analytic, numeric) in checks {
            let gap = gradient_gap(&analytic, &numeric.unwrap()).unwrap();
            assert!(gap < TOL, "seed {seed}: {what} gap {gap:e}");
        }
        // Independent closed form for the adapter gradients.
        let xu = x.matmul(&u.transpose(), Accumulate::Double).unwrap();
        let gv = r.transpose().matmul(&xu, Accumulate::Double).unwrap();
        assert!(gradient_gap(g.g_v.as_ref().unwrap(), &gv).unwrap() < 1e-12);
    }
}

#[test]
fn toy_model_matches_finite_differences() {
    let cfg = ModelConfig {
        dim: 8,
        ffn_dim: 16,
        blocks: 2,
        out_dim: 3,
        norm_gain: true,
        lora_rank: 0,
    };
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let scheme = HaloScheme::preset(Level::Halo2, NumericFormat::Identity);
        let model = ToyModel::<f64>::init(cfg.clone(), scheme, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(4, 8, 1.0, &mut rng);
        let targets = if seed % 2 == 0 {
            Targets::Values(Tensor::randn(4, 3, 1.0, &mut rng))
        } else {
            Targets::Labels(vec![0, 2, 1, 2])
        };
        for (name, gap) in model_gradcheck(&model, &Batch { x, targets }, H).unwrap() {
            assert!(gap < TOL, "seed {seed}: {name} gap {gap:e}");
        }
    }
}
