use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_many;
use crate::error::Error;
use crate::params::NORM_EPS;

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Closed-form parameter count of the architecture.
fn expected_count(cfg: &ModelConfig, v: usize) -> usize {
    let branches = if cfg.branches == Branches::Hybrid {
        2
    } else {
        1
    };
    let mut total = 2 * cfg.in_channels * v;
    let mut c_in = cfg.in_channels;
    for (&c, &s) in cfg.channels.iter().zip(&cfg.strides) {
        let ci = (c_in / 8).max(4);
        let per_subset = branches * (c_in * ci + ci + 2 * ci)
            + usize::from(branches == 2)
            + if cfg.extension_conv { ci * c + c } else { 0 }
            + c_in * c
            + c;
        let q = c / 4;
        let temporal = match cfg.temporal {
            TemporalMode::Multiscale => 4 * (c * q + q + 2 * q + q * q * 3 + q + 2 * q),
            TemporalMode::Single => c * c * 9 + c + 2 * c,
        };
        let residual = if c_in != c || s != 1 { c_in * c + c } else { 0 };
        total += 3 * per_subset + 2 * c + temporal + residual;
        c_in = c;
    }
    total + c_in * cfg.num_classes + cfg.num_classes
}

#[test]
fn parameter_counts() {
    let full = Model::new(ModelConfig::ntu(), 0).unwrap();
    let single = Model::new(
        ModelConfig {
            branches: Branches::RdOnly,
            ..ModelConfig::ntu()
        },
        0,
    )
    .unwrap();
    assert_eq!(full.param_count(), expected_count(full.config(), 25));
    assert_eq!(single.param_count(), expected_count(single.config(), 25));
    let (f, s) = (full.param_count() as f64, single.param_count() as f64);
    assert!((f - 1.42e6).abs() <= 0.142e6, "{f}");
    assert!((s - 1.34e6).abs() <= 0.134e6, "{s}");
    assert!((0.04e6..=0.12e6).contains(&(f - s)), "{}", f - s);

    for cfg in [
        ModelConfig {
            temporal: TemporalMode::Single,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            extension_conv: false,
            branches: Branches::RaOnly,
            ..ModelConfig::tiny()
        },
    ] {
        assert_eq!(
            Model::new(cfg.clone(), 1).unwrap().param_count(),
            expected_count(&cfg, 5)
        );
    }
}

#[test]
fn output_shape_and_probabilities_for_any_length() {
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let count = model.param_count();
    for t in [1, 4, 9] {
        let p = model
            .predict(&input(&[3, 2, 3, t, 5], t as u64), None)
            .unwrap();
        assert_eq!(p.shape(), &[3, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(model.param_count(), count);
}

#[test]
fn eval_is_deterministic_and_batch_independent() {
    let model = Model::new(ModelConfig::tiny(), 3).unwrap();
    let x = input(&[4, 2, 3, 6, 5], 4);
    let a = model.predict(&x, None).unwrap();
    assert_eq!(a, model.predict(&x, None).unwrap());
    let per = x.numel() / 4;
    for i in 0..4 {
        let xi = Tensor::new(&[1, 2, 3, 6, 5], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let pi = model.predict(&xi, None).unwrap();
        for k in 0..3 {
            assert!((pi.get(&[0, k]) - a.get(&[i, k])).abs() < 1e-9);
        }
    }
}

#[test]
fn rejects_mismatched_input() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    assert!(matches!(
        model.predict(&input(&[1, 1, 2, 4, 5], 0), None),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        model.predict(&input(&[1, 1, 3, 4, 6], 0), None),
        Err(Error::Shape { .. })
    ));
    assert!(model.capture_masks(&input(&[1, 1, 3, 4, 5], 0), 2).is_err());
}

fn zero_biases(store: &mut ParamStore) {
    let names: Vec<String> = store
        .params()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".b") || n.ends_with(".beta"))
        .collect();
    for n in names {
        let p = store.param_mut(&n).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }
}

fn run_block(block: &Block, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let y = block.forward(&mut ctx, xv).unwrap();
    ctx.tape.value(y).clone()
}

fn block_with_store(c_in: usize, c_out: usize, stride: usize) -> (Block, ParamStore) {
    let cfg = ModelConfig::tiny();
    let g = cfg.build_graph().unwrap();
    let block = Block::new(0, c_in, c_out, stride, &g, &cfg).unwrap();
    let mut store = ParamStore::new();
    block
        .init(&mut store, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    (block, store)
}

#[test]
fn zero_input_gives_zero_output() {
    let (block, mut store) = block_with_store(4, 8, 2);
    zero_biases(&mut store);
    let y = run_block(&block, &store, &Tensor::zeros(&[2, 4, 6, 5]));
    assert_eq!(y.shape(), &[2, 8, 3, 5]);
    assert!(y.data().iter().all(|&a| a == 0.0));
}

#[test]
fn identity_configured_block_doubles_positive_input() {
    let (block, mut store) = block_with_store(4, 4, 1);
    zero_biases(&mut store);
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        let p = store.param_mut(n).unwrap();
        let shape = p.value.shape().to_vec();
        if n.contains(".compress.") {
            p.value = Tensor::zeros(&shape);
        } else if n.ends_with("extend.w") {
            p.value = Tensor::full(&shape, 1.0 / shape[1] as f64);
        } else if n.ends_with("value.w") {
            let mut w = Tensor::zeros(&shape);
            if n.contains(".identity.") {
                (0..shape[0]).for_each(|i| w.set(&[i, i, 0, 0], 1.0));
            }
            p.value = w;
        } else if n.ends_with("reduce.w") {
            let d: usize = n.split(".d").nth(1).unwrap()[..1].parse().unwrap();
            let mut w = Tensor::zeros(&shape);
            (0..shape[0]).for_each(|i| w.set(&[i, (d - 1) * shape[0] + i, 0, 0], 1.0));
            p.value = w;
        } else if n.ends_with("conv.w") {
            let mut w = Tensor::zeros(&shape);
            (0..shape[0]).for_each(|i| w.set(&[i, i, 1, 0], 1.0));
            p.value = w;
        }
    }
    let bns: Vec<String> = store
        .buffers()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with("running_var"))
        .collect();
    for n in bns {
        let t = store.buffer_mut(&n).unwrap();
        *t = Tensor::full(t.shape(), 1.0 - NORM_EPS);
    }
    let x = Tensor::rand_uniform(&[2, 4, 5, 5], 0.05, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let y = run_block(&block, &store, &x);
    let expect: Vec<f64> = x.data().iter().map(|a| 2.0 * a).collect();
    assert!(y
        .data()
        .iter()
        .zip(&expect)
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    for seed in 0..2 {
        let model = Model::new(ModelConfig::tiny(), seed).unwrap();
        let x = input(&[2, 2, 3, 6, 5], 10 + seed);
        let labels = [0, 2];
        let names: Vec<String> = model.store.params().map(|(n, _)| n.to_string()).collect();
        let mut inputs = vec![x];
        inputs.extend(
            names
                .iter()
                .map(|n| model.store.param(n).unwrap().value.clone()),
        );
        let report = grad_check_many(
            |tape, vars| {
                let mut ctx = Ctx::new(tape, &model.store, Mode::Train);
                for (n, v) in names.iter().zip(&vars[1..]) {
                    ctx.bind(n.clone(), *v);
                }
                let y = model.forward(&mut ctx, vars[0])?;
                ctx.tape.cross_entropy(y, &labels)
            },
            &inputs,
            1e-6,
            Some(6),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig {
        dropout: 0.5,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg, 0).unwrap();
    let x = input(&[2, 1, 3, 4, 5], 1);
    let logits = |opts: Forward| {
        let mut tape = Tape::new();
        let mut ctx = model.context(&mut tape, opts);
        let xv = ctx.tape.constant(x.clone());
        let y = model.logits(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    };
    let train = |seed| Forward {
        mode: Mode::Train,
        dropout_seed: Some(seed),
        ..Forward::default()
    };
    assert_eq!(logits(train(1)), logits(train(1)));
    assert_ne!(logits(train(1)), logits(train(2)));
    let eval = Forward {
        dropout_seed: Some(1),
        ..Forward::default()
    };
    assert_eq!(logits(eval), logits(Forward::default()));
}

#[test]
fn config_toml_round_trip() {
    for cfg in [
        ModelConfig::ntu(),
        ModelConfig::kinetics(),
        ModelConfig::tiny(),
    ] {
        assert_eq!(
            ModelConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(),
            cfg
        );
    }
    assert!(matches!(
        ModelConfig::from_toml("bogus = 1"),
        Err(Error::Config(_))
    ));
    assert!(ModelConfig::from_toml("graph = \"chain:1\"").is_err());
    assert!(ModelConfig::from_toml("channels = [6]\nstrides = [1]").is_err());
    let partial =
        ModelConfig::from_toml("num_classes = 8\nchannels = [16, 32]\nstrides = [1, 2]").unwrap();
    assert_eq!(partial.graph, GraphKind::Ntu);
    assert_eq!(partial.num_classes, 8);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = Model::new(ModelConfig::tiny(), 7).unwrap();
    for (_, p) in model.store.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|a| *a = a.sin() * 1.3);
    }
    *model
        .store
        .buffer_mut("blocks.0.spatial_bn.running_mean")
        .unwrap() = input(&[4], 3);
    let mut momentum = BTreeMap::new();
    momentum.insert("fc.b".to_string(), input(&[3], 8));
    let state = TrainingState { epoch: 5, momentum };
    let x = input(&[2, 2, 3, 5, 5], 9);

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, Some(&state)).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.model.store, model.store);
    assert_eq!(back.training.as_ref(), Some(&state));
    assert_eq!(
        back.model.predict(&x, None).unwrap(),
        model.predict(&x, None).unwrap()
    );

    let fresh = Model::new(ModelConfig::ntu(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hagc");
    save_checkpoint(&path, &fresh, None).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.training.is_none());
    assert_eq!(loaded.model.store, fresh.store);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, None).unwrap();

    let truncated = &buf[..buf.len() - 9];
    assert!(matches!(
        read_checkpoint(&mut &truncated[..]),
        Err(Error::Corrupt { .. })
    ));
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        read_checkpoint(&mut bad_magic.as_slice()),
        Err(Error::Corrupt { .. })
    ));
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(matches!(
        read_checkpoint(&mut trailing.as_slice()),
        Err(Error::Corrupt { .. })
    ));
    let mut bad_header = buf.clone();
    bad_header[12] = b'!';
    assert!(matches!(
        read_checkpoint(&mut bad_header.as_slice()),
        Err(Error::Corrupt { .. })
    ));
}

#[test]
fn from_store_checks_parameter_set() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    assert!(Model::from_store(ModelConfig::tiny(), model.store.clone()).is_ok());
    let other = ModelConfig {
        num_classes: 4,
        ..ModelConfig::tiny()
    };
    assert!(matches!(
        Model::from_store(other, model.store),
        Err(Error::Corrupt { .. })
    ));
}

#[test]
fn captured_masks_have_graph_size() {
    let model = Model::new(ModelConfig::ntu(), 0).unwrap();
    let (_, masks) = model
        .capture_masks(&input(&[1, 1, 3, 4, 25], 0), 9)
        .unwrap();
    assert_eq!(masks.len(), 3);
    for m in masks {
        assert_eq!(m.final_mask.shape(), &[1, 32, 25, 25]);
        assert_eq!(m.hybrid.data(), m.rd.as_ref().unwrap().data());
    }
}
