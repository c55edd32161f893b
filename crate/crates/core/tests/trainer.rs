use proptest::prelude::*;
use tvt_core::data::{synth_domain_pair, DomainPair, SynthConfig};
use tvt_core::trainer::{
    clip_grad_norm, evaluate, fit, total_objective, Ablation, LossWeights, LrSchedule, RunDir, SgdMomentum, Silent,
    TrainConfig, TrainData,
};
use tvt_core::vit::Transferability;
use tvt_core::{Error, ModelConfig, ParamStore, Tensor, TvtModel};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 24,
        channels: 1,
        patch_size: 8,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        classes: 4,
        mlp_ratio: 2,
        init_std: 0.02,
    }
}

fn tiny_data() -> DomainPair {
    synth_domain_pair(&SynthConfig {
        image_size: 24,
        train_count: 64,
        test_count: 32,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 4,
        batch_source: 4,
        batch_target: 4,
        eval_interval: 0,
        ..TrainConfig::default()
    }
}

fn train_data(p: &DomainPair) -> TrainData<'_> {
    TrainData {
        source_train: &p.source_train,
        target_train: &p.target_train,
        target_test: &p.target_test,
    }
}

#[test]
fn schedule_examples() {
    let s = TrainConfig::default().schedule();
    let s = LrSchedule { total: 5000, ..s };
    assert_eq!(s.at(0), 0.0);
    assert_eq!(s.at(250), 0.015);
    assert_eq!(s.at(500), 0.03);
    assert!((s.at(2750) - 0.015).abs() < 1e-15);
    assert!(s.at(5000).abs() < 1e-18);
    assert!(s.at(9000).abs() < 1e-18);
}

#[test]
fn momentum_accumulates_velocity() {
    let mut store = ParamStore::new();
    let id = store.register("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    let mut opt = SgdMomentum::new(&store, 0.9);
    let (g, lr) = ([0.5, -2.0], 0.1);
    for _ in 0..2 {
        store.tensor_mut(id).grad = Some(g.to_vec());
        opt.step(&mut store, lr).unwrap();
    }
    // v1 = g, v2 = 1.9 g: total displacement 2.9 lr g.
    let w = store.tensor(id).data();
    for ((w, w0), g) in w.iter().zip([1.0, -1.0]).zip(g) {
        assert!((w - (w0 - 2.9 * lr * g)).abs() < 1e-15);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (_, mut store) = TvtModel::new(&tiny_model(), 1).unwrap();
    let before = store.clone();
    let mut opt = SgdMomentum::new(&store, 0.9);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).numel();
        store.tensor_mut(id).grad = Some(vec![0.3; n]);
    }
    opt.step(&mut store, 0.0).unwrap();
    for ((_, _, a), (_, _, b)) in store.iter().zip(before.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn optimizer_requires_gradients() {
    let (_, mut store) = TvtModel::new(&tiny_model(), 1).unwrap();
    let mut opt = SgdMomentum::new(&store, 0.9);
    assert!(matches!(opt.step(&mut store, 0.1), Err(Error::Contract(_))));
}

#[test]
fn clipping_bounds_the_joint_norm() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::zeros(&[2])).unwrap();
    let b = store.register("b", Tensor::zeros(&[1])).unwrap();
    store.tensor_mut(a).grad = Some(vec![3.0, 0.0]);
    store.tensor_mut(b).grad = Some(vec![4.0]);
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    let clipped: Vec<f64> = [a, b].iter().flat_map(|&id| store.tensor(id).grad.clone().unwrap()).collect();
    for (g, want) in clipped.iter().zip([0.6, 0.0, 0.8]) {
        assert!((g - want).abs() < 1e-15);
    }
    assert!((clip_grad_norm(&mut store, 10.0) - 1.0).abs() < 1e-15);
    // Below the threshold nothing changes.
    assert_eq!(store.tensor(b).grad.as_deref().map(|g| g[0]), Some(clipped[2]));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { alpha: -1.0, ..TrainConfig::default() },
        TrainConfig { warmup_steps: 1500, ..TrainConfig::default() },
        TrainConfig { batch_target: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn ablation_settings() {
    let mut so = TrainConfig::default();
    Ablation::SourceOnly.apply(&mut so);
    assert_eq!((so.alpha, so.beta, so.gamma, so.tam), (0.0, 0.0, 0.0, false));
    let mut tam = TrainConfig::default();
    Ablation::Tam.apply(&mut tam);
    assert_eq!((tam.gamma, tam.tam), (0.0, true));
    assert_eq!((tam.alpha, tam.beta), (1.0, 1.0));
}

#[test]
fn zero_weights_reduce_to_source_cross_entropy() {
    let cfg = tiny_model();
    let (model, store) = TvtModel::new(&cfg, 2).unwrap();
    let data = tiny_data();
    let batch = tvt_core::data::paired_batches(&data.source_train, &data.target_train, 4, 4, 0)
        .unwrap()
        .next()
        .unwrap();
    let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
    let obj = total_objective(&model, &store, &batch, &zero, 0.7, Transferability::Vanilla).unwrap();
    assert_eq!(obj.tape.value(obj.loss).item(), obj.terms.l_clc);
    let w = LossWeights { alpha: 0.3, beta: 0.2, gamma: 0.5 };
    let obj = total_objective(&model, &store, &batch, &w, 0.7, Transferability::Discriminator).unwrap();
    let expected = obj.terms.l_clc + 0.3 * obj.terms.l_dis + 0.2 * obj.terms.l_pat - 0.5 * obj.terms.mi;
    assert!((obj.tape.value(obj.loss).item() - expected).abs() < 1e-14);
    assert!(obj.terms.mi >= 0.0 && obj.terms.mi <= 4f64.ln());
}

#[test]
fn fit_is_deterministic() {
    let data = tiny_data();
    let cfg = short_run(6);
    let a = fit(&tiny_model(), &cfg, &train_data(&data), &mut Silent).unwrap();
    let b = fit(&tiny_model(), &cfg, &train_data(&data), &mut Silent).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 6);
    assert_eq!(a.target_accuracy.to_bits(), b.target_accuracy.to_bits());
    for ((_, _, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let other = fit(&tiny_model(), &TrainConfig { seed: 1, ..cfg }, &train_data(&data), &mut Silent).unwrap();
    assert_ne!(a.records, other.records);
}

#[test]
fn run_dir_layout() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        eval_interval: 2,
        ..short_run(5)
    };
    let mut run = RunDir::create(dir.path()).unwrap();
    let out = fit(&tiny_model(), &cfg, &train_data(&data), &mut run).unwrap();
    drop(run);
    let metrics = std::fs::read_to_string(dir.path().join(RunDir::METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert!(first["acc"].is_null());
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["acc"].as_f64(), Some(out.target_accuracy));
    for name in [RunDir::checkpoint_name(2), RunDir::checkpoint_name(4), RunDir::FINAL.to_string()] {
        assert!(dir.path().join(&name).exists(), "{name}");
    }
    assert!(!dir.path().join(RunDir::checkpoint_name(5)).exists());
}

#[test]
fn zero_steps_writes_only_the_final_checkpoint() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        total_steps: 0,
        warmup_steps: 0,
        ..short_run(0)
    };
    let mut run = RunDir::create(dir.path()).unwrap();
    let out = fit(&tiny_model(), &cfg, &train_data(&data), &mut run).unwrap();
    drop(run);
    assert!(out.records.is_empty());
    let mut names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec![RunDir::FINAL.to_string(), RunDir::METRICS.to_string()]);
    assert_eq!(std::fs::read(dir.path().join(RunDir::METRICS)).unwrap().len(), 0);
}

#[test]
fn fit_rejects_mismatched_images() {
    let data = tiny_data();
    let cfg = ModelConfig {
        image_size: 32,
        ..tiny_model()
    };
    assert!(matches!(
        fit(&cfg, &short_run(2), &train_data(&data), &mut Silent),
        Err(Error::Config(_))
    ));
}

#[test]
fn source_only_training_fits_the_source_domain() {
    let data = tiny_data();
    let mut cfg = TrainConfig {
        total_steps: 400,
        warmup_steps: 40,
        batch_source: 16,
        batch_target: 4,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    Ablation::SourceOnly.apply(&mut cfg);
    let out = fit(&tiny_model(), &cfg, &train_data(&data), &mut Silent).unwrap();
    let first = out.records.first().unwrap().l_clc;
    let last = out.records.last().unwrap().l_clc;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let acc = evaluate(&out.model, &out.store, &data.source_train, false).unwrap();
    assert!(acc >= 0.9, "source train accuracy {acc}");
}

proptest! {
    #[test]
    fn schedule_shape(peak in 0.001f64..1.0, warmup in 1usize..200, extra in 1usize..400) {
        let s = LrSchedule { peak, warmup, total: warmup + extra };
        prop_assert_eq!(s.at(0), 0.0);
        prop_assert!((s.at(warmup) - peak).abs() <= 1e-15 * peak);
        for i in 1..=warmup {
            prop_assert!(s.at(i) > s.at(i - 1));
        }
        for i in warmup + 1..=warmup + extra {
            prop_assert!(s.at(i) <= s.at(i - 1));
        }
        prop_assert!(s.at(warmup + extra).abs() <= 1e-15 * peak);
    }
}
