use std::collections::HashSet;

use super::*;
use crate::network::fixed_layout;

fn tiny_train() -> TrainConfig {
    TrainConfig { train_size: 50, test_size: 20, batch_size: 10, epochs: 20, ..TrainConfig::desk() }
}

fn key(s: &Scenario) -> Vec<u64> {
    s.user_origins.iter().chain(&s.scatterers).chain(std::iter::once(&s.target)).flat_map(|p| p.map(f64::to_bits)).collect()
}

#[test]
fn datasets_are_deterministic_and_streams_disjoint() {
    let cfg = SystemConfig::full();
    assert_eq!(make_dataset(&cfg, 7, 100, Split::Train), make_dataset(&cfg, 7, 100, Split::Train));
    let train: HashSet<Vec<u64>> = make_dataset(&cfg, 7, 500, Split::Train).iter().map(key).collect();
    let test = make_dataset(&cfg, 7, 500, Split::Test);
    assert_eq!(train.len(), 500);
    assert!(test.iter().all(|s| !train.contains(&key(s))));
    assert_ne!(make_dataset(&cfg, 7, 5, Split::Train), make_dataset(&cfg, 8, 5, Split::Train));
}

#[test]
fn full_scale_dataset_sizes() {
    let cfg = SystemConfig::full();
    let tc = TrainConfig::full();
    tc.validate().unwrap();
    let train = make_dataset(&cfg, 1, tc.train_size, Split::Train);
    let test = make_dataset(&cfg, 1, tc.test_size, Split::Test);
    assert_eq!((train.len(), test.len()), (50_000, 10_000));
    assert!(train.iter().chain(&test).all(|s| s.is_inside(&cfg)));
}

#[test]
fn adam_first_step_is_signed_learning_rate() {
    let tc = TrainConfig::desk();
    let mut params = NetworkParams { tensors: vec![Tensor::vector(vec![1.0, -2.0, 0.5, 3.0])] };
    let before = params.clone();
    let grads = vec![Tensor::vector(vec![0.3, -4.0, 1e-3, 0.0])];
    let mut st = AdamState::new(&params);
    adam_step(&mut params, &grads, &mut st, &tc).unwrap();
    assert_eq!(st.step, 1);
    for j in 0..4 {
        let g = grads[0].data()[j];
        let delta = params.tensors[0].data()[j] - before.tensors[0].data()[j];
        let expect = -tc.learning_rate * g / (g.abs() + tc.epsilon);
        assert!((delta - expect).abs() < 1e-15, "{j}: {delta} vs {expect}");
        if g != 0.0 {
            assert!((delta + tc.learning_rate * g.signum()).abs() < 1e-8);
        }
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let tc = TrainConfig::desk();
    let mut params = NetworkParams { tensors: vec![Tensor::vector(vec![1.0, 2.0])] };
    let before = params.clone();
    let mut st = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st, &tc).unwrap();
    adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st, &tc).unwrap();
    assert_eq!(params, before);
    assert_eq!(st.step, 2);
    assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, &tc).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig { batch_size: 3000, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { p_max_list: vec![-1.0], ..TrainConfig::desk() }.validate().is_err());
}

#[test]
fn training_graph_matches_reference_metrics() {
    let sys = SystemConfig::desk();
    let ncfg = NetworkConfig::from_system(&sys);
    let params = init_params(&ncfg, 3);
    let test = make_dataset(&sys, 3, 40, Split::Test);
    let refs: Vec<&Scenario> = test.iter().collect();
    for variant in [Variant::Proposed, Variant::FixAnt] {
        let graph = graph_metrics(&params, &sys, variant, &refs).unwrap();
        let eval = evaluate_with(&params, &sys, variant, &test).unwrap();
        for ((rate, gamma), rec) in graph.iter().zip(&eval.records) {
            assert!((rate - rec.sum_rate).abs() <= 1e-9 * rec.sum_rate.abs().max(1.0), "{rate} vs {}", rec.sum_rate);
            assert!((gamma - rec.gamma_s).abs() <= 1e-9 * rec.gamma_s.abs().max(1e-12), "{gamma} vs {}", rec.gamma_s);
        }
    }
}

#[test]
fn loss_components_sum_to_total() {
    let sys = SystemConfig { gamma0: 10.0, d_min: 0.1, ..SystemConfig::desk() };
    let ncfg = NetworkConfig::from_system(&sys);
    let params = init_params(&ncfg, 1);
    let data = make_dataset(&sys, 1, 8, Split::Train);
    let refs: Vec<&Scenario> = data.iter().collect();
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(batch_input(&refs, &sys).unwrap());
    let out = forward(&mut g, x, &vars, &ncfg, Variant::Proposed).unwrap();
    let t = loss_terms(&mut g, &out, &refs, &sys).unwrap();
    let eval = evaluate_with(&params, &sys, Variant::Proposed, &data).unwrap();
    for b in 0..refs.len() {
        let (tot, r, sp, si) = (
            g.value(t.total).data()[b],
            g.value(t.sum_rate).data()[b],
            g.value(t.spacing_penalty).data()[b],
            g.value(t.sinr_penalty).data()[b],
        );
        assert!((tot - (-r + sp + si)).abs() < 1e-12);
        assert!(si > 0.0);
        let rec = &eval.records[b];
        let reference = crate::metrics::training_loss(&rec.rates, &rec.spacings, rec.gamma_s, &sys);
        assert!((reference.spacing_penalty - sp).abs() < 1e-9);
        assert!((reference.sinr_penalty - si).abs() < 1e-6 * si);
        assert!((reference.total - tot).abs() < 1e-6 * tot.abs().max(1.0));
    }
}

#[test]
fn tiny_training_descends() {
    let sys = SystemConfig::tiny();
    for seed in 0..3 {
        let tc = tiny_train().with_seed(seed);
        let (_, hist) = train(&sys, &tc, Variant::Proposed).unwrap();
        assert_eq!(hist.len(), 20);
        let (first, last) = (hist[0].mean_loss, hist[19].mean_loss);
        assert!(last <= first, "seed {seed}: {first} -> {last}");
        for h in &hist {
            assert!((h.mean_loss - (-h.mean_sum_rate + h.spacing_penalty + h.sinr_penalty)).abs() < 1e-9);
        }
    }
}

#[test]
fn fix_ant_records_fixed_positions_every_epoch() {
    let sys = SystemConfig::tiny();
    let tc = TrainConfig { epochs: 5, ..tiny_train() };
    let (ckpt, hist) = train(&sys, &tc, Variant::FixAnt).unwrap();
    let (y, ma) = fixed_layout(&NetworkConfig::from_system(&sys));
    for h in &hist {
        assert_eq!(h.pa_y, y);
        assert_eq!(h.ma, ma);
    }
    let test = make_dataset(&sys, 0, 3, Split::Test);
    let refs: Vec<&Scenario> = test.iter().collect();
    for d in infer(&ckpt.params, &refs, &sys, Variant::FixAnt).unwrap() {
        assert_eq!(d.pa.y, y);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let sys = SystemConfig::tiny();
    let tc = TrainConfig { epochs: 10, ..tiny_train() }.with_seed(4);
    let (a, ha) = train(&sys, &tc, Variant::Proposed).unwrap();
    let (b, hb) = train(&sys, &tc, Variant::Proposed).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn checkpoint_round_trip_and_evaluation() {
    let sys = SystemConfig::tiny();
    let tc = TrainConfig { epochs: 3, ..tiny_train() };
    let (ckpt, _) = train(&sys, &tc, Variant::Proposed).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..5], b"PISAC");
    assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), CHECKPOINT_VERSION);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let test = make_dataset(&sys, 0, tc.test_size, Split::Test);
    let e1 = evaluate(&ckpt, &test).unwrap();
    let e2 = evaluate(&loaded, &test).unwrap();
    assert_eq!(e1, e2);
    assert!(e1.records.iter().all(|r| r.sum_rate >= 0.0 && r.gamma_s >= 0.0 && r.rates.iter().all(|x| *x >= 0.0)));
    assert!(e1.records.iter().all(|r| r.power_ok && r.beam_norm_ok && r.combiner_norm_ok));

    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&broken), Err(TrainError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(TrainError::Checkpoint(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(TrainError::Checkpoint(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let sys = SystemConfig { noise_comm: 1e-300, ..SystemConfig::tiny() };
    let tc = TrainConfig { epochs: 2, ..tiny_train() };
    match train(&sys, &tc, Variant::Proposed) {
        Err(e) => assert!(e.is_numerical(), "{e}"),
        Ok(_) => panic!("training with overflowing channel gains must abort"),
    }
    assert!(TrainError::NonFinite { epoch: 0, batch: 0, value: f64::NAN }.is_numerical());
    assert!(!TrainError::Config("x".into()).is_numerical());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    use crate::autodiff::{check_gradient_with, AutodiffError, GradCheckOptions};
    let sys = SystemConfig::tiny();
    let params = init_params(&NetworkConfig::from_system(&sys), 2);
    let data = make_dataset(&sys, 2, 2, Split::Train);
    let refs: Vec<&Scenario> = data.iter().collect();
    let opts = GradCheckOptions { steps: &[1e-4, 1e-5, 1e-6], floor: 1e-5 };
    let rep = check_gradient_with(
        &params.tensors,
        |g, v| mean_loss_graph(g, v, &refs, &sys, Variant::Proposed).map_err(|e| AutodiffError::Shape(e.to_string())),
        opts,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-3, "{rep:?}");
}
