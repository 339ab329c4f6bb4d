use gradapprox::approx::{MethodKind, MethodParams};
use gradapprox::data::synthetic;
use gradapprox::nn::{
    build_model, softmax_cross_entropy, Adam, AdamConfig, BackwardCtx, ModelName, Network, Trainer,
};
use gradapprox::schedule::{Builtin, Schedule};
use gradapprox::Tensor4;

fn batch(n: usize, size: usize, seed: u64) -> (Tensor4<f32>, Vec<usize>) {
    let (train, _) = synthetic(n, 1, (3, size, size), 0.5, seed).unwrap();
    (train.images, train.labels)
}

fn params_of(net: &mut Network<f32>) -> Vec<Vec<f32>> {
    net.params().into_iter().map(|p| p.value.to_vec()).collect()
}

fn trainer(model: ModelName, schedule: Schedule, seed: u64) -> Trainer<f32> {
    let net = build_model(model, (3, 8, 8), 10, seed).unwrap();
    Trainer::new(net, schedule, MethodParams::for_batch(16), AdamConfig::default(), seed).unwrap()
}

#[test]
fn full_schedule_step_matches_exact_reference() {
    let (x, y) = batch(16, 8, 3);
    let mut reference = build_model::<f32>(ModelName::Cnn2, (3, 8, 8), 10, 11).unwrap();
    let mut t = trainer(ModelName::Cnn2, Schedule::full(2, 1).unwrap(), 11);

    let logits = reference.forward(x.clone(), true).unwrap();
    let (loss, d) = softmax_cross_entropy(&logits, &y).unwrap();
    reference.backward(d, &mut BackwardCtx::exact()).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(reference.params(), 0).unwrap();

    let stats = t.train_step(x, &y, 0, 0).unwrap();
    assert_eq!(stats.loss, loss);
    assert_eq!(params_of(&mut t.net), params_of(&mut reference));
    assert!(stats.records.iter().all(|r| r.applied == MethodKind::Full));
}

#[test]
fn zero_method_freezes_only_its_layer() {
    let mut s = Schedule::full(2, 1).unwrap();
    s.set(1, 0, MethodKind::Zero).unwrap();
    let mut t = trainer(ModelName::Cnn2, s, 4);
    let conv0 = t.net.conv_weight(0).unwrap();
    let conv1 = t.net.conv_weight(1).unwrap();
    for step in 0..5 {
        let (x, y) = batch(16, 8, 100 + step);
        t.train_step(x, &y, step, 0).unwrap();
    }
    assert_eq!(t.net.conv_weight(1).unwrap(), conv1);
    assert_ne!(t.net.conv_weight(0).unwrap(), conv0);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let (x, y) = batch(32, 8, 9);
    let net = build_model(ModelName::Cnn2, (3, 8, 8), 10, 2).unwrap();
    let mut t = Trainer::new(net, Schedule::full(2, 1).unwrap(), MethodParams::for_batch(32), AdamConfig::default(), 2)
        .unwrap();
    let first = t.train_step(x.clone(), &y, 0, 0).unwrap().loss;
    let mut last = first;
    for step in 1..50 {
        last = t.train_step(x.clone(), &y, step, 0).unwrap().loss;
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn routing_follows_the_schedule_grid() {
    let s = Schedule::builtin(Builtin::Schedule2, 13, MethodKind::Zero).unwrap();
    let mut t = trainer(ModelName::Resnet14, s.clone(), 6);
    let mut counts = vec![[0usize; 2]; 13];
    for step in 0..4u64 {
        let (x, y) = batch(8, 8, step);
        let stats = t.train_step(x, &y, step, 0).unwrap();
        assert_eq!(stats.records.len(), 13);
        for r in &stats.records {
            assert_eq!(r.requested, s.method_for(r.layer, step).unwrap());
            if r.requested == MethodKind::Zero {
                counts[r.layer][(step % 2) as usize] += 1;
            }
        }
    }
    for (layer, c) in counts.iter().enumerate() {
        let want = if layer % 2 == 1 { [0, 2] } else { [0, 0] };
        assert_eq!(*c, want, "layer {layer}");
    }
}

#[test]
fn topk_falls_back_on_strided_layers() {
    let s = Schedule::builtin(Builtin::Schedule1, 19, MethodKind::TopK).unwrap();
    let mut t = trainer(ModelName::Resnet20, s, 1);
    let (x, y) = batch(4, 8, 0);
    let stats = t.train_step(x, &y, 0, 0).unwrap();
    for r in stats.records.iter().filter(|r| r.requested == MethodKind::TopK) {
        let want = if r.layer == 13 { MethodKind::Full } else { MethodKind::TopK };
        assert_eq!(r.applied, want, "layer {}", r.layer);
    }
}

#[test]
fn same_seed_same_losses() {
    let run = || {
        let s = Schedule::builtin(Builtin::Schedule3, 2, MethodKind::Random).unwrap();
        let mut t = trainer(ModelName::Cnn2, s, 8);
        (0..6u64)
            .map(|step| {
                let (x, y) = batch(16, 8, step);
                t.train_step(x, &y, step, 0).unwrap().loss
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
