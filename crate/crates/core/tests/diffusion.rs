use aerobatch::dataset::{build_primitive, stream_rng, ActionLabel, DatasetSpec, Primitive};
use aerobatch::diffusion::model::DenoiserModel;
use aerobatch::diffusion::train::{loss_tensor, training_batch};
use aerobatch::diffusion::{make_schedule, train, ModelConfig, Normalizer, ScheduleParams, TrainConfig};
use aerobatch::Vec3;
use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prims(n: usize) -> Vec<Primitive> {
    let spec = DatasetSpec::default();
    (0..n)
        .map(|i| {
            let a = ActionLabel::MANEUVERS[i % 5];
            let mut rng = stream_rng(3, i as u64);
            let off = Vec3::new(3.0 + (i % 4) as f64, (i as f64) - 3.0, 0.0);
            build_primitive(a, &off, &spec, &mut rng).unwrap()
        })
        .collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn loss_gradients_match_central_differences() {
    let data = prims(4);
    let cfg = TrainConfig {
        batch_size: 3,
        model: ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = DenoiserModel::new(&cfg.model, DType::F64).unwrap();
    let norm = Normalizer::fit(&data);
    let sched = make_schedule(&ScheduleParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (inp, x0) = training_batch(&data, &norm, &sched, &cfg, &mut rng, DType::F64).unwrap();
    let loss = |m: &DenoiserModel| scalar(&loss_tensor(&m.forward(&inp).unwrap(), &x0, 1.0).unwrap().0);
    let total = loss_tensor(&model.forward(&inp).unwrap(), &x0, 1.0).unwrap().0;
    let grads = total.backward().unwrap();
    let h = 1e-5;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (name, var) in model.store.named() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("{name} has no gradient"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().shape().clone();
        // a few spread-out entries per tensor keeps the check under a minute
        let picks: Vec<usize> = (0..3).map(|k| (k * 7919 + 13) % base.len()).collect();
        for &i in &picks {
            let mut w = base.clone();
            w[i] = base[i] + h;
            var.set(&Tensor::from_vec(w.clone(), &shape, var.device()).unwrap()).unwrap();
            let up = loss(&model);
            w[i] = base[i] - h;
            var.set(&Tensor::from_vec(w, &shape, var.device()).unwrap()).unwrap();
            let dn = loss(&model);
            var.set(&Tensor::from_vec(base.clone(), &shape, var.device()).unwrap()).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale < 1e-6 {
                continue;
            }
            let rel = (fd - g[i]).abs() / scale;
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {} vs numeric {fd} (rel {rel:.2e})", g[i]);
            checked += 1;
        }
    }
    assert!(checked > 40, "only {checked} entries had a measurable gradient");
    println!("checked {checked} weights, worst relative error {worst:.2e}");
}

#[test]
fn overfits_eight_primitives() {
    let data = prims(8);
    let cfg = TrainConfig {
        batch_size: 8,
        steps: 2000,
        model: ModelConfig {
            d_model: 32,
            layers: 1,
            heads: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let tm = train(&data, &cfg).unwrap();
    let mean = |r: &[aerobatch::diffusion::LossRecord]| r.iter().map(|l| l.recon).sum::<f64>() / r.len() as f64;
    let initial = mean(&tm.losses[..10]);
    let fin = mean(&tm.losses[tm.losses.len() - 100..]);
    println!("recon {initial:.4} -> {fin:.4}");
    assert!(fin <= 0.1 * initial, "recon {initial} -> {fin}");
}
