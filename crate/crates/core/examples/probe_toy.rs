use cordseg::io::toy_slices;
use cordseg::model::{evaluate, train_epoch, AdamW, ModelConfig, SattisUnet, SkipMode, TrainConfig};
use cordseg::tensor::{ParamStore, SeedRng, Tensor};
use std::time::Instant;

fn to_tensor(slices: &[(Vec<f32>, Vec<u8>)], size: usize) -> (Tensor<f32>, Vec<u8>) {
    let mut data = Vec::with_capacity(slices.len() * size * size);
    let mut labels = Vec::with_capacity(slices.len() * size * size);
    for (img, lab) in slices {
        data.extend_from_slice(img);
        labels.extend_from_slice(lab);
    }
    (
        Tensor::new(vec![slices.len(), size, size, 1], data).unwrap(),
        labels,
    )
}

fn main() {
    let size = 64;
    let train = toy_slices(200, size, 11);
    let eval = toy_slices(64, size, 12);
    let (train_x, train_y) = to_tensor(&train, size);
    let (eval_x, eval_y) = to_tensor(&eval, size);

    for mode in [SkipMode::Attentive, SkipMode::Concat] {
        for seed in [1u64, 2, 3] {
            let cfg = ModelConfig {
                in_channels: 1,
                num_classes: 5,
                patch: 4,
                base_dim: 16,
                stage_depths: vec![1, 1],
                heads: vec![2, 4],
                window: 4,
                skip_mode: mode,
                drop_rate: 0.0,
            };
            let tcfg = TrainConfig {
                epochs: 20,
                seed,
                ..TrainConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            let mut init_rng = SeedRng::stream(seed, "model.init");
            let model = SattisUnet::new(&cfg, &mut store, &mut init_rng).unwrap();
            let mut opt = AdamW::new(&tcfg, &store);
            let mut epoch_rng = SeedRng::stream(seed, "train.epochs");
            let t0 = Instant::now();
            for epoch in 1..=tcfg.epochs {
                let loss = train_epoch(
                    &model, &mut store, &mut opt, &train_x, &train_y, &tcfg, &mut epoch_rng,
                )
                .unwrap();
                let rep = evaluate(&model, &store, &eval_x, &eval_y, 8).unwrap();
                println!(
                    "{mode:?} seed {seed} epoch {epoch:>2}: loss {loss:.4} fg-dice {:.4} ({:.0}s)",
                    rep.mean_foreground_dice,
                    t0.elapsed().as_secs_f64()
                );
                if rep.mean_foreground_dice >= 0.97 {
                    break;
                }
            }
        }
    }
}
