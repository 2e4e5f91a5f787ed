use stegflow::img::Image;
use stegflow::trainer::{generate_qr_batch, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = TrainConfig::desk();
    let mut t = Trainer::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hosts: Vec<Image<f32>> = (0..cfg.batch_size)
        .map(|_| Image::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.2..0.8f32)))
        .collect();
    let codes = generate_qr_batch(cfg.batch_size, 5, 2, 64).unwrap();
    let start = std::time::Instant::now();
    let n = 5;
    for i in 0..n {
        let l = t.train_step(&hosts, &codes, 1e-3).unwrap();
        println!("step {i}: total {:.4} in {:?}", l.total, start.elapsed() / (i as u32 + 1));
    }
    println!("avg per step: {:?}", start.elapsed() / n as u32);
}
