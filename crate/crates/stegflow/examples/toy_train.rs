use stegflow::model::derive_seed;
use stegflow::qr;
use stegflow::trainer::{generate_qr_batch, lr_schedule, synth_host_images, HostDataset, TrainConfig, Trainer};

fn main() {
    let iterations: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let dir = std::path::PathBuf::from("/tmp/toy_train");
    let _ = std::fs::remove_dir_all(&dir);
    synth_host_images(&dir.join("hosts"), 32, 64, 7).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.iterations = iterations;
    let ds = HostDataset::load(&dir.join("hosts"), 64).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    let eval_codes = generate_qr_batch(8, 5, derive_seed(cfg.seed, &[0xEE]), 64).unwrap();
    let eval_hosts = ds.batch(derive_seed(cfg.seed, &[0xEF]), 8, 9999);
    let start = std::time::Instant::now();
    while t.iteration < cfg.iterations {
        let it = t.iteration;
        let hosts = ds.batch(cfg.seed, cfg.batch_size, it);
        let codes = generate_qr_batch(cfg.batch_size, cfg.qr_version, derive_seed(cfg.seed, &[0x9C0D, it]), cfg.image_side).unwrap();
        let lr = lr_schedule(&cfg, ds.epoch_of(it, cfg.batch_size));
        let l = t.train_step(&hosts, &codes, lr).unwrap();
        if it % 10 == 0 {
            println!("it {it} lr {lr:.2e} total {:.4} l1 {:.4} ssim {:.4} perc {:.4} code {:.4} trans {:.5} [{:?}]",
                l.total, l.stego_l1, l.stego_ssim, l.stego_perceptual, l.code_l1, l.transition, start.elapsed());
        }
        if it % 50 == 49 || it + 1 == cfg.iterations {
            let mut flags = Vec::new();
            let mut psnrs = Vec::new();
            let mut emrs = Vec::new();
            for (h, c) in eval_hosts.iter().zip(eval_codes.iter()) {
                let stego = t.model.embed(h, &c.matrix).unwrap();
                psnrs.push(stegflow::objectives::psnr(h, &stego));
                let restored = t.model.extract(&stego, 31337).unwrap();
                let msg = t.model.decode_code_image(&restored).unwrap();
                let grid = t.model.scan_code_image(&restored).unwrap();
                emrs.push(qr::emr(&grid, c.matrix.grid()));
                flags.push(msg.as_deref() == Some(c.message.as_bytes()));
            }
            println!("== it {} TRA {:.2} mean-PSNR {:.2} mean-EMR {:.2}% flags {:?}",
                it, qr::tra(&flags),
                psnrs.iter().sum::<f64>()/psnrs.len() as f64,
                emrs.iter().sum::<f64>()/emrs.len() as f64, flags);
        }
    }
    println!("done in {:?}", start.elapsed());
}
