use stegflow::autodiff::Tape;
use stegflow::distortion::DistortionSpec;
use stegflow::img::Image;
use stegflow::objectives;
use stegflow::trainer::{generate_qr_batch, TrainConfig};
use stegflow::model::Model;
use stegflow::transition::transition_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::desk();
    let model = Model::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let host = Image::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.2..0.8f32));
    let code = generate_qr_batch(1, 5, 2, 64).unwrap().remove(0);
    let _ = DistortionSpec::none();

    for trial in 0..3 {
        let tape = Tape::<f32>::new();
        let t0 = Instant::now();
        let host_t = tape.leaf(host.clone().into_dyn());
        let code_t = tape.leaf(code.image.clone().into_dyn());
        let code_star = model.transition.forward(&tape, &model.store, code_t, host_t).unwrap();
        let t1 = Instant::now();
        let (stego, _r) = model.flow.conceal(&tape, &model.store, host_t, code_star).unwrap();
        let t2 = Instant::now();
        let chan = stego.clamp01();
        let revealed = model.flow.reveal(&tape, &model.store, chan, 7).unwrap();
        let t3 = Instant::now();
        let restored = model.transition.inverse(&tape, &model.store, revealed, chan).unwrap();
        let t4 = Instant::now();
        let terms = objectives::LossTerms {
            stego_l1: objectives::l1_loss(host_t, stego),
            stego_ssim: objectives::ssim_loss(host_t, stego),
            stego_perceptual: objectives::lpips_tensor(&model.perceptual, host_t, stego),
            code_l1: objectives::qr_loss(restored, code_t),
            transition: transition_loss(&tape, code_star, &code.matrix, 5, 0.02),
        };
        let total = objectives::total_loss(&terms, &cfg.loss_weights);
        let t5 = Instant::now();
        let mut grads = tape.backward(total);
        let t6 = Instant::now();
        let _ = tape.watched_grads(&mut grads);
        let t7 = Instant::now();
        if trial == 2 {
            println!("transition_fwd {:?}", t1 - t0);
            println!("conceal        {:?}", t2 - t1);
            println!("reveal         {:?}", t3 - t2);
            println!("transition_inv {:?}", t4 - t3);
            println!("losses         {:?}", t5 - t4);
            println!("backward       {:?}", t6 - t5);
            println!("collect        {:?}", t7 - t6);
            println!("TOTAL          {:?}", t7 - t0);
        }
    }
}
