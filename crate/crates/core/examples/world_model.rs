//! Fits an object-centric world model alone and inspects what it learned:
//! loss components, decoded object positions and the position encoder.
//!
//! cargo run --release --example world_model -- [steps]

use diffcore::{adam_step, AdamConfig, Graph, OptimState, SampleMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmlab::envsim::{EnvConfig, Task};
use wmlab::harness::{collect_dataset, Explorer};
use wmlab::worldmodel::{LossScales, ObjectId, Variant, WmConfig, WorldModel};

fn main() -> wmlab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let env = EnvConfig { task: Task::CubeMove2D, ..Default::default() };
    let data = collect_dataset(&env, Explorer::Scripted, 10_000, 1)?;

    let cfg = WmConfig { variant: Variant::ObjectCentric, image_size: env.image_size, hidden_dim: 64, ..Default::default() };
    let mut model = WorldModel::<f32>::new(cfg, 0)?;
    let mut opt = OptimState::new(&model.store, AdamConfig { lr: 6e-4, ..Default::default() });
    let scales = LossScales::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for step in 0..=steps {
        let batch = data.sample_batch::<f32>(16, 16, &mut rng)?;
        let mut g = Graph::new();
        let vars = model.loss_g(&mut g, &batch, &scales, SampleMode::Sample, &mut rng)?;
        let grads = g.backward(vars.total)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        adam_step(&mut model.store, &mut opt)?;
        if step % 250 == 0 {
            let l = vars.breakdown(&g);
            println!(
                "step {step:>5}  total {:>8.3}  dyn {:.3}  mask {:.3}  rgb {:.3}  pos {:.3}  L_pos {:.3}",
                l.total, l.dyn_, l.obj_mask, l.obj_rgb, l.obj_pos, l.pos_encoder
            );
        }
    }

    let batch = data.sample_batch::<f32>(4, 16, &mut rng)?;
    let states = model.observe(&batch, SampleMode::Mode, &mut rng)?;
    let latents = model.object_extract(&states, ObjectId::Object)?;
    let (_, _, pos) = model.object_decode(&latents)?;
    let truth: Vec<f32> = (0..states.rows()).flat_map(|r| batch.vectors.row_slice(r)[2..4].to_vec()).collect();
    let truth = Tensor::from_vec(&[states.rows(), 2], truth)?;
    let encoded = model.latent_pos_encode(&truth)?;
    for r in (0..states.rows()).step_by(16) {
        let (p, t) = (pos.row_slice(r), truth.row_slice(r));
        println!("cube at ({:+.3}, {:+.3}), decoded ({:+.3}, {:+.3}), encoder cosine {:.3}",
            t[0], t[1], p[0], p[1], cosine(encoded.row_slice(r), latents.row_slice(r)));
    }
    Ok(())
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
}
