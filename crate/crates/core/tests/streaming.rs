use std::sync::Arc;

use cvd_core::model::{predict, Attend, BlockCausalMask, ChunkLayout, ModelConfig, ModelWeights};
use cvd_core::optim::{AdamW, AdamWConfig};
use cvd_core::schedule::NoiseSchedule;
use cvd_core::stream::{GenerationSession, SessionConfig, V2V_TIMESTEP};
use cvd_core::student::{init_objective, STUDENT_TIMESTEPS};
use cvd_core::train::accumulate_grad;
use cvd_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CHUNK: usize = 2;

fn weights(seed: u64) -> ModelWeights<f32> {
    weights_of_width(seed, 16)
}

fn weights_of_width(seed: u64, dim: usize) -> ModelWeights<f32> {
    let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim, depth: 2, heads: 2, ..Default::default() };
    ModelWeights::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(seed), 0.5).unwrap()
}

fn session(w: ModelWeights<f32>, seed: u64) -> GenerationSession<f32> {
    let cfg = SessionConfig { chunk: CHUNK, seed, window_chunks: 5, ..Default::default() };
    GenerationSession::new(Arc::new(w), NoiseSchedule::cosine(1000).unwrap(), cfg).unwrap()
}

/// Regenerates every chunk by running the whole prefix through the masked
/// network, with no cache.
fn full_recompute(w: &ModelWeights<f32>, seed: u64, chunks: usize, cond: usize) -> Vec<Tensor<f32>> {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let tpf = w.config().tokens_per_frame();
    let mut done: Vec<Tensor<f32>> = Vec::new();
    for i in 0..chunks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let shape = [CHUNK, 8, 8, 1];
        let mut x = Tensor::<f32>::randn(&shape, &mut rng);
        let frames = (i + 1) * CHUNK;
        let mask = BlockCausalMask::build(ChunkLayout::new(frames, CHUNK).unwrap()).token_mask(tpf);
        let mut x0 = x.clone();
        for (j, &t) in STUDENT_TIMESTEPS.iter().enumerate() {
            let mut parts: Vec<&Tensor<f32>> = done.iter().collect();
            parts.push(&x);
            let clip = Tensor::concat_rows(&parts).unwrap();
            let mut frame_t = vec![0; i * CHUNK];
            frame_t.extend([t; CHUNK]);
            let out = predict(w, &clip, &frame_t, cond, &Attend::Masked(mask.clone())).unwrap();
            x0 = out.slice_rows(i * CHUNK, frames).unwrap();
            if let Some(&next) = STUDENT_TIMESTEPS.get(j + 1) {
                let eps = Tensor::<f32>::randn(&shape, &mut rng);
                x = s.forward_diffuse(&x0, next, &eps).unwrap();
            }
        }
        done.push(x0);
    }
    done
}

#[test]
fn cached_stream_matches_full_recompute() {
    let w = weights(21);
    let reference = full_recompute(&w, 5, 5, 2);
    let mut s = session(w, 5);
    s.set_condition(2).unwrap();
    for (i, want) in reference.iter().enumerate() {
        let got = s.generate_chunk().unwrap();
        let err = got.frames.max_abs_diff(want).unwrap();
        assert!(err < 1e-4, "chunk {i}: max abs diff {err}");
    }
    assert_eq!(s.rebases(), 0);
}

#[test]
fn first_chunk_ignores_the_empty_cache() {
    let w = weights(22);
    let reference = full_recompute(&w, 9, 1, 0);
    let mut s = session(w, 9);
    let got = s.generate_chunk().unwrap();
    assert!(got.frames.max_abs_diff(&reference[0]).unwrap() < 1e-5);
}

#[test]
fn committed_chunks_are_unchanged_by_later_generation() {
    let mut s = session(weights(23), 3);
    let first = s.generate_chunk().unwrap();
    let layer0 = s.cache().layer(0).unwrap().0.clone();
    let rows = layer0.rows();
    for _ in 0..3 {
        s.generate_chunk().unwrap();
    }
    assert_eq!(s.cache().layer(0).unwrap().0.slice_rows(0, rows).unwrap(), layer0);
    let mut again = session(weights(23), 3);
    assert_eq!(again.generate_chunk().unwrap().frames, first.frames);
}

#[test]
fn image_conditioning_copies_the_image_and_steers_the_next_chunk() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = Tensor::<f32>::randn(&[8, 8, 1], &mut rng).map(|v| v.clamp(-1.0, 1.0));
    let mut s = session(weights(24), 1);
    let out = s.image_to_video(&image, 1, 2).unwrap();
    for f in 0..CHUNK {
        assert_eq!(out[0].frames.slice_rows(f, f + 1).unwrap().data(), image.data());
    }

    let other = image.map(|v| -v);
    let mut s2 = session(weights(24), 1);
    let out2 = s2.image_to_video(&other, 1, 2).unwrap();
    assert!(out[1].frames.max_abs_diff(&out2[1].frames).unwrap() > 1e-4);
}

#[test]
fn noiseless_translation_with_an_identity_student_returns_the_input() {
    let s = NoiseSchedule::cosine(1000).unwrap();
    let a = s.alpha(V2V_TIMESTEP) as f32;
    let mut w = weights_of_width(25, 48);
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() }, w.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..800 {
        let clean = Tensor::<f32>::randn(&[CHUNK, 8, 8, 1], &mut rng).map(|v| (v * 0.5).clamp(-1.0, 1.0));
        let x = clean.map(|v| a * v);
        let mut grads = w.zeros_like();
        let frame_t = [V2V_TIMESTEP; CHUNK];
        accumulate_grad(&w, &mut grads, |g, vars| init_objective(g, vars, &w, &x, &frame_t, 0, CHUNK, &clean)).unwrap();
        opt.step(w.tensors_mut(), &grads);
    }

    let input = Tensor::<f32>::randn(&[CHUNK, 8, 8, 1], &mut rng).map(|v| (v * 0.5).clamp(-1.0, 1.0));
    let mut sess = session(w, 2);
    sess.sigma_zero = true;
    let out = sess.video_to_video_chunk(&input, 0).unwrap();
    let mae = out.frames.zip_map(&input, |p, q| (p - q).abs()).unwrap().mean();
    assert!(mae < 0.1, "mean abs error {mae}");
    assert_eq!(sess.timings()[0].forward_passes, 2);
}
