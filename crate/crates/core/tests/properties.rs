use std::path::Path;

use cvd_core::data::{Dataset, DatasetConfig};
use cvd_core::model::{BlockCausalMask, ChunkLayout, ModelConfig, ModelWeights};
use cvd_core::ode::{OdePair, OdePairs};
use cvd_core::student::{student_forward, STUDENT_TIMESTEPS};
use cvd_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn block_causal_mask_matches_chunk_arithmetic_exhaustively() {
    for n in 1..=64 {
        for k in [1, 2, 4, 8] {
            let m = BlockCausalMask::build(ChunkLayout::new(n, k).unwrap());
            for i in 0..n {
                let end = ((i / k + 1) * k).min(n);
                for j in 0..n {
                    assert_eq!(m.visible(i, j), j < end, "n={n} k={k} i={i} j={j}");
                }
            }
        }
    }
}

#[test]
fn token_mask_repeats_the_frame_mask() {
    let m = BlockCausalMask::build(ChunkLayout::new(6, 2).unwrap());
    let tm = m.token_mask(3);
    assert_eq!((tm.queries, tm.keys), (18, 18));
    for q in 0..18 {
        for key in 0..18 {
            assert_eq!(tm.visible[q * 18 + key], m.visible(q / 3, key / 3));
        }
    }
}

fn tiny_weights(seed: u64) -> ModelWeights<f32> {
    let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 2, heads: 2, ..Default::default() };
    ModelWeights::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(seed), 0.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn future_chunks_never_reach_earlier_outputs(
        layout in prop::sample::select(vec![(4usize, 1usize), (4, 2), (6, 2), (8, 4)]),
        seed in 0u64..1000,
        pick in 0usize..8,
        delta in -3.0f32..3.0,
        t_shift in 1usize..500,
    ) {
        let (frames, chunk) = layout;
        let w = tiny_weights(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn(&[frames, 8, 8, 1], &mut rng);
        let frame_t: Vec<usize> = (0..frames).map(|f| 999 - 200 * (f / chunk)).collect();
        let base = student_forward(&w, &x, &frame_t, 1, chunk).unwrap();

        let chunks = frames / chunk;
        let target = 1 + pick % (chunks - 1).max(1);
        prop_assume!(target < chunks);
        let mut y = x.clone();
        let frame_len = 64;
        for v in &mut y.data_mut()[target * chunk * frame_len..] {
            *v += delta;
        }
        let mut t2 = frame_t.clone();
        for t in &mut t2[target * chunk..] {
            *t = (*t + t_shift) % 1000;
        }
        let out = student_forward(&w, &y, &t2, 1, chunk).unwrap();
        let cut = target * chunk * frame_len;
        prop_assert_eq!(&base.data()[..cut], &out.data()[..cut]);
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>(), dim in prop::sample::select(vec![8usize, 16]), depth in 1usize..3) {
        let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim, depth, heads: 2, ..Default::default() };
        let w = ModelWeights::<f32>::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(seed), 0.3).unwrap();
        let back = ModelWeights::<f32>::from_bytes(&w.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.config(), w.config());
        prop_assert_eq!(back.names(), w.names());
        prop_assert_eq!(back.tensors(), w.tensors());
    }

    #[test]
    fn truncated_weights_are_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let w = tiny_weights(seed);
        let bytes = w.to_bytes();
        prop_assert!(ModelWeights::<f32>::from_bytes(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), videos in 1usize..6, frames in 1usize..6) {
        let cfg = DatasetConfig { videos, frames, height: 8, width: 8, ..Default::default() };
        let d = Dataset::generate(&cfg, seed).unwrap();
        let bytes = d.to_bytes();
        prop_assert_eq!(&Dataset::from_bytes(&bytes, Path::new("mem")).unwrap(), &d);
        prop_assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn ode_pairs_round_trip(seed in any::<u64>(), count in 0usize..4, frames in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [frames, 4, 4, 1];
        let pairs = (0..count)
            .map(|i| OdePair {
                cond: i % 4,
                states: STUDENT_TIMESTEPS.iter().map(|_| Tensor::randn(&dims, &mut rng)).collect(),
                endpoint: Tensor::randn(&dims, &mut rng),
            })
            .collect();
        let p = OdePairs { timesteps: STUDENT_TIMESTEPS.to_vec(), dims, pairs };
        let bytes = p.to_bytes();
        prop_assert_eq!(&OdePairs::from_bytes(&bytes, Path::new("mem")).unwrap(), &p);
        prop_assert!(OdePairs::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
