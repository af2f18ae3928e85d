use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dap_core::armodel::layout::modality_at;
use dap_core::armodel::{generate, DecodeMode, Model, ModelConfig, TokenSequence};
use dap_core::simworld::episode::{episode_seed, SimConfig};
use dap_core::simworld::eval::{
    closed_loop_eval, ClosedLoopConfig, DrivingPolicy, Observation, PolicyOutput,
};
use dap_core::simworld::Scene;
use dap_core::tokenize::{KaGridConfig, VocabLayout};
use dap_core::Result;

/// Uniform tokens over a range wider than the grid, so some are invalid.
struct RandomTokens(ChaCha8Rng);

impl DrivingPolicy for RandomTokens {
    fn act(&mut self, _: &Observation) -> Result<PolicyOutput> {
        Ok(PolicyOutput::Token(self.0.gen_range(0..1200)))
    }
    fn needs_bev(&self) -> bool {
        false
    }
}

#[test]
fn subscores_stay_in_unit_range_over_ten_thousand_random_rollouts() {
    let cfg = SimConfig::default();
    let scenes: Vec<Scene> = (0..10_000)
        .map(|i| cfg.scene(episode_seed(99, i)))
        .collect();
    let make = |s: &Scene| -> Result<Box<dyn DrivingPolicy + Send>> {
        Ok(Box::new(RandomTokens(ChaCha8Rng::seed_from_u64(s.seed))))
    };
    let cl = ClosedLoopConfig {
        warmup: 3,
        horizon: 20,
    };
    let (results, agg) =
        closed_loop_eval(make, &scenes, &cfg, &KaGridConfig::fb_ka_a(), &cl).unwrap();
    assert_eq!(results.len(), 10_000);
    for r in &results {
        for v in [r.nc, r.dac, r.ttc, r.c, r.ep, r.pdms] {
            assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
    }
    for v in [agg.nc, agg.dac, agg.ttc, agg.c, agg.ep, agg.pdms] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(agg.invalid_tokens > 0);
}

#[test]
fn sampled_tokens_stay_in_their_modality_over_ten_thousand_frames() {
    let c = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        n_experts: 2,
        top_k: 1,
        ffn_mult: 2,
        moe_every: 1,
        vocab: VocabLayout::new(4, 16, 40).unwrap(),
        history: 2,
        bev_tokens_per_frame: 3,
        max_seq_len: 13,
        init_std: 0.5,
    };
    let model = Model::init(c.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut frames = 0;
    for seed in 0..100 {
        let tokens = (0..5)
            .map(|p| rng.gen_range(c.vocab.range(modality_at(p, 3))) as u32)
            .collect();
        let ctx = TokenSequence {
            tokens,
            bev_per_frame: 3,
        };
        for f in generate(
            &model,
            &ctx,
            100,
            DecodeMode::Sample {
                temperature: 3.0,
                seed,
            },
        )
        .unwrap()
        {
            assert_eq!(f.bev.len(), 3);
            assert!(f.bev.iter().all(|&b| (b as usize) < c.vocab.n_bev));
            assert!(f.traj.index() < c.vocab.n_traj);
            frames += 1;
        }
    }
    assert_eq!(frames, 10_000);
}
