use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batch, prepare_samples};
use super::config::{DetectorConfig, FusionConfig, Variant};
use super::model::{BoundDetector, Detector};
use super::train::{build_objective, compute_step, init_model, objective_value};
use crate::data::{synth_generate, SynthConfig};
use crate::enhance::EnhanceConfig;
use crate::error::Result;
use crate::fusion::{build_masks, cross_attention_graph, fuse_graph, BoundCrossAttention, ConfidencePair, CrossAttentionParams};
use crate::losses::{focal_loss_graph, regression_loss_graph, LossConfig, PredictionNodes};
use crate::tensor::{finite_diff_check, finite_diff_check_many, Graph, Tensor};

pub const FD_STEP: f64 = 1e-4;
/// Steps tried by the sampled parameter check, coarse to fine.
const KINK_STEPS: [f64; 3] = [FD_STEP, 1e-5, 1e-6];
const KINK_TOLERANCE: f64 = 1e-4;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Kernels covered by [`gradient_suite`].
pub const SUITE: [&str; 5] = ["focal_loss", "obb_regression_loss", "cross_attention", "fuse", "micro_model"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Runs every kernel check on one seeded input.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |op, e| out.push(GradReport { op, seed, max_rel_error: e });

    let p = Tensor::rand_uniform([2, 3, 2, 2], 0.05, 0.95, &mut rng);
    let t = Tensor::from_fn([2, 3, 2, 2], |_| rng.random_range(0..2) as f64);
    push(
        SUITE[0],
        finite_diff_check(
            |g, x| {
                let f = focal_loss_graph(g, x, &t, 2.0)?;
                Ok(g.sum(f))
            },
            &p,
            FD_STEP,
        )?,
    );

    let maps = |rng: &mut ChaCha8Rng| {
        [
            Tensor::rand_uniform([1, 4, 2, 3], 0.5, 6.0, rng),
            Tensor::rand_uniform([1, 4, 2, 3], 0.05, 0.95, rng),
            Tensor::rand_uniform([1, 1, 2, 3], 0.3, 1.0, rng),
        ]
    };
    let [gl, gs, gr] = maps(&mut rng);
    push(
        SUITE[1],
        finite_diff_check_many(
            |g, ids| {
                let cls = g.constant(Tensor::zeros([1, 1, 2, 3]));
                let pred = PredictionNodes { cls, l: ids[0], s: ids[1], r: ids[2] };
                let m = regression_loss_graph(g, &pred, &gl, &gs, &gr)?;
                Ok(g.sum(m))
            },
            &maps(&mut rng),
            FD_STEP,
            None,
        )?,
    );

    let attn = CrossAttentionParams::init(2, 2, 2, &mut rng);
    let xs = [
        Tensor::randn([1, 2, 2, 4], 1.0, &mut rng),
        Tensor::randn([1, 2, 2, 4], 1.0, &mut rng),
        attn.g1.weights.clone(),
        attn.g2.weights.clone(),
        attn.g3.weights.clone(),
    ];
    push(
        SUITE[2],
        finite_diff_check_many(
            |g, ids| {
                let mut b = BoundCrossAttention::bind(g, &attn, false);
                b.g1.weights = ids[2];
                b.g2.weights = ids[3];
                b.g3.weights = ids[4];
                let out = cross_attention_graph(g, ids[0], ids[1], &b)?;
                Ok(g.sum(out.z_mix))
            },
            &xs,
            FD_STEP,
            None,
        )?,
    );

    let conf = ConfidencePair::new(
        Tensor::rand_uniform([1, 1, 3, 3], 0.01, 0.99, &mut rng),
        Tensor::rand_uniform([1, 1, 3, 3], 0.01, 0.99, &mut rng),
        0.4,
    )?;
    let masks = build_masks(&conf);
    let xs = [
        Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
        Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
        Tensor::randn([1, 2, 3, 3], 1.0, &mut rng),
        conf.conf_rgb.clone(),
        conf.conf_h.clone(),
    ];
    push(
        SUITE[3],
        finite_diff_check_many(
            |g, ids| {
                let z = fuse_graph(g, ids[0], ids[1], ids[2], &masks, ids[3], ids[4])?;
                let sq = g.mul(z, z)?;
                Ok(g.sum(sq))
            },
            &xs,
            FD_STEP,
            None,
        )?,
    );

    push(SUITE[4], micro_model_gradcheck(seed, 50)?);
    Ok(out)
}

/// Compares `grads` with central differences of `f` at `coords` parameter
/// entries drawn uniformly over all scalars. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn sampled_param_check(
    model: &Detector,
    grads: &[Tensor],
    coords: usize,
    seed: u64,
    mut f: impl FnMut(&Detector) -> f64,
) -> f64 {
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..coords {
        let mut k = rng.random_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let orig = model.params()[p].1.data()[k];
        let mut eval_at = |x: f64| {
            probe.params_mut()[p].data_mut()[k] = x;
            f(&probe)
        };
        let center = eval_at(orig);
        // A leaky-ReLU or min/max kink inside the step shows up as one-sided
        // slopes that disagree; shrink the step until they agree.
        let mut numeric = f64::NAN;
        for h in KINK_STEPS {
            let (up, down) = (eval_at(orig + h), eval_at(orig - h));
            numeric = (up - down) / (2.0 * h);
            let (fwd, bwd) = ((up - center) / h, (center - down) / h);
            if (fwd - bwd).abs() <= KINK_TOLERANCE * fwd.abs().max(bwd.abs()).max(1.0) {
                break;
            }
        }
        probe.params_mut()[p].data_mut()[k] = orig;
        let analytic = grads[p].data()[k];
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}

/// End-to-end check on a multimodal micro-model over two 16x16 synthetic
/// tiles. Masks are pinned from the unperturbed pass so threshold flips do
/// not show up as gradient errors.
pub fn micro_model_gradcheck(seed: u64, coords: usize) -> Result<f64> {
    let cfg = DetectorConfig {
        rgb_blocks: vec![[4, 2], [8, 2]],
        h_blocks: vec![[4, 2], [8, 2]],
        variant: Variant::Multimodal,
        seed,
        ..DetectorConfig::default()
    };
    let enh = EnhanceConfig::default();
    let synth = SynthConfig {
        width: 16,
        height: 16,
        vehicles: [1, 2],
        vehicle_length: [6.0, 9.0],
        vehicle_width: [3.0, 4.0],
        seed,
        ..SynthConfig::default()
    };
    let data = prepare_samples(&synth_generate(&synth, 2, "g")?.0, &enh, Variant::Multimodal)?;
    let model = init_model(&cfg, &FusionConfig::default(), &enh)?;
    let batch = make_batch(&[&data[0], &data[1]], &[(false, false), (true, false)])?;
    let loss = LossConfig::default();
    let masks = {
        let mut g = Graph::new();
        let bound = BoundDetector::bind(&mut g, &model, false);
        build_objective(&model, &mut g, &bound, &batch, &loss, None)?.forward.masks
    };
    let step = compute_step(&model, &batch, &loss, Some(&masks))?;
    let mut failure = None;
    let err = sampled_param_check(&model, &step.grads, coords, seed, |m| {
        objective_value(m, &batch, &loss, Some(&masks)).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_a_seed() {
        let r = gradient_suite(1).unwrap();
        assert_eq!(r.iter().map(|g| g.op).collect::<Vec<_>>(), SUITE.to_vec());
        assert!(r.iter().all(GradReport::passed), "{r:?}");
    }
}
