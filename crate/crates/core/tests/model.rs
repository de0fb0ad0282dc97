use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstpose_core::autograd::Graph;
use vstpose_core::model::{Ablation, Bound, Ctx, ForwardVars, ModelConfig, Parameters, VelocitySource, VstPose};
use vstpose_core::Tensor;

fn small() -> ModelConfig {
    ModelConfig { frame_shape: [2, 8, 4], ..ModelConfig::tiny() }
}

fn randomize(params: &mut Parameters<f64>, seed: u64) {
    // positional encodings and biases start at zero; give them values so
    // tests do not pass by accident
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs `f` on a fresh graph with the parameters bound as constants.
fn with_ctx<R>(cfg: &ModelConfig, params: &Parameters<f64>, f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, false);
    let mut ctx = Ctx::new(&mut g, cfg, &bound);
    f(&mut ctx)
}

fn run_block(cfg: &ModelConfig, params: &Parameters<f64>, x: &Tensor<f64>, temporal: bool) -> Tensor<f64> {
    with_ctx(cfg, params, |ctx| {
        let v = ctx.g.constant(x.clone());
        let y = if temporal {
            ctx.temporal_block("blocks.0.st.temporal", v).unwrap()
        } else {
            ctx.spatial_block("blocks.0.st.spatial", v).unwrap()
        };
        ctx.g.value(y).clone()
    })
}

fn full_forward(cfg: &ModelConfig, params: &Parameters<f64>, x: &Tensor<f64>) -> (ForwardVars, Graph<f64>) {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, params, false);
    let v = g.constant(x.clone());
    let out = Ctx::new(&mut g, cfg, &bound).forward(v).unwrap();
    (out, g)
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

#[test]
fn spatial_block_is_shared_across_time() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 1).unwrap();
    randomize(&mut p, 2);
    let slice = random_input(&[1, 1, 4, 8], 3);
    let x = Tensor::stack(&[&slice.index_axis0(0).index_axis0(0), &slice.index_axis0(0).index_axis0(0)])
        .unwrap()
        .reshape(&[1, 2, 4, 8])
        .unwrap();
    let y = run_block(&cfg, &p, &x, false);
    assert_eq!(y.index_axis0(0).index_axis0(0), y.index_axis0(0).index_axis0(1));
}

#[test]
fn temporal_block_keeps_constant_sequences_constant() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 4).unwrap();
    randomize(&mut p, 5);
    let frame = random_input(&[4, 8], 6);
    let x = Tensor::stack(&[&frame, &frame, &frame]).unwrap().reshape(&[1, 3, 4, 8]).unwrap();
    let y = run_block(&cfg, &p, &x, true).index_axis0(0);
    assert_close(&y.index_axis0(0), &y.index_axis0(1), 1e-12);
    assert_close(&y.index_axis0(0), &y.index_axis0(2), 1e-12);
}

#[test]
fn temporal_block_is_permutation_equivariant() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 7).unwrap();
    randomize(&mut p, 8);
    let x = random_input(&[1, 3, 4, 8], 9);
    let perm = [2, 0, 1];
    let permute = |t: &Tensor<f64>| {
        let inner = t.index_axis0(0);
        let rows: Vec<Tensor<f64>> = perm.iter().map(|&i| inner.index_axis0(i)).collect();
        Tensor::stack(&rows.iter().collect::<Vec<_>>()).unwrap().reshape(&[1, 3, 4, 8]).unwrap()
    };
    let y = run_block(&cfg, &p, &x, true);
    let y_of_perm = run_block(&cfg, &p, &permute(&x), true);
    assert_close(&y_of_perm, &permute(&y), 1e-12);
}

#[test]
fn encoder_works_frame_by_frame() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 10).unwrap();
    randomize(&mut p, 11);
    let a = random_input(&[2, 8, 4], 12);
    let b = random_input(&[2, 8, 4], 13);
    let encode = |frames: [&Tensor<f64>; 3]| {
        let x = Tensor::stack(&frames).unwrap().reshape(&[1, 3, 2, 8, 4]).unwrap();
        with_ctx(&cfg, &p, |ctx| {
            let v = ctx.g.constant(x);
            let e = ctx.encode(v).unwrap();
            ctx.g.value(e).index_axis0(0)
        })
    };
    let dup = encode([&a, &a, &b]);
    assert_eq!(dup.index_axis0(0), dup.index_axis0(1));
    let swapped = encode([&b, &a, &a]);
    assert_eq!(swapped.index_axis0(0), dup.index_axis0(2));
    assert_eq!(swapped.index_axis0(1), dup.index_axis0(0));
}

#[test]
fn keypoint_head_is_shared_across_time() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 14).unwrap();
    randomize(&mut p, 15);
    let frame = random_input(&[4, 8], 16);
    let f = Tensor::stack(&[&frame, &frame, &frame]).unwrap().reshape(&[1, 3, 4, 8]).unwrap();
    let k = with_ctx(&cfg, &p, |ctx| {
        let v = ctx.g.constant(f.clone());
        let (k, _) = ctx.decode(v, Some(v)).unwrap();
        ctx.g.value(k).index_axis0(0)
    });
    assert_eq!(k.index_axis0(0), k.index_axis0(1));
    assert_eq!(k.index_axis0(1), k.index_axis0(2));
}

#[test]
fn default_config_output_shapes() {
    let model = VstPose::<f32>::new(ModelConfig { depth: 1, ..ModelConfig::default() }, 0).unwrap();
    let x = Tensor::from_fn(&[3, 3, 90, 5], |i| ((i % 13) as f32 - 6.0) * 0.1);
    let out = model.forward(&x).unwrap();
    assert_eq!(out.keypoints.shape(), &[1, 3, 17, 2]);
    assert_eq!(out.velocity.shape(), &[1, 17, 2]);
    assert!(out.keypoints.is_finite() && out.velocity.is_finite());
    assert_eq!(model.forward(&x).unwrap(), out);
}

#[test]
fn batched_forward_matches_single_windows() {
    let model = VstPose::<f32>::new(small(), 17).unwrap();
    let windows: Vec<Tensor<f32>> = (0..4).map(|s| random_input(&[3, 2, 8, 4], 100 + s).cast()).collect();
    let batch = Tensor::stack(&windows.iter().collect::<Vec<_>>()).unwrap();
    let together = model.forward(&batch).unwrap();
    for (b, w) in windows.iter().enumerate() {
        let alone = model.forward(w).unwrap();
        assert!(together.keypoints.index_axis0(b).max_abs_diff(&alone.keypoints.index_axis0(0)) < 1e-5);
        assert!(together.velocity.index_axis0(b).max_abs_diff(&alone.velocity.index_axis0(0)) < 1e-5);
    }
}

#[test]
fn probabilities_are_normalized() {
    let cfg = ModelConfig { depth: 2, ..small() };
    let mut p = Parameters::init(&cfg, 18).unwrap();
    randomize(&mut p, 19);
    let (out, g) = full_forward(&cfg, &p, &random_input(&[2, 3, 2, 8, 4], 20));
    assert_eq!(out.attention.len(), 2 * 4 + 1);
    for a in &out.attention {
        let t = g.value(*a);
        let l = *t.shape().last().unwrap();
        for row in t.data().chunks(l) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    for blk in &out.blocks {
        let w = g.value(blk.weights);
        for pair in w.data().chunks(2) {
            assert!(pair.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-7);
        }
    }
}

#[test]
fn velocity_fusion_off_passes_last_block_through() {
    let cfg = ModelConfig { ablation: Ablation { velocity_fusion: false, ..Ablation::default() }, ..small() };
    let p = Parameters::init(&cfg, 21).unwrap();
    let (out, g) = full_forward(&cfg, &p, &random_input(&[1, 3, 2, 8, 4], 22));
    assert_eq!(g.value(out.f_k), g.value(out.f_n));
    assert!(out.f_v.is_some());
}

#[test]
fn late_fusion_adds_half_the_velocity_feature() {
    let cfg = small();
    let mut p = Parameters::init(&cfg, 23).unwrap();
    randomize(&mut p, 24);
    let (out, g) = full_forward(&cfg, &p, &random_input(&[1, 3, 2, 8, 4], 25));
    let expect = g.value(out.f_n).zip_map(g.value(out.f_v.unwrap()), |n, v| n + 0.5 * v).unwrap();
    assert_close(g.value(out.f_k), &expect, 1e-15);
}

#[test]
fn velocity_source_selects_branch() {
    for (source, pick) in [
        (VelocitySource::Ts, 0),
        (VelocitySource::St, 1),
        (VelocitySource::TsSt, 2),
    ] {
        let cfg = ModelConfig { ablation: Ablation { velocity_source: source, ..Ablation::default() }, ..small() };
        let mut p = Parameters::init(&cfg, 26).unwrap();
        randomize(&mut p, 27);
        let (out, g) = full_forward(&cfg, &p, &random_input(&[1, 3, 2, 8, 4], 28));
        let b = &out.blocks[0];
        let (st, ts) = (g.value(b.st), g.value(b.ts));
        let expect = match pick {
            0 => ts.clone(),
            1 => st.clone(),
            _ => st.zip_map(ts, |a, b| 0.5 * (a + b)).unwrap(),
        };
        assert_close(g.value(b.velocity), &expect, 1e-15);
    }
}

#[test]
fn velocity_sum_over_blocks_feeds_velocity_block() {
    let cfg = ModelConfig { depth: 3, ..small() };
    let mut p = Parameters::init(&cfg, 29).unwrap();
    randomize(&mut p, 30);
    let x = random_input(&[1, 3, 2, 8, 4], 31);
    let (out, g) = full_forward(&cfg, &p, &x);
    let mut sum = g.value(out.blocks[0].velocity).clone();
    for b in &out.blocks[1..] {
        sum = sum.zip_map(g.value(b.velocity), |a, c| a + c).unwrap();
    }
    let f_v = with_ctx(&cfg, &p, |ctx| {
        let v = ctx.g.constant(sum);
        let y = ctx.temporal_block("velocity.temporal", v).unwrap();
        ctx.g.value(y).clone()
    });
    assert_close(&f_v, g.value(out.f_v.unwrap()), 1e-12);
}

#[test]
fn without_velocity_branch_velocity_comes_from_keypoints() {
    let cfg = ModelConfig { ablation: Ablation { velocity_branch: false, ..Ablation::default() }, ..small() };
    let p = Parameters::<f64>::init(&cfg, 32).unwrap();
    assert!(p.names().all(|n| !n.starts_with("velocity.") && !n.starts_with("decoder.velocity")));
    let (out, g) = full_forward(&cfg, &p, &random_input(&[1, 3, 2, 8, 4], 33));
    assert!(out.f_v.is_none());
    let k = g.value(out.keypoints).index_axis0(0);
    let expect = k.index_axis0(2).zip_map(&k.index_axis0(0), |a, b| a - b).unwrap();
    assert_eq!(g.value(out.velocity).index_axis0(0), expect);
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..5,
        1usize..6,
        2usize..4,
        1usize..4,
        1usize..3,
        1usize..3,
        (1usize..3, 2usize..10, 2usize..6),
        any::<(bool, bool, u8)>(),
        prop_oneof![Just(1usize), Just(3)],
    )
        .prop_map(|(window, joints, dims, heads, per_head, depth, (ch, rows, steps), (vb, vf, src), kernel)| {
            ModelConfig {
                window,
                joints,
                dims,
                embed_dim: heads * per_head,
                depth,
                heads,
                mlp_ratio: 1 + (depth % 2),
                frame_shape: [ch, rows, steps],
                encoder_channels: [2, 3],
                kernel,
                ablation: Ablation {
                    velocity_branch: vb,
                    velocity_fusion: vf,
                    velocity_source: [VelocitySource::Ts, VelocitySource::St, VelocitySource::TsSt][src as usize % 3],
                },
                ..ModelConfig::default()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn shape_contract(cfg in config_strategy(), batch in 1usize..3, seed in 0u64..1000) {
        let model = VstPose::<f64>::new(cfg.clone(), seed).unwrap();
        let [ch, rows, steps] = cfg.frame_shape;
        let x = random_input(&[batch, cfg.window, ch, rows, steps], seed);
        let out = model.forward(&x).unwrap();
        prop_assert_eq!(out.keypoints.shape(), &[batch, cfg.window, cfg.joints, cfg.dims]);
        prop_assert_eq!(out.velocity.shape(), &[batch, cfg.joints, cfg.dims]);
        prop_assert!(out.keypoints.is_finite() && out.velocity.is_finite());
    }
}
