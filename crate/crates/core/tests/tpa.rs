use tucl::dur::{dur_loss, partition, DeltaMode};
use tucl::losses::{seg_loss, total_loss, LossWeights};
use tucl::model::{ModelConfig, TuclModel};
use tucl::phantom::{generate, PhantomSpec};
use tucl::rng::RngStream;
use tucl::tensor::{Graph, Tensor};
use tucl::tpa::{cycle_loss, tpa_forward, PromptSet, TpaBlocks};

const TOL: f64 = 1e-10;

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let cols = t.shape()[1];
    let data: Vec<f64> = perm.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn run(blocks: &TpaBlocks, f_seg: &Tensor, prompts: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::no_grad();
    let b = blocks.bind(&mut g);
    let f = g.constant(f_seg.clone());
    let p = g.constant(prompts.clone());
    let out = tpa_forward(&mut g, f, p, &b).unwrap();
    (g.value(out.fused).clone(), g.value(out.prompt_features).clone())
}

fn setup(seed: u64) -> (TpaBlocks, Tensor, Tensor) {
    let mut rng = RngStream::new(seed);
    let blocks = TpaBlocks::new(8, 16, 2, &mut rng).unwrap();
    let f_seg = Tensor::randn(&[27, 16], 1.0, &mut rng);
    let prompts = PromptSet::new(8, &mut rng).embeddings;
    (blocks, f_seg, prompts)
}

#[test]
fn equivariant_to_segmentation_token_order() {
    for seed in 0..5 {
        let (blocks, f_seg, prompts) = setup(seed);
        let mut perm: Vec<usize> = (0..27).collect();
        RngStream::new(seed + 100).shuffle(&mut perm);
        let (fused, _) = run(&blocks, &f_seg, &prompts);
        let (fused_p, _) = run(&blocks, &permute_rows(&f_seg, &perm), &prompts);
        let expect = permute_rows(&fused, &perm);
        for (a, b) in fused_p.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < TOL);
        }
    }
}

#[test]
fn fused_output_ignores_prompt_order() {
    let (blocks, f_seg, prompts) = setup(7);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let (fused, feats) = run(&blocks, &f_seg, &prompts);
    let (fused_p, feats_p) = run(&blocks, &f_seg, &permute_rows(&prompts, &perm));
    for (a, b) in fused_p.data().iter().zip(fused.data()) {
        assert!((a - b).abs() < TOL);
    }
    // The refined prompt features follow the prompt rows.
    for (a, b) in feats_p.data().iter().zip(permute_rows(&feats, &perm).data()) {
        assert!((a - b).abs() < TOL);
    }
}

fn phantom() -> (tucl::volume::MultiContrastVolume, tucl::volume::RegionMask) {
    generate(&PhantomSpec {
        dims: [12, 12, 12],
        center: [5.5; 3],
        radii: [4.0, 2.5, 1.5],
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn config(use_tpa: bool) -> ModelConfig {
    ModelConfig {
        token_width: 16,
        prompt_width: 8,
        use_tpa,
        ..ModelConfig::default()
    }
}

/// Gradients of the full objective for every parameter, by name.
fn gradients(model: &TuclModel) -> Vec<(String, Option<Vec<f64>>)> {
    let (x, y) = phantom();
    let part = partition(&vec![0.0; 1728], DeltaMode::default()).unwrap();
    let w = LossWeights::default();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &x, true, &mut RngStream::new(3)).unwrap();
    let seg = seg_loss(&mut g, &out.probs, &y).unwrap();
    let tpa = match out.prompt_features {
        Some(f) => cycle_loss(&mut g, out.params.prompts, f, &out.probs, &out.params.phi).unwrap(),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let dur = dur_loss(&mut g, &out.probs, &y, &part, w.alpha, w.beta).unwrap();
    let total = total_loss(&mut g, seg, tpa, dur, &w).unwrap();
    g.backward(total).unwrap();
    model
        .params()
        .into_iter()
        .zip(out.params.vars())
        .map(|((name, _), v)| (name, g.grad(v).map(<[f64]>::to_vec)))
        .collect()
}

fn is_attention_param(name: &str) -> bool {
    name.starts_with("tpa.") || name.starts_with("phi.") || name == "prompts"
}

#[test]
fn every_attention_parameter_receives_gradient() {
    let model = TuclModel::new(config(true), 11).unwrap();
    let grads = gradients(&model);
    assert!(grads.iter().any(|(n, _)| n == "prompts"));
    for (name, grad) in &grads {
        let grad = grad.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().all(|v| v.is_finite()), "{name}");
        assert!(grad.iter().any(|&v| v != 0.0), "{name} gradient is zero");
    }
}

#[test]
fn prompts_learn_through_both_paths() {
    // With the cycle weight off, prompts still get gradient through the fused tokens.
    let model = TuclModel::new(config(true), 12).unwrap();
    let (x, y) = phantom();
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &x, false, &mut RngStream::new(0)).unwrap();
    let seg = seg_loss(&mut g, &out.probs, &y).unwrap();
    g.backward(seg).unwrap();
    let grad = g.grad(out.params.prompts).expect("prompt gradient");
    assert!(grad.iter().any(|&v| v != 0.0));
}

#[test]
fn disabled_attention_leaves_its_parameters_untouched() {
    let model = TuclModel::new(config(false), 11).unwrap();
    for (name, grad) in gradients(&model) {
        let moved = grad.is_some_and(|g| g.iter().any(|&v| v != 0.0));
        assert_eq!(moved, !is_attention_param(&name), "{name}");
    }
}
