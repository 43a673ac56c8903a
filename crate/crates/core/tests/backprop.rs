use dagcnn::fixtures::{random_backbone, random_dag, random_input};
use dagcnn::multiscale::{backbone_node, build_chain, build_multiscale};
use dagcnn::train::{gradient_check, GradCheckOptions};
use dagcnn::{BackwardMode, InitScheme, LayerKind, TapSet};

#[test]
fn fast_backward_matches_reference_on_random_dags() {
    for seed in 0..50 {
        let g = random_dag(seed, 12, 3);
        assert!(g.len() <= 12);
        let x = random_input(&g, seed);
        let mut ctx = g.new_context();
        g.forward(&mut ctx, &x, (seed % 3) as usize).unwrap();
        let fast = g.backward(&mut ctx).unwrap();
        let reference = g.backward_reference(&mut ctx).unwrap();
        let diff = fast.max_abs_diff(&reference);
        assert!(diff <= 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn random_dags_have_fan_out() {
    let branching = (0..50).filter(|&s| random_dag(s, 12, 3).nodes().iter().any(|n| n.fan_out() > 1)).count();
    assert!(branching > 10, "only {branching} of 50 DAGs branch");
}

#[test]
fn random_dags_pass_gradient_check() {
    for seed in 0..10 {
        let g = random_dag(seed, 12, 3);
        let x = random_input(&g, seed);
        let rep = gradient_check(&g, &x, 1, &GradCheckOptions { seed, ..Default::default() }).unwrap();
        assert!(rep.max_rel_error < 1e-4, "seed {seed}: {:?}", rep.worst);
    }
}

#[test]
fn single_final_tap_recovers_the_chain() {
    for seed in 0..10 {
        let bb = random_backbone(seed, 3, 12, 6);
        let init = InitScheme::Uniform { seed, scale: 0.5 };
        let dag = build_multiscale(&bb, &TapSet::last(&bb), 4, &init).unwrap();
        let chain = build_chain(&bb, 4, &init).unwrap();
        let x = random_input(&chain, seed);
        let (mut cd, mut cc) = (dag.new_context(), chain.new_context());
        let ld = dag.forward(&mut cd, &x, 2).unwrap();
        let lc = chain.forward(&mut cc, &x, 2).unwrap();
        assert!((ld - lc).abs() <= 1e-12);
        let gd = dag.backward(&mut cd).unwrap();
        let gc = chain.backward(&mut cc).unwrap();
        for (node, k) in chain.param_slots() {
            let diff = gd.get(node, k).max_abs_diff(gc.get(node, k)).unwrap();
            assert!(diff <= 1e-12, "seed {seed} node {node}: {diff}");
        }
    }
}

#[test]
fn multiscale_gradient_check_two_to_five_taps() {
    for seed in 0..5 {
        let bb = random_backbone(seed, 5, 16, 8);
        let relus = bb.relu_layers();
        for taps in 2..=5 {
            let chosen: Vec<usize> = relus.iter().rev().take(taps).copied().collect();
            let g = build_multiscale(&bb, &TapSet::new(chosen, &bb).unwrap(), 5, &InitScheme::Standard { seed, head_std: 0.3 })
                .unwrap();
            let x = random_input(&g, seed);
            let opts = GradCheckOptions { seed, max_entries: 16, ..Default::default() };
            let rep = gradient_check(&g, &x, seed as usize % 5, &opts).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}, {taps} taps: {:?}", rep.worst);
        }
    }
}

#[test]
fn reference_mode_also_passes_gradient_check() {
    let bb = random_backbone(3, 4, 10, 4);
    let g = build_multiscale(&bb, &TapSet::all(&bb), 3, &InitScheme::Standard { seed: 3, head_std: 0.3 }).unwrap();
    let x = random_input(&g, 3);
    let opts = GradCheckOptions { mode: BackwardMode::Reference, max_entries: 16, ..Default::default() };
    assert!(gradient_check(&g, &x, 0, &opts).unwrap().max_rel_error < 1e-4);
}

#[test]
fn broken_add_backward_is_detected() {
    let bb = random_backbone(4, 4, 10, 4);
    let g = build_multiscale(&bb, &TapSet::all(&bb), 3, &InitScheme::Standard { seed: 4, head_std: 0.3 }).unwrap();
    let x = random_input(&g, 4);
    let opts = GradCheckOptions { add_backward_scale: 0.5, max_entries: 16, ..Default::default() };
    let rep = gradient_check(&g, &x, 0, &opts).unwrap();
    assert!(rep.max_rel_error > 0.4, "{}", rep.max_rel_error);
}

#[test]
fn tapped_relus_fan_out() {
    let bb = random_backbone(5, 4, 8, 4);
    let g = build_multiscale(&bb, &TapSet::all(&bb), 3, &InitScheme::standard(5)).unwrap();
    let relus = bb.relu_layers();
    for &l in &relus[..relus.len() - 1] {
        let n = g.node(backbone_node(l));
        assert_eq!(n.kind(), &LayerKind::Relu);
        assert_eq!(n.fan_out(), 2);
    }
    assert_eq!(g.node(backbone_node(*relus.last().unwrap())).fan_out(), 1);
}
