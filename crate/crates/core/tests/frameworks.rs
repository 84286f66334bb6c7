//! Framework objectives probed from the outside: stop-gradients, the loss
//! mix, target handling and checkpoint files.

use dimcl::frameworks::{
    read_checkpoint, save_checkpoint, write_checkpoint, Architecture, BackboneSpec, FrameworkKind,
    FrameworkOptions, FrameworkState, Network,
};
use dimcl::losses::LossMixConfig;
use dimcl::metrics::feature_diversity;
use dimcl::numcore::{Graph, Matrix, Rng};

fn arch() -> Architecture {
    Architecture { backbone: BackboneSpec::Mlp { input: 6, hidden: vec![10] }, proj_hidden: 12, dim: 5, pred_hidden: 7 }
}

fn state(kind: FrameworkKind, lambda: f64, seed: u64) -> FrameworkState {
    let mix = LossMixConfig::new(lambda, 0.5).unwrap();
    FrameworkState::new(kind, &arch(), mix, FrameworkOptions::default(), 3, &Rng::new(seed)).unwrap()
}

fn views(seed: u64) -> (Matrix, Matrix, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let a = Matrix::from_fn(8, 6, |_, _| rng.normal());
    let b = Matrix::from_fn(8, 6, |_, _| rng.normal());
    (a, b, (0..8).map(|i| i % 3).collect())
}

/// Central difference of `f` in online parameter `(p, k)` of `s`.
fn online_fd(s: &FrameworkState, p: usize, k: usize, f: impl Fn(&FrameworkState) -> f64) -> f64 {
    let h = 1e-6;
    let shifted = |delta: f64| {
        let mut t = s.clone();
        t.encoder.params_mut()[p].data_mut()[k] += delta;
        f(&t)
    };
    (shifted(h) - shifted(-h)) / (2.0 * h)
}

#[test]
fn simsiam_gradient_treats_the_key_branch_as_constant() {
    let (a, b, labels) = views(1);
    let siam = state(FrameworkKind::SimSiam, 0.1, 2);

    let mut g = Graph::new();
    let o = siam.record_objective(&mut g, &a, &b, &labels).unwrap();
    let grads = g.backward(o.total).unwrap();

    // Same weights with the key branch frozen in a separate target copy.
    let mut frozen = siam.clone();
    frozen.kind = FrameworkKind::Byol;
    frozen.target = Some(siam.encoder.clone());
    let frozen_total = |s: &FrameworkState| s.objective(&a, &b, &labels).unwrap().2;
    let live_total = |s: &FrameworkState| {
        let mut t = s.clone();
        t.kind = FrameworkKind::SimSiam;
        t.target = None;
        t.objective(&a, &b, &labels).unwrap().2
    };

    let mut moved = false;
    for p in 0..siam.encoder.params().len() {
        let analytic = grads.get(o.trainable[p]).unwrap();
        for k in [0, analytic.len() / 2, analytic.len() - 1] {
            let fd = online_fd(&frozen, p, k, frozen_total);
            let err = (fd - analytic.data()[k]).abs() / fd.abs().max(1e-2);
            assert!(err < 1e-5, "param {p}[{k}]: fd {fd} vs autodiff {}", analytic.data()[k]);
            moved |= (online_fd(&frozen, p, k, live_total) - fd).abs() > 1e-6;
        }
    }
    assert!(moved, "the probe should see the key branch move when it is not stopped");
}

#[test]
fn byol_target_receives_no_gradient_and_freezes_at_unit_momentum() {
    let (a, b, labels) = views(3);
    let mut s = state(FrameworkKind::Byol, 0.1, 4);
    s.options.ema_momentum = 1.0;
    let before = s.target.clone().unwrap();
    for _ in 0..3 {
        s.step_on_views(&a, &b, &labels, 0.05).unwrap();
    }
    let after = s.target.as_ref().unwrap();
    for (x, y) in before.params().iter().zip(after.params()) {
        assert_eq!(x.data(), y.data());
    }
    assert_ne!(before.params()[0].data(), s.encoder.params()[0].data());

    // A perturbed target changes the objective value, yet the optimizer's
    // parameter list never includes it.
    let mut g = Graph::new();
    let o = s.record_objective(&mut g, &a, &b, &labels).unwrap();
    let online = s.encoder.num_params() + s.predictor.as_ref().unwrap().num_params();
    let counted: usize = o.trainable.iter().map(|&id| g.value(id).len()).sum();
    assert_eq!(counted, online);
}

#[test]
fn objective_mix_is_linear_in_lambda() {
    let (a, b, labels) = views(5);
    for kind in FrameworkKind::ALL {
        let (base0, dim0, _) = state(kind, 0.0, 6).objective(&a, &b, &labels).unwrap();
        for lambda in [0.0, 0.1, 0.37, 1.0] {
            let (base, dim, total) = state(kind, lambda, 6).objective(&a, &b, &labels).unwrap();
            assert_eq!((base, dim), (base0, dim0), "{kind}: parts do not depend on λ");
            let expected = lambda * dim + (1.0 - lambda) * base;
            assert!((total - expected).abs() < 1e-12, "{kind} λ={lambda}");
        }
    }
}

#[test]
fn regularized_training_keeps_features_diverse() {
    let mut rng = Rng::new(7);
    let mut s = state(FrameworkKind::SimSiam, 0.1, 8);
    for _ in 0..20 {
        let a = Matrix::from_fn(16, 6, |_, _| rng.normal());
        let b = Matrix::from_fn(16, 6, |r, c| a.get(r, c) + 0.1 * rng.normal());
        let labels = vec![0; 16];
        s.step_on_views(&a, &b, &labels, 0.05).unwrap();
        let v = s.forward_views(&a, &b).unwrap();
        assert!(feature_diversity(&v.ab).unwrap().value() > 0.0);
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, labels) = views(9);
    for kind in FrameworkKind::ALL {
        let mut s = state(kind, 0.1, 10);
        s.step_on_views(&a, &b, &labels, 0.05).unwrap();
        let path = dir.path().join(format!("{kind}.bin"));
        write_checkpoint(&s, std::fs::File::create(&path).unwrap()).unwrap();
        let restored = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
        assert_eq!(restored.kind, kind);
        assert_eq!(restored.step, s.step);
        assert_eq!(save_checkpoint(&restored), std::fs::read(&path).unwrap());
        let (x, y) = (s.represent(&a, 4).unwrap(), restored.represent(&a, 4).unwrap());
        assert!(x.max_abs_diff(&y).unwrap() < 1e-4, "f32 storage keeps features close");
    }
}
