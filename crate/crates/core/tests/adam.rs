use mrrn_core::adam::{AdamConfig, AdamState};

/// Textbook ADAM on one scalar, written out longhand.
fn reference_trajectory(x0: f64, a: f64, steps: usize, cfg: AdamConfig) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = 2.0 * a * x;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t as i32));
        let vh = v / (1.0 - cfg.beta2.powi(t as i32));
        x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        out.push(x);
    }
    out
}

#[test]
fn quadratic_trajectory_matches_reference() {
    for (x0, a, lr) in [(1.0, 0.5, 0.1), (-3.0, 2.0, 1e-4), (0.25, 10.0, 0.01)] {
        let cfg = AdamConfig::with_lr(lr);
        let expected = reference_trajectory(x0, a, 5, cfg);
        let mut state = AdamState::<f64>::new(cfg, [1]);
        let mut x = [x0];
        for want in expected {
            let g = [2.0 * a * x[0]];
            state.step(&mut [&mut x[..]], &[&g[..]]).unwrap();
            assert!((x[0] - want).abs() <= 1e-12, "{} vs {want}", x[0]);
        }
        assert_eq!(state.t, 5);
    }
}

#[test]
fn first_step_moves_by_lr() {
    // With bias correction the first step is lr·sign(g) up to eps.
    let cfg = AdamConfig::with_lr(0.01);
    let mut state = AdamState::<f64>::new(cfg, [3]);
    let mut p = [1.0, 1.0, 1.0];
    state.step(&mut [&mut p[..]], &[&[5.0, -0.2, 1e3][..]]).unwrap();
    for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((v - (1.0 + s * 0.01)).abs() < 1e-8);
    }
}

#[test]
fn zero_gradient_leaves_params() {
    let mut state = AdamState::<f32>::new(AdamConfig::default(), [4]);
    let mut p = [0.5f32; 4];
    state.step(&mut [&mut p[..]], &[&[0.0; 4][..]]).unwrap();
    assert_eq!(p, [0.5; 4]);
    assert_eq!(state.first_moment(0), &[0.0; 4]);
}

#[test]
fn length_mismatch_is_an_error() {
    let mut state = AdamState::<f64>::new(AdamConfig::default(), [2]);
    let mut p = [0.0; 3];
    assert!(state.step(&mut [&mut p[..]], &[&[1.0, 2.0, 3.0][..]]).is_err());
    assert!(state.step(&mut [], &[]).is_err());
}
